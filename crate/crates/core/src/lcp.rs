//! Linear complementarity problems: find `z` with
//! `0 <= z`, `0 <= w = M z + q_hat`, `z . w = 0`.
//!
//! Two solvers sit behind [`solve_lcp`]: projected Gauss-Seidel with an
//! active-set polish (the default, for the symmetric positive semidefinite
//! operators produced by constraint assembly) and Lemke's complementary
//! pivoting with a lexicographic ratio test (used for non-symmetric `M`, or
//! on request). [`enumerate_lcp_oracle`] is an exhaustive reference solver
//! for small problems.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LcpProblem {
    pub m: DMatrix<f64>,
    pub q_hat: DVector<f64>,
}

impl LcpProblem {
    pub fn new(m: DMatrix<f64>, q_hat: DVector<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::arg(format!(
                "LCP matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() != q_hat.len() {
            return Err(Error::arg(format!(
                "LCP matrix has size {} but q_hat has length {}",
                m.nrows(),
                q_hat.len()
            )));
        }
        if m.iter().chain(q_hat.iter()).any(|x| !x.is_finite()) {
            return Err(Error::arg("LCP data has non-finite entries"));
        }
        Ok(Self { m, q_hat })
    }

    pub fn size(&self) -> usize {
        self.q_hat.len()
    }

    pub fn omega(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.m * z + &self.q_hat
    }

    fn is_symmetric(&self) -> bool {
        let scale = 1.0 + self.m.abs().max();
        (&self.m - self.m.transpose()).abs().max() <= 1e-10 * scale
    }

    /// Parses the plain-text exchange format: the size `k`, then the `k*k`
    /// entries of `M` row by row, then the `k` entries of `q_hat`, all
    /// whitespace separated. Lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(str::split_whitespace);
        let k: usize = tokens
            .next()
            .ok_or_else(|| Error::Format("empty LCP file".into()))?
            .parse()
            .map_err(|e| Error::Format(format!("bad size: {e}")))?;
        let mut nums = Vec::with_capacity(k * k + k);
        for (i, tok) in tokens.enumerate() {
            let x: f64 = tok
                .parse()
                .map_err(|e| Error::Format(format!("bad number #{}: `{tok}` ({e})", i + 1)))?;
            nums.push(x);
        }
        if nums.len() != k * k + k {
            return Err(Error::Format(format!(
                "expected {} numbers after the size, found {}",
                k * k + k,
                nums.len()
            )));
        }
        let m = DMatrix::from_row_slice(k, k, &nums[..k * k]);
        let q = DVector::from_column_slice(&nums[k * k..]);
        Self::new(m, q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LcpStatus {
    Solved,
    Infeasible,
    IterationLimit,
}

impl fmt::Display for LcpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LcpStatus::Solved => "solved",
            LcpStatus::Infeasible => "infeasible",
            LcpStatus::IterationLimit => "iteration_limit",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LcpMethod {
    ProjectedGaussSeidel,
    Lemke,
    Enumeration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LcpSolution {
    pub z: DVector<f64>,
    pub omega: DVector<f64>,
    pub status: LcpStatus,
    pub residual: f64,
    /// Sweeps (PGS) or pivots (Lemke) performed.
    pub iterations: usize,
    pub method: LcpMethod,
}

impl LcpSolution {
    fn finish(
        p: &LcpProblem,
        z: DVector<f64>,
        status: LcpStatus,
        iterations: usize,
        method: LcpMethod,
    ) -> Self {
        let omega = p.omega(&z);
        let residual = residual_of(&z, &omega);
        Self {
            z,
            omega,
            status,
            residual,
            iterations,
            method,
        }
    }

    pub fn is_solved(&self) -> bool {
        self.status == LcpStatus::Solved
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LcpOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub method: LcpMethod,
}

impl Default for LcpOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-8,
            method: LcpMethod::ProjectedGaussSeidel,
        }
    }
}

fn residual_of(z: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let neg_z = z.iter().fold(0.0_f64, |a, &x| a.max(-x));
    let neg_w = w.iter().fold(0.0_f64, |a, &x| a.max(-x));
    let comp: f64 = z.iter().zip(w.iter()).map(|(a, b)| (a * b).abs()).sum();
    neg_z.max(neg_w).max(comp)
}

/// `max(|min(z,0)|_inf, |min(Mz+q_hat,0)|_inf, sum_i |z_i (Mz+q_hat)_i|)`.
pub fn complementarity_residual(p: &LcpProblem, z: &DVector<f64>) -> f64 {
    residual_of(z, &p.omega(z))
}

pub fn solve_lcp(p: &LcpProblem, opts: &LcpOptions) -> LcpSolution {
    let k = p.size();
    if k == 0 || p.q_hat.iter().all(|&x| x >= 0.0) {
        return LcpSolution::finish(p, DVector::zeros(k), LcpStatus::Solved, 0, opts.method);
    }
    match opts.method {
        LcpMethod::Lemke => lemke(p, opts),
        LcpMethod::Enumeration => enumerate_lcp_oracle(p),
        LcpMethod::ProjectedGaussSeidel => {
            if !p.is_symmetric() || (0..k).any(|i| p.m[(i, i)] <= 0.0) {
                lemke(p, opts)
            } else {
                pgs(p, opts)
            }
        }
    }
}

/// Solves the equality system on the active set `active` and returns the
/// full-length candidate, or `None` when the reduced system is singular.
fn solve_active(p: &LcpProblem, active: &[usize]) -> Option<DVector<f64>> {
    let k = p.size();
    let mut z = DVector::zeros(k);
    if active.is_empty() {
        return Some(z);
    }
    let n = active.len();
    let sub = DMatrix::from_fn(n, n, |r, c| p.m[(active[r], active[c])]);
    let rhs = DVector::from_fn(n, |r, _| -p.q_hat[active[r]]);
    let lu = sub.lu();
    let sol = lu.solve(&rhs)?;
    if sol.iter().any(|x| !x.is_finite()) {
        return None;
    }
    for (r, &i) in active.iter().enumerate() {
        z[i] = sol[r];
    }
    Some(z)
}

fn pgs(p: &LcpProblem, opts: &LcpOptions) -> LcpSolution {
    let k = p.size();
    let mut z = DVector::zeros(k);
    let mut last_polished: Option<Vec<usize>> = None;
    for sweep in 1..=opts.max_iter {
        for i in 0..k {
            let r = p.q_hat[i] + p.m.row(i).dot(&z.transpose());
            z[i] = (z[i] - r / p.m[(i, i)]).max(0.0);
        }
        let active: Vec<usize> = (0..k).filter(|&i| z[i] > 0.0).collect();
        if last_polished.as_ref() != Some(&active) {
            if let Some(candidate) = solve_active(p, &active) {
                if complementarity_residual(p, &candidate) <= opts.tol {
                    return LcpSolution::finish(
                        p,
                        candidate,
                        LcpStatus::Solved,
                        sweep,
                        LcpMethod::ProjectedGaussSeidel,
                    );
                }
            }
            last_polished = Some(active);
        }
        if complementarity_residual(p, &z) <= opts.tol {
            return LcpSolution::finish(p, z, LcpStatus::Solved, sweep, LcpMethod::ProjectedGaussSeidel);
        }
    }
    LcpSolution::finish(
        p,
        z,
        LcpStatus::IterationLimit,
        opts.max_iter,
        LcpMethod::ProjectedGaussSeidel,
    )
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Lemke's algorithm with covering vector of ones.
///
/// Tableau columns: `w_0..w_k`, `z_0..z_k`, the artificial `z0`, then the
/// right-hand side. The `w` block of the tableau always holds `B^-1`, which
/// the lexicographic ratio test uses to break ties.
fn lemke(p: &LcpProblem, opts: &LcpOptions) -> LcpSolution {
    let k = p.size();
    let art = 2 * k;
    let rhs = 2 * k + 1;
    let mut t = DMatrix::zeros(k, 2 * k + 2);
    for i in 0..k {
        t[(i, i)] = 1.0;
        for j in 0..k {
            t[(i, k + j)] = -p.m[(i, j)];
        }
        t[(i, art)] = -1.0;
        t[(i, rhs)] = p.q_hat[i];
    }
    let mut basis: Vec<usize> = (0..k).collect();

    let pivot = |t: &mut DMatrix<f64>, r: usize, c: usize| {
        let pv = t[(r, c)];
        for col in 0..t.ncols() {
            t[(r, col)] /= pv;
        }
        for i in 0..t.nrows() {
            if i != r {
                let f = t[(i, c)];
                if f != 0.0 {
                    for col in 0..t.ncols() {
                        t[(i, col)] -= f * t[(r, col)];
                    }
                }
            }
        }
    };

    // lexicographically smallest row of (rhs, B^-1) among the most negative q
    let mut r = 0;
    for i in 1..k {
        let (a, b) = (t[(i, rhs)], t[(r, rhs)]);
        let tie = approx_eq(a, b);
        if (a < b && !tie) || (tie && lex_less(&t, i, r, k, -1.0, -1.0)) {
            r = i;
        }
    }
    pivot(&mut t, r, art);
    let mut leaving = basis[r];
    basis[r] = art;

    let max_pivots = opts.max_iter.max(50 * (k + 1));
    for it in 1..=max_pivots {
        let entering = if leaving < k { leaving + k } else { leaving - k };
        let mut best: Option<usize> = None;
        for i in 0..k {
            let d = t[(i, entering)];
            if d <= 1e-12 {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (ri, rb) = (t[(i, rhs)] / d, t[(b, rhs)] / t[(b, entering)]);
                    let tie = approx_eq(ri, rb);
                    if (ri < rb && !tie) || (tie && lex_less(&t, i, b, k, d, t[(b, entering)])) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let Some(r) = best else {
            let z = extract_z(&t, &basis, k);
            return LcpSolution::finish(p, z, LcpStatus::Infeasible, it, LcpMethod::Lemke);
        };
        pivot(&mut t, r, entering);
        leaving = basis[r];
        basis[r] = entering;
        if leaving == art {
            let mut z = extract_z(&t, &basis, k);
            z.iter_mut().for_each(|x| *x = x.max(0.0));
            // tidy the pivoting round-off with one exact solve on the final active set
            let active: Vec<usize> = (0..k).filter(|&i| z[i] > 0.0).collect();
            if let Some(c) = solve_active(p, &active) {
                if complementarity_residual(p, &c) <= complementarity_residual(p, &z) {
                    z = c;
                }
            }
            let mut sol = LcpSolution::finish(p, z, LcpStatus::Solved, it, LcpMethod::Lemke);
            if sol.residual > opts.tol {
                sol.status = LcpStatus::IterationLimit;
            }
            return sol;
        }
    }
    let z = extract_z(&t, &basis, k);
    LcpSolution::finish(p, z, LcpStatus::IterationLimit, max_pivots, LcpMethod::Lemke)
}

/// Lexicographic comparison of the `B^-1` rows of `a` and `b`, each scaled
/// by its pivot-column entry.
fn lex_less(t: &DMatrix<f64>, a: usize, b: usize, k: usize, da: f64, db: f64) -> bool {
    for col in 0..k {
        let (x, y) = (t[(a, col)] / da, t[(b, col)] / db);
        if !approx_eq(x, y) {
            return x < y;
        }
    }
    false
}

fn extract_z(t: &DMatrix<f64>, basis: &[usize], k: usize) -> DVector<f64> {
    let mut z = DVector::zeros(k);
    for (row, &var) in basis.iter().enumerate() {
        if (k..2 * k).contains(&var) {
            z[var - k] = t[(row, 2 * k + 1)];
        }
    }
    z
}

/// Exhaustive reference solver: tries every active/inactive partition in
/// order of its bitmask and returns the first one that is feasible.
///
/// Intended for testing; problems larger than 12 are rejected.
pub fn enumerate_lcp_oracle(p: &LcpProblem) -> LcpSolution {
    let k = p.size();
    assert!(k <= 12, "enumeration oracle limited to k <= 12, got {k}");
    let scale = 1.0 + p.q_hat.amax() + p.m.amax();
    let eps = 1e-10 * scale;
    for mask in 0u32..(1u32 << k) {
        let active: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let Some(z) = solve_active(p, &active) else {
            continue;
        };
        let w = p.omega(&z);
        let ok = (0..k).all(|i| {
            if mask & (1 << i) != 0 {
                z[i] >= -eps
            } else {
                w[i] >= -eps
            }
        });
        if ok {
            return LcpSolution::finish(p, z, LcpStatus::Solved, mask as usize, LcpMethod::Enumeration);
        }
    }
    LcpSolution::finish(p, DVector::zeros(k), LcpStatus::Infeasible, 1 << k, LcpMethod::Enumeration)
}
