//! Per-step metrics and their CSV form.

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub t: f64,
    pub delta: f64,
    pub delta_norm: f64,
    /// `sign(delta) * sqrt(|delta|)`, in metres.
    pub delta_root: f64,
    pub com: Vec3,
    pub max_penetration: f64,
    pub vertical_impulse: f64,
    pub contacts: usize,
    pub active_limits: usize,
    pub balance_impulse: f64,
    pub lcp_size: usize,
    pub lcp_residual: f64,
    pub energy: f64,
    /// Position error per target, in scenario order.
    pub task_errors: Vec<f64>,
    /// Normal impulse per plane, in scenario order.
    pub plane_impulses: Vec<f64>,
    /// Lowest collision point of the tracked segment and the plane height.
    pub track: Option<(f64, f64)>,
    /// Angle between each guide's tool axis and its guide direction, rad.
    pub guide_angles: Vec<f64>,
    /// Distance of each guided frame from its guide, m.
    pub guide_lateral: Vec<f64>,
}

/// Column names shared by every row of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLayout {
    pub tasks: Vec<String>,
    pub planes: Vec<String>,
    pub track: bool,
    pub guides: Vec<String>,
}

impl MetricsLayout {
    pub fn columns(&self) -> Vec<String> {
        let mut c: Vec<String> = [
            "t",
            "delta",
            "delta_norm",
            "delta_root",
            "com_x",
            "com_y",
            "com_z",
            "max_penetration",
            "vertical_impulse",
            "contacts",
            "active_limits",
            "balance_impulse",
            "lcp_size",
            "lcp_residual",
            "energy",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        c.extend(self.tasks.iter().map(|t| format!("err_{t}")));
        c.extend(self.planes.iter().map(|p| format!("impulse_{p}")));
        if self.track {
            c.push("track_z".into());
            c.push("track_plane_z".into());
        }
        for g in &self.guides {
            c.push(format!("angle_{g}"));
            c.push(format!("lateral_{g}"));
        }
        c
    }
}

/// Writes metrics CSV: a `#` comment line with the generation time, then
/// the column header, then one row per step. Only the first line varies
/// between identical runs.
pub struct MetricsWriter<W: Write> {
    out: csv::Writer<W>,
    columns: usize,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("writing metrics: {e}"))
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut sink: W, scenario: &str, layout: &MetricsLayout) -> Result<Self> {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(sink, "# balsim metrics scenario={scenario} generated={stamp}")
            .map_err(|e| Error::io("metrics", e))?;
        let mut out = csv::Writer::from_writer(sink);
        let cols = layout.columns();
        out.write_record(&cols).map_err(csv_err)?;
        Ok(Self {
            out,
            columns: cols.len(),
        })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        let mut row: Vec<String> = Vec::with_capacity(self.columns);
        let f = |x: f64| x.to_string();
        row.extend(
            [r.t, r.delta, r.delta_norm, r.delta_root, r.com.x, r.com.y, r.com.z, r.max_penetration, r.vertical_impulse]
                .map(f),
        );
        row.push(r.contacts.to_string());
        row.push(r.active_limits.to_string());
        row.push(f(r.balance_impulse));
        row.push(r.lcp_size.to_string());
        row.push(f(r.lcp_residual));
        row.push(f(r.energy));
        row.extend(r.task_errors.iter().copied().map(f));
        row.extend(r.plane_impulses.iter().copied().map(f));
        if let Some((a, b)) = r.track {
            row.push(f(a));
            row.push(f(b));
        }
        for (a, l) in r.guide_angles.iter().zip(&r.guide_lateral) {
            row.push(f(*a));
            row.push(f(*l));
        }
        if row.len() != self.columns {
            return Err(Error::Format(format!(
                "metrics row has {} fields, header has {}",
                row.len(),
                self.columns
            )));
        }
        self.out.write_record(&row).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(|e| Error::io("metrics", e))?;
        self.out
            .into_inner()
            .map_err(|e| Error::Format(format!("flushing metrics: {e}")))
    }
}
