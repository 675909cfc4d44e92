//! Recorded target trajectories.
//!
//! CSV with header `t,task,x,y,z` or `t,task,x,y,z,qw,qx,qy,qz`. Times must
//! not decrease down the file. Positions are interpolated linearly and
//! orientations by slerp; outside the recorded span the nearest sample holds.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{quat_from_wxyz, slerp, Quat, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSample {
    pub t: f64,
    pub position: Vec3,
    pub orientation: Option<Quat>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetStream {
    tracks: BTreeMap<String, Vec<StreamSample>>,
}

const SHORT: [&str; 5] = ["t", "task", "x", "y", "z"];
const LONG: [&str; 9] = ["t", "task", "x", "y", "z", "qw", "qx", "qy", "qz"];

impl TargetStream {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        let with_rotation = if header == SHORT {
            false
        } else if header == LONG {
            true
        } else {
            return Err(Error::Format(format!(
                "header must be `{}` or `{}`, got `{}`",
                SHORT.join(","),
                LONG.join(","),
                header.join(",")
            )));
        };
        let mut tracks: BTreeMap<String, Vec<StreamSample>> = BTreeMap::new();
        let mut last_t = f64::NEG_INFINITY;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |i: usize| -> Result<f64> {
                let s = &rec[i];
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Format(format!("line {line}: bad number `{s}` in column `{}`", header[i])))
            };
            let t = num(0)?;
            if t < last_t {
                return Err(Error::Format(format!(
                    "line {line}: time {t} is earlier than the previous row ({last_t})"
                )));
            }
            last_t = t;
            let task = rec[1].to_owned();
            if task.is_empty() {
                return Err(Error::Format(format!("line {line}: empty task name")));
            }
            let position = Vec3::new(num(2)?, num(3)?, num(4)?);
            let orientation = if with_rotation {
                let w = [num(5)?, num(6)?, num(7)?, num(8)?];
                if w.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
                    return Err(Error::Format(format!("line {line}: zero quaternion")));
                }
                Some(quat_from_wxyz(w))
            } else {
                None
            };
            tracks.entry(task).or_default().push(StreamSample {
                t,
                position,
                orientation,
            });
        }
        Ok(Self { tracks })
    }

    pub fn tasks(&self) -> impl Iterator<Item = &String> {
        self.tracks.keys()
    }

    pub fn samples(&self, task: &str) -> Option<&[StreamSample]> {
        self.tracks.get(task).map(Vec::as_slice)
    }

    /// Time of the last sample over all tasks.
    pub fn end_time(&self) -> f64 {
        self.tracks
            .values()
            .filter_map(|s| s.last().map(|x| x.t))
            .fold(0.0, f64::max)
    }

    /// Interpolated pose of `task` at time `t`.
    pub fn sample(&self, task: &str, t: f64) -> Option<(Vec3, Option<Quat>)> {
        let s = self.tracks.get(task)?;
        let first = s.first()?;
        if t <= first.t {
            return Some((first.position, first.orientation));
        }
        // first index with sample time > t
        let k = s.partition_point(|x| x.t <= t);
        if k == s.len() {
            let last = &s[k - 1];
            return Some((last.position, last.orientation));
        }
        let (a, b) = (&s[k - 1], &s[k]);
        let span = b.t - a.t;
        let u = if span > 0.0 { (t - a.t) / span } else { 1.0 };
        let p = a.position.lerp(&b.position, u);
        let r = match (&a.orientation, &b.orientation) {
            (Some(qa), Some(qb)) => Some(slerp(qa, qb, u)),
            _ => None,
        };
        Some((p, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_is_constant() {
        let s = TargetStream::parse("t,task,x,y,z\n0.5,a,1,2,3\n").unwrap();
        for t in [0.0, 0.5, 10.0] {
            assert_eq!(s.sample("a", t).unwrap().0, Vec3::new(1.0, 2.0, 3.0));
        }
    }

    #[test]
    fn lerp_between_samples() {
        let s = TargetStream::parse("t,task,x,y,z\n0,a,0,0,0\n1,a,1,2,3\n").unwrap();
        let (p, r) = s.sample("a", 0.25).unwrap();
        assert!((p - Vec3::new(0.25, 0.5, 0.75)).norm() < 1e-15);
        assert!(r.is_none());
        assert_eq!(s.sample("a", -1.0).unwrap().0, Vec3::zeros());
        assert_eq!(s.sample("a", 5.0).unwrap().0, Vec3::new(1.0, 2.0, 3.0));
        assert!(s.sample("b", 0.0).is_none());
    }

    #[test]
    fn slerp_orientation() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let text = format!("t,task,x,y,z,qw,qx,qy,qz\n0,a,0,0,0,1,0,0,0\n2,a,0,0,0,{h},0,0,{h}\n");
        let s = TargetStream::parse(&text).unwrap();
        let (_, r) = s.sample("a", 1.0).unwrap();
        let r = r.unwrap();
        assert!((r.angle() - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((r.axis().unwrap().z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tasks_interleave() {
        let s = TargetStream::parse("t,task,x,y,z\n0,a,0,0,0\n0,b,1,1,1\n1,a,2,0,0\n1,b,3,1,1\n").unwrap();
        assert_eq!(s.tasks().count(), 2);
        assert!((s.sample("b", 0.5).unwrap().0.x - 2.0).abs() < 1e-15);
        assert_eq!(s.end_time(), 1.0);
    }

    #[test]
    fn decreasing_time_is_format_error_with_line() {
        let e = TargetStream::parse("t,task,x,y,z\n0,a,0,0,0\n1,a,0,0,0\n0.5,a,0,0,0\n").unwrap_err();
        match e {
            Error::Format(m) => assert!(m.contains("line 4"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_header_and_numbers() {
        assert!(matches!(TargetStream::parse("time,task,x,y,z\n"), Err(Error::Format(_))));
        assert!(matches!(
            TargetStream::parse("t,task,x,y,z\n0,a,0,zero,0\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            TargetStream::parse("t,task,x,y,z\n0,a,0,0\n"),
            Err(Error::Format(_))
        ));
    }
}
