use std::collections::HashMap;
use std::fmt;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// How the curve is evaluated between two calibration points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Use the value of the closest calibration point at or below `n`.
    Step,
    #[default]
    Linear,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Interpolation::Step),
            "linear" => Ok(Interpolation::Linear),
            other => Err(Error::Parse(format!("unknown interpolation mode {other:?}"))),
        }
    }
}

/// Aggregate throughput (4 KiB ops/s) as a function of the number of
/// concurrently active workers.
///
/// Values may be `+inf`, which disables the delay for that point.
#[derive(Clone, PartialEq)]
pub struct Curve {
    points: Vec<(u32, f64)>,
}

impl Curve {
    pub fn new(points: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let points: Vec<(u32, f64)> = points.into_iter().collect();
        if points.is_empty() {
            return Err(Error::InvalidProfile("curve has no points".into()));
        }
        for w in points.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::InvalidProfile(format!(
                    "curve keys must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(n, v) in &points {
            if n == 0 {
                return Err(Error::InvalidProfile("concurrency level 0 in curve".into()));
            }
            if v.is_nan() || v <= 0.0 {
                return Err(Error::InvalidProfile(format!(
                    "curve value at n={n} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(Curve { points })
    }

    /// A curve that never delays.
    pub fn unlimited() -> Self {
        Curve {
            points: vec![(1, f64::INFINITY)],
        }
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    pub fn levels(&self) -> impl Iterator<Item = u32> + '_ {
        self.points.iter().map(|p| p.0)
    }

    pub fn is_unlimited(&self) -> bool {
        self.points.iter().all(|p| p.1.is_infinite())
    }

    /// Aggregate throughput with `n` active workers.
    pub fn at(&self, n: f64, mode: Interpolation) -> f64 {
        let first = self.points[0];
        let last = *self.points.last().unwrap();
        if n <= first.0 as f64 {
            return first.1;
        }
        if n >= last.0 as f64 {
            return last.1;
        }
        let idx = self.points.partition_point(|p| (p.0 as f64) <= n) - 1;
        let (k0, v0) = self.points[idx];
        let (k1, v1) = self.points[idx + 1];
        match mode {
            Interpolation::Step => v0,
            Interpolation::Linear => {
                if v0.is_infinite() || v1.is_infinite() {
                    return f64::INFINITY;
                }
                let t = (n - k0 as f64) / (k1 - k0) as f64;
                v0 + (v1 - v0) * t
            }
        }
    }

    /// Concurrency level with the highest throughput; ties go to the smaller level.
    pub fn knee(&self) -> u32 {
        let mut best = self.points[0];
        for &p in &self.points[1..] {
            if p.1 > best.1 {
                best = p;
            }
        }
        best.0
    }

    pub fn peak(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl fmt::Debug for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(self.points.iter().map(|(k, v)| (k, v)))
            .finish()
    }
}

impl Serialize for Curve {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.points.len()))?;
        for (n, v) in &self.points {
            map.serialize_entry(&n.to_string(), v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Curve {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw: HashMap<String, f64> = HashMap::deserialize(deserializer)?;
        let mut points = Vec::with_capacity(raw.len());
        for (k, v) in raw {
            let n: u32 = k
                .trim()
                .parse()
                .map_err(|_| D::Error::custom(format!("bad concurrency level {k:?}")))?;
            points.push((n, v));
        }
        points.sort_by_key(|p| p.0);
        Curve::new(points).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nvmm_like() -> Curve {
        Curve::new([
            (1, 250_000.0),
            (2, 420_000.0),
            (4, 500_000.0),
            (8, 300_000.0),
            (16, 226_000.0),
        ])
        .unwrap()
    }

    #[test]
    fn knee_is_argmax() {
        assert_eq!(nvmm_like().knee(), 4);
        let flat = Curve::new([(1, 5.0), (2, 5.0), (4, 5.0)]).unwrap();
        assert_eq!(flat.knee(), 1);
    }

    #[test]
    fn step_and_linear_lookup() {
        let c = nvmm_like();
        assert_eq!(c.at(1.0, Interpolation::Linear), 250_000.0);
        assert_eq!(c.at(3.0, Interpolation::Step), 420_000.0);
        assert_eq!(c.at(3.0, Interpolation::Linear), 460_000.0);
        assert_eq!(c.at(6.0, Interpolation::Linear), 400_000.0);
        // clamped at both ends
        assert_eq!(c.at(0.5, Interpolation::Linear), 250_000.0);
        assert_eq!(c.at(64.0, Interpolation::Linear), 226_000.0);
    }

    #[test]
    fn rejects_bad_curves() {
        assert!(Curve::new([(2, 1.0), (1, 1.0)]).is_err());
        assert!(Curve::new([(1, 0.0)]).is_err());
        assert!(Curve::new([(1, -3.0)]).is_err());
        assert!(Curve::new([(1, f64::NAN)]).is_err());
        assert!(Curve::new(std::iter::empty()).is_err());
    }

    #[test]
    fn unlimited_curve() {
        let c = Curve::unlimited();
        assert!(c.is_unlimited());
        assert!(c.at(7.0, Interpolation::Linear).is_infinite());
    }
}
