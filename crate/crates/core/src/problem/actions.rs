use std::cmp::Ordering;

use crate::error::{PiaError, Result};

/// A finite discretization of the compact action set.
///
/// Points are stored in lexicographic order, so "smallest index" and
/// "lexicographically smallest action" coincide. Every argmax in the crate
/// relies on this to break ties deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrid {
    dim: usize,
    points: Vec<f64>,
    resolution: f64,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) => continue,
            Some(ord) => return ord,
            None => return Ordering::Equal,
        }
    }
    Ordering::Equal
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl ActionGrid {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| PiaError::config("action grid must contain at least one point"))?;
        if dim == 0 {
            return Err(PiaError::config("actions must have positive dimension"));
        }
        for p in &points {
            if p.len() != dim {
                return Err(PiaError::config("action grid points have mixed dimensions"));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(PiaError::config("action grid points must be finite"));
            }
        }
        let mut points = points;
        points.sort_by(|a, b| lex_cmp(a, b));
        for w in points.windows(2) {
            if dist(&w[0], &w[1]) <= 1e-12 {
                return Err(PiaError::config(format!(
                    "action grid contains duplicate point {:?}",
                    w[0]
                )));
            }
        }
        let mut resolution: f64 = 0.0;
        for (i, p) in points.iter().enumerate() {
            let nearest = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist(p, q))
                .fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                resolution = resolution.max(nearest);
            }
        }
        Ok(Self {
            dim,
            points: points.into_iter().flatten().collect(),
            resolution,
        })
    }

    /// Tensor grid over the box `[lower, upper]` with spacing at most `step`
    /// along each axis. Both endpoints of every axis are grid points.
    pub fn uniform_box(lower: &[f64], upper: &[f64], step: f64) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(PiaError::config("box bounds must have equal, positive length"));
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(PiaError::config("action grid step must be positive"));
        }
        let axes: Vec<Vec<f64>> = lower
            .iter()
            .zip(upper)
            .map(|(&lo, &hi)| {
                if hi < lo {
                    return Err(PiaError::config("box upper bound below lower bound"));
                }
                if hi == lo {
                    return Ok(vec![lo]);
                }
                let n = ((hi - lo) / step - 1e-9).ceil() as usize + 1;
                Ok((0..n)
                    .map(|i| {
                        let v = lo + (hi - lo) * (i as f64) / ((n - 1) as f64);
                        if v.abs() < 1e-14 {
                            0.0
                        } else {
                            v
                        }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &axes {
            points = points
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest nearest-neighbour distance between grid points.
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.points[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn index_of(&self, action: &[f64]) -> Option<usize> {
        if action.len() != self.dim {
            return None;
        }
        self.iter().position(|p| dist(p, action) <= 1e-12)
    }
}

/// Upper envelope of the affine family `z -> slope_i * z + intercept_i`.
///
/// Answers scalar argmax queries in `O(log n)` and falls back to the
/// exhaustive scan whenever the top two candidates are within rounding of
/// each other, so results are identical to the exhaustive scan with
/// smallest-index tie breaking.
#[derive(Debug, Clone)]
pub(crate) struct Envelope {
    hull: Vec<(f64, f64, usize)>,
    breaks: Vec<f64>,
    all: Vec<(f64, f64)>,
}

impl Envelope {
    pub(crate) fn new(slopes: &[f64], intercepts: &[f64]) -> Self {
        let all: Vec<(f64, f64)> = slopes.iter().copied().zip(intercepts.iter().copied()).collect();
        let mut lines: Vec<(f64, f64, usize)> = all
            .iter()
            .enumerate()
            .map(|(i, &(s, c))| (s, c, i))
            .collect();
        lines.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
        });
        lines.dedup_by(|later, earlier| later.0 == earlier.0);

        let mut hull: Vec<(f64, f64, usize)> = Vec::with_capacity(lines.len());
        for line in lines {
            while hull.len() >= 2 {
                let (s1, c1, _) = hull[hull.len() - 2];
                let (s2, c2, _) = hull[hull.len() - 1];
                let (s3, c3, _) = line;
                if (c1 - c3) * (s2 - s1) <= (c1 - c2) * (s3 - s1) {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(line);
        }
        let breaks = hull
            .windows(2)
            .map(|w| (w[0].1 - w[1].1) / (w[1].0 - w[0].0))
            .collect();
        Self { hull, breaks, all }
    }

    pub(crate) fn query(&self, z: f64) -> (f64, usize) {
        let i = self.breaks.partition_point(|&b| b < z);
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(self.hull.len() - 1);
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        let mut arg = usize::MAX;
        for &(s, c, idx) in &self.hull[lo..=hi] {
            let v = s * z + c;
            if v > best {
                second = best;
                best = v;
                arg = idx;
            } else if v > second {
                second = v;
            }
        }
        if second >= best - 1e-12 * (1.0 + best.abs()) {
            return self.exhaustive(z);
        }
        (best, arg)
    }

    fn exhaustive(&self, z: f64) -> (f64, usize) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (i, &(s, c)) in self.all.iter().enumerate() {
            let v = s * z + c;
            if v > best {
                best = v;
                arg = i;
            }
        }
        (best, arg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_box_hits_endpoints_and_half() {
        let g = ActionGrid::uniform_box(&[-1.0], &[1.0], 0.02).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g.point(0), &[-1.0]);
        assert_eq!(g.point(100), &[1.0]);
        assert!(g.index_of(&[0.5]).is_some());
        assert!(g.index_of(&[0.0]).is_some());
        assert!((g.resolution() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn points_are_lexicographic() {
        let g = ActionGrid::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        assert_eq!(g.point(0), &[0.0, -1.0]);
        assert_eq!(g.point(1), &[0.0, 1.0]);
        assert_eq!(g.point(2), &[1.0, 0.0]);
    }

    #[test]
    fn rejects_empty_and_duplicates() {
        assert!(ActionGrid::new(vec![]).is_err());
        assert!(ActionGrid::new(vec![vec![0.5], vec![0.5]]).is_err());
    }

    proptest! {
        #[test]
        fn envelope_matches_exhaustive(
            lines in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40),
            z in -10.0f64..10.0,
        ) {
            let slopes: Vec<f64> = lines.iter().map(|l| l.0).collect();
            let icpt: Vec<f64> = lines.iter().map(|l| l.1).collect();
            let env = Envelope::new(&slopes, &icpt);
            prop_assert_eq!(env.query(z), env.exhaustive(z));
        }

        #[test]
        fn envelope_on_quadratic_family(z in -3.0f64..3.0) {
            let g = ActionGrid::uniform_box(&[-1.0], &[1.0], 0.05).unwrap();
            let slopes: Vec<f64> = g.iter().map(|u| u[0]).collect();
            let icpt: Vec<f64> = g.iter().map(|u| -0.5 * u[0] * u[0]).collect();
            let env = Envelope::new(&slopes, &icpt);
            prop_assert_eq!(env.query(z), env.exhaustive(z));
        }
    }
}
