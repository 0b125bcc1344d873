//! Per-step environmental uncertainty and certain/uncertain segmentation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::return_model::{ReturnDistribution, ReturnEnsemble, ReturnModelError};
use crate::trajlog::{discounted_returns, SegColumns, TrajError, Trajectory};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("minimum uncertain part length must be at least 1")]
    BadMinLength,
    #[error("trace and trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ReturnModelError),
    #[error(transparent)]
    Traj(#[from] TrajError),
}

/// `KL(p || q)` between univariate Gaussians.
pub fn gaussian_kl(p: &ReturnDistribution, q: &ReturnDistribution) -> Result<f64, SegmentError> {
    for v in [p.var, q.var] {
        if !(v > 0.0) {
            return Err(SegmentError::NonPositiveVariance(v));
        }
    }
    let kl = 0.5 * (q.var / p.var).ln() + (p.var + (p.mu - q.mu).powi(2)) / (2.0 * q.var) - 0.5;
    // Rounding can leave a tiny negative value for identical inputs.
    Ok(kl.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTrace {
    pub u: Vec<f64>,
    pub epsilon: f64,
    pub flags: Vec<bool>,
}

impl UncertaintyTrace {
    pub fn new(u: Vec<f64>, epsilon: f64) -> Self {
        let flags = u.iter().map(|&x| x > epsilon).collect();
        Self { u, epsilon, flags }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self::new(self.u.clone(), epsilon)
    }
}

/// KL between the moment-matched state-conditioned and action-conditioned
/// predictions. The first step has no preceding action and gets `u = 0`.
pub fn uncertainty_from(state: &[ReturnDistribution], action: &[Option<ReturnDistribution>]) -> Result<Vec<f64>, SegmentError> {
    state
        .iter()
        .zip(action)
        .map(|(p, q)| match q {
            Some(q) => gaussian_kl(p, q),
            None => Ok(0.0),
        })
        .collect()
}

pub fn estimate_uncertainty(
    traj: &Trajectory,
    ensemble: &ReturnEnsemble,
    epsilon: f64,
) -> Result<UncertaintyTrace, SegmentError> {
    let pred = ensemble.predict(traj)?;
    Ok(UncertaintyTrace::new(uncertainty_from(&pred.state, &pred.action)?, epsilon))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    /// First step (0-based, inclusive).
    pub start: usize,
    /// One past the last step.
    pub end: usize,
    pub certain: bool,
}

impl Part {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Splits a flag sequence into alternating parts. An uncertain part opens at
/// a flagged step and closes once its last `c - 1` steps are all unflagged;
/// those trailing steps stay in the uncertain part.
pub fn segment(flags: &[bool], c: usize) -> Result<Vec<Part>, SegmentError> {
    if c == 0 {
        return Err(SegmentError::BadMinLength);
    }
    let mut parts = Vec::new();
    let mut start = 0;
    let mut t = 0;
    while t < flags.len() {
        if !flags[t] {
            t += 1;
            continue;
        }
        if t > start {
            parts.push(Part {
                start,
                end: t,
                certain: true,
            });
        }
        let open = t;
        let mut quiet = 0;
        t += 1;
        while t < flags.len() && quiet < c - 1 {
            quiet = if flags[t] { 0 } else { quiet + 1 };
            t += 1;
        }
        match parts.last_mut() {
            // A flag right after a closed uncertain part extends it.
            Some(last) if !last.certain && last.end == open => last.end = t,
            _ => parts.push(Part {
                start: open,
                end: t,
                certain: false,
            }),
        }
        start = t;
    }
    if start < flags.len() {
        parts.push(Part {
            start,
            end: flags.len(),
            certain: true,
        });
    }
    Ok(parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedTrajectory {
    pub parts: Vec<Part>,
    /// Return span; 0 on uncertain steps.
    pub h: Vec<usize>,
    /// Undiscounted sum of the next `h` rewards; 0 on uncertain steps.
    pub rh: Vec<f64>,
    /// Undiscounted return-to-go over the whole episode.
    pub ret: Vec<f64>,
}

impl SegmentedTrajectory {
    pub fn columns(&self, trace: &UncertaintyTrace) -> Vec<SegColumns> {
        (0..self.h.len())
            .map(|t| SegColumns {
                u: trace.u[t],
                flag: trace.flags[t],
                h: self.h[t],
                rh: self.rh[t],
                ret: self.ret[t],
            })
            .collect()
    }

    pub fn from_columns(cols: &[SegColumns]) -> Self {
        let flags: Vec<bool> = cols.iter().map(|c| c.h == 0).collect();
        let mut parts = Vec::new();
        let mut s = 0;
        for t in 1..=flags.len() {
            // Certain parts end where the span reaches 1.
            let boundary = t == flags.len() || flags[t] != flags[t - 1] || (!flags[t - 1] && cols[t - 1].h == 1);
            if boundary {
                parts.push(Part {
                    start: s,
                    end: t,
                    certain: !flags[t - 1],
                });
                s = t;
            }
        }
        Self {
            parts,
            h: cols.iter().map(|c| c.h).collect(),
            rh: cols.iter().map(|c| c.rh).collect(),
            ret: cols.iter().map(|c| c.ret).collect(),
        }
    }
}

pub fn relabel(rewards: &[f64], parts: &[Part]) -> Result<SegmentedTrajectory, SegmentError> {
    let n = rewards.len();
    let covered = parts.last().map_or(0, |p| p.end);
    if covered != n {
        return Err(SegmentError::LengthMismatch(covered, n));
    }
    let mut h = vec![0; n];
    let mut rh = vec![0.0; n];
    for p in parts.iter().filter(|p| p.certain) {
        let mut acc = 0.0;
        for t in (p.start..p.end).rev() {
            acc += rewards[t];
            rh[t] = acc;
            h[t] = p.end - t;
        }
    }
    let ret = if n == 0 { vec![] } else { discounted_returns(rewards, 1.0)? };
    Ok(SegmentedTrajectory {
        parts: parts.to_vec(),
        h,
        rh,
        ret,
    })
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SegmentSummary {
    pub trajectories: usize,
    pub steps: usize,
    pub uncertain_steps: usize,
    pub certain_parts: usize,
    pub uncertain_parts: usize,
    pub min_u: f64,
    pub max_u: f64,
}

/// Segments every trajectory; returns per-trajectory columns and a summary.
pub fn segment_dataset(
    trajs: &[Trajectory],
    traces: &[UncertaintyTrace],
    c: usize,
) -> Result<(Vec<Vec<SegColumns>>, SegmentSummary), SegmentError> {
    let mut summary = SegmentSummary {
        min_u: f64::INFINITY,
        max_u: f64::NEG_INFINITY,
        ..SegmentSummary::default()
    };
    let mut out = Vec::with_capacity(trajs.len());
    for (traj, trace) in trajs.iter().zip(traces) {
        if trace.u.len() != traj.len() {
            return Err(SegmentError::LengthMismatch(trace.u.len(), traj.len()));
        }
        let parts = segment(&trace.flags, c)?;
        let seg = relabel(&traj.rewards(), &parts)?;
        summary.trajectories += 1;
        summary.steps += traj.len();
        summary.uncertain_steps += seg.h.iter().filter(|&&h| h == 0).count();
        summary.certain_parts += parts.iter().filter(|p| p.certain).count();
        summary.uncertain_parts += parts.iter().filter(|p| !p.certain).count();
        for &u in trace.u.iter().skip(1) {
            summary.min_u = summary.min_u.min(u);
            summary.max_u = summary.max_u.max(u);
        }
        out.push(seg.columns(trace));
    }
    Ok((out, summary))
}

/// Histogram of `u` over `bins` equal-width bins on `[0, hi]`; the last bin
/// also collects values above `hi`.
pub fn histogram(values: impl IntoIterator<Item = f64>, hi: f64, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for v in values {
        let i = ((v / hi) * bins as f64).floor().max(0.0) as usize;
        h[i.min(bins - 1)] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(mu: f64, var: f64) -> ReturnDistribution {
        ReturnDistribution { mu, var }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl(&d(0.3, 2.0), &d(0.3, 2.0)).unwrap(), 0.0);
        assert!((gaussian_kl(&d(1.0, 1.0), &d(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        let v = gaussian_kl(&d(0.0, 2.0), &d(0.0, 1.0)).unwrap();
        assert!((v - (0.5 - 0.5 * 2f64.ln())).abs() < 1e-15);
        assert!((v - 0.1534).abs() < 1e-4);
        assert!(gaussian_kl(&d(0.0, 0.0), &d(0.0, 1.0)).is_err());
    }

    #[test]
    fn hand_traced_segmentation() {
        let flags = [false, false, true, false, false, false];
        let parts = segment(&flags, 3).unwrap();
        assert_eq!(
            parts,
            vec![
                Part { start: 0, end: 2, certain: true },
                Part { start: 2, end: 5, certain: false },
                Part { start: 5, end: 6, certain: true },
            ]
        );
        let seg = relabel(&[1.0; 6], &parts).unwrap();
        assert_eq!(seg.h, vec![2, 1, 0, 0, 0, 1]);
        assert_eq!(seg.rh, vec![2.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(seg.ret, vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn back_to_back_uncertain_parts_merge() {
        let parts = segment(&[true, false, true, false, false], 2).unwrap();
        assert_eq!(
            parts,
            vec![
                Part { start: 0, end: 4, certain: false },
                Part { start: 4, end: 5, certain: true },
            ]
        );
    }

    #[test]
    fn degenerate_flag_patterns() {
        assert_eq!(segment(&[false; 5], 4).unwrap(), vec![Part { start: 0, end: 5, certain: true }]);
        assert_eq!(segment(&[true; 5], 4).unwrap(), vec![Part { start: 0, end: 5, certain: false }]);
        let seg = relabel(&[1.0; 5], &segment(&[false; 5], 2).unwrap()).unwrap();
        assert_eq!(seg.h, vec![5, 4, 3, 2, 1]);
        assert!(segment(&[], 3).unwrap().is_empty());
        assert!(segment(&[true], 0).is_err());
    }

    #[test]
    fn columns_round_trip_parts() {
        let flags = [false, true, false, false, false, true, false, false];
        let parts = segment(&flags, 2).unwrap();
        let seg = relabel(&[0.5; 8], &parts).unwrap();
        let trace = UncertaintyTrace::new(flags.iter().map(|&f| if f { 5.0 } else { 0.0 }).collect(), 1.0);
        let back = SegmentedTrajectory::from_columns(&seg.columns(&trace));
        assert_eq!(back, seg);
    }

    #[test]
    fn histogram_clamps_to_last_bin() {
        assert_eq!(histogram([0.0, 0.49, 0.5, 7.0], 1.0, 2), vec![2, 2]);
    }
}
