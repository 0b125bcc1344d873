//! Input standardization shared by the sequence models.

use serde::{Deserialize, Serialize};

use crate::env::{EnvAction, ACTION_DIM, STATE_DIM};
use crate::trajlog::Trajectory;

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Dimensions with (near) zero spread keep unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for i in 0..dim {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let v = (s / n as f64 - m * m).max(0.0);
                if v > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn fit_states(trajs: &[Trajectory]) -> Self {
        Self::fit(trajs.iter().flat_map(|t| t.steps.iter().map(|s| &s.state[..])), STATE_DIM)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.mean.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mean.len()];
        self.apply_into(x, &mut out);
        out
    }
}

/// Scalar affine map used for regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarNorm {
    pub shift: f64,
    pub scale: f64,
}

impl Default for ScalarNorm {
    fn default() -> Self {
        Self { shift: 0.0, scale: 1.0 }
    }
}

impl ScalarNorm {
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            shift: mean,
            scale: if var > 1e-12 { var.sqrt() } else { 1.0 },
        }
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.scale + self.shift
    }
}

pub fn normalized_action(raw: &[f64; ACTION_DIM], v_max: f64) -> [f64; ACTION_DIM] {
    EnvAction {
        target_speed: raw[0],
        target_steer: raw[1],
    }
    .normalized(v_max)
}

/// Episode step index carried in the last state column.
pub fn timestep_of(state: &[f64; STATE_DIM]) -> usize {
    state[STATE_DIM - 1].max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_standardizes_and_guards_constant_columns() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let n = Normalizer::fit(rows.iter().map(|r| &r[..]), 2);
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        assert_eq!(n.apply(&[3.0, 5.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn scalar_norm_inverts() {
        let s = ScalarNorm::fit(&[1.0, 2.0, 3.0, 10.0]);
        for x in [-3.0, 0.0, 7.5] {
            assert!((s.inverse(s.forward(x)) - x).abs() < 1e-12);
        }
    }
}
