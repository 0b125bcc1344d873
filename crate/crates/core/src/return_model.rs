//! Gaussian return transformers.
//!
//! Each step contributes a state token and an action token, interleaved as
//! `s_1, a_1, s_2, a_2, ...`. Two causal trunks read the same token stream:
//! the state-conditioned trunk predicts `R_t` from its output at `s_t`, the
//! action-conditioned trunk predicts `R_t` from its output at `a_{t-1}`.
//! Token embedders are shared; trunks and heads are not. Heads emit a mean
//! and a log-variance and start at zero.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{invalid, ConfigError, KvConfig};
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::features::{normalized_action, timestep_of, Normalizer, ScalarNorm};
use crate::grad::nn::{Embedding, Linear, Transformer, TrunkConfig};
use crate::grad::{AdamW, AdamWConfig, Checkpoint, GradError, Graph, ParamStore, Tensor, Var};
use crate::trajlog::{discounted_returns, TrajError, Trajectory, Window, WindowSampler};

#[derive(Debug, Error)]
pub enum ReturnModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("member {member}: loss became {loss} at epoch {epoch}, iteration {iteration}")]
    Divergence {
        member: usize,
        epoch: usize,
        iteration: usize,
        loss: f64,
    },
    #[error("empty context")]
    EmptyContext,
    #[error("variance must be positive and finite, got {0}")]
    BadVariance(f64),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("ensemble manifest: {0}")]
    Manifest(String),
    #[error("no training data: {0}")]
    NoData(String),
}

fn io_err(path: &Path, e: impl ToString) -> ReturnModelError {
    ReturnModelError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnDistribution {
    pub mu: f64,
    pub var: f64,
}

impl ReturnDistribution {
    pub fn new(mu: f64, var: f64) -> Result<Self, ReturnModelError> {
        if !(var > 0.0 && var.is_finite()) || !mu.is_finite() {
            return Err(ReturnModelError::BadVariance(var));
        }
        Ok(Self { mu, var })
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    /// Negative log density of `y`.
    pub fn nll(&self, y: f64) -> f64 {
        0.5 * ((2.0 * std::f64::consts::PI * self.var).ln() + (y - self.mu).powi(2) / self.var)
    }
}

/// Moments of the equal-weight mixture of `members`.
///
/// # Panics
/// If `members` is empty.
pub fn ensemble_moments(members: &[ReturnDistribution]) -> ReturnDistribution {
    assert!(!members.is_empty(), "ensemble_moments needs at least one member");
    let k = members.len() as f64;
    let mu = members.iter().map(|m| m.mu).sum::<f64>() / k;
    // mean(var + mu_l^2) - mu^2, written as a sum of non-negative terms.
    let var = members.iter().map(|m| m.var + (m.mu - mu).powi(2)).sum::<f64>() / k;
    ReturnDistribution { mu, var }
}

// ---------------------------------------------------------------------------
// Sequence data

/// One trajectory prepared for a return transformer. Inputs are already
/// standardized; targets are in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqTraj {
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub times: Vec<usize>,
    pub spans: Vec<usize>,
    /// Target for the state-token output at step `t`.
    pub target_s: Vec<f64>,
    pub weight_s: Vec<f64>,
    /// Target for the action-token output at step `t` (the next step's return).
    pub target_a: Vec<f64>,
    pub weight_a: Vec<f64>,
}

impl SeqTraj {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Inputs only (no targets), for inference.
    pub fn inputs(arch: &ReturnArch, traj: &Trajectory, spans: Option<&[usize]>) -> Self {
        let n = traj.len();
        let mut s = Self {
            states: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            times: Vec::with_capacity(n),
            spans: spans.map_or_else(|| vec![0; n], <[usize]>::to_vec),
            target_s: vec![0.0; n],
            weight_s: vec![0.0; n],
            target_a: vec![0.0; n],
            weight_a: vec![0.0; n],
        };
        for step in &traj.steps {
            let mut x = [0.0; STATE_DIM];
            arch.state_norm.apply_into(&step.state, &mut x);
            s.states.push(x);
            s.actions.push(normalized_action(&step.action, arch.v_max));
            s.times.push(timestep_of(&step.state));
        }
        s
    }

    /// Return-prediction targets: `R_t` at `s_t` and `R_{t+1}` at `a_t`.
    pub fn for_returns(arch: &ReturnArch, traj: &Trajectory, returns: &[f64]) -> Self {
        let mut s = Self::inputs(arch, traj, None);
        let n = s.len();
        for t in 0..n {
            s.target_s[t] = arch.target_norm.forward(returns[t]);
            s.weight_s[t] = 1.0;
            if t + 1 < n {
                s.target_a[t] = arch.target_norm.forward(returns[t + 1]);
                s.weight_a[t] = 1.0;
            }
        }
        s
    }
}

/// Windows of length `l` advancing by `l - 1`, so consecutive windows share
/// one step and every step `t >= 1` sits at window position `>= 1` exactly
/// once. Tail windows are left-padded.
pub fn chunk_windows(traj: usize, n: usize, l: usize) -> Vec<Window> {
    assert!(l >= 2, "chunked windows need length >= 2");
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let len = l.min(n - start);
        out.push(Window {
            traj,
            start,
            len,
            pad: l - len,
        });
        if start + l >= n {
            break;
        }
        start += l - 1;
    }
    out
}

/// Locates step `t` for the state head: `(window index, slot)`.
fn state_slot(t: usize, l: usize, windows: &[Window]) -> (usize, usize) {
    let c = t.saturating_sub(1) / (l - 1);
    let w = &windows[c];
    (c, w.pad + t - w.start)
}

struct Batch {
    b: usize,
    l: usize,
    states: Tensor,
    actions: Tensor,
    times: Vec<usize>,
    spans: Vec<usize>,
    key_valid: Vec<bool>,
    target_s: Vec<f64>,
    weight_s: Vec<f64>,
    target_a: Vec<f64>,
    weight_a: Vec<f64>,
}

fn make_batch(data: &[&SeqTraj], windows: &[Window], l: usize) -> Batch {
    let b = windows.len();
    let mut states = vec![0.0; b * l * STATE_DIM];
    let mut actions = vec![0.0; b * l * ACTION_DIM];
    let mut times = vec![0; b * l];
    let mut spans = vec![0; b * l];
    let mut key_valid = vec![false; b * 2 * l];
    let mut target_s = vec![0.0; b * l];
    let mut weight_s = vec![0.0; b * l];
    let mut target_a = vec![0.0; b * l];
    let mut weight_a = vec![0.0; b * l];
    for (bi, w) in windows.iter().enumerate() {
        let tr = data[w.traj];
        for (slot, step) in w.slots().enumerate() {
            let Some(t) = step else { continue };
            let r = bi * l + slot;
            states[r * STATE_DIM..(r + 1) * STATE_DIM].copy_from_slice(&tr.states[t]);
            actions[r * ACTION_DIM..(r + 1) * ACTION_DIM].copy_from_slice(&tr.actions[t]);
            times[r] = tr.times[t];
            spans[r] = tr.spans[t];
            key_valid[2 * r] = true;
            key_valid[2 * r + 1] = true;
            target_s[r] = tr.target_s[t];
            weight_s[r] = tr.weight_s[t];
            target_a[r] = tr.target_a[t];
            weight_a[r] = tr.weight_a[t];
        }
    }
    Batch {
        b,
        l,
        states: Tensor::new(vec![b, l, STATE_DIM], states).expect("shape"),
        actions: Tensor::new(vec![b, l, ACTION_DIM], actions).expect("shape"),
        times,
        spans,
        key_valid,
        target_s,
        weight_s,
        target_a,
        weight_a,
    }
}

// ---------------------------------------------------------------------------
// Network

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnArch {
    pub trunk: TrunkConfig,
    pub context: usize,
    pub max_timestep: usize,
    /// Size of the span-embedding table added to state tokens; 0 disables it.
    pub span_vocab: usize,
    pub action_head: bool,
    pub v_max: f64,
    pub state_norm: Normalizer,
    pub target_norm: ScalarNorm,
}

impl ReturnArch {
    pub fn new(trunk: TrunkConfig, context: usize) -> Self {
        Self {
            trunk,
            context,
            max_timestep: 300,
            span_vocab: 0,
            action_head: true,
            v_max: 40.0,
            state_norm: Normalizer::identity(STATE_DIM),
            target_norm: ScalarNorm::default(),
        }
    }
}

struct Heads {
    mu_s: Var,
    lv_s: Var,
    mu_a: Option<Var>,
    lv_a: Option<Var>,
}

/// A single variance network (one ensemble member).
#[derive(Clone, Debug)]
pub struct ReturnNet {
    pub arch: ReturnArch,
    pub store: ParamStore,
    state_emb: Linear,
    action_emb: Linear,
    time_emb: Embedding,
    span_emb: Option<Embedding>,
    trunk_s: Transformer,
    mu_s: Linear,
    lv_s: Linear,
    trunk_a: Option<(Transformer, Linear, Linear)>,
}

impl ReturnNet {
    pub fn new(arch: ReturnArch, seed: u64) -> Result<Self, ReturnModelError> {
        if arch.context < 2 {
            return Err(invalid("Sampled Sequence length", "must be at least 2").into());
        }
        let d = arch.trunk.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let state_emb = Linear::new(&mut store, "embed.state", STATE_DIM, d, &mut rng)?;
        let action_emb = Linear::new(&mut store, "embed.action", ACTION_DIM, d, &mut rng)?;
        let time_emb = Embedding::new(&mut store, "embed.time", arch.max_timestep + 1, d, &mut rng)?;
        let span_emb = if arch.span_vocab > 0 {
            Some(Embedding::new(&mut store, "embed.span", arch.span_vocab, d, &mut rng)?)
        } else {
            None
        };
        let trunk_s = Transformer::new(&mut store, "trunk_s", arch.trunk, &mut rng)?;
        let mu_s = Linear::zeros(&mut store, "head_s.mu", d, 1)?;
        let lv_s = Linear::zeros(&mut store, "head_s.log_var", d, 1)?;
        let trunk_a = if arch.action_head {
            let t = Transformer::new(&mut store, "trunk_a", arch.trunk, &mut rng)?;
            let mu = Linear::zeros(&mut store, "head_a.mu", d, 1)?;
            let lv = Linear::zeros(&mut store, "head_a.log_var", d, 1)?;
            Some((t, mu, lv))
        } else {
            None
        };
        Ok(Self {
            arch,
            store,
            state_emb,
            action_emb,
            time_emb,
            span_emb,
            trunk_s,
            mu_s,
            lv_s,
            trunk_a,
        })
    }

    pub fn to_checkpoint(&self, training_config: serde_json::Value) -> Checkpoint {
        Checkpoint::from_store(
            serde_json::to_value(&self.arch).expect("arch serializes"),
            training_config,
            &self.store,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ReturnModelError> {
        let arch: ReturnArch = serde_json::from_value(ckpt.architecture.clone())
            .map_err(|e| GradError::Checkpoint(format!("architecture: {e}")))?;
        let d = arch.trunk.dim;
        ckpt.check_tables(&[
            (d, d),
            (arch.trunk.layers, d.saturating_mul(d)),
            (arch.max_timestep.saturating_add(1), d),
            (arch.span_vocab, d),
        ])?;
        if arch.state_norm.dim() != STATE_DIM || arch.state_norm.std.len() != STATE_DIM {
            return Err(GradError::Checkpoint("state normalizer dimension".into()).into());
        }
        let mut net = Self::new(arch, 0)?;
        net.store.load_values(&ckpt.to_store()?)?;
        Ok(net)
    }

    fn forward(&self, g: &mut Graph, batch: &Batch, mut rng: Option<&mut ChaCha8Rng>) -> Result<Heads, GradError> {
        let st = &self.store;
        let (b, l, d) = (batch.b, batch.l, self.arch.trunk.dim);
        let s_in = g.input(batch.states.clone());
        let a_in = g.input(batch.actions.clone());
        let time = self.time_emb.forward(g, st, &batch.times, &[b, l])?;
        let mut xs = self.state_emb.forward(g, st, s_in)?;
        xs = g.add(xs, time)?;
        if let Some(e) = &self.span_emb {
            let span = e.forward(g, st, &batch.spans, &[b, l])?;
            xs = g.add(xs, span)?;
        }
        let xa = self.action_emb.forward(g, st, a_in)?;
        let xa = g.add(xa, time)?;
        let tokens = g.concat(xs, xa)?;
        let tokens = g.reshape(tokens, &[b, 2 * l, d])?;

        let even: Vec<usize> = (0..b * l).map(|r| 2 * r).collect();
        let hs = self
            .trunk_s
            .forward(g, st, tokens, Some(&batch.key_valid), rng.as_deref_mut())?;
        let hs = g.reshape(hs, &[b * 2 * l, d])?;
        let hs = g.rows(hs, &even)?;
        let mu_s = self.mu_s.forward(g, st, hs)?;
        let lv_s = self.lv_s.forward(g, st, hs)?;
        let (mu_a, lv_a) = match &self.trunk_a {
            Some((trunk, mu, lv)) => {
                let odd: Vec<usize> = (0..b * l).map(|r| 2 * r + 1).collect();
                let ha = trunk.forward(g, st, tokens, Some(&batch.key_valid), rng)?;
                let ha = g.reshape(ha, &[b * 2 * l, d])?;
                let ha = g.rows(ha, &odd)?;
                (Some(mu.forward(g, st, ha)?), Some(lv.forward(g, st, ha)?))
            }
            None => (None, None),
        };
        Ok(Heads { mu_s, lv_s, mu_a, lv_a })
    }

    fn loss(&self, g: &mut Graph, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Var, GradError> {
        let h = self.forward(g, batch, rng)?;
        let n = batch.b * batch.l;
        let ts = Tensor::new(vec![n, 1], batch.target_s.clone())?;
        let mut loss = g.gaussian_nll(h.mu_s, h.lv_s, &ts, Some(&batch.weight_s))?;
        if let (Some(mu), Some(lv)) = (h.mu_a, h.lv_a) {
            let ta = Tensor::new(vec![n, 1], batch.target_a.clone())?;
            let la = g.gaussian_nll(mu, lv, &ta, Some(&batch.weight_a))?;
            loss = g.add(loss, la)?;
        }
        Ok(loss)
    }

    fn distribution(&self, mu: f64, log_var: f64) -> ReturnDistribution {
        let s = self.arch.target_norm.scale;
        ReturnDistribution {
            mu: self.arch.target_norm.inverse(mu),
            var: (log_var.exp() * s * s).max(f64::MIN_POSITIVE),
        }
    }

    /// `(state head, action head)` per slot of `windows`.
    fn predict_slots(
        &self,
        data: &[&SeqTraj],
        windows: &[Window],
    ) -> Result<(Vec<ReturnDistribution>, Vec<Option<ReturnDistribution>>), ReturnModelError> {
        let batch = make_batch(data, windows, self.arch.context);
        let mut g = Graph::new();
        let h = self.forward(&mut g, &batch, None)?;
        let (ms, ls) = (g.value(h.mu_s).data(), g.value(h.lv_s).data());
        let state = ms.iter().zip(ls).map(|(&m, &l)| self.distribution(m, l)).collect();
        let action = match (h.mu_a, h.lv_a) {
            (Some(mu), Some(lv)) => g
                .value(mu)
                .data()
                .iter()
                .zip(g.value(lv).data())
                .map(|(&m, &l)| Some(self.distribution(m, l)))
                .collect(),
            _ => vec![None; ms.len()],
        };
        Ok((state, action))
    }

    /// Predictions for every step: state head for `R_t` given `s_{<=t}`, and
    /// action head for `R_t` given the history through `a_{t-1}` (`None` at `t = 0`).
    pub fn predict_trajectory(&self, seq: &SeqTraj) -> Result<TrajPrediction, ReturnModelError> {
        if seq.is_empty() {
            return Err(ReturnModelError::EmptyContext);
        }
        let l = self.arch.context;
        let windows = chunk_windows(0, seq.len(), l);
        let (ps, pa) = self.predict_slots(&[seq], &windows)?;
        let mut state = Vec::with_capacity(seq.len());
        let mut action = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let (c, slot) = state_slot(t, l, &windows);
            state.push(ps[c * l + slot]);
            action.push(if t == 0 { None } else { pa[c * l + slot - 1] });
        }
        Ok(TrajPrediction { state, action })
    }

    /// State-head prediction at the last step of a short history (at most
    /// `context` steps). The action of the last step is not visible to the
    /// state head and may be anything.
    pub fn predict_last(&self, history: &SeqTraj) -> Result<ReturnDistribution, ReturnModelError> {
        let n = history.len();
        if n == 0 {
            return Err(ReturnModelError::EmptyContext);
        }
        let l = self.arch.context;
        let len = n.min(l);
        let w = Window {
            traj: 0,
            start: n - len,
            len,
            pad: l - len,
        };
        let (ps, _) = self.predict_slots(&[history], &[w])?;
        Ok(ps[l - 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajPrediction {
    pub state: Vec<ReturnDistribution>,
    pub action: Vec<Option<ReturnDistribution>>,
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnTrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub batch: usize,
    pub context: usize,
    pub gamma: f64,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: bool,
    pub ensemble: usize,
    pub mask_prob: f64,
    pub ref_epochs: f64,
    pub ref_dataset_size: f64,
    /// 0 means one pass over the dataset (`steps / batch`).
    pub iters_per_epoch: usize,
    pub heldout_fraction: f64,
    pub max_timestep: usize,
    pub seed: u64,
}

impl Default for ReturnTrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 32,
            batch: 64,
            context: 10,
            gamma: 0.95,
            lr: 1e-3,
            dropout: 0.1,
            weight_decay: false,
            ensemble: 5,
            mask_prob: 0.6,
            ref_epochs: 6.0,
            ref_dataset_size: 5e4,
            iters_per_epoch: 40,
            heldout_fraction: 0.15,
            max_timestep: 300,
            seed: 0,
        }
    }
}

impl ReturnTrainConfig {
    pub fn full_scale() -> Self {
        Self {
            layers: 4,
            heads: 8,
            dim: 128,
            batch: 256,
            lr: 1e-4,
            ref_epochs: 50.0,
            ref_dataset_size: 1e6,
            iters_per_epoch: 0,
            ..Self::default()
        }
    }

    pub fn trunk(&self) -> TrunkConfig {
        TrunkConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid("Transformer heads", "must divide Embedding dimension"));
        }
        if self.layers == 0 {
            return Err(invalid("Transformer layers", "must be positive"));
        }
        if self.context < 2 {
            return Err(invalid("Sampled Sequence length", "must be at least 2"));
        }
        if self.batch == 0 {
            return Err(invalid("Batch size", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("Discount", "must lie in (0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("Learning rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("Dropout", "must lie in [0, 1)"));
        }
        if self.ensemble == 0 {
            return Err(invalid("Ensemble size", "must be at least 1"));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(invalid("Data mask probability", "must lie in (0, 1]"));
        }
        if !(self.ref_epochs > 0.0) || !(self.ref_dataset_size > 0.0) {
            return Err(invalid("Reference epoch", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(invalid("Held-out fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let activation = kv.take_string("Transformer Activation", "GELU");
        if activation != "GELU" {
            return Err(invalid("Transformer Activation", "only GELU is implemented"));
        }
        let optimizer = kv.take_string("Optimizer", "AdamW");
        if optimizer != "AdamW" {
            return Err(invalid("Optimizer", "only AdamW is implemented"));
        }
        let cfg = Self {
            layers: kv.take_usize("Transformer layers", d.layers)?,
            heads: kv.take_usize("Transformer heads", d.heads)?,
            dim: kv.take_usize("Embedding dimension", d.dim)?,
            batch: kv.take_usize("Batch size", d.batch)?,
            context: kv.take_usize("Sampled Sequence length", d.context)?,
            gamma: kv.take_f64("Discount", d.gamma)?,
            lr: kv.take_f64("Learning rate", d.lr)?,
            dropout: kv.take_f64("Dropout", d.dropout)?,
            weight_decay: kv.take_bool("Weight decay", d.weight_decay)?,
            ensemble: kv.take_usize("Ensemble size", d.ensemble)?,
            mask_prob: kv.take_f64("Data mask probability", d.mask_prob)?,
            ref_epochs: kv.take_f64("Reference epoch", d.ref_epochs)?,
            ref_dataset_size: kv.take_f64("Reference dataset size", d.ref_dataset_size)?,
            iters_per_epoch: kv.take_usize("Iterations per epoch", d.iters_per_epoch)?,
            heldout_fraction: kv.take_f64("Held-out fraction", d.heldout_fraction)?,
            max_timestep: kv.take_usize("Max timestep", d.max_timestep)?,
            seed: kv.take_u64("Seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("Transformer layers", self.layers);
        kv.set("Transformer heads", self.heads);
        kv.set("Embedding dimension", self.dim);
        kv.set("Batch size", self.batch);
        kv.set("Sampled Sequence length", self.context);
        kv.set("Discount", self.gamma);
        kv.set("Learning rate", self.lr);
        kv.set("Dropout", self.dropout);
        kv.set("Optimizer", "AdamW");
        kv.set("Weight decay", if self.weight_decay { "True" } else { "False" });
        kv.set("Ensemble size", self.ensemble);
        kv.set("Data mask probability", self.mask_prob);
        kv.set("Reference epoch", self.ref_epochs);
        kv.set("Transformer Activation", "GELU");
        kv.set("Reference dataset size", self.ref_dataset_size);
        kv.set("Iterations per epoch", self.iters_per_epoch);
        kv.set("Held-out fraction", self.heldout_fraction);
        kv.set("Max timestep", self.max_timestep);
        kv.set("Seed", self.seed);
        kv
    }

    /// `int(ref_dataset_size / steps * ref_epochs)`, at least 1.
    pub fn epochs(&self, steps: usize) -> usize {
        ((self.ref_dataset_size / steps.max(1) as f64 * self.ref_epochs) as usize).max(1)
    }

    pub fn iterations(&self, steps: usize) -> usize {
        if self.iters_per_epoch > 0 {
            self.iters_per_epoch
        } else {
            steps.div_ceil(self.batch).max(1)
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: if self.weight_decay { 1e-2 } else { 0.0 },
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_nll_state: f64,
    pub heldout_nll_action: f64,
}

/// Derives a member seed from the run seed.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(member as u64 + 1)
}

/// Mean held-out NLL (state head, action head) in return units.
pub fn heldout_nll(net: &ReturnNet, data: &[SeqTraj], returns: &[Vec<f64>]) -> Result<(f64, f64), ReturnModelError> {
    let (mut s, mut a, mut ns, mut na) = (0.0, 0.0, 0usize, 0usize);
    for (seq, r) in data.iter().zip(returns) {
        let p = net.predict_trajectory(seq)?;
        for t in 0..seq.len() {
            s += p.state[t].nll(r[t]);
            ns += 1;
            if let Some(d) = p.action[t] {
                a += d.nll(r[t]);
                na += 1;
            }
        }
    }
    Ok((s / ns.max(1) as f64, a / na.max(1) as f64))
}

/// Runs the optimisation loop for one network on prepared data.
#[allow(clippy::too_many_arguments)]
pub fn train_net(
    net: &mut ReturnNet,
    train: &[&SeqTraj],
    heldout: Option<(&[SeqTraj], &[Vec<f64>])>,
    cfg: &ReturnTrainConfig,
    epochs: usize,
    iterations: usize,
    member: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>, ReturnModelError> {
    let lengths: Vec<usize> = train.iter().map(|s| s.len()).collect();
    let sampler = WindowSampler::new(&lengths, cfg.context)?;
    let mut opt = AdamW::new(cfg.optimizer(), &net.store);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for iteration in 0..iterations {
            let windows = sampler.sample_batch(cfg.batch, rng);
            let batch = make_batch(train, &windows, cfg.context);
            let mut g = Graph::new();
            let loss = net.loss(&mut g, &batch, Some(rng))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(ReturnModelError::Divergence {
                    member,
                    epoch,
                    iteration,
                    loss: value,
                });
            }
            total += value;
            g.backward_into(loss, &mut net.store)?;
            opt.step(&mut net.store);
        }
        let (hs, ha) = match heldout {
            Some((d, r)) if !d.is_empty() => heldout_nll(net, d, r)?,
            _ => (f64::NAN, f64::NAN),
        };
        let log = EpochLog {
            epoch,
            train_loss: total / iterations as f64,
            heldout_nll_state: hs,
            heldout_nll_action: ha,
        };
        info!(
            "member {member} epoch {epoch}: train {:.4} held-out nll state {:.4} action {:.4}",
            log.train_loss, hs, ha
        );
        logs.push(log);
    }
    Ok(logs)
}

// ---------------------------------------------------------------------------
// Ensemble

pub const ENSEMBLE_FORMAT: &str = "unrest-ensemble/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    pub k: usize,
    pub roles: Vec<String>,
    pub mask_seeds: Vec<u64>,
    pub mask_probability: f64,
    pub config_hash: String,
    pub heldout: Vec<usize>,
    pub logs: Vec<Vec<EpochLog>>,
    #[serde(default)]
    pub manifest_id: String,
}

/// `K` members, each carrying both return heads.
#[derive(Clone, Debug)]
pub struct ReturnEnsemble {
    pub members: Vec<ReturnNet>,
    pub config: ReturnTrainConfig,
    pub mask_seeds: Vec<u64>,
    /// Indices of the trajectories held out from every member.
    pub heldout: Vec<usize>,
    pub logs: Vec<Vec<EpochLog>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub members: Vec<TrajPrediction>,
    pub state: Vec<ReturnDistribution>,
    pub action: Vec<Option<ReturnDistribution>>,
}

/// Deterministic held-out split: a seeded shuffle, first `fraction` held out.
pub fn heldout_split(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if n < 2 || fraction <= 0.0 {
        return vec![];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Bernoulli(`p`) inclusion mask over `n` trajectories; never empty.
pub fn data_mask(n: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
    if n > 0 && !mask.iter().any(|m| *m) {
        mask[rng.random_range(0..n)] = true;
    }
    mask
}

impl ReturnEnsemble {
    pub fn train(trajs: &[Trajectory], cfg: &ReturnTrainConfig) -> Result<Self, ReturnModelError> {
        cfg.validate()?;
        if trajs.is_empty() {
            return Err(ReturnModelError::NoData("dataset has no trajectories".into()));
        }
        let heldout = heldout_split(trajs.len(), cfg.heldout_fraction, cfg.seed);
        let is_heldout = |i: usize| heldout.binary_search(&i).is_ok();
        let train_idx: Vec<usize> = (0..trajs.len()).filter(|&i| !is_heldout(i)).collect();

        let returns: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| discounted_returns(&t.rewards(), cfg.gamma))
            .collect::<Result<_, _>>()?;
        let train_trajs: Vec<Trajectory> = train_idx.iter().map(|&i| trajs[i].clone()).collect();
        let all_train_returns: Vec<f64> = train_idx.iter().flat_map(|&i| returns[i].iter().copied()).collect();
        let mut arch = ReturnArch::new(cfg.trunk(), cfg.context);
        arch.max_timestep = cfg.max_timestep;
        arch.state_norm = Normalizer::fit_states(&train_trajs);
        arch.target_norm = ScalarNorm::fit(&all_train_returns);

        let seqs: Vec<SeqTraj> = trajs
            .iter()
            .zip(&returns)
            .map(|(t, r)| SeqTraj::for_returns(&arch, t, r))
            .collect();
        let held_seqs: Vec<SeqTraj> = heldout.iter().map(|&i| seqs[i].clone()).collect();
        let held_returns: Vec<Vec<f64>> = heldout.iter().map(|&i| returns[i].clone()).collect();
        let steps: usize = train_idx.iter().map(|&i| trajs[i].len()).sum();
        let epochs = cfg.epochs(steps);
        let iterations = cfg.iterations(steps);
        info!(
            "training {} members: {} train / {} held-out trajectories, {epochs} epochs x {iterations} iterations",
            cfg.ensemble,
            train_idx.len(),
            heldout.len()
        );

        let mut members = Vec::with_capacity(cfg.ensemble);
        let mut mask_seeds = Vec::with_capacity(cfg.ensemble);
        let mut logs = Vec::with_capacity(cfg.ensemble);
        for k in 0..cfg.ensemble {
            let seed = member_seed(cfg.seed, k);
            let mask_seed = seed ^ 0xa5a5_a5a5;
            let mask = data_mask(train_idx.len(), cfg.mask_prob, mask_seed);
            let subset: Vec<&SeqTraj> = train_idx
                .iter()
                .zip(&mask)
                .filter(|(_, m)| **m)
                .map(|(&i, _)| &seqs[i])
                .collect();
            let mut net = ReturnNet::new(arch.clone(), seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(3);
            let log = train_net(
                &mut net,
                &subset,
                Some((&held_seqs, &held_returns)),
                cfg,
                epochs,
                iterations,
                k,
                &mut rng,
            )?;
            members.push(net);
            mask_seeds.push(mask_seed);
            logs.push(log);
        }
        Ok(Self {
            members,
            config: cfg.clone(),
            mask_seeds,
            heldout,
            logs,
        })
    }

    pub fn arch(&self) -> &ReturnArch {
        &self.members[0].arch
    }

    pub fn predict(&self, traj: &Trajectory) -> Result<EnsemblePrediction, ReturnModelError> {
        let seq = SeqTraj::inputs(self.arch(), traj, None);
        let members: Vec<TrajPrediction> = self
            .members
            .iter()
            .map(|m| m.predict_trajectory(&seq))
            .collect::<Result<_, _>>()?;
        let n = traj.len();
        let mut state = Vec::with_capacity(n);
        let mut action = Vec::with_capacity(n);
        let mut buf = Vec::with_capacity(members.len());
        for t in 0..n {
            buf.clear();
            buf.extend(members.iter().map(|p| p.state[t]));
            state.push(ensemble_moments(&buf));
            buf.clear();
            buf.extend(members.iter().filter_map(|p| p.action[t]));
            action.push((!buf.is_empty()).then(|| ensemble_moments(&buf)));
        }
        Ok(EnsemblePrediction { members, state, action })
    }

    pub fn config_hash(&self) -> String {
        crate::manifest::sha256_hex(self.config.to_kv().render().as_bytes())
    }

    pub fn manifest(&self, manifest_id: &str) -> EnsembleManifest {
        EnsembleManifest {
            format: ENSEMBLE_FORMAT.to_string(),
            k: self.members.len(),
            roles: vec!["state_conditioned".into(), "action_conditioned".into()],
            mask_seeds: self.mask_seeds.clone(),
            mask_probability: self.config.mask_prob,
            config_hash: self.config_hash(),
            heldout: self.heldout.clone(),
            logs: self.logs.clone(),
            manifest_id: manifest_id.to_string(),
        }
    }

    pub fn member_path(dir: &Path, k: usize) -> PathBuf {
        dir.join(format!("member_{k}.json"))
    }

    pub fn save(&self, dir: &Path, manifest_id: &str) -> Result<(), ReturnModelError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let cfg = serde_json::to_value(&self.config).expect("config serializes");
        for (k, m) in self.members.iter().enumerate() {
            let mut ckpt = m.to_checkpoint(cfg.clone());
            ckpt.manifest_id = manifest_id.to_string();
            ckpt.save(&Self::member_path(dir, k))?;
        }
        let path = dir.join("ensemble.json");
        let text = serde_json::to_string_pretty(&self.manifest(manifest_id)).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, ReturnModelError> {
        let path = dir.join("ensemble.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: EnsembleManifest =
            serde_json::from_str(&text).map_err(|e| ReturnModelError::Manifest(e.to_string()))?;
        if manifest.format != ENSEMBLE_FORMAT {
            return Err(ReturnModelError::Manifest(format!(
                "format mismatch: expected {ENSEMBLE_FORMAT}, found {}",
                manifest.format
            )));
        }
        if manifest.k == 0 || manifest.mask_seeds.len() != manifest.k {
            return Err(ReturnModelError::Manifest("inconsistent member count".into()));
        }
        let mut members = Vec::with_capacity(manifest.k);
        let mut config = None;
        for k in 0..manifest.k {
            let ckpt = Checkpoint::load(&Self::member_path(dir, k))?;
            if config.is_none() {
                config = Some(
                    serde_json::from_value::<ReturnTrainConfig>(ckpt.training_config.clone())
                        .map_err(|e| ReturnModelError::Manifest(e.to_string()))?,
                );
            }
            members.push(ReturnNet::from_checkpoint(&ckpt)?);
        }
        Ok(Self {
            members,
            config: config.expect("k >= 1"),
            mask_seeds: manifest.mask_seeds,
            heldout: manifest.heldout,
            logs: manifest.logs,
        })
    }
}
