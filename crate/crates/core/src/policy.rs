//! Return-conditioned decision transformers and the behaviour-cloning baseline.
//!
//! Token layouts per step:
//! - UNREST: `(return, state, action)` where the return token embeds the
//!   truncated return plus a span embedding, or is a learned dummy vector on
//!   uncertain steps.
//! - DT: `(return, state, action)` with the global return-to-go.
//! - BC: `(state, action)`.
//!
//! The action is read from the trunk output at the state token, optionally
//! concatenated with a one-hot bin of the global return, and squashed by tanh.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{invalid, ConfigError, KvConfig};
use crate::env::{EnvAction, ACTION_DIM, STATE_DIM};
use crate::features::{normalized_action, timestep_of, Normalizer, ScalarNorm};
use crate::grad::nn::{Embedding, Linear, Transformer, TrunkConfig};
use crate::grad::{AdamW, AdamWConfig, Checkpoint, GradError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::trajlog::{discounted_returns, SegColumns, TrajError, Trajectory, Window, WindowSampler};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loss became {loss} at epoch {epoch}, iteration {iteration}")]
    Divergence { epoch: usize, iteration: usize, loss: f64 },
    #[error("malformed context: {0}")]
    Context(String),
    #[error("{0} policy needs segmented data")]
    NeedsSegments(PolicyKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Unrest,
    Dt,
    Bc,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Unrest => "unrest",
            PolicyKind::Dt => "dt",
            PolicyKind::Bc => "bc",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unrest" => Ok(PolicyKind::Unrest),
            "dt" => Ok(PolicyKind::Dt),
            "bc" => Ok(PolicyKind::Bc),
            _ => Err(format!("unknown policy kind `{s}` (expected unrest, dt or bc)")),
        }
    }
}

/// One step of policy input. `action` is ignored for the step being predicted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyInputStep {
    /// Return span; 0 selects the dummy condition.
    pub h: usize,
    pub rh: f64,
    /// Global return-to-go.
    pub ret: f64,
    pub state: [f64; STATE_DIM],
    pub action: [f64; ACTION_DIM],
}

impl PolicyInputStep {
    pub fn is_finite(&self) -> bool {
        self.rh.is_finite()
            && self.ret.is_finite()
            && self.state.iter().all(|v| v.is_finite())
            && self.action.iter().all(|v| v.is_finite())
    }
}

/// Uniform bin of `r` over `bounds`; out-of-range values land in the edge bins.
pub fn discretize_global_return(r: f64, bounds: (f64, f64), bins: usize) -> usize {
    let (lo, hi) = bounds;
    if !(hi > lo) {
        return 0;
    }
    let x = ((r - lo) / (hi - lo) * bins as f64).floor();
    if x.is_nan() || x < 0.0 {
        0
    } else {
        (x as usize).min(bins - 1)
    }
}

pub fn one_hot(index: usize, bins: usize) -> Vec<f64> {
    let mut v = vec![0.0; bins];
    v[index] = 1.0;
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub kind: PolicyKind,
    pub trunk: TrunkConfig,
    pub context: usize,
    pub max_timestep: usize,
    pub span_vocab: usize,
    pub use_global_return: bool,
    pub use_return_span: bool,
    pub predict_variance: bool,
    pub global_bins: usize,
    pub global_bounds: (f64, f64),
    pub v_max: f64,
    pub state_norm: Normalizer,
    /// Normalization of the scalar condition (truncated return or return-to-go).
    pub cond_norm: ScalarNorm,
    /// Sorted undiscounted episode returns of the training data; the planner
    /// draws its initial global target from these.
    #[serde(default)]
    pub episode_returns: Vec<f64>,
}

impl PolicyArch {
    pub fn new(kind: PolicyKind, trunk: TrunkConfig, context: usize) -> Self {
        Self {
            kind,
            trunk,
            context,
            max_timestep: 300,
            span_vocab: 301,
            use_global_return: kind == PolicyKind::Unrest,
            use_return_span: kind == PolicyKind::Unrest,
            predict_variance: false,
            global_bins: 50,
            global_bounds: (0.0, 1.0),
            v_max: 40.0,
            state_norm: Normalizer::identity(STATE_DIM),
            cond_norm: ScalarNorm::default(),
            episode_returns: vec![],
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        if self.kind == PolicyKind::Bc {
            2
        } else {
            3
        }
    }

    fn global_enabled(&self) -> bool {
        self.kind == PolicyKind::Unrest && self.use_global_return
    }
}

struct Batch {
    b: usize,
    l: usize,
    states: Tensor,
    actions: Tensor,
    cond: Tensor,
    /// 1 on real-condition rows, 0 on dummy rows, broadcast to `[b*l, d]`.
    live: Tensor,
    times: Vec<usize>,
    spans: Vec<usize>,
    global: Tensor,
    key_valid: Vec<bool>,
    weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub arch: PolicyArch,
    pub store: ParamStore,
    state_emb: Linear,
    action_emb: Linear,
    time_emb: Embedding,
    ret_emb: Option<Linear>,
    span_emb: Option<Embedding>,
    dummy: Option<ParamId>,
    trunk: Transformer,
    head: Linear,
    log_var: Option<Linear>,
}

impl PolicyNet {
    pub fn new(arch: PolicyArch, seed: u64) -> Result<Self, PolicyError> {
        if arch.context == 0 {
            return Err(invalid("Sampled Sequence length", "must be positive").into());
        }
        let d = arch.trunk.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let state_emb = Linear::new(&mut store, "embed.state", STATE_DIM, d, &mut rng)?;
        let action_emb = Linear::new(&mut store, "embed.action", ACTION_DIM, d, &mut rng)?;
        let time_emb = Embedding::new(&mut store, "embed.time", arch.max_timestep + 1, d, &mut rng)?;
        let ret_emb = match arch.kind {
            PolicyKind::Bc => None,
            _ => Some(Linear::new(&mut store, "embed.return", 1, d, &mut rng)?),
        };
        let (span_emb, dummy) = if arch.kind == PolicyKind::Unrest {
            let span = if arch.use_return_span {
                Some(Embedding::new(&mut store, "embed.span", arch.span_vocab, d, &mut rng)?)
            } else {
                None
            };
            let dummy = store.add_uniform("embed.dummy", &[d], d, &mut rng)?;
            (span, Some(dummy))
        } else {
            (None, None)
        };
        let trunk = Transformer::new(&mut store, "trunk", arch.trunk, &mut rng)?;
        let head_in = d + if arch.global_enabled() { arch.global_bins } else { 0 };
        let head = Linear::new(&mut store, "head.action", head_in, ACTION_DIM, &mut rng)?;
        let log_var = if arch.predict_variance {
            Some(Linear::zeros(&mut store, "head.log_var", head_in, ACTION_DIM)?)
        } else {
            None
        };
        Ok(Self {
            arch,
            store,
            state_emb,
            action_emb,
            time_emb,
            ret_emb,
            span_emb,
            dummy,
            trunk,
            head,
            log_var,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.arch.kind
    }

    pub fn to_checkpoint(&self, training_config: serde_json::Value) -> Checkpoint {
        Checkpoint::from_store(
            serde_json::to_value(&self.arch).expect("arch serializes"),
            training_config,
            &self.store,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PolicyError> {
        let arch: PolicyArch = serde_json::from_value(ckpt.architecture.clone())
            .map_err(|e| GradError::Checkpoint(format!("architecture: {e}")))?;
        let d = arch.trunk.dim;
        ckpt.check_tables(&[
            (d, d),
            (arch.trunk.layers, d.saturating_mul(d)),
            (arch.max_timestep.saturating_add(1), d),
            (arch.span_vocab, d),
            (arch.global_bins, d),
        ])?;
        if arch.state_norm.dim() != STATE_DIM || arch.state_norm.std.len() != STATE_DIM {
            return Err(GradError::Checkpoint("state normalizer dimension".into()).into());
        }
        let mut net = Self::new(arch, 0)?;
        net.store.load_values(&ckpt.to_store()?)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path, training_config: serde_json::Value, manifest_id: &str) -> Result<(), PolicyError> {
        let mut ckpt = self.to_checkpoint(training_config);
        ckpt.manifest_id = manifest_id.to_string();
        Ok(ckpt.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn batch(&self, seqs: &[&[PolicyInputStep]], windows: &[Window], l: usize, weights: Option<&[&[f64]]>) -> Batch {
        let a = &self.arch;
        let (b, d) = (windows.len(), a.trunk.dim);
        let n = b * l;
        let k = a.tokens_per_step();
        let bins = a.global_bins;
        let mut states = vec![0.0; n * STATE_DIM];
        let mut actions = vec![0.0; n * ACTION_DIM];
        let mut cond = vec![0.0; n];
        let mut live = vec![0.0; n * d];
        let mut times = vec![0; n];
        let mut spans = vec![0; n];
        let mut global = if a.global_enabled() { vec![0.0; n * bins] } else { vec![] };
        let mut key_valid = vec![false; n * k];
        let mut w = vec![0.0; n];
        for (bi, win) in windows.iter().enumerate() {
            let seq = seqs[win.traj];
            for (slot, t) in win.slots().enumerate() {
                let Some(t) = t else { continue };
                let r = bi * l + slot;
                let step = &seq[t];
                a.state_norm
                    .apply_into(&step.state, &mut states[r * STATE_DIM..(r + 1) * STATE_DIM]);
                actions[r * ACTION_DIM..(r + 1) * ACTION_DIM].copy_from_slice(&normalized_action(&step.action, a.v_max));
                times[r] = timestep_of(&step.state);
                match a.kind {
                    PolicyKind::Unrest => {
                        if step.h > 0 {
                            cond[r] = a.cond_norm.forward(step.rh);
                            spans[r] = step.h;
                            live[r * d..(r + 1) * d].fill(1.0);
                        }
                    }
                    PolicyKind::Dt => {
                        cond[r] = a.cond_norm.forward(step.ret);
                        live[r * d..(r + 1) * d].fill(1.0);
                    }
                    PolicyKind::Bc => {}
                }
                if a.global_enabled() {
                    global[r * bins + discretize_global_return(step.ret, a.global_bounds, bins)] = 1.0;
                }
                key_valid[r * k..(r + 1) * k].fill(true);
                w[r] = weights.map_or(1.0, |ws| ws[win.traj][t]);
            }
        }
        let t = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data).expect("batch shape");
        Batch {
            b,
            l,
            states: t(vec![b, l, STATE_DIM], states),
            actions: t(vec![b, l, ACTION_DIM], actions),
            cond: t(vec![b, l, 1], cond),
            live: t(vec![b, l, d], live),
            times,
            spans,
            global: if a.global_enabled() {
                t(vec![n, bins], global)
            } else {
                Tensor::zeros(&[0])
            },
            key_valid,
            weights: w,
        }
    }

    /// Token tensor `[b, k*l, d]` in causal order.
    fn tokens(&self, g: &mut Graph, batch: &Batch) -> Result<Var, GradError> {
        let st = &self.store;
        let (b, l, d) = (batch.b, batch.l, self.arch.trunk.dim);
        let time = self.time_emb.forward(g, st, &batch.times, &[b, l])?;
        let s_in = g.input(batch.states.clone());
        let xs = self.state_emb.forward(g, st, s_in)?;
        let xs = g.add(xs, time)?;
        let a_in = g.input(batch.actions.clone());
        let xa = self.action_emb.forward(g, st, a_in)?;
        let xa = g.add(xa, time)?;
        let Some(ret_emb) = &self.ret_emb else {
            let both = g.concat(xs, xa)?;
            return g.reshape(both, &[b, 2 * l, d]);
        };
        let c_in = g.input(batch.cond.clone());
        let mut xr = ret_emb.forward(g, st, c_in)?;
        if let Some(span) = &self.span_emb {
            let e = span.forward(g, st, &batch.spans, &[b, l])?;
            xr = g.add(xr, e)?;
        }
        if let Some(dummy) = self.dummy {
            // live * (embedding) + (1 - live) * dummy, exact on both branches.
            let live = g.input(batch.live.clone());
            let dead_t = Tensor::new(
                batch.live.shape().to_vec(),
                batch.live.data().iter().map(|v| 1.0 - v).collect(),
            )?;
            let dead = g.input(dead_t);
            let kept = g.mul(xr, live)?;
            let dv = g.param(st, dummy);
            let zeros = g.input(Tensor::zeros(&[b, l, d]));
            let dummy_rows = g.add_row(zeros, dv)?;
            let dummy_rows = g.mul(dummy_rows, dead)?;
            xr = g.add(kept, dummy_rows)?;
        }
        let xr = g.add(xr, time)?;
        let rs = g.concat(xr, xs)?;
        let rsa = g.concat(rs, xa)?;
        g.reshape(rsa, &[b, 3 * l, d])
    }

    /// `(mean [b*l, 2], optional log-variance)` at every state token.
    fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Option<Var>), GradError> {
        let (b, l, d) = (batch.b, batch.l, self.arch.trunk.dim);
        let k = self.arch.tokens_per_step();
        let tokens = self.tokens(g, batch)?;
        let h = self.trunk.forward(g, &self.store, tokens, Some(&batch.key_valid), rng)?;
        let h = g.reshape(h, &[b * k * l, d])?;
        let state_pos: Vec<usize> = (0..b * l).map(|r| k * r + (k - 2)).collect();
        let mut h = g.rows(h, &state_pos)?;
        if self.arch.global_enabled() {
            let gl = g.input(batch.global.clone());
            h = g.concat(h, gl)?;
        }
        let pre = self.head.forward(g, &self.store, h)?;
        let mean = g.tanh(pre)?;
        let lv = match &self.log_var {
            Some(head) => Some(head.forward(g, &self.store, h)?),
            None => None,
        };
        Ok((mean, lv))
    }

    fn loss(&self, g: &mut Graph, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Var, GradError> {
        let (mean, lv) = self.forward(g, batch, rng)?;
        let n = batch.b * batch.l;
        let target = batch.actions.clone().reshape(&[n, ACTION_DIM])?;
        match lv {
            None => g.mse(mean, &target, Some(&batch.weights)),
            Some(lv) => {
                let w: Vec<f64> = batch.weights.iter().flat_map(|&w| [w, w]).collect();
                g.gaussian_nll(mean, lv, &target, Some(&w))
            }
        }
    }

    /// Return, state and action tokens of a single step (before the trunk).
    pub fn embed_step(&self, step: &PolicyInputStep) -> Result<Vec<Vec<f64>>, PolicyError> {
        let seq = [*step];
        let w = Window {
            traj: 0,
            start: 0,
            len: 1,
            pad: 0,
        };
        let batch = self.batch(&[&seq], &[w], 1, None);
        let mut g = Graph::new();
        let tok = self.tokens(&mut g, &batch)?;
        let d = self.arch.trunk.dim;
        Ok(g.value(tok).data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Normalized action in `[-1, 1]^2` for the last step of `context`.
    pub fn predict_normalized(&self, context: &[PolicyInputStep]) -> Result<[f64; ACTION_DIM], PolicyError> {
        if context.is_empty() {
            return Err(PolicyError::Context("empty context".into()));
        }
        if context.len() > self.arch.context {
            return Err(PolicyError::Context(format!(
                "{} steps exceed the context length {}",
                context.len(),
                self.arch.context
            )));
        }
        if let Some(i) = context.iter().position(|s| !s.is_finite()) {
            return Err(PolicyError::Context(format!("non-finite value at step {i}")));
        }
        let l = context.len();
        let w = Window {
            traj: 0,
            start: 0,
            len: l,
            pad: 0,
        };
        let batch = self.batch(&[context], &[w], l, None);
        let mut g = Graph::new();
        let (mean, _) = self.forward(&mut g, &batch, None)?;
        let v = g.value(mean).data();
        Ok([v[(l - 1) * 2], v[(l - 1) * 2 + 1]])
    }

    pub fn predict_action(&self, context: &[PolicyInputStep]) -> Result<EnvAction, PolicyError> {
        Ok(EnvAction::from_normalized(self.predict_normalized(context)?, self.arch.v_max))
    }

    /// Normalized actions for every step of `seq`, each predicted from the
    /// preceding `context`-sized window (used for training diagnostics).
    pub fn predict_windows(&self, seq: &[PolicyInputStep]) -> Result<Vec<[f64; ACTION_DIM]>, PolicyError> {
        let l = self.arch.context;
        let windows: Vec<Window> = (0..seq.len())
            .map(|t| {
                let len = (t + 1).min(l);
                Window {
                    traj: 0,
                    start: t + 1 - len,
                    len,
                    pad: l - len,
                }
            })
            .collect();
        let batch = self.batch(&[seq], &windows, l, None);
        let mut g = Graph::new();
        let (mean, _) = self.forward(&mut g, &batch, None)?;
        let v = g.value(mean).data();
        Ok((0..seq.len())
            .map(|i| [v[(i * l + l - 1) * 2], v[(i * l + l - 1) * 2 + 1]])
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainConfig {
    pub epsilon: f64,
    pub min_uncertain_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub batch: usize,
    pub context: usize,
    pub gamma: f64,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: bool,
    pub ref_epochs: f64,
    pub ref_dataset_size: f64,
    pub iters_per_epoch: usize,
    pub global_bins: usize,
    pub use_global_return: bool,
    pub use_return_span: bool,
    pub predict_variance: bool,
    pub max_timestep: usize,
    /// Members of the span-conditioned target predictor trained alongside UNREST.
    pub predictor_members: usize,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            min_uncertain_len: 10,
            layers: 2,
            heads: 4,
            dim: 32,
            batch: 64,
            context: 10,
            gamma: 1.0,
            lr: 1e-3,
            dropout: 0.1,
            weight_decay: false,
            ref_epochs: 8.0,
            ref_dataset_size: 5e4,
            iters_per_epoch: 50,
            global_bins: 50,
            use_global_return: true,
            use_return_span: true,
            predict_variance: false,
            max_timestep: 300,
            predictor_members: 1,
            seed: 0,
        }
    }
}

impl PolicyTrainConfig {
    pub fn full_scale() -> Self {
        Self {
            epsilon: 3.0,
            min_uncertain_len: 20,
            layers: 4,
            heads: 8,
            dim: 128,
            batch: 256,
            lr: 1e-4,
            ref_epochs: 200.0,
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
        if !(self.epsilon >= 0.0) {
            return Err(invalid("Uncertainty threshold", "must be non-negative"));
        }
        if self.min_uncertain_len == 0 {
            return Err(invalid("Min uncertain part length", "must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid("Transformer heads", "must divide Embedding dimension"));
        }
        if self.layers == 0 || self.batch == 0 || self.context == 0 {
            return Err(invalid("Transformer layers", "layers, batch and sequence length must be positive"));
        }
        if self.gamma != 1.0 {
            return Err(invalid("Discount", "decision models condition on undiscounted returns"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("Learning rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("Dropout", "must lie in [0, 1)"));
        }
        if self.predictor_members == 0 {
            return Err(invalid("Target predictor ensemble size", "must be positive"));
        }
        if self.global_bins == 0 {
            return Err(invalid("Global return dimension", "must be positive"));
        }
        if !(self.ref_epochs > 0.0) || !(self.ref_dataset_size > 0.0) {
            return Err(invalid("Reference epoch", "must be positive"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        for (key, only) in [
            ("Transformer Activation", "GELU"),
            ("Action Activation", "Tanh"),
            ("Optimizer", "AdamW"),
        ] {
            if kv.take_string(key, only) != only {
                return Err(invalid(key, format!("only {only} is implemented")));
            }
        }
        let cfg = Self {
            epsilon: kv.take_f64("Uncertainty threshold", d.epsilon)?,
            min_uncertain_len: kv.take_usize("Min uncertain part length", d.min_uncertain_len)?,
            layers: kv.take_usize("Transformer layers", d.layers)?,
            heads: kv.take_usize("Transformer heads", d.heads)?,
            dim: kv.take_usize("Embedding dimension", d.dim)?,
            batch: kv.take_usize("Batch size", d.batch)?,
            context: kv.take_usize("Sampled Sequence length", d.context)?,
            gamma: kv.take_f64("Discount", d.gamma)?,
            lr: kv.take_f64("Learning rate", d.lr)?,
            dropout: kv.take_f64("Dropout", d.dropout)?,
            weight_decay: kv.take_bool("Weight decay", d.weight_decay)?,
            ref_epochs: kv.take_f64("Reference epoch", d.ref_epochs)?,
            ref_dataset_size: kv.take_f64("Reference dataset size", d.ref_dataset_size)?,
            iters_per_epoch: kv.take_usize("Iterations per epoch", d.iters_per_epoch)?,
            global_bins: kv.take_usize("Global return dimension", d.global_bins)?,
            use_global_return: kv.take_bool("Use global return", d.use_global_return)?,
            use_return_span: kv.take_bool("Use return span", d.use_return_span)?,
            predict_variance: kv.take_bool("Predict action variance", d.predict_variance)?,
            max_timestep: kv.take_usize("Max timestep", d.max_timestep)?,
            predictor_members: kv.take_usize("Target predictor ensemble size", d.predictor_members)?,
            seed: kv.take_u64("Seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let b = |v: bool| if v { "True" } else { "False" };
        let mut kv = KvConfig::default();
        kv.set("Uncertainty threshold", self.epsilon);
        kv.set("Min uncertain part length", self.min_uncertain_len);
        kv.set("Transformer layers", self.layers);
        kv.set("Transformer heads", self.heads);
        kv.set("Embedding dimension", self.dim);
        kv.set("Batch size", self.batch);
        kv.set("Sampled Sequence length", self.context);
        kv.set("Discount", self.gamma);
        kv.set("Optimizer", "AdamW");
        kv.set("Weight decay", b(self.weight_decay));
        kv.set("Learning rate", self.lr);
        kv.set("Dropout", self.dropout);
        kv.set("Reference epoch", self.ref_epochs);
        kv.set("Transformer Activation", "GELU");
        kv.set("Global return dimension", self.global_bins);
        kv.set("Action Activation", "Tanh");
        kv.set("Reference dataset size", self.ref_dataset_size);
        kv.set("Iterations per epoch", self.iters_per_epoch);
        kv.set("Use global return", b(self.use_global_return));
        kv.set("Use return span", b(self.use_return_span));
        kv.set("Predict action variance", b(self.predict_variance));
        kv.set("Max timestep", self.max_timestep);
        kv.set("Target predictor ensemble size", self.predictor_members);
        kv.set("Seed", self.seed);
        kv
    }

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

/// Builds policy inputs from a trajectory and (for UNREST) its segment
/// columns. Without columns, `ret` is the undiscounted return-to-go.
pub fn policy_inputs(traj: &Trajectory, cols: Option<&[SegColumns]>) -> Result<Vec<PolicyInputStep>, PolicyError> {
    let ret = match cols {
        Some(c) => c.iter().map(|c| c.ret).collect(),
        None => discounted_returns(&traj.rewards(), 1.0)?,
    };
    Ok(traj
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| PolicyInputStep {
            h: cols.map_or(0, |c| c[t].h),
            rh: cols.map_or(0.0, |c| c[t].rh),
            ret: ret[t],
            state: s.state,
            action: s.action,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
}

pub fn train_policy(
    kind: PolicyKind,
    trajs: &[Trajectory],
    cols: Option<&[Vec<SegColumns>]>,
    cfg: &PolicyTrainConfig,
) -> Result<(PolicyNet, Vec<PolicyEpochLog>), PolicyError> {
    cfg.validate()?;
    if kind == PolicyKind::Unrest && cols.is_none() {
        return Err(PolicyError::NeedsSegments(kind));
    }
    let seqs: Vec<Vec<PolicyInputStep>> = trajs
        .iter()
        .enumerate()
        .map(|(i, t)| policy_inputs(t, cols.map(|c| &c[i][..])))
        .collect::<Result<_, _>>()?;
    let mut arch = PolicyArch::new(kind, cfg.trunk(), cfg.context);
    arch.max_timestep = cfg.max_timestep;
    arch.span_vocab = cfg.max_timestep + 1;
    arch.global_bins = cfg.global_bins;
    arch.predict_variance = cfg.predict_variance;
    if kind == PolicyKind::Unrest {
        arch.use_global_return = cfg.use_global_return;
        arch.use_return_span = cfg.use_return_span;
    }
    arch.state_norm = Normalizer::fit_states(trajs);
    let all = seqs.iter().flatten();
    let rets: Vec<f64> = all.clone().map(|s| s.ret).collect();
    let lo = rets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    arch.global_bounds = (lo, hi);
    let mut totals: Vec<f64> = trajs.iter().map(Trajectory::total_reward).collect();
    totals.sort_by(f64::total_cmp);
    arch.episode_returns = totals;
    arch.cond_norm = match kind {
        PolicyKind::Unrest => ScalarNorm::fit(&all.filter(|s| s.h > 0).map(|s| s.rh).collect::<Vec<_>>()),
        PolicyKind::Dt => ScalarNorm::fit(&rets),
        PolicyKind::Bc => ScalarNorm::default(),
    };

    let mut net = PolicyNet::new(arch, cfg.seed)?;
    let refs: Vec<&[PolicyInputStep]> = seqs.iter().map(Vec::as_slice).collect();
    let sampler = WindowSampler::new(&seqs.iter().map(Vec::len).collect::<Vec<_>>(), cfg.context)?;
    let steps: usize = seqs.iter().map(Vec::len).sum();
    let (epochs, iterations) = (cfg.epochs(steps), cfg.iterations(steps));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(11);
    let mut opt = AdamW::new(cfg.optimizer(), &net.store);
    let mut logs = Vec::with_capacity(epochs);
    info!("training {kind} policy: {epochs} epochs x {iterations} iterations");
    for epoch in 0..epochs {
        let mut total = 0.0;
        for iteration in 0..iterations {
            let windows = sampler.sample_batch(cfg.batch, &mut rng);
            let batch = net.batch(&refs, &windows, cfg.context, None);
            let mut g = Graph::new();
            let loss = net.loss(&mut g, &batch, Some(&mut rng))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(PolicyError::Divergence {
                    epoch,
                    iteration,
                    loss: value,
                });
            }
            total += value;
            g.backward_into(loss, &mut net.store)?;
            opt.step(&mut net.store);
        }
        let log = PolicyEpochLog {
            epoch,
            train_loss: total / iterations as f64,
        };
        info!("{kind} epoch {epoch}: loss {:.5}", log.train_loss);
        logs.push(log);
    }
    Ok((net, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trunk() -> TrunkConfig {
        TrunkConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            dropout: 0.0,
        }
    }

    fn step(h: usize, rh: f64, ret: f64) -> PolicyInputStep {
        let mut state = [0.3; STATE_DIM];
        state[STATE_DIM - 1] = 4.0;
        PolicyInputStep {
            h,
            rh,
            ret,
            state,
            action: [20.0, 0.1],
        }
    }

    #[test]
    fn padded_prefix_leaves_loss_unchanged() {
        use rand::Rng;
        for kind in [PolicyKind::Unrest, PolicyKind::Dt, PolicyKind::Bc] {
            let mut net = PolicyNet::new(PolicyArch::new(kind, trunk(), 4), 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let ids: Vec<_> = net.store.ids().collect();
            for id in ids {
                for v in net.store.get_mut(id).value.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            let seq: Vec<PolicyInputStep> = (0..3)
                .map(|t| {
                    let mut s = step(t % 2 + 1, 0.5 * t as f64, 2.0 - t as f64);
                    s.state[STATE_DIM - 1] = t as f64;
                    s.action = [10.0 + t as f64, 0.2 - 0.1 * t as f64];
                    s
                })
                .collect();
            let loss = |w: Window, l: usize| {
                let mut g = Graph::new();
                let v = net.loss(&mut g, &net.batch(&[&seq[..]], &[w], l, None), None).unwrap();
                g.value(v).item().unwrap()
            };
            let plain = Window { traj: 0, start: 0, len: 3, pad: 0 };
            let padded = Window { pad: 1, ..plain };
            let (a, b) = (loss(plain, 3), loss(padded, 4));
            assert!(a > 0.0);
            assert!((a - b).abs() < 1e-12, "{kind}: {a} vs {b}");
        }
    }

    #[test]
    fn bins_at_edges_and_midpoint() {
        assert_eq!(discretize_global_return(0.0, (0.0, 10.0), 50), 0);
        assert_eq!(discretize_global_return(10.0, (0.0, 10.0), 50), 49);
        assert_eq!(discretize_global_return(5.0, (0.0, 10.0), 50), 25);
        assert_eq!(discretize_global_return(-3.0, (0.0, 10.0), 50), 0);
        assert_eq!(discretize_global_return(1e9, (0.0, 10.0), 50), 49);
    }

    #[test]
    fn dummy_token_ignores_stored_return() {
        let net = PolicyNet::new(PolicyArch::new(PolicyKind::Unrest, trunk(), 4), 1).unwrap();
        let a = net.embed_step(&step(0, 0.0, 3.0)).unwrap();
        let b = net.embed_step(&step(0, 123.0, 3.0)).unwrap();
        assert_eq!(a[0], b[0]);
        let live = net.embed_step(&step(2, 0.0, 3.0)).unwrap();
        assert_ne!(a[0], live[0]);
    }

    #[test]
    fn span_changes_return_token() {
        let net = PolicyNet::new(PolicyArch::new(PolicyKind::Unrest, trunk(), 4), 1).unwrap();
        let a = net.embed_step(&step(3, 1.0, 3.0)).unwrap();
        let b = net.embed_step(&step(4, 1.0, 3.0)).unwrap();
        assert_ne!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
    }

    #[test]
    fn zeroed_span_table_gives_plain_return_token() {
        let mut net = PolicyNet::new(PolicyArch::new(PolicyKind::Unrest, trunk(), 4), 1).unwrap();
        let span = net.store.id("embed.span.table").unwrap();
        net.store.get_mut(span).value.data_mut().fill(0.0);
        let a = net.embed_step(&step(3, 1.0, 3.0)).unwrap();
        let b = net.embed_step(&step(9, 1.0, 3.0)).unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn actions_are_bounded() {
        let net = PolicyNet::new(PolicyArch::new(PolicyKind::Dt, trunk(), 4), 2).unwrap();
        let mut s = step(0, 0.0, 1e6);
        s.state = [1e4; STATE_DIM];
        let a = net.predict_normalized(&[s]).unwrap();
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn global_return_ablation_ignores_return() {
        let mut arch = PolicyArch::new(PolicyKind::Unrest, trunk(), 4);
        arch.use_global_return = false;
        arch.global_bounds = (0.0, 10.0);
        let net = PolicyNet::new(arch, 3).unwrap();
        let a = net.predict_normalized(&[step(0, 0.0, 1.0)]).unwrap();
        let b = net.predict_normalized(&[step(0, 0.0, 9.0)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_malformed_context() {
        let net = PolicyNet::new(PolicyArch::new(PolicyKind::Bc, trunk(), 2), 0).unwrap();
        assert!(net.predict_normalized(&[]).is_err());
        assert!(net.predict_normalized(&[step(0, 0.0, 0.0); 3]).is_err());
        assert!(net.predict_normalized(&[step(0, f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn checkpoint_predictions_are_bitwise_identical() {
        let mut arch = PolicyArch::new(PolicyKind::Unrest, trunk(), 4);
        arch.global_bounds = (-5.0, 5.0);
        let net = PolicyNet::new(arch, 5).unwrap();
        let ctx = [step(2, 1.0, 2.0), step(1, 0.5, 1.0), step(0, 0.0, 0.0)];
        let json = net.to_checkpoint(serde_json::Value::Null).to_json();
        let back = PolicyNet::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        assert_eq!(net.predict_normalized(&ctx).unwrap(), back.predict_normalized(&ctx).unwrap());
    }

    #[test]
    fn config_round_trips() {
        let cfg = PolicyTrainConfig::full_scale();
        let mut kv = cfg.to_kv();
        assert_eq!(PolicyTrainConfig::from_kv(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
    }
}
