//! Inference-time planning: target bookkeeping, return-span resets,
//! percentile targets from a span-conditioned return predictor, and dummy
//! gating from a nearest-neighbour uncertainty index.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::config::{invalid, ConfigError, KvConfig};
use crate::env::{EnvAction, EnvState, STATE_DIM};
use crate::features::{normalized_action, timestep_of, Normalizer, ScalarNorm};
use crate::grad::Checkpoint;
use crate::policy::{PolicyError, PolicyInputStep, PolicyKind, PolicyNet, PolicyTrainConfig};
use crate::return_model::{
    ensemble_moments, member_seed, train_net, ReturnArch, ReturnDistribution, ReturnModelError, ReturnNet,
    ReturnTrainConfig, SeqTraj,
};
use crate::trajlog::{SegColumns, Trajectory};

pub const INDEX_FORMAT: &str = "unrest-kdtree/1";
pub const PREDICTOR_FORMAT: &str = "unrest-target-predictor/1";

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("cannot build an index from an empty dataset")]
    EmptyIndex,
    #[error("index input mismatch: {0}")]
    IndexInput(String),
    #[error("artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ReturnModelError),
    #[error("{0} planning needs {1}")]
    Missing(PolicyKind, &'static str),
}

// ---------------------------------------------------------------------------
// Uncertainty index

/// Exact k-nearest-neighbour mean over standardized states. Ties in distance
/// are broken by insertion index.
#[derive(Clone, Debug)]
pub struct KdUncertaintyIndex {
    pub k: usize,
    pub epsilon: f64,
    pub norm: Normalizer,
    states: Vec<[f64; STATE_DIM]>,
    points: Vec<[f64; STATE_DIM]>,
    values: Vec<f64>,
    /// Points arranged so each subrange's median is its splitting node.
    order: Vec<usize>,
    split_dim: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    k: usize,
    epsilon: f64,
    norm: Normalizer,
    states: Vec<[f64; STATE_DIM]>,
    values: Vec<f64>,
    #[serde(default)]
    manifest_id: String,
}

fn dist2(a: &[f64; STATE_DIM], b: &[f64; STATE_DIM]) -> f64 {
    let mut s = 0.0;
    for i in 0..STATE_DIM {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Keeps the `k` smallest `(dist2, index)` pairs in ascending order.
struct Nearest {
    k: usize,
    best: Vec<(f64, usize)>,
}

impl Nearest {
    fn worst(&self) -> f64 {
        if self.best.len() < self.k {
            f64::INFINITY
        } else {
            self.best[self.k - 1].0
        }
    }

    fn offer(&mut self, d: f64, i: usize) {
        let key = (d, i);
        if self.best.len() == self.k && key >= self.best[self.k - 1] {
            return;
        }
        let pos = self.best.partition_point(|&b| b < key);
        self.best.insert(pos, key);
        self.best.truncate(self.k);
    }
}

impl KdUncertaintyIndex {
    pub fn build(states: &[[f64; STATE_DIM]], values: &[f64], k: usize, epsilon: f64) -> Result<Self, PlannerError> {
        let norm = Normalizer::fit(states.iter().map(|s| &s[..]), STATE_DIM);
        Self::with_norm(states, values, k, epsilon, norm)
    }

    fn with_norm(
        states: &[[f64; STATE_DIM]],
        values: &[f64],
        k: usize,
        epsilon: f64,
        norm: Normalizer,
    ) -> Result<Self, PlannerError> {
        if states.is_empty() {
            return Err(PlannerError::EmptyIndex);
        }
        if states.len() != values.len() {
            return Err(PlannerError::IndexInput(format!(
                "{} states but {} values",
                states.len(),
                values.len()
            )));
        }
        if k == 0 {
            return Err(invalid("KD-Tree neighbor", "must be positive").into());
        }
        if norm.dim() != STATE_DIM || norm.std.len() != STATE_DIM {
            return Err(PlannerError::IndexInput("normalizer dimension".into()));
        }
        if states.iter().flatten().chain(values).any(|v| !v.is_finite()) {
            return Err(PlannerError::IndexInput("non-finite state or value".into()));
        }
        let points: Vec<[f64; STATE_DIM]> = states
            .iter()
            .map(|s| {
                let mut p = [0.0; STATE_DIM];
                norm.apply_into(s, &mut p);
                p
            })
            .collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut split_dim = vec![0u8; points.len()];
        Self::arrange(&points, &mut order, &mut split_dim);
        Ok(Self {
            k,
            epsilon,
            norm,
            states: states.to_vec(),
            points,
            values: values.to_vec(),
            order,
            split_dim,
        })
    }

    /// Splits on the widest dimension at the median, recursively.
    fn arrange(points: &[[f64; STATE_DIM]], order: &mut [usize], dims: &mut [u8]) {
        if order.len() <= 1 {
            return;
        }
        let mut dim = 0;
        let mut spread = -1.0;
        for d in 0..STATE_DIM {
            let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(points[i][d]), hi.max(points[i][d]))
            });
            if hi - lo > spread {
                spread = hi - lo;
                dim = d;
            }
        }
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b)));
        dims[mid] = dim as u8;
        let (left, rest) = order.split_at_mut(mid);
        let (ldims, rdims) = dims.split_at_mut(mid);
        Self::arrange(points, left, ldims);
        Self::arrange(points, &mut rest[1..], &mut rdims[1..]);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn search(&self, q: &[f64; STATE_DIM], lo: usize, hi: usize, out: &mut Nearest) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        out.offer(dist2(q, &self.points[i]), i);
        let dim = self.split_dim[mid] as usize;
        let diff = q[dim] - self.points[i][dim];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, out);
        // `<=` keeps equal-distance candidates with smaller indices reachable.
        if diff * diff <= out.worst() {
            self.search(q, far.0, far.1, out);
        }
    }

    /// Indices of the `k` nearest stored states, nearest first.
    pub fn neighbors(&self, state: &[f64; STATE_DIM]) -> Vec<usize> {
        let mut q = [0.0; STATE_DIM];
        self.norm.apply_into(state, &mut q);
        let mut out = Nearest {
            k: self.k.min(self.points.len()),
            best: Vec::with_capacity(self.k + 1),
        };
        self.search(&q, 0, self.points.len(), &mut out);
        out.best.into_iter().map(|(_, i)| i).collect()
    }

    /// Mean stored uncertainty of the nearest neighbours, summed nearest first.
    pub fn query(&self, state: &[f64; STATE_DIM]) -> f64 {
        let nb = self.neighbors(state);
        nb.iter().map(|&i| self.values[i]).sum::<f64>() / nb.len() as f64
    }

    pub fn is_uncertain(&self, state: &[f64; STATE_DIM]) -> bool {
        self.query(state) > self.epsilon
    }

    /// Linear-scan reference for the same query.
    pub fn brute_force(&self, state: &[f64; STATE_DIM]) -> f64 {
        let mut q = [0.0; STATE_DIM];
        self.norm.apply_into(state, &mut q);
        let mut all: Vec<(f64, usize)> = self.points.iter().enumerate().map(|(i, p)| (dist2(&q, p), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = self.k.min(all.len());
        all[..k].iter().map(|&(_, i)| self.values[i]).sum::<f64>() / k as f64
    }

    pub fn from_dataset(trajs: &[Trajectory], u: &[Vec<f64>], k: usize, epsilon: f64) -> Result<Self, PlannerError> {
        if trajs.len() != u.len() {
            return Err(PlannerError::IndexInput(format!(
                "{} trajectories but {} traces",
                trajs.len(),
                u.len()
            )));
        }
        let mut states = Vec::new();
        let mut values = Vec::new();
        for (t, trace) in trajs.iter().zip(u) {
            if t.len() != trace.len() {
                return Err(PlannerError::IndexInput(format!(
                    "trajectory of {} steps with a trace of {}",
                    t.len(),
                    trace.len()
                )));
            }
            states.extend(t.steps.iter().map(|s| s.state));
            values.extend_from_slice(trace);
        }
        Self::build(&states, &values, k, epsilon)
    }

    pub fn to_json(&self, manifest_id: &str) -> String {
        let f = IndexFile {
            format: INDEX_FORMAT.into(),
            k: self.k,
            epsilon: self.epsilon,
            norm: self.norm.clone(),
            states: self.states.clone(),
            values: self.values.clone(),
            manifest_id: manifest_id.into(),
        };
        serde_json::to_string(&f).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PlannerError> {
        let bad = |reason: String| PlannerError::Artifact {
            path: "index".into(),
            reason,
        };
        let f: IndexFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if f.format != INDEX_FORMAT {
            return Err(bad(format!("format mismatch: expected {INDEX_FORMAT}, found {}", f.format)));
        }
        if f.norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(bad("non-positive normalizer scale".into()));
        }
        Self::with_norm(&f.states, &f.values, f.k, f.epsilon, f.norm)
    }

    pub fn save(&self, path: &Path, manifest_id: &str) -> Result<(), PlannerError> {
        fs::write(path, self.to_json(manifest_id)).map_err(|e| PlannerError::Artifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PlannerError> {
        let text = fs::read_to_string(path).map_err(|e| PlannerError::Artifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            PlannerError::Artifact { reason, .. } => PlannerError::Artifact {
                path: path.display().to_string(),
                reason,
            },
            e => e,
        })
    }
}

// ---------------------------------------------------------------------------
// Target return predictor

/// Value at percentile `eta` of a Gaussian.
pub fn percentile_target(d: &ReturnDistribution, eta: f64) -> f64 {
    let z = Normal::standard().inverse_cdf(eta);
    d.mu + d.std() * z
}

/// Linear-interpolated empirical quantile of sorted values.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let x = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let i = (x.floor() as usize).min(n - 2);
            let f = x - i as f64;
            sorted[i] + f * (sorted[i + 1] - sorted[i])
        }
    }
}

/// Ensemble of return nets conditioned on the return span, trained to
/// predict the truncated return on certain steps.
#[derive(Clone, Debug)]
pub struct TargetReturnPredictor {
    pub members: Vec<ReturnNet>,
}

#[derive(Serialize, Deserialize)]
struct PredictorFile {
    format: String,
    #[serde(default)]
    manifest_id: String,
    members: Vec<Checkpoint>,
}

impl TargetReturnPredictor {
    pub fn train(
        trajs: &[Trajectory],
        cols: &[Vec<SegColumns>],
        cfg: &PolicyTrainConfig,
        members: usize,
    ) -> Result<Self, PlannerError> {
        let rcfg = ReturnTrainConfig {
            layers: cfg.layers,
            heads: cfg.heads,
            dim: cfg.dim,
            batch: cfg.batch,
            context: cfg.context.max(2),
            lr: cfg.lr,
            dropout: cfg.dropout,
            weight_decay: cfg.weight_decay,
            ensemble: members.max(1),
            ref_epochs: cfg.ref_epochs,
            ref_dataset_size: cfg.ref_dataset_size,
            iters_per_epoch: cfg.iters_per_epoch,
            max_timestep: cfg.max_timestep,
            seed: cfg.seed ^ 0x7a67,
            ..ReturnTrainConfig::default()
        };
        let mut arch = ReturnArch::new(rcfg.trunk(), rcfg.context);
        arch.max_timestep = cfg.max_timestep;
        arch.span_vocab = cfg.max_timestep + 1;
        arch.action_head = false;
        arch.state_norm = Normalizer::fit_states(trajs);
        let certain: Vec<f64> = cols.iter().flatten().filter(|c| c.h > 0).map(|c| c.rh).collect();
        if certain.is_empty() {
            return Err(ReturnModelError::NoData("no certain steps to train the target predictor".into()).into());
        }
        arch.target_norm = ScalarNorm::fit(&certain);
        let seqs: Vec<SeqTraj> = trajs
            .iter()
            .zip(cols)
            .map(|(t, c)| {
                let spans: Vec<usize> = c.iter().map(|c| c.h).collect();
                let mut s = SeqTraj::inputs(&arch, t, Some(&spans));
                for (i, c) in c.iter().enumerate() {
                    if c.h > 0 {
                        s.target_s[i] = arch.target_norm.forward(c.rh);
                        s.weight_s[i] = 1.0;
                    }
                }
                s
            })
            .collect();
        let refs: Vec<&SeqTraj> = seqs.iter().collect();
        let steps: usize = seqs.iter().map(SeqTraj::len).sum();
        let (epochs, iterations) = (rcfg.epochs(steps), rcfg.iterations(steps));
        let mut out = Vec::with_capacity(rcfg.ensemble);
        for m in 0..rcfg.ensemble {
            let seed = member_seed(rcfg.seed, m);
            let mut net = ReturnNet::new(arch.clone(), seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(5);
            train_net(&mut net, &refs, None, &rcfg, epochs, iterations, m, &mut rng)?;
            out.push(net);
        }
        Ok(Self { members: out })
    }

    /// Moment-matched prediction of the truncated return at the current
    /// (last) step of `history` under span `h`.
    pub fn predict(&self, history: &[PolicyInputStep], h: usize) -> Result<ReturnDistribution, PlannerError> {
        let Some(arch) = self.members.first().map(|m| &m.arch) else {
            return Err(PlannerError::Missing(PolicyKind::Unrest, "a trained target predictor"));
        };
        let n = history.len().min(arch.context);
        let steps = &history[history.len() - n..];
        let mut seq = SeqTraj {
            states: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            times: Vec::with_capacity(n),
            spans: Vec::with_capacity(n),
            target_s: vec![0.0; n],
            weight_s: vec![0.0; n],
            target_a: vec![0.0; n],
            weight_a: vec![0.0; n],
        };
        for (i, s) in steps.iter().enumerate() {
            let mut x = [0.0; STATE_DIM];
            arch.state_norm.apply_into(&s.state, &mut x);
            seq.states.push(x);
            seq.actions.push(normalized_action(&s.action, arch.v_max));
            seq.times.push(timestep_of(&s.state));
            seq.spans.push(if i + 1 == n { h } else { s.h });
        }
        let preds: Vec<ReturnDistribution> = self
            .members
            .iter()
            .map(|m| m.predict_last(&seq))
            .collect::<Result<_, _>>()?;
        Ok(ensemble_moments(&preds))
    }

    pub fn predict_target(&self, history: &[PolicyInputStep], h: usize, eta: f64) -> Result<f64, PlannerError> {
        Ok(percentile_target(&self.predict(history, h)?, eta))
    }

    pub fn save(&self, path: &Path, manifest_id: &str) -> Result<(), PlannerError> {
        let f = PredictorFile {
            format: PREDICTOR_FORMAT.into(),
            manifest_id: manifest_id.into(),
            members: self
                .members
                .iter()
                .map(|m| m.to_checkpoint(serde_json::Value::Null))
                .collect(),
        };
        fs::write(path, serde_json::to_string(&f).expect("predictor serializes")).map_err(|e| {
            PlannerError::Artifact {
                path: path.display().to_string(),
                reason: e.to_string(),
            }
        })
    }

    pub fn from_json(text: &str) -> Result<Self, PlannerError> {
        let bad = |reason: String| PlannerError::Artifact {
            path: "predictor".into(),
            reason,
        };
        let f: PredictorFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if f.format != PREDICTOR_FORMAT {
            return Err(bad(format!("format mismatch: expected {PREDICTOR_FORMAT}, found {}", f.format)));
        }
        if f.members.is_empty() {
            return Err(bad("no members".into()));
        }
        let members = f
            .members
            .iter()
            .map(ReturnNet::from_checkpoint)
            .collect::<Result<_, _>>()?;
        Ok(Self { members })
    }

    pub fn load(path: &Path) -> Result<Self, PlannerError> {
        let text = fs::read_to_string(path).map_err(|e| PlannerError::Artifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            PlannerError::Artifact { reason, .. } => PlannerError::Artifact {
                path: path.display().to_string(),
                reason,
            },
            e => e,
        })
    }
}

// ---------------------------------------------------------------------------
// Planning loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub history: usize,
    pub epsilon: f64,
    pub horizon: usize,
    pub eta: f64,
    pub deterministic: bool,
    pub neighbors: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            history: 5,
            epsilon: 0.3,
            horizon: 30,
            eta: 0.7,
            deterministic: true,
            neighbors: 5,
        }
    }
}

impl PlannerConfig {
    pub fn full_scale() -> Self {
        Self {
            epsilon: 3.0,
            horizon: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.history == 0 {
            return Err(invalid("Max history length", "must be positive"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid("Uncertainty threshold", "must be non-negative"));
        }
        if self.horizon == 0 {
            return Err(invalid("Return Horizon", "must be positive"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(invalid("Upper Percentile", "must lie in (0, 1)"));
        }
        if !self.deterministic {
            return Err(invalid("Deterministic sample", "only deterministic action selection is implemented"));
        }
        if self.neighbors == 0 {
            return Err(invalid("KD-Tree neighbor", "must be positive"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let cfg = Self {
            history: kv.take_usize("Max history length", d.history)?,
            epsilon: kv.take_f64("Uncertainty threshold", d.epsilon)?,
            horizon: kv.take_usize("Return Horizon", d.horizon)?,
            eta: kv.take_f64("Upper Percentile", d.eta)?,
            deterministic: kv.take_bool("Deterministic sample", d.deterministic)?,
            neighbors: kv.take_usize("KD-Tree neighbor", d.neighbors)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("Max history length", self.history);
        kv.set("Uncertainty threshold", self.epsilon);
        kv.set("Return Horizon", self.horizon);
        kv.set("Upper Percentile", self.eta);
        kv.set("Deterministic sample", if self.deterministic { "True" } else { "False" });
        kv.set("KD-Tree neighbor", self.neighbors);
        kv
    }
}

/// How the span and truncated target were updated at a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanUpdate {
    Init,
    Decrement,
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub update: SpanUpdate,
    /// Span and truncated target after the update, before gating.
    pub h: usize,
    pub rh: f64,
    pub global: f64,
    /// Whether the policy received the dummy condition.
    pub dummy: bool,
    /// Whether the next step must reset (uncertain state or failed prediction).
    pub flagged: bool,
    pub uncertainty: Option<f64>,
    pub predictor_failed: bool,
}

/// Models consulted by the planner. UNREST needs both the index and the
/// predictor; the baselines need neither.
pub struct PlannerModels<'a> {
    pub policy: &'a PolicyNet,
    pub index: Option<&'a KdUncertaintyIndex>,
    pub predictor: Option<&'a TargetReturnPredictor>,
}

impl<'a> PlannerModels<'a> {
    pub fn check(&self) -> Result<(), PlannerError> {
        let kind = self.policy.kind();
        if kind == PolicyKind::Unrest {
            if self.index.is_none() {
                return Err(PlannerError::Missing(kind, "an uncertainty index"));
            }
            if self.predictor.is_none() {
                return Err(PlannerError::Missing(kind, "a target predictor"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PlannerState {
    pub config: PlannerConfig,
    pub history: VecDeque<PolicyInputStep>,
    pub global: f64,
    pub rh: f64,
    pub h: usize,
    pub prev_uncertain: bool,
    started: bool,
}

impl PlannerState {
    pub fn new(config: PlannerConfig, initial_target: f64) -> Self {
        Self {
            history: VecDeque::with_capacity(config.history + 1),
            config,
            global: initial_target,
            rh: 0.0,
            h: 0,
            prev_uncertain: false,
            started: false,
        }
    }

    /// Initial global target: the `eta` percentile of the training episode returns.
    pub fn for_policy(config: PlannerConfig, policy: &PolicyNet) -> Self {
        let r1 = empirical_quantile(&policy.arch.episode_returns, config.eta);
        Self::new(config, r1)
    }

    fn fresh_target(
        &self,
        predictor: Option<&TargetReturnPredictor>,
        current: &PolicyInputStep,
    ) -> Result<f64, PlannerError> {
        let Some(p) = predictor else {
            return Ok(0.0);
        };
        let mut ctx: Vec<PolicyInputStep> = self.history.iter().copied().collect();
        ctx.push(*current);
        let v = p.predict_target(&ctx, self.config.horizon, self.config.eta)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ReturnModelError::BadVariance(v).into())
        }
    }

    /// One planning step. `prev_reward` is the reward of the previous step
    /// (ignored on the first call).
    pub fn plan_step(
        &mut self,
        state: &EnvState,
        prev_reward: f64,
        models: &PlannerModels<'_>,
    ) -> Result<(EnvAction, StepTrace), PlannerError> {
        let kind = models.policy.kind();
        let s = state.to_vector();
        let mut current = PolicyInputStep {
            h: 0,
            rh: 0.0,
            ret: 0.0,
            state: s,
            action: [0.0; 2],
        };
        let update = if !self.started {
            self.started = true;
            SpanUpdate::Init
        } else {
            self.global -= prev_reward;
            if self.h <= 1 || self.prev_uncertain {
                SpanUpdate::Reset
            } else {
                SpanUpdate::Decrement
            }
        };
        current.ret = self.global;
        let mut predictor_failed = false;
        match update {
            SpanUpdate::Decrement => {
                self.h -= 1;
                self.rh -= prev_reward;
            }
            SpanUpdate::Init | SpanUpdate::Reset => {
                self.h = self.config.horizon;
                match self.fresh_target(models.predictor, &current) {
                    Ok(v) => self.rh = v,
                    Err(e) => {
                        warn!("target predictor failed, using the dummy condition: {e}");
                        predictor_failed = true;
                        self.rh = 0.0;
                    }
                }
            }
        }
        let uncertainty = models.index.map(|ix| ix.query(&s));
        let uncertain = uncertainty.is_some_and(|u| u > self.config.epsilon);
        let dummy = kind == PolicyKind::Unrest && (uncertain || predictor_failed);
        if kind == PolicyKind::Unrest && !dummy {
            current.h = self.h;
            current.rh = self.rh;
        }
        if self.global < 0.0 && kind != PolicyKind::Bc {
            log::debug!("global target fell below zero ({:.3})", self.global);
        }
        self.history.push_back(current);
        while self.history.len() > self.config.history.min(models.policy.arch.context) {
            self.history.pop_front();
        }
        let ctx: Vec<PolicyInputStep> = self.history.iter().copied().collect();
        let action = models.policy.predict_action(&ctx)?;
        let raw = [action.target_speed, action.target_steer];
        self.history.back_mut().expect("history holds the current step").action = raw;
        // A failed prediction forces a reset on the next step too.
        self.prev_uncertain = uncertain || predictor_failed;
        Ok((
            action,
            StepTrace {
                update,
                h: self.h,
                rh: self.rh,
                global: self.global,
                dummy,
                flagged: self.prev_uncertain,
                uncertainty,
                predictor_failed,
            },
        ))
    }
}

/// Number of steps that break the span or global-target bookkeeping.
pub fn bookkeeping_violations(traces: &[StepTrace], rewards: &[f64], horizon: usize) -> usize {
    let mut bad = 0;
    let Some(first) = traces.first() else {
        return 0;
    };
    let r1 = first.global;
    let mut spent = 0.0;
    for (t, tr) in traces.iter().enumerate() {
        if t > 0 {
            spent += rewards[t - 1];
        }
        if (tr.global + spent - r1).abs() > 1e-9 * (1.0 + r1.abs() + spent.abs()) {
            bad += 1;
        }
        if tr.h == 0 || tr.h > horizon {
            bad += 1;
            continue;
        }
        let ok = match (t, tr.update) {
            (0, SpanUpdate::Init) => tr.h == horizon,
            (0, _) | (_, SpanUpdate::Init) => false,
            (_, SpanUpdate::Reset) => {
                let p = &traces[t - 1];
                tr.h == horizon && (p.h == 1 || p.flagged)
            }
            (_, SpanUpdate::Decrement) => {
                let p = &traces[t - 1];
                p.h > 1 && !p.flagged && tr.h == p.h - 1 && (tr.rh - (p.rh - rewards[t - 1])).abs() < 1e-9
            }
        };
        if !ok {
            bad += 1;
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_states(n: usize, seed: u64) -> Vec<[f64; STATE_DIM]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut s = [0.0; STATE_DIM];
                for v in &mut s {
                    *v = rng.random_range(-5.0..5.0);
                }
                s
            })
            .collect()
    }

    #[test]
    fn single_point_index() {
        let ix = KdUncertaintyIndex::build(&[[1.0; STATE_DIM]], &[0.7], 5, 0.5).unwrap();
        assert_eq!(ix.query(&[-30.0; STATE_DIM]), 0.7);
        assert!(ix.is_uncertain(&[0.0; STATE_DIM]));
    }

    #[test]
    fn duplicate_states_average() {
        let states = vec![[2.0; STATE_DIM]; 5];
        let ix = KdUncertaintyIndex::build(&states, &[1.0, 2.0, 3.0, 4.0, 5.0], 5, 0.0).unwrap();
        assert_eq!(ix.query(&[2.0; STATE_DIM]), 3.0);
    }

    #[test]
    fn matches_linear_scan() {
        let states = random_states(500, 1);
        let values: Vec<f64> = (0..500).map(|i| (i as f64).sin()).collect();
        let ix = KdUncertaintyIndex::build(&states, &values, 5, 0.0).unwrap();
        for q in random_states(200, 2) {
            assert_eq!(ix.query(&q), ix.brute_force(&q));
        }
    }

    #[test]
    fn index_json_round_trip() {
        let states = random_states(50, 3);
        let values: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ix = KdUncertaintyIndex::build(&states, &values, 5, 0.3).unwrap();
        let back = KdUncertaintyIndex::from_json(&ix.to_json("m")).unwrap();
        for q in random_states(20, 4) {
            assert_eq!(ix.query(&q), back.query(&q));
        }
    }

    #[test]
    fn empty_index_fails() {
        assert!(matches!(
            KdUncertaintyIndex::build(&[], &[], 5, 0.1),
            Err(PlannerError::EmptyIndex)
        ));
    }

    #[test]
    fn percentile_examples() {
        let d = ReturnDistribution { mu: 2.0, var: 1.0 };
        assert!((percentile_target(&d, 0.5) - 2.0).abs() < 1e-12);
        assert!((percentile_target(&d, 0.7) - 2.5244).abs() < 1e-4);
        assert!(percentile_target(&d, 0.6) <= percentile_target(&d, 0.9));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(empirical_quantile(&[0.0, 10.0], 0.7), 7.0);
        assert_eq!(empirical_quantile(&[3.0], 0.2), 3.0);
    }

    #[test]
    fn planner_config_round_trips() {
        let cfg = PlannerConfig::full_scale();
        let mut kv = cfg.to_kv();
        assert_eq!(PlannerConfig::from_kv(&mut kv).unwrap(), cfg);
        let mut bad = KvConfig::parse("Upper Percentile = 1.5").unwrap();
        assert!(PlannerConfig::from_kv(&mut bad).is_err());
    }
}
