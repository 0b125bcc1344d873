//! Pipeline stages over on-disk artifacts. Every stage checks its inputs,
//! refuses to overwrite outputs unless forced, and writes a run manifest
//! next to what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{invalid, ConfigError, KvConfig};
use crate::env::{EnvConfig, ExpertConfig};
use crate::evaluator::{calibrate, rollout, CalibrationReport, EvalError, EvalReport, ExpertAgent, PlannerAgent};
use crate::grad::GradError;
use crate::manifest::{hash_dir, hash_file, ArtifactRef, RunManifest};
use crate::planner::{KdUncertaintyIndex, PlannerConfig, PlannerError, PlannerModels, TargetReturnPredictor};
use crate::policy::{train_policy, PolicyError, PolicyKind, PolicyNet, PolicyTrainConfig};
use crate::return_model::{ReturnEnsemble, ReturnModelError, ReturnTrainConfig};
use crate::segmenter::{histogram, segment_dataset, SegmentError, SegmentSummary, UncertaintyTrace};
use crate::trajlog::{
    collect_expert, load_dataset, load_segmented, save_dataset, save_segmented, total_steps, SegColumns, TrajError,
    Trajectory, SEG_SCHEMA,
};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(String),
    #[error("{0}")]
    Failed(String),
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Config(_) => 2,
            StageError::Missing(_) => 3,
            StageError::Divergence(_) => 4,
            StageError::Exists(_) | StageError::Failed(_) => 1,
        }
    }
}

impl From<ConfigError> for StageError {
    fn from(e: ConfigError) -> Self {
        StageError::Config(e.to_string())
    }
}

impl From<TrajError> for StageError {
    fn from(e: TrajError) -> Self {
        StageError::Failed(e.to_string())
    }
}

impl From<GradError> for StageError {
    fn from(e: GradError) -> Self {
        StageError::Failed(e.to_string())
    }
}

impl From<ReturnModelError> for StageError {
    fn from(e: ReturnModelError) -> Self {
        match e {
            ReturnModelError::Config(c) => c.into(),
            ReturnModelError::Divergence { .. } => StageError::Divergence(e.to_string()),
            e => StageError::Failed(e.to_string()),
        }
    }
}

impl From<PolicyError> for StageError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Config(c) => c.into(),
            PolicyError::Divergence { .. } => StageError::Divergence(e.to_string()),
            e => StageError::Failed(e.to_string()),
        }
    }
}

impl From<PlannerError> for StageError {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::Config(c) => c.into(),
            PlannerError::Model(m) => m.into(),
            PlannerError::Policy(p) => p.into(),
            e => StageError::Failed(e.to_string()),
        }
    }
}

impl From<SegmentError> for StageError {
    fn from(e: SegmentError) -> Self {
        match e {
            SegmentError::Model(m) => m.into(),
            SegmentError::BadMinLength => StageError::Config(e.to_string()),
            e => StageError::Failed(e.to_string()),
        }
    }
}

impl From<EvalError> for StageError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Planner(p) => p.into(),
            EvalError::Model(m) => m.into(),
            e => StageError::Failed(e.to_string()),
        }
    }
}

fn io(path: &Path, e: impl ToString) -> StageError {
    StageError::Failed(format!("{}: {}", path.display(), e.to_string()))
}

fn require(path: &Path) -> Result<(), StageError> {
    if path.exists() {
        Ok(())
    } else {
        Err(StageError::Missing(path.display().to_string()))
    }
}

fn guard(path: &Path, force: bool) -> Result<(), StageError> {
    let occupied = if path.is_dir() {
        fs::read_dir(path).map_err(|e| io(path, e))?.next().is_some()
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(StageError::Exists(path.display().to_string()));
    }
    Ok(())
}

fn artifact(name: &str, path: &Path) -> Result<ArtifactRef, StageError> {
    let sha256 = if path.is_dir() { hash_dir(path) } else { hash_file(path) }.map_err(|e| io(path, e))?;
    Ok(ArtifactRef {
        name: name.to_string(),
        sha256,
    })
}

/// Sidecar manifest location: `<dir>/manifest.json` or `<file>.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() || artifact.extension().is_none() {
        artifact.join("manifest.json")
    } else {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

fn finish(mut m: RunManifest, outputs: &[(&str, &Path)], at: &Path) -> Result<RunManifest, StageError> {
    for (name, p) in outputs {
        m.outputs.push(artifact(name, p)?);
    }
    let path = manifest_path(at);
    m.save(&path).map_err(|e| io(&path, e))?;
    Ok(m)
}

fn write(path: &Path, text: &str) -> Result<(), StageError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

pub fn load_kv(path: Option<&Path>) -> Result<KvConfig, StageError> {
    match path {
        None => Ok(KvConfig::default()),
        Some(p) => {
            require(p)?;
            Ok(KvConfig::load(p)?)
        }
    }
}

/// Loads trajectories and, when the file is segmented, its columns.
pub fn load_training_data(path: &Path) -> Result<(Vec<Trajectory>, Option<Vec<Vec<SegColumns>>>), StageError> {
    require(path)?;
    let segmented = path.extension().is_none_or(|e| e != "bin") && {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        text.lines().next().is_some_and(|l| l.contains(SEG_SCHEMA))
    };
    if segmented {
        let (t, c) = load_segmented(path)?;
        Ok((t, Some(c)))
    } else {
        Ok((load_dataset(path)?, None))
    }
}

// ---------------------------------------------------------------------------
// Run-level settings

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_steps: usize,
    pub collection_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_steps: 50_000,
            collection_seed: 0,
            eval_seeds: vec![0, 1, 2],
            eval_episodes: 100,
        }
    }
}

pub fn parse_seeds(key: &str, text: &str) -> Result<Vec<u64>, ConfigError> {
    let seeds: Option<Vec<u64>> = text.split(',').map(|s| s.trim().parse().ok()).collect();
    match seeds {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: text.to_string(),
            expected: "comma-separated seeds",
        }),
    }
}

pub fn render_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let seeds = kv.take_string("Evaluation seeds", &render_seeds(&d.eval_seeds));
        let cfg = Self {
            dataset_steps: kv.take_usize("Dataset steps", d.dataset_steps)?,
            collection_seed: kv.take_u64("Collection seed", d.collection_seed)?,
            eval_seeds: parse_seeds("Evaluation seeds", &seeds)?,
            eval_episodes: kv.take_usize("Evaluation episodes", d.eval_episodes)?,
        };
        if cfg.dataset_steps == 0 {
            return Err(invalid("Dataset steps", "must be positive"));
        }
        if cfg.eval_episodes == 0 {
            return Err(invalid("Evaluation episodes", "must be positive"));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("Dataset steps", self.dataset_steps);
        kv.set("Collection seed", self.collection_seed);
        kv.set("Evaluation seeds", render_seeds(&self.eval_seeds));
        kv.set("Evaluation episodes", self.eval_episodes);
        kv
    }
}

// ---------------------------------------------------------------------------
// Stages

/// Expert episodes with consecutive seeds until at least `steps` steps.
pub fn collect_steps(env: &EnvConfig, expert: &ExpertConfig, steps: usize, seed: u64) -> Result<Vec<Trajectory>, StageError> {
    let mut out = Vec::new();
    let mut total = 0;
    let mut i = 0u64;
    while total < steps {
        let mut t = collect_expert(env, expert, 1, seed.wrapping_add(i))?;
        total += t[0].len();
        out.append(&mut t);
        i += 1;
    }
    Ok(out)
}

pub fn scenario_text(env: &EnvConfig, expert: &ExpertConfig) -> String {
    env.to_kv().merged(&expert.to_kv()).render()
}

pub fn collect_stage(
    env: &EnvConfig,
    expert: &ExpertConfig,
    steps: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<RunManifest, StageError> {
    guard(out, force)?;
    let cfg = format!("{}steps = {steps}\n", scenario_text(env, expert));
    let m = RunManifest::new("collect", &cfg, vec![], vec![seed]);
    let trajs = collect_steps(env, expert, steps, seed)?;
    info!("collected {} episodes, {} steps", trajs.len(), total_steps(&trajs));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    save_dataset(out, &trajs)?;
    finish(m, &[("dataset", out)], out)
}

pub fn train_return_stage(dataset: &Path, cfg: &ReturnTrainConfig, out_dir: &Path, force: bool) -> Result<RunManifest, StageError> {
    require(dataset)?;
    guard(out_dir, force)?;
    let trajs = load_dataset(dataset)?;
    let m = RunManifest::new(
        "train-return",
        &cfg.to_kv().render(),
        vec![artifact("dataset", dataset)?],
        vec![cfg.seed],
    );
    let ens = ReturnEnsemble::train(&trajs, cfg)?;
    if out_dir.exists() {
        fs::remove_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    }
    ens.save(out_dir, &m.id)?;
    let mut outputs = vec![];
    let names: Vec<(String, PathBuf)> = (0..ens.members.len())
        .map(|k| (format!("member_{k}"), ReturnEnsemble::member_path(out_dir, k)))
        .chain([("ensemble".to_string(), out_dir.join("ensemble.json"))])
        .collect();
    for (n, p) in &names {
        outputs.push((n.as_str(), p.as_path()));
    }
    finish(m, &outputs, out_dir)
}

#[derive(Clone, Debug)]
pub struct SegmentOutcome {
    pub manifest: RunManifest,
    pub summary: SegmentSummary,
    pub warnings: Vec<String>,
    pub histogram: Vec<usize>,
}

pub fn degenerate_threshold_warnings(summary: &SegmentSummary, epsilon: f64) -> Vec<String> {
    let mut w = Vec::new();
    if summary.steps == 0 {
        return w;
    }
    if epsilon >= summary.max_u {
        w.push(format!(
            "threshold {epsilon} is at or above the largest uncertainty {:.4}; every trajectory is a single certain part",
            summary.max_u
        ));
    } else if epsilon < summary.min_u {
        w.push(format!(
            "threshold {epsilon} is below the smallest uncertainty {:.4}; every step after the first is uncertain",
            summary.min_u
        ));
    }
    w
}

pub fn segment_stage(
    dataset: &Path,
    ensemble_dir: &Path,
    epsilon: f64,
    c: usize,
    out: &Path,
    force: bool,
) -> Result<SegmentOutcome, StageError> {
    require(dataset)?;
    require(&ensemble_dir.join("ensemble.json"))?;
    guard(out, force)?;
    if !(epsilon >= 0.0) {
        return Err(invalid("Uncertainty threshold", "must be non-negative").into());
    }
    if c == 0 {
        return Err(invalid("Min uncertain part length", "must be at least 1").into());
    }
    let trajs = load_dataset(dataset)?;
    let ens = ReturnEnsemble::load(ensemble_dir)?;
    let cfg = format!("Uncertainty threshold = {epsilon}\nMin uncertain part length = {c}\n");
    let m = RunManifest::new(
        "segment",
        &cfg,
        vec![artifact("dataset", dataset)?, artifact("ensemble", ensemble_dir)?],
        vec![],
    );
    let traces: Vec<UncertaintyTrace> = trajs
        .iter()
        .map(|t| crate::segmenter::estimate_uncertainty(t, &ens, epsilon))
        .collect::<Result<_, _>>()?;
    let (cols, summary) = segment_dataset(&trajs, &traces, c)?;
    let warnings = degenerate_threshold_warnings(&summary, epsilon);
    for w in &warnings {
        warn!("{w}");
    }
    let hi = if summary.max_u > 0.0 { summary.max_u } else { 1.0 };
    let hist = histogram(traces.iter().flat_map(|t| t.u.iter().skip(1).copied()), hi, 20);
    info!(
        "segmented {} steps: {} uncertain, {} certain parts, {} uncertain parts, u in [{:.4}, {:.4}]",
        summary.steps, summary.uncertain_steps, summary.certain_parts, summary.uncertain_parts, summary.min_u, summary.max_u
    );
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    save_segmented(out, &trajs, &cols)?;
    let manifest = finish(m, &[("segmented", out)], out)?;
    Ok(SegmentOutcome {
        manifest,
        summary,
        warnings,
        histogram: hist,
    })
}

pub const POLICY_FILE: &str = "policy.json";
pub const PREDICTOR_FILE: &str = "predictor.json";

pub fn train_policy_stage(
    data: &Path,
    cfg: &PolicyTrainConfig,
    kind: PolicyKind,
    out_dir: &Path,
    force: bool,
) -> Result<RunManifest, StageError> {
    let (trajs, cols) = load_training_data(data)?;
    guard(out_dir, force)?;
    if kind == PolicyKind::Unrest && cols.is_none() {
        return Err(StageError::Config(format!(
            "{} is not a segmented dataset; the unrest policy needs segmented data",
            data.display()
        )));
    }
    let text = format!("{}kind = {kind}\n", cfg.to_kv().render());
    let m = RunManifest::new("train-policy", &text, vec![artifact("data", data)?], vec![cfg.seed]);
    let (net, logs) = train_policy(kind, &trajs, cols.as_deref(), cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let training = serde_json::json!({ "config": cfg, "logs": logs });
    let policy_path = out_dir.join(POLICY_FILE);
    net.save(&policy_path, training, &m.id)?;
    let pred_path = out_dir.join(PREDICTOR_FILE);
    let policy_name = format!("policy_{kind}");
    let mut outputs: Vec<(&str, &Path)> = vec![(&policy_name, &policy_path)];
    if kind == PolicyKind::Unrest {
        let cols = cols.expect("checked above");
        let pred = TargetReturnPredictor::train(&trajs, &cols, cfg, cfg.predictor_members)?;
        pred.save(&pred_path, &m.id)?;
        outputs.push(("predictor", &pred_path));
    }
    finish(m, &outputs, out_dir)
}

pub fn build_kdtree_stage(segmented: &Path, k: usize, epsilon: f64, out: &Path, force: bool) -> Result<RunManifest, StageError> {
    require(segmented)?;
    guard(out, force)?;
    let (trajs, cols) = load_segmented(segmented)?;
    let cfg = format!("KD-Tree neighbor = {k}\nUncertainty threshold = {epsilon}\n");
    let m = RunManifest::new("build-kdtree", &cfg, vec![artifact("segmented", segmented)?], vec![]);
    let u: Vec<Vec<f64>> = cols.iter().map(|c| c.iter().map(|c| c.u).collect()).collect();
    let index = KdUncertaintyIndex::from_dataset(&trajs, &u, k, epsilon)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    index.save(out, &m.id)?;
    finish(m, &[("index", out)], out)
}

/// Loaded evaluation models for one policy directory.
pub struct LoadedPolicy {
    pub name: String,
    pub net: PolicyNet,
    pub predictor: Option<TargetReturnPredictor>,
}

pub fn load_policy(dir: &Path) -> Result<LoadedPolicy, StageError> {
    let p = dir.join(POLICY_FILE);
    require(&p)?;
    let net = PolicyNet::load(&p)?;
    let predictor = if net.kind() == PolicyKind::Unrest {
        let pp = dir.join(PREDICTOR_FILE);
        require(&pp)?;
        Some(TargetReturnPredictor::load(&pp)?)
    } else {
        None
    };
    Ok(LoadedPolicy {
        name: net.kind().to_string(),
        net,
        predictor,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const EPISODES_FILE: &str = "episodes.json";
pub const TABLE_FILE: &str = "report.txt";

pub struct EvaluateArgs<'a> {
    pub policies: &'a [PathBuf],
    pub index: Option<&'a Path>,
    pub planner: &'a PlannerConfig,
    pub env: &'a EnvConfig,
    pub expert: Option<&'a ExpertConfig>,
    pub seeds: &'a [u64],
    pub episodes: usize,
}

pub fn evaluate_stage(args: &EvaluateArgs<'_>, out_dir: &Path, force: bool) -> Result<(RunManifest, EvalReport), StageError> {
    guard(out_dir, force)?;
    args.planner.validate()?;
    args.env.validate()?;
    let mut inputs = vec![];
    let mut loaded = vec![];
    for dir in args.policies {
        let p = load_policy(dir)?;
        inputs.push(artifact(&format!("policy:{}", p.name), dir)?);
        loaded.push(p);
    }
    let index = match args.index {
        Some(p) => {
            require(p)?;
            inputs.push(artifact("index", p)?);
            Some(KdUncertaintyIndex::load(p)?)
        }
        None => None,
    };
    let cfg = format!(
        "{}{}expert = {}\nEvaluation seeds = {}\nEvaluation episodes = {}\n",
        args.planner.to_kv().render(),
        args.env.to_kv().render(),
        args.expert.is_some(),
        render_seeds(args.seeds),
        args.episodes
    );
    let m = RunManifest::new("evaluate", &cfg, inputs, args.seeds.to_vec());
    let mut report = EvalReport::new(args.seeds, args.episodes, args.env.delta);
    for p in &loaded {
        let unrest = p.net.kind() == PolicyKind::Unrest;
        let models = PlannerModels {
            policy: &p.net,
            index: if unrest { index.as_ref() } else { None },
            predictor: p.predictor.as_ref(),
        };
        let mut agent = PlannerAgent::new(models, args.planner.clone())?;
        let eps = rollout(&mut agent, args.env, args.seeds, args.episodes)?;
        report.add(&p.name, eps);
    }
    if let Some(ex) = args.expert {
        let mut agent = ExpertAgent::new(ex.clone());
        report.add("expert", rollout(&mut agent, args.env, args.seeds, args.episodes)?);
    }
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let summary = serde_json::json!({
        "manifest_id": m.id,
        "seeds": report.seeds,
        "episodes_per_seed": report.episodes_per_seed,
        "delta": report.delta,
        "summaries": report.summaries,
    });
    let (rp, ep, tp) = (out_dir.join(REPORT_FILE), out_dir.join(EPISODES_FILE), out_dir.join(TABLE_FILE));
    write(&rp, &serde_json::to_string_pretty(&summary).expect("report serializes"))?;
    write(&ep, &serde_json::to_string(&report.episodes).expect("episodes serialize"))?;
    write(&tp, &report.render())?;
    let m = finish(m, &[("report", &rp), ("episodes", &ep), ("table", &tp)], out_dir)?;
    Ok((m, report))
}

pub fn calibrate_stage(
    ensemble_dir: &Path,
    dataset: &Path,
    heldout_only: bool,
    out_dir: &Path,
    force: bool,
) -> Result<(RunManifest, CalibrationReport), StageError> {
    require(&ensemble_dir.join("ensemble.json"))?;
    require(dataset)?;
    guard(out_dir, force)?;
    let ens = ReturnEnsemble::load(ensemble_dir)?;
    let mut trajs = load_dataset(dataset)?;
    if heldout_only {
        if ens.heldout.iter().any(|&i| i >= trajs.len()) {
            return Err(StageError::Failed(
                "held-out indices do not fit this dataset; was the ensemble trained on it?".into(),
            ));
        }
        trajs = ens.heldout.iter().map(|&i| trajs[i].clone()).collect();
    }
    let m = RunManifest::new(
        "calibrate",
        &format!("heldout_only = {heldout_only}\n"),
        vec![artifact("ensemble", ensemble_dir)?, artifact("dataset", dataset)?],
        vec![],
    );
    let rep = calibrate(&ens, &trajs)?;
    let summary = serde_json::json!({
        "manifest_id": m.id,
        "ensemble": rep.ensemble,
        "members": rep.members,
    });
    let (sp, rp) = (out_dir.join("calibration.json"), out_dir.join("calibration.tsv"));
    write(&sp, &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    write(&rp, &rep.records_tsv())?;
    let m = finish(m, &[("summary", &sp), ("records", &rp)], out_dir)?;
    Ok((m, rep))
}

// ---------------------------------------------------------------------------
// Whole pipeline

/// Config files of a pipeline run, all optional (defaults apply).
#[derive(Clone, Debug, Default)]
pub struct PipelineConfigs {
    pub run: KvConfig,
    pub scenario: KvConfig,
    pub return_model: KvConfig,
    pub policy: KvConfig,
    pub planner: KvConfig,
}

impl PipelineConfigs {
    pub const FILES: [&'static str; 5] = ["run.cfg", "scenario.cfg", "return.cfg", "policy.cfg", "planner.cfg"];

    pub fn load_dir(dir: &Path) -> Result<Self, StageError> {
        require(dir)?;
        let get = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(KvConfig::load(&p)?)
            } else {
                Ok::<_, StageError>(KvConfig::default())
            }
        };
        Ok(Self {
            run: get("run.cfg")?,
            scenario: get("scenario.cfg")?,
            return_model: get("return.cfg")?,
            policy: get("policy.cfg")?,
            planner: get("planner.cfg")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutputs {
    pub dataset: PathBuf,
    pub ensemble: PathBuf,
    pub segmented: PathBuf,
    pub policies: Vec<PathBuf>,
    pub index: PathBuf,
    pub eval: PathBuf,
    pub manifests: Vec<RunManifest>,
    pub report: EvalReport,
    pub segment: SegmentOutcome,
}

impl PipelineOutputs {
    /// Output artifact hashes of every stage, in stage order.
    pub fn artifact_hashes(&self) -> Vec<ArtifactRef> {
        self.manifests
            .iter()
            .flat_map(|m| {
                m.outputs.iter().map(move |a| ArtifactRef {
                    name: format!("{}/{}", m.command, a.name),
                    sha256: a.sha256.clone(),
                })
            })
            .collect()
    }
}

pub fn run_pipeline(configs: &PipelineConfigs, work: &Path, force: bool) -> Result<PipelineOutputs, StageError> {
    let mut run_kv = configs.run.clone();
    let run = RunConfig::from_kv(&mut run_kv)?;
    run_kv.finish()?;
    let (env, expert) = crate::env::parse_scenario(&configs.scenario.render())?;
    let mut rkv = configs.return_model.clone();
    let rcfg = ReturnTrainConfig::from_kv(&mut rkv)?;
    rkv.finish()?;
    let mut pkv = configs.policy.clone();
    let pcfg = PolicyTrainConfig::from_kv(&mut pkv)?;
    pkv.finish()?;
    let mut plkv = configs.planner.clone();
    let planner = PlannerConfig::from_kv(&mut plkv)?;
    plkv.finish()?;

    fs::create_dir_all(work).map_err(|e| io(work, e))?;
    let dataset = work.join("dataset.ndjson");
    let ensemble = work.join("ensemble");
    let segmented = work.join("segmented.ndjson");
    let index = work.join("kdtree.json");
    let eval = work.join("eval");
    let mut manifests = vec![collect_stage(&env, &expert, run.dataset_steps, run.collection_seed, &dataset, force)?];
    manifests.push(train_return_stage(&dataset, &rcfg, &ensemble, force)?);
    let seg = segment_stage(&dataset, &ensemble, pcfg.epsilon, pcfg.min_uncertain_len, &segmented, force)?;
    manifests.push(seg.manifest.clone());
    let mut policies = vec![];
    for kind in [PolicyKind::Unrest, PolicyKind::Dt, PolicyKind::Bc] {
        let dir = work.join(format!("policy_{kind}"));
        manifests.push(train_policy_stage(&segmented, &pcfg, kind, &dir, force)?);
        policies.push(dir);
    }
    manifests.push(build_kdtree_stage(&segmented, planner.neighbors, planner.epsilon, &index, force)?);
    let args = EvaluateArgs {
        policies: &policies,
        index: Some(&index),
        planner: &planner,
        env: &env,
        expert: Some(&expert),
        seeds: &run.eval_seeds,
        episodes: run.eval_episodes,
    };
    let (m, report) = evaluate_stage(&args, &eval, force)?;
    manifests.push(m);
    Ok(PipelineOutputs {
        dataset,
        ensemble,
        segmented,
        policies,
        index,
        eval,
        manifests,
        report,
        segment: seg,
    })
}
