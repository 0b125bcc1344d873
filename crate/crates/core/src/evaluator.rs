//! Closed-loop evaluation, return-model calibration and the tabular
//! near-determinism check.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvAction, EnvConfig, EnvError, EnvState, Expert, ExpertConfig, HighwayEnv, Infraction, Privileged};
use crate::planner::{PlannerConfig, PlannerError, PlannerModels, PlannerState, StepTrace};
use crate::return_model::{ReturnDistribution, ReturnEnsemble, ReturnModelError};
use crate::trajlog::{discounted_returns, TrajError, Trajectory};

pub const COLLISION_PENALTY: f64 = 0.65;
pub const RED_LIGHT_PENALTY: f64 = 0.7;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Model(#[from] ReturnModelError),
    #[error(transparent)]
    Traj(#[from] TrajError),
}

/// What an agent sees at each step. `prev_reward` is 0 on the first step.
pub struct Observation<'a> {
    pub state: &'a EnvState,
    pub prev_reward: f64,
    pub privileged: &'a Privileged,
}

pub trait Agent {
    fn name(&self) -> String;
    fn reset(&mut self, seed: u64);
    fn act(&mut self, obs: &Observation<'_>) -> Result<EnvAction, EvalError>;
    /// Planner bookkeeping for the episode so far, if any.
    fn traces(&self) -> &[StepTrace] {
        &[]
    }
}

pub struct ExpertAgent(pub Expert);

impl ExpertAgent {
    pub fn new(config: ExpertConfig) -> Self {
        Self(Expert::new(config, 0))
    }
}

impl Agent for ExpertAgent {
    fn name(&self) -> String {
        "expert".into()
    }

    fn reset(&mut self, seed: u64) {
        self.0.reset(seed);
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<EnvAction, EvalError> {
        Ok(self.0.act(obs.state, obs.privileged))
    }
}

/// Uniform random normalized actions.
pub struct RandomAgent {
    rng: ChaCha8Rng,
    v_max: f64,
}

impl RandomAgent {
    pub fn new(v_max: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            v_max,
        }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> String {
        "random".into()
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(13);
    }

    fn act(&mut self, _obs: &Observation<'_>) -> Result<EnvAction, EvalError> {
        let a = [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)];
        Ok(EnvAction::from_normalized(a, self.v_max))
    }
}

/// A trained sequence policy driven by the planning loop.
pub struct PlannerAgent<'a> {
    pub models: PlannerModels<'a>,
    pub config: PlannerConfig,
    state: PlannerState,
    traces: Vec<StepTrace>,
}

impl<'a> PlannerAgent<'a> {
    pub fn new(models: PlannerModels<'a>, config: PlannerConfig) -> Result<Self, EvalError> {
        models.check()?;
        config.validate().map_err(PlannerError::from)?;
        let state = PlannerState::for_policy(config.clone(), models.policy);
        Ok(Self {
            models,
            config,
            state,
            traces: vec![],
        })
    }
}

impl Agent for PlannerAgent<'_> {
    fn name(&self) -> String {
        self.models.policy.kind().to_string()
    }

    fn reset(&mut self, _seed: u64) {
        self.state = PlannerState::for_policy(self.config.clone(), self.models.policy);
        self.traces.clear();
    }

    fn act(&mut self, obs: &Observation<'_>) -> Result<EnvAction, EvalError> {
        let (a, tr) = self.state.plan_step(obs.state, obs.prev_reward, &self.models)?;
        self.traces.push(tr);
        Ok(a)
    }

    fn traces(&self) -> &[StepTrace] {
        &self.traces
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub eval_seed: u64,
    pub env_seed: u64,
    pub total_return: f64,
    pub steps: usize,
    pub success: bool,
    pub route_completion: f64,
    pub collisions: usize,
    pub red_lights: usize,
    pub off_route: usize,
    pub normalized_reward: f64,
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub plan: Vec<StepTrace>,
}

impl EpisodeResult {
    pub fn infraction_score(&self) -> f64 {
        COLLISION_PENALTY.powi(self.collisions as i32) * RED_LIGHT_PENALTY.powi(self.red_lights as i32)
    }

    pub fn driving_score(&self) -> f64 {
        self.route_completion * self.infraction_score()
    }
}

/// Environment seed for episode `episode` of evaluation seed `seed`; kept
/// clear of the consecutive seeds used for data collection.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    (1u64 << 40) ^ (seed << 20) ^ episode as u64
}

pub fn run_episode(agent: &mut dyn Agent, env_config: &EnvConfig, eval_seed: u64, episode: usize) -> Result<EpisodeResult, EvalError> {
    let env_seed = episode_seed(eval_seed, episode);
    let mut env = HighwayEnv::new(EnvConfig {
        seed: env_seed,
        ..env_config.clone()
    });
    agent.reset(env_seed);
    let mut state = env.state();
    let mut prev_reward = 0.0;
    let mut rewards = Vec::new();
    let (mut collisions, mut red_lights, mut off_route) = (0, 0, 0);
    let (success, completion) = loop {
        let privileged = env.privileged();
        let action = agent.act(&Observation {
            state: &state,
            prev_reward,
            privileged: &privileged,
        })?;
        let out = env.step(action)?;
        match out.infraction {
            Some(Infraction::Collision) => collisions += 1,
            Some(Infraction::RedLight) => red_lights += 1,
            Some(Infraction::OffRoute) => off_route += 1,
            None => {}
        }
        rewards.push(out.reward);
        prev_reward = out.reward;
        state = out.state;
        if out.done {
            break (out.success, out.route_completion);
        }
    };
    let total: f64 = rewards.iter().sum();
    Ok(EpisodeResult {
        eval_seed,
        env_seed,
        total_return: total,
        steps: rewards.len(),
        success,
        route_completion: completion,
        collisions,
        red_lights,
        off_route,
        normalized_reward: total / rewards.len() as f64,
        rewards,
        plan: agent.traces().to_vec(),
    })
}

pub fn rollout(agent: &mut dyn Agent, env_config: &EnvConfig, seeds: &[u64], episodes: usize) -> Result<Vec<EpisodeResult>, EvalError> {
    let mut out = Vec::with_capacity(seeds.len() * episodes);
    for &seed in seeds {
        for ep in 0..episodes {
            out.push(run_episode(agent, env_config, seed, ep)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success_rate: f64,
    pub route_completion: f64,
    pub infraction_score: f64,
    pub normalized_reward: f64,
    pub driving_score: f64,
}

impl Metrics {
    pub fn of(episodes: &[&EpisodeResult]) -> Self {
        let n = episodes.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeResult) -> f64| episodes.iter().map(|e| f(e)).sum::<f64>() / n;
        Self {
            success_rate: mean(&|e| f64::from(u8::from(e.success))),
            route_completion: mean(&|e| e.route_completion),
            infraction_score: mean(&|e| e.infraction_score()),
            normalized_reward: mean(&|e| e.normalized_reward),
            driving_score: mean(&|e| e.driving_score()),
        }
    }

    fn values(&self) -> [f64; 5] {
        [
            self.success_rate,
            self.route_completion,
            self.infraction_score,
            self.normalized_reward,
            self.driving_score,
        ]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self {
            success_rate: v[0],
            route_completion: v[1],
            infraction_score: v[2],
            normalized_reward: v[3],
            driving_score: v[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub per_seed: Vec<(u64, Metrics)>,
    pub mean: Metrics,
    /// Population standard deviation over seeds.
    pub std: Metrics,
}

impl PolicySummary {
    pub fn from_episodes(policy: &str, episodes: &[EpisodeResult]) -> Self {
        let mut by_seed: BTreeMap<u64, Vec<&EpisodeResult>> = BTreeMap::new();
        for e in episodes {
            by_seed.entry(e.eval_seed).or_default().push(e);
        }
        let per_seed: Vec<(u64, Metrics)> = by_seed.into_iter().map(|(s, es)| (s, Metrics::of(&es))).collect();
        let n = per_seed.len().max(1) as f64;
        let mut mean = [0.0; 5];
        for (_, m) in &per_seed {
            for (a, v) in mean.iter_mut().zip(m.values()) {
                *a += v / n;
            }
        }
        let mut var = [0.0; 5];
        for (_, m) in &per_seed {
            for ((a, v), mu) in var.iter_mut().zip(m.values()).zip(mean) {
                *a += (v - mu) * (v - mu) / n;
            }
        }
        Self {
            policy: policy.to_string(),
            per_seed,
            mean: Metrics::from_values(mean),
            std: Metrics::from_values(var.map(f64::sqrt)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    pub delta: f64,
    pub summaries: Vec<PolicySummary>,
    pub episodes: BTreeMap<String, Vec<EpisodeResult>>,
}

impl EvalReport {
    pub fn new(seeds: &[u64], episodes_per_seed: usize, delta: f64) -> Self {
        Self {
            seeds: seeds.to_vec(),
            episodes_per_seed,
            delta,
            summaries: vec![],
            episodes: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, policy: &str, episodes: Vec<EpisodeResult>) {
        self.summaries.push(PolicySummary::from_episodes(policy, &episodes));
        self.episodes.insert(policy.to_string(), episodes);
    }

    pub fn summary(&self, policy: &str) -> Option<&PolicySummary> {
        self.summaries.iter().find(|s| s.policy == policy)
    }

    /// Summaries rebuilt from the stored episodes.
    pub fn recomputed(&self) -> Vec<PolicySummary> {
        self.summaries
            .iter()
            .map(|s| PolicySummary::from_episodes(&s.policy, &self.episodes[&s.policy]))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "delta {} | seeds {:?} x {} episodes",
            self.delta, self.seeds, self.episodes_per_seed
        );
        let _ = writeln!(
            s,
            "{:<8} {:>15} {:>15} {:>15} {:>15} {:>15}",
            "policy", "driving score", "success", "completion", "infraction", "norm. reward"
        );
        for p in &self.summaries {
            let (m, d) = (p.mean.values(), p.std.values());
            let cell = |i: usize| format!("{:.3}±{:.3}", m[i], d[i]);
            let _ = writeln!(
                s,
                "{:<8} {:>15} {:>15} {:>15} {:>15} {:>15}",
                p.policy,
                cell(4),
                cell(0),
                cell(1),
                cell(2),
                cell(3)
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub nll: f64,
    pub rmse: f64,
    /// Fraction of realized returns within one predicted standard deviation.
    pub coverage: f64,
    pub count: usize,
}

pub fn calibration_summary(pred: &[ReturnDistribution], realized: &[f64]) -> CalibrationSummary {
    let n = pred.len().min(realized.len());
    let (mut nll, mut se, mut hit) = (0.0, 0.0, 0usize);
    for (p, &y) in pred.iter().zip(realized) {
        nll += p.nll(y);
        se += (p.mu - y) * (p.mu - y);
        if (y - p.mu).abs() <= p.std() {
            hit += 1;
        }
    }
    let d = n.max(1) as f64;
    CalibrationSummary {
        nll: nll / d,
        rmse: (se / d).sqrt(),
        coverage: hit as f64 / d,
        count: n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub traj: usize,
    pub t: usize,
    pub realized: f64,
    pub mu: f64,
    pub std: f64,
    pub member_mu: Vec<f64>,
    pub member_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ensemble: CalibrationSummary,
    pub members: Vec<CalibrationSummary>,
    pub records: Vec<CalibrationRecord>,
}

impl CalibrationReport {
    pub fn best_member_nll(&self) -> f64 {
        self.members.iter().map(|m| m.nll).fold(f64::INFINITY, f64::min)
    }

    /// Columnar text suitable for band plots.
    pub fn records_tsv(&self) -> String {
        let mut s = String::from("traj\tt\trealized\tmu\tstd\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.traj, r.t, r.realized, r.mu, r.std);
        }
        s
    }
}

/// State-head predictions against realized discounted returns.
pub fn calibrate(ensemble: &ReturnEnsemble, heldout: &[Trajectory]) -> Result<CalibrationReport, EvalError> {
    let k = ensemble.members.len();
    let mut ens_pred = Vec::new();
    let mut member_pred = vec![Vec::new(); k];
    let mut realized = Vec::new();
    let mut records = Vec::new();
    for (i, traj) in heldout.iter().enumerate() {
        let r = discounted_returns(&traj.rewards(), ensemble.config.gamma)?;
        let p = ensemble.predict(traj)?;
        for t in 0..traj.len() {
            ens_pred.push(p.state[t]);
            for (m, mp) in p.members.iter().enumerate() {
                member_pred[m].push(mp.state[t]);
            }
            realized.push(r[t]);
            records.push(CalibrationRecord {
                traj: i,
                t,
                realized: r[t],
                mu: p.state[t].mu,
                std: p.state[t].std(),
                member_mu: p.members.iter().map(|m| m.state[t].mu).collect(),
                member_std: p.members.iter().map(|m| m.state[t].std()).collect(),
            });
        }
    }
    Ok(CalibrationReport {
        ensemble: calibration_summary(&ens_pred, &realized),
        members: member_pred.iter().map(|p| calibration_summary(p, &realized)).collect(),
        records,
    })
}

// ---------------------------------------------------------------------------
// Tabular near-determinism check

/// Small finite MDP with rewards in quarter units. With probability `delta`
/// a transition lands on a uniformly random state instead of the nominal one.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub delta: f64,
    pub next: Vec<Vec<usize>>,
    /// Reward in quarters, `0..=4`.
    pub reward: Vec<Vec<u32>>,
}

impl TabularMdp {
    pub fn random(states: usize, actions: usize, horizon: usize, delta: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next = (0..states)
            .map(|_| (0..actions).map(|_| rng.random_range(0..states)).collect())
            .collect();
        let reward = (0..states)
            .map(|_| (0..actions).map(|_| rng.random_range(0..=4)).collect())
            .collect();
        Self {
            states,
            actions,
            horizon,
            delta,
            next,
            reward,
        }
    }

    pub fn return_scale(&self) -> f64 {
        self.horizon as f64
    }

    fn step(&self, s: usize, a: usize, rng: &mut ChaCha8Rng) -> (usize, u32) {
        let r = self.reward[s][a];
        let n = if self.delta > 0.0 && rng.random::<f64>() < self.delta {
            rng.random_range(0..self.states)
        } else {
            self.next[s][a]
        };
        (n, r)
    }

    /// Returns (in quarters) achievable from `s` with `steps` remaining under
    /// the nominal dynamics, by dynamic programming.
    pub fn reachable_returns(&self) -> Vec<Vec<Vec<u32>>> {
        let mut table = vec![vec![vec![0u32]; self.states]];
        for _ in 0..self.horizon {
            let prev = table.last().expect("non-empty");
            let mut cur = Vec::with_capacity(self.states);
            for s in 0..self.states {
                let mut set: Vec<u32> = (0..self.actions)
                    .flat_map(|a| prev[self.next[s][a]].iter().map(move |g| g + self.reward[s][a]))
                    .collect();
                set.sort_unstable();
                set.dedup();
                cur.push(set);
            }
            table.push(cur);
        }
        table
    }
}

/// Count-based return-conditioned policy: the maximum-likelihood action for
/// `(t, s, remaining return)` in the data.
#[derive(Clone, Debug, Default)]
pub struct TabularPolicy {
    counts: BTreeMap<(usize, usize, u32), Vec<usize>>,
}

impl TabularPolicy {
    pub fn fit(mdp: &TabularMdp, episodes: &[Vec<(usize, usize, u32)>]) -> Self {
        let mut counts: BTreeMap<(usize, usize, u32), Vec<usize>> = BTreeMap::new();
        for ep in episodes {
            let mut g: u32 = ep.iter().map(|x| x.2).sum();
            for (t, &(s, a, r)) in ep.iter().enumerate() {
                counts.entry((t, s, g)).or_insert_with(|| vec![0; mdp.actions])[a] += 1;
                g -= r;
            }
        }
        Self { counts }
    }

    /// Most frequent action (lowest index on ties); unseen targets fall back
    /// to the closest conditioned target seen at `(t, s)`.
    pub fn act(&self, t: usize, s: usize, target: i64) -> Option<usize> {
        let pick = |c: &Vec<usize>| (0..c.len()).max_by(|&a, &b| c[a].cmp(&c[b]).then(b.cmp(&a)));
        if target >= 0 {
            if let Some(c) = self.counts.get(&(t, s, target as u32)) {
                return pick(c);
            }
        }
        self.counts
            .range((t, s, 0)..=(t, s, u32::MAX))
            .min_by_key(|((_, _, g), _)| (i64::from(*g) - target).abs())
            .and_then(|(_, c)| pick(c))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub delta: f64,
    pub return_scale: f64,
    pub targets: Vec<f64>,
    /// Mean realized return per target.
    pub achieved: Vec<f64>,
    pub max_gap: f64,
    pub dp_optimum: f64,
}

/// Exhaustive data (every open-loop action sequence, `repeats` times), a
/// count policy, and closed-loop rollouts for every target in `targets`
/// (quarters). `None` uses every return reachable from the start state.
pub fn theorem_check(mdp: &TabularMdp, repeats: usize, rollouts: usize, targets: Option<&[u32]>, seed: u64) -> TheoremReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = mdp.actions.pow(mdp.horizon as u32);
    let mut data = Vec::with_capacity(total * repeats);
    for _ in 0..repeats {
        for code in 0..total {
            let mut c = code;
            let mut s = 0;
            let mut ep = Vec::with_capacity(mdp.horizon);
            for _ in 0..mdp.horizon {
                let a = c % mdp.actions;
                c /= mdp.actions;
                let (n, r) = mdp.step(s, a, &mut rng);
                ep.push((s, a, r));
                s = n;
            }
            data.push(ep);
        }
    }
    let policy = TabularPolicy::fit(mdp, &data);
    let reach = mdp.reachable_returns();
    let start = &reach[mdp.horizon][0];
    let targets: Vec<u32> = targets.map_or_else(|| start.clone(), <[u32]>::to_vec);
    let mut achieved = Vec::with_capacity(targets.len());
    let mut max_gap: f64 = 0.0;
    for &target in &targets {
        let mut sum = 0.0;
        for _ in 0..rollouts {
            let (mut s, mut g) = (0, i64::from(target));
            let mut ret = 0u32;
            for t in 0..mdp.horizon {
                let a = policy.act(t, s, g).unwrap_or(0);
                let (n, r) = mdp.step(s, a, &mut rng);
                ret += r;
                g -= i64::from(r);
                s = n;
            }
            sum += f64::from(ret) / 4.0;
        }
        let mean = sum / rollouts as f64;
        max_gap = max_gap.max((mean - f64::from(target) / 4.0).abs());
        achieved.push(mean);
    }
    TheoremReport {
        delta: mdp.delta,
        return_scale: mdp.return_scale(),
        targets: targets.iter().map(|&t| f64::from(t) / 4.0).collect(),
        achieved,
        max_gap,
        dp_optimum: f64::from(*start.last().expect("reachable set is non-empty")) / 4.0,
    }
}
