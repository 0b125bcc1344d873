//! Trajectory datasets: step records, return annotation, window sampling and
//! two on-disk encodings.
//!
//! Text files are newline-delimited JSON:
//!
//! ```text
//! {"schema":"unrest-traj/1","env_version":"highway-toy/1","episodes":N}
//! {"episode":{"seed":..,"env_version":..,"expert_version":..,"success":..,"route_completion":..,"len":T}}
//! {"s":[12 floats],"a":[2 floats],"r":..,"terms":[5 floats],"infraction":null,"reveal":false}   (T lines)
//! ...
//! {"end":N}
//! ```
//!
//! State columns follow [`EnvState::to_vector`], action columns are
//! `[target_speed m/s, target_steer]`, reward terms are
//! `[speed, position, rotation, action, terminal]`. Segmented datasets use
//! schema `unrest-seg/1` and add a `seg` object per step with
//! `u, flag, h, rh, ret` (uncertainty, flag, span, truncated return, global
//! return). The packed binary encoding carries the same fields.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    EnvConfig, EnvError, EnvState, Expert, ExpertConfig, HighwayEnv, Infraction, RewardTerms, ACTION_DIM,
    ENV_VERSION, EXPERT_VERSION, STATE_DIM,
};

pub const TRAJ_SCHEMA: &str = "unrest-traj/1";
pub const SEG_SCHEMA: &str = "unrest-seg/1";
const BIN_MAGIC: &[u8; 4] = b"UNRB";
const BIN_END: &[u8; 4] = b"UEND";

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{what} version mismatch: expected {expected}, found {found}")]
    Version {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("empty trajectory")]
    Empty,
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("discount must lie in (0, 1], got {0}")]
    BadGamma(f64),
    #[error(transparent)]
    Env(#[from] EnvError),
}

fn io_err(path: &Path, e: impl ToString) -> TrajError {
    TrajError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(rename = "s")]
    pub state: [f64; STATE_DIM],
    #[serde(rename = "a")]
    pub action: [f64; ACTION_DIM],
    #[serde(rename = "r")]
    pub reward: f64,
    pub terms: [f64; 5],
    pub infraction: Option<Infraction>,
    /// `state` exposes a latent that was hidden in the previous state.
    #[serde(default)]
    pub reveal: bool,
}

impl StepRecord {
    pub fn env_state(&self) -> EnvState {
        EnvState::from_vector(&self.state)
    }

    pub fn reward_terms(&self) -> RewardTerms {
        let [speed, position, rotation, action, terminal] = self.terms;
        RewardTerms {
            speed,
            position,
            rotation,
            action,
            terminal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub env_version: String,
    pub expert_version: String,
    pub success: bool,
    pub route_completion: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn validate(&self, horizon: Option<usize>) -> Result<(), TrajError> {
        if self.steps.is_empty() {
            return Err(TrajError::Empty);
        }
        if let Some(h) = horizon {
            if self.steps.len() > h {
                return Err(TrajError::Invalid(format!("length {} exceeds horizon {h}", self.steps.len())));
            }
        }
        for (t, s) in self.steps.iter().enumerate() {
            let finite = s.reward.is_finite()
                && s.state.iter().all(|v| v.is_finite())
                && s.action.iter().all(|v| v.is_finite())
                && s.terms.iter().all(|v| v.is_finite());
            if !finite {
                return Err(TrajError::Invalid(format!("non-finite value at step {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReturnAnnotatedTrajectory {
    pub trajectory: Trajectory,
    pub gamma: f64,
    pub returns: Vec<f64>,
}

/// Backward recursion `R_t = r_t + gamma * R_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>, TrajError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TrajError::BadGamma(gamma));
    }
    if rewards.is_empty() {
        return Err(TrajError::Empty);
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

pub fn compute_returns(traj: &Trajectory, gamma: f64) -> Result<ReturnAnnotatedTrajectory, TrajError> {
    let returns = discounted_returns(&traj.rewards(), gamma)?;
    Ok(ReturnAnnotatedTrajectory {
        trajectory: traj.clone(),
        gamma,
        returns,
    })
}

/// Per-step columns appended by segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegColumns {
    pub u: f64,
    pub flag: bool,
    pub h: usize,
    pub rh: f64,
    pub ret: f64,
}

/// Rolls out the (noisy) expert for `episodes` episodes; episode `i` uses
/// seed `base_seed + i` for both the environment and the expert noise.
pub fn collect_expert(
    env_config: &EnvConfig,
    expert_config: &ExpertConfig,
    episodes: usize,
    base_seed: u64,
) -> Result<Vec<Trajectory>, TrajError> {
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let seed = base_seed.wrapping_add(i as u64);
        let mut env = HighwayEnv::new(EnvConfig {
            seed,
            ..env_config.clone()
        });
        let mut expert = Expert::new(expert_config.clone(), seed);
        let mut state = env.state();
        let mut steps = Vec::new();
        let mut revealed = false;
        let (success, completion) = loop {
            let action = expert.act(&state, &env.privileged());
            let out = env.step(action)?;
            let t = out.reward_terms;
            steps.push(StepRecord {
                state: state.to_vector(),
                action: action.to_array(),
                reward: out.reward,
                terms: [t.speed, t.position, t.rotation, t.action, t.terminal],
                infraction: out.infraction,
                reveal: revealed,
            });
            revealed = out.reveal;
            state = out.state;
            if out.done {
                break (out.success, out.route_completion);
            }
        };
        out.push(Trajectory {
            meta: TrajectoryMeta {
                seed,
                env_version: ENV_VERSION.to_string(),
                expert_version: EXPERT_VERSION.to_string(),
                success,
                route_completion: completion,
            },
            steps,
        });
    }
    Ok(out)
}

pub fn total_steps(trajs: &[Trajectory]) -> usize {
    trajs.iter().map(Trajectory::len).sum()
}

// ---------------------------------------------------------------------------
// Window sampling

/// A contiguous window of `len` steps starting at `start`, left-padded with
/// `pad` slots when the episode is shorter than the requested length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
    pub pad: usize,
}

impl Window {
    /// `true` on real steps, `false` on padding slots.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.pad];
        m.resize(self.pad + self.len, true);
        m
    }

    /// Step index for each slot (`None` on padding).
    pub fn slots(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        (0..self.pad).map(|_| None).chain((self.start..self.start + self.len).map(Some))
    }
}

/// Number of valid window starts in an episode of length `n`.
fn starts_in(n: usize, length: usize) -> usize {
    n.saturating_sub(length) + 1
}

/// Uniform sampler over all `(trajectory, start)` pairs with
/// `start ∈ [0, max(T − L, 0)]`.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    length: usize,
    cumulative: Vec<usize>,
    lengths: Vec<usize>,
}

impl WindowSampler {
    pub fn new(lengths: &[usize], length: usize) -> Result<Self, TrajError> {
        if length == 0 {
            return Err(TrajError::Invalid("window length must be at least 1".into()));
        }
        if lengths.is_empty() || lengths.iter().any(|&n| n == 0) {
            return Err(TrajError::Empty);
        }
        let mut cumulative = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &n in lengths {
            acc += starts_in(n, length);
            cumulative.push(acc);
        }
        Ok(Self {
            length,
            cumulative,
            lengths: lengths.to_vec(),
        })
    }

    pub fn for_dataset(trajs: &[Trajectory], length: usize) -> Result<Self, TrajError> {
        Self::new(&trajs.iter().map(Trajectory::len).collect::<Vec<_>>(), length)
    }

    pub fn total_starts(&self) -> usize {
        *self.cumulative.last().expect("non-empty")
    }

    /// Maps a flat start index to its window.
    pub fn window(&self, flat: usize) -> Window {
        let traj = self.cumulative.partition_point(|&c| c <= flat);
        let before = if traj == 0 { 0 } else { self.cumulative[traj - 1] };
        let n = self.lengths[traj];
        let len = n.min(self.length);
        Window {
            traj,
            start: flat - before,
            len,
            pad: self.length - len,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Window {
        self.window(rng.random_range(0..self.total_starts()))
    }

    pub fn sample_batch<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<Window> {
        (0..batch).map(|_| self.sample(rng)).collect()
    }
}

pub fn sample_window<R: Rng>(trajs: &[Trajectory], length: usize, rng: &mut R) -> Result<Window, TrajError> {
    Ok(WindowSampler::for_dataset(trajs, length)?.sample(rng))
}

// ---------------------------------------------------------------------------
// NDJSON

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    env_version: String,
    episodes: usize,
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    episode: EpisodeHead,
}

#[derive(Serialize, Deserialize)]
struct EpisodeHead {
    #[serde(flatten)]
    meta: TrajectoryMeta,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    #[serde(flatten)]
    step: StepRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seg: Option<SegColumns>,
}

#[derive(Serialize, Deserialize)]
struct EndLine {
    end: usize,
}

fn write_line<W: Write, T: Serialize>(w: &mut W, v: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, v).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}

fn write_ndjson<W: Write>(
    mut w: W,
    schema: &str,
    trajs: &[Trajectory],
    seg: Option<&[Vec<SegColumns>]>,
) -> std::io::Result<()> {
    let env_version = trajs.first().map_or(ENV_VERSION, |t| t.meta.env_version.as_str());
    write_line(
        &mut w,
        &Header {
            schema: schema.to_string(),
            env_version: env_version.to_string(),
            episodes: trajs.len(),
        },
    )?;
    for (i, t) in trajs.iter().enumerate() {
        write_line(
            &mut w,
            &EpisodeLine {
                episode: EpisodeHead {
                    meta: t.meta.clone(),
                    len: t.steps.len(),
                },
            },
        )?;
        for (k, s) in t.steps.iter().enumerate() {
            write_line(
                &mut w,
                &StepLine {
                    step: s.clone(),
                    seg: seg.map(|c| c[i][k]),
                },
            )?;
        }
    }
    write_line(&mut w, &EndLine { end: trajs.len() })?;
    w.flush()
}

type Parsed = (Vec<Trajectory>, Option<Vec<Vec<SegColumns>>>);

fn read_ndjson<B: BufRead>(reader: B, schema: &str) -> Result<Parsed, TrajError> {
    let mut lines = reader.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), TrajError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(TrajError::Parse {
                line: i + 1,
                reason: e.to_string(),
            }),
            None => Err(TrajError::Truncated(format!("file ended while expecting {what}"))),
        }
    };
    let parse = |line: usize, text: &str, what: &str| -> Result<serde_json::Value, TrajError> {
        serde_json::from_str(text).map_err(|e| TrajError::Parse {
            line,
            reason: format!("{what}: {e}"),
        })
    };

    let (n, text) = next("header")?;
    let raw = parse(n, &text, "header")?;
    let found = raw.get("schema").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != schema {
        return Err(TrajError::Version {
            what: "schema",
            expected: schema.to_string(),
            found: found.to_string(),
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| TrajError::Parse {
        line: n,
        reason: format!("header: {e}"),
    })?;
    if header.env_version != ENV_VERSION {
        return Err(TrajError::Version {
            what: "environment",
            expected: ENV_VERSION.to_string(),
            found: header.env_version,
        });
    }

    let segmented = schema == SEG_SCHEMA;
    let mut trajs = Vec::with_capacity(header.episodes.min(1 << 16));
    let mut cols = Vec::new();
    for _ in 0..header.episodes {
        let (n, text) = next("episode header")?;
        let head: EpisodeLine = serde_json::from_str(&text).map_err(|e| TrajError::Parse {
            line: n,
            reason: format!("episode header: {e}"),
        })?;
        let len = head.episode.len;
        let mut steps = Vec::with_capacity(len.min(1 << 16));
        let mut seg = Vec::new();
        for _ in 0..len {
            let (n, text) = next("step record")?;
            let s: StepLine = serde_json::from_str(&text).map_err(|e| TrajError::Parse {
                line: n,
                reason: format!("step: {e}"),
            })?;
            if segmented {
                seg.push(s.seg.ok_or(TrajError::Parse {
                    line: n,
                    reason: "segmented step lacks `seg` columns".into(),
                })?);
            }
            steps.push(s.step);
        }
        let traj = Trajectory {
            meta: head.episode.meta,
            steps,
        };
        traj.validate(None)?;
        trajs.push(traj);
        cols.push(seg);
    }
    let (n, text) = next("end marker")?;
    let end: EndLine = serde_json::from_str(&text).map_err(|e| TrajError::Parse {
        line: n,
        reason: format!("end marker: {e}"),
    })?;
    if end.end != header.episodes {
        return Err(TrajError::Truncated(format!(
            "end marker counts {} episodes, header {}",
            end.end, header.episodes
        )));
    }
    Ok((trajs, segmented.then_some(cols)))
}

pub fn encode_ndjson(trajs: &[Trajectory]) -> String {
    let mut buf = Vec::new();
    write_ndjson(&mut buf, TRAJ_SCHEMA, trajs, None).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn decode_ndjson(text: &str) -> Result<Vec<Trajectory>, TrajError> {
    Ok(read_ndjson(text.as_bytes(), TRAJ_SCHEMA)?.0)
}

pub fn save_ndjson(path: &Path, trajs: &[Trajectory]) -> Result<(), TrajError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    write_ndjson(BufWriter::new(f), TRAJ_SCHEMA, trajs, None).map_err(|e| io_err(path, e))
}

pub fn load_ndjson(path: &Path) -> Result<Vec<Trajectory>, TrajError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(read_ndjson(BufReader::new(f), TRAJ_SCHEMA)?.0)
}

pub fn encode_segmented(trajs: &[Trajectory], cols: &[Vec<SegColumns>]) -> Result<String, TrajError> {
    check_columns(trajs, cols)?;
    let mut buf = Vec::new();
    write_ndjson(&mut buf, SEG_SCHEMA, trajs, Some(cols)).expect("writing to memory");
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

pub fn decode_segmented(text: &str) -> Result<(Vec<Trajectory>, Vec<Vec<SegColumns>>), TrajError> {
    let (t, c) = read_ndjson(text.as_bytes(), SEG_SCHEMA)?;
    Ok((t, c.unwrap_or_default()))
}

pub fn save_segmented(path: &Path, trajs: &[Trajectory], cols: &[Vec<SegColumns>]) -> Result<(), TrajError> {
    check_columns(trajs, cols)?;
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    write_ndjson(BufWriter::new(f), SEG_SCHEMA, trajs, Some(cols)).map_err(|e| io_err(path, e))
}

pub fn load_segmented(path: &Path) -> Result<(Vec<Trajectory>, Vec<Vec<SegColumns>>), TrajError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let (t, c) = read_ndjson(BufReader::new(f), SEG_SCHEMA)?;
    Ok((t, c.unwrap_or_default()))
}

fn check_columns(trajs: &[Trajectory], cols: &[Vec<SegColumns>]) -> Result<(), TrajError> {
    if trajs.len() != cols.len() || trajs.iter().zip(cols).any(|(t, c)| t.len() != c.len()) {
        return Err(TrajError::Invalid("segment columns do not align with trajectories".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Packed binary (little-endian)

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn infraction_code(i: Option<Infraction>) -> u8 {
    match i {
        None => 0,
        Some(Infraction::Collision) => 1,
        Some(Infraction::RedLight) => 2,
        Some(Infraction::OffRoute) => 3,
    }
}

pub fn encode_binary(trajs: &[Trajectory]) -> Vec<u8> {
    let steps = total_steps(trajs);
    let mut out = Vec::with_capacity(64 + steps * (20 * 8 + 2));
    out.extend_from_slice(BIN_MAGIC);
    put_str(&mut out, TRAJ_SCHEMA);
    put_str(&mut out, ENV_VERSION);
    out.extend_from_slice(&(trajs.len() as u64).to_le_bytes());
    for t in trajs {
        out.extend_from_slice(&t.meta.seed.to_le_bytes());
        put_str(&mut out, &t.meta.env_version);
        put_str(&mut out, &t.meta.expert_version);
        out.push(t.meta.success as u8);
        out.extend_from_slice(&t.meta.route_completion.to_le_bytes());
        out.extend_from_slice(&(t.steps.len() as u64).to_le_bytes());
        for s in &t.steps {
            for v in s.state.iter().chain(&s.action).chain([&s.reward]).chain(&s.terms) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(infraction_code(s.infraction));
            out.push(s.reveal as u8);
        }
    }
    out.extend_from_slice(BIN_END);
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrajError> {
        if self.data.len() - self.pos < n {
            return Err(TrajError::Truncated(format!("needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrajError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, TrajError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, TrajError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, TrajError> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TrajError::Invalid(e.to_string()))
    }
}

pub fn decode_binary(data: &[u8]) -> Result<Vec<Trajectory>, TrajError> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(4)? != BIN_MAGIC {
        return Err(TrajError::Invalid("not a packed trajectory file".into()));
    }
    let schema = c.string()?;
    if schema != TRAJ_SCHEMA {
        return Err(TrajError::Version {
            what: "schema",
            expected: TRAJ_SCHEMA.into(),
            found: schema,
        });
    }
    let env_version = c.string()?;
    if env_version != ENV_VERSION {
        return Err(TrajError::Version {
            what: "environment",
            expected: ENV_VERSION.into(),
            found: env_version,
        });
    }
    let n = c.u64()? as usize;
    let mut trajs = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let seed = c.u64()?;
        let env_version = c.string()?;
        let expert_version = c.string()?;
        let success = c.u8()? != 0;
        let route_completion = c.f64()?;
        let len = c.u64()? as usize;
        let mut steps = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let mut state = [0.0; STATE_DIM];
            for v in &mut state {
                *v = c.f64()?;
            }
            let action = [c.f64()?, c.f64()?];
            let reward = c.f64()?;
            let mut terms = [0.0; 5];
            for v in &mut terms {
                *v = c.f64()?;
            }
            let infraction = match c.u8()? {
                0 => None,
                1 => Some(Infraction::Collision),
                2 => Some(Infraction::RedLight),
                3 => Some(Infraction::OffRoute),
                k => return Err(TrajError::Invalid(format!("unknown infraction code {k}"))),
            };
            let reveal = c.u8()? != 0;
            steps.push(StepRecord {
                state,
                action,
                reward,
                terms,
                infraction,
                reveal,
            });
        }
        let traj = Trajectory {
            meta: TrajectoryMeta {
                seed,
                env_version,
                expert_version,
                success,
                route_completion,
            },
            steps,
        };
        traj.validate(None)?;
        trajs.push(traj);
    }
    if c.take(4)? != BIN_END {
        return Err(TrajError::Invalid("bad end marker".into()));
    }
    if c.pos != data.len() {
        return Err(TrajError::Invalid("trailing bytes after end marker".into()));
    }
    Ok(trajs)
}

pub fn save_binary(path: &Path, trajs: &[Trajectory]) -> Result<(), TrajError> {
    std::fs::write(path, encode_binary(trajs)).map_err(|e| io_err(path, e))
}

pub fn load_binary(path: &Path) -> Result<Vec<Trajectory>, TrajError> {
    let mut data = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| io_err(path, e))?;
    decode_binary(&data)
}

/// Picks the decoder from the file extension (`.bin` packed, otherwise text).
pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>, TrajError> {
    if path.extension().is_some_and(|e| e == "bin") {
        load_binary(path)
    } else {
        load_ndjson(path)
    }
}

pub fn save_dataset(path: &Path, trajs: &[Trajectory]) -> Result<(), TrajError> {
    if path.extension().is_some_and(|e| e == "bin") {
        save_binary(path, trajs)
    } else {
        save_ndjson(path, trajs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy(rewards: &[f64]) -> Trajectory {
        Trajectory {
            meta: TrajectoryMeta {
                seed: 3,
                env_version: ENV_VERSION.into(),
                expert_version: EXPERT_VERSION.into(),
                success: false,
                route_completion: 0.25,
            },
            steps: rewards
                .iter()
                .enumerate()
                .map(|(t, &r)| StepRecord {
                    state: [t as f64 * 0.1 + 1.0 / 3.0; STATE_DIM],
                    action: [0.5, -0.25],
                    reward: r,
                    terms: [r, 0.0, 0.0, 0.0, 0.0],
                    infraction: (t == 1).then_some(Infraction::RedLight),
                    reveal: t == 0,
                })
                .collect(),
        }
    }

    #[test]
    fn undiscounted_and_halved_returns() {
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 1.0).unwrap(), vec![3.0, 2.0, 1.0]);
        assert_eq!(discounted_returns(&[1.0, 0.0, 2.0], 0.5).unwrap(), vec![1.5, 1.0, 2.0]);
    }

    #[test]
    fn returns_reject_bad_inputs() {
        assert!(matches!(discounted_returns(&[], 0.9), Err(TrajError::Empty)));
        assert!(matches!(discounted_returns(&[1.0], 0.0), Err(TrajError::BadGamma(_))));
        assert!(matches!(discounted_returns(&[1.0], 1.5), Err(TrajError::BadGamma(_))));
    }

    #[test]
    fn ndjson_round_trip_is_exact() {
        let trajs = vec![toy(&[0.1, -2.0 / 7.0, 1e-300]), toy(&[5.0])];
        let text = encode_ndjson(&trajs);
        assert_eq!(decode_ndjson(&text).unwrap(), trajs);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let trajs = vec![toy(&[0.1, -2.0 / 7.0, 1e-300]), toy(&[5.0])];
        assert_eq!(decode_binary(&encode_binary(&trajs)).unwrap(), trajs);
    }

    #[test]
    fn truncation_is_detected() {
        let trajs = vec![toy(&[1.0, 2.0, 3.0])];
        let text = encode_ndjson(&trajs);
        let cut: Vec<&str> = text.lines().collect();
        for keep in 1..cut.len() {
            let partial = cut[..keep].join("\n");
            assert!(decode_ndjson(&partial).is_err(), "accepted {keep} lines");
        }
        let bin = encode_binary(&trajs);
        for keep in 0..bin.len() {
            assert!(decode_binary(&bin[..keep]).is_err());
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let text = encode_ndjson(&[toy(&[1.0])]).replace(TRAJ_SCHEMA, "unrest-traj/0");
        let msg = decode_ndjson(&text).unwrap_err().to_string();
        assert!(msg.contains("unrest-traj/1") && msg.contains("unrest-traj/0"), "{msg}");
    }

    #[test]
    fn segmented_round_trip() {
        let trajs = vec![toy(&[1.0, 2.0])];
        let cols = vec![vec![
            SegColumns {
                u: 0.5,
                flag: false,
                h: 2,
                rh: 3.0,
                ret: 3.0,
            },
            SegColumns {
                u: 4.0,
                flag: true,
                h: 0,
                rh: 0.0,
                ret: 2.0,
            },
        ]];
        let text = encode_segmented(&trajs, &cols).unwrap();
        assert_eq!(decode_segmented(&text).unwrap(), (trajs.clone(), cols));
        // A plain trajectory file is not a segmented one.
        assert!(matches!(
            decode_segmented(&encode_ndjson(&trajs)),
            Err(TrajError::Version { .. })
        ));
    }

    #[test]
    fn single_step_windows_are_unpadded() {
        let trajs = vec![toy(&[1.0; 4]), toy(&[1.0; 2])];
        let sampler = WindowSampler::for_dataset(&trajs, 1).unwrap();
        assert_eq!(sampler.total_starts(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let w = sampler.sample(&mut rng);
            assert_eq!(w.mask(), vec![true]);
        }
    }

    #[test]
    fn short_episode_window_is_left_padded() {
        let trajs = vec![toy(&[1.0; 5])];
        let w = sample_window(&trajs, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((w.start, w.len, w.pad), (0, 5, 5));
        let mask = w.mask();
        assert_eq!(mask.iter().filter(|m| !**m).count(), 5);
        assert!(mask[..5].iter().all(|m| !m) && mask[5..].iter().all(|m| *m));
        let slots: Vec<_> = w.slots().collect();
        assert_eq!(slots[4], None);
        assert_eq!(slots[5], Some(0));
    }

    #[test]
    fn expert_collection_is_seeded() {
        let env = EnvConfig {
            route_length: 200.0,
            ..EnvConfig::default()
        };
        let a = collect_expert(&env, &ExpertConfig::default(), 3, 10).unwrap();
        let b = collect_expert(&env, &ExpertConfig::default(), 3, 10).unwrap();
        assert_eq!(a, b);
        for t in &a {
            t.validate(Some(env.episode_horizon)).unwrap();
            for s in &t.steps {
                assert_eq!(s.reward, s.reward_terms().total());
            }
        }
    }
}
