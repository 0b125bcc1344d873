//! Toy highway driving task with hidden vehicle and traffic-light latents.
//!
//! The ego vehicle follows a curved single-lane route. Two kinds of hidden
//! variables make outcomes stochastic from the policy's point of view:
//! merging lead vehicles whose aggressiveness (speed, merge gap) is drawn at
//! reset and may be resampled with probability `delta` per step, and traffic
//! lights whose phase schedule is drawn at reset and only observable within a
//! visibility radius.

mod expert;
mod sim;

pub use expert::{expert_action, Expert, ExpertConfig, EXPERT_VERSION};
pub use sim::{HighwayEnv, HiddenLatents, LeadLatent, LightSchedule, Privileged};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{invalid, ConfigError, KvConfig};

pub const ENV_VERSION: &str = "highway-toy/1";
pub const STATE_DIM: usize = 12;
pub const ACTION_DIM: usize = 2;

pub const LEAD_DISTANCE_MAX: f64 = 100.0;
pub const LIGHT_DISTANCE_MAX: f64 = 150.0;
/// Longitudinal offsets (m) of the reported route waypoints.
pub const WAYPOINT_OFFSETS: [f64; 4] = [10.0, 20.0, 30.0, 40.0];

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called after the episode finished")]
    EpisodeDone,
    #[error("action is not finite: {0:?}")]
    InvalidAction([f64; 2]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightPhase {
    Red,
    Green,
    Unknown,
}

impl LightPhase {
    pub fn encode(self) -> f64 {
        match self {
            LightPhase::Red => 1.0,
            LightPhase::Green => -1.0,
            LightPhase::Unknown => 0.0,
        }
    }

    pub fn decode(v: f64) -> Self {
        if v > 0.5 {
            LightPhase::Red
        } else if v < -0.5 {
            LightPhase::Green
        } else {
            LightPhase::Unknown
        }
    }
}

/// Observation available to policies. Hidden latents never appear here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub ego_speed: f64,
    pub ego_lane_offset: f64,
    pub ego_heading_err: f64,
    /// Bumper gap to the lead vehicle, [`LEAD_DISTANCE_MAX`] when none is seen.
    pub lead_distance: f64,
    /// Lead speed, `v_max` when none is seen.
    pub lead_speed: f64,
    /// Distance to the next stop line, [`LIGHT_DISTANCE_MAX`] when none remains.
    pub light_distance: f64,
    pub light_phase_visible: LightPhase,
    /// Lateral offsets (ego frame) of the route centerline at [`WAYPOINT_OFFSETS`].
    pub next_waypoints: [f64; 4],
    pub step_index: usize,
}

impl EnvState {
    pub fn to_vector(&self) -> [f64; STATE_DIM] {
        let w = self.next_waypoints;
        [
            self.ego_speed,
            self.ego_lane_offset,
            self.ego_heading_err,
            self.lead_distance,
            self.lead_speed,
            self.light_distance,
            self.light_phase_visible.encode(),
            w[0],
            w[1],
            w[2],
            w[3],
            self.step_index as f64,
        ]
    }

    pub fn from_vector(v: &[f64; STATE_DIM]) -> Self {
        Self {
            ego_speed: v[0],
            ego_lane_offset: v[1],
            ego_heading_err: v[2],
            lead_distance: v[3],
            lead_speed: v[4],
            light_distance: v[5],
            light_phase_visible: LightPhase::decode(v[6]),
            next_waypoints: [v[7], v[8], v[9], v[10]],
            step_index: v[11].max(0.0) as usize,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    /// m/s, clamped to `[0, v_max]` by the simulator.
    pub target_speed: f64,
    /// Normalized steering command in `[-1, 1]`.
    pub target_steer: f64,
}

impl EnvAction {
    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.target_speed, self.target_steer]
    }

    /// Maps to `[-1, 1]^2`, the range policies predict in.
    pub fn normalized(self, v_max: f64) -> [f64; ACTION_DIM] {
        [2.0 * self.target_speed / v_max - 1.0, self.target_steer]
    }

    pub fn from_normalized(a: [f64; ACTION_DIM], v_max: f64) -> Self {
        Self {
            target_speed: (a[0] + 1.0) * 0.5 * v_max,
            target_steer: a[1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infraction {
    Collision,
    RedLight,
    OffRoute,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub speed: f64,
    pub position: f64,
    pub rotation: f64,
    pub action: f64,
    pub terminal: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.speed + self.position + self.rotation + self.action + self.terminal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub reward_terms: RewardTerms,
    pub done: bool,
    pub infraction: Option<Infraction>,
    pub success: bool,
    /// This step exposed a previously hidden latent (lead merge, light phase
    /// coming into view or changing while visible). Diagnostic only.
    pub reveal: bool,
    /// Fraction of the route covered so far.
    pub route_completion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Per-step probability of resampling a lead vehicle's hidden latent.
    pub delta: f64,
    pub lead_speed_range: (f64, f64),
    pub lead_visibility_range: (f64, f64),
    pub episode_horizon: usize,
    pub seed: u64,
    pub v_desired: f64,
    pub v_max: f64,
    pub route_length: f64,
    pub dt: f64,
    pub num_leads: usize,
    pub num_lights: usize,
    pub light_visibility: f64,
    pub max_lane_offset: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            delta: 0.02,
            lead_speed_range: (20.0, 40.0),
            lead_visibility_range: (10.0, 30.0),
            episode_horizon: 300,
            seed: 0,
            v_desired: 25.0,
            v_max: 40.0,
            route_length: 600.0,
            dt: 0.2,
            num_leads: 2,
            num_lights: 2,
            light_visibility: 80.0,
            max_lane_offset: 2.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(invalid("delta", "must lie in [0, 1]"));
        }
        for (key, (lo, hi)) in [
            ("lead_speed_range", self.lead_speed_range),
            ("lead_visibility_range", self.lead_visibility_range),
        ] {
            if !(lo < hi) || lo < 0.0 {
                return Err(invalid(key, "needs 0 <= lo < hi"));
            }
        }
        if self.episode_horizon == 0 {
            return Err(invalid("episode_horizon", "must be positive"));
        }
        if !(self.v_max > 0.0) || !(0.0..=self.v_max).contains(&self.v_desired) {
            return Err(invalid("v_desired", "needs 0 <= v_desired <= v_max"));
        }
        if self.lead_speed_range.1 > self.v_max {
            return Err(invalid("lead_speed_range", "upper bound exceeds v_max"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        if !(self.route_length > 100.0) {
            return Err(invalid("route_length", "must exceed 100 m"));
        }
        if !(self.light_visibility > 0.0) || self.light_visibility > LIGHT_DISTANCE_MAX {
            return Err(invalid("light_visibility", "must lie in (0, 150]"));
        }
        if !(self.max_lane_offset > 0.0) {
            return Err(invalid("max_lane_offset", "must be positive"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let cfg = Self {
            delta: kv.take_f64("delta", d.delta)?,
            lead_speed_range: kv.take_range("lead_speed_range", d.lead_speed_range)?,
            lead_visibility_range: kv.take_range("lead_visibility_range", d.lead_visibility_range)?,
            episode_horizon: kv.take_usize("episode_horizon", d.episode_horizon)?,
            seed: kv.take_u64("seed", d.seed)?,
            v_desired: kv.take_f64("v_desired", d.v_desired)?,
            v_max: kv.take_f64("v_max", d.v_max)?,
            route_length: kv.take_f64("route_length", d.route_length)?,
            dt: kv.take_f64("dt", d.dt)?,
            num_leads: kv.take_usize("num_leads", d.num_leads)?,
            num_lights: kv.take_usize("num_lights", d.num_lights)?,
            light_visibility: kv.take_f64("light_visibility", d.light_visibility)?,
            max_lane_offset: kv.take_f64("max_lane_offset", d.max_lane_offset)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("delta", self.delta);
        kv.set(
            "lead_speed_range",
            format!("{}, {}", self.lead_speed_range.0, self.lead_speed_range.1),
        );
        kv.set(
            "lead_visibility_range",
            format!("{}, {}", self.lead_visibility_range.0, self.lead_visibility_range.1),
        );
        kv.set("episode_horizon", self.episode_horizon);
        kv.set("seed", self.seed);
        kv.set("v_desired", self.v_desired);
        kv.set("v_max", self.v_max);
        kv.set("route_length", self.route_length);
        kv.set("dt", self.dt);
        kv.set("num_leads", self.num_leads);
        kv.set("num_lights", self.num_lights);
        kv.set("light_visibility", self.light_visibility);
        kv.set("max_lane_offset", self.max_lane_offset);
        kv
    }
}

/// Parses a scenario file holding both environment and expert settings.
pub fn parse_scenario(text: &str) -> Result<(EnvConfig, ExpertConfig), ConfigError> {
    let mut kv = KvConfig::parse(text)?;
    let env = EnvConfig::from_kv(&mut kv)?;
    let expert = ExpertConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok((env, expert))
}
