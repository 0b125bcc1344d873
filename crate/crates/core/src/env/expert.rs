use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sim::BRAKE_MAX;
use super::{EnvAction, EnvState, LightPhase, Privileged, LEAD_DISTANCE_MAX};
use crate::config::{invalid, ConfigError, KvConfig};

pub const EXPERT_VERSION: &str = "rule-expert/1";

/// Stop-line standoff (m).
const STOP_MARGIN: f64 = 5.0;
/// Deceleration used to shape the approach to a stop line.
const STOP_DECEL: f64 = 4.0;
const FOLLOW_GAP: f64 = 4.0;
const FOLLOW_HEADWAY: f64 = 1.0;
const FOLLOW_GAIN: f64 = 0.6;
const STEER_HOLD: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Per-step probability of perturbing the rule action.
    pub noise_rate: f64,
    pub speed_noise: f64,
    pub steer_noise: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            noise_rate: 0.05,
            speed_noise: 8.0,
            steer_noise: 0.3,
        }
    }
}

impl ExpertConfig {
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let cfg = Self {
            noise_rate: kv.take_f64("expert_noise_rate", d.noise_rate)?,
            speed_noise: kv.take_f64("expert_speed_noise", d.speed_noise)?,
            steer_noise: kv.take_f64("expert_steer_noise", d.steer_noise)?,
        };
        if !(0.0..=1.0).contains(&cfg.noise_rate) {
            return Err(invalid("expert_noise_rate", "must lie in [0, 1]"));
        }
        if cfg.speed_noise < 0.0 || cfg.steer_noise < 0.0 {
            return Err(invalid("expert_speed_noise", "noise scales must be non-negative"));
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("expert_noise_rate", self.noise_rate);
        kv.set("expert_speed_noise", self.speed_noise);
        kv.set("expert_steer_noise", self.steer_noise);
        kv
    }
}

/// Noise-free rule action: cruise at the desired speed, follow the lead,
/// stop for lights that will be red on arrival, track the centerline.
pub fn expert_action(state: &EnvState, privileged: &Privileged) -> EnvAction {
    let v = state.ego_speed;
    let mut target = privileged.v_desired;

    if state.lead_distance < LEAD_DISTANCE_MAX {
        let lead_v = privileged
            .lead_target_speed
            .map_or(state.lead_speed, |t| t.min(state.lead_speed));
        let desired_gap = FOLLOW_GAP + FOLLOW_HEADWAY * v;
        target = target.min((lead_v + FOLLOW_GAIN * (state.lead_distance - desired_gap)).max(0.0));
    }

    if state.light_phase_visible != LightPhase::Unknown {
        if let Some(light) = &privileged.next_light {
            let d = state.light_distance;
            let arrival = privileged.time + d / v.max(1.0);
            let red_now = light.phase_at(privileged.time) == LightPhase::Red;
            let red_on_arrival = light.phase_at(arrival) == LightPhase::Red;
            let can_stop = v * v / (2.0 * BRAKE_MAX) < d;
            if red_now || (red_on_arrival && can_stop) {
                target = target.min((2.0 * STOP_DECEL * (d - STOP_MARGIN).max(0.0)).sqrt());
            }
        }
    }

    let yaw_rate = -2.0 * state.ego_heading_err - 0.04 * state.ego_lane_offset + privileged.curvature * v;
    EnvAction {
        target_speed: target.clamp(0.0, privileged.v_max),
        target_steer: (yaw_rate / super::sim::YAW_RATE_MAX).clamp(-1.0, 1.0),
    }
}

/// Rule expert with steering hysteresis and random action perturbations.
#[derive(Clone, Debug)]
pub struct Expert {
    config: ExpertConfig,
    rng: ChaCha8Rng,
    prev_steer: Option<f64>,
}

impl Expert {
    pub fn new(config: ExpertConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        Self {
            config,
            rng,
            prev_steer: None,
        }
    }

    /// Call at every episode start.
    pub fn reset(&mut self, seed: u64) {
        *self = Self::new(self.config.clone(), seed);
    }

    pub fn act(&mut self, state: &EnvState, privileged: &Privileged) -> EnvAction {
        let mut a = expert_action(state, privileged);
        if let Some(prev) = self.prev_steer {
            if (a.target_steer - prev).abs() <= STEER_HOLD {
                a.target_steer = prev;
            }
        }
        self.prev_steer = Some(a.target_steer);
        if self.config.noise_rate > 0.0 && self.rng.random::<f64>() < self.config.noise_rate {
            let speed = Normal::new(0.0, self.config.speed_noise).expect("finite noise scale");
            let steer = Normal::new(0.0, self.config.steer_noise).expect("finite noise scale");
            a.target_speed = (a.target_speed + speed.sample(&mut self.rng)).clamp(0.0, privileged.v_max);
            a.target_steer = (a.target_steer + steer.sample(&mut self.rng)).clamp(-1.0, 1.0);
        }
        a
    }
}
