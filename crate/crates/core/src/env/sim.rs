use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    EnvAction, EnvConfig, EnvError, EnvState, Infraction, LightPhase, RewardTerms, StepOutcome, LEAD_DISTANCE_MAX,
    LIGHT_DISTANCE_MAX, WAYPOINT_OFFSETS,
};

pub(crate) const YAW_RATE_MAX: f64 = 0.5;
const ACCEL_MAX: f64 = 3.0;
pub(crate) const BRAKE_MAX: f64 = 8.0;
const LEAD_ACCEL: f64 = 4.0;
const STEER_SMOOTH_TOL: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadLatent {
    /// In `[0, 1]`; higher means faster and merging with a smaller gap.
    pub aggressiveness: f64,
    pub speed: f64,
    /// Gap (m) ahead of the ego at which this vehicle merges.
    pub visibility: f64,
    /// Ego route position that triggers the merge.
    pub trigger_position: f64,
    /// Distance the lead travels in-lane before turning off.
    pub exit_travel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSchedule {
    pub position: f64,
    pub green_duration: f64,
    pub red_duration: f64,
    pub offset: f64,
}

impl LightSchedule {
    pub fn phase_at(&self, time: f64) -> LightPhase {
        let cycle = self.green_duration + self.red_duration;
        if (time + self.offset).rem_euclid(cycle) < self.green_duration {
            LightPhase::Green
        } else {
            LightPhase::Red
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLatents {
    pub leads: Vec<LeadLatent>,
    pub lights: Vec<LightSchedule>,
}

/// Collection-time view of hidden quantities for the rule-based expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Privileged {
    pub time: f64,
    pub dt: f64,
    pub v_desired: f64,
    pub v_max: f64,
    pub curvature: f64,
    pub next_light: Option<LightSchedule>,
    pub light_visibility: f64,
    /// Speed the visible lead is converging to.
    pub lead_target_speed: Option<f64>,
}

#[derive(Clone, Debug)]
struct Ego {
    pos: f64,
    speed: f64,
    lane_offset: f64,
    heading: f64,
    prev_steer: f64,
}

#[derive(Clone, Debug)]
struct ActiveLead {
    latent: usize,
    pos: f64,
    speed: f64,
    exit_pos: f64,
}

/// Seeded simulator. With `delta = 0`, rollouts are a deterministic function
/// of the seed and the action sequence.
#[derive(Clone, Debug)]
pub struct HighwayEnv {
    config: EnvConfig,
    latents: HiddenLatents,
    /// `(start_position, curvature)` segments, sorted by start.
    route: Vec<(f64, f64)>,
    noise: ChaCha8Rng,
    ego: Ego,
    lead: Option<ActiveLead>,
    next_lead: usize,
    step: usize,
    done: bool,
    last_state: EnvState,
}

impl HighwayEnv {
    /// Builds and resets an environment with `config.seed`.
    pub fn new(config: EnvConfig) -> Self {
        let seed = config.seed;
        let mut env = Self {
            config,
            latents: HiddenLatents {
                leads: vec![],
                lights: vec![],
            },
            route: vec![(0.0, 0.0)],
            noise: ChaCha8Rng::seed_from_u64(seed),
            ego: Ego {
                pos: 0.0,
                speed: 0.0,
                lane_offset: 0.0,
                heading: 0.0,
                prev_steer: 0.0,
            },
            lead: None,
            next_lead: 0,
            step: 0,
            done: false,
            last_state: placeholder_state(),
        };
        env.reset(seed);
        env
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn latents(&self) -> &HiddenLatents {
        &self.latents
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn state(&self) -> EnvState {
        self.last_state
    }

    pub fn route_position(&self) -> f64 {
        self.ego.pos
    }

    /// Samples all hidden latents from `seed`; equal seeds give equal episodes.
    pub fn reset(&mut self, seed: u64) -> EnvState {
        let c = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.noise = ChaCha8Rng::seed_from_u64(seed);
        self.noise.set_stream(1);

        let mut route = Vec::new();
        let mut s = 0.0;
        while s < c.route_length + 100.0 {
            let kappa = if s < 60.0 || rng.random::<f64>() < 0.4 {
                0.0
            } else {
                rng.random_range(-0.004..0.004)
            };
            route.push((s, kappa));
            s += rng.random_range(80.0..200.0);
        }
        self.route = route;

        let mut leads = Vec::with_capacity(c.num_leads);
        let span = c.route_length / c.num_leads.max(1) as f64;
        for i in 0..c.num_leads {
            let aggressiveness = rng.random::<f64>();
            let (speed, visibility) = latent_profile(&c, aggressiveness);
            let lo = i as f64 * span + 0.15 * span;
            leads.push(LeadLatent {
                aggressiveness,
                speed,
                visibility,
                trigger_position: rng.random_range(lo..lo + 0.35 * span),
                exit_travel: rng.random_range(150.0..300.0),
            });
        }

        let mut lights = Vec::with_capacity(c.num_lights);
        let gap = c.route_length / (c.num_lights + 1) as f64;
        for j in 0..c.num_lights {
            let green = rng.random_range(5.0..10.0);
            let red = rng.random_range(4.0..8.0);
            lights.push(LightSchedule {
                position: gap * (j + 1) as f64 + rng.random_range(-0.15 * gap..0.15 * gap),
                green_duration: green,
                red_duration: red,
                offset: rng.random_range(0.0..green + red),
            });
        }
        self.latents = HiddenLatents { leads, lights };

        self.ego = Ego {
            pos: 0.0,
            speed: rng.random_range(0.6..1.0) * c.v_desired,
            lane_offset: rng.random_range(-0.3..0.3),
            heading: rng.random_range(-0.03..0.03),
            prev_steer: 0.0,
        };
        self.lead = None;
        self.next_lead = 0;
        self.step = 0;
        self.done = false;
        self.last_state = self.observe();
        self.last_state
    }

    pub fn privileged(&self) -> Privileged {
        Privileged {
            time: self.time(),
            dt: self.config.dt,
            v_desired: self.config.v_desired,
            v_max: self.config.v_max,
            curvature: self.curvature_at(self.ego.pos),
            next_light: self.next_light().cloned(),
            light_visibility: self.config.light_visibility,
            lead_target_speed: self.lead.as_ref().map(|l| self.latents.leads[l.latent].speed),
        }
    }

    fn time(&self) -> f64 {
        self.step as f64 * self.config.dt
    }

    fn curvature_at(&self, pos: f64) -> f64 {
        let i = self.route.partition_point(|&(s, _)| s <= pos);
        self.route[i.saturating_sub(1)].1
    }

    fn next_light(&self) -> Option<&LightSchedule> {
        self.latents.lights.iter().find(|l| l.position > self.ego.pos)
    }

    fn centerline_offset(&self, ahead: f64) -> f64 {
        const STEP: f64 = 2.5;
        let n = (ahead / STEP).ceil() as usize;
        let h = ahead / n as f64;
        let mut bend = 0.0;
        for i in 0..n {
            let x = (i as f64 + 0.5) * h;
            bend += (ahead - x) * self.curvature_at(self.ego.pos + x) * h;
        }
        -self.ego.lane_offset - ahead * self.ego.heading.tan() + bend
    }

    fn observe(&self) -> EnvState {
        let c = &self.config;
        let (lead_distance, lead_speed) = match &self.lead {
            Some(l) => ((l.pos - self.ego.pos).clamp(0.0, LEAD_DISTANCE_MAX), l.speed.min(c.v_max)),
            None => (LEAD_DISTANCE_MAX, c.v_max),
        };
        let (light_distance, phase) = match self.next_light() {
            Some(l) => {
                let d = (l.position - self.ego.pos).clamp(0.0, LIGHT_DISTANCE_MAX);
                let phase = if d <= c.light_visibility {
                    l.phase_at(self.time())
                } else {
                    LightPhase::Unknown
                };
                (d, phase)
            }
            None => (LIGHT_DISTANCE_MAX, LightPhase::Unknown),
        };
        EnvState {
            ego_speed: self.ego.speed,
            ego_lane_offset: self.ego.lane_offset,
            ego_heading_err: self.ego.heading,
            lead_distance,
            lead_speed,
            light_distance,
            light_phase_visible: phase,
            next_waypoints: WAYPOINT_OFFSETS.map(|d| self.centerline_offset(d)),
            step_index: self.step,
        }
    }

    pub fn step(&mut self, action: EnvAction) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if !action.target_speed.is_finite() || !action.target_steer.is_finite() {
            return Err(EnvError::InvalidAction(action.to_array()));
        }
        let c = self.config.clone();
        let target = action.target_speed.clamp(0.0, c.v_max);
        let steer = action.target_steer.clamp(-1.0, 1.0);

        // Ego kinematics.
        let prev_pos = self.ego.pos;
        let kappa = self.curvature_at(self.ego.pos);
        let dv = (target - self.ego.speed).clamp(-BRAKE_MAX * c.dt, ACCEL_MAX * c.dt);
        self.ego.speed = (self.ego.speed + dv).clamp(0.0, c.v_max);
        let v = self.ego.speed;
        self.ego.heading += (steer * YAW_RATE_MAX - kappa * v) * c.dt;
        self.ego.lane_offset += v * self.ego.heading.sin() * c.dt;
        self.ego.pos += v * self.ego.heading.cos() * c.dt;
        let steer_change = (steer - self.ego.prev_steer).abs();
        self.ego.prev_steer = steer;
        self.step += 1;

        // Hidden latent resampling.
        if c.delta > 0.0 && self.noise.random::<f64>() < c.delta {
            let idx = match &self.lead {
                Some(l) => Some(l.latent),
                None => (self.next_lead < self.latents.leads.len()).then_some(self.next_lead),
            };
            if let Some(i) = idx {
                let a = self.noise.random::<f64>();
                let (speed, visibility) = latent_profile(&c, a);
                let lat = &mut self.latents.leads[i];
                lat.aggressiveness = a;
                lat.speed = speed;
                if self.lead.is_none() {
                    lat.visibility = visibility;
                }
            }
        }

        // Lead vehicle.
        if let Some(l) = &mut self.lead {
            let goal = self.latents.leads[l.latent].speed;
            l.speed += (goal - l.speed).clamp(-LEAD_ACCEL * c.dt, LEAD_ACCEL * c.dt);
            l.pos += l.speed * c.dt;
            if l.pos >= l.exit_pos || l.pos - self.ego.pos > LEAD_DISTANCE_MAX {
                self.lead = None;
            }
        }
        let collision = self.lead.as_ref().is_some_and(|l| l.pos - self.ego.pos <= 0.0);
        if self.lead.is_none() && !collision {
            if let Some(lat) = self.latents.leads.get(self.next_lead) {
                if self.ego.pos >= lat.trigger_position {
                    let pos = self.ego.pos + lat.visibility;
                    self.lead = Some(ActiveLead {
                        latent: self.next_lead,
                        pos,
                        speed: lat.speed,
                        exit_pos: pos + lat.exit_travel,
                    });
                    self.next_lead += 1;
                }
            }
        }

        // Infractions.
        let time = self.time();
        let ran_red = self
            .latents
            .lights
            .iter()
            .any(|l| prev_pos < l.position && self.ego.pos >= l.position && l.phase_at(time) == LightPhase::Red);
        let off_route = self.ego.lane_offset.abs() > c.max_lane_offset;
        let infraction = if collision {
            Some(Infraction::Collision)
        } else if off_route {
            Some(Infraction::OffRoute)
        } else if ran_red {
            Some(Infraction::RedLight)
        } else {
            None
        };
        let success = infraction.is_none() && self.ego.pos >= c.route_length;

        let terms = RewardTerms {
            speed: 1.0 - (v - c.v_desired).abs() / c.v_max,
            position: -0.5 * self.ego.lane_offset.abs(),
            rotation: -self.ego.heading.abs(),
            action: if steer_change > STEER_SMOOTH_TOL { -0.1 } else { 0.0 },
            terminal: if infraction.is_some() {
                -10.0
            } else if success {
                10.0
            } else {
                0.0
            },
        };
        let terminal = matches!(infraction, Some(Infraction::Collision | Infraction::OffRoute));
        self.done = terminal || success || self.step >= c.episode_horizon;

        let prev = self.last_state;
        let state = self.observe();
        let reveal = (prev.lead_distance >= LEAD_DISTANCE_MAX && state.lead_distance < LEAD_DISTANCE_MAX)
            || (state.light_phase_visible != LightPhase::Unknown
                && state.light_phase_visible != prev.light_phase_visible);
        self.last_state = state;

        Ok(StepOutcome {
            state,
            reward: terms.total(),
            reward_terms: terms,
            done: self.done,
            infraction,
            success,
            reveal,
            route_completion: (self.ego.pos / c.route_length).clamp(0.0, 1.0),
        })
    }
}

fn latent_profile(c: &EnvConfig, aggressiveness: f64) -> (f64, f64) {
    let (s_lo, s_hi) = c.lead_speed_range;
    let (v_lo, v_hi) = c.lead_visibility_range;
    (
        s_lo + aggressiveness * (s_hi - s_lo),
        v_hi - aggressiveness * (v_hi - v_lo),
    )
}

fn placeholder_state() -> EnvState {
    EnvState {
        ego_speed: 0.0,
        ego_lane_offset: 0.0,
        ego_heading_err: 0.0,
        lead_distance: LEAD_DISTANCE_MAX,
        lead_speed: 0.0,
        light_distance: LIGHT_DISTANCE_MAX,
        light_phase_visible: LightPhase::Unknown,
        next_waypoints: [0.0; 4],
        step_index: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cruise(env: &HighwayEnv) -> EnvAction {
        EnvAction {
            target_speed: env.config().v_desired,
            target_steer: 0.0,
        }
    }

    #[test]
    fn same_seed_same_initial_state() {
        let a = HighwayEnv::new(EnvConfig::default());
        let b = HighwayEnv::new(EnvConfig::default());
        assert_eq!(a.state(), b.state());
        assert_eq!(a.latents(), b.latents());
    }

    #[test]
    fn step_after_done_fails() {
        let mut env = HighwayEnv::new(EnvConfig {
            episode_horizon: 2,
            ..EnvConfig::default()
        });
        let a = cruise(&env);
        env.step(a).unwrap();
        assert!(env.step(a).unwrap().done);
        assert_eq!(env.step(a), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn non_finite_action_rejected() {
        let mut env = HighwayEnv::new(EnvConfig::default());
        let bad = EnvAction {
            target_speed: f64::NAN,
            target_steer: 0.0,
        };
        assert!(matches!(env.step(bad), Err(EnvError::InvalidAction(_))));
    }

    #[test]
    fn light_schedule_cycles() {
        let l = LightSchedule {
            position: 0.0,
            green_duration: 5.0,
            red_duration: 3.0,
            offset: 0.0,
        };
        assert_eq!(l.phase_at(0.0), LightPhase::Green);
        assert_eq!(l.phase_at(6.0), LightPhase::Red);
        assert_eq!(l.phase_at(8.5), LightPhase::Green);
    }

    #[test]
    fn reward_is_one_when_tracking_perfectly() {
        let mut env = HighwayEnv::new(EnvConfig::default());
        env.ego = Ego {
            pos: 10.0,
            speed: 25.0,
            lane_offset: 0.0,
            heading: 0.0,
            prev_steer: 0.0,
        };
        // First segment is straight, nothing merges this early.
        let out = env.step(cruise(&env)).unwrap();
        assert_eq!(out.reward_terms.speed, 1.0);
        assert_eq!(out.reward, 1.0);
        assert!(out.infraction.is_none());
    }

    #[test]
    fn lateral_error_costs_half_per_meter() {
        let mut env = HighwayEnv::new(EnvConfig::default());
        env.ego = Ego {
            pos: 10.0,
            speed: 25.0,
            lane_offset: 1.0,
            heading: 0.0,
            prev_steer: 0.0,
        };
        let out = env.step(cruise(&env)).unwrap();
        assert_eq!(out.reward_terms.position, -0.5);
        assert_eq!(out.reward, 1.0 - 0.5);
    }

    #[test]
    fn collision_terminates_with_penalty() {
        let mut env = HighwayEnv::new(EnvConfig::default());
        env.ego.pos = 10.0;
        env.ego.speed = 30.0;
        env.lead = Some(ActiveLead {
            latent: 0,
            pos: 12.0,
            speed: 0.0,
            exit_pos: 500.0,
        });
        env.latents.leads[0].speed = 0.0;
        let out = env
            .step(EnvAction {
                target_speed: 30.0,
                target_steer: 0.0,
            })
            .unwrap();
        assert_eq!(out.infraction, Some(Infraction::Collision));
        assert_eq!(out.reward_terms.terminal, -10.0);
        assert!(out.done);
    }

    #[test]
    fn steering_jerk_is_penalized() {
        let mut env = HighwayEnv::new(EnvConfig::default());
        let out = env
            .step(EnvAction {
                target_speed: 20.0,
                target_steer: 0.2,
            })
            .unwrap();
        assert_eq!(out.reward_terms.action, -0.1);
    }
}
