//! Grid traffic-signal environment: one agent per intersection choosing among
//! eight signal phases, vehicles following a Krauss-style safe-speed rule
//! parameterized by the context, and a shared moving-time reward.

mod metrics;
mod network;

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_space::{Context, ContextSpace};
use crate::rng::RunRng;
use rand::SeedableRng;

pub use metrics::{compute_reward, CompletedVehicle, EpisodeMetrics};
pub use network::{
    phase_permits, Heading, LinkInfo, LinkKind, Movement, Network, N_PHASES, PHASES,
};

/// Speeds at or below this count as stopped.
pub const STOPPED_SPEED: f64 = 0.1;
/// Speeds below this snap to zero so queues come fully to rest.
pub const CREEP_SPEED: f64 = 0.01;
pub const FEATURES_PER_LANE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("link length {link_length} m cannot hold a {length} m vehicle plus {min_gap} m gap")]
    Geometry {
        link_length: f64,
        length: f64,
        min_gap: f64,
    },
    #[error("context is missing parameter {0}")]
    MissingParameter(String),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action {0} is not a phase id (0..8)")]
    InvalidAction(usize),
    #[error("episode already finished")]
    EpisodeOver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub rows: usize,
    pub cols: usize,
    pub lanes_per_approach: usize,
    /// Metres.
    pub link_length: f64,
    /// Seconds per step.
    pub sim_dt: f64,
    /// Arrivals per second per entry lane.
    pub spawn_rate: f64,
    pub episode_len: usize,
    pub turn_prob: f64,
    pub lambda_f: f64,
    pub lambda_w: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            rows: 1,
            cols: 2,
            lanes_per_approach: 3,
            link_length: 100.0,
            sim_dt: 1.0,
            spawn_rate: 0.05,
            episode_len: 360,
            turn_prob: 0.1,
            lambda_f: 0.033,
            lambda_w: 0.0,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |m: &str| Err(EnvError::Spec(m.into()));
        if self.rows < 1 || self.cols < 1 {
            return err("rows and cols must be >= 1");
        }
        if !(1..=3).contains(&self.lanes_per_approach) {
            return err("lanes_per_approach must be 1, 2 or 3");
        }
        if !(self.link_length.is_finite() && self.link_length > 0.0) {
            return err("link_length must be > 0");
        }
        if !(self.sim_dt.is_finite() && self.sim_dt > 0.0) {
            return err("sim_dt must be > 0");
        }
        if !(self.spawn_rate >= 0.0 && self.spawn_rate * self.sim_dt <= 1.0) {
            return err("spawn_rate * sim_dt must lie in [0, 1]");
        }
        if self.episode_len < 1 {
            return err("episode_len must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.turn_prob) {
            return err("turn_prob must lie in [0, 1]");
        }
        if !(self.lambda_f.is_finite() && self.lambda_w.is_finite()) {
            return err("reward weights must be finite");
        }
        Ok(())
    }

    /// Rejects spaces whose longest vehicle plus gap does not fit on a link.
    pub fn validate_for_space(&self, space: &ContextSpace) -> Result<(), EnvError> {
        self.validate()?;
        let upper = |name: &str| {
            space
                .index_of(name)
                .map(|i| space.params()[i].upper)
                .ok_or_else(|| EnvError::MissingParameter(name.into()))
        };
        let (length, min_gap) = (upper("length")?, upper("minGap")?);
        if self.link_length <= length + min_gap {
            return Err(EnvError::Geometry {
                link_length: self.link_length,
                length,
                min_gap,
            });
        }
        Ok(())
    }
}

/// Vehicle dynamics read from a context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    pub length: f64,
    pub width: f64,
    pub max_pos_acc: f64,
    pub max_neg_acc: f64,
    pub usual_pos_acc: f64,
    pub usual_neg_acc: f64,
    pub min_gap: f64,
    pub max_speed: f64,
    pub headway_time: f64,
}

impl VehicleParams {
    pub fn from_context(space: &ContextSpace, ctx: &Context) -> Result<Self, EnvError> {
        let get = |name: &str| {
            ctx.get(space, name)
                .ok_or_else(|| EnvError::MissingParameter(name.into()))
        };
        Ok(Self {
            length: get("length")?,
            width: get("width")?,
            max_pos_acc: get("maxPosAcc")?,
            max_neg_acc: get("maxNegAcc")?,
            usual_pos_acc: get("usualPosAcc")?,
            usual_neg_acc: get("usualNegAcc")?,
            min_gap: get("minGap")?,
            max_speed: get("maxSpeed")?,
            headway_time: get("headwayTime")?,
        })
    }

    fn braking(&self) -> f64 {
        self.usual_neg_acc.min(self.max_neg_acc)
    }

    /// Largest speed that still lets the vehicle stop behind a leader moving
    /// at `leader_speed` with `gap` metres of usable space.
    pub fn safe_speed(&self, gap: f64, leader_speed: f64) -> f64 {
        let bt = self.braking() * self.headway_time;
        let disc = bt * bt + leader_speed * leader_speed + 2.0 * self.braking() * gap;
        if disc <= 0.0 {
            0.0
        } else {
            (disc.sqrt() - bt).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: u64,
    pub link: usize,
    pub lane: usize,
    /// Front bumper, metres from the start of the link.
    pub position: f64,
    pub speed: f64,
    pub route: Vec<Movement>,
    /// Index into `route` of the next intersection movement.
    pub route_pos: usize,
    pub spawn_time: u64,
    pub ideal_travel_time: f64,
    pub wait_time: f64,
    last_moved: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalOverride {
    /// Every controlled movement red.
    AllRed,
    /// Every movement green.
    AllGreen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledArrival {
    pub time: u64,
    pub entry_link: usize,
    pub route: Vec<Movement>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub delta_t_f: f64,
    pub delta_t_w: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VehicleCounts {
    pub spawned: usize,
    pub active: usize,
    pub completed: usize,
    pub pending: usize,
}

pub struct TrafficEnv {
    spec: NetworkSpec,
    net: Network,
    params: VehicleParams,
    time: u64,
    phases: Vec<usize>,
    lanes: Vec<VecDeque<Vehicle>>,
    pending: Vec<VecDeque<Vec<Movement>>>,
    schedule: Vec<ScheduledArrival>,
    next_arrival: usize,
    completed: Vec<CompletedVehicle>,
    spawned: usize,
    next_id: u64,
    t_f: f64,
    t_w: f64,
    episode_return: f64,
    signal_override: Option<SignalOverride>,
    trace: Option<csv::Writer<Box<dyn Write + Send>>>,
}

impl TrafficEnv {
    pub fn new(
        spec: NetworkSpec,
        space: &ContextSpace,
        ctx: &Context,
        seed: u64,
    ) -> Result<Self, EnvError> {
        spec.validate()?;
        let net = Network::grid(spec.rows, spec.cols, spec.lanes_per_approach);
        let params = VehicleParams::from_context(space, ctx)?;
        let mut env = Self {
            phases: vec![0; net.n_nodes()],
            lanes: vec![VecDeque::new(); net.n_lane_slots()],
            pending: vec![VecDeque::new(); net.n_lane_slots()],
            spec,
            net,
            params,
            time: 0,
            schedule: Vec::new(),
            next_arrival: 0,
            completed: Vec::new(),
            spawned: 0,
            next_id: 0,
            t_f: 0.0,
            t_w: 0.0,
            episode_return: 0.0,
            signal_override: None,
            trace: None,
        };
        env.reset(space, ctx, seed)?;
        Ok(env)
    }

    /// Empties the network, installs `ctx` and draws the arrival schedule from
    /// `seed`. The schedule does not depend on the context.
    pub fn reset(
        &mut self,
        space: &ContextSpace,
        ctx: &Context,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>, EnvError> {
        let params = VehicleParams::from_context(space, ctx)?;
        if self.spec.link_length <= params.length + params.min_gap {
            return Err(EnvError::Geometry {
                link_length: self.spec.link_length,
                length: params.length,
                min_gap: params.min_gap,
            });
        }
        if self.spec.link_length < params.max_speed * self.spec.sim_dt {
            return Err(EnvError::Spec(format!(
                "link_length {} m is shorter than one step at maxSpeed {}",
                self.spec.link_length, params.max_speed
            )));
        }
        self.params = params;
        self.time = 0;
        self.phases.iter_mut().for_each(|p| *p = 0);
        self.lanes.iter_mut().for_each(VecDeque::clear);
        self.pending.iter_mut().for_each(VecDeque::clear);
        self.completed.clear();
        self.spawned = 0;
        self.next_id = 0;
        self.t_f = 0.0;
        self.t_w = 0.0;
        self.episode_return = 0.0;
        self.next_arrival = 0;
        self.schedule = self.draw_schedule(seed);
        Ok(self.observe_all())
    }

    fn draw_schedule(&self, seed: u64) -> Vec<ScheduledArrival> {
        let mut rng = RunRng::seed_from_u64(seed);
        let entries: Vec<usize> = self.net.entry_links().collect();
        let p = self.spec.spawn_rate * self.spec.sim_dt;
        let mut out = Vec::new();
        for t in 0..self.spec.episode_len as u64 {
            for &link in &entries {
                for _ in 0..self.net.lanes {
                    if rng.random::<f64>() < p {
                        let route = self.net.sample_route(link, self.spec.turn_prob, &mut rng);
                        out.push(ScheduledArrival {
                            time: t,
                            entry_link: link,
                            route,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn vehicle_params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn n_agents(&self) -> usize {
        self.net.n_nodes()
    }

    pub fn n_actions(&self) -> usize {
        N_PHASES
    }

    pub fn obs_dim(&self) -> usize {
        FEATURES_PER_LANE * 8 * self.net.lanes + N_PHASES
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn done(&self) -> bool {
        self.time >= self.spec.episode_len as u64
    }

    pub fn phases(&self) -> &[usize] {
        &self.phases
    }

    pub fn schedule(&self) -> &[ScheduledArrival] {
        &self.schedule
    }

    pub fn moving_time(&self) -> f64 {
        self.t_f
    }

    pub fn waiting_time(&self) -> f64 {
        self.t_w
    }

    pub fn episode_return(&self) -> f64 {
        self.episode_return
    }

    pub fn completed(&self) -> &[CompletedVehicle] {
        &self.completed
    }

    pub fn counts(&self) -> VehicleCounts {
        VehicleCounts {
            spawned: self.spawned,
            active: self.lanes.iter().map(VecDeque::len).sum(),
            completed: self.completed.len(),
            pending: self.pending.iter().map(VecDeque::len).sum(),
        }
    }

    pub fn set_signal_override(&mut self, o: Option<SignalOverride>) {
        self.signal_override = o;
    }

    /// Streams `t,agent,phase,queue_N,queue_E,queue_S,queue_W` rows (stopped
    /// vehicles per incoming approach, after each step).
    pub fn enable_trace(&mut self, sink: Box<dyn Write + Send>) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["t", "agent", "phase", "queue_N", "queue_E", "queue_S", "queue_W"])?;
        self.trace = Some(w);
        Ok(())
    }

    pub fn finish_trace(&mut self) -> std::io::Result<()> {
        match self.trace.take() {
            Some(mut w) => w.flush(),
            None => Ok(()),
        }
    }

    /// Vehicles lane by lane, each lane front-most first; yields
    /// `(lane slot, vehicle)`.
    pub fn vehicles(&self) -> impl Iterator<Item = (usize, &Vehicle)> {
        self.lanes
            .iter()
            .enumerate()
            .flat_map(|(slot, q)| q.iter().map(move |v| (slot, v)))
    }

    /// Places a vehicle directly on a link, bypassing the spawn schedule.
    /// The lane follows from the route like for scheduled vehicles.
    pub fn inject_vehicle(
        &mut self,
        link: usize,
        position: f64,
        speed: f64,
        route: Vec<Movement>,
    ) -> u64 {
        let lane = self.lane_on(link, &route, 0);
        let remaining = self.route_links(&route) as f64 * self.spec.link_length - position;
        let id = self.next_id;
        self.next_id += 1;
        let v = Vehicle {
            id,
            link,
            lane,
            position,
            speed: speed.clamp(0.0, self.params.max_speed),
            route,
            route_pos: 0,
            spawn_time: self.time,
            ideal_travel_time: remaining / self.params.max_speed,
            wait_time: 0.0,
            last_moved: u64::MAX,
        };
        let q = &mut self.lanes[self.net.lane_id(link, lane)];
        let at = q.iter().position(|o| o.position < position).unwrap_or(q.len());
        q.insert(at, v);
        self.spawned += 1;
        id
    }

    fn route_links(&self, route: &[Movement]) -> usize {
        route.len() + 1
    }

    fn lane_on(&self, link: usize, route: &[Movement], route_pos: usize) -> usize {
        match self.net.links[link].kind {
            LinkKind::Exit => self.net.lane_for(Movement::Through),
            _ => self.net.lane_for(route[route_pos]),
        }
    }

    fn is_green(&self, link: usize, movement: Movement) -> bool {
        let info = self.net.links[link];
        let node = info.to_node.expect("controlled links end at a node");
        match self.signal_override {
            Some(SignalOverride::AllRed) => false,
            Some(SignalOverride::AllGreen) => true,
            None => phase_permits(self.phases[node], info.heading, movement),
        }
    }


    /// `(usable gap for the safe-speed rule, leader speed, furthest admissible
    /// front position)` for a vehicle at `position` on `link` whose
    /// predecessor in the lane is `ahead`. The front vehicle of a lane stops
    /// at a red line; on green it follows the tail of its target lane.
    fn constraint(
        &self,
        link: usize,
        route: &[Movement],
        route_pos: usize,
        position: f64,
        ahead: Option<&Vehicle>,
    ) -> (f64, f64, f64) {
        let p = &self.params;
        let len = self.spec.link_length;
        let margin = p.min_gap + 0.5 * p.max_pos_acc * self.spec.sim_dt * self.spec.sim_dt;
        let follow = |rear: f64, v: f64| (rear - position - margin, v, rear);
        if let Some(l) = ahead {
            return follow(l.position - p.length, l.speed);
        }
        if self.net.links[link].kind == LinkKind::Exit {
            return (f64::INFINITY, 0.0, f64::INFINITY);
        }
        let m = route[route_pos];
        if !self.is_green(link, m) {
            return (len - position, 0.0, len);
        }
        let target = self.net.next_link(link, m).expect("controlled link");
        let lane = self.lane_on(target, route, route_pos + 1);
        match self.lanes[self.net.lane_id(target, lane)].back() {
            Some(t) => follow(len + t.position - p.length, t.speed),
            None => (f64::INFINITY, 0.0, f64::INFINITY),
        }
    }

    /// Moves every vehicle once, front-most first within each lane, and
    /// returns the moving and waiting vehicle-seconds of the step.
    fn advance(&mut self) -> (f64, f64) {
        let dt = self.spec.sim_dt;
        let len = self.spec.link_length;
        let now = self.time;
        let p = self.params;
        let (mut d_f, mut d_w) = (0.0, 0.0);
        for slot in 0..self.lanes.len() {
            let mut i = 0;
            while i < self.lanes[slot].len() {
                if self.lanes[slot][i].last_moved == now {
                    i += 1;
                    continue;
                }
                let (gap, leader_speed, cap) = {
                    let q = &self.lanes[slot];
                    let v = &q[i];
                    let ahead = if i > 0 { Some(&q[i - 1]) } else { None };
                    self.constraint(v.link, &v.route, v.route_pos, v.position, ahead)
                };
                let v = &mut self.lanes[slot][i];
                let mut speed = p
                    .max_speed
                    .min(v.speed + p.usual_pos_acc * dt)
                    .min(p.safe_speed(gap, leader_speed));
                speed = speed.max(v.speed - p.max_neg_acc * dt);
                speed = speed.min((cap - v.position) / dt).max(0.0);
                if speed < CREEP_SPEED {
                    speed = 0.0;
                }
                v.position = (v.position + speed * dt).min(cap);
                v.speed = speed;
                v.last_moved = now;
                if speed > STOPPED_SPEED {
                    d_f += dt;
                } else {
                    d_w += dt;
                    v.wait_time += dt;
                }
                let exit = self.net.links[v.link].kind == LinkKind::Exit;
                if i == 0 && ((exit && v.position >= len) || (!exit && v.position > len)) {
                    let v = self.lanes[slot].pop_front().expect("front vehicle");
                    self.cross(v);
                    continue;
                }
                i += 1;
            }
        }
        (d_f, d_w)
    }

    fn cross(&mut self, mut v: Vehicle) {
        if self.net.links[v.link].kind == LinkKind::Exit {
            self.completed.push(CompletedVehicle {
                id: v.id,
                spawn_time: v.spawn_time,
                finish_time: self.time + 1,
                wait_time: v.wait_time,
                ideal_travel_time: v.ideal_travel_time,
            });
            return;
        }
        let target = self
            .net
            .next_link(v.link, v.route[v.route_pos])
            .expect("controlled link");
        v.route_pos += 1;
        v.link = target;
        v.lane = self.lane_on(target, &v.route, v.route_pos);
        v.position -= self.spec.link_length;
        let slot = self.net.lane_id(target, v.lane);
        if let Some(tail) = self.lanes[slot].back() {
            v.position = v.position.min(tail.position - self.params.length);
        }
        self.lanes[slot].push_back(v);
    }

    /// Queues this step's arrivals and inserts waiting vehicles at the start
    /// of their entry lane once the lane tail has cleared `minGap`.
    fn spawn(&mut self) {
        let now = self.time;
        while let Some(a) = self.schedule.get(self.next_arrival) {
            if a.time + 1 > now {
                break;
            }
            let lane = self.lane_on(a.entry_link, &a.route, 0);
            let slot = self.net.lane_id(a.entry_link, lane);
            self.pending[slot].push_back(a.route.clone());
            self.next_arrival += 1;
        }
        let p = self.params;
        let dt = self.spec.sim_dt;
        for slot in 0..self.pending.len() {
            let Some(route) = self.pending[slot].front() else {
                continue;
            };
            let link = slot / self.net.lanes;
            let tail = self.lanes[slot].back();
            if tail.is_some_and(|t| t.position - p.length < p.min_gap) {
                continue;
            }
            let (gap, leader_speed, cap) = self.constraint(link, route, 0, 0.0, tail);
            let speed = p
                .max_speed
                .min(p.safe_speed(gap, leader_speed))
                .min(cap / dt)
                .max(0.0);
            let route = self.pending[slot].pop_front().expect("front route");
            let remaining = self.route_links(&route) as f64 * self.spec.link_length;
            let v = Vehicle {
                id: self.next_id,
                link,
                lane: slot % self.net.lanes,
                position: 0.0,
                speed,
                route,
                route_pos: 0,
                spawn_time: now,
                ideal_travel_time: remaining / p.max_speed,
                wait_time: 0.0,
                last_moved: u64::MAX,
            };
            self.next_id += 1;
            self.spawned += 1;
            self.lanes[slot].push_back(v);
        }
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome, EnvError> {
        if self.done() {
            return Err(EnvError::EpisodeOver);
        }
        if actions.len() != self.n_agents() {
            return Err(EnvError::ActionCount {
                expected: self.n_agents(),
                got: actions.len(),
            });
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= N_PHASES) {
            return Err(EnvError::InvalidAction(bad));
        }
        self.phases.copy_from_slice(actions);
        let (d_f, d_w) = self.advance();
        self.time += 1;
        self.spawn();
        let reward = compute_reward(d_f, d_w, self.spec.lambda_f, self.spec.lambda_w);
        self.t_f += d_f;
        self.t_w += d_w;
        self.episode_return += reward;
        if self.trace.is_some() {
            self.write_trace();
        }
        debug_assert_eq!(
            self.spawned,
            self.counts().active + self.completed.len(),
            "vehicle conservation"
        );
        Ok(StepOutcome {
            observations: self.observe_all(),
            reward,
            delta_t_f: d_f,
            delta_t_w: d_w,
            done: self.done(),
        })
    }

    fn write_trace(&mut self) {
        let rows: Vec<[String; 7]> = (0..self.n_agents())
            .map(|n| {
                let q = Heading::ALL.map(|h| {
                    let link = self.net.incoming[n][h.index()];
                    (0..self.net.lanes)
                        .map(|l| self.lane_stats(self.net.lane_id(link, l))[1] as usize)
                        .sum::<usize>()
                });
                [
                    self.time.to_string(),
                    n.to_string(),
                    self.phases[n].to_string(),
                    q[0].to_string(),
                    q[1].to_string(),
                    q[2].to_string(),
                    q[3].to_string(),
                ]
            })
            .collect();
        if let Some(w) = self.trace.as_mut() {
            for r in rows {
                if w.write_record(&r).is_err() {
                    self.trace = None;
                    break;
                }
            }
        }
    }

    /// `[count, stopped, mean speed / maxSpeed, head distance to link end / link length]`.
    fn lane_stats(&self, slot: usize) -> [f64; FEATURES_PER_LANE] {
        let q = &self.lanes[slot];
        let Some(head) = q.front() else {
            return [0.0; FEATURES_PER_LANE];
        };
        let n = q.len() as f64;
        let stopped = q.iter().filter(|v| v.speed <= STOPPED_SPEED).count() as f64;
        let mean_speed = q.iter().map(|v| v.speed).sum::<f64>() / n;
        let len = self.spec.link_length;
        [
            n,
            stopped,
            mean_speed / self.params.max_speed,
            ((len - head.position) / len).clamp(0.0, 1.0),
        ]
    }

    /// Incoming lanes (N, E, S, W headings, lanes in order), then outgoing
    /// lanes in the same order, then the current phase one-hot.
    pub fn observe(&self, agent: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.obs_dim());
        for table in [&self.net.incoming, &self.net.outgoing] {
            for link in table[agent] {
                for lane in 0..self.net.lanes {
                    out.extend(self.lane_stats(self.net.lane_id(link, lane)));
                }
            }
        }
        let mut one_hot = [0.0; N_PHASES];
        one_hot[self.phases[agent]] = 1.0;
        out.extend(one_hot);
        out
    }

    pub fn observe_all(&self) -> Vec<Vec<f64>> {
        (0..self.n_agents()).map(|a| self.observe(a)).collect()
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        EpisodeMetrics::from_completed(&self.completed, self.spec.sim_dt, self.episode_return)
    }
}

#[cfg(test)]
mod tests;
