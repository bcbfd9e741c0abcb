//! A deterministic 2D hand and ball world.
//!
//! The hand is a point driven by acceleration commands. It interacts with
//! the ball only by grabbing: while the two are within the contact radius
//! and the grab command exceeds 0.5, the ball's velocity blends toward the
//! hand's and gravity on the ball is suspended. The ball bounces on the
//! floor `y = 0` with restitution.
//!
//! Axis 1 is vertical.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::augment::PhysicalClamp;
use crate::error::{Error, Result};
use crate::trajectory::{ContactGroup, Frame, Group, GroupKind, State, StateSchema, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub gravity: f64,
    pub restitution: f64,
    pub max_accel: f64,
    pub contact_radius: f64,
    /// Fraction of the hand-ball velocity gap closed per substep while grabbed.
    pub grab_blend: f64,
    pub dt_sim: f64,
    pub substeps: usize,
    pub ball_radius: f64,
    /// Height above resting at which the ball still touches the floor.
    pub floor_margin: f64,
    /// Bounces slower than this come to rest.
    pub rest_speed: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            gravity: 9.8,
            restitution: 0.8,
            max_accel: 40.0,
            contact_radius: 0.12,
            grab_blend: 0.5,
            dt_sim: 1.0 / 120.0,
            substeps: 2,
            ball_radius: 0.1,
            floor_margin: 2e-3,
            rest_speed: 0.2,
        }
    }
}

impl WorldParams {
    pub fn dt_control(&self) -> f64 {
        self.dt_sim * self.substeps as f64
    }

    pub fn check(&self) -> Result<()> {
        let positive = [
            self.gravity,
            self.restitution,
            self.max_accel,
            self.contact_radius,
            self.grab_blend,
            self.dt_sim,
            self.ball_radius,
            self.floor_margin,
            self.rest_speed,
        ];
        if positive.iter().any(|x| !(*x > 0.0 && x.is_finite())) || self.substeps == 0 {
            return Err(Error::Invalid("world parameters must be positive".into()));
        }
        if self.restitution >= 1.0 || self.grab_blend > 1.0 {
            return Err(Error::Invalid(
                "restitution must be < 1 and grab blend <= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldState {
    pub hand_pos: [f64; 2],
    pub hand_vel: [f64; 2],
    pub ball_pos: [f64; 2],
    pub ball_vel: [f64; 2],
    pub ball_angle: f64,
    pub ball_angvel: f64,
    pub hand_ball: bool,
    pub ball_floor: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub accel: [f64; 2],
    pub grab: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        accel: [0.0, 0.0],
        grab: 0.0,
    };
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(x: f64) -> f64 {
    PI - (PI - x).rem_euclid(2.0 * PI)
}

pub fn hand_ball_contact(s: &WorldState, p: &WorldParams) -> bool {
    dist(s.hand_pos, s.ball_pos) <= p.contact_radius
}

/// Touching the floor, or rising from a bounce within the last control step.
pub fn ball_floor_contact(s: &WorldState, p: &WorldParams) -> bool {
    let height = s.ball_pos[1] - p.ball_radius;
    height <= p.floor_margin
        || (s.ball_vel[1] > 0.0 && height <= s.ball_vel[1] * p.dt_control() + p.floor_margin)
}

impl WorldState {
    /// Hand and ball at rest at the given positions.
    pub fn at_rest(hand_pos: [f64; 2], ball_pos: [f64; 2], p: &WorldParams) -> Self {
        WorldState {
            hand_pos,
            hand_vel: [0.0; 2],
            ball_pos,
            ball_vel: [0.0; 2],
            ball_angle: 0.0,
            ball_angvel: 0.0,
            hand_ball: false,
            ball_floor: false,
        }
        .with_contacts(p)
    }

    pub fn with_contacts(mut self, p: &WorldParams) -> Self {
        self.hand_ball = hand_ball_contact(&self, p);
        self.ball_floor = ball_floor_contact(&self, p);
        self
    }

    fn is_finite(&self) -> bool {
        self.hand_pos
            .iter()
            .chain(&self.hand_vel)
            .chain(&self.ball_pos)
            .chain(&self.ball_vel)
            .chain([&self.ball_angle, &self.ball_angvel])
            .all(|x| x.is_finite())
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * (self.ball_vel[0].powi(2) + self.ball_vel[1].powi(2))
    }
}

/// One simulation substep of semi-implicit Euler.
pub fn substep(s: &mut WorldState, accel: [f64; 2], grab: f64, p: &WorldParams) {
    let dt = p.dt_sim;
    let grabbed = grab > 0.5 && hand_ball_contact(s, p);

    for axis in 0..2 {
        s.hand_vel[axis] += accel[axis] * dt;
        s.hand_pos[axis] += s.hand_vel[axis] * dt;
    }
    if s.hand_pos[1] < 0.0 {
        s.hand_pos[1] = 0.0;
        s.hand_vel[1] = s.hand_vel[1].max(0.0);
    }

    if grabbed {
        for axis in 0..2 {
            s.ball_vel[axis] += p.grab_blend * (s.hand_vel[axis] - s.ball_vel[axis]);
        }
        s.ball_angvel -= p.grab_blend * s.ball_angvel;
    } else {
        s.ball_vel[1] -= p.gravity * dt;
    }
    for axis in 0..2 {
        s.ball_pos[axis] += s.ball_vel[axis] * dt;
    }
    if s.ball_pos[1] < p.ball_radius {
        s.ball_pos[1] = p.ball_radius;
        if s.ball_vel[1] < 0.0 {
            let up = -p.restitution * s.ball_vel[1];
            s.ball_vel[1] = if up < p.rest_speed { 0.0 } else { up };
        }
        s.ball_angvel = -s.ball_vel[0] / p.ball_radius;
    }
    s.ball_angle = wrap_angle(s.ball_angle + s.ball_angvel * dt);
}

/// Advances one control step. The acceleration is clamped to the maximum
/// norm and the grab command to [0, 1].
pub fn step(state: &WorldState, action: &Action, p: &WorldParams) -> Result<WorldState> {
    if !action.accel.iter().all(|x| x.is_finite()) || !action.grab.is_finite() {
        return Err(Error::NonFinite("world action".into()));
    }
    let norm = action.accel[0].hypot(action.accel[1]);
    let scale = if norm > p.max_accel {
        p.max_accel / norm
    } else {
        1.0
    };
    let accel = [action.accel[0] * scale, action.accel[1] * scale];
    let grab = action.grab.clamp(0.0, 1.0);
    let mut s = *state;
    for _ in 0..p.substeps {
        substep(&mut s, accel, grab, p);
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("world state".into()));
    }
    Ok(s.with_contacts(p))
}

pub const HAND_POS: usize = 0;
pub const HAND_VEL: usize = 1;
pub const BALL_POS: usize = 2;
pub const BALL_ROT: usize = 3;
pub const BALL_VEL: usize = 4;
pub const BALL_ANGVEL: usize = 5;
pub const RELATIVE: usize = 6;

/// Group weights of the imitation reward and perturbation half-widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySchemaParams {
    pub lambda_pos: f64,
    pub lambda_rot: f64,
    pub lambda_vel: f64,
    pub lambda_rotvel: f64,
    pub lambda_obj_pos: f64,
    pub lambda_obj_rot: f64,
    pub lambda_obj_vel: f64,
    pub lambda_obj_angvel: f64,
    pub lambda_rel: f64,
    pub lambda_contact: f64,
    pub epsilon: f64,
}

impl Default for ToySchemaParams {
    fn default() -> Self {
        ToySchemaParams {
            lambda_pos: 20.0,
            lambda_rot: 20.0,
            lambda_vel: 0.0,
            lambda_rotvel: 0.0,
            lambda_obj_pos: 1.0,
            lambda_obj_rot: 0.0,
            lambda_obj_vel: 0.0,
            lambda_obj_angvel: 0.0,
            lambda_rel: 20.0,
            lambda_contact: 5.0,
            epsilon: 0.1,
        }
    }
}

pub fn toy_schema(sp: &ToySchemaParams) -> StateSchema {
    let g = |name: &str, kind, dim, lambda| Group {
        name: name.into(),
        kind,
        dim,
        lambda,
        epsilon: sp.epsilon,
    };
    StateSchema::new(
        "hand-ball-2d",
        vec![
            g("hand_pos", GroupKind::RobotPos, 2, sp.lambda_pos),
            g("hand_vel", GroupKind::RobotVel, 2, sp.lambda_vel),
            g("ball_pos", GroupKind::ObjPos, 2, sp.lambda_obj_pos),
            g("ball_rot", GroupKind::ObjRot, 1, sp.lambda_obj_rot),
            g("ball_vel", GroupKind::ObjPosVel, 2, sp.lambda_obj_vel),
            g("ball_angvel", GroupKind::ObjRotVel, 1, sp.lambda_obj_angvel),
            g("rel", GroupKind::Relative, 2, sp.lambda_rel),
        ],
        Some(ContactGroup {
            name: "contact".into(),
            lambda: vec![sp.lambda_contact; 2],
        }),
        Some(1),
    )
    .expect("toy schema is well formed")
}

fn check_toy_schema(schema: &StateSchema) -> Result<()> {
    let dims: Vec<usize> = schema.groups.iter().map(|g| g.dim).collect();
    if dims != [2, 2, 2, 1, 2, 1, 2] || schema.contact_pairs() != 2 {
        return Err(Error::Schema(format!(
            "schema `{}` does not describe the hand-ball world",
            schema.name
        )));
    }
    Ok(())
}

pub fn to_state(s: &WorldState) -> State {
    State {
        channels: vec![
            s.hand_pos.to_vec(),
            s.hand_vel.to_vec(),
            s.ball_pos.to_vec(),
            vec![s.ball_angle],
            s.ball_vel.to_vec(),
            vec![s.ball_angvel],
            vec![s.ball_pos[0] - s.hand_pos[0], s.ball_pos[1] - s.hand_pos[1]],
        ],
        contacts: vec![s.hand_ball, s.ball_floor],
    }
}

/// World state from schema channels. The relative channel is ignored,
/// positions are projected above the floor and contacts are recomputed.
pub fn from_state(schema: &StateSchema, state: &State, p: &WorldParams) -> Result<WorldState> {
    check_toy_schema(schema)?;
    if let Some(v) = crate::trajectory::check_state(schema, state) {
        return Err(Error::Schema(v.to_string()));
    }
    let c = &state.channels;
    let two = |g: usize| [c[g][0], c[g][1]];
    let mut s = WorldState {
        hand_pos: two(HAND_POS),
        hand_vel: two(HAND_VEL),
        ball_pos: two(BALL_POS),
        ball_vel: two(BALL_VEL),
        ball_angle: wrap_angle(c[BALL_ROT][0]),
        ball_angvel: c[BALL_ANGVEL][0],
        hand_ball: false,
        ball_floor: false,
    };
    s.hand_pos[1] = s.hand_pos[1].max(0.0);
    s.ball_pos[1] = s.ball_pos[1].max(p.ball_radius);
    Ok(s.with_contacts(p))
}

/// Keeps perturbed states above the floor.
#[derive(Debug, Clone, Copy)]
pub struct ToyClamp {
    pub ball_radius: f64,
}

impl PhysicalClamp for ToyClamp {
    fn clamp(&self, _: &StateSchema, state: &mut State) {
        let hand = &mut state.channels[HAND_POS][1];
        *hand = hand.max(0.0);
        let ball = &mut state.channels[BALL_POS][1];
        *ball = ball.max(self.ball_radius);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Skill {
    Dribble,
    Carry,
    Toss,
}

impl Skill {
    pub const ALL: [Skill; 3] = [Skill::Dribble, Skill::Carry, Skill::Toss];

    pub fn as_str(self) -> &'static str {
        match self {
            Skill::Dribble => "dribble",
            Skill::Carry => "carry",
            Skill::Toss => "toss",
        }
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Skill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Skill::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownSkill(s.to_string()))
    }
}

/// Constants of the scripted controllers.
const DRIBBLE_APEX: f64 = 0.8;
const DRIBBLE_CATCH: f64 = 1.0;
const DRIBBLE_PUSH: f64 = 5.0;
const CARRY_SPEED: f64 = 0.5;
const CARRY_HEIGHT: f64 = 0.5;
const TOSS_VEL: [f64; 2] = [1.5, 3.0];
const TOSS_RELEASE: f64 = 2.5;

fn toward_velocity(target: f64, v: f64) -> f64 {
    40.0 * (target - v)
}

fn chase(s: &WorldState) -> [f64; 2] {
    [0, 1].map(|a| 150.0 * (s.ball_pos[a] - s.hand_pos[a]) + 25.0 * (s.ball_vel[a] - s.hand_vel[a]))
}

/// Closed-loop scripted controller. Depends on the current state only, so it
/// can take over from any frame of its own demonstration.
pub fn scripted_action(skill: Skill, s: &WorldState, p: &WorldParams) -> Action {
    let near = hand_ball_contact(s, p);
    match skill {
        Skill::Dribble => {
            let ax =
                150.0 * (s.ball_pos[0] - s.hand_pos[0]) + 25.0 * (s.ball_vel[0] - s.hand_vel[0]);
            // Energy per unit mass after which the bounce returns the ball to the apex.
            let height = s.ball_pos[1] - p.ball_radius;
            let energy = 0.5 * s.ball_vel[1].powi(2) + p.gravity * height;
            let target_energy = p.gravity * (DRIBBLE_APEX - p.ball_radius) / p.restitution.powi(2);
            let pushing = s.ball_vel[1] < 0.0 && energy >= target_energy;
            if near && !pushing && s.ball_vel[1] < DRIBBLE_CATCH {
                Action {
                    accel: [ax, toward_velocity(-DRIBBLE_PUSH, s.hand_vel[1])],
                    grab: 1.0,
                }
            } else {
                // Meet a rising ball just above its apex.
                let target = if s.ball_vel[1] > 0.0 {
                    let apex = s.ball_pos[1] + s.ball_vel[1].powi(2) / (2.0 * p.gravity);
                    (apex + 0.05).clamp(0.3, DRIBBLE_APEX + 0.05)
                } else {
                    DRIBBLE_APEX + 0.05
                };
                let ay = 300.0 * (target - s.hand_pos[1]) - 35.0 * s.hand_vel[1];
                Action {
                    accel: [ax, ay],
                    grab: 0.0,
                }
            }
        }
        Skill::Carry => {
            if near {
                let ay = 150.0 * (CARRY_HEIGHT - s.hand_pos[1]) - 25.0 * s.hand_vel[1];
                Action {
                    accel: [toward_velocity(CARRY_SPEED, s.hand_vel[0]), ay],
                    grab: 1.0,
                }
            } else {
                Action {
                    accel: chase(s),
                    grab: 1.0,
                }
            }
        }
        Skill::Toss => {
            // Push while the hand leads the ball; once braking starts it never regrabs.
            let pushing = s.ball_vel[1] <= TOSS_RELEASE && s.hand_vel[1] >= s.ball_vel[1] - 0.2;
            let brake = [-40.0 * s.hand_vel[0], -40.0 * s.hand_vel[1]];
            if near && pushing {
                Action {
                    accel: [0, 1].map(|a| toward_velocity(TOSS_VEL[a], s.hand_vel[a])),
                    grab: 1.0,
                }
            } else if near || (s.ball_vel[1] > 0.0 && !s.ball_floor) {
                Action {
                    accel: brake,
                    grab: 0.0,
                }
            } else {
                Action {
                    accel: chase(s),
                    grab: 1.0,
                }
            }
        }
    }
}

fn initial_state(skill: Skill, p: &WorldParams) -> WorldState {
    match skill {
        Skill::Dribble => WorldState::at_rest([0.0, DRIBBLE_APEX + 0.05], [0.0, DRIBBLE_APEX], p),
        Skill::Carry | Skill::Toss => {
            WorldState::at_rest([0.0, CARRY_HEIGHT], [0.0, CARRY_HEIGHT - 0.05], p)
        }
    }
}

/// A simulated demonstration with the actions that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub trajectory: Trajectory,
    pub states: Vec<WorldState>,
    pub actions: Vec<Action>,
}

fn rollout_demo(
    skill: &str,
    start: WorldState,
    p: &WorldParams,
    mut policy: impl FnMut(usize, &WorldState) -> Action,
    frames: usize,
) -> Result<Demo> {
    let mut states = vec![start];
    let mut actions = Vec::with_capacity(frames - 1);
    for t in 0..frames - 1 {
        let a = policy(t, &states[t]);
        states.push(step(&states[t], &a, p)?);
        actions.push(a);
    }
    Ok(Demo {
        trajectory: Trajectory {
            skill: skill.to_string(),
            dt: p.dt_control(),
            frames: states.iter().map(|s| Frame::Real(to_state(s))).collect(),
        },
        states,
        actions,
    })
}

/// Rolls the scripted controller for `duration` seconds (frames at the
/// control rate, both endpoints included).
pub fn generate_demo(skill: Skill, duration: f64, p: &WorldParams) -> Result<Demo> {
    if !(1.0..=3.0).contains(&duration) {
        return Err(Error::Invalid(format!(
            "demo duration {duration} s outside [1, 3]"
        )));
    }
    p.check()?;
    let frames = (duration / p.dt_control()).round() as usize + 1;
    rollout_demo(
        skill.as_str(),
        initial_state(skill, p),
        p,
        |_, s| scripted_action(skill, s, p),
        frames,
    )
}

/// Carry, stop, hold for `hold` frames, then toss. The toss always starts
/// after the same hold duration, so the instant of the transition is only
/// visible in the history.
pub fn carry_then_toss(carry: usize, hold: usize, toss: usize, p: &WorldParams) -> Result<Demo> {
    let mut start = initial_state(Skill::Carry, p);
    start.hand_vel = [CARRY_SPEED, 0.0];
    start.ball_vel = [CARRY_SPEED, 0.0];
    let stop = -CARRY_SPEED / p.dt_control();
    let frames = carry + 1 + hold + toss + 1;
    rollout_demo(
        "carry-toss",
        start,
        p,
        |t, s| {
            if t < carry {
                Action {
                    accel: [0.0, 0.0],
                    grab: 1.0,
                }
            } else if t == carry {
                Action {
                    accel: [stop, 0.0],
                    grab: 1.0,
                }
            } else if t <= carry + hold {
                Action {
                    accel: [0.0, 0.0],
                    grab: 1.0,
                }
            } else {
                scripted_action(Skill::Toss, s, p)
            }
        },
        frames,
    )
}

/// Replays recorded actions from the demo's first state.
pub fn replay(demo: &Demo, p: &WorldParams) -> Result<Vec<WorldState>> {
    let mut out = vec![demo.states[0]];
    for a in &demo.actions {
        let next = step(out.last().unwrap(), a, p)?;
        out.push(next);
    }
    Ok(out)
}

/// Uniform noise in [-σ, σ] on the ball position of every real frame, and
/// one contiguous block of `⌈drop_fraction · T⌉` interior frames masked.
pub fn corrupt(
    schema: &StateSchema,
    traj: &Trajectory,
    sigma: f64,
    drop_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    check_toy_schema(schema)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!(
            "noise level {sigma} must be nonnegative"
        )));
    }
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Invalid(format!(
            "drop fraction {drop_fraction} outside [0, 1)"
        )));
    }
    let len = traj.frames.len();
    let dropped = (drop_fraction * len as f64 - 1e-9).ceil().max(0.0) as usize;
    if dropped > 0 && dropped + 2 > len {
        return Err(Error::Invalid(format!(
            "dropping {dropped} of {len} frames would mask an endpoint"
        )));
    }
    let mut out = traj.clone();
    for frame in &mut out.frames {
        if let Frame::Real(s) = frame {
            for x in &mut s.channels[BALL_POS] {
                let u: f64 = rng.random();
                *x += sigma * (2.0 * u - 1.0);
            }
        }
    }
    if dropped > 0 {
        let first = rng.random_range(1..=len - 1 - dropped);
        for f in &mut out.frames[first..first + dropped] {
            *f = Frame::Masked;
        }
    }
    Ok(out)
}

/// Thresholds of the success predicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessParams {
    /// Every window of this many frames needs a floor and a hand contact onset.
    pub dribble_window: usize,
    pub carry_contact_fraction: f64,
    pub carry_distance: f64,
    pub toss_distance: f64,
    pub toss_rise: f64,
}

impl Default for SuccessParams {
    fn default() -> Self {
        SuccessParams {
            dribble_window: 60,
            carry_contact_fraction: 0.9,
            carry_distance: 1.0,
            toss_distance: 0.3,
            toss_rise: 0.1,
        }
    }
}

fn onsets(flags: impl Iterator<Item = bool>) -> Vec<usize> {
    let mut prev = false;
    let mut out = Vec::new();
    for (i, f) in flags.enumerate() {
        if f && !prev {
            out.push(i);
        }
        prev = f;
    }
    out
}

fn dribble_success(rollout: &[WorldState], window: usize) -> bool {
    if rollout.len() < window {
        return false;
    }
    let covered = |events: &[usize]| {
        // Largest gap between consecutive onsets, counting both rollout ends.
        let mut last: isize = -1;
        for &e in events {
            if e as isize - last > window as isize {
                return false;
            }
            last = e as isize;
        }
        (rollout.len() as isize - 1) - last < window as isize
    };
    covered(&onsets(rollout.iter().map(|s| s.ball_floor)))
        && covered(&onsets(rollout.iter().map(|s| s.hand_ball)))
}

fn carry_success(rollout: &[WorldState], sp: &SuccessParams) -> bool {
    let held = rollout.iter().filter(|s| s.hand_ball).count() as f64 / rollout.len() as f64;
    let moved = rollout.last().unwrap().hand_pos[0] - rollout[0].hand_pos[0];
    held >= sp.carry_contact_fraction && moved >= sp.carry_distance
}

fn toss_success(rollout: &[WorldState], sp: &SuccessParams) -> bool {
    let free = |s: &WorldState| !s.hand_ball && !s.ball_floor;
    let mut i = 0;
    while i < rollout.len() {
        if !free(&rollout[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < rollout.len() && free(&rollout[i]) {
            i += 1;
        }
        // Flight lasts until the next contact frame, or the rollout end.
        let end = i.min(rollout.len() - 1);
        let s0 = &rollout[start];
        let peak = rollout[start..=end]
            .iter()
            .map(|s| s.ball_pos[1])
            .fold(f64::MIN, f64::max);
        let travel = rollout[end].ball_pos[0] - s0.ball_pos[0];
        if s0.ball_vel[1] > 0.0
            && peak >= s0.ball_pos[1] + sp.toss_rise
            && travel >= sp.toss_distance
        {
            return true;
        }
    }
    false
}

/// Whether a control-rate rollout performs `skill`.
pub fn is_success(skill: Skill, rollout: &[WorldState], sp: &SuccessParams) -> bool {
    if rollout.is_empty() {
        return false;
    }
    match skill {
        Skill::Dribble => dribble_success(rollout, sp.dribble_window),
        Skill::Carry => carry_success(rollout, sp),
        Skill::Toss => toss_success(rollout, sp),
    }
}

/// Maps a policy output to a world action: the first two components set a
/// target hand velocity tracked with a proportional gain, the third shifts
/// the grab command around its 0.5 threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actuator {
    pub velocity_scale: f64,
    pub gain: f64,
}

impl Default for Actuator {
    fn default() -> Self {
        Actuator {
            velocity_scale: 10.0,
            gain: 20.0,
        }
    }
}

impl Actuator {
    pub const DIM: usize = 3;

    pub fn apply(&self, s: &WorldState, u: &[f64]) -> Action {
        Action {
            accel: [0, 1].map(|a| self.gain * (self.velocity_scale * u[a] - s.hand_vel[a])),
            grab: 0.5 + u[2],
        }
    }

    /// Output that reproduces `action` as closely as the actuator allows.
    pub fn invert(&self, s: &WorldState, action: &Action) -> [f64; 3] {
        let v = [0, 1].map(|a| (action.accel[a] / self.gain + s.hand_vel[a]) / self.velocity_scale);
        [v[0], v[1], (action.grab - 0.5).clamp(-0.5, 0.5)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{reward_sm, RewardWeights};
    use crate::trajectory::validate_trajectory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> WorldParams {
        WorldParams::default()
    }

    #[test]
    fn resting_ball_is_an_equilibrium() {
        let p = params();
        let s = WorldState::at_rest([0.5, 0.8], [0.0, p.ball_radius], &p);
        assert!(s.ball_floor && !s.hand_ball);
        let mut t = s;
        for _ in 0..100 {
            t = step(&t, &Action::ZERO, &p).unwrap();
        }
        assert_eq!(t, s);
    }

    #[test]
    fn free_fall_matches_discrete_integration() {
        let p = params();
        let s0 = WorldState::at_rest([2.0, 1.5], [0.0, 1.0], &p);
        let mut s = s0;
        let h = p.dt_sim;
        for k in 1..=12 {
            s = step(&s, &Action::ZERO, &p).unwrap();
            let n = (2 * k) as f64;
            // Semi-implicit Euler: v_n = -g n h, y_n = y_0 - g h² n(n+1)/2.
            assert!((s.ball_vel[1] + p.gravity * n * h).abs() < 1e-9);
            assert!((s.ball_pos[1] - (1.0 - p.gravity * h * h * n * (n + 1.0) / 2.0)).abs() < 1e-9);
            assert!((s.ball_vel[1] + p.gravity * k as f64 * p.dt_control()).abs() < 1e-9);
        }
    }

    #[test]
    fn bounce_scales_speed_by_restitution() {
        let p = params();
        let mut s = WorldState::at_rest([2.0, 1.5], [0.0, 1.0], &p);
        loop {
            let mut next = s;
            let pre = s.ball_vel[1] - p.gravity * p.dt_sim;
            substep(&mut next, [0.0, 0.0], 0.0, &p);
            if next.ball_vel[1] > 0.0 {
                assert!((next.ball_vel[1] - 0.8 * pre.abs()).abs() < 1e-9);
                assert!(
                    next.kinetic_energy() <= s.kinetic_energy() + p.gravity * p.dt_sim * pre.abs()
                );
                break;
            }
            s = next;
        }
    }

    #[test]
    fn bounces_never_gain_energy_or_penetrate() {
        let p = params();
        let mut s = WorldState::at_rest([2.0, 1.5], [0.0, 1.2], &p);
        let mut peaks = Vec::new();
        let mut prev_vy = 0.0;
        for _ in 0..600 {
            s = step(&s, &Action::ZERO, &p).unwrap();
            assert!(s.ball_pos[1] >= p.ball_radius - 1e-9);
            if prev_vy > 0.0 && s.ball_vel[1] <= 0.0 {
                peaks.push(s.ball_pos[1]);
            }
            prev_vy = s.ball_vel[1];
        }
        assert!(peaks.len() >= 3);
        assert!(peaks.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn step_is_pure_and_rejects_non_finite_actions() {
        let p = params();
        let s = WorldState::at_rest([0.0, 0.5], [0.0, 0.45], &p);
        let a = Action {
            accel: [3.0, -7.0],
            grab: 0.9,
        };
        assert_eq!(step(&s, &a, &p).unwrap(), step(&s, &a, &p).unwrap());
        let bad = Action {
            accel: [f64::NAN, 0.0],
            grab: 0.0,
        };
        assert!(step(&s, &bad, &p).is_err());
        let bad = Action {
            accel: [0.0, 0.0],
            grab: f64::INFINITY,
        };
        assert!(step(&s, &bad, &p).is_err());
    }

    #[test]
    fn acceleration_is_clamped() {
        let p = params();
        let s = WorldState::at_rest([0.0, 0.5], [3.0, 0.1], &p);
        let t = step(
            &s,
            &Action {
                accel: [3000.0, 4000.0],
                grab: 0.0,
            },
            &p,
        )
        .unwrap();
        let speed = t.hand_vel[0].hypot(t.hand_vel[1]);
        assert!((speed - p.max_accel * p.dt_control()).abs() < 1e-12);
    }

    #[test]
    fn grabbed_ball_follows_the_hand() {
        let p = params();
        let mut s = WorldState::at_rest([0.0, 0.5], [0.0, 0.45], &p);
        s.hand_vel = [1.0, 0.0];
        let t = step(
            &s,
            &Action {
                accel: [0.0, 0.0],
                grab: 1.0,
            },
            &p,
        )
        .unwrap();
        assert!((t.ball_vel[0] - 0.75).abs() < 1e-12);
        assert_eq!(t.ball_vel[1], 0.0);
        let u = step(
            &s,
            &Action {
                accel: [0.0, 0.0],
                grab: 0.4,
            },
            &p,
        )
        .unwrap();
        assert_eq!(u.ball_vel[0], 0.0);
        assert!(u.ball_vel[1] < 0.0);
    }

    #[test]
    fn angle_wraps_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.25) - 0.25).abs() < 1e-15);
    }

    fn count_onsets(flags: impl Iterator<Item = bool>) -> usize {
        onsets(flags).len()
    }

    #[test]
    fn dribble_demo_bounces() {
        let p = params();
        let d = generate_demo(Skill::Dribble, 1.5, &p).unwrap();
        assert_eq!(d.trajectory.frames.len(), 91);
        assert!(count_onsets(d.states.iter().map(|s| s.ball_floor)) >= 2);
    }

    #[test]
    fn carry_demo_holds_the_ball() {
        let p = params();
        let d = generate_demo(Skill::Carry, 1.5, &p).unwrap();
        let onset = d.states.iter().position(|s| s.hand_ball).unwrap();
        assert!(d.states[onset..].iter().all(|s| s.hand_ball));
        assert!(d.states.last().unwrap().hand_pos[0] > 0.5);
    }

    #[test]
    fn toss_demo_throws_forward() {
        let p = params();
        let d = generate_demo(Skill::Toss, 1.5, &p).unwrap();
        assert!(is_success(
            Skill::Toss,
            &d.states,
            &SuccessParams::default()
        ));
    }

    #[test]
    fn demos_replay_validate_and_self_match() {
        let p = params();
        let schema = toy_schema(&ToySchemaParams::default());
        let w = RewardWeights::multiplicative(&schema);
        for skill in Skill::ALL {
            for duration in [1.0, 1.5, 3.0] {
                let d = generate_demo(skill, duration, &p).unwrap();
                let replayed = replay(&d, &p).unwrap();
                for (a, b) in replayed.iter().zip(&d.states) {
                    let (x, y) = (to_state(a), to_state(b));
                    for (u, v) in x.channels.iter().flatten().zip(y.channels.iter().flatten()) {
                        assert!((u - v).abs() <= 1e-9);
                    }
                    assert_eq!(x.contacts, y.contacts);
                }
                assert!(validate_trajectory(&schema, skill.as_str(), 0, &d.trajectory).is_empty());
                for f in &d.trajectory.frames {
                    let r = reward_sm(&schema, f.as_real().unwrap(), f, &w).unwrap();
                    assert_eq!(r.value(), Some(1.0));
                }
                for s in &d.states {
                    assert_eq!(from_state(&schema, &to_state(s), &p).unwrap(), *s);
                }
            }
        }
        assert!(generate_demo(Skill::Toss, 0.5, &p).is_err());
        assert!("juggle".parse::<Skill>().is_err());
    }

    #[test]
    fn scripted_controllers_succeed_from_every_demo_frame() {
        let p = params();
        let sp = SuccessParams::default();
        for skill in Skill::ALL {
            let d = generate_demo(skill, 1.5, &p).unwrap();
            for (k, start) in d.states.iter().enumerate() {
                let mut s = *start;
                let mut roll = vec![s];
                for _ in 0..300 {
                    s = step(&s, &scripted_action(skill, &s, &p), &p).unwrap();
                    roll.push(s);
                }
                assert!(is_success(skill, &roll, &sp), "{skill} from frame {k}");
            }
        }
    }

    #[test]
    fn scripted_toss_takes_over_from_carry() {
        let p = params();
        let d = generate_demo(Skill::Carry, 1.5, &p).unwrap();
        for start in &d.states {
            let mut s = *start;
            let mut roll = vec![s];
            for _ in 0..300 {
                s = step(&s, &scripted_action(Skill::Toss, &s, &p), &p).unwrap();
                roll.push(s);
            }
            assert!(is_success(Skill::Toss, &roll, &SuccessParams::default()));
        }
    }

    #[test]
    fn idle_and_dropped_rollouts_fail() {
        let p = params();
        let sp = SuccessParams::default();
        let d = generate_demo(Skill::Dribble, 1.5, &p).unwrap();
        let mut s = d.states[0];
        let mut roll = vec![s];
        for _ in 0..300 {
            s = step(&s, &Action::ZERO, &p).unwrap();
            roll.push(s);
        }
        assert!(!is_success(Skill::Dribble, &roll, &sp));

        // Carry that lets go half way.
        let c = generate_demo(Skill::Carry, 1.5, &p).unwrap();
        let mut s = c.states[0];
        let mut roll = vec![s];
        for t in 0..300 {
            let mut a = scripted_action(Skill::Carry, &s, &p);
            if t >= 150 {
                a.grab = 0.0;
            }
            s = step(&s, &a, &p).unwrap();
            roll.push(s);
        }
        assert!(!is_success(Skill::Carry, &roll, &sp));
    }

    #[test]
    fn corruption_cases() {
        let p = params();
        let schema = toy_schema(&ToySchemaParams::default());
        let d = generate_demo(Skill::Dribble, 1.5, &p).unwrap();
        let traj = &d.trajectory;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(&corrupt(&schema, traj, 0.0, 0.0, &mut rng).unwrap(), traj);

        let noisy = corrupt(&schema, traj, 0.02, 0.0, &mut rng).unwrap();
        let mut changed = false;
        for (a, b) in noisy.frames.iter().zip(&traj.frames) {
            let (a, b) = (a.as_real().unwrap(), b.as_real().unwrap());
            for g in 0..a.channels.len() {
                for (x, y) in a.channels[g].iter().zip(&b.channels[g]) {
                    if g == BALL_POS {
                        assert!((x - y).abs() <= 0.02);
                        changed |= x != y;
                    } else {
                        assert_eq!(x, y);
                    }
                }
            }
        }
        assert!(changed);

        let t90 = Trajectory {
            frames: traj.frames[..90].to_vec(),
            ..traj.clone()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dropped = corrupt(&schema, &t90, 0.0, 0.1, &mut rng).unwrap();
            let masked: Vec<usize> = (0..90).filter(|&i| dropped.frames[i].is_masked()).collect();
            assert_eq!(masked.len(), 9);
            assert_eq!(masked[8] - masked[0], 8);
            assert!(masked[0] >= 1 && masked[8] <= 88);
        }
        let a = corrupt(&schema, traj, 0.02, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = corrupt(&schema, traj, 0.02, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let short = Trajectory {
            frames: traj.frames[..3].to_vec(),
            ..traj.clone()
        };
        assert!(corrupt(&schema, &short, 0.0, 0.9, &mut rng).is_err());
        assert!(corrupt(&schema, traj, -1.0, 0.0, &mut rng).is_err());
        assert!(corrupt(&schema, traj, 0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn clamp_keeps_bodies_above_the_floor() {
        let schema = toy_schema(&ToySchemaParams::default());
        let p = params();
        let mut s = to_state(&WorldState::at_rest([0.0, 0.02], [0.1, 0.1], &p));
        s.channels[HAND_POS][1] = -0.05;
        s.channels[BALL_POS][1] = 0.03;
        ToyClamp {
            ball_radius: p.ball_radius,
        }
        .clamp(&schema, &mut s);
        assert_eq!(s.channels[HAND_POS][1], 0.0);
        assert_eq!(s.channels[BALL_POS][1], p.ball_radius);
    }

    #[test]
    fn actuator_inverts_unclamped_actions() {
        let p = params();
        let act = Actuator::default();
        let mut s = WorldState::at_rest([0.0, 0.5], [0.0, 0.45], &p);
        s.hand_vel = [0.3, -0.2];
        let a = Action {
            accel: [5.0, -3.0],
            grab: 0.8,
        };
        let u = act.invert(&s, &a);
        let back = act.apply(&s, &u);
        assert!((back.accel[0] - 5.0).abs() < 1e-12 && (back.accel[1] + 3.0).abs() < 1e-12);
        assert!((back.grab - 0.8).abs() < 1e-12);
    }
}
