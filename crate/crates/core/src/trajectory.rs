//! Schema-driven demonstration data: channel groups, frames, trajectories
//! and datasets.
//!
//! A [`StateSchema`] names every channel group of a state together with its
//! kind, dimension, reward weight and neighborhood half-width. Frames store
//! one vector per non-contact group (in schema order) plus the contact flags,
//! so every formula downstream is independent of the embodiment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Number of spatial coordinates per point in positional groups.
pub const SPATIAL_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKind {
    RobotPos,
    RobotVel,
    RobotRot,
    RobotRotVel,
    ObjPos,
    ObjRot,
    ObjPosVel,
    ObjRotVel,
    Relative,
    Contact,
}

impl GroupKind {
    pub const ALL: [GroupKind; 10] = [
        GroupKind::RobotPos,
        GroupKind::RobotVel,
        GroupKind::RobotRot,
        GroupKind::RobotRotVel,
        GroupKind::ObjPos,
        GroupKind::ObjRot,
        GroupKind::ObjPosVel,
        GroupKind::ObjRotVel,
        GroupKind::Relative,
        GroupKind::Contact,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::RobotPos => "robot-pos",
            GroupKind::RobotVel => "robot-vel",
            GroupKind::RobotRot => "robot-rot",
            GroupKind::RobotRotVel => "robot-rotvel",
            GroupKind::ObjPos => "obj-pos",
            GroupKind::ObjRot => "obj-rot",
            GroupKind::ObjPosVel => "obj-posvel",
            GroupKind::ObjRotVel => "obj-rotvel",
            GroupKind::Relative => "relative",
            GroupKind::Contact => "contact",
        }
    }

    /// Groups that hold absolute positions and move under a global translation.
    pub fn is_positional(self) -> bool {
        matches!(self, GroupKind::RobotPos | GroupKind::ObjPos)
    }

    pub fn is_robot(self) -> bool {
        matches!(
            self,
            GroupKind::RobotPos
                | GroupKind::RobotVel
                | GroupKind::RobotRot
                | GroupKind::RobotRotVel
        )
    }

    pub fn is_object(self) -> bool {
        matches!(
            self,
            GroupKind::ObjPos | GroupKind::ObjRot | GroupKind::ObjPosVel | GroupKind::ObjRotVel
        )
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown group kind `{s}`")))
    }
}

/// One named channel group of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub name: String,
    pub kind: GroupKind,
    pub dim: usize,
    /// Reward weight λ (unused for the contact group, see `contact_lambda`).
    pub lambda: f64,
    /// Neighborhood half-width ε, in the group's units.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactGroup {
    pub name: String,
    /// Per-pair weights λ^cg; the length is the number of contact pairs J.
    pub lambda: Vec<f64>,
}

/// Declares the channel layout of every frame in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSchema {
    pub name: String,
    /// Non-contact groups in storage order.
    pub groups: Vec<Group>,
    pub contact: Option<ContactGroup>,
    /// Vertical axis of positional points. Translations used for alignment
    /// and local observations leave this axis of the robot root untouched.
    pub up_axis: Option<usize>,
}

impl StateSchema {
    /// Builds a schema and checks its invariants.
    pub fn new(
        name: impl Into<String>,
        groups: Vec<Group>,
        contact: Option<ContactGroup>,
        up_axis: Option<usize>,
    ) -> Result<Self> {
        let schema = StateSchema {
            name: name.into(),
            groups,
            contact,
            up_axis,
        };
        schema.check()?;
        Ok(schema)
    }

    fn check(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.groups {
            if g.kind == GroupKind::Contact {
                return Err(Error::Schema(format!(
                    "group `{}`: contact groups are declared separately",
                    g.name
                )));
            }
            if g.dim == 0 {
                return Err(Error::Schema(format!("group `{}` has dim 0", g.name)));
            }
            if g.kind.is_positional() && g.dim % SPATIAL_DIM != 0 {
                return Err(Error::Schema(format!(
                    "positional group `{}` dim {} is not a multiple of {SPATIAL_DIM}",
                    g.name, g.dim
                )));
            }
            if !(g.lambda >= 0.0 && g.lambda.is_finite()) {
                return Err(Error::Schema(format!(
                    "group `{}` has invalid lambda",
                    g.name
                )));
            }
            if !(g.epsilon >= 0.0 && g.epsilon.is_finite()) {
                return Err(Error::Schema(format!(
                    "group `{}` has invalid epsilon",
                    g.name
                )));
            }
            if !seen.insert(g.name.as_str()) {
                return Err(Error::Schema(format!("duplicate group `{}`", g.name)));
            }
        }
        if let Some(c) = &self.contact {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate group `{}`", c.name)));
            }
            if c.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::Schema("contact lambda must be nonnegative".into()));
            }
        }
        if let Some(axis) = self.up_axis {
            if axis >= SPATIAL_DIM {
                return Err(Error::Schema(format!("up axis {axis} out of range")));
            }
        }
        if !self.groups.iter().any(|g| g.kind == GroupKind::RobotPos) {
            return Err(Error::Schema(
                "schema needs a robot-pos group for the root".into(),
            ));
        }
        Ok(())
    }

    /// Number of contact pairs J.
    pub fn contact_pairs(&self) -> usize {
        self.contact.as_ref().map_or(0, |c| c.lambda.len())
    }

    pub fn contact_lambda(&self) -> &[f64] {
        self.contact.as_ref().map_or(&[], |c| c.lambda.as_slice())
    }

    /// Total number of real-valued channels (contacts excluded).
    pub fn channel_dim(&self) -> usize {
        self.groups.iter().map(|g| g.dim).sum()
    }

    /// Length of a local observation vector.
    pub fn observation_dim(&self) -> usize {
        self.channel_dim() + self.contact_pairs()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Index of the group that holds the robot root (its first point).
    pub fn root_group(&self) -> usize {
        self.groups
            .iter()
            .position(|g| g.kind == GroupKind::RobotPos)
            .expect("checked at construction")
    }

    pub fn root(&self, state: &State) -> [f64; SPATIAL_DIM] {
        let v = &state.channels[self.root_group()];
        [v[0], v[1]]
    }
}

/// Values of a real frame: one vector per schema group plus contact flags.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub channels: Vec<Vec<f64>>,
    pub contacts: Vec<bool>,
}

impl State {
    pub fn zeros(schema: &StateSchema) -> Self {
        State {
            channels: schema.groups.iter().map(|g| vec![0.0; g.dim]).collect(),
            contacts: vec![false; schema.contact_pairs()],
        }
    }

    pub fn group(&self, schema: &StateSchema, name: &str) -> Option<&[f64]> {
        schema
            .group_index(name)
            .map(|i| self.channels[i].as_slice())
    }

    pub fn group_mut(&mut self, schema: &StateSchema, name: &str) -> Option<&mut Vec<f64>> {
        schema.group_index(name).map(move |i| &mut self.channels[i])
    }

    /// Translates every positional point by `offset`.
    pub fn translate(&mut self, schema: &StateSchema, offset: [f64; SPATIAL_DIM]) {
        for (g, values) in schema.groups.iter().zip(self.channels.iter_mut()) {
            if g.kind.is_positional() {
                for point in values.chunks_mut(SPATIAL_DIM) {
                    for (x, o) in point.iter_mut().zip(offset) {
                        *x += o;
                    }
                }
            }
        }
    }
}

/// One time step of a reference trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Real(State),
    /// Buffer frame with no values; never used for reward.
    Masked,
}

impl Frame {
    pub fn as_real(&self) -> Option<&State> {
        match self {
            Frame::Real(s) => Some(s),
            Frame::Masked => None,
        }
    }

    pub fn is_masked(&self) -> bool {
        matches!(self, Frame::Masked)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub skill: String,
    pub dt: f64,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    /// Index of the last frame (T).
    pub fn last_index(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn real(&self, index: usize) -> Option<&State> {
        self.frames.get(index).and_then(Frame::as_real)
    }

    pub fn real_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.is_masked())
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: StateSchema,
    pub skills: BTreeMap<String, Vec<Trajectory>>,
}

impl Dataset {
    pub fn new(schema: StateSchema) -> Self {
        Dataset {
            schema,
            skills: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, trajectory: Trajectory) {
        self.skills
            .entry(trajectory.skill.clone())
            .or_default()
            .push(trajectory);
    }

    pub fn skill(&self, name: &str) -> Result<&[Trajectory]> {
        self.skills
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSkill(name.to_string()))
    }

    pub fn skill_names(&self) -> Vec<String> {
        self.skills.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    DimMismatch {
        group: String,
        expected: usize,
        found: usize,
    },
    ContactMismatch {
        expected: usize,
        found: usize,
    },
    GroupCount {
        expected: usize,
        found: usize,
    },
    MaskedEndpoint,
    NonPositiveDt,
    TooShort,
    NonFinite,
    SkillLabel {
        found: String,
    },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::DimMismatch {
                group,
                expected,
                found,
            } => write!(
                f,
                "dim mismatch in `{group}`: expected {expected}, found {found}"
            ),
            ViolationKind::ContactMismatch { expected, found } => {
                write!(
                    f,
                    "contact count mismatch: expected {expected}, found {found}"
                )
            }
            ViolationKind::GroupCount { expected, found } => {
                write!(
                    f,
                    "group count mismatch: expected {expected}, found {found}"
                )
            }
            ViolationKind::MaskedEndpoint => f.write_str("masked endpoint"),
            ViolationKind::NonPositiveDt => f.write_str("nonpositive dt"),
            ViolationKind::TooShort => f.write_str("fewer than 2 frames"),
            ViolationKind::NonFinite => f.write_str("non-finite channel value"),
            ViolationKind::SkillLabel { found } => {
                write!(
                    f,
                    "trajectory labelled `{found}` stored under another skill"
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub skill: String,
    pub trajectory: usize,
    pub frame: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.skill, self.trajectory)?;
        if let Some(frame) = self.frame {
            write!(f, " frame {frame}")?;
        }
        write!(f, ": {}", self.kind)
    }
}

/// Checks one state against the schema, returning the first problem found.
pub fn check_state(schema: &StateSchema, state: &State) -> Option<ViolationKind> {
    if state.channels.len() != schema.groups.len() {
        return Some(ViolationKind::GroupCount {
            expected: schema.groups.len(),
            found: state.channels.len(),
        });
    }
    for (g, v) in schema.groups.iter().zip(&state.channels) {
        if v.len() != g.dim {
            return Some(ViolationKind::DimMismatch {
                group: g.name.clone(),
                expected: g.dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Some(ViolationKind::NonFinite);
        }
    }
    if state.contacts.len() != schema.contact_pairs() {
        return Some(ViolationKind::ContactMismatch {
            expected: schema.contact_pairs(),
            found: state.contacts.len(),
        });
    }
    None
}

/// Violations of a single trajectory, tagged with `skill` and `index`.
pub fn validate_trajectory(
    schema: &StateSchema,
    skill: &str,
    index: usize,
    traj: &Trajectory,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |frame, kind| {
        out.push(Violation {
            skill: skill.to_string(),
            trajectory: index,
            frame,
            kind,
        })
    };
    if traj.skill != skill {
        push(
            None,
            ViolationKind::SkillLabel {
                found: traj.skill.clone(),
            },
        );
    }
    if !(traj.dt > 0.0) {
        push(None, ViolationKind::NonPositiveDt);
    }
    if traj.frames.len() < 2 {
        push(None, ViolationKind::TooShort);
    }
    if let Some(first) = traj.frames.first() {
        if first.is_masked() {
            push(Some(0), ViolationKind::MaskedEndpoint);
        }
    }
    if traj.frames.len() > 1 && traj.frames.last().is_some_and(Frame::is_masked) {
        push(Some(traj.frames.len() - 1), ViolationKind::MaskedEndpoint);
    }
    for (i, frame) in traj.frames.iter().enumerate() {
        if let Frame::Real(state) = frame {
            if let Some(kind) = check_state(schema, state) {
                push(Some(i), kind);
            }
        }
    }
    out
}

/// Lists every invariant violation in the dataset; empty iff it is well formed.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    dataset
        .skills
        .iter()
        .flat_map(|(skill, trajs)| {
            trajs
                .iter()
                .enumerate()
                .flat_map(move |(i, t)| validate_trajectory(&dataset.schema, skill, i, t))
        })
        .collect()
}

/// Flattens a real frame into the policy's root-local observation.
///
/// The robot root position is subtracted from every positional point. The
/// root's own vertical coordinate (if the schema has an up axis) stays global.
/// Contact flags are appended as 0/1.
pub fn to_local_observation(schema: &StateSchema, frame: &Frame) -> Result<Vec<f64>> {
    let state = frame
        .as_real()
        .ok_or_else(|| Error::Invalid("no observation for masked frame".into()))?;
    Ok(local_observation(schema, state))
}

pub fn local_observation(schema: &StateSchema, state: &State) -> Vec<f64> {
    let root = schema.root(state);
    let root_group = schema.root_group();
    let mut out = Vec::with_capacity(schema.observation_dim());
    for (gi, (g, values)) in schema.groups.iter().zip(&state.channels).enumerate() {
        if g.kind.is_positional() {
            for (pi, point) in values.chunks(SPATIAL_DIM).enumerate() {
                for (axis, x) in point.iter().enumerate() {
                    let keep_height = gi == root_group && pi == 0 && schema.up_axis == Some(axis);
                    out.push(if keep_height { *x } else { x - root[axis] });
                }
            }
        } else {
            out.extend_from_slice(values);
        }
    }
    out.extend(state.contacts.iter().map(|&c| if c { 1.0 } else { 0.0 }));
    out
}
