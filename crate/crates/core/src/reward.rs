//! Imitation rewards.
//!
//! Every sub-term is `exp(-λ · MSE)` over one channel group, where MSE is the
//! mean (not the sum) of squared errors so λ does not depend on group size.
//! The multiplicative reward is `r_body · r_object · r_rel · r_contact`; the
//! additive variant sums the position, rotation, rotation-velocity and object
//! position terms.

use crate::error::{ensure_len, Error, Result};
use crate::trajectory::{check_state, Frame, GroupKind, State, StateSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Multiplicative,
    Additive,
}

/// Weights of the additive reward's four terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdditiveWeights {
    pub position: f64,
    pub rotation: f64,
    pub rotation_velocity: f64,
    pub object_position: f64,
}

impl Default for AdditiveWeights {
    fn default() -> Self {
        AdditiveWeights {
            position: 40.0,
            rotation: 2.0,
            rotation_velocity: 0.1,
            object_position: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardWeights {
    pub mode: RewardMode,
    /// λ per non-contact group, in schema order.
    pub group_lambda: Vec<f64>,
    /// λ^cg per contact pair.
    pub contact_lambda: Vec<f64>,
}

impl RewardWeights {
    /// Multiplicative weights taken from the schema.
    pub fn multiplicative(schema: &StateSchema) -> Self {
        RewardWeights {
            mode: RewardMode::Multiplicative,
            group_lambda: schema.groups.iter().map(|g| g.lambda).collect(),
            contact_lambda: schema.contact_lambda().to_vec(),
        }
    }

    pub fn additive(schema: &StateSchema, w: AdditiveWeights) -> Self {
        let group_lambda = schema
            .groups
            .iter()
            .map(|g| match g.kind {
                GroupKind::RobotPos => w.position,
                GroupKind::RobotRot => w.rotation,
                GroupKind::RobotRotVel => w.rotation_velocity,
                GroupKind::ObjPos => w.object_position,
                _ => 0.0,
            })
            .collect();
        RewardWeights {
            mode: RewardMode::Additive,
            group_lambda,
            contact_lambda: vec![0.0; schema.contact_pairs()],
        }
    }

    fn check(&self, schema: &StateSchema) -> Result<()> {
        ensure_len(schema.groups.len(), self.group_lambda.len())?;
        ensure_len(schema.contact_pairs(), self.contact_lambda.len())
    }
}

/// Per-frame reward; masked reference frames yield `Skipped`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameReward {
    Value(f64),
    Skipped,
}

impl FrameReward {
    pub fn value(self) -> Option<f64> {
        match self {
            FrameReward::Value(v) => Some(v),
            FrameReward::Skipped => None,
        }
    }

    /// Scalar used by the learner: skipped steps count as 0.
    pub fn or_zero(self) -> f64 {
        self.value().unwrap_or(0.0)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `exp(-λ · MSE(sim, reference))`.
pub fn group_reward(sim: &[f64], reference: &[f64], lambda: f64) -> Result<f64> {
    ensure_len(reference.len(), sim.len())?;
    if lambda < 0.0 {
        return Err(Error::Invalid(format!("negative lambda {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(1.0);
    }
    Ok((-lambda * mse(sim, reference)).exp())
}

/// `exp(-Σ_j λ_j · |sim_j − ref_j|)` over boolean contact flags.
pub fn contact_reward(sim: &[bool], reference: &[bool], lambda: &[f64]) -> Result<f64> {
    ensure_len(reference.len(), sim.len())?;
    ensure_len(lambda.len(), sim.len())?;
    let err: f64 = sim
        .iter()
        .zip(reference)
        .zip(lambda)
        .filter(|((s, r), _)| s != r)
        .map(|(_, l)| *l)
        .sum();
    Ok((-err).exp())
}

fn check_pair(schema: &StateSchema, a: &State, b: &State, w: &RewardWeights) -> Result<()> {
    w.check(schema)?;
    for s in [a, b] {
        if let Some(v) = check_state(schema, s) {
            return Err(Error::Schema(v.to_string()));
        }
    }
    Ok(())
}

/// Product of body, object and relative terms, skipping the contact term.
pub(crate) fn similarity_unchecked(a: &State, b: &State, w: &RewardWeights) -> f64 {
    let mut sq = 0.0;
    for ((x, y), lambda) in a.channels.iter().zip(&b.channels).zip(&w.group_lambda) {
        if *lambda != 0.0 {
            sq += lambda * mse(x, y);
        }
    }
    (-sq).exp()
}

/// Kinematic similarity `S_k = r_body · r_object · r_rel` between two states.
pub fn state_similarity(
    schema: &StateSchema,
    a: &State,
    b: &State,
    w: &RewardWeights,
) -> Result<f64> {
    check_pair(schema, a, b, w)?;
    Ok(similarity_unchecked(a, b, w))
}

/// Kinematic similarity of two real frames; symmetric in its arguments.
pub fn kinematic_similarity(
    schema: &StateSchema,
    a: &Frame,
    b: &Frame,
    w: &RewardWeights,
) -> Result<f64> {
    match (a, b) {
        (Frame::Real(a), Frame::Real(b)) => state_similarity(schema, a, b, w),
        _ => Err(Error::Invalid(
            "kinematic similarity of a masked frame".into(),
        )),
    }
}

/// Multiplicative imitation reward of a simulated state against a reference frame.
pub fn reward_sm(
    schema: &StateSchema,
    sim: &State,
    reference: &Frame,
    w: &RewardWeights,
) -> Result<FrameReward> {
    let Frame::Real(reference) = reference else {
        return Ok(FrameReward::Skipped);
    };
    check_pair(schema, sim, reference, w)?;
    // exp(-Σ λ·MSE) is the product of the body, object and relative terms.
    let kinematic = similarity_unchecked(sim, reference, w);
    let contact = contact_reward(&sim.contacts, &reference.contacts, &w.contact_lambda)?;
    Ok(FrameReward::Value(kinematic * contact))
}

/// Additive reward `r_p + r_r + r_rv + r_op`. A term whose kind is absent
/// from the schema contributes 1.
pub fn reward_dm(
    schema: &StateSchema,
    sim: &State,
    reference: &Frame,
    w: &RewardWeights,
) -> Result<FrameReward> {
    let Frame::Real(reference) = reference else {
        return Ok(FrameReward::Skipped);
    };
    check_pair(schema, sim, reference, w)?;
    let mut total = 0.0;
    for kind in [
        GroupKind::RobotPos,
        GroupKind::RobotRot,
        GroupKind::RobotRotVel,
        GroupKind::ObjPos,
    ] {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut lambda = 0.0;
        for (i, g) in schema.groups.iter().enumerate() {
            if g.kind == kind {
                a.extend_from_slice(&sim.channels[i]);
                b.extend_from_slice(&reference.channels[i]);
                lambda = w.group_lambda[i];
            }
        }
        total += group_reward(&a, &b, lambda)?;
    }
    Ok(FrameReward::Value(total))
}

/// Reward in the mode selected by `w`.
pub fn reward(
    schema: &StateSchema,
    sim: &State,
    reference: &Frame,
    w: &RewardWeights,
) -> Result<FrameReward> {
    match w.mode {
        RewardMode::Multiplicative => reward_sm(schema, sim, reference, w),
        RewardMode::Additive => reward_dm(schema, sim, reference, w),
    }
}

/// Mean reward per frame over the non-skipped entries; 0 if all are skipped.
pub fn normalized_reward(rewards: &[FrameReward]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Invalid(
            "normalized reward of an empty sequence".into(),
        ));
    }
    let (sum, n) = rewards
        .iter()
        .filter_map(|r| r.value())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
