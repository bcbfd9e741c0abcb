//! Trajectory stitching and neighborhood augmentation.
//!
//! A start state is connected to a reference trajectory at its most similar
//! real frame `j`. The similarity `β` decides how many masked buffer frames
//! separate the two: `N = min(-⌊log10 β⌋, N_max)`, and connections with
//! `β < τ` are rejected. The stitched graph of a skill collects such
//! connections from the states of every other skill, and the sampler draws
//! clips from the graph, optionally perturbing the start inside its
//! ε-neighborhood.

use std::fmt;

use rand::Rng;

use crate::ats::AtsStats;
use crate::error::{Error, Result};
use crate::reward::{similarity_unchecked, state_similarity, RewardWeights};
use crate::trajectory::{check_state, Dataset, Frame, State, StateSchema, Trajectory, SPATIAL_DIM};

/// Retries of a rejected perturbed start before falling back to the centroid.
pub const NSI_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Probability of starting from an external (stitched) state.
    pub p_external: f64,
    /// Probability of perturbing the chosen centroid.
    pub p_neighborhood: f64,
    /// Similarity threshold τ.
    pub tau: f64,
    /// Maximum number of masked frames N_max.
    pub max_masked: usize,
    /// ATS weight λ_s over start indices.
    pub lambda_s: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            p_external: 0.1,
            p_neighborhood: 0.1,
            tau: 1e-10,
            max_masked: 10,
            lambda_s: 10.0,
        }
    }
}

impl AugmentParams {
    pub fn check(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.p_external) || !unit.contains(&self.p_neighborhood) {
            return Err(Error::Invalid("p_e and p_n must lie in [0, 1]".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Invalid(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.lambda_s >= 0.0) {
            return Err(Error::Invalid("lambda_s must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskCount {
    Accepted(usize),
    Rejected,
}

/// Number of masked frames for a connection of similarity `beta`.
///
/// `β = τ` is accepted.
pub fn mask_count(beta: f64, tau: f64, max_masked: usize) -> Result<MaskCount> {
    if !(beta > 0.0) || beta > 1.0 {
        return Err(Error::Invalid(format!("similarity {beta} outside (0, 1]")));
    }
    if beta < tau {
        return Ok(MaskCount::Rejected);
    }
    let n = -beta.log10().floor();
    Ok(MaskCount::Accepted((n as usize).min(max_masked)))
}

/// Most similar real frame of `traj` to `state`; ties go to the smaller index.
pub fn nearest_reference(
    schema: &StateSchema,
    state: &State,
    traj: &Trajectory,
    w: &RewardWeights,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, frame) in traj.frames.iter().enumerate() {
        if let Frame::Real(reference) = frame {
            let s = match best {
                None => state_similarity(schema, state, reference, w)?,
                Some(_) => similarity_unchecked(state, reference, w),
            };
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
    }
    best.ok_or_else(|| Error::Invalid("trajectory has no real frame".into()))
}

/// Translation that moves the robot root of `state` onto that of `target`
/// along every axis except the schema's up axis.
pub fn root_alignment(schema: &StateSchema, state: &State, target: &State) -> [f64; SPATIAL_DIM] {
    let from = schema.root(state);
    let to = schema.root(target);
    let mut offset = [0.0; SPATIAL_DIM];
    for axis in 0..SPATIAL_DIM {
        if schema.up_axis != Some(axis) {
            offset[axis] = to[axis] - from[axis];
        }
    }
    offset
}

/// Translates all positional channels of `state` so its root lines up with
/// `target`'s. Velocities, rotations and contacts are unchanged.
pub fn align_root_xy(schema: &StateSchema, state: &State, target: &State) -> State {
    let mut out = state.clone();
    out.translate(schema, root_alignment(schema, state, target));
    out
}

/// Builds `{start, ∅ × N, ŝ_j, …, ŝ_T}`.
///
/// With `N = 0` the start state is an exact match of `ŝ_j` and takes its
/// place, giving `{start, ŝ_{j+1}, …, ŝ_T}`; a clip started from the
/// reference state `ŝ_0` is then the trajectory itself.
pub fn assemble_clip(
    start: State,
    traj: &Trajectory,
    entry: usize,
    masked: usize,
) -> Result<Trajectory> {
    if traj.real(entry).is_none() {
        return Err(Error::Invalid(format!(
            "entry index {entry} is not a real frame"
        )));
    }
    let suffix_from = if masked == 0 { entry + 1 } else { entry };
    if suffix_from > traj.last_index() {
        return Err(Error::Invalid(format!(
            "self connection at the final frame {entry} leaves an empty clip"
        )));
    }
    let mut frames = Vec::with_capacity(1 + masked + traj.frames.len() - suffix_from);
    frames.push(Frame::Real(start));
    frames.extend(std::iter::repeat_n(Frame::Masked, masked));
    frames.extend_from_slice(&traj.frames[suffix_from..]);
    Ok(Trajectory {
        skill: traj.skill.clone(),
        dt: traj.dt,
        frames,
    })
}

/// A validated stitch from an external state into the target skill.
#[derive(Debug, Clone, PartialEq)]
pub struct Connection {
    /// Source state after alignment.
    pub source: State,
    pub source_skill: String,
    pub source_traj: usize,
    pub source_frame: usize,
    pub target_traj: usize,
    pub entry: usize,
    pub mask_count: usize,
    pub similarity: f64,
    pub alignment: [f64; SPATIAL_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchedGraph {
    pub skill: String,
    pub targets: Vec<Trajectory>,
    pub connections: Vec<Connection>,
    pub tau: f64,
    pub max_masked: usize,
}

impl StitchedGraph {
    /// Graph with no external connections.
    pub fn plain(dataset: &Dataset, skill: &str, params: &AugmentParams) -> Result<Self> {
        Ok(StitchedGraph {
            skill: skill.to_string(),
            targets: dataset.skill(skill)?.to_vec(),
            connections: Vec::new(),
            tau: params.tau,
            max_masked: params.max_masked,
        })
    }
}

/// Best aligned connection of `source` into any of `targets`.
fn best_aligned(
    schema: &StateSchema,
    source: &State,
    targets: &[Trajectory],
    w: &RewardWeights,
) -> Option<(usize, usize, f64, [f64; SPATIAL_DIM])> {
    let mut best: Option<(usize, usize, f64, [f64; SPATIAL_DIM])> = None;
    for (ti, t) in targets.iter().enumerate() {
        for (j, frame) in t.frames.iter().enumerate() {
            let Frame::Real(reference) = frame else {
                continue;
            };
            let offset = root_alignment(schema, source, reference);
            let mut aligned = source.clone();
            aligned.translate(schema, offset);
            let s = similarity_unchecked(&aligned, reference, w);
            if best.is_none_or(|b| s > b.2) {
                best = Some((ti, j, s, offset));
            }
        }
    }
    best
}

/// Stitches every real state of the other skills into `target_skill`.
pub fn build_stg(
    dataset: &Dataset,
    target_skill: &str,
    params: &AugmentParams,
    w: &RewardWeights,
) -> Result<StitchedGraph> {
    if dataset.skills.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    params.check()?;
    let schema = &dataset.schema;
    let mut graph = StitchedGraph::plain(dataset, target_skill, params)?;
    for (skill, trajs) in &dataset.skills {
        if skill == target_skill {
            continue;
        }
        for (ti, traj) in trajs.iter().enumerate() {
            for (fi, frame) in traj.frames.iter().enumerate() {
                let Frame::Real(source) = frame else { continue };
                if let Some(v) = check_state(schema, source) {
                    return Err(Error::Schema(format!("{skill}[{ti}] frame {fi}: {v}")));
                }
                let Some((target_traj, entry, beta, offset)) =
                    best_aligned(schema, source, &graph.targets, w)
                else {
                    continue;
                };
                if beta <= 0.0 {
                    continue;
                }
                let MaskCount::Accepted(n) = mask_count(beta, params.tau, params.max_masked)?
                else {
                    continue;
                };
                // An exact match of the final frame cannot start a clip.
                if n == 0 && entry == graph.targets[target_traj].last_index() {
                    continue;
                }
                let mut aligned = source.clone();
                aligned.translate(schema, offset);
                graph.connections.push(Connection {
                    source: aligned,
                    source_skill: skill.clone(),
                    source_traj: ti,
                    source_frame: fi,
                    target_traj,
                    entry,
                    mask_count: n,
                    similarity: beta,
                    alignment: offset,
                });
            }
        }
    }
    Ok(graph)
}

/// World-specific projection applied after a perturbation.
pub trait PhysicalClamp: Sync {
    fn clamp(&self, schema: &StateSchema, state: &mut State);
}

pub struct NoClamp;

impl PhysicalClamp for NoClamp {
    fn clamp(&self, _: &StateSchema, _: &mut State) {}
}

/// Per-group half-widths declared by the schema.
pub fn schema_epsilon(schema: &StateSchema) -> Vec<f64> {
    schema.groups.iter().map(|g| g.epsilon).collect()
}

/// Draws a state uniformly from the ε-box around `state`, then clamps it.
/// Contacts are unchanged.
pub fn epsilon_nsi(
    schema: &StateSchema,
    state: &State,
    epsilon: &[f64],
    clamp: &dyn PhysicalClamp,
    rng: &mut impl Rng,
) -> State {
    let mut out = state.clone();
    for (values, eps) in out.channels.iter_mut().zip(epsilon) {
        for x in values.iter_mut() {
            let u: f64 = rng.random();
            *x += eps * (2.0 * u - 1.0);
        }
    }
    clamp.clamp(schema, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipOrigin {
    /// Reference state `index` of the target trajectory.
    Reference { index: usize },
    /// External connection `index` of the stitched graph.
    External { connection: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipMeta {
    pub origin: ClipOrigin,
    pub target_traj: usize,
    pub perturbed: bool,
    pub entry: usize,
    pub mask_count: usize,
    pub similarity: f64,
    /// A perturbed start kept being rejected and the centroid was used instead.
    pub fell_back: bool,
}

impl fmt::Display for ClipMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let origin = match self.origin {
            ClipOrigin::Reference { index } => format!("reference:{index}"),
            ClipOrigin::External { connection } => format!("external:{connection}"),
        };
        write!(
            f,
            "{origin} {} {} {} {} {} {}",
            self.target_traj,
            u8::from(self.perturbed),
            self.entry,
            self.mask_count,
            crate::io::fmt_f64(self.similarity),
            u8::from(self.fell_back)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedClip {
    pub clip: Trajectory,
    pub meta: ClipMeta,
}

/// Everything the sampler reads; shared by all rollout workers.
pub struct Sampler<'a> {
    pub schema: &'a StateSchema,
    pub graph: &'a StitchedGraph,
    pub weights: &'a RewardWeights,
    pub params: AugmentParams,
    pub epsilon: Vec<f64>,
    pub clamp: &'a dyn PhysicalClamp,
}

impl Sampler<'_> {
    /// Draws one training clip: pick a centroid (external with probability
    /// `p_e`, otherwise an ATS start of the target), perturb it with
    /// probability `p_n`, connect it and assemble the clip.
    pub fn sample(&self, ats: &AtsStats, rng: &mut impl Rng) -> Result<AugmentedClip> {
        let g = self.graph;
        let p = &self.params;
        let external = rng.random::<f64>() < p.p_external && !g.connections.is_empty();
        let perturb = rng.random::<f64>() < p.p_neighborhood;

        let (origin, target_traj, centroid, exact) = if external {
            let c = rng.random_range(0..g.connections.len());
            let conn = &g.connections[c];
            (
                ClipOrigin::External { connection: c },
                conn.target_traj,
                conn.source.clone(),
                (conn.entry, conn.similarity, conn.mask_count),
            )
        } else {
            let ti = if g.targets.len() == 1 {
                0
            } else {
                rng.random_range(0..g.targets.len())
            };
            let k = ats.sample_start(&g.skill, ti, p.lambda_s, rng)?;
            let state = g.targets[ti]
                .real(k)
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("start {k} is masked")))?;
            (ClipOrigin::Reference { index: k }, ti, state, (k, 1.0, 0))
        };
        let traj = &g.targets[target_traj];

        let mut meta = ClipMeta {
            origin,
            target_traj,
            perturbed: false,
            entry: exact.0,
            mask_count: exact.2,
            similarity: exact.1,
            fell_back: false,
        };
        if perturb {
            for _ in 0..NSI_RETRIES {
                let candidate = epsilon_nsi(self.schema, &centroid, &self.epsilon, self.clamp, rng);
                let (j, beta) = nearest_reference(self.schema, &candidate, traj, self.weights)?;
                if beta <= 0.0 {
                    continue;
                }
                if let MaskCount::Accepted(n) = mask_count(beta, p.tau, p.max_masked)? {
                    if n > 0 || j < traj.last_index() {
                        meta.perturbed = true;
                        meta.entry = j;
                        meta.mask_count = n;
                        meta.similarity = beta;
                        let clip = assemble_clip(candidate, traj, j, n)?;
                        return Ok(AugmentedClip { clip, meta });
                    }
                }
            }
            log::debug!("perturbed start rejected {NSI_RETRIES} times; using the centroid");
            meta.fell_back = true;
        }
        let clip = assemble_clip(centroid, traj, meta.entry, meta.mask_count)?;
        Ok(AugmentedClip { clip, meta })
    }
}
