//! PPO training on the hand-ball world with augmented start clips.
//!
//! Each iteration freezes the policy and the ATS statistics, collects
//! episodes in parallel (one counter-based random stream per environment),
//! folds the episode rewards into ATS, computes advantages and runs clipped
//! PPO epochs on φ and the value net. θ is never updated here.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ats::{AtsStats, DEFAULT_DECAY};
use crate::augment::{
    build_stg, schema_epsilon, AugmentParams, ClipMeta, ClipOrigin, Sampler, StitchedGraph,
};
use crate::error::{ensure_len, Error, Result};
use crate::nn::{clip_grad_norm, Adam, Net};
use crate::policy::{
    gaussian_log_prob, gaussian_log_prob_grad, he_samples, pretrain_he, HePretrainer,
    ObsNormalizer, PolicyBundle, PolicyConfig,
};
use crate::reward::{reward, FrameReward, RewardWeights};
use crate::trajectory::{local_observation, Dataset, Frame, StateSchema, Trajectory};
use crate::world::{
    from_state, step, to_state, Actuator, SuccessParams, ToyClamp, WorldParams, WorldState,
};

/// Which parts of the method are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switches {
    /// Perturbed starts connected through the nearest reference.
    pub stf: bool,
    /// Starts stitched in from other skills.
    pub stg: bool,
    /// Reward-weighted start and skill sampling.
    pub ats: bool,
    /// History embedding input.
    pub he: bool,
}

impl Switches {
    pub const ALL: Switches = Switches {
        stf: true,
        stg: true,
        ats: true,
        he: true,
    };
    pub const NONE: Switches = Switches {
        stf: false,
        stg: false,
        ats: false,
        he: false,
    };

    /// Applies a comma separated ablation list (`all`, `none` or names).
    pub fn ablate(mut self, list: &str) -> Result<Self> {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "all" => self = Switches::NONE,
                "none" => {}
                "stf" => self.stf = false,
                "stg" => self.stg = false,
                "ats" => self.ats = false,
                "he" => self.he = false,
                other => return Err(Error::Invalid(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HePretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl Default for HePretrainConfig {
    fn default() -> Self {
        HePretrainConfig {
            steps: 2000,
            batch: 32,
            lr: 0.01,
            momentum: 0.9,
            lambda_a: 1.0,
            lambda_b: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Environment steps collected per iteration.
    pub samples_per_iteration: usize,
    pub envs: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// λ of the value targets.
    pub td_lambda: f64,
    pub clip: f64,
    /// Longest episode in control steps.
    pub episode_len: usize,
    pub lr: f64,
    pub value_lr: f64,
    pub max_grad_norm: f64,
    pub policy: PolicyConfig,
    pub he: HePretrainConfig,
    pub augment: AugmentParams,
    pub lambda_c: f64,
    pub ats_decay: f64,
    pub switches: Switches,
    pub world: WorldParams,
    pub actuator: Actuator,
    pub success: SuccessParams,
    /// Checkpoint period in iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Evaluation period in iterations; 0 disables it.
    pub eval_every: usize,
    pub eval_trials: usize,
    pub eval_horizon: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 0,
            iterations: 100,
            samples_per_iteration: 4096,
            envs: 32,
            minibatch: 512,
            epochs: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            td_lambda: 0.95,
            clip: 0.2,
            episode_len: 60,
            lr: 2e-4,
            value_lr: 1e-3,
            max_grad_norm: 1.0,
            policy: PolicyConfig::default(),
            he: HePretrainConfig::default(),
            augment: AugmentParams::default(),
            lambda_c: 5.0,
            ats_decay: DEFAULT_DECAY,
            switches: Switches::ALL,
            world: WorldParams::default(),
            actuator: Actuator::default(),
            success: SuccessParams::default(),
            checkpoint_every: 0,
            eval_every: 0,
            eval_trials: 20,
            eval_horizon: 300,
        }
    }
}

impl TrainerConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Invalid(format!(
                "discount {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Invalid(format!("clip {} outside (0, 1)", self.clip)));
        }
        for (name, l) in [
            ("gae lambda", self.gae_lambda),
            ("td lambda", self.td_lambda),
        ] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Invalid(format!("{name} {l} outside [0, 1]")));
            }
        }
        if self.envs == 0 || self.samples_per_iteration < self.envs {
            return Err(Error::Invalid(
                "need at least one sample per environment".into(),
            ));
        }
        if self.episode_len == 0 || self.minibatch == 0 || self.epochs == 0 {
            return Err(Error::Invalid(
                "episode length, minibatch and epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.value_lr > 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::Invalid(
                "step sizes and gradient bound must be positive".into(),
            ));
        }
        if !(self.policy.sigma >= 0.0) {
            return Err(Error::Invalid("action sigma must be nonnegative".into()));
        }
        self.augment.check()?;
        self.world.check()
    }

    /// Augmentation parameters after the ablation switches.
    pub fn effective_augment(&self) -> AugmentParams {
        let mut p = self.augment;
        if !self.switches.stf {
            p.p_neighborhood = 0.0;
        }
        if !self.switches.stg {
            p.p_external = 0.0;
        }
        if !self.switches.ats {
            p.lambda_s = 0.0;
        }
        p
    }

    pub fn effective_lambda_c(&self) -> f64 {
        if self.switches.ats {
            self.lambda_c
        } else {
            0.0
        }
    }
}

/// Purposes of the random streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init,
    Pretrain,
    Rollout { iteration: usize, env: usize },
    Update { iteration: usize },
    Eval { trial: usize },
}

/// Independent generator for one purpose of a seeded run.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let id = match stream {
        Stream::Init => 1 << 60,
        Stream::Pretrain => 2 << 60,
        Stream::Rollout { iteration, env } => (3 << 60) | ((iteration as u64) << 24) | env as u64,
        Stream::Update { iteration } => (4 << 60) | iteration as u64,
        Stream::Eval { trial } => (5 << 60) | trial as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Normalized local observation of a world state.
pub fn observe(bundle: &PolicyBundle, schema: &StateSchema, s: &WorldState) -> Vec<f64> {
    bundle
        .normalizer
        .apply(&local_observation(schema, &to_state(s)))
}

/// World state at clip frame 0; the reference cursor starts at frame 1.
pub fn reset_from_clip(
    schema: &StateSchema,
    clip: &Trajectory,
    p: &WorldParams,
) -> Result<(WorldState, usize)> {
    let first = clip
        .frames
        .first()
        .and_then(Frame::as_real)
        .ok_or_else(|| Error::Invalid("clip does not start with a real frame".into()))?;
    Ok((from_state(schema, first, p)?, 1))
}

/// Advantages and value targets. `values` holds one more entry than
/// `rewards`: the bootstrap value after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_len(rewards.len() + 1, values.len())?;
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// One environment step as seen by the update.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub inputs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// Values of every visited state plus the bootstrap value.
    pub values: Vec<f64>,
    /// Per-step scalar reward; skipped frames count as 0.
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub skill: String,
    pub meta: ClipMeta,
    pub rewards: Vec<FrameReward>,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub episodes: Vec<Episode>,
}

impl Batch {
    pub fn steps(&self) -> usize {
        self.episodes.iter().map(|e| e.rewards.len()).sum()
    }

    /// Mean over scored frames, or `None` if every frame was skipped.
    pub fn mean_scored_reward(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .episodes
            .iter()
            .flat_map(|e| e.rewards.iter().filter_map(|r| r.value()))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Read-only state shared by the rollout workers.
pub struct RolloutContext<'a> {
    pub schema: &'a StateSchema,
    pub weights: &'a RewardWeights,
    pub samplers: Vec<(String, Sampler<'a>)>,
    pub config: &'a TrainerConfig,
}

impl RolloutContext<'_> {
    fn sampler(&self, skill: &str) -> Result<&Sampler<'_>> {
        self.samplers
            .iter()
            .find(|(s, _)| s == skill)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::UnknownSkill(skill.to_string()))
    }
}

/// Runs one episode of at most `max_steps` steps along `clip`.
pub fn run_episode(
    ctx: &RolloutContext<'_>,
    bundle: &PolicyBundle,
    skill: &str,
    clip: &Trajectory,
    max_steps: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Segment, Vec<FrameReward>)> {
    let c = ctx.config;
    let si = bundle.skill_index(skill)?;
    let (mut world, cursor) = reset_from_clip(ctx.schema, clip, &c.world)?;
    let steps = max_steps.min(clip.frames.len() - cursor);
    let mut history = bundle.new_history();
    let mut seg = Segment {
        inputs: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        log_probs: Vec::with_capacity(steps),
        values: Vec::with_capacity(steps + 1),
        rewards: Vec::with_capacity(steps),
    };
    let mut rewards = Vec::with_capacity(steps);
    let input_at =
        |world: &WorldState, history: &crate::policy::History| -> Result<(Vec<f64>, Vec<f64>)> {
            let obs = observe(bundle, ctx.schema, world);
            let h = bundle.he_encode(history)?;
            Ok((bundle.policy_input(si, &obs, &h)?, obs))
        };
    for t in 0..steps {
        let (input, obs) = input_at(&world, &history)?;
        let out = bundle.act(&input, sigma, rng)?;
        let value = bundle.state_value(&input)?;
        world = step(&world, &c.actuator.apply(&world, &out.action), &c.world)?;
        let r = reward(
            ctx.schema,
            &to_state(&world),
            &clip.frames[cursor + t],
            ctx.weights,
        )?;
        history.push(Some(obs));
        seg.inputs.push(input);
        seg.actions.push(out.action);
        seg.log_probs.push(out.log_prob);
        seg.values.push(value);
        seg.rewards.push(r.or_zero());
        rewards.push(r);
    }
    let terminal = cursor + steps == clip.frames.len();
    let bootstrap = if terminal {
        0.0
    } else {
        bundle.state_value(&input_at(&world, &history)?.0)?
    };
    seg.values.push(bootstrap);
    Ok((seg, rewards))
}

/// Episodes of one environment until its step quota is filled.
fn collect_env(
    ctx: &RolloutContext<'_>,
    bundle: &PolicyBundle,
    ats: &AtsStats,
    quota: usize,
    mut rng: ChaCha8Rng,
) -> Result<Vec<Episode>> {
    let c = ctx.config;
    let mut out = Vec::new();
    let mut used = 0;
    while used < quota {
        let skill = ats.sample_skill(c.effective_lambda_c(), &mut rng);
        let clip = ctx.sampler(&skill)?.sample(ats, &mut rng)?;
        let limit = c.episode_len.min(quota - used);
        let (segment, rewards) = run_episode(
            ctx,
            bundle,
            &skill,
            &clip.clip,
            limit,
            bundle.sigma,
            &mut rng,
        )?;
        used += rewards.len();
        if rewards.is_empty() {
            return Err(Error::Invalid(format!("clip of `{skill}` has no steps")));
        }
        out.push(Episode {
            skill,
            meta: clip.meta,
            rewards,
            segment,
        });
    }
    Ok(out)
}

/// Collects one iteration of experience against a frozen policy and frozen
/// ATS statistics. The result does not depend on the thread count.
pub fn collect_rollouts(
    ctx: &RolloutContext<'_>,
    bundle: &PolicyBundle,
    ats: &AtsStats,
    iteration: usize,
) -> Result<Batch> {
    let c = ctx.config;
    let base = c.samples_per_iteration / c.envs;
    let extra = c.samples_per_iteration % c.envs;
    let per_env: Vec<Result<Vec<Episode>>> = (0..c.envs)
        .into_par_iter()
        .map(|env| {
            let quota = base + usize::from(env < extra);
            collect_env(
                ctx,
                bundle,
                ats,
                quota,
                stream_rng(c.seed, Stream::Rollout { iteration, env }),
            )
        })
        .collect();
    let mut batch = Batch::default();
    for r in per_env {
        batch.episodes.extend(r?);
    }
    Ok(batch)
}

/// Folds finished episodes into the ATS statistics.
pub fn record_batch(ats: &mut AtsStats, batch: &Batch) -> Result<()> {
    for e in &batch.episodes {
        match e.meta.origin {
            ClipOrigin::Reference { index } => {
                ats.record_episode(&e.skill, e.meta.target_traj, index, &e.rewards)?
            }
            ClipOrigin::External { .. } => ats.record_class_episode(&e.skill, &e.rewards)?,
        }
    }
    Ok(())
}

/// Flattens a batch into update samples with per-batch normalized advantages.
pub fn prepare_samples(batch: &Batch, config: &TrainerConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(batch.steps());
    for e in &batch.episodes {
        let s = &e.segment;
        let (adv, _) = compute_gae(&s.rewards, &s.values, config.gamma, config.gae_lambda)?;
        let (_, ret) = compute_gae(&s.rewards, &s.values, config.gamma, config.td_lambda)?;
        for t in 0..s.rewards.len() {
            out.push(Sample {
                input: s.inputs[t].clone(),
                action: s.actions[t].clone(),
                log_prob: s.log_probs[t],
                advantage: adv[t],
                ret: ret[t],
            });
        }
    }
    normalize_advantages(&mut out);
    Ok(out)
}

pub fn normalize_advantages(samples: &mut [Sample]) {
    if samples.len() < 2 {
        return;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|s| (s.advantage - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt().max(1e-8);
    for s in samples {
        s.advantage = (s.advantage - mean) / sd;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Clipped surrogate loss `-mean(min(ρA, clip(ρ)A))` of a minibatch; its
/// gradient with respect to φ's parameters is added to `grad`.
pub fn policy_loss_grad(
    phi: &Net,
    batch: &[&Sample],
    sigma: f64,
    clip: f64,
    grad: &mut [f64],
) -> Result<(f64, f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(
            "policy gradient needs a positive sigma".into(),
        ));
    }
    let n = batch.len() as f64;
    let (mut loss, mut clipped, mut kl) = (0.0, 0.0, 0.0);
    for s in batch {
        let cache = phi.forward(&s.input)?;
        let mean = cache.output();
        let lp = gaussian_log_prob(mean, &s.action, sigma);
        let ratio = (lp - s.log_prob).exp();
        let a = s.advantage;
        let unclipped = ratio * a;
        let bounded = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        loss -= unclipped.min(bounded) / n;
        kl += (s.log_prob - lp) / n;
        if unclipped <= bounded {
            let coeff = -a * ratio / n;
            let dy: Vec<f64> = gaussian_log_prob_grad(mean, &s.action, sigma)
                .into_iter()
                .map(|g| coeff * g)
                .collect();
            phi.backward(&cache, &dy, grad)?;
        } else {
            clipped += 1.0 / n;
        }
    }
    Ok((loss, clipped, kl))
}

/// Value regression loss `mean(½(V - R)²)`; gradient added to `grad`.
pub fn value_loss_grad(value: &Net, batch: &[&Sample], grad: &mut [f64]) -> Result<f64> {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let cache = value.forward(&s.input)?;
        let err = cache.output()[0] - s.ret;
        loss += 0.5 * err * err / n;
        value.backward(&cache, &[err / n], grad)?;
    }
    Ok(loss)
}

/// Optimizer state of the trainable networks.
pub struct Optimizers {
    pub phi: Adam,
    pub value: Adam,
}

impl Optimizers {
    pub fn new(bundle: &PolicyBundle, config: &TrainerConfig) -> Self {
        Optimizers {
            phi: Adam::new(bundle.phi.param_count(), config.lr),
            value: Adam::new(bundle.value.param_count(), config.value_lr),
        }
    }
}

/// PPO epochs over `samples`; φ and the value net only.
pub fn ppo_update(
    bundle: &mut PolicyBundle,
    opt: &mut Optimizers,
    samples: &[Sample],
    config: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossStats> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = LossStats::default();
    let mut batches = 0.0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch) {
            let mb: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut g_phi = vec![0.0; bundle.phi.param_count()];
            let (pl, cf, kl) =
                policy_loss_grad(&bundle.phi, &mb, bundle.sigma, config.clip, &mut g_phi)?;
            let mut g_value = vec![0.0; bundle.value.param_count()];
            let vl = value_loss_grad(&bundle.value, &mb, &mut g_value)?;
            if !(pl.is_finite() && vl.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "PPO loss (policy {pl}, value {vl})"
                )));
            }
            clip_grad_norm(&mut g_phi, config.max_grad_norm);
            clip_grad_norm(&mut g_value, config.max_grad_norm);
            opt.phi.step(&mut bundle.phi, &g_phi);
            opt.value.step(&mut bundle.value, &g_value);
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.clip_fraction += cf;
            stats.approx_kl += kl;
            batches += 1.0;
        }
    }
    if batches > 0.0 {
        stats.policy_loss /= batches;
        stats.value_loss /= batches;
        stats.clip_fraction /= batches;
        stats.approx_kl /= batches;
    }
    Ok(stats)
}

/// Stitched (or plain) graph of every skill of the dataset.
pub fn build_graphs(
    dataset: &Dataset,
    config: &TrainerConfig,
    weights: &RewardWeights,
) -> Result<Vec<StitchedGraph>> {
    let params = config.effective_augment();
    dataset
        .skill_names()
        .iter()
        .map(|skill| {
            if config.switches.stg && dataset.skills.len() > 1 {
                build_stg(dataset, skill, &params, weights)
            } else {
                StitchedGraph::plain(dataset, skill, &params)
            }
        })
        .collect()
}

/// Policy bundle with its normalizer fitted on `dataset`; θ pre-trained when
/// the history switch is on. Returns the pre-training curve.
pub fn init_bundle(
    dataset: &Dataset,
    config: &TrainerConfig,
) -> Result<(PolicyBundle, Vec<crate::policy::PretrainLoss>)> {
    let mut rng = stream_rng(config.seed, Stream::Init);
    let normalizer = ObsNormalizer::fit_dataset(dataset)?;
    let mut bundle = PolicyBundle::new(
        config.policy.clone(),
        dataset.skill_names(),
        normalizer,
        Actuator::DIM,
        config.switches.he,
        &mut rng,
    )?;
    let mut curve = Vec::new();
    if config.switches.he && config.he.steps > 0 {
        let samples = he_samples(&bundle, dataset)?;
        let h = &config.he;
        let mut pre = HePretrainer::new(&bundle, h.lr, h.momentum, h.lambda_a, h.lambda_b);
        let mut prng = stream_rng(config.seed, Stream::Pretrain);
        curve = pretrain_he(&mut bundle, &samples, &mut pre, h.steps, h.batch, &mut prng)?;
    }
    Ok((bundle, curve))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: usize,
    pub episodes: usize,
    /// Mean reward over scored frames.
    pub nr: f64,
    /// Fraction of episodes whose own mean scored reward is at least 0.5.
    pub sr_proxy: f64,
    pub loss: LossStats,
    /// Mean start statistic per skill, in skill order.
    pub skill_rbar: Vec<Option<f64>>,
}

pub fn metrics_header(skills: &[String]) -> String {
    let mut s = String::from(
        "iteration,env_steps,episodes,nr,sr_proxy,policy_loss,value_loss,clip_fraction,approx_kl",
    );
    for k in skills {
        let _ = write!(s, ",rbar_{k}");
    }
    s
}

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.iteration,
            self.env_steps,
            self.episodes,
            self.nr,
            self.sr_proxy,
            self.loss.policy_loss,
            self.loss.value_loss,
            self.loss.clip_fraction,
            self.loss.approx_kl
        );
        for r in &self.skill_rbar {
            match r {
                Some(v) => {
                    let _ = write!(s, ",{v:.9}");
                }
                None => s.push_str(",nan"),
            }
        }
        s
    }
}

fn episode_metrics(batch: &Batch) -> (f64, f64) {
    let nr = batch.mean_scored_reward().unwrap_or(0.0);
    let tracked = batch
        .episodes
        .iter()
        .filter(|e| crate::reward::normalized_reward(&e.rewards).is_ok_and(|r| r >= 0.5))
        .count();
    (nr, tracked as f64 / batch.episodes.len().max(1) as f64)
}

pub struct TrainOutput {
    pub bundle: PolicyBundle,
    pub ats: AtsStats,
    pub metrics: Vec<IterationMetrics>,
    pub pretrain: Vec<crate::policy::PretrainLoss>,
}

/// Optional per-iteration callback, e.g. periodic evaluation.
pub type Hook<'a> = dyn FnMut(usize, &PolicyBundle) -> Result<()> + 'a;

/// Full training run. When `out` is given, writes `metrics.csv`,
/// `pretrain.csv`, checkpoints and the final ATS snapshot there.
pub fn train(
    dataset: &Dataset,
    config: &TrainerConfig,
    out: Option<&Path>,
    hook: Option<&mut Hook<'_>>,
) -> Result<TrainOutput> {
    config.check()?;
    let schema = &dataset.schema;
    let weights = RewardWeights::multiplicative(schema);
    let (mut bundle, pretrain) = init_bundle(dataset, config)?;
    let theta_before = bundle.theta.clone();
    let graphs = build_graphs(dataset, config, &weights)?;
    let clamp = ToyClamp {
        ball_radius: config.world.ball_radius,
    };
    let epsilon = schema_epsilon(schema);
    let samplers = graphs
        .iter()
        .map(|g| {
            (
                g.skill.clone(),
                Sampler {
                    schema,
                    graph: g,
                    weights: &weights,
                    params: config.effective_augment(),
                    epsilon: epsilon.clone(),
                    clamp: &clamp,
                },
            )
        })
        .collect();
    let ctx = RolloutContext {
        schema,
        weights: &weights,
        samplers,
        config,
    };
    let skills = dataset.skill_names();
    let mut ats = AtsStats::new(dataset, config.ats_decay);
    let mut opt = Optimizers::new(&bundle, config);
    let mut metrics = Vec::with_capacity(config.iterations);
    let mut csv = metrics_header(&skills);
    csv.push('\n');
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut pre = String::from("step,total,prediction,regularizer\n");
        for (i, l) in pretrain.iter().enumerate() {
            let _ = writeln!(
                pre,
                "{i},{:.9e},{:.9e},{:.9e}",
                l.total, l.prediction, l.regularizer
            );
        }
        write_file(&dir.join("pretrain.csv"), &pre)?;
    }
    let mut hook = hook;
    let mut env_steps = 0;
    for iteration in 0..config.iterations {
        let batch = collect_rollouts(&ctx, &bundle, &ats, iteration)?;
        record_batch(&mut ats, &batch)?;
        let samples = prepare_samples(&batch, config)?;
        let mut urng = stream_rng(config.seed, Stream::Update { iteration });
        let loss = match ppo_update(&mut bundle, &mut opt, &samples, config, &mut urng) {
            Ok(l) => l,
            Err(e) => {
                if let Some(dir) = out {
                    let dump = format!("iteration {iteration}\nerror {e}\n{}", bundle.to_text());
                    write_file(&dir.join("diagnostic.txt"), &dump)?;
                }
                return Err(e);
            }
        };
        env_steps += batch.steps();
        let (nr, sr_proxy) = episode_metrics(&batch);
        let m = IterationMetrics {
            iteration,
            env_steps,
            episodes: batch.episodes.len(),
            nr,
            sr_proxy,
            loss,
            skill_rbar: skills.iter().map(|s| ats.skill_summary(s)).collect(),
        };
        log::info!(
            "iter {iteration} steps {env_steps} nr {nr:.4} sr_proxy {sr_proxy:.3} kl {:.2e}",
            loss.approx_kl
        );
        csv.push_str(&m.csv_row());
        csv.push('\n');
        metrics.push(m);
        if let Some(dir) = out {
            write_file(&dir.join("metrics.csv"), &csv)?;
            if config.checkpoint_every > 0 && (iteration + 1) % config.checkpoint_every == 0 {
                bundle.save(&dir.join(format!("checkpoint_{:05}.txt", iteration + 1)))?;
            }
        }
        if let Some(h) = hook.as_deref_mut() {
            if config.eval_every > 0 && (iteration + 1) % config.eval_every == 0 {
                h(iteration, &bundle)?;
            }
        }
    }
    if bundle.theta != theta_before {
        return Err(Error::Invalid(
            "history encoder changed during training".into(),
        ));
    }
    if let Some(dir) = out {
        write_file(&dir.join("metrics.csv"), &csv)?;
        bundle.save(&dir.join("policy.txt"))?;
        write_file(&dir.join("ats.txt"), &ats.to_table())?;
    }
    Ok(TrainOutput {
        bundle,
        ats,
        metrics,
        pretrain,
    })
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::NoClamp;
    use crate::nn::{Activation, LayerKind};
    use crate::world::{generate_demo, toy_schema, Skill, ToySchemaParams};
    use rand::Rng;

    fn gae_oracle(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|l| {
                        let delta = r[l] + gamma * v[l + 1] - v[l];
                        (gamma * lambda).powi((l - t) as i32) * delta
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_matches_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(1..80);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (g, l) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
            let (adv, ret) = compute_gae(&r, &v, g, l).unwrap();
            for (t, (a, o)) in adv.iter().zip(gae_oracle(&r, &v, g, l)).enumerate() {
                assert!((a - o).abs() < 1e-10);
                assert!((ret[t] - a - v[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_degenerate_cases() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, -1.0, 2.0, 4.0];
        let (adv, _) = compute_gae(&r, &v, 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert!((adv[t] - (r[t] + 0.9 * v[t + 1] - v[t])).abs() < 1e-15);
        }
        let (adv, _) = compute_gae(&r, &[0.0; 4], 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![6.0, 5.0, 3.0]);
        assert!(compute_gae(&r, &v[..3], 0.9, 0.9).is_err());
    }

    fn scalar_net(w: f64, b: f64) -> Net {
        let mut n = Net::new(&[(
            LayerKind::Dense {
                input: 1,
                output: 1,
            },
            Activation::Identity,
        )])
        .unwrap();
        n.params_mut().copy_from_slice(&[w, b]);
        n
    }

    #[test]
    fn surrogate_gradient_by_hand() {
        // mean = w·x + b, x = 2, a = 0.3, σ = 0.5, A = 1.5, old log-prob at w = 0.1, b = 0.
        let sigma = 0.5;
        let phi = scalar_net(0.1, 0.0);
        let old = gaussian_log_prob(&[0.2], &[0.3], sigma);
        let s = Sample {
            input: vec![2.0],
            action: vec![0.3],
            log_prob: old,
            advantage: 1.5,
            ret: 0.0,
        };
        let mut g = vec![0.0; 2];
        let (loss, clipped, _) = policy_loss_grad(&phi, &[&s], sigma, 0.2, &mut g).unwrap();
        // ratio 1: loss = -A, dL/dmean = -A (a - m)/σ² = -1.5 · 0.1 / 0.25 = -0.6.
        assert!((loss + 1.5).abs() < 1e-12);
        assert_eq!(clipped, 0.0);
        assert!((g[0] - (-0.6 * 2.0)).abs() < 1e-12);
        assert!((g[1] - (-0.6)).abs() < 1e-12);

        // Mean moved onto the action: ratio e^0.02 exceeds a 0.01 clip, so a positive advantage contributes nothing.
        let far = scalar_net(0.15, 0.0);
        let mut g = vec![0.0; 2];
        let (_, _, _) = policy_loss_grad(&far, &[&s], sigma, 0.01, &mut g).unwrap();
        let ratio = (gaussian_log_prob(&[0.3], &[0.3], sigma) - old).exp();
        assert!(ratio > 1.01);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_advantage_gives_zero_policy_gradient() {
        let phi = scalar_net(0.4, -0.1);
        let s = Sample {
            input: vec![1.0],
            action: vec![0.2],
            log_prob: -0.3,
            advantage: 0.0,
            ret: 1.0,
        };
        let mut g = vec![0.0; 2];
        policy_loss_grad(&phi, &[&s, &s], 0.055, 0.2, &mut g).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn value_gradient_by_hand() {
        let v = scalar_net(2.0, 1.0);
        let s = Sample {
            input: vec![3.0],
            action: vec![],
            log_prob: 0.0,
            advantage: 0.0,
            ret: 4.0,
        };
        let mut g = vec![0.0; 2];
        let loss = value_loss_grad(&v, &[&s], &mut g).unwrap();
        assert!((loss - 0.5 * 9.0).abs() < 1e-12);
        assert_eq!(g, vec![9.0, 3.0]);
    }

    #[test]
    fn advantages_are_standardized() {
        let mut s: Vec<Sample> = (0..5)
            .map(|i| Sample {
                input: vec![],
                action: vec![],
                log_prob: 0.0,
                advantage: i as f64,
                ret: 0.0,
            })
            .collect();
        normalize_advantages(&mut s);
        let mean: f64 = s.iter().map(|x| x.advantage).sum::<f64>() / 5.0;
        let var: f64 = s.iter().map(|x| x.advantage * x.advantage).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn switches_parse() {
        assert_eq!(Switches::ALL.ablate("all").unwrap(), Switches::NONE);
        assert_eq!(Switches::ALL.ablate("").unwrap(), Switches::ALL);
        let s = Switches::ALL.ablate("stg, he").unwrap();
        assert!(s.stf && !s.stg && s.ats && !s.he);
        assert!(Switches::ALL.ablate("bogus").is_err());
        let c = TrainerConfig {
            switches: Switches::NONE,
            ..TrainerConfig::default()
        };
        let p = c.effective_augment();
        assert_eq!(
            (p.p_external, p.p_neighborhood, p.lambda_s),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(c.effective_lambda_c(), 0.0);
    }

    fn dribble_dataset() -> Dataset {
        let p = WorldParams::default();
        let mut ds = Dataset::new(toy_schema(&ToySchemaParams::default()));
        ds.push(generate_demo(Skill::Dribble, 1.5, &p).unwrap().trajectory);
        ds
    }

    fn tiny_config() -> TrainerConfig {
        let mut c = TrainerConfig {
            samples_per_iteration: 240,
            envs: 4,
            minibatch: 64,
            epochs: 2,
            iterations: 2,
            ..TrainerConfig::default()
        };
        c.policy.hidden = vec![16, 16];
        c.policy.value_hidden = vec![16, 16];
        c.policy.psi_hidden = vec![16];
        c.policy.window = 10;
        c.he.steps = 20;
        c
    }

    #[test]
    fn reset_from_demo_frame_scores_one() {
        let ds = dribble_dataset();
        let traj = &ds.skills["dribble"][0];
        let w = RewardWeights::multiplicative(&ds.schema);
        let (s, cursor) = reset_from_clip(&ds.schema, traj, &WorldParams::default()).unwrap();
        assert_eq!(cursor, 1);
        let r = reward(&ds.schema, &to_state(&s), &traj.frames[0], &w).unwrap();
        assert!((r.value().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_clip_steps_are_skipped() {
        let ds = dribble_dataset();
        let traj = &ds.skills["dribble"][0];
        let clip =
            crate::augment::assemble_clip(traj.real(5).unwrap().clone(), traj, 6, 3).unwrap();
        let config = tiny_config();
        let w = RewardWeights::multiplicative(&ds.schema);
        let g = StitchedGraph::plain(&ds, "dribble", &config.augment).unwrap();
        let ctx = RolloutContext {
            schema: &ds.schema,
            weights: &w,
            samplers: vec![(
                "dribble".into(),
                Sampler {
                    schema: &ds.schema,
                    graph: &g,
                    weights: &w,
                    params: config.augment,
                    epsilon: schema_epsilon(&ds.schema),
                    clamp: &NoClamp,
                },
            )],
            config: &config,
        };
        let (bundle, _) = init_bundle(&ds, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (seg, rewards) =
            run_episode(&ctx, &bundle, "dribble", &clip, 10, 0.055, &mut rng).unwrap();
        assert!(rewards[..3].iter().all(|r| *r == FrameReward::Skipped));
        assert!(rewards[3..].iter().all(|r| r.value().is_some()));
        assert_eq!(&seg.rewards[..3], &[0.0; 3]);
        assert_eq!(seg.values.len(), 11);
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_encoder() {
        let ds = dribble_dataset();
        let config = tiny_config();
        let a = train(&ds, &config, None, None).unwrap();
        let b = train(&ds, &config, None, None).unwrap();
        let rows = |o: &TrainOutput| o.metrics.iter().map(|m| m.csv_row()).collect::<Vec<_>>();
        assert_eq!(rows(&a), rows(&b));
        assert_eq!(a.bundle, b.bundle);
        let (fresh, _) = init_bundle(&ds, &config).unwrap();
        assert_eq!(a.bundle.theta, fresh.theta);
        assert_ne!(a.bundle.phi, fresh.phi);
    }

    #[test]
    fn rollouts_do_not_depend_on_thread_count() {
        let ds = dribble_dataset();
        let config = tiny_config();
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let parallel = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let a = serial.install(|| train(&ds, &config, None, None).unwrap());
        let b = parallel.install(|| train(&ds, &config, None, None).unwrap());
        assert_eq!(a.bundle, b.bundle);
    }
}
