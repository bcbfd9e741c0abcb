//! Success rates and tracking reward of a controller over seeded trials.
//!
//! Trial `i` draws its start from the random stream `(seed, i)`, so metrics
//! are reproducible and independent of the thread count. Starts are uniform
//! over trajectories of the start skill, then uniform over their real frames.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::augment::{epsilon_nsi, schema_epsilon};
use crate::error::{Error, Result};
use crate::policy::{History, PolicyBundle};
use crate::reward::{normalized_reward, reward, RewardWeights};
use crate::trainer::{observe, stream_rng, Stream};
use crate::trajectory::{Dataset, State};
use crate::world::{
    from_state, is_success, scripted_action, step, to_state, Action, Actuator, Skill,
    SuccessParams, ToyClamp, WorldParams, WorldState,
};

/// Closed-loop controller driven by a skill condition.
pub trait Controller: Sync {
    type Memory;
    fn begin(&self, condition: &str) -> Result<Self::Memory>;
    fn act(&self, memory: &mut Self::Memory, state: &WorldState) -> Result<Action>;
}

/// Deterministic policy: the Gaussian mean.
pub struct PolicyController<'a> {
    pub bundle: &'a PolicyBundle,
    pub dataset: &'a Dataset,
    pub actuator: Actuator,
}

pub struct PolicyMemory {
    skill: usize,
    history: History,
}

impl Controller for PolicyController<'_> {
    type Memory = PolicyMemory;

    fn begin(&self, condition: &str) -> Result<PolicyMemory> {
        Ok(PolicyMemory {
            skill: self.bundle.skill_index(condition)?,
            history: self.bundle.new_history(),
        })
    }

    fn act(&self, m: &mut PolicyMemory, state: &WorldState) -> Result<Action> {
        let obs = observe(self.bundle, &self.dataset.schema, state);
        let h = self.bundle.he_encode(&m.history)?;
        let input = self.bundle.policy_input(m.skill, &obs, &h)?;
        let mean = self.bundle.phi.predict(&input)?;
        m.history.push(Some(obs));
        Ok(self.actuator.apply(state, &mean))
    }
}

/// The demonstration controllers.
pub struct ScriptedController {
    pub world: WorldParams,
}

impl Controller for ScriptedController {
    type Memory = Skill;

    fn begin(&self, condition: &str) -> Result<Skill> {
        condition.parse()
    }

    fn act(&self, skill: &mut Skill, state: &WorldState) -> Result<Action> {
        Ok(scripted_action(*skill, state, &self.world))
    }
}

/// Applies no force and never grabs.
pub struct ZeroController;

impl Controller for ZeroController {
    type Memory = ();

    fn begin(&self, _: &str) -> Result<()> {
        Ok(())
    }

    fn act(&self, _: &mut (), _: &WorldState) -> Result<Action> {
        Ok(Action::ZERO)
    }
}

/// Reference data and world constants shared by all trials.
pub struct EvalContext<'a> {
    pub dataset: &'a Dataset,
    pub world: WorldParams,
    pub success: SuccessParams,
    pub weights: RewardWeights,
}

impl<'a> EvalContext<'a> {
    pub fn new(dataset: &'a Dataset, world: WorldParams, success: SuccessParams) -> Self {
        EvalContext {
            weights: RewardWeights::multiplicative(&dataset.schema),
            dataset,
            world,
            success,
        }
    }

    /// Uniform trajectory, then a uniform real frame below `limit` frames
    /// from its end.
    fn draw_start(
        &self,
        skill: &str,
        tail: usize,
        rng: &mut impl Rng,
    ) -> Result<(usize, usize, State)> {
        let trajs = self.dataset.skill(skill)?;
        let ti = rng.random_range(0..trajs.len());
        let traj = &trajs[ti];
        let idx: Vec<usize> = traj
            .real_indices()
            .filter(|&i| i + tail < traj.frames.len())
            .collect();
        if idx.is_empty() {
            return Err(Error::Invalid(format!(
                "`{skill}` has no usable start frame"
            )));
        }
        let k = idx[rng.random_range(0..idx.len())];
        Ok((ti, k, traj.real(k).unwrap().clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Sr,
    Tsr,
    Ensr,
    Nr,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Sr => "SR",
            Metric::Tsr => "TSR",
            Metric::Ensr => "eNSR",
            Metric::Nr => "NR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub metric: Metric,
    pub from: String,
    pub to: String,
    /// Multiple of the schema perturbation half-widths.
    pub epsilon: f64,
    pub trials: usize,
    pub value: f64,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    /// Control steps per trial; 0 when the trial follows the reference.
    pub horizon: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "metric,skill_pair,epsilon,trials,value,ci_halfwidth,horizon,seed";

impl EvalResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{}->{},{},{},{:.6},{:.6},{},{}",
            self.metric.as_str(),
            self.from,
            self.to,
            self.epsilon,
            self.trials,
            self.value,
            self.half_width,
            self.horizon,
            self.seed
        )
    }
}

pub fn to_csv(results: &[EvalResult]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in results {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

fn rollout<C: Controller>(
    ctrl: &C,
    condition: &str,
    start: WorldState,
    steps: usize,
    p: &WorldParams,
) -> Result<Vec<WorldState>> {
    let mut memory = ctrl.begin(condition)?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(start);
    for _ in 0..steps {
        let s = states.last().unwrap();
        let a = ctrl.act(&mut memory, s)?;
        let next = step(s, &a, p)?;
        states.push(next);
    }
    Ok(states)
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        Err(Error::Invalid("at least one trial is required".into()))
    } else {
        Ok(())
    }
}

/// Runs `trials` independent Bernoulli trials and averages them in order.
fn success_rate<C: Controller>(
    ctx: &EvalContext<'_>,
    ctrl: &C,
    from: &str,
    to: &str,
    epsilon_scale: f64,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<f64> {
    check_trials(trials)?;
    let target: Skill = to.parse()?;
    ctx.dataset.skill(from)?;
    ctx.dataset.skill(to)?;
    let schema = &ctx.dataset.schema;
    let epsilon: Vec<f64> = schema_epsilon(schema)
        .iter()
        .map(|e| e * epsilon_scale)
        .collect();
    let clamp = ToyClamp {
        ball_radius: ctx.world.ball_radius,
    };
    let outcomes: Vec<Result<bool>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(seed, Stream::Eval { trial });
            let (_, _, mut start) = ctx.draw_start(from, 0, &mut rng)?;
            if epsilon_scale > 0.0 {
                start = epsilon_nsi(schema, &start, &epsilon, &clamp, &mut rng);
            }
            let s0 = from_state(schema, &start, &ctx.world)?;
            let states = rollout(ctrl, to, s0, horizon, &ctx.world)?;
            Ok(is_success(target, &states, &ctx.success))
        })
        .collect();
    let mut hits = 0usize;
    for o in outcomes {
        hits += usize::from(o?);
    }
    Ok(hits as f64 / trials as f64)
}

fn bernoulli(
    metric: Metric,
    from: &str,
    to: &str,
    epsilon: f64,
    trials: usize,
    p: f64,
    horizon: usize,
    seed: u64,
) -> EvalResult {
    EvalResult {
        metric,
        from: from.to_string(),
        to: to.to_string(),
        epsilon,
        trials,
        value: p,
        half_width: 1.96 * (p * (1.0 - p) / trials as f64).sqrt(),
        horizon,
        seed,
    }
}

/// Success of `skill` from its own reference states.
pub fn eval_sr<C: Controller>(
    ctx: &EvalContext<'_>,
    ctrl: &C,
    skill: &str,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalResult> {
    let p = success_rate(ctx, ctrl, skill, skill, 0.0, trials, horizon, seed)?;
    Ok(bernoulli(
        Metric::Sr,
        skill,
        skill,
        0.0,
        trials,
        p,
        horizon,
        seed,
    ))
}

/// Success of `to` when started from reference states of `from`.
pub fn eval_tsr<C: Controller>(
    ctx: &EvalContext<'_>,
    ctrl: &C,
    from: &str,
    to: &str,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalResult> {
    let p = success_rate(ctx, ctrl, from, to, 0.0, trials, horizon, seed)?;
    Ok(bernoulli(
        Metric::Tsr,
        from,
        to,
        0.0,
        trials,
        p,
        horizon,
        seed,
    ))
}

/// Success of `skill` from perturbed reference states; the perturbation
/// half-widths are `epsilon_scale` times the schema's.
pub fn eval_ensr<C: Controller>(
    ctx: &EvalContext<'_>,
    ctrl: &C,
    skill: &str,
    epsilon_scale: f64,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalResult> {
    if !(epsilon_scale >= 0.0) {
        return Err(Error::Invalid(format!(
            "epsilon scale {epsilon_scale} is negative"
        )));
    }
    let p = success_rate(
        ctx,
        ctrl,
        skill,
        skill,
        epsilon_scale,
        trials,
        horizon,
        seed,
    )?;
    Ok(bernoulli(
        Metric::Ensr,
        skill,
        skill,
        epsilon_scale,
        trials,
        p,
        horizon,
        seed,
    ))
}

/// Mean per-frame imitation reward while following the reference from a
/// random start to its end.
pub fn eval_nr<C: Controller>(
    ctx: &EvalContext<'_>,
    ctrl: &C,
    skill: &str,
    trials: usize,
    seed: u64,
) -> Result<EvalResult> {
    check_trials(trials)?;
    let schema = &ctx.dataset.schema;
    let values: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(seed, Stream::Eval { trial });
            let (ti, k, start) = ctx.draw_start(skill, 1, &mut rng)?;
            let traj = &ctx.dataset.skill(skill)?[ti];
            let s0 = from_state(schema, &start, &ctx.world)?;
            let states = rollout(ctrl, skill, s0, traj.frames.len() - 1 - k, &ctx.world)?;
            let rewards = states[1..]
                .iter()
                .zip(&traj.frames[k + 1..])
                .map(|(s, f)| reward(schema, &to_state(s), f, &ctx.weights))
                .collect::<Result<Vec<_>>>()?;
            normalized_reward(&rewards)
        })
        .collect();
    let mut sum = 0.0;
    let mut sq = 0.0;
    for v in values {
        let v = v?;
        sum += v;
        sq += v * v;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    Ok(EvalResult {
        metric: Metric::Nr,
        from: skill.to_string(),
        to: skill.to_string(),
        epsilon: 0.0,
        trials,
        value: mean,
        half_width: 1.96 * (var / n).sqrt(),
        horizon: 0,
        seed,
    })
}
