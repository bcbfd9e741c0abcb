//! Policy, value function, history encoder and next-state predictor.
//!
//! The policy mean reads `[c, ŝ_t, h_t]`: a fixed condition code of the
//! skill, the normalized local observation and the history embedding
//! `h_t = θ(ŝ_{t-k}, …, ŝ_{t-1})`. Window slots before the episode start are
//! zeros with a padding flag set. The encoder θ is trained only by the
//! next-state objective and stays frozen afterwards.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_len, Error, Result};
use crate::io::fmt_f64;
use crate::nn::{dot, Activation, LayerKind, Net, Sgd};
use crate::trajectory::{local_observation, Dataset, Frame};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    /// History length k.
    pub window: usize,
    pub he_channels: usize,
    pub he_kernel: usize,
    pub he_stride: usize,
    /// Embedding size μ.
    pub he_dim: usize,
    pub psi_hidden: Vec<usize>,
    pub cond_dim: usize,
    /// Action standard deviation during training.
    pub sigma: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: vec![256, 128, 128],
            value_hidden: vec![256, 128, 128],
            window: 30,
            he_channels: 16,
            he_kernel: 4,
            he_stride: 2,
            he_dim: 3,
            psi_hidden: vec![64, 64],
            cond_dim: 8,
            sigma: 0.055,
        }
    }
}

/// Per-dimension affine normalization fitted once on demonstration frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNormalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Smallest standard deviation used for scaling.
const MIN_SCALE: f64 = 0.1;

/// Normalized observations are clamped to this magnitude.
pub const OBS_CLIP: f64 = 5.0;

impl ObsNormalizer {
    pub fn identity(dim: usize) -> Self {
        ObsNormalizer {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Invalid("no observations to fit".into()))?;
        let dim = first.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            ensure_len(dim, s.len())?;
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        Ok(ObsNormalizer {
            shift: mean,
            scale: var.iter().map(|v| v.sqrt().max(MIN_SCALE)).collect(),
        })
    }

    /// Fits on the local observations of every real frame.
    pub fn fit_dataset(dataset: &Dataset) -> Result<Self> {
        let obs: Vec<Vec<f64>> = dataset
            .skills
            .values()
            .flatten()
            .flat_map(|t| t.frames.iter().filter_map(Frame::as_real))
            .map(|s| local_observation(&dataset.schema, s))
            .collect();
        Self::fit(&obs)
    }

    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((x, m), s)| ((x - m) / s).clamp(-OBS_CLIP, OBS_CLIP))
            .collect()
    }
}

/// The last `window` normalized observations of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    window: usize,
    dim: usize,
    frames: VecDeque<Option<Vec<f64>>>,
}

impl History {
    pub fn new(window: usize, dim: usize) -> Self {
        History {
            window,
            dim,
            frames: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Appends an observation; `None` stands for a missing frame.
    pub fn push(&mut self, obs: Option<Vec<f64>>) {
        if self.frames.len() == self.window {
            self.frames.pop_front();
        }
        self.frames.push_back(obs);
    }

    /// Encoder input, oldest slot first, `dim + 1` channels per slot.
    pub fn encoder_input(&self) -> Vec<f64> {
        let ch = self.dim + 1;
        let mut out = vec![0.0; self.window * ch];
        let pad = self.window - self.frames.len();
        for t in 0..pad {
            out[t * ch + self.dim] = 1.0;
        }
        for (i, f) in self.frames.iter().enumerate() {
            let slot = &mut out[(pad + i) * ch..(pad + i + 1) * ch];
            match f {
                Some(obs) => slot[..self.dim].copy_from_slice(obs),
                None => slot[self.dim] = 1.0,
            }
        }
        out
    }
}

pub fn gaussian_log_prob(mean: &[f64], action: &[f64], sigma: f64) -> f64 {
    let norm = (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    mean.iter()
        .zip(action)
        .map(|(m, a)| -(a - m).powi(2) / (2.0 * sigma * sigma) - norm)
        .sum()
}

/// Gradient of the log-density with respect to the mean.
pub fn gaussian_log_prob_grad(mean: &[f64], action: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter()
        .zip(action)
        .map(|(m, a)| (a - m) / (sigma * sigma))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub action: Vec<f64>,
    pub mean: Vec<f64>,
    /// Log-density of `action`; 0 for a deterministic policy.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub config: PolicyConfig,
    pub skills: Vec<String>,
    pub cond_embed: Vec<Vec<f64>>,
    pub normalizer: ObsNormalizer,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub phi: Net,
    pub value: Net,
    pub theta: Net,
    pub psi: Net,
    pub sigma: f64,
    /// Whether `h_t` comes from θ; otherwise it is zero.
    pub use_he: bool,
}

fn encoder_net(c: &PolicyConfig, channels: usize) -> Result<Net> {
    let mut spec = Vec::new();
    let (mut len, mut cin) = (c.window, channels);
    for _ in 0..3 {
        let kernel = c.he_kernel.min(len);
        let stride = if len > kernel { c.he_stride } else { 1 };
        spec.push((
            LayerKind::Conv1d {
                channels_in: cin,
                channels_out: c.he_channels,
                kernel,
                stride,
                length_in: len,
            },
            Activation::Relu,
        ));
        len = (len - kernel) / stride + 1;
        cin = c.he_channels;
    }
    spec.push((
        LayerKind::Dense {
            input: len * cin,
            output: c.he_dim,
        },
        Activation::Identity,
    ));
    Net::new(&spec)
}

impl PolicyBundle {
    pub fn new(
        config: PolicyConfig,
        skills: Vec<String>,
        normalizer: ObsNormalizer,
        action_dim: usize,
        use_he: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let obs_dim = normalizer.shift.len();
        if skills.is_empty() || skills.len() > config.cond_dim {
            return Err(Error::Invalid(format!(
                "{} skills do not fit a condition code of size {}",
                skills.len(),
                config.cond_dim
            )));
        }
        if !(config.sigma >= 0.0) || config.window == 0 || config.he_dim == 0 {
            return Err(Error::Invalid("bad policy configuration".into()));
        }
        let cond_embed = (0..skills.len())
            .map(|i| {
                (0..config.cond_dim)
                    .map(|j| if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let input = config.cond_dim + obs_dim + config.he_dim;
        let mut phi = Net::mlp(input, &config.hidden, action_dim, Activation::Identity)?;
        let mut value = Net::mlp(input, &config.value_hidden, 1, Activation::Identity)?;
        let mut theta = encoder_net(&config, obs_dim + 1)?;
        let mut psi = Net::mlp(input, &config.psi_hidden, obs_dim, Activation::Identity)?;
        phi.init(rng);
        phi.scale_last_layer(0.01);
        value.init(rng);
        theta.init(rng);
        psi.init(rng);
        psi.scale_last_layer(0.01);
        Ok(PolicyBundle {
            sigma: config.sigma,
            config,
            skills,
            cond_embed,
            normalizer,
            obs_dim,
            action_dim,
            phi,
            value,
            theta,
            psi,
            use_he,
        })
    }

    pub fn skill_index(&self, skill: &str) -> Result<usize> {
        self.skills
            .iter()
            .position(|s| s == skill)
            .ok_or_else(|| Error::UnknownSkill(skill.to_string()))
    }

    pub fn input_dim(&self) -> usize {
        self.config.cond_dim + self.obs_dim + self.config.he_dim
    }

    pub fn new_history(&self) -> History {
        History::new(self.config.window, self.obs_dim)
    }

    /// Embedding of a history; zero when the encoder is disabled.
    pub fn he_encode(&self, history: &History) -> Result<Vec<f64>> {
        if !self.use_he {
            return Ok(vec![0.0; self.config.he_dim]);
        }
        self.encode_window(&history.encoder_input())
    }

    pub fn encode_window(&self, window: &[f64]) -> Result<Vec<f64>> {
        self.theta.predict(window)
    }

    /// `[c, ŝ, h]` for a normalized observation.
    pub fn policy_input(&self, skill: usize, obs_norm: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        ensure_len(self.obs_dim, obs_norm.len())?;
        ensure_len(self.config.he_dim, h.len())?;
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(&self.cond_embed[skill]);
        x.extend_from_slice(obs_norm);
        x.extend_from_slice(h);
        Ok(x)
    }

    /// Samples `a ~ N(φ(x), σ²I)`.
    pub fn act(&self, input: &[f64], sigma: f64, rng: &mut impl Rng) -> Result<ActOutput> {
        let mean = self.phi.predict(input)?;
        if sigma == 0.0 {
            return Ok(ActOutput {
                action: mean.clone(),
                mean,
                log_prob: 0.0,
            });
        }
        let action: Vec<f64> = mean
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let log_prob = gaussian_log_prob(&mean, &action, sigma);
        Ok(ActOutput {
            action,
            mean,
            log_prob,
        })
    }

    pub fn state_value(&self, input: &[f64]) -> Result<f64> {
        Ok(self.value.predict(input)?[0])
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let floats = |v: &[f64]| v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ");
        let mut s = String::from("policy-bundle 1\n");
        let _ = writeln!(s, "obs_dim {}", self.obs_dim);
        let _ = writeln!(s, "action_dim {}", self.action_dim);
        let _ = writeln!(s, "sigma {}", fmt_f64(self.sigma));
        let _ = writeln!(s, "use_he {}", u8::from(self.use_he));
        let _ = writeln!(s, "hidden {}", list(&c.hidden));
        let _ = writeln!(s, "value_hidden {}", list(&c.value_hidden));
        let _ = writeln!(s, "psi_hidden {}", list(&c.psi_hidden));
        let _ = writeln!(
            s,
            "encoder {} {} {} {} {}",
            c.window, c.he_channels, c.he_kernel, c.he_stride, c.he_dim
        );
        let _ = writeln!(s, "cond_dim {}", c.cond_dim);
        let _ = writeln!(s, "train_sigma {}", fmt_f64(c.sigma));
        let _ = writeln!(s, "skills {}", self.skills.join(" "));
        let _ = writeln!(s, "norm_shift {}", floats(&self.normalizer.shift));
        let _ = writeln!(s, "norm_scale {}", floats(&self.normalizer.scale));
        for (name, net) in [
            ("phi", &self.phi),
            ("value", &self.value),
            ("theta", &self.theta),
            ("psi", &self.psi),
        ] {
            s.push_str(&net.to_text(name));
        }
        s
    }

    pub fn from_text(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing `{key}`")))?;
            let mut f = line.split_whitespace();
            if f.next() != Some(key) {
                return Err(Error::parse(path, ln, format!("expected `{key}`")));
            }
            Ok((ln, f.map(str::to_string).collect()))
        };
        fn nums<T: std::str::FromStr>(
            path: &Path,
            (ln, v): (usize, Vec<String>),
        ) -> Result<Vec<T>> {
            v.iter()
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::parse(path, ln, format!("bad value `{x}`")))
                })
                .collect()
        }
        fn one<T: std::str::FromStr + Copy>(path: &Path, f: (usize, Vec<String>)) -> Result<T> {
            let ln = f.0;
            let v: Vec<T> = nums(path, f)?;
            match v.as_slice() {
                [x] => Ok(*x),
                _ => Err(Error::parse(path, ln, "expected one value")),
            }
        }
        let (ln, version) = field("policy-bundle")?;
        if version != ["1"] {
            return Err(Error::parse(path, ln, "unsupported bundle version"));
        }
        let obs_dim: usize = one(path, field("obs_dim")?)?;
        let action_dim: usize = one(path, field("action_dim")?)?;
        let sigma: f64 = one(path, field("sigma")?)?;
        let use_he: u8 = one(path, field("use_he")?)?;
        let hidden = nums(path, field("hidden")?)?;
        let value_hidden = nums(path, field("value_hidden")?)?;
        let psi_hidden = nums(path, field("psi_hidden")?)?;
        let enc_field = field("encoder")?;
        let enc_ln = enc_field.0;
        let enc: Vec<usize> = nums(path, enc_field)?;
        if enc.len() != 5 {
            return Err(Error::parse(path, enc_ln, "encoder needs 5 values"));
        }
        let cond_dim: usize = one(path, field("cond_dim")?)?;
        let train_sigma: f64 = one(path, field("train_sigma")?)?;
        let skills = field("skills")?.1;
        let shift = nums(path, field("norm_shift")?)?;
        let scale = nums(path, field("norm_scale")?)?;
        let config = PolicyConfig {
            hidden,
            value_hidden,
            window: enc[0],
            he_channels: enc[1],
            he_kernel: enc[2],
            he_stride: enc[3],
            he_dim: enc[4],
            psi_hidden,
            cond_dim,
            sigma: train_sigma,
        };
        let mut nets = Vec::new();
        for expected in ["phi", "value", "theta", "psi"] {
            let (name, net) = Net::from_lines(path, &mut lines)?;
            if name != expected {
                return Err(Error::parse(
                    path,
                    0,
                    format!("expected network `{expected}`, found `{name}`"),
                ));
            }
            nets.push(net);
        }
        let psi = nets.pop().unwrap();
        let theta = nets.pop().unwrap();
        let value = nets.pop().unwrap();
        let phi = nets.pop().unwrap();
        let input = cond_dim + obs_dim + config.he_dim;
        if phi.input_dim() != input
            || phi.output_dim() != action_dim
            || value.input_dim() != input
            || theta.input_dim() != config.window * (obs_dim + 1)
            || theta.output_dim() != config.he_dim
            || shift.len() != obs_dim
            || scale.len() != obs_dim
        {
            return Err(Error::parse(
                path,
                0,
                "network shapes disagree with the header",
            ));
        }
        let cond_embed = (0..skills.len())
            .map(|i| {
                (0..cond_dim)
                    .map(|j| if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok(PolicyBundle {
            config,
            skills,
            cond_embed,
            normalizer: ObsNormalizer { shift, scale },
            obs_dim,
            action_dim,
            phi,
            value,
            theta,
            psi,
            sigma,
            use_he: use_he != 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(path, &text)
    }
}

/// One next-state prediction example.
#[derive(Debug, Clone, PartialEq)]
pub struct HeSample {
    pub skill: usize,
    pub window: Vec<f64>,
    pub obs: Vec<f64>,
    pub next: Vec<f64>,
}

/// Consecutive real frame pairs of every trajectory, with the normalized
/// history preceding the first frame.
pub fn he_samples(bundle: &PolicyBundle, dataset: &Dataset) -> Result<Vec<HeSample>> {
    let mut out = Vec::new();
    for (skill, trajs) in &dataset.skills {
        let Ok(si) = bundle.skill_index(skill) else {
            continue;
        };
        for traj in trajs {
            let obs: Vec<Option<Vec<f64>>> = traj
                .frames
                .iter()
                .map(|f| {
                    f.as_real().map(|s| {
                        bundle
                            .normalizer
                            .apply(&local_observation(&dataset.schema, s))
                    })
                })
                .collect();
            let mut history = bundle.new_history();
            for t in 0..obs.len().saturating_sub(1) {
                if let (Some(cur), Some(next)) = (&obs[t], &obs[t + 1]) {
                    out.push(HeSample {
                        skill: si,
                        window: history.encoder_input(),
                        obs: cur.clone(),
                        next: next.clone(),
                    });
                }
                history.push(obs[t].clone());
            }
        }
    }
    Ok(out)
}

/// Batch loss of the next-state objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainLoss {
    pub total: f64,
    pub prediction: f64,
    pub regularizer: f64,
}

/// Joint SGD on θ and ψ for
/// `λ_a ‖ŝ_{t+1} - (ŝ_t + ψ([c, ŝ_t, h_t]))‖² + λ_b ‖h_t‖²`, averaged over the batch.
/// With the encoder disabled `h_t = 0` and only ψ is trained.
pub struct HePretrainer {
    pub lambda_a: f64,
    pub lambda_b: f64,
    theta_opt: Sgd,
    psi_opt: Sgd,
}

impl HePretrainer {
    pub fn new(
        bundle: &PolicyBundle,
        lr: f64,
        momentum: f64,
        lambda_a: f64,
        lambda_b: f64,
    ) -> Self {
        HePretrainer {
            lambda_a,
            lambda_b,
            theta_opt: Sgd::new(bundle.theta.param_count(), lr, momentum),
            psi_opt: Sgd::new(bundle.psi.param_count(), lr, momentum),
        }
    }

    /// Loss and gradients for θ and ψ at the current parameters.
    pub fn loss_and_grad(
        &self,
        bundle: &PolicyBundle,
        batch: &[&HeSample],
    ) -> Result<(PretrainLoss, Vec<f64>, Vec<f64>)> {
        let n = batch.len() as f64;
        let mut g_theta = vec![0.0; bundle.theta.param_count()];
        let mut g_psi = vec![0.0; bundle.psi.param_count()];
        let mut loss = PretrainLoss {
            total: 0.0,
            prediction: 0.0,
            regularizer: 0.0,
        };
        let mu = bundle.config.he_dim;
        for s in batch {
            let tc = if bundle.use_he {
                Some(bundle.theta.forward(&s.window)?)
            } else {
                None
            };
            let h = tc
                .as_ref()
                .map_or_else(|| vec![0.0; mu], |c| c.output().to_vec());
            let x = bundle.policy_input(s.skill, &s.obs, &h)?;
            let pc = bundle.psi.forward(&x)?;
            let err: Vec<f64> = pc
                .output()
                .iter()
                .zip(&s.obs)
                .zip(&s.next)
                .map(|((d, o), t)| o + d - t)
                .collect();
            let pred = self.lambda_a * dot(&err, &err) / n;
            let reg = self.lambda_b * dot(&h, &h) / n;
            loss.prediction += pred;
            loss.regularizer += reg;
            let dy: Vec<f64> = err.iter().map(|e| 2.0 * self.lambda_a * e / n).collect();
            let dx = bundle.psi.backward(&pc, &dy, &mut g_psi)?;
            let dh: Vec<f64> = dx[dx.len() - mu..]
                .iter()
                .zip(&h)
                .map(|(g, hv)| g + 2.0 * self.lambda_b * hv / n)
                .collect();
            if let Some(tc) = &tc {
                bundle.theta.backward(tc, &dh, &mut g_theta)?;
            }
        }
        loss.total = loss.prediction + loss.regularizer;
        Ok((loss, g_theta, g_psi))
    }

    /// One gradient step; returns the batch loss before the step.
    pub fn step(&mut self, bundle: &mut PolicyBundle, batch: &[&HeSample]) -> Result<PretrainLoss> {
        let (loss, g_theta, g_psi) = self.loss_and_grad(bundle, batch)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("history encoder loss".into()));
        }
        self.theta_opt.step(&mut bundle.theta, &g_theta);
        self.psi_opt.step(&mut bundle.psi, &g_psi);
        Ok(loss)
    }
}

/// Runs `steps` minibatch steps and returns the loss of each.
pub fn pretrain_he(
    bundle: &mut PolicyBundle,
    samples: &[HeSample],
    trainer: &mut HePretrainer,
    steps: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PretrainLoss>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no pre-training samples".into()));
    }
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<&HeSample> = (0..batch_size.min(samples.len()))
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        curve.push(trainer.step(bundle, &batch)?);
    }
    Ok(curve)
}

/// Mean squared next-state error over `samples`.
pub fn prediction_error(bundle: &PolicyBundle, samples: &[&HeSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let h = if bundle.use_he {
            bundle.encode_window(&s.window)?
        } else {
            vec![0.0; bundle.config.he_dim]
        };
        let pred = bundle
            .psi
            .predict(&bundle.policy_input(s.skill, &s.obs, &h)?)?;
        total += pred
            .iter()
            .zip(&s.obs)
            .zip(&s.next)
            .map(|((d, o), t)| (o + d - t).powi(2))
            .sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}
