//! Adaptive trajectory sampling.
//!
//! Start index `i` of a reference trajectory is drawn with probability
//! proportional to `exp(-λ_s · r̄_i)`, where `r̄_i` is the running mean reward
//! per frame of episodes started at `i`. Skill classes are balanced the same
//! way with `λ_c` and a per-skill running mean.
//!
//! Running means are exponential moving averages initialized at 0, so starts
//! that were never visited have the highest priority.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::reward::FrameReward;
use crate::trajectory::Dataset;

pub const DEFAULT_DECAY: f64 = 0.1;

/// Softmax of `-λ · values`, computed with a max shift for stability.
pub fn softmax_neg(values: &[f64], lambda: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let logits: Vec<f64> = values.iter().map(|v| -lambda * v).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Draws an index from a probability vector by inverse CDF.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final partial sum.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningMean {
    pub mean: f64,
    pub count: u64,
}

impl RunningMean {
    fn fold(&mut self, value: f64, alpha: f64) {
        self.mean = (1.0 - alpha) * self.mean + alpha * value;
        self.count += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStats {
    /// One entry per start index `0..T`.
    pub starts: Vec<RunningMean>,
    /// Whether the reference frame at each start index is real.
    pub startable: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillStats {
    pub trajectories: Vec<TrajectoryStats>,
    pub class: RunningMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtsStats {
    pub alpha: f64,
    pub skills: BTreeMap<String, SkillStats>,
}

fn mean_of(rewards: &[FrameReward]) -> Option<f64> {
    let vals: Vec<f64> = rewards.iter().filter_map(|r| r.value()).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl AtsStats {
    pub fn new(dataset: &Dataset, alpha: f64) -> Self {
        let skills = dataset
            .skills
            .iter()
            .map(|(name, trajs)| {
                let trajectories = trajs
                    .iter()
                    .map(|t| {
                        let n = t.frames.len().saturating_sub(1);
                        TrajectoryStats {
                            starts: vec![RunningMean::default(); n],
                            startable: t.frames[..n].iter().map(|f| !f.is_masked()).collect(),
                        }
                    })
                    .collect();
                (
                    name.clone(),
                    SkillStats {
                        trajectories,
                        class: RunningMean::default(),
                    },
                )
            })
            .collect();
        AtsStats { alpha, skills }
    }

    fn skill(&self, skill: &str) -> Result<&SkillStats> {
        self.skills
            .get(skill)
            .ok_or_else(|| Error::UnknownSkill(skill.to_string()))
    }

    fn traj(&self, skill: &str, traj: usize) -> Result<&TrajectoryStats> {
        self.skill(skill)?
            .trajectories
            .get(traj)
            .ok_or_else(|| Error::Invalid(format!("skill `{skill}` has no trajectory {traj}")))
    }

    /// Folds the mean of the non-skipped rewards of one episode started at
    /// `start` into that start's running mean and into the skill's class mean.
    /// Episodes with no scored frames leave the statistics unchanged.
    pub fn record_episode(
        &mut self,
        skill: &str,
        traj: usize,
        start: usize,
        rewards: &[FrameReward],
    ) -> Result<()> {
        let alpha = self.alpha;
        let stats = self
            .skills
            .get_mut(skill)
            .ok_or_else(|| Error::UnknownSkill(skill.to_string()))?;
        let entry = stats
            .trajectories
            .get_mut(traj)
            .and_then(|t| t.starts.get_mut(start))
            .ok_or_else(|| Error::Invalid(format!("no start {start} in {skill}[{traj}]")))?;
        let Some(mean) = mean_of(rewards) else {
            log::warn!("episode of {skill}[{traj}] from {start} has no scored frames; ignored");
            return Ok(());
        };
        entry.fold(mean, alpha);
        stats.class.fold(mean, alpha);
        Ok(())
    }

    /// Updates only the class mean, for episodes started outside the
    /// skill's own reference states.
    pub fn record_class_episode(&mut self, skill: &str, rewards: &[FrameReward]) -> Result<()> {
        let alpha = self.alpha;
        let stats = self
            .skills
            .get_mut(skill)
            .ok_or_else(|| Error::UnknownSkill(skill.to_string()))?;
        if let Some(mean) = mean_of(rewards) {
            stats.class.fold(mean, alpha);
        }
        Ok(())
    }

    /// Start-index distribution over `0..T`; masked starts get probability 0.
    pub fn start_distribution(&self, skill: &str, traj: usize, lambda_s: f64) -> Result<Vec<f64>> {
        let t = self.traj(skill, traj)?;
        let idx: Vec<usize> = (0..t.starts.len()).filter(|i| t.startable[*i]).collect();
        if idx.is_empty() {
            return Err(Error::Invalid(format!(
                "{skill}[{traj}] has no startable frame"
            )));
        }
        let means: Vec<f64> = idx.iter().map(|i| t.starts[*i].mean).collect();
        let p = softmax_neg(&means, lambda_s);
        let mut out = vec![0.0; t.starts.len()];
        for (i, pi) in idx.into_iter().zip(p) {
            out[i] = pi;
        }
        Ok(out)
    }

    pub fn sample_start(
        &self,
        skill: &str,
        traj: usize,
        lambda_s: f64,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let p = self.start_distribution(skill, traj, lambda_s)?;
        Ok(sample_index(&p, rng))
    }

    /// Distribution over skills (in name order) from the class means.
    pub fn skill_distribution(&self, lambda_c: f64) -> Vec<(String, f64)> {
        let means: Vec<f64> = self.skills.values().map(|s| s.class.mean).collect();
        self.skills
            .keys()
            .cloned()
            .zip(softmax_neg(&means, lambda_c))
            .collect()
    }

    pub fn sample_skill(&self, lambda_c: f64, rng: &mut impl Rng) -> String {
        let dist = self.skill_distribution(lambda_c);
        let p: Vec<f64> = dist.iter().map(|d| d.1).collect();
        dist[sample_index(&p, rng)].0.clone()
    }

    /// Mean of `r̄` over the visited starts of a skill, for reporting.
    pub fn skill_summary(&self, skill: &str) -> Option<f64> {
        let s = self.skills.get(skill)?;
        let vals: Vec<f64> = s
            .trajectories
            .iter()
            .flat_map(|t| t.starts.iter().filter(|r| r.count > 0).map(|r| r.mean))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Snapshot as a whitespace separated table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha {}", fmt_f64(self.alpha));
        let _ = writeln!(s, "# kind skill traj index mean count startable");
        for (name, stats) in &self.skills {
            let _ = writeln!(
                s,
                "class {name} - - {} {} -",
                fmt_f64(stats.class.mean),
                stats.class.count
            );
            for (ti, t) in stats.trajectories.iter().enumerate() {
                for (i, r) in t.starts.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "start {name} {ti} {i} {} {} {}",
                        fmt_f64(r.mean),
                        r.count,
                        u8::from(t.startable[i])
                    );
                }
            }
        }
        s
    }

    pub fn from_table(path: &Path, text: &str) -> Result<Self> {
        let mut alpha = None;
        let mut skills: BTreeMap<String, SkillStats> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = raw.split_whitespace().collect();
            let bad = || Error::parse(path, line, format!("malformed stats row `{raw}`"));
            let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
            let int = |t: &str| t.parse::<u64>().map_err(|_| bad());
            match toks.as_slice() {
                ["alpha", a] => alpha = Some(num(a)?),
                ["class", name, "-", "-", mean, count, "-"] => {
                    let e = skills
                        .entry(name.to_string())
                        .or_insert_with(|| SkillStats {
                            trajectories: Vec::new(),
                            class: RunningMean::default(),
                        });
                    e.class = RunningMean {
                        mean: num(mean)?,
                        count: int(count)?,
                    };
                }
                ["start", name, traj, index, mean, count, startable] => {
                    let e = skills.get_mut(*name).ok_or_else(bad)?;
                    let traj = int(traj)? as usize;
                    let index = int(index)? as usize;
                    if traj == e.trajectories.len() {
                        e.trajectories.push(TrajectoryStats {
                            starts: Vec::new(),
                            startable: Vec::new(),
                        });
                    }
                    let t = e.trajectories.get_mut(traj).ok_or_else(bad)?;
                    if index != t.starts.len() {
                        return Err(bad());
                    }
                    t.starts.push(RunningMean {
                        mean: num(mean)?,
                        count: int(count)?,
                    });
                    t.startable.push(*startable == "1");
                }
                _ => return Err(bad()),
            }
        }
        Ok(AtsStats {
            alpha: alpha.ok_or_else(|| Error::parse(path, 1, "missing alpha"))?,
            skills,
        })
    }
}
