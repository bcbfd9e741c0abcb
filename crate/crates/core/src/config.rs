//! Flat `key = value` run configuration.
//!
//! Keys follow the rows of the hyperparameter tables (training, augmentation,
//! reward weights) plus the desk-scale settings. Unknown keys are errors,
//! missing keys keep their defaults. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::TrainerConfig;
use crate::world::ToySchemaParams;

/// Demonstration and corruption settings of `gen-demos` and `corrupt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoConfig {
    pub seconds: f64,
    pub noise_sigma: f64,
    pub drop_fraction: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            seconds: 1.5,
            noise_sigma: 0.02,
            drop_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub schema: ToySchemaParams,
    pub demo: DemoConfig,
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

impl Value for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("`{s}` is not finite"))
        }
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("`{s}` is not a nonnegative integer"))
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("`{s}` is not a nonnegative integer"))
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(format!("`{s}` is not a boolean")),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = s
            .split(',')
            .map(|x| usize::parse_value(x.trim()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if v.contains(&0) {
            return Err("layer widths must be positive".into());
        }
        Ok(v)
    }
    fn show(&self) -> String {
        self.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

macro_rules! keys {
    ($($section:literal { $($key:literal => $($field:ident).+;)* })*) => {
        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $($($key => self.$($field).+ = Value::parse_value(value)?,)*)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Every key with its current value, one line each, grouped by section.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(
                    let _ = writeln!(s, "# {}", $section);
                    $(let _ = writeln!(s, "{} = {}", $key, self.$($field).+.show());)*
                    s.push('\n');
                )*
                s
            }

            pub fn keys() -> Vec<&'static str> {
                vec![$($($key,)*)*]
            }
        }
    };
}

keys! {
    "policy training" {
        "skill_embedding_dimension" => trainer.policy.cond_dim;
        "action_distribution_variance" => trainer.policy.sigma;
        "samples_per_update_iteration" => trainer.samples_per_iteration;
        "policy_value_minibatch_size" => trainer.minibatch;
        "discount" => trainer.gamma;
        "adam_stepsize" => trainer.lr;
        "gae_lambda" => trainer.gae_lambda;
        "td_lambda" => trainer.td_lambda;
        "ppo_clip_threshold" => trainer.clip;
        "episode_length" => trainer.episode_len;
        "history_embedding_dimension" => trainer.policy.he_dim;
        "history_horizon_length" => trainer.policy.window;
    }
    "data augmentation" {
        "n_max" => trainer.augment.max_masked;
        "tau" => trainer.augment.tau;
        "p_e" => trainer.augment.p_external;
        "p_n" => trainer.augment.p_neighborhood;
        "lambda_s" => trainer.augment.lambda_s;
        "lambda_c" => trainer.lambda_c;
        "epsilon" => schema.epsilon;
    }
    "reward weights" {
        "lambda_position" => schema.lambda_pos;
        "lambda_rotation" => schema.lambda_rot;
        "lambda_velocity" => schema.lambda_vel;
        "lambda_rotation_velocity" => schema.lambda_rotvel;
        "lambda_object_position" => schema.lambda_obj_pos;
        "lambda_object_rotation" => schema.lambda_obj_rot;
        "lambda_object_velocity" => schema.lambda_obj_vel;
        "lambda_object_angular_velocity" => schema.lambda_obj_angvel;
        "lambda_relative_motion" => schema.lambda_rel;
        "lambda_contact" => schema.lambda_contact;
    }
    "history encoder pre-training" {
        "he_lambda_a" => trainer.he.lambda_a;
        "he_lambda_b" => trainer.he.lambda_b;
        "he_pretrain_steps" => trainer.he.steps;
        "he_pretrain_batch" => trainer.he.batch;
        "he_pretrain_stepsize" => trainer.he.lr;
        "he_pretrain_momentum" => trainer.he.momentum;
        "he_channels" => trainer.policy.he_channels;
        "he_kernel" => trainer.policy.he_kernel;
        "he_stride" => trainer.policy.he_stride;
        "predictor_hidden" => trainer.policy.psi_hidden;
    }
    "desk scale" {
        "seed" => trainer.seed;
        "iterations" => trainer.iterations;
        "envs" => trainer.envs;
        "ppo_epochs" => trainer.epochs;
        "value_stepsize" => trainer.value_lr;
        "max_grad_norm" => trainer.max_grad_norm;
        "policy_hidden" => trainer.policy.hidden;
        "value_hidden" => trainer.policy.value_hidden;
        "ats_decay" => trainer.ats_decay;
        "use_stf" => trainer.switches.stf;
        "use_stg" => trainer.switches.stg;
        "use_ats" => trainer.switches.ats;
        "use_he" => trainer.switches.he;
        "checkpoint_every" => trainer.checkpoint_every;
        "eval_every" => trainer.eval_every;
        "eval_trials" => trainer.eval_trials;
        "eval_horizon" => trainer.eval_horizon;
    }
    "world" {
        "gravity" => trainer.world.gravity;
        "restitution" => trainer.world.restitution;
        "max_accel" => trainer.world.max_accel;
        "contact_radius" => trainer.world.contact_radius;
        "grab_blend" => trainer.world.grab_blend;
        "dt_sim" => trainer.world.dt_sim;
        "substeps" => trainer.world.substeps;
        "ball_radius" => trainer.world.ball_radius;
        "floor_margin" => trainer.world.floor_margin;
        "rest_speed" => trainer.world.rest_speed;
        "actuator_velocity_scale" => trainer.actuator.velocity_scale;
        "actuator_gain" => trainer.actuator.gain;
    }
    "success predicates" {
        "dribble_window" => trainer.success.dribble_window;
        "carry_contact_fraction" => trainer.success.carry_contact_fraction;
        "carry_distance" => trainer.success.carry_distance;
        "toss_distance" => trainer.success.toss_distance;
        "toss_rise" => trainer.success.toss_rise;
    }
    "demonstrations" {
        "demo_seconds" => demo.seconds;
        "noise_sigma" => demo.noise_sigma;
        "drop_fraction" => demo.drop_fraction;
    }
}

impl RunConfig {
    /// Defaults overridden by the entries of `text`.
    pub fn from_text(path: &Path, text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::parse(path, i + 1, format!("duplicate key `{key}`")));
            }
            cfg.set(key, value.trim())
                .map_err(|m| Error::parse(path, i + 1, m))?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(path, &text)
    }

    pub fn check(&self) -> Result<()> {
        self.trainer.check()?;
        let d = &self.demo;
        if !(1.0..=3.0).contains(&d.seconds) {
            return Err(Error::Invalid(format!(
                "demo length {} s outside [1, 3]",
                d.seconds
            )));
        }
        if !(d.noise_sigma >= 0.0) || !(0.0..1.0).contains(&d.drop_fraction) {
            return Err(Error::Invalid("bad corruption settings".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        let back = RunConfig::from_text(Path::new("c"), &c.to_text()).unwrap();
        assert_eq!(back, c);
        for k in RunConfig::keys() {
            assert!(
                c.to_text().contains(&format!("\n{k} = "))
                    || c.to_text().starts_with(&format!("{k} = "))
            );
        }
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::from_text(
            Path::new("c"),
            "# comment\ndiscount = 0.98\npolicy_hidden = 32,16\nuse_he = false  # off\n",
        )
        .unwrap();
        assert_eq!(c.trainer.gamma, 0.98);
        assert_eq!(c.trainer.policy.hidden, vec![32, 16]);
        assert!(!c.trainer.switches.he);
        assert!(RunConfig::from_text(Path::new("c"), "bogus = 1").is_err());
        assert!(RunConfig::from_text(Path::new("c"), "discount = 0.9\ndiscount = 0.8").is_err());
        assert!(RunConfig::from_text(Path::new("c"), "discount").is_err());
        assert!(RunConfig::from_text(Path::new("c"), "discount = 1.5").is_err());
        assert!(RunConfig::from_text(Path::new("c"), "policy_hidden = 3,0").is_err());
        let err = RunConfig::from_text(Path::new("c"), "\n\nenvs = x").unwrap_err();
        assert!(err.to_string().contains(":3"), "{err}");
    }

    #[test]
    fn table_defaults() {
        let c = RunConfig::default();
        let t = &c.trainer;
        assert_eq!(
            (t.gamma, t.gae_lambda, t.clip, t.episode_len),
            (0.99, 0.95, 0.2, 60)
        );
        assert_eq!((t.policy.sigma, t.policy.he_dim), (0.055, 3));
        assert_eq!((t.augment.max_masked, t.augment.tau), (10, 1e-10));
        assert_eq!((t.augment.p_external, t.augment.p_neighborhood), (0.1, 0.1));
        assert_eq!((t.augment.lambda_s, t.lambda_c), (10.0, 5.0));
        assert_eq!((t.he.lambda_a, t.he.lambda_b), (1.0, 1e-5));
    }
}
