use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stitchfield::ats::AtsStats;
use stitchfield::augment::{schema_epsilon, Sampler};
use stitchfield::config::RunConfig;
use stitchfield::eval::{
    eval_ensr, eval_nr, eval_sr, eval_tsr, to_csv, EvalContext, EvalResult, PolicyController,
};
use stitchfield::io::{load_dataset, save_dataset, save_schema, save_trajectory, SCHEMA_FILE};
use stitchfield::policy::{he_samples, prediction_error, PolicyBundle};
use stitchfield::reward::RewardWeights;
use stitchfield::trainer::{build_graphs, init_bundle, train};
use stitchfield::trajectory::{validate, Dataset};
use stitchfield::world::{corrupt, generate_demo, toy_schema, Skill, ToyClamp};
use stitchfield::Error;

/// Exit status of a rejected command line.
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "stitchfield",
    version,
    about = "Skill imitation from sparse, noisy hand-ball demonstrations"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations and a corrupted copy under `corrupted/`.
    GenDemos {
        /// dribble, carry, toss, or all.
        #[arg(long, default_value = "all")]
        skill: String,
        #[arg(long)]
        seconds: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Add position noise and a masked block to every trajectory of a dataset.
    Corrupt {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        drop: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample augmented training clips and write them with a manifest.
    Augment {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        skill: String,
        #[arg(short = 'n', long = "count")]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma separated switches to disable: stf, stg, ats, he, or all.
        #[arg(long, default_value = "")]
        ablate: String,
    },
    /// Pre-train the history encoder and save the policy bundle.
    PretrainHe {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a policy with PPO.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "")]
        ablate: String,
    },
    /// Evaluate a checkpoint and write a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference demonstrations for start states.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 300)]
        horizon: usize,
        /// Multiple of the schema perturbation half-widths for eNSR.
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print an ATS snapshot of a training run.
    Stats {
        /// Training output directory or `ats.txt` file.
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn check_dataset(ds: &Dataset, what: &Path) -> anyhow::Result<()> {
    let v = validate(ds);
    if let Some(first) = v.first() {
        return Err(Error::Invalid(format!(
            "{}: {} violations, first: {first}",
            what.display(),
            v.len()
        ))
        .into());
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn manifest(command: &str, extra: &[(&str, String)], cfg: &RunConfig) -> String {
    let mut s = format!(
        "# command {command}\n# version {}\n",
        env!("CARGO_PKG_VERSION")
    );
    for (k, v) in extra {
        let _ = writeln!(s, "# {k} {v}");
    }
    s.push('\n');
    s.push_str(&cfg.to_text());
    s
}

fn gen_demos(
    skill: &str,
    seconds: Option<f64>,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seconds {
        cfg.demo.seconds = s;
    }
    cfg.check()?;
    let skills: Vec<Skill> = if skill == "all" {
        Skill::ALL.to_vec()
    } else {
        skill
            .split(',')
            .map(str::parse)
            .collect::<stitchfield::Result<_>>()?
    };
    let schema = toy_schema(&cfg.schema);
    let world = cfg.trainer.world;
    let mut clean = Dataset::new(schema.clone());
    let mut noisy = Dataset::new(schema.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in skills {
        let demo = generate_demo(s, cfg.demo.seconds, &world)?;
        noisy.push(corrupt(
            &schema,
            &demo.trajectory,
            cfg.demo.noise_sigma,
            cfg.demo.drop_fraction,
            &mut rng,
        )?);
        clean.push(demo.trajectory);
    }
    check_dataset(&clean, out)?;
    save_dataset(&clean, out)?;
    save_dataset(&noisy, &out.join("corrupted"))?;
    write(
        &out.join("manifest.txt"),
        &manifest("gen-demos", &[("seed", seed.to_string())], &cfg),
    )?;
    println!(
        "wrote {} clean and corrupted trajectories to {}",
        clean.skills.len(),
        out.display()
    );
    Ok(())
}

fn corrupt_cmd(
    dataset: &Path,
    out: &Path,
    noise: Option<f64>,
    drop: Option<f64>,
    config: Option<&Path>,
    seed: u64,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    cfg.demo.noise_sigma = noise.unwrap_or(cfg.demo.noise_sigma);
    cfg.demo.drop_fraction = drop.unwrap_or(cfg.demo.drop_fraction);
    cfg.check()?;
    let ds = load_dataset(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = Dataset::new(ds.schema.clone());
    for t in ds.skills.values().flatten() {
        noisy.push(corrupt(
            &ds.schema,
            t,
            cfg.demo.noise_sigma,
            cfg.demo.drop_fraction,
            &mut rng,
        )?);
    }
    save_dataset(&noisy, out)?;
    println!("wrote corrupted dataset to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn augment(
    dataset: &Path,
    skill: &str,
    n: usize,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    ablate: &str,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    cfg.trainer.switches = cfg.trainer.switches.ablate(ablate)?;
    let ds = load_dataset(dataset)?;
    check_dataset(&ds, dataset)?;
    let weights = RewardWeights::multiplicative(&ds.schema);
    let graphs = build_graphs(&ds, &cfg.trainer, &weights)?;
    let graph = graphs
        .iter()
        .find(|g| g.skill == skill)
        .ok_or_else(|| Error::UnknownSkill(skill.to_string()))?;
    let clamp = ToyClamp {
        ball_radius: cfg.trainer.world.ball_radius,
    };
    let sampler = Sampler {
        schema: &ds.schema,
        graph,
        weights: &weights,
        params: cfg.trainer.effective_augment(),
        epsilon: schema_epsilon(&ds.schema),
        clamp: &clamp,
    };
    let ats = AtsStats::new(&ds, cfg.trainer.ats_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_schema(&ds.schema, &out.join(SCHEMA_FILE))?;
    let mut list =
        String::from("# file origin target_traj perturbed entry mask_count similarity fell_back\n");
    for i in 0..n {
        let c = sampler.sample(&ats, &mut rng)?;
        let name = format!("clip_{i:05}.traj");
        save_trajectory(&ds.schema, &c.clip, &out.join(&name))?;
        let _ = writeln!(list, "{name} {}", c.meta);
    }
    write(&out.join("clips.txt"), &list)?;
    let extra = [
        ("seed", seed.to_string()),
        ("skill", skill.to_string()),
        ("connections", graph.connections.len().to_string()),
    ];
    write(
        &out.join("manifest.txt"),
        &manifest("augment", &extra, &cfg),
    )?;
    println!("wrote {n} clips to {}", out.display());
    Ok(())
}

fn pretrain_he_cmd(
    dataset: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    cfg.trainer.seed = seed;
    cfg.trainer.switches.he = true;
    let ds = load_dataset(dataset)?;
    check_dataset(&ds, dataset)?;
    let (bundle, curve) = init_bundle(&ds, &cfg.trainer)?;
    let Some((first, last)) = curve.first().zip(curve.last()) else {
        bail!(Error::Invalid("he_pretrain_steps is 0".into()));
    };
    let samples = he_samples(&bundle, &ds)?;
    let refs: Vec<_> = samples.iter().collect();
    let err = prediction_error(&bundle, &refs)?;
    bundle.save(out)?;
    let mut csv = String::from("step,total,prediction,regularizer\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{:.9e},{:.9e},{:.9e}",
            l.total, l.prediction, l.regularizer
        );
    }
    write(&out.with_extension("csv"), &csv)?;
    println!(
        "loss {:.4e} -> {:.4e}, next-state error {err:.4e}; bundle in {}",
        first.total,
        last.total,
        out.display()
    );
    Ok(())
}

fn train_cmd(
    dataset: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    ablate: &str,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
    cfg.trainer.switches = cfg.trainer.switches.ablate(ablate)?;
    cfg.check()?;
    let ds = load_dataset(dataset)?;
    check_dataset(&ds, dataset)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let extra = [
        ("dataset", dataset.display().to_string()),
        ("episode_restart_on_failure", "false".to_string()),
        ("masked_step_reward", "0".to_string()),
    ];
    write(&out.join("manifest.txt"), &manifest("train", &extra, &cfg))?;
    let t = &cfg.trainer;
    let ctx = EvalContext::new(&ds, t.world, t.success);
    let mut eval_csv = format!("iteration,{}", stitchfield::eval::CSV_HEADER);
    eval_csv.push('\n');
    let eval_path = out.join("eval.csv");
    let mut hook = |iteration: usize, bundle: &PolicyBundle| -> stitchfield::Result<()> {
        let ctrl = PolicyController {
            bundle,
            dataset: &ds,
            actuator: t.actuator,
        };
        for skill in ds.skill_names() {
            let r = eval_sr(&ctx, &ctrl, &skill, t.eval_trials, t.eval_horizon, t.seed)?;
            let _ = writeln!(eval_csv, "{iteration},{}", r.csv_row());
        }
        fs::write(&eval_path, &eval_csv).map_err(|e| Error::Io {
            path: eval_path.clone(),
            source: e,
        })
    };
    let result = train(&ds, t, Some(out), Some(&mut hook))?;
    if let Some(m) = result.metrics.last() {
        println!(
            "trained {} iterations, {} steps, final NR {:.4}",
            m.iteration + 1,
            m.env_steps,
            m.nr
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    config: Option<&Path>,
    trials: usize,
    horizon: usize,
    epsilon: f64,
    seed: u64,
) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let bundle = PolicyBundle::load(checkpoint)?;
    let ds = load_dataset(dataset)?;
    check_dataset(&ds, dataset)?;
    let t = &cfg.trainer;
    let ctx = EvalContext::new(&ds, t.world, t.success);
    let ctrl = PolicyController {
        bundle: &bundle,
        dataset: &ds,
        actuator: t.actuator,
    };
    let skills: Vec<String> = bundle
        .skills
        .iter()
        .filter(|s| ds.skills.contains_key(*s))
        .cloned()
        .collect();
    if skills.is_empty() {
        bail!(Error::Invalid(
            "checkpoint and dataset share no skill".into()
        ));
    }
    let mut results: Vec<EvalResult> = Vec::new();
    for s in &skills {
        results.push(eval_sr(&ctx, &ctrl, s, trials, horizon, seed)?);
        results.push(eval_ensr(&ctx, &ctrl, s, epsilon, trials, horizon, seed)?);
        results.push(eval_nr(&ctx, &ctrl, s, trials, seed)?);
        for to in &skills {
            if to != s {
                results.push(eval_tsr(&ctx, &ctrl, s, to, trials, horizon, seed)?);
            }
        }
    }
    let csv = to_csv(&results);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write(out, &csv)?;
    print!("{csv}");
    println!(
        "# horizon {horizon} control steps ({:.1} s)",
        horizon as f64 * t.world.dt_control()
    );
    Ok(())
}

fn stats(run: &Path) -> anyhow::Result<()> {
    let path = if run.is_dir() {
        run.join("ats.txt")
    } else {
        run.to_path_buf()
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let ats = AtsStats::from_table(&path, &text)?;
    for (skill, stats) in &ats.skills {
        let visited: usize = stats
            .trajectories
            .iter()
            .map(|t| t.starts.iter().filter(|r| r.count > 0).count())
            .sum();
        let summary = ats
            .skill_summary(skill)
            .map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{skill}: class mean {:.4} over {} episodes, {visited} visited starts, mean start reward {summary}",
            stats.class.mean, stats.class.count
        );
    }
    print!("{}", ats.to_table());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenDemos {
            skill,
            seconds,
            out,
            config,
            seed,
        } => gen_demos(&skill, seconds, &out, config.as_deref(), seed),
        Command::Corrupt {
            dataset,
            out,
            noise,
            drop,
            config,
            seed,
        } => corrupt_cmd(&dataset, &out, noise, drop, config.as_deref(), seed),
        Command::Augment {
            dataset,
            skill,
            n,
            out,
            config,
            seed,
            ablate,
        } => augment(&dataset, &skill, n, &out, config.as_deref(), seed, &ablate),
        Command::PretrainHe {
            dataset,
            out,
            config,
            seed,
        } => pretrain_he_cmd(&dataset, &out, config.as_deref(), seed),
        Command::Train {
            dataset,
            config,
            out,
            seed,
            ablate,
        } => train_cmd(&dataset, config.as_deref(), &out, seed, &ablate),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            config,
            trials,
            horizon,
            epsilon,
            seed,
        } => eval_cmd(
            &checkpoint,
            &dataset,
            &out,
            config.as_deref(),
            trials,
            horizon,
            epsilon,
            seed,
        ),
        Command::Stats { run } => stats(&run),
    }
}

/// 1 for rejected input, 2 for failures while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::NonFinite(_)) | None => 2,
        Some(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
