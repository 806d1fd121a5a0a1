//! Command-line pipeline: train, evaluate, fit the delta model, dump fields.
//!
//! Every subcommand is driven by one TOML config ([`RunConfig`]) plus
//! repeatable `--set section.key=value` overrides, so an ablation arm or a
//! perturbed plant is a flag away from the benchmark setup and every run is
//! reproducible from its command line alone. All artifacts carry the config
//! hash: CSVs in a leading `#` comment, checkpoints in their JSON header.
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4 io error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::delta::{
    collect, fit_delta, mean_correction, save_dataset, velocity_rmse, TargetDynamics,
};
use crate::dynamics::{step_numeric, DroneState};
use crate::field::dump_grid;
use crate::policy::{
    delta_manifest, expect_manifest, init_params, load_checkpoint, policy_manifest,
    save_checkpoint, ParamSet,
};
use crate::trainer::{evaluate, train, EvalSummary, ProgressKind, RolloutSetup, TrainConfig};
use crate::world::write_trajectory_csv;
use crate::{substream, Error, Result, Vec3};

#[derive(Parser)]
#[command(name = "racekit", about = "Desk-scale differentiable drone-racing training kit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy arm; writes checkpoints and a metrics CSV.
    Train {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Which training arm to run.
        #[arg(long, value_enum, default_value_t = Ablation::Avf)]
        ablation: Ablation,
        /// Override a config key (repeatable), e.g. --set train.envs=4.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a policy checkpoint over seeded trials.
    Eval {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Policy checkpoint to evaluate.
        checkpoint: PathBuf,
        /// Number of seeded trials.
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Plant the trials run on.
        #[arg(long, value_enum, default_value_t = PlantChoice::Nominal)]
        target: PlantChoice,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Collect target-plant data and fit the delta action model.
    FitDelta {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Trained policy checkpoint that flies the collection episodes.
        policy: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sample the gate field over a grid and write it as CSV.
    FieldDump {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Grid bounds "x0,x1,y0,y1,z0,z1"; defaults to the track arena.
        #[arg(long)]
        bounds: Option<String>,
        /// Samples per axis.
        #[arg(long, default_value_t = 16)]
        res: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// The training arms compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Field injection on, standard progress loss.
    Avf,
    /// Field off, standard progress loss.
    NoAvfLp,
    /// Field off, normalized progress loss.
    NoAvfLpnorm,
    /// Field off, scalar gate-plane projection term added.
    ScalarProj,
}

impl Ablation {
    /// Stable tag used in artifact paths.
    pub fn tag(&self) -> &'static str {
        match self {
            Ablation::Avf => "avf",
            Ablation::NoAvfLp => "no-avf-lp",
            Ablation::NoAvfLpnorm => "no-avf-lpnorm",
            Ablation::ScalarProj => "scalar-proj",
        }
    }

    /// Rewrite the trainer switches for this arm. Loss weights are left
    /// alone; the normalized arm reads its own lambda through the progress
    /// kind.
    pub fn apply(&self, t: &mut TrainConfig) {
        t.avf_enabled = matches!(self, Ablation::Avf);
        t.progress = match self {
            Ablation::NoAvfLpnorm => ProgressKind::Normalized,
            _ => ProgressKind::Dot,
        };
        t.use_projection = matches!(self, Ablation::ScalarProj);
    }
}

/// Which plant evaluation trials run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlantChoice {
    /// The nominal training integrator.
    Nominal,
    /// The mismatched target from the config's `[target]` section.
    Perturbed,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; let clap pick the stream.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Train { config, ablation, set } => cmd_train(&config, ablation, &set),
        Cmd::Eval { config, checkpoint, trials, target, set } => {
            cmd_eval(&config, &checkpoint, trials, target, &set)
        }
        Cmd::FitDelta { config, policy, set } => cmd_fit_delta(&config, &policy, &set),
        Cmd::FieldDump { config, bounds, res, set } => {
            cmd_field_dump(&config, bounds.as_deref(), res, &set)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn rollout_setup(cfg: &RunConfig) -> RolloutSetup<'_> {
    RolloutSetup {
        dynamics: &cfg.dynamics,
        field: &cfg.field,
        weights: &cfg.losses,
        reward: &cfg.reward,
        world: &cfg.world,
        policy: &cfg.policy,
        train: &cfg.train,
    }
}

/// Table-style count, e.g. 8/10.
fn frac_counts(frac: f64, n: usize) -> String {
    format!("{}/{n}", (frac * n as f64).round() as usize)
}

fn format_summary(s: &EvalSummary) -> String {
    format!(
        "success_cross {}\nsuccess_rate {}\nv_max {:.3} m/s\nmean_gates {:.2}\nmean_reward {:.3}\n",
        frac_counts(s.success_cross, s.trials),
        frac_counts(s.success_rate, s.trials),
        s.v_max,
        s.mean_gates,
        s.mean_reward,
    )
}

fn cmd_train(config: &Path, arm: Ablation, overrides: &[String]) -> Result<()> {
    let mut cfg = RunConfig::load(config, overrides)?;
    arm.apply(&mut cfg.train);
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = cfg.io.out_dir.join(format!("train-{}", arm.tag()));
    fs::create_dir_all(&dir)?;

    let init = init_params(cfg.init_seed(), policy_manifest(&cfg.policy));
    let mut metrics = Vec::new();
    writeln!(metrics, "# config {hash} ablation {}", arm.tag())?;
    let out = train(
        &rollout_setup(&cfg),
        &cfg.track,
        &cfg.seeds(),
        init,
        None,
        None,
        &mut metrics,
        |tag, set| save_checkpoint(&dir.join(format!("policy-{tag}.ckpt")), set, "policy", &hash),
    )?;
    fs::write(dir.join("metrics.csv"), &metrics)?;

    println!("arm {}  config {hash}", arm.tag());
    println!("iterations {}  updates skipped {}", out.iterations_run, out.updates_skipped);
    print!("{}", format_summary(&out.final_eval));
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    trials: usize,
    plant: PlantChoice,
    overrides: &[String],
) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    cfg.validate()?;
    let hash = cfg.hash();
    let (set, header) = load_checkpoint(checkpoint)?;
    if header.kind != "policy" {
        return Err(Error::Config(format!(
            "{} holds {:?} parameters, not a policy",
            checkpoint.display(),
            header.kind
        )));
    }
    expect_manifest(&set, &policy_manifest(&cfg.policy))?;
    let dir = cfg.io.out_dir.join("eval");
    fs::create_dir_all(&dir)?;

    let seeds = cfg.seeds();
    let target = cfg.target;
    let nominal = |s: &DroneState, u: Vec3, yaw: f64| step_numeric(s, u, yaw, &cfg.dynamics);
    let perturbed = |s: &DroneState, u: Vec3, yaw: f64| target.step(s, u, yaw);
    let mut trial_io: Result<()> = Ok(());
    let on_trial = |trial: usize, _res: &crate::world::EpisodeResult, logs: &[crate::world::StepLog]| {
        if trial_io.is_err() {
            return;
        }
        trial_io = (|| {
            let mut buf = Vec::new();
            writeln!(buf, "# config {hash} trial {trial} plant {plant:?}")?;
            write_trajectory_csv(logs, &mut buf)?;
            fs::write(dir.join(format!("trial-{trial:03}.csv")), &buf)?;
            Ok(())
        })();
    };
    let summary = match plant {
        PlantChoice::Nominal => evaluate(
            &set,
            None,
            &rollout_setup(&cfg),
            &cfg.track,
            trials,
            seeds.eval_track,
            seeds.eval_jitter,
            cfg.train.eval_horizon,
            nominal,
            on_trial,
        )?,
        PlantChoice::Perturbed => evaluate(
            &set,
            None,
            &rollout_setup(&cfg),
            &cfg.track,
            trials,
            seeds.eval_track,
            seeds.eval_jitter,
            cfg.train.eval_horizon,
            perturbed,
            on_trial,
        )?,
    };
    trial_io?;

    let report = format!(
        "# config {hash}\nplant {:?}\ntrials {}\n{}",
        plant,
        summary.trials,
        format_summary(&summary)
    );
    fs::write(dir.join("report.txt"), &report)?;
    print!("{report}");
    println!("trajectories in {}", dir.display());
    Ok(())
}

fn cmd_fit_delta(config: &Path, policy: &Path, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    cfg.validate()?;
    let hash = cfg.hash();
    let (pset, pheader) = load_checkpoint(policy)?;
    if pheader.kind != "policy" {
        return Err(Error::Config(format!(
            "{} holds {:?} parameters, not a policy",
            policy.display(),
            pheader.kind
        )));
    }
    expect_manifest(&pset, &policy_manifest(&cfg.policy))?;
    let dir = cfg.io.out_dir.join("delta");
    fs::create_dir_all(&dir)?;

    let collect_seed = cfg.collect_seed();
    let tracks = (0..cfg.collect.tracks)
        .map(|i| cfg.track.sample(substream(collect_seed, "track", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = collect(
        &pset,
        &rollout_setup(&cfg),
        &cfg.target,
        &tracks,
        cfg.collect.episodes,
        cfg.collect.horizon,
        substream(collect_seed, "episodes", 0),
    )?;
    ds.source = format!("{} config={hash}", ds.source);
    save_dataset(&dir.join("dataset"), &ds)?;

    let out = fit_delta(
        &ds,
        &tracks,
        ParamSet::zeros(delta_manifest()),
        &cfg.dynamics,
        &cfg.policy,
        cfg.losses.r_q,
        &cfg.delta_fit,
    )?;
    save_checkpoint(&dir.join("delta-final.ckpt"), &out.params, "delta", &hash)?;
    let mc = mean_correction(
        &ds,
        &tracks,
        &out.params,
        &cfg.dynamics,
        &cfg.policy,
        cfg.losses.r_q,
        &cfg.delta_fit,
    )?;
    let rmse = velocity_rmse(
        &ds,
        &tracks,
        &out.params,
        &cfg.dynamics,
        &cfg.policy,
        cfg.losses.r_q,
        &cfg.delta_fit,
    )?;

    let first = out.loss_curve[0];
    let last = *out.loss_curve.last().unwrap();
    let mut report = format!(
        "# config {hash}\nepisodes {}\ntransitions {}\nepochs {}\nloss {first:.6e} -> {last:.6e}\n\
         mean correction ({:.4}, {:.4}, {:.4})\nvelocity rmse {rmse:.4} m/s\n",
        ds.episodes.len(),
        ds.len(),
        cfg.delta_fit.epochs,
        mc.x,
        mc.y,
        mc.z,
    );
    report.push_str(&delta_verdict(&cfg.target, mc));
    fs::write(dir.join("report.txt"), &report)?;
    print!("{report}");
    println!("artifacts in {}", dir.display());
    Ok(())
}

/// One-line reading of the fitted corrections against the known target.
fn delta_verdict(target: &TargetDynamics, mc: Vec3) -> String {
    if target.is_null() {
        if mc.norm() < 0.05 {
            "null mismatch, corrections ≈ 0\n".to_string()
        } else {
            format!("null mismatch, but corrections reach {:.4}\n", mc.norm())
        }
    } else if target.action_bias.norm() > 0.0 {
        let b = target.action_bias;
        let err = 100.0 * (mc + b).norm() / b.norm();
        format!(
            "recovered bias ({:.4}, {:.4}, {:.4}) vs actual ({:.4}, {:.4}, {:.4}), error {err:.1}%\n",
            -mc.x, -mc.y, -mc.z, b.x, b.y, b.z,
        )
    } else {
        String::new()
    }
}

/// Header line `dump_grid` emits, here for round-trip parsing.
pub const FIELD_CSV_HEADER: &str = "x,y,z,bx,by,bz,ax,ay,az";

fn cmd_field_dump(
    config: &Path,
    bounds: Option<&str>,
    res: usize,
    overrides: &[String],
) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    cfg.validate()?;
    let hash = cfg.hash();
    let track = cfg.track.sample(substream(cfg.seed, "track", 0))?;
    let (lo, hi) = match bounds {
        Some(text) => parse_bounds(text)?,
        None => track.bounds,
    };
    let mut buf = Vec::new();
    writeln!(buf, "# config {hash} res {res}")?;
    let rows = dump_grid(&track.gates, lo, hi, (res, res, res), &cfg.field, &mut buf)?;
    fs::create_dir_all(&cfg.io.out_dir)?;
    let path = cfg.io.out_dir.join("field.csv");
    fs::write(&path, &buf)?;
    println!("wrote {rows} rows to {}", path.display());
    Ok(())
}

/// Parse `--bounds x0,x1,y0,y1,z0,z1`.
fn parse_bounds(text: &str) -> Result<(Vec3, Vec3)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 6 {
        return Err(Error::Config(format!(
            "bounds need 6 comma-separated values x0,x1,y0,y1,z0,z1, got {text:?}"
        )));
    }
    let mut v = [0.0f64; 6];
    for (k, p) in parts.iter().enumerate() {
        v[k] = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad bounds value {p:?}")))?;
    }
    Ok((Vec3::new(v[0], v[2], v[4]), Vec3::new(v[1], v[3], v[5])))
}

/// Parse a field dump back into rows, tolerating leading `#` comments. Used
/// to lint that dumps stay machine-readable.
pub fn parse_field_dump(text: &str) -> Result<Vec<[f64; 9]>> {
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    let header = lines.next().unwrap_or_default();
    if header != FIELD_CSV_HEADER {
        return Err(Error::Config(format!(
            "field dump header mismatch: expected {FIELD_CSV_HEADER:?}, got {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Config(format!("field dump row {n} needs 9 fields: {line:?}")));
        }
        let mut row = [0.0f64; 9];
        for (k, f) in fields.iter().enumerate() {
            row[k] = f
                .parse()
                .map_err(|_| Error::Config(format!("bad field dump value {f:?} in row {n}")))?;
        }
        rows.push(row);
    }
    Ok(rows)
}
