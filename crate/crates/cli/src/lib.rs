//! The `socialdrive` command line. Every command resolves one [`RunConfig`]
//! (defaults, then `--config`, then `--set` overrides), validates it, and
//! writes its artifacts into the run directory given by `--out`.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use socialdrive_core::config::RunConfig;
use socialdrive_core::dpl::{self, DplModel};
use socialdrive_core::experiments::dataset::{extract_windows, generate_dataset, read_dataset, DatasetParams};
use socialdrive_core::experiments::record::{record_episode, replay};
use socialdrive_core::experiments::report::emit_report;
use socialdrive_core::experiments::runs::{make_env, policy_config, run_ct_sweep, run_prior_ablation, train_policy};
use socialdrive_core::policy::PolicyNet;
use socialdrive_core::ppo::{evaluate, EvalReport, PriorModel};
use socialdrive_core::verify::grad_suite;
use socialdrive_core::Error;

#[derive(Debug, Parser)]
#[command(name = "socialdrive", version, about = "Socially aware intersection driving: data, training, evaluation")]
pub struct Cli {
    /// JSON run configuration; omitted sections and keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set ppo.lr=3e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
    /// Run seed; required by every stochastic command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, env = "SOCIALDRIVE_OUT", default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate background traffic and write `dataset.jsonl`.
    GenData,
    /// Train the trajectory prior model on a dataset.
    TrainDpl {
        #[arg(long)]
        data: PathBuf,
    },
    /// Nearest-centroid driver-style probe of a trained prior model.
    ProbeLatents {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dpl: PathBuf,
    },
    /// Train one policy at `social.phi`, with priors when `--dpl` is given.
    TrainPolicy {
        #[arg(long)]
        dpl: Option<PathBuf>,
    },
    /// Greedy evaluation of a policy checkpoint; `--seed` is the first episode seed.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        dpl: Option<PathBuf>,
        /// Defaults to `experiment.eval_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Write one replayable log per episode under `episodes/`.
        #[arg(long)]
        record: bool,
    },
    /// Train and evaluate one policy per (phi, seed) pair.
    SweepCt {
        #[arg(long)]
        dpl: Option<PathBuf>,
    },
    /// Matched-seed comparison of policies with and without priors.
    AblatePrior {
        #[arg(long)]
        dpl: PathBuf,
    },
    /// Print per-decision JSON lines re-derived from an episode log.
    Replay { log: PathBuf },
    /// Run the finite-difference gradient suite.
    GradCheck,
    /// Render SVG charts and a summary from the CSVs in the run directory.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDpl { .. } => "train-dpl",
            Command::ProbeLatents { .. } => "probe-latents",
            Command::TrainPolicy { .. } => "train-policy",
            Command::Eval { .. } => "eval",
            Command::SweepCt { .. } => "sweep-ct",
            Command::AblatePrior { .. } => "ablate-prior",
            Command::Replay { .. } => "replay",
            Command::GradCheck => "grad-check",
            Command::Report => "report",
        }
    }

    fn stochastic(&self) -> bool {
        !matches!(self, Command::Replay { .. } | Command::GradCheck | Command::Report)
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    Config { path: String, msg: String },
    /// Anything that failed while running; exit code 1.
    Runtime(String),
    /// The command ran but its checks did not pass; exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }

    /// The single machine-readable line written to stderr.
    pub fn json_line(&self) -> String {
        let v = match self {
            CliError::Config { path, msg } => json!({"error": "config", "path": path, "message": msg}),
            CliError::Runtime(msg) => json!({"error": "runtime", "message": msg}),
            CliError::Failed(msg) => json!({"error": "failed", "message": msg}),
        };
        v.to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { path, msg } => CliError::Config { path, msg },
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<socialdrive_nn::NnError> for CliError {
    fn from(e: socialdrive_nn::NnError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Defaults, then the config file, then overrides; validated.
pub fn resolve_config(file: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
    let base = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Every file under `dir` except its top-level `manifest.json`, sorted.
fn list_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p != dir.join("manifest.json") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

fn file_entry(path: &Path, shown: String) -> CliResult<FileEntry> {
    Ok(FileEntry {
        path: shown,
        sha256: sha256_hex(&fs::read(path)?),
    })
}

/// Writes `manifest.json`: the command, its seed and inputs, and a hash of
/// every artifact in `dir`.
fn write_manifest(dir: &Path, command: &str, seed: Option<u64>, inputs: &[(&str, &Path)]) -> CliResult<()> {
    let inputs = inputs
        .iter()
        .map(|(name, p)| Ok((name.to_string(), serde_json::to_value(file_entry(p, p.display().to_string())?)?)))
        .collect::<CliResult<serde_json::Map<String, Value>>>()?;
    let outputs = list_files(dir)?
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            file_entry(p, rel.to_string_lossy().replace('\\', "/"))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let m = json!({
        "command": command,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": inputs,
        "outputs": outputs,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn print_json(v: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn load_prior(cfg: &RunConfig, path: &Path) -> CliResult<Arc<PriorModel>> {
    let (model, store) = DplModel::load(&cfg.dpl, path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(PriorModel { model, store }))
}

/// Parses arguments already split by clap and runs the command.
pub fn run(cli: Cli) -> CliResult<()> {
    let cmd = &cli.command;
    if let Command::Replay { log } = cmd {
        return run_replay(log);
    }
    let cfg = resolve_config(cli.config.as_deref(), &cli.sets)?;
    let seed = match (cmd.stochastic(), cli.seed) {
        (true, None) => {
            return Err(CliError::Config {
                path: "--seed".into(),
                msg: format!("`{}` needs an explicit seed", cmd.name()),
            })
        }
        (_, s) => s,
    };
    let out = cli.out.as_path();
    if let Command::Report = cmd {
        return run_report(&cfg, out);
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json()? + "\n")?;
    let s = seed.unwrap_or_default();
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    match cmd {
        Command::GenData => gen_data(&cfg, s, out)?,
        Command::TrainDpl { data } => {
            inputs.push(("data", data));
            train_dpl(&cfg, s, data, out)?
        }
        Command::ProbeLatents { data, dpl } => {
            inputs.extend([("data", data.as_path()), ("dpl", dpl.as_path())]);
            probe_latents(&cfg, s, data, dpl, out)?
        }
        Command::TrainPolicy { dpl } => {
            inputs.extend(dpl.as_deref().map(|p| ("dpl", p)));
            let prior = dpl.as_deref().map(|p| load_prior(&cfg, p)).transpose()?;
            let run = train_policy(&cfg, prior, s, cfg.social.phi, Some(out))?;
            print_json(&run.eval)?;
        }
        Command::Eval {
            policy,
            dpl,
            episodes,
            record,
        } => {
            inputs.push(("policy", policy));
            inputs.extend(dpl.as_deref().map(|p| ("dpl", p)));
            let n = episodes.unwrap_or(cfg.experiment.eval_episodes);
            eval(&cfg, s, policy, dpl.as_deref(), n, *record, out)?
        }
        Command::SweepCt { dpl } => {
            inputs.extend(dpl.as_deref().map(|p| ("dpl", p)));
            let prior = dpl.as_deref().map(|p| load_prior(&cfg, p)).transpose()?;
            for row in run_ct_sweep(&cfg, prior, s, Some(out))? {
                print_json(&row)?;
            }
        }
        Command::AblatePrior { dpl } => {
            inputs.push(("dpl", dpl));
            let prior = load_prior(&cfg, dpl)?;
            let report = run_prior_ablation(&cfg, Some(prior), s, Some(out))?;
            print_json(&report)?;
        }
        Command::GradCheck => grad_check(out)?,
        Command::Replay { .. } | Command::Report => unreachable!("handled above"),
    }
    write_manifest(out, cmd.name(), seed, &inputs)
}

fn gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> CliResult<()> {
    let params = DatasetParams {
        episodes: cfg.experiment.dataset_episodes,
        seed,
        steps: cfg.experiment.dataset_steps,
        layout: &cfg.layout,
        drivers: &cfg.drivers,
        env: &cfg.env,
    };
    let manifest = generate_dataset(&params, out.join("dataset.jsonl"))?;
    print_json(&manifest)
}

fn train_dpl(cfg: &RunConfig, seed: u64, data: &Path, out: &Path) -> CliResult<()> {
    let samples = extract_windows(&read_dataset(data)?, &cfg.dpl);
    let mut store = socialdrive_core::Store32::new();
    let model = DplModel::new(&mut store, &cfg.dpl, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let curve = dpl::train(&model, &mut store, &samples, seed, |e| {
        log::info!("epoch {} val_mse {:.5} kl {:.4}", e.epoch, e.val_mse, e.kl)
    })?;
    dpl::write_curve_csv(out.join("dpl_loss.csv"), &curve)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    socialdrive_nn::checkpoint::save(&store, out.join("checkpoints").join("dpl.ckpt"))?;
    let first = curve.first().map(|e| e.val_mse);
    let last = curve.last().map(|e| e.val_mse);
    print_json(&json!({"windows": samples.len(), "initial_val_mse": first, "final_val_mse": last}))
}

fn probe_latents(cfg: &RunConfig, seed: u64, data: &Path, dpl_path: &Path, out: &Path) -> CliResult<()> {
    let samples = extract_windows(&read_dataset(data)?, &cfg.dpl);
    let prior = load_prior(cfg, dpl_path)?;
    // the training split of the same seed, so the probe scores held-out episodes
    let (train_idx, test_idx) = dpl::split_by_episode(&samples, cfg.dpl.val_fraction, seed);
    let report = dpl::probe(&prior.model, &prior.store, &samples, &train_idx, &test_idx)?;
    fs::write(out.join("probe.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print_json(&report)
}

fn eval(
    cfg: &RunConfig,
    seed: u64,
    policy: &Path,
    dpl_path: Option<&Path>,
    episodes: usize,
    record: bool,
    out: &Path,
) -> CliResult<()> {
    let prior = dpl_path.map(|p| load_prior(cfg, p)).transpose()?;
    let pcfg = policy_config(cfg, prior.as_deref());
    let (net, store) =
        PolicyNet::load(&pcfg, policy).map_err(|e| CliError::Runtime(format!("{}: {e}", policy.display())))?;
    let mut env = make_env(cfg, cfg.social.phi, prior);
    let report = if record {
        let dir = out.join("episodes");
        fs::create_dir_all(&dir)?;
        let mut results = Vec::with_capacity(episodes);
        for i in 0..episodes {
            let s = seed.wrapping_add(i as u64);
            let mut w = std::io::BufWriter::new(fs::File::create(dir.join(format!("episode_{i:04}.jsonl")))?);
            results.push(record_episode(&net, &store, &mut env, s, &mut w)?);
            w.flush()?;
        }
        EvalReport::from_results(&results)
    } else {
        evaluate(&net, &store, &mut env, episodes, seed)?.0
    };
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print_json(&report)
}

fn run_replay(log: &Path) -> CliResult<()> {
    let file = fs::File::open(log).map_err(|e| CliError::Runtime(format!("{}: {e}", log.display())))?;
    let lines = replay(BufReader::new(file), &log.display().to_string())?;
    let stdout = std::io::stdout();
    let mut w = std::io::BufWriter::new(stdout.lock());
    for l in &lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn grad_check(out: &Path) -> CliResult<()> {
    let cases = grad_suite()?;
    for c in &cases {
        println!(
            "{:<16} max_rel_error {:.3e}  threshold {:.0e}  {}",
            c.name,
            c.max_rel_error,
            c.threshold,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    fs::write(out.join("grad_check.json"), serde_json::to_string_pretty(&cases)? + "\n")?;
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// Reads the CSVs in `out` and writes `out/report/` with its own manifest,
/// leaving the run's `config.json` and `manifest.json` untouched.
fn run_report(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    if !out.is_dir() {
        return Err(CliError::Runtime(format!("{}: no such run directory", out.display())));
    }
    let smoothing = cfg.experiment.smoothing.then_some(cfg.experiment.smoothing_window);
    let written = emit_report(out, smoothing)?;
    for p in &written {
        println!("{}", p.display());
    }
    write_manifest(&out.join("report"), "report", None, &[])
}
