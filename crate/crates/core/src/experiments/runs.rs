//! Policy training runs, the prior ablation and the coordination-tendency sweep.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use socialdrive_nn::ParamStore;

use crate::config::RunConfig;
use crate::env::{IntersectionEnv, SocialConfig};
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, PolicyNet};
use crate::ppo::{evaluate, train, EvalReport, PriorEnv, PriorModel, TrainOutput, TrainStats};

/// A trained policy with its learning curve and final greedy evaluation.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub seed: u64,
    pub phi: f64,
    pub stats: Vec<TrainStats>,
    pub eval: EvalReport,
    pub net: PolicyNet,
    pub store: ParamStore<f32>,
}

pub fn make_env(cfg: &RunConfig, phi: f64, prior: Option<Arc<PriorModel>>) -> PriorEnv {
    let social = SocialConfig { phi, ..cfg.social };
    PriorEnv::new(IntersectionEnv::new(cfg.layout, cfg.drivers, cfg.env, social), prior)
}

/// Policy settings for a run: the prior width follows the prior model.
pub fn policy_config(cfg: &RunConfig, prior: Option<&PriorModel>) -> PolicyConfig {
    PolicyConfig {
        prior_dim: prior.map_or(0, PriorModel::dim),
        ..cfg.policy
    }
}

/// Trains one policy at coordination tendency `phi` and evaluates it greedily
/// on `eval_episodes` episodes starting at `eval_seed`. With `out`, writes
/// `metrics.csv`, `checkpoints/` and `eval.json` there.
pub fn train_policy(
    cfg: &RunConfig,
    prior: Option<Arc<PriorModel>>,
    seed: u64,
    phi: f64,
    out: Option<&Path>,
) -> Result<PolicyRun> {
    let pcfg = policy_config(cfg, prior.as_deref());
    let mut store = ParamStore::new();
    let net = PolicyNet::new(&mut store, &pcfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let ppo = crate::ppo::PpoConfig { seed, ..cfg.ppo };
    let target = out.map(TrainOutput::in_dir);
    let stats = train(
        &net,
        &mut store,
        |_| make_env(cfg, phi, prior.clone()),
        &ppo,
        phi,
        target.as_ref(),
        |_| {},
    )?;
    let mut env = make_env(cfg, phi, prior);
    let (eval, _) = evaluate(&net, &store, &mut env, cfg.experiment.eval_episodes, cfg.experiment.eval_seed)?;
    if let Some(dir) = out {
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&eval)?)?;
    }
    Ok(PolicyRun {
        seed,
        phi,
        stats,
        eval,
        net,
        store,
    })
}

/// Runs `jobs` on up to `workers` threads (0 = available cores) and returns
/// the results in job order. The first error wins.
pub fn fan_out<J, R, F>(jobs: Vec<J>, workers: usize, run: F) -> Result<Vec<R>>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R> + Sync,
{
    let workers = match workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run(&jobs[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    /// Final greedy evaluation mean global return.
    pub prior_return: f64,
    pub no_prior_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub phi: f64,
    pub rows: Vec<AblationRow>,
    pub mean_prior: f64,
    pub mean_no_prior: f64,
    /// `mean_prior − mean_no_prior`.
    pub difference: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Prior,
    NoPrior,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Prior => "prior",
            Arm::NoPrior => "no_prior",
        }
    }
}

fn run_dir(out: Option<&Path>, name: String) -> Result<Option<PathBuf>> {
    out.map(|o| {
        let d = o.join("runs").join(name);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    })
    .transpose()
}

fn write_curves(path: &Path, rows: &[(&str, &[TrainStats])]) -> Result<()> {
    const COLUMNS: [&str; 14] = [
        "arm", "update", "env_steps", "mean_return_E", "mean_return_C", "mean_return_global", "policy_loss",
        "value_loss", "entropy", "clip_frac", "collision_rate", "success_rate", "phi", "seed",
    ];
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(COLUMNS)?;
    for (arm, stats) in rows {
        for s in *stats {
            w.serialize((arm, s))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains the prior arm (with `prior`) and the no-prior arm on matched seeds
/// at `cfg.social.phi`. Passing `None` runs two identical no-prior arms as a
/// control. With `out`, writes `ablation.csv`, `curves.csv` and per-run
/// directories under `runs/`.
pub fn run_prior_ablation(
    cfg: &RunConfig,
    prior: Option<Arc<PriorModel>>,
    base_seed: u64,
    out: Option<&Path>,
) -> Result<AblationReport> {
    let phi = cfg.social.phi;
    let jobs: Vec<(Arm, u64)> = cfg
        .experiment
        .seed_list(base_seed)
        .into_iter()
        .flat_map(|s| [(Arm::Prior, s), (Arm::NoPrior, s)])
        .collect();
    let runs = fan_out(jobs.clone(), cfg.experiment.workers, |&(arm, seed)| {
        let p = match arm {
            Arm::Prior => prior.clone(),
            Arm::NoPrior => None,
        };
        let dir = run_dir(out, format!("{}_seed{seed}", arm.name()))?;
        train_policy(cfg, p, seed, phi, dir.as_deref())
    })?;
    let rows: Vec<AblationRow> = runs
        .chunks(2)
        .map(|pair| AblationRow {
            seed: pair[0].seed,
            prior_return: pair[0].eval.mean_return_global,
            no_prior_return: pair[1].eval.mean_return_global,
        })
        .collect();
    let mean_prior = mean(&rows.iter().map(|r| r.prior_return).collect::<Vec<_>>());
    let mean_no_prior = mean(&rows.iter().map(|r| r.no_prior_return).collect::<Vec<_>>());
    let report = AblationReport {
        phi,
        rows,
        mean_prior,
        mean_no_prior,
        difference: mean_prior - mean_no_prior,
    };
    if let Some(o) = out {
        let mut w = csv::Writer::from_path(o.join("ablation.csv"))?;
        for r in &report.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let curves: Vec<(&str, &[TrainStats])> = jobs
            .iter()
            .zip(&runs)
            .map(|((arm, _), r)| (arm.name(), r.stats.as_slice()))
            .collect();
        write_curves(&o.join("curves.csv"), &curves)?;
        std::fs::write(o.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// One `(φ, seed)` row of the sweep table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub phi: f64,
    pub seed: u64,
    pub mean_return_global: f64,
    #[serde(rename = "mean_return_E")]
    pub mean_return_e: f64,
    #[serde(rename = "mean_return_C")]
    pub mean_return_c: f64,
    pub collision_rate: f64,
    pub success_rate: f64,
    pub mean_av_speed: f64,
    /// Empty when no evaluation episode had a defined PET.
    pub mean_min_pet: Option<f64>,
}

impl SweepRow {
    fn new(phi: f64, seed: u64, e: &EvalReport) -> Self {
        Self {
            phi,
            seed,
            mean_return_global: e.mean_return_global,
            mean_return_e: e.mean_return_e,
            mean_return_c: e.mean_return_c,
            collision_rate: e.collision_rate,
            success_rate: e.success_rate,
            mean_av_speed: e.mean_speed,
            mean_min_pet: e.mean_min_pet,
        }
    }
}

/// One training run per `(φ, seed)` in `cfg.experiment.phis × seeds`. With
/// `out`, writes `sweep.csv`, `curves.csv` and per-run directories.
pub fn run_ct_sweep(
    cfg: &RunConfig,
    prior: Option<Arc<PriorModel>>,
    base_seed: u64,
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if cfg.experiment.phis.is_empty() {
        return Err(Error::Config {
            path: "experiment.phis".into(),
            msg: "sweep needs at least one value".into(),
        });
    }
    let jobs: Vec<(usize, f64, u64)> = cfg
        .experiment
        .phis
        .iter()
        .enumerate()
        .flat_map(|(k, &phi)| cfg.experiment.seed_list(base_seed).into_iter().map(move |s| (k, phi, s)))
        .collect();
    let runs = fan_out(jobs.clone(), cfg.experiment.workers, |&(k, phi, seed)| {
        let dir = run_dir(out, format!("phi{k}_seed{seed}"))?;
        train_policy(cfg, prior.clone(), seed, phi, dir.as_deref())
    })?;
    let rows: Vec<SweepRow> = runs.iter().map(|r| SweepRow::new(r.phi, r.seed, &r.eval)).collect();
    if let Some(o) = out {
        let mut w = csv::Writer::from_path(o.join("sweep.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let labels: Vec<String> = jobs.iter().map(|(k, _, _)| format!("phi{k}")).collect();
        let curves: Vec<(&str, &[TrainStats])> =
            labels.iter().zip(&runs).map(|(l, r)| (l.as_str(), r.stats.as_slice())).collect();
        write_curves(&o.join("curves.csv"), &curves)?;
    }
    Ok(rows)
}
