//! Background-traffic trajectory datasets for prior learning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dpl::{normalize_window, window_starts, DplConfig, WindowSample};
use crate::drivers::DriverStyle;
use crate::env::config::{DriversConfig, EnvConfig};
use crate::env::layout::{LayoutConfig, Movement};
use crate::env::reward::SocialConfig;
use crate::env::IntersectionEnv;
use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u32,
    pub style: DriverStyle,
    pub intention: Movement,
    /// `[t, x, y, vx, vy]` at the end of every decision step the vehicle was present for.
    pub states: Vec<[f64; 5]>,
}

impl VehicleRecord {
    pub fn positions(&self) -> Vec<Point<f64>> {
        self.states.iter().map(|s| [s[1], s[2]]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub vehicles: Vec<VehicleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: usize,
    pub seed: u64,
    pub vehicles: usize,
    pub style_counts: BTreeMap<String, usize>,
    pub intention_counts: BTreeMap<String, usize>,
    /// Dataset file name, relative to the manifest.
    pub path: PathBuf,
    /// SHA-256 of the canonical JSON of [`DatasetParams`].
    pub config_hash: String,
}

/// Everything that determines a dataset's bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetParams<'a> {
    pub episodes: usize,
    pub seed: u64,
    pub steps: usize,
    pub layout: &'a LayoutConfig,
    pub drivers: &'a DriversConfig,
    pub env: &'a EnvConfig,
}

impl DatasetParams<'_> {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("dataset params serialize");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The environment used for generation: no AV, `steps` decision steps.
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            include_av: false,
            max_steps: self.steps,
            ..*self.env
        }
    }
}

/// Runs one HV-only episode and returns the vehicles that did not crash.
pub fn simulate_episode(env: &mut IntersectionEnv, episode_id: u64, seed: u64) -> Result<EpisodeRecord> {
    env.reset(seed);
    while !env.is_done() {
        env.step_background()?;
    }
    let mut vehicles: Vec<VehicleRecord> = env
        .vehicles()
        .iter()
        .chain(env.departed())
        .filter(|v| !v.is_av && !env.crashed().contains(&v.id))
        .filter_map(|v| {
            let info = env.vehicle_info().iter().find(|i| i.id == v.id)?;
            Some(VehicleRecord {
                id: v.id,
                style: v.style?,
                intention: info.movement,
                // drop the spawn sample so an N-step episode yields N states
                states: v.states.get(1..).unwrap_or_default().to_vec(),
            })
        })
        .collect();
    vehicles.sort_by_key(|v| v.id);
    Ok(EpisodeRecord { episode_id, vehicles })
}

/// Simulates `params.episodes` background episodes (episode `i` uses seed
/// `seed + i`) and writes one JSON object per line to `path`, plus a
/// sidecar manifest at `<path>.manifest.json`.
pub fn generate_dataset(params: &DatasetParams, path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if params.episodes == 0 {
        return Err(Error::Invalid("dataset needs at least one episode".into()));
    }
    let mut env = IntersectionEnv::new(
        *params.layout,
        *params.drivers,
        params.env_config(),
        SocialConfig::default(),
    );
    let mut out = BufWriter::new(File::create(path)?);
    let mut manifest = DatasetManifest {
        episodes: params.episodes,
        seed: params.seed,
        vehicles: 0,
        style_counts: DriverStyle::ALL.iter().map(|s| (s.name().to_string(), 0)).collect(),
        intention_counts: Movement::ALL.iter().map(|m| (m.name().to_string(), 0)).collect(),
        path: path.file_name().map(PathBuf::from).unwrap_or_default(),
        config_hash: params.hash(),
    };
    for i in 0..params.episodes {
        let ep = simulate_episode(&mut env, i as u64, params.seed.wrapping_add(i as u64))?;
        for v in &ep.vehicles {
            manifest.vehicles += 1;
            *manifest.style_counts.entry(v.style.name().to_string()).or_default() += 1;
            *manifest.intention_counts.entry(v.intention.name().to_string()).or_default() += 1;
        }
        serde_json::to_writer(&mut out, &ep)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let mpath = manifest_path(path);
    let mut m = BufWriter::new(File::create(&mpath)?);
    serde_json::to_writer_pretty(&mut m, &manifest)?;
    m.write_all(b"\n")?;
    m.flush()?;
    Ok(manifest)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: n as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push(ep);
    }
    Ok(out)
}

/// Cuts every vehicle trajectory into normalized windows.
pub fn extract_windows(episodes: &[EpisodeRecord], cfg: &DplConfig) -> Vec<WindowSample> {
    let mut out = Vec::new();
    for ep in episodes {
        for v in &ep.vehicles {
            let pos = v.positions();
            let Some(&entry) = pos.first() else { continue };
            for s in window_starts(pos.len(), cfg.window, cfg.stride) {
                out.push(WindowSample {
                    episode: ep.episode_id,
                    vehicle: v.id,
                    style: v.style,
                    data: normalize_window(&pos[s..s + cfg.window], entry, cfg.position_scale),
                });
            }
        }
    }
    out
}
