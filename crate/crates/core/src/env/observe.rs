//! Observation construction from a world snapshot.

use serde::{Deserialize, Serialize};

use super::Snapshot;

pub const FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `[x / arm_length, y / arm_length, vx / v_max, vy / v_max]` of the AV.
    pub ego: [f64; FEATURES],
    /// Relative rows, nearest first; masked rows are zero.
    pub neighbors: Vec<[f64; FEATURES]>,
    pub mask: Vec<bool>,
    /// Vehicle id behind each valid row.
    pub ids: Vec<Option<u32>>,
}

impl Observation {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObserveConfig {
    pub n_max: usize,
    pub radius: f64,
    pub arm_length: f64,
    pub v_max: f64,
}

/// Observation of the AV in `snap`, which must contain exactly one AV.
pub fn observe(snap: &Snapshot, cfg: &ObserveConfig) -> Observation {
    let av = snap.av().expect("snapshot without AV");
    let [avx, avy] = av.velocity();
    let ego = [
        av.x / cfg.arm_length,
        av.y / cfg.arm_length,
        avx / cfg.v_max,
        avy / cfg.v_max,
    ];
    let mut near: Vec<(f64, u32, [f64; FEATURES])> = snap
        .vehicles
        .iter()
        .filter(|v| !v.is_av)
        .filter_map(|v| {
            let d = (v.x - av.x).hypot(v.y - av.y);
            if d > cfg.radius {
                return None;
            }
            let [vx, vy] = v.velocity();
            let row = [
                (v.x - av.x) / cfg.radius,
                (v.y - av.y) / cfg.radius,
                (vx - avx) / cfg.v_max,
                (vy - avy) / cfg.v_max,
            ];
            Some((d, v.id, row))
        })
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.truncate(cfg.n_max);
    let mut obs = Observation {
        ego,
        neighbors: vec![[0.0; FEATURES]; cfg.n_max],
        mask: vec![false; cfg.n_max],
        ids: vec![None; cfg.n_max],
    };
    for (k, (_, id, row)) in near.into_iter().enumerate() {
        obs.neighbors[k] = row;
        obs.mask[k] = true;
        obs.ids[k] = Some(id);
    }
    obs
}
