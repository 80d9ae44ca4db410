//! Substep episode log: CSV rows plus JSON sidecars for replay.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{pet, Action, LayoutConfig, LogRow, RewardBreakdown, Snapshot, SnapVehicle, VehicleInfo};
use super::{EnvConfig, Outcome, SocialConfig};
use crate::error::{Error, Result};
use crate::geometry::Point;

pub const HEADER: &str = "t,vehicle_id,x,y,heading,speed,is_av";

pub fn write_rows<W: Write>(w: &mut W, rows: &[LogRow]) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.t, r.vehicle_id, r.x, r.y, r.heading, r.speed, r.is_av as u8
        )?;
    }
    Ok(())
}

fn parse_err(path: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses a log written by [`write_rows`]; `path` only labels errors.
pub fn read_rows<R: BufRead>(r: R, path: &str) -> Result<Vec<LogRow>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let n = i as u64 + 1;
        let line = line?;
        if i == 0 {
            if line.trim().is_empty() {
                continue;
            }
            if line.trim() != HEADER {
                return Err(parse_err(path, n, format!("expected header `{HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(parse_err(path, n, format!("expected 7 fields, got {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            let v: f64 = f[k]
                .parse()
                .map_err(|_| parse_err(path, n, format!("bad number `{}`", f[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(path, n, "non-finite value"))
            }
        };
        let is_av = match f[6] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, n, format!("bad is_av `{other}`"))),
        };
        out.push(LogRow {
            t: num(0)?,
            vehicle_id: f[1]
                .parse()
                .map_err(|_| parse_err(path, n, format!("bad vehicle id `{}`", f[1])))?,
            x: num(2)?,
            y: num(3)?,
            heading: num(4)?,
            speed: num(5)?,
            is_av,
        });
    }
    Ok(out)
}

/// Groups rows into snapshots by timestamp, preserving order.
pub fn snapshots(rows: &[LogRow]) -> Vec<Snapshot> {
    let mut out: Vec<Snapshot> = Vec::new();
    for r in rows {
        if out.last().is_none_or(|s| s.t != r.t) {
            out.push(Snapshot {
                t: r.t,
                vehicles: Vec::new(),
            });
        }
        out.last_mut().expect("pushed").vehicles.push(SnapVehicle {
            id: r.vehicle_id,
            is_av: r.is_av,
            x: r.x,
            y: r.y,
            heading: r.heading,
            speed: r.speed,
        });
    }
    out
}

/// Per-vehicle tracks `(t, position)` keyed by id.
pub fn tracks(rows: &[LogRow]) -> BTreeMap<u32, (bool, Vec<(f64, Point<f64>)>)> {
    let mut out: BTreeMap<u32, (bool, Vec<(f64, Point<f64>)>)> = BTreeMap::new();
    for r in rows {
        out.entry(r.vehicle_id)
            .or_insert_with(|| (r.is_av, Vec::new()))
            .1
            .push((r.t, [r.x, r.y]));
    }
    out
}

pub fn min_pet_from_rows(rows: &[LogRow], half: f64) -> Option<f64> {
    let tr = tracks(rows);
    let av = tr.values().find(|(is_av, _)| *is_av)?;
    let hvs: Vec<&pet::Track> = tr
        .values()
        .filter(|(is_av, _)| !is_av)
        .map(|(_, t)| t.as_slice())
        .collect();
    pet::compute_pet(&av.1, &hvs, half, 1.0)
}

/// Static episode description written next to a recorded log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub layout: LayoutConfig,
    pub env: EnvConfig,
    pub social: SocialConfig,
    pub vehicles: Vec<VehicleInfo>,
}

/// What the agent did at one decision step and what it was paid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: usize,
    pub t: f64,
    pub action: Action,
    pub reward: RewardBreakdown,
    pub outcome: Option<Outcome>,
}
