//! Post-encroachment time over a 1 m grid of the conflict box.

use std::collections::BTreeMap;

use crate::geometry::Point;

/// Time-stamped positions of one vehicle, in time order.
pub type Track = [(f64, Point<f64>)];

type Cell = (i64, i64);

/// First and last sample time per occupied cell of the box `[-half, half]²`.
pub fn cell_times(track: &Track, half: f64, cell: f64) -> BTreeMap<Cell, (f64, f64)> {
    let mut out: BTreeMap<Cell, (f64, f64)> = BTreeMap::new();
    for &(t, p) in track {
        if p[0].abs() >= half || p[1].abs() >= half {
            continue;
        }
        let key = (
            ((p[0] + half) / cell).floor() as i64,
            ((p[1] + half) / cell).floor() as i64,
        );
        out.entry(key)
            .and_modify(|e| {
                e.0 = e.0.min(t);
                e.1 = e.1.max(t);
            })
            .or_insert((t, t));
    }
    out
}

/// PET between two tracks: over cells both occupy, the gap between the
/// first occupant's exit and the second occupant's entry (absolute value).
pub fn pair_pet(a: &Track, b: &Track, half: f64, cell: f64) -> Option<f64> {
    let ca = cell_times(a, half, cell);
    let cb = cell_times(b, half, cell);
    let mut best: Option<f64> = None;
    for (k, &(a_in, a_out)) in &ca {
        let Some(&(b_in, b_out)) = cb.get(k) else {
            continue;
        };
        let pet = if a_in <= b_in {
            (b_in - a_out).abs()
        } else {
            (a_in - b_out).abs()
        };
        best = Some(best.map_or(pet, |m| m.min(pet)));
    }
    best
}

/// Minimum PET between the AV track and any HV track.
pub fn compute_pet(av: &Track, hvs: &[&Track], half: f64, cell: f64) -> Option<f64> {
    hvs.iter()
        .filter_map(|hv| pair_pet(av, hv, half, cell))
        .fold(None, |m, p| Some(m.map_or(p, |m: f64| m.min(p))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructed_crossing() {
        // HV crosses cell (8, 8) from t=9 to t=10, AV enters it at 12.5
        let hv = vec![(9.0, [0.5, 0.5]), (10.0, [0.6, 0.5]), (11.0, [3.5, 0.5])];
        let av = vec![(12.0, [0.5, -3.0]), (12.5, [0.5, 0.5]), (13.0, [0.5, 3.5])];
        assert_eq!(pair_pet(&av, &hv, 8.0, 1.0), Some(2.5));
        assert_eq!(compute_pet(&av, &[&hv[..]], 8.0, 1.0), Some(2.5));
    }

    #[test]
    fn disjoint_paths() {
        let hv = vec![(0.0, [5.5, 5.5]), (1.0, [6.5, 5.5])];
        let av = vec![(0.0, [-5.5, -5.5]), (1.0, [-6.5, -5.5])];
        assert_eq!(pair_pet(&av, &hv, 8.0, 1.0), None);
        let outside = vec![(0.0, [50.0, 0.0])];
        assert_eq!(compute_pet(&av, &[&outside[..]], 8.0, 1.0), None);
    }
}
