//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            coords_per_tensor: 50,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares the tape gradient of a scalar `loss` against central differences
/// for every parameter of `store`. `loss` must build a fresh forward pass.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, mut loss: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<(Tape<T>, Var)>,
{
    store.zero_grad();
    let (tape, out) = loss(store)?;
    let grads = tape.backward(out);
    grads.accumulate_into(&tape, store);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords: 0,
        worst: None,
    };
    let mut eval = |s: &ParamStore<T>| -> Result<f64> {
        let (t, o) = loss(s)?;
        Ok(t.value(o).item().as_f64())
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            let analytic = store.grad(id).data()[i].as_f64();
            store.value_mut(id).data_mut()[i] = orig + T::lit(cfg.h);
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - T::lit(cfg.h);
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            report.coords += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), i));
                }
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
