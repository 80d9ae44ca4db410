//! The finite-difference gradient suite behind `grad-check`: every layer
//! type once, then the two deep chains trained in this crate, all on the
//! `f64` instantiation of the training code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use socialdrive_nn::{
    grad_check, GradCheckConfig, GruCell, Linear, MultiHeadAttention, ParamStore, Tape, Tensor, Var,
};

use crate::dpl::{self, DplConfig, DplModel};
use crate::env::observe::Observation;
use crate::error::Result;
use crate::policy::{PolicyConfig, PolicyInput, PolicyNet};

/// Tolerance for a single layer.
pub const LAYER_TOLERANCE: f64 = 1e-4;
/// Tolerance for a multi-layer chain.
pub const CHAIN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub coords: usize,
    pub worst: Option<(String, usize)>,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).len();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let p = tape.mul_const(y, w)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &'static str, threshold: f64, h: f64, store: &mut ParamStore<f64>, loss: F) -> Result<GradCase>
where
    F: FnMut(&ParamStore<f64>) -> socialdrive_nn::Result<(Tape<f64>, Var)>,
{
    let cfg = GradCheckConfig {
        h,
        ..GradCheckConfig::default()
    };
    let r = grad_check(store, loss, cfg)?;
    Ok(GradCase {
        name,
        max_rel_error: r.max_rel_error,
        threshold,
        coords: r.coords,
        worst: r.worst,
    })
}

fn linear() -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 6, 4, true, &mut rng)?;
    let x = random(&mut rng, 5, 6);
    check("linear", LAYER_TOLERANCE, 1e-3, &mut store, |s| {
        let mut t = Tape::new();
        let xi = t.input(x.clone());
        let y = lin.forward(&mut t, s, xi)?;
        let y = t.tanh(y);
        let l = project(&mut t, y, &mut ChaCha8Rng::seed_from_u64(2)).map_err(nn_err)?;
        Ok((t, l))
    })
}

fn gru() -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 5, &mut rng)?;
    // non-zero biases so every gate path is exercised
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let xs: Vec<_> = (0..4).map(|_| random(&mut rng, 2, 3)).collect();
    check("gru", LAYER_TOLERANCE, 1e-3, &mut store, |s| {
        let mut t = Tape::new();
        let mut h = t.input(Tensor::zeros(&[2, 5]));
        for x in &xs {
            let xi = t.input(x.clone());
            h = cell.forward(&mut t, s, xi, h)?;
        }
        let l = project(&mut t, h, &mut ChaCha8Rng::seed_from_u64(4)).map_err(nn_err)?;
        Ok((t, l))
    })
}

fn attention() -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let att = MultiHeadAttention::new(&mut store, "att", 5, 8, 2, 6, &mut rng)?;
    let x = random(&mut rng, 2 * 4, 5);
    let valid = [true, true, false, true, true, true, true, false];
    check("attention", LAYER_TOLERANCE, 1e-4, &mut store, |s| {
        let mut t = Tape::new();
        let xi = t.input(x.clone());
        let a = att.forward(&mut t, s, xi, 4, &valid)?;
        let l = project(&mut t, a.out, &mut ChaCha8Rng::seed_from_u64(6)).map_err(nn_err)?;
        Ok((t, l))
    })
}

fn small_dpl() -> DplConfig {
    DplConfig {
        window: 6,
        embed_dim: 5,
        gru_hidden: 6,
        fc_dim: 7,
        latent_dim: 3,
        ..DplConfig::default()
    }
}

fn dpl_encoder() -> Result<GradCase> {
    let cfg = small_dpl();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let m = DplModel::new(&mut store, &cfg, &mut rng)?;
    let x = random(&mut rng, 3, 2 * cfg.window);
    check("dpl_encoder", LAYER_TOLERANCE, 1e-5, &mut store, |s| {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let (mu, ls) = m.encode_vars(&mut t, s, xv).map_err(nn_err)?;
        let sigma = t.exp(ls);
        let both = t.concat_cols(&[mu, sigma])?;
        let l = project(&mut t, both, &mut ChaCha8Rng::seed_from_u64(8)).map_err(nn_err)?;
        Ok((t, l))
    })
}

fn vae_chain() -> Result<GradCase> {
    let cfg = small_dpl();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let m = DplModel::new(&mut store, &cfg, &mut rng)?;
    let x = random(&mut rng, 2, 2 * cfg.window);
    let eps = random(&mut rng, 2, cfg.latent_dim);
    check("vae_chain", CHAIN_TOLERANCE, 1e-5, &mut store, |s| {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let (mu, ls) = m.encode_vars(&mut t, s, xv).map_err(nn_err)?;
        let z = DplModel::sample_vars(&mut t, mu, ls, eps.clone()).map_err(nn_err)?;
        let recon = m.decode_vars(&mut t, s, z).map_err(nn_err)?;
        let l = dpl::loss(&mut t, xv, recon, mu, ls, 1e-3).map_err(nn_err)?;
        Ok((t, l.total))
    })
}

fn small_policy(prior_dim: usize) -> PolicyConfig {
    PolicyConfig {
        encoder_hidden: 5,
        encoder_out: 4,
        attention_dim: 6,
        heads: 2,
        attention_out: 3,
        decoder_hidden: 5,
        prior_dim,
    }
}

fn policy_encoder() -> Result<GradCase> {
    let cfg = small_policy(0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let n = PolicyNet::new(&mut store, &cfg, &mut rng)?;
    let x = random(&mut rng, 4, 4);
    check("policy_encoder", LAYER_TOLERANCE, 1e-5, &mut store, |s| {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let e = n.encode_state(&mut t, s, xv, &[true, true, false, true]).map_err(nn_err)?;
        let l = project(&mut t, e, &mut ChaCha8Rng::seed_from_u64(11)).map_err(nn_err)?;
        Ok((t, l))
    })
}

fn random_input(rng: &mut ChaCha8Rng, valid: usize, n_max: usize, prior_dim: usize) -> Result<PolicyInput> {
    let mut row = || [0; 4].map(|_| rng.random_range(-1.0..1.0));
    let obs = Observation {
        ego: row(),
        neighbors: (0..n_max).map(|i| if i < valid { row() } else { [0.0; 4] }).collect(),
        mask: (0..n_max).map(|i| i < valid).collect(),
        ids: (0..n_max).map(|i| (i < valid).then_some(i as u32 + 1)).collect(),
    };
    let priors: Vec<Vec<f64>> =
        (0..valid).map(|_| (0..prior_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    PolicyInput::new(&obs, &priors, prior_dim)
}

fn policy_stack() -> Result<GradCase> {
    let cfg = small_policy(2);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let n = PolicyNet::new(&mut store, &cfg, &mut rng)?;
    let inputs = (0..3)
        .map(|k| random_input(&mut rng, k + 1, 5, cfg.prior_dim))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PolicyInput> = inputs.iter().collect();
    check("policy_stack", CHAIN_TOLERANCE, 1e-5, &mut store, |s| {
        let mut t = Tape::new();
        let v = n.forward_vars(&mut t, s, &refs).map_err(nn_err)?;
        let lp = t.log_softmax(v.logits);
        let a = project(&mut t, lp, &mut ChaCha8Rng::seed_from_u64(13)).map_err(nn_err)?;
        let sq = t.mul(v.value, v.value)?;
        let b = t.sum(sq);
        let l = t.add(a, b)?;
        Ok((t, l))
    })
}

/// Maps a crate error into the tape's error type inside a grad-check closure.
fn nn_err(e: crate::Error) -> socialdrive_nn::NnError {
    match e {
        crate::Error::Nn(e) => e,
        other => socialdrive_nn::NnError::Invalid(other.to_string()),
    }
}

/// Runs every case in a fixed order.
pub fn grad_suite() -> Result<Vec<GradCase>> {
    [linear, gru, attention, dpl_encoder, policy_encoder, vae_chain, policy_stack]
        .iter()
        .map(|case| case())
        .collect()
}
