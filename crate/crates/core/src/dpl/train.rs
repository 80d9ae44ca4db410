//! Minibatch training, evaluation and the style probe.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use socialdrive_nn::{Adam, AdamConfig, ParamStore, Scalar, Tape, Tensor};

use super::{loss, DplModel};
use crate::drivers::DriverStyle;
use crate::error::{Error, Result};

/// One normalized window with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub episode: u64,
    pub vehicle: u32,
    pub style: DriverStyle,
    /// `[x0, y0, x1, y1, …]`, length `2·δ`.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mse: f64,
    pub kl: f64,
}

const EVAL_CHUNK: usize = 512;

/// Episode-level split: a seeded shuffle of the distinct episode ids puts
/// the first `val_fraction` of them in validation. Returns sample indices.
pub fn split_by_episode(samples: &[WindowSample], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut episodes: Vec<u64> = samples.iter().map(|s| s.episode).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    episodes.shuffle(&mut rng);
    let mut n_val = (episodes.len() as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && episodes.len() >= 2 {
        n_val = n_val.clamp(1, episodes.len() - 1);
    }
    let val: BTreeSet<u64> = episodes[..n_val].iter().copied().collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if val.contains(&s.episode) {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    (tr, va)
}

/// Reconstruction MSE from the encoder mean and mean KL over `idx`.
pub fn evaluate(model: &DplModel, store: &ParamStore<f32>, samples: &[WindowSample], idx: &[usize]) -> Result<EvalStats> {
    let (mut mse, mut kl) = (0.0, 0.0);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let refs: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].data.as_slice()).collect();
        let x = tape.input(model.batch_tensor::<f32>(&refs)?);
        let (mu, ls) = model.encode_vars(&mut tape, store, x)?;
        let recon = model.decode_vars(&mut tape, store, mu)?;
        let l = loss(&mut tape, x, recon, mu, ls, 0.0)?;
        let n = chunk.len() as f64;
        mse += tape.value(l.mse).item().as_f64() * n;
        kl += tape.value(l.kl).item().as_f64() * n;
    }
    let n = idx.len().max(1) as f64;
    Ok(EvalStats { mse: mse / n, kl: kl / n })
}

/// Trains in place with Adam. Row 0 of the returned curve scores the
/// initial parameters; row `e` follows epoch `e`. The train column uses a
/// fixed prefix of the training split and the encoder mean, so it is
/// deterministic and flat when `lr = 0`.
pub fn train(
    model: &DplModel,
    store: &mut ParamStore<f32>,
    samples: &[WindowSample],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let cfg = &model.cfg;
    if samples.is_empty() {
        return Err(Error::Invalid("empty DPL dataset".into()));
    }
    let (train_idx, mut val_idx) = split_by_episode(samples, cfg.val_fraction, seed);
    if train_idx.is_empty() {
        return Err(Error::Invalid("DPL training split is empty".into()));
    }
    let score_idx: Vec<usize> = train_idx.iter().copied().take(cfg.eval_windows).collect();
    if val_idx.is_empty() {
        val_idx = score_idx.clone();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), store);
    let beta = cfg.kl_beta as f32;
    let m = cfg.latent_dim;

    let score = |store: &ParamStore<f32>, epoch: usize| -> Result<EpochStats> {
        let tr = evaluate(model, store, samples, &score_idx)?;
        let va = evaluate(model, store, samples, &val_idx)?;
        Ok(EpochStats {
            epoch,
            train_mse: tr.mse,
            val_mse: va.mse,
            kl: va.kl,
        })
    };

    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let first = score(store, 0)?;
    on_epoch(&first);
    curve.push(first);

    let mut order = train_idx.clone();
    let mut batch_no = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].data.as_slice()).collect();
            let eps: Vec<f32> = (0..chunk.len() * m).map(|_| rng.sample(StandardNormal)).collect();
            let mut tape = Tape::new();
            let x = tape.input(model.batch_tensor::<f32>(&refs)?);
            let (mu, ls) = model.encode_vars(&mut tape, store, x)?;
            let z = DplModel::sample_vars(&mut tape, mu, ls, Tensor::matrix(chunk.len(), m, eps))?;
            let recon = model.decode_vars(&mut tape, store, z)?;
            let l = loss(&mut tape, x, recon, mu, ls, beta)?;
            if !tape.value(l.total).item().is_finite() {
                return Err(Error::NonFiniteLoss(batch_no));
            }
            tape.backward(l.total).accumulate_into(&tape, store);
            adam.step(store);
            batch_no += 1;
        }
        let row = score(store, epoch)?;
        on_epoch(&row);
        curve.push(row);
    }
    Ok(curve)
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub train_windows: usize,
    pub test_windows: usize,
    /// `confusion[true][predicted]` in [`DriverStyle::ALL`] order.
    pub confusion: [[usize; 3]; 3],
}

/// Nearest-centroid style classification of encoder means: centroids from
/// `train_idx`, accuracy on `test_idx`.
pub fn probe(
    model: &DplModel,
    store: &ParamStore<f32>,
    samples: &[WindowSample],
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<ProbeReport> {
    let means = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(EVAL_CHUNK) {
            let refs: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].data.as_slice()).collect();
            for g in model.encode(store, &refs)? {
                out.push(g.mu.iter().map(|v| v.as_f64()).collect());
            }
        }
        Ok(out)
    };
    let m = model.cfg.latent_dim;
    let mut sums = vec![vec![0.0; m]; 3];
    let mut counts = [0usize; 3];
    for (mu, &i) in means(train_idx)?.iter().zip(train_idx) {
        let k = samples[i].style.index();
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(mu) {
            *s += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();

    let mut confusion = [[0usize; 3]; 3];
    let mut correct = 0usize;
    for (mu, &i) in means(test_idx)?.iter().zip(test_idx) {
        let pred = centroids
            .iter()
            .enumerate()
            .filter_map(|(k, c)| {
                c.as_ref()
                    .map(|c| (k, c.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .ok_or_else(|| Error::Invalid("probe has no training windows".into()))?;
        let truth = samples[i].style.index();
        confusion[truth][pred] += 1;
        correct += usize::from(truth == pred);
    }
    Ok(ProbeReport {
        accuracy: correct as f64 / test_idx.len().max(1) as f64,
        train_windows: train_idx.len(),
        test_windows: test_idx.len(),
        confusion,
    })
}
