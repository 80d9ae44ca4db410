//! Driving prior learning: a GRU variational autoencoder over position
//! windows of human-driven vehicles. At policy time the encoder mean is the
//! per-vehicle latent prior.

mod train;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use socialdrive_nn::{GruCell, Linear, ParamStore, Scalar, Tape, Tensor, Var};

use crate::env::layout::{rotate_to_south, LayoutConfig};
use crate::error::{Error, Result};
use crate::geometry::Point;

pub use train::{
    evaluate, probe, split_by_episode, train, write_curve_csv, EpochStats, EvalStats, ProbeReport,
    WindowSample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DplConfig {
    /// Window length δ in decision steps.
    pub window: usize,
    /// Offset between consecutive dataset windows.
    pub stride: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    /// Width of the dense layer over the flattened GRU outputs and of the decoder's first dense layer.
    pub fc_dim: usize,
    pub latent_dim: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub kl_beta: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Metres per normalized unit.
    pub position_scale: f64,
    pub val_fraction: f64,
    /// Training windows scored for the per-epoch train MSE.
    pub eval_windows: usize,
}

impl Default for DplConfig {
    fn default() -> Self {
        Self {
            window: 20,
            stride: 5,
            embed_dim: 16,
            gru_hidden: 32,
            fc_dim: 32,
            latent_dim: 16,
            lr: 5e-4,
            batch: 64,
            epochs: 50,
            kl_beta: 1e-3,
            log_std_min: -6.0,
            log_std_max: 2.0,
            position_scale: 20.0,
            val_fraction: 0.1,
            eval_windows: 1024,
        }
    }
}

impl DplConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |f: &str, m: &str| Err((f.to_string(), m.to_string()));
        if self.window < 2 {
            return err("window", "must be at least 2");
        }
        if self.stride == 0 {
            return err("stride", "must be positive");
        }
        for (f, v) in [
            ("embed_dim", self.embed_dim),
            ("gru_hidden", self.gru_hidden),
            ("fc_dim", self.fc_dim),
            ("latent_dim", self.latent_dim),
            ("batch", self.batch),
            ("eval_windows", self.eval_windows),
        ] {
            if v == 0 {
                return err(f, "must be at least 1");
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err("lr", "must be finite and non-negative");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return err("kl_beta", "must be finite and non-negative");
        }
        if !(self.log_std_min < self.log_std_max) || !self.log_std_min.is_finite() || !self.log_std_max.is_finite() {
            return err("log_std_min", "must be finite and below log_std_max");
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return err("position_scale", "must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err("val_fraction", "must lie in [0, 1)");
        }
        Ok(())
    }

    /// Flattened window width `2·δ`.
    pub fn input_width(&self) -> usize {
        2 * self.window
    }
}

/// Diagonal Gaussian over the latent style.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

/// Reparameterized sample `z = mu + eps∘sigma`.
pub fn sample<T: Scalar>(g: &GaussianLatent<T>, eps: &[T]) -> Result<Vec<T>> {
    if eps.len() != g.mu.len() || g.sigma.len() != g.mu.len() {
        return Err(Error::Invalid(format!(
            "eps has {} entries, latent has {}",
            eps.len(),
            g.mu.len()
        )));
    }
    Ok(g.mu.iter().zip(&g.sigma).zip(eps).map(|((&m, &s), &e)| m + e * s).collect())
}

/// Start indices of the windows cut from a trajectory of `len` steps: every
/// `stride` steps, plus one window aligned to the end when the stride does not land there.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len < window || stride == 0 {
        return Vec::new();
    }
    let last = len - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Canonical window encoding: rotated so the vehicle's entry arm is south,
/// translated to the window's first point and divided by `scale`. Output is
/// `[x0, y0, x1, y1, …]`.
pub fn normalize_window(points: &[Point<f64>], entry: Point<f64>, scale: f64) -> Vec<f64> {
    let arm = LayoutConfig::arm_of_point(entry);
    let Some(&first) = points.first() else {
        return Vec::new();
    };
    let o = rotate_to_south(arm, first);
    points
        .iter()
        .flat_map(|&p| {
            let q = rotate_to_south(arm, p);
            [(q[0] - o[0]) / scale, (q[1] - o[1]) / scale]
        })
        .collect()
}

/// The last `window` positions of `history`, left-padded with its first position.
pub fn pad_history(history: &[Point<f64>], window: usize) -> Result<Vec<Point<f64>>> {
    let Some(&first) = history.first() else {
        return Err(Error::Invalid("prior history needs at least one position".into()));
    };
    let tail = &history[history.len().saturating_sub(window)..];
    let mut out = vec![first; window - tail.len()];
    out.extend_from_slice(tail);
    Ok(out)
}

/// Tape handles of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub kl: Var,
}

/// Mean squared reconstruction error over every entry plus
/// `beta · mean_b Σ_j KL(N(mu, σ²) ‖ N(0, 1))`, with `σ = exp(log_std)`.
pub fn loss<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    recon: Var,
    mu: Var,
    log_std: Var,
    beta: T,
) -> Result<LossVars> {
    let mse = tape.mse(recon, target)?;
    let kl = kl_divergence(tape, mu, log_std)?;
    let weighted = tape.scale(kl, beta);
    let total = tape.add(mse, weighted)?;
    Ok(LossVars { total, mse, kl })
}

/// Batch mean of `½ Σ_j (mu² + σ² − 1 − 2·log σ)`.
pub fn kl_divergence<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_std: Var) -> Result<Var> {
    let rows = tape.value(mu).rows();
    let mu2 = tape.mul(mu, mu)?;
    let two_ls = tape.scale(log_std, T::lit(2.0));
    let var = tape.exp(two_ls);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_ls)?;
    let c = tape.add_scalar(b, -T::one());
    let s = tape.sum(c);
    Ok(tape.scale(s, T::lit(0.5) / T::lit(rows.max(1) as f64)))
}

/// Encoder and decoder layers. Parameters live in a separate [`ParamStore`]
/// so the same structure drives training, `f64` gradient checks and frozen inference.
#[derive(Debug, Clone)]
pub struct DplModel {
    pub cfg: DplConfig,
    enc_embed: Linear,
    enc_gru1: GruCell,
    enc_gru2: GruCell,
    enc_fc: Linear,
    head_mu: Linear,
    head_log_std: Linear,
    dec_expand: Linear,
    dec_embed: Linear,
    dec_gru1: GruCell,
    dec_gru2: GruCell,
    dec_fc1: Linear,
    dec_fc2: Linear,
}

impl DplModel {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &DplConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()
            .map_err(|(path, msg)| Error::Config { path: format!("dpl.{path}"), msg })?;
        let (d, e, h, f, m) = (cfg.window, cfg.embed_dim, cfg.gru_hidden, cfg.fc_dim, cfg.latent_dim);
        Ok(Self {
            cfg: cfg.clone(),
            enc_embed: Linear::new(store, "dpl.enc.embed", 2, e, true, rng)?,
            enc_gru1: GruCell::new(store, "dpl.enc.gru1", e, h, rng)?,
            enc_gru2: GruCell::new(store, "dpl.enc.gru2", h, h, rng)?,
            enc_fc: Linear::new(store, "dpl.enc.fc", d * h, f, true, rng)?,
            head_mu: Linear::new(store, "dpl.enc.mu", f, m, true, rng)?,
            head_log_std: Linear::new(store, "dpl.enc.log_std", f, m, true, rng)?,
            dec_expand: Linear::new(store, "dpl.dec.expand", m, m * d, true, rng)?,
            dec_embed: Linear::new(store, "dpl.dec.embed", m, e, true, rng)?,
            dec_gru1: GruCell::new(store, "dpl.dec.gru1", e, h, rng)?,
            dec_gru2: GruCell::new(store, "dpl.dec.gru2", h, h, rng)?,
            dec_fc1: Linear::new(store, "dpl.dec.fc1", h, f, true, rng)?,
            dec_fc2: Linear::new(store, "dpl.dec.fc2", f, 2, true, rng)?,
        })
    }

    /// Builds the layer structure and loads parameters from an NNCKPT1 file.
    pub fn load(cfg: &DplConfig, path: impl AsRef<std::path::Path>) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = Self::new(&mut store, cfg, &mut rng)?;
        let saved = socialdrive_nn::checkpoint::load::<f32>(path)?;
        store.load_values(&saved)?;
        Ok((model, store))
    }

    /// Runs a two-layer GRU over `inputs` from zero state and returns the
    /// top layer's hidden state at every step.
    fn run_grus<T: Scalar>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        g1: &GruCell,
        g2: &GruCell,
        inputs: &[Var],
    ) -> Result<Vec<Var>> {
        let rows = inputs.first().map_or(0, |&x| tape.value(x).rows());
        let zero = Tensor::zeros(&[rows, g1.hidden]);
        let mut h1 = tape.input(zero.clone());
        let mut h2 = tape.input(zero);
        let mut outs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h1 = g1.forward(tape, store, x, h1)?;
            h2 = g2.forward(tape, store, h1, h2)?;
            outs.push(h2);
        }
        Ok(outs)
    }

    /// Encodes a `B × 2δ` batch of normalized windows into `(mu, log_std)`,
    /// each `B × m`; `log_std` is clamped to the configured range.
    pub fn encode_vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let width = tape.value(x).cols();
        if width != self.cfg.input_width() {
            return Err(Error::Invalid(format!(
                "window has {} coordinates, expected {}",
                width,
                self.cfg.input_width()
            )));
        }
        let mut steps = Vec::with_capacity(self.cfg.window);
        for t in 0..self.cfg.window {
            let p = tape.slice_cols(x, 2 * t, 2)?;
            let e = self.enc_embed.forward(tape, store, p)?;
            steps.push(tape.tanh(e));
        }
        let outs = Self::run_grus(tape, store, &self.enc_gru1, &self.enc_gru2, &steps)?;
        let flat = tape.concat_cols(&outs)?;
        let f = self.enc_fc.forward(tape, store, flat)?;
        let f = tape.tanh(f);
        let mu = self.head_mu.forward(tape, store, f)?;
        let ls = self.head_log_std.forward(tape, store, f)?;
        let ls = tape.clamp(ls, T::lit(self.cfg.log_std_min), T::lit(self.cfg.log_std_max));
        Ok((mu, ls))
    }

    /// `z = mu + eps∘exp(log_std)` on the tape.
    pub fn sample_vars<T: Scalar>(tape: &mut Tape<T>, mu: Var, log_std: Var, eps: Tensor<T>) -> Result<Var> {
        let sigma = tape.exp(log_std);
        let noise = tape.mul_const(sigma, eps)?;
        Ok(tape.add(mu, noise)?)
    }

    /// Decodes a `B × m` latent batch into `B × 2δ` positions. The latent is
    /// projected to `m × δ`; column `t` conditions decoder step `t`.
    pub fn decode_vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let m = self.cfg.latent_dim;
        if tape.value(z).cols() != m {
            return Err(Error::Invalid(format!("latent has {} entries, expected {m}", tape.value(z).cols())));
        }
        let expanded = self.dec_expand.forward(tape, store, z)?;
        let mut steps = Vec::with_capacity(self.cfg.window);
        for t in 0..self.cfg.window {
            let zt = tape.slice_cols(expanded, t * m, m)?;
            let e = self.dec_embed.forward(tape, store, zt)?;
            steps.push(tape.tanh(e));
        }
        let outs = Self::run_grus(tape, store, &self.dec_gru1, &self.dec_gru2, &steps)?;
        let mut points = Vec::with_capacity(outs.len());
        for o in outs {
            let a = self.dec_fc1.forward(tape, store, o)?;
            let a = tape.tanh(a);
            points.push(self.dec_fc2.forward(tape, store, a)?);
        }
        Ok(tape.concat_cols(&points)?)
    }

    pub(crate) fn batch_tensor<T: Scalar>(&self, windows: &[&[f64]]) -> Result<Tensor<T>> {
        let w = self.cfg.input_width();
        let mut data = Vec::with_capacity(windows.len() * w);
        for win in windows {
            if win.len() != w {
                return Err(Error::Invalid(format!(
                    "window has {} coordinates, expected {w}",
                    win.len()
                )));
            }
            data.extend(win.iter().map(|&v| T::lit(v)));
        }
        Ok(Tensor::matrix(windows.len(), w, data))
    }

    /// Gaussian parameters for each normalized window.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, windows: &[&[f64]]) -> Result<Vec<GaussianLatent<T>>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.input(self.batch_tensor(windows)?);
        let (mu, ls) = self.encode_vars(&mut tape, store, x)?;
        let (mu, ls) = (tape.value(mu), tape.value(ls));
        Ok((0..windows.len())
            .map(|r| GaussianLatent {
                mu: mu.row(r).to_vec(),
                sigma: ls.row(r).iter().map(|v| v.exp()).collect(),
            })
            .collect())
    }

    /// Reconstructed normalized window `[x0, y0, …]` for one latent.
    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, z: &[T]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let zv = tape.input(Tensor::matrix(1, z.len(), z.to_vec()));
        let out = self.decode_vars(&mut tape, store, zv)?;
        Ok(tape.value(out).row(0).to_vec())
    }

    /// Latent prior (encoder mean) per history. `entries` are the positions
    /// where each vehicle entered the scene and fix its canonical frame.
    /// Each vehicle is encoded in its own row, so results do not depend on
    /// the order or number of vehicles.
    pub fn infer_priors<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        histories: &[(&[Point<f64>], Point<f64>)],
    ) -> Result<Vec<Vec<T>>> {
        let windows = histories
            .iter()
            .map(|&(h, entry)| {
                let padded = pad_history(h, self.cfg.window)?;
                Ok(normalize_window(&padded, entry, self.cfg.position_scale))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
        Ok(self.encode(store, &refs)?.into_iter().map(|g| g.mu).collect())
    }
}
