//! Prior-attention actor-critic: a row-wise state encoder, per-vehicle prior
//! concatenation, ego-query multi-head attention and a shared decoder with
//! separate logit and value outputs.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use socialdrive_nn::{AttentionOutput, Linear, MultiHeadAttention, ParamStore, Scalar, Tape, Tensor, Var};

use crate::env::observe::{Observation, FEATURES};
use crate::env::Action;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub encoder_hidden: usize,
    pub encoder_out: usize,
    /// Total query/key/value width across heads.
    pub attention_dim: usize,
    pub heads: usize,
    pub attention_out: usize,
    pub decoder_hidden: usize,
    /// Latent prior width per neighbor; 0 disables priors.
    pub prior_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 64,
            encoder_out: 64,
            attention_dim: 128,
            heads: 2,
            attention_out: 64,
            decoder_hidden: 64,
            prior_dim: 16,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        for (f, v) in [
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_out", self.encoder_out),
            ("attention_dim", self.attention_dim),
            ("heads", self.heads),
            ("attention_out", self.attention_out),
            ("decoder_hidden", self.decoder_hidden),
        ] {
            if v == 0 {
                return Err((f.to_string(), "must be at least 1".to_string()));
            }
        }
        if self.attention_dim % self.heads != 0 {
            return Err((
                "attention_dim".to_string(),
                format!("{} is not divisible by {} heads", self.attention_dim, self.heads),
            ));
        }
        Ok(())
    }
}

pub const ACTIONS: usize = 3;

/// Network input for one decision: feature rows (ego first), validity and
/// priors, flattened row-major. Valid neighbor rows are stored in a
/// canonical order so the output does not depend on how neighbors were listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInput {
    pub rows: Vec<f64>,
    pub valid: Vec<bool>,
    pub priors: Vec<f64>,
    pub prior_dim: usize,
}

impl PolicyInput {
    /// `priors` holds one vector per valid neighbor, in the observation's row
    /// order. The ego row and masked rows get zero priors.
    pub fn new(obs: &Observation, priors: &[Vec<f64>], prior_dim: usize) -> Result<Self> {
        let valid_rows: Vec<usize> = (0..obs.neighbors.len()).filter(|&i| obs.mask[i]).collect();
        if prior_dim > 0 && priors.len() != valid_rows.len() {
            return Err(Error::Invalid(format!(
                "{} priors for {} neighbors",
                priors.len(),
                valid_rows.len()
            )));
        }
        if let Some(p) = priors.iter().find(|p| prior_dim > 0 && p.len() != prior_dim) {
            return Err(Error::Invalid(format!("prior has {} entries, expected {prior_dim}", p.len())));
        }
        let zero = vec![0.0; prior_dim];
        let mut pairs: Vec<(&[f64; FEATURES], &[f64])> = valid_rows
            .iter()
            .enumerate()
            .map(|(k, &i)| (&obs.neighbors[i], if prior_dim > 0 { priors[k].as_slice() } else { &zero[..] }))
            .collect();
        pairs.sort_by(|a, b| lex(a.0, b.0).then_with(|| lex(a.1, b.1)));

        let group = 1 + obs.neighbors.len();
        let mut rows = Vec::with_capacity(group * FEATURES);
        let mut valid = Vec::with_capacity(group);
        let mut pri = Vec::with_capacity(group * prior_dim);
        rows.extend_from_slice(&obs.ego);
        valid.push(true);
        pri.extend_from_slice(&zero);
        for (r, p) in &pairs {
            rows.extend_from_slice(*r);
            valid.push(true);
            pri.extend_from_slice(p);
        }
        for _ in pairs.len()..obs.neighbors.len() {
            rows.extend_from_slice(&[0.0; FEATURES]);
            valid.push(false);
            pri.extend_from_slice(&zero);
        }
        Ok(Self {
            rows,
            valid,
            priors: pri,
            prior_dim,
        })
    }

    pub fn group(&self) -> usize {
        self.valid.len()
    }
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    /// Per-head attention weights over the input rows.
    pub attention: Vec<Vec<f64>>,
}

impl PolicyOutput {
    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self.logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        self.logits.iter().map(|l| l - lse).collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Chooses an action and returns it with its log-probability. Greedy ties
/// go to the lowest index.
pub fn act<R: Rng>(out: &PolicyOutput, mode: ActMode, rng: &mut R) -> (Action, f64) {
    let lp = out.log_probs();
    let idx = match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for (i, &l) in out.logits.iter().enumerate() {
                if l > out.logits[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let probs = out.probs();
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (Action::from_index(idx).expect("three actions"), lp[idx])
}

/// Tape handles of a batched forward pass.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    /// `B × 3`.
    pub logits: Var,
    /// `B × 1`.
    pub value: Var,
    pub attention: AttentionOutput,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    enc1: Linear,
    enc2: Linear,
    attention: MultiHeadAttention,
    dec: Linear,
    logits: Linear,
    value: Linear,
}

impl PolicyNet {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &PolicyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()
            .map_err(|(path, msg)| Error::Config { path: format!("policy.{path}"), msg })?;
        let width = cfg.encoder_out + cfg.prior_dim;
        Ok(Self {
            cfg: *cfg,
            enc1: Linear::new(store, "policy.enc1", FEATURES, cfg.encoder_hidden, true, rng)?,
            enc2: Linear::new(store, "policy.enc2", cfg.encoder_hidden, cfg.encoder_out, true, rng)?,
            attention: MultiHeadAttention::new(
                store,
                "policy.attn",
                width,
                cfg.attention_dim,
                cfg.heads,
                cfg.attention_out,
                rng,
            )?,
            dec: Linear::new(store, "policy.dec", cfg.attention_out, cfg.decoder_hidden, true, rng)?,
            logits: Linear::new(store, "policy.logits", cfg.decoder_hidden, ACTIONS, true, rng)?,
            value: Linear::new(store, "policy.value", cfg.decoder_hidden, 1, true, rng)?,
        })
    }

    /// Builds the layer structure and loads parameters from an NNCKPT1 file.
    pub fn load(cfg: &PolicyConfig, path: impl AsRef<std::path::Path>) -> Result<(Self, ParamStore<f32>)> {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = Self::new(&mut store, cfg, &mut rng)?;
        let saved = socialdrive_nn::checkpoint::load::<f32>(path)?;
        store.load_values(&saved)?;
        Ok((net, store))
    }

    /// Row-wise two-layer tanh perceptron; masked rows come out as zeros.
    pub fn encode_state<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        rows: Var,
        valid: &[bool],
    ) -> Result<Var> {
        let h = self.enc1.forward(tape, store, rows)?;
        let h = tape.tanh(h);
        let h = self.enc2.forward(tape, store, h)?;
        let h = tape.tanh(h);
        let w = self.cfg.encoder_out;
        let mask = Tensor::matrix(
            valid.len(),
            w,
            valid
                .iter()
                .flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, w))
                .collect(),
        );
        Ok(tape.mul_const(h, mask)?)
    }

    /// Appends each row's prior; identity when priors are disabled.
    pub fn concat_priors<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, priors: Tensor<T>) -> Result<Var> {
        if self.cfg.prior_dim == 0 {
            return Ok(x);
        }
        if priors.shape() != [tape.value(x).rows(), self.cfg.prior_dim] {
            return Err(Error::Invalid(format!(
                "prior matrix {:?} does not match {} rows of width {}",
                priors.shape(),
                tape.value(x).rows(),
                self.cfg.prior_dim
            )));
        }
        let p = tape.input(priors);
        Ok(tape.concat_cols(&[x, p])?)
    }

    pub fn forward_vars<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &[&PolicyInput],
    ) -> Result<PolicyVars> {
        let group = inputs.first().map_or(0, |i| i.group());
        if group == 0 {
            return Err(Error::Invalid("empty policy batch".into()));
        }
        let m = self.cfg.prior_dim;
        let (mut rows, mut valid, mut priors) = (Vec::new(), Vec::new(), Vec::new());
        for inp in inputs {
            if inp.group() != group || inp.prior_dim != m || inp.rows.len() != group * FEATURES {
                return Err(Error::Invalid("inconsistent policy inputs in batch".into()));
            }
            rows.extend(inp.rows.iter().map(|&v| T::lit(v)));
            valid.extend_from_slice(&inp.valid);
            priors.extend(inp.priors.iter().map(|&v| T::lit(v)));
        }
        let n = inputs.len() * group;
        let x = tape.input(Tensor::matrix(n, FEATURES, rows));
        let x = self.encode_state(tape, store, x, &valid)?;
        let x = self.concat_priors(tape, x, Tensor::matrix(n, m, priors))?;
        let attention = self.attention.forward(tape, store, x, group, &valid)?;
        let d = self.dec.forward(tape, store, attention.out)?;
        let d = tape.tanh(d);
        let logits = self.logits.forward(tape, store, d)?;
        let value = self.value.forward(tape, store, d)?;
        Ok(PolicyVars {
            logits,
            value,
            attention,
        })
    }

    pub fn forward_batch<T: Scalar>(&self, store: &ParamStore<T>, inputs: &[&PolicyInput]) -> Result<Vec<PolicyOutput>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let v = self.forward_vars(&mut tape, store, inputs)?;
        let (lg, val) = (tape.value(v.logits), tape.value(v.value));
        let out = (0..inputs.len())
            .map(|r| PolicyOutput {
                logits: lg.row(r).iter().map(|x| x.as_f64()).collect(),
                value: val.row(r)[0].as_f64(),
                attention: v
                    .attention
                    .weights
                    .iter()
                    .map(|w| tape.value(*w).row(r).iter().map(|x| x.as_f64()).collect())
                    .collect(),
            })
            .collect();
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, input: &PolicyInput) -> Result<PolicyOutput> {
        Ok(self.forward_batch(store, &[input])?.remove(0))
    }
}
