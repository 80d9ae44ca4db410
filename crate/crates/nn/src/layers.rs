//! Layers used by the trajectory autoencoder and the policy network.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive pre-softmax bias for padded attention rows.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_weight(format!("{name}.w"), inputs, outputs, rng)?;
        let b = if bias {
            Some(store.add_zeros(format!("{name}.b"), 1, outputs)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Gated recurrent unit:
/// `z = σ([x,h]W_z + b_z)`, `r = σ([x,h]W_r + b_r)`,
/// `h̃ = tanh([x, r∘h]W_h + b_h)`, `h' = (1−z)∘h + z∘h̃`.
///
/// `W_z` and `W_r` are stored side by side in one `gates` matrix.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_gates: ParamId,
    pub b_gates: ParamId,
    pub w_cand: ParamId,
    pub b_cand: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = inputs + hidden;
        Ok(Self {
            w_gates: store.add_weight(format!("{name}.w_gates"), fan_in, 2 * hidden, rng)?,
            b_gates: store.add_zeros(format!("{name}.b_gates"), 1, 2 * hidden)?,
            w_cand: store.add_weight(format!("{name}.w_cand"), fan_in, hidden, rng)?,
            b_cand: store.add_zeros(format!("{name}.b_cand"), 1, hidden)?,
            inputs,
            hidden,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let (xr, hr) = (tape.value(x).rows(), tape.value(h).rows());
        if xr != hr || tape.value(x).cols() != self.inputs || tape.value(h).cols() != self.hidden {
            return Err(shape_err("gru_cell", tape.value(x).shape(), tape.value(h).shape()));
        }
        let xh = tape.concat_cols(&[x, h])?;
        let wg = tape.param(store, self.w_gates);
        let bg = tape.param(store, self.b_gates);
        let pre = tape.matmul(xh, wg)?;
        let pre = tape.add_bias(pre, bg)?;
        let gates = tape.sigmoid(pre);
        let z = tape.slice_cols(gates, 0, self.hidden)?;
        let r = tape.slice_cols(gates, self.hidden, self.hidden)?;

        let rh = tape.mul(r, h)?;
        let xrh = tape.concat_cols(&[x, rh])?;
        let wc = tape.param(store, self.w_cand);
        let bc = tape.param(store, self.b_cand);
        let cand = tape.matmul(xrh, wc)?;
        let cand = tape.add_bias(cand, bc)?;
        let cand = tape.tanh(cand);

        // h + z∘(h̃ − h)
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        tape.add(h, step)
    }
}

/// Ego-query multi-head attention over groups of rows.
///
/// The input holds `B` samples of `N` rows each (`B·N × D`); row 0 of every
/// group is the ego vehicle and issues the only query. Per head `m`:
/// `At^m = softmax(q·Kᵀ/√d_h + mask)·V`; each head is projected by its own
/// linear layer and the projections are summed.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub proj: Vec<Linear>,
    pub inputs: usize,
    pub dim: usize,
    pub heads: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    /// `B × N` attention weights per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        dim: usize,
        heads: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::Invalid(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let wq = store.add_weight(format!("{name}.wq"), inputs, dim, rng)?;
        let wk = store.add_weight(format!("{name}.wk"), inputs, dim, rng)?;
        let wv = store.add_weight(format!("{name}.wv"), inputs, dim, rng)?;
        let proj = (0..heads)
            .map(|m| Linear::new(store, &format!("{name}.proj{m}"), dim / heads, outputs, true, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            wq,
            wk,
            wv,
            proj,
            inputs,
            dim,
            heads,
            outputs,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `x: (B·N) × inputs`; `valid[s·N + i]` marks real rows. Row 0 of each
    /// group must be valid.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        group: usize,
        valid: &[bool],
    ) -> Result<AttentionOutput> {
        let rows = tape.value(x).rows();
        if group == 0 || rows % group != 0 || valid.len() != rows {
            return Err(shape_err("attention", tape.value(x).shape(), &[group, valid.len()]));
        }
        let batch = rows / group;
        for s in 0..batch {
            if !valid[s * group] {
                return Err(NnError::AllMasked(s));
            }
        }
        let bias = Tensor::matrix(
            batch,
            group,
            valid
                .iter()
                .map(|&v| if v { T::zero() } else { T::lit(MASK_BIAS) })
                .collect(),
        );
        let bias = tape.input(bias);

        let ego_idx: Vec<usize> = (0..batch).map(|s| s * group).collect();
        let ego = tape.select_rows(x, &ego_idx)?;
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q_all = tape.matmul(ego, wq)?;
        let k_all = tape.matmul(x, wk)?;
        let v_all = tape.matmul(x, wv)?;

        let dh = self.head_dim();
        let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads);
        let mut out: Option<Var> = None;
        for (m, proj) in self.proj.iter().enumerate() {
            let q = tape.slice_cols(q_all, m * dh, dh)?;
            let k = tape.slice_cols(k_all, m * dh, dh)?;
            let v = tape.slice_cols(v_all, m * dh, dh)?;
            let scores = tape.group_scores(q, k)?;
            let scores = tape.scale(scores, inv_sqrt);
            let scores = tape.add(scores, bias)?;
            let w = tape.softmax(scores);
            let head = tape.group_mix(w, v)?;
            let head = proj.forward(tape, store, head)?;
            weights.push(w);
            out = Some(match out {
                Some(acc) => tape.add(acc, head)?,
                None => head,
            });
        }
        Ok(AttentionOutput {
            out: out.expect("at least one head"),
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_with_zero_params_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "g", 3, 2, &mut rng).unwrap();
        store.zero_values();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(1, 3, &[0.3, -1.0, 2.0]));
        let h = tape.input(Tensor::from_f64(1, 2, &[0.8, -0.4]));
        let h2 = cell.forward(&mut tape, &store, x, h).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.4, -0.2]);

        let h0 = tape.input(Tensor::zeros(&[1, 2]));
        let h3 = cell.forward(&mut tape, &store, x, h0).unwrap();
        assert_eq!(tape.value(h3).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_rejects_mismatched_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cell = GruCell::new(&mut store, "g", 2, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        let h = tape.input(Tensor::zeros(&[3, 2]));
        assert!(cell.forward(&mut tape, &store, x, h).is_err());
    }

    #[test]
    fn ego_only_attention_has_unit_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let att = MultiHeadAttention::new(&mut store, "a", 4, 8, 2, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(1, 4, &[0.1, 0.2, -0.3, 0.4]));
        let o = att.forward(&mut tape, &store, x, 1, &[true]).unwrap();
        for w in o.weights {
            assert_eq!(tape.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights_over_valid_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let att = MultiHeadAttention::new(&mut store, "a", 3, 4, 2, 2, &mut rng).unwrap();
        let row = [0.5, -0.2, 0.9];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(4, 3, &data));
        let o = att
            .forward(&mut tape, &store, x, 4, &[true, true, false, true])
            .unwrap();
        for w in o.weights {
            let w = tape.value(w).data();
            for (i, &v) in w.iter().enumerate() {
                let want = if i == 2 { 0.0 } else { 1.0 / 3.0 };
                assert!((v - want).abs() < 1e-12, "{w:?}");
            }
        }
    }

    #[test]
    fn masked_ego_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let att = MultiHeadAttention::new(&mut store, "a", 2, 2, 1, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        let err = att.forward(&mut tape, &store, x, 2, &[false, false]).unwrap_err();
        assert!(matches!(err, NnError::AllMasked(0)));
    }
}
