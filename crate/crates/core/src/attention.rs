//! Multi-head self-attention that exposes its per-head pieces.
//!
//! The output is written as `Σ_i A_i X_i`, where `A_i` is head `i`'s attention
//! map and `X_i = x W_i^V W_i^O` its value term. Squeezing needs both halves.

use crate::error::{Result, ShdError};
use crate::numkernel::{mm, mm_nt, softmax_rows, Mask, Matrix, SeededRng};

/// Projection weights of one attention layer. No biases.
///
/// `w_q`, `w_k`, `w_v` are `d_model × d_model`, read as `heads` column blocks of
/// width `head_dim`; `w_o` is `d_model × d_model`, read as `heads` row blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl AttentionParams {
    pub fn new(heads: usize, w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix) -> Result<Self> {
        let d_model = w_q.rows();
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(ShdError::invalid(format!(
                "d_model {d_model} is not a multiple of heads {heads}"
            )));
        }
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.shape() != (d_model, d_model) {
                return Err(ShdError::invalid(format!(
                    "{name} must be {d_model}x{d_model}, got {:?}",
                    w.shape()
                )));
            }
            if !w.is_finite() {
                return Err(ShdError::NonFinite { op: "AttentionParams" });
            }
        }
        Ok(AttentionParams {
            d_model,
            heads,
            head_dim: d_model / heads,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    /// Scaled-normal init, std = d_model^{-1/2}.
    pub fn random(d_model: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        let std = (d_model as f64).powf(-0.5);
        let mut w = || rng.normal_matrix(d_model, d_model, std);
        let (q, k, v, o) = (w(), w(), w(), w());
        AttentionParams::new(heads, q, k, v, o)
    }

    pub fn query_block(&self, head: usize) -> Matrix {
        self.w_q.col_block(head * self.head_dim, self.head_dim)
    }

    pub fn key_block(&self, head: usize) -> Matrix {
        self.w_k.col_block(head * self.head_dim, self.head_dim)
    }

    pub fn value_block(&self, head: usize) -> Matrix {
        self.w_v.col_block(head * self.head_dim, self.head_dim)
    }

    pub fn output_block(&self, head: usize) -> Matrix {
        self.w_o.row_block(head * self.head_dim, self.head_dim)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d_model {
            return Err(ShdError::Shape {
                op: "attention input",
                left: x.shape(),
                right: (self.d_model, self.d_model),
            });
        }
        if !x.is_finite() {
            return Err(ShdError::NonFinite { op: "attention input" });
        }
        Ok(())
    }
}

/// Per-layer artifacts of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    /// `A_i`, one `N × N` map per head, at `temperature_used`.
    pub maps: Vec<Matrix>,
    /// `X_i = x W_i^V W_i^O`, one `N × d_model` matrix per head.
    pub head_values: Vec<Matrix>,
    /// Pre-softmax logits `Q_i K_iᵀ / √d`, unmasked.
    pub logits: Vec<Matrix>,
    pub causal: bool,
    pub temperature_used: f64,
}

impl AttentionBundle {
    pub fn heads(&self) -> usize {
        self.maps.len()
    }

    pub fn seq_len(&self) -> usize {
        self.maps[0].rows()
    }

    pub fn mask(&self) -> Option<Mask> {
        self.causal.then(|| Mask::causal(self.seq_len()))
    }

    /// Maps recomputed from the cached logits at `temperature`.
    pub fn tempered_maps(&self, temperature: f64) -> Result<Vec<Matrix>> {
        maps_from_logits(&self.logits, self.causal, temperature)
    }
}

/// Scaled per-head logits `(x W_i^Q)(x W_i^K)ᵀ / √d`.
pub fn attention_logits(x: &Matrix, params: &AttentionParams) -> Result<Vec<Matrix>> {
    params.check_input(x)?;
    let scale = 1.0 / (params.head_dim as f64).sqrt();
    Ok((0..params.heads)
        .map(|i| {
            let q = mm(x, &params.query_block(i));
            let k = mm(x, &params.key_block(i));
            mm_nt(&q, &k).scale(scale)
        })
        .collect())
}

pub fn maps_from_logits(logits: &[Matrix], causal: bool, temperature: f64) -> Result<Vec<Matrix>> {
    let mask = logits.first().filter(|_| causal).map(|l| Mask::causal(l.rows()));
    logits
        .iter()
        .map(|l| softmax_rows(l, mask.as_ref(), temperature))
        .collect()
}

/// `softmax(Q_i K_iᵀ / (√d · temperature))` for every head.
pub fn attention_maps(x: &Matrix, params: &AttentionParams, causal: bool, temperature: f64) -> Result<Vec<Matrix>> {
    maps_from_logits(&attention_logits(x, params)?, causal, temperature)
}

/// `X_i = (x W_i^V) W_i^O` for every head.
pub fn head_values(x: &Matrix, params: &AttentionParams) -> Result<Vec<Matrix>> {
    params.check_input(x)?;
    Ok((0..params.heads)
        .map(|i| mm(&mm(x, &params.value_block(i)), &params.output_block(i)))
        .collect())
}

/// Forward pass at temperature 1, returning `Σ_i A_i X_i` and the bundle.
pub fn mha_forward(x: &Matrix, params: &AttentionParams, causal: bool) -> Result<(Matrix, AttentionBundle)> {
    let logits = attention_logits(x, params)?;
    let maps = maps_from_logits(&logits, causal, 1.0)?;
    let values = head_values(x, params)?;
    let mut out = Matrix::zeros(x.rows(), params.d_model);
    for (a, v) in maps.iter().zip(&values) {
        out.axpy(1.0, &mm(a, v))?;
    }
    Ok((
        out,
        AttentionBundle {
            maps,
            head_values: values,
            logits,
            causal,
            temperature_used: 1.0,
        },
    ))
}

/// The textbook `Concat(head_1, …, head_h) W^O` formulation.
pub fn mha_concat_form(x: &Matrix, params: &AttentionParams, causal: bool) -> Result<Matrix> {
    let maps = attention_maps(x, params, causal, 1.0)?;
    let d = params.head_dim;
    let mut concat = Matrix::zeros(x.rows(), params.d_model);
    for (i, a) in maps.iter().enumerate() {
        let head = mm(a, &mm(x, &params.value_block(i)));
        for r in 0..x.rows() {
            concat.row_mut(r)[i * d..(i + 1) * d].copy_from_slice(head.row(r));
        }
    }
    Ok(mm(&concat, &params.w_o))
}

/// Seeded synthetic layer: random weights, random input, one forward pass.
///
/// `input_scale` multiplies a standard-normal input; larger values sharpen maps.
pub fn random_bundle(
    seq_len: usize,
    d_model: usize,
    heads: usize,
    causal: bool,
    input_scale: f64,
    rng: &mut SeededRng,
) -> Result<AttentionBundle> {
    let params = AttentionParams::random(d_model, heads, rng)?;
    let x = rng.normal_matrix(seq_len, d_model, input_scale);
    Ok(mha_forward(&x, &params, causal)?.1)
}

/// Shannon entropy (nats) of each row.
pub fn row_entropies(map: &Matrix) -> Vec<f64> {
    (0..map.rows())
        .map(|i| map.row(i).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
        .collect()
}
