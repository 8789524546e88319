//! Pre-norm decoder-style transformer at toy scale.
//!
//! Block: `h = x + Attn(LN1(x))`, `out = h + MLP(LN2(h))` with a tanh-approximated
//! GELU MLP of width `4 · d_model`. Learned absolute positions, untied output
//! head, final layer norm. Attention has no biases; MLP and layer norms do.

use crate::attention::{head_values, maps_from_logits, AttentionBundle, AttentionParams};
use crate::error::{Result, ShdError};
use crate::numkernel::{Mask, Matrix, SeededRng};

use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyTransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq: usize,
    pub causal: bool,
}

impl TinyTransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(ShdError::invalid("vocab must be at least 2"));
        }
        if self.layers == 0 || self.max_seq == 0 || self.heads == 0 {
            return Err(ShdError::invalid("layers, heads and max_seq must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ShdError::invalid(format!(
                "d_model {} is not a multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub attn: AttentionParams,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub mlp_in: Matrix,
    pub mlp_in_bias: Matrix,
    pub mlp_out: Matrix,
    pub mlp_out_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    pub config: TinyTransformerConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub head: Matrix,
}

impl TinyTransformer {
    /// Weights ~ N(0, 1/d_model), gains 1, biases 0.
    pub fn init(config: TinyTransformerConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let token_embedding = rng.normal_matrix(config.vocab, d, std);
        let position_embedding = rng.normal_matrix(config.max_seq, d, std);
        let blocks = (0..config.layers)
            .map(|_| {
                Ok(Block {
                    ln1_gain: Matrix::filled(1, d, 1.0),
                    ln1_bias: Matrix::zeros(1, d),
                    attn: AttentionParams::random(d, config.heads, rng)?,
                    ln2_gain: Matrix::filled(1, d, 1.0),
                    ln2_bias: Matrix::zeros(1, d),
                    mlp_in: rng.normal_matrix(d, 4 * d, std),
                    mlp_in_bias: Matrix::zeros(1, 4 * d),
                    mlp_out: rng.normal_matrix(4 * d, d, std),
                    mlp_out_bias: Matrix::zeros(1, d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TinyTransformer {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_gain: Matrix::filled(1, d, 1.0),
            final_bias: Matrix::zeros(1, d),
            head: rng.normal_matrix(d, config.vocab, std),
        })
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let named = [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("w_q", &b.attn.w_q),
                ("w_k", &b.attn.w_k),
                ("w_v", &b.attn.w_v),
                ("w_o", &b.attn.w_o),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("mlp_in", &b.mlp_in),
                ("mlp_in_bias", &b.mlp_in_bias),
                ("mlp_out", &b.mlp_out),
                ("mlp_out_bias", &b.mlp_out_bias),
            ];
            out.extend(named.into_iter().map(|(n, m)| (format!("blocks.{l}.{n}"), m)));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Same order as [`TinyTransformer::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.attn.w_q,
                &mut b.attn.w_k,
                &mut b.attn.w_v,
                &mut b.attn.w_o,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.mlp_in,
                &mut b.mlp_in_bias,
                &mut b.mlp_out,
                &mut b.mlp_out_bias,
            ]);
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.head]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq {
            return Err(ShdError::invalid(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(ShdError::invalid(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a leaf, in [`TinyTransformer::tensors`] order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|(_, m)| tape.leaf(m.clone())).collect()
    }

    /// Forward pass on `tape` using parameter leaves from [`TinyTransformer::leaves`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], tokens: &[usize]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = self.config;
        let n = tokens.len();
        let (dh, scale) = (cfg.head_dim(), 1.0 / (cfg.head_dim() as f64).sqrt());
        let mask = cfg.causal.then(|| Mask::causal(n));
        let tok = tape.gather(params[0], tokens);
        let pos = tape.top_rows(params[1], n);
        let mut x = tape.add(tok, pos);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = &params[2 + 12 * l..2 + 12 * (l + 1)];
            let h = tape.layer_norm(x, p[0], p[1]);
            let q = tape.matmul(h, p[2]);
            let k = tape.matmul(h, p[3]);
            let v = tape.matmul(h, p[4]);
            let mut logits = Vec::with_capacity(cfg.heads);
            let mut heads = Vec::with_capacity(cfg.heads);
            for i in 0..cfg.heads {
                let qi = tape.col_block(q, i * dh, dh);
                let ki = tape.col_block(k, i * dh, dh);
                let vi = tape.col_block(v, i * dh, dh);
                let raw = tape.matmul_nt(qi, ki);
                let li = tape.scale(raw, scale);
                if !tape.value(li).is_finite() {
                    return Err(ShdError::NonFinite { op: "attention logits" });
                }
                let ai = tape.softmax(li, mask.as_ref(), 1.0);
                heads.push(tape.matmul(ai, vi));
                logits.push(li);
            }
            let concat = tape.concat_cols(heads);
            let attn = tape.matmul(concat, p[5]);
            let resid = tape.add(x, attn);
            let h2 = tape.layer_norm(resid, p[6], p[7]);
            let up = tape.matmul(h2, p[8]);
            let up = tape.add_row(up, p[9]);
            let act = tape.gelu(up);
            let down = tape.matmul(act, p[10]);
            let down = tape.add_row(down, p[11]);
            x = tape.add(resid, down);
            layers.push(LayerTrace {
                attn_input: h,
                logits,
                output: x,
            });
        }
        let base = 2 + 12 * cfg.layers;
        let hf = tape.layer_norm(x, params[base], params[base + 1]);
        let logits = tape.matmul(hf, params[base + 2]);
        Ok(ForwardTrace { logits, layers })
    }

    /// Inference pass returning output logits and per-layer artifacts.
    pub fn inspect(&self, tokens: &[usize]) -> Result<Inspection> {
        let mut tape = Tape::new();
        let params = self.leaves(&mut tape);
        let trace = self.forward(&mut tape, &params, tokens)?;
        let mut bundles = Vec::with_capacity(self.config.layers);
        let mut features = Vec::with_capacity(self.config.layers);
        for (lt, block) in trace.layers.iter().zip(&self.blocks) {
            let logits: Vec<Matrix> = lt.logits.iter().map(|&v| tape.value(v).clone()).collect();
            let maps = maps_from_logits(&logits, self.config.causal, 1.0)?;
            let values = head_values(tape.value(lt.attn_input), &block.attn)?;
            bundles.push(AttentionBundle {
                maps,
                head_values: values,
                logits,
                causal: self.config.causal,
                temperature_used: 1.0,
            });
            features.push(tape.value(lt.output).clone());
        }
        Ok(Inspection {
            logits: tape.value(trace.logits).clone(),
            bundles,
            features,
        })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Layer-normalised attention input.
    pub attn_input: Var,
    /// Per-head scaled pre-softmax logits.
    pub logits: Vec<Var>,
    /// Block output (residual stream).
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct Inspection {
    pub logits: Matrix,
    pub bundles: Vec<AttentionBundle>,
    /// Block outputs, one per layer.
    pub features: Vec<Matrix>,
}
