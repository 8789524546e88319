//! Distillation losses and the teacher/student layer correspondence.
//!
//! Every loss comes in two flavours: a plain evaluation and a `*_grad` variant
//! returning `(loss, ∂loss/∂student)` for the training tape. Teacher-side inputs
//! are constants.

use crate::attention::AttentionBundle;
use crate::error::{Result, ShdError};
use crate::numkernel::{mm, Mask, Matrix};
use crate::squeeze::{squeeze_heads, MergePlan, MergeResult, MergeStrategy};

/// Student probabilities are floored here inside the KL logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnLossKind {
    Kl,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Cosine-Gram matching of block outputs.
    SelfCorrelation,
    /// Trainable linear map from student to teacher width, MSE on block outputs.
    Projector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Weight of the squeezed-attention term.
    pub beta: f64,
    pub attn_temperature: f64,
    pub logit_temperature: f64,
    /// Weight of logit distillation; 0 disables it.
    pub kd_weight: f64,
    /// Weight of the feature baseline, when one is selected.
    pub aux_weight: f64,
    pub strategy: MergeStrategy,
    pub attn_loss: AttnLossKind,
    pub baseline: Option<Baseline>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::image_generation()
    }
}

impl DistillConfig {
    /// `T_a = 2`, `β = 2`.
    pub fn image_generation() -> Self {
        DistillConfig {
            beta: 2.0,
            attn_temperature: 2.0,
            logit_temperature: 1.0,
            kd_weight: 0.0,
            aux_weight: 1.0,
            strategy: MergeStrategy::Shd,
            attn_loss: AttnLossKind::Kl,
            baseline: None,
        }
    }

    /// Same as [`DistillConfig::image_generation`] with `β = 1`.
    pub fn language_model() -> Self {
        DistillConfig {
            beta: 1.0,
            ..Self::image_generation()
        }
    }

    /// Hard errors for impossible values; returns soft warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let non_negative = |v: f64| v >= 0.0 && v.is_finite();
        if !non_negative(self.beta) || !non_negative(self.kd_weight) || !non_negative(self.aux_weight) {
            return Err(ShdError::invalid("loss weights must be finite and non-negative"));
        }
        if !positive(self.attn_temperature) || !positive(self.logit_temperature) {
            return Err(ShdError::invalid("temperatures must be positive"));
        }
        let mut warnings = Vec::new();
        if self.attn_temperature < 1.0 {
            warnings.push(format!(
                "attention temperature {} sharpens the supervision maps; values >= 1 are recommended",
                self.attn_temperature
            ));
        }
        Ok(warnings)
    }
}

/// Student layer ↦ supervising teacher layer, both 1-indexed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    pub pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    /// Uniform stride: student layer `s` maps to teacher layer `round(s · L_t / L_s)`.
    pub fn uniform(teacher_layers: usize, student_layers: usize) -> Result<Self> {
        if student_layers == 0 || student_layers > teacher_layers {
            return Err(ShdError::invalid(format!(
                "cannot map {student_layers} student layers onto {teacher_layers} teacher layers"
            )));
        }
        let pairs = (1..=student_layers)
            .map(|s| (s, (2 * s * teacher_layers + student_layers) / (2 * student_layers)))
            .collect();
        Ok(LayerMap { pairs })
    }

    /// Zero-based `(student, teacher)` indices.
    pub fn zero_based(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(|&(s, t)| (s - 1, t - 1))
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ShdError::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn allowed(mask: Option<&Mask>, i: usize, j: usize) -> bool {
    mask.is_none_or(|m| m.allows(i, j))
}

/// Divergence between one teacher map and one student map.
///
/// KL is `KL(teacher ‖ student)` averaged over rows; MSE is averaged over
/// unmasked entries.
pub fn attn_map_loss(teacher: &Matrix, student: &Matrix, kind: AttnLossKind, mask: Option<&Mask>) -> Result<f64> {
    attn_map_loss_grad(teacher, student, kind, mask).map(|(l, _)| l)
}

pub fn attn_map_loss_grad(
    teacher: &Matrix,
    student: &Matrix,
    kind: AttnLossKind,
    mask: Option<&Mask>,
) -> Result<(f64, Matrix)> {
    check_same("attn_map_loss", teacher, student)?;
    if let Some(m) = mask {
        if m.shape() != teacher.shape() {
            return Err(ShdError::Shape {
                op: "attn_map_loss mask",
                left: teacher.shape(),
                right: m.shape(),
            });
        }
    }
    let (rows, cols) = teacher.shape();
    let mut grad = Matrix::zeros(rows, cols);
    let loss = match kind {
        AttnLossKind::Kl => {
            let valid_rows = (0..rows)
                .filter(|&i| (0..cols).any(|j| allowed(mask, i, j)))
                .count()
                .max(1) as f64;
            let mut total = 0.0;
            for i in 0..rows {
                for j in (0..cols).filter(|&j| allowed(mask, i, j)) {
                    let t = teacher[(i, j)];
                    if t <= 0.0 {
                        continue;
                    }
                    let s = student[(i, j)];
                    total += t * (t / s.max(PROB_FLOOR)).ln();
                    if s > PROB_FLOOR {
                        grad[(i, j)] = -t / s / valid_rows;
                    }
                }
            }
            total / valid_rows
        }
        AttnLossKind::Mse => {
            let count = (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i, j)))
                .filter(|&(i, j)| allowed(mask, i, j))
                .count()
                .max(1) as f64;
            let mut total = 0.0;
            for i in 0..rows {
                for j in (0..cols).filter(|&j| allowed(mask, i, j)) {
                    let d = student[(i, j)] - teacher[(i, j)];
                    total += d * d;
                    grad[(i, j)] = 2.0 * d / count;
                }
            }
            total / count
        }
    };
    Ok((loss, grad))
}

fn log_softmax(row: &[f64], inv_t: f64) -> Vec<f64> {
    let max = row.iter().map(|v| v * inv_t).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v * inv_t - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v * inv_t - lse).collect()
}

/// Temperature-scaled logit distillation, `T² · KL(softmax(t/T) ‖ softmax(s/T))`
/// averaged over valid positions.
pub fn logit_kd_loss(teacher: &Matrix, student: &Matrix, temperature: f64, valid: &[bool]) -> Result<f64> {
    logit_kd_loss_grad(teacher, student, temperature, valid).map(|(l, _)| l)
}

pub fn logit_kd_loss_grad(
    teacher: &Matrix,
    student: &Matrix,
    temperature: f64,
    valid: &[bool],
) -> Result<(f64, Matrix)> {
    check_same("logit_kd_loss", teacher, student)?;
    if valid.len() != teacher.rows() {
        return Err(ShdError::invalid("logit_kd_loss: one validity flag per row required"));
    }
    if !(temperature > 0.0) {
        return Err(ShdError::invalid("logit_kd_loss: temperature must be positive"));
    }
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = Matrix::zeros(teacher.rows(), teacher.cols());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv_t = 1.0 / temperature;
    let t2 = temperature * temperature;
    let mut total = 0.0;
    for i in (0..teacher.rows()).filter(|&i| valid[i]) {
        let lp = log_softmax(teacher.row(i), inv_t);
        let lq = log_softmax(student.row(i), inv_t);
        for j in 0..teacher.cols() {
            let p = lp[j].exp();
            total += p * (lp[j] - lq[j]);
            grad[(i, j)] = temperature * (lq[j].exp() - p) / count as f64;
        }
    }
    Ok((t2 * total / count as f64, grad))
}

fn normalized_rows(f: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = f.clone();
    let mut norms = Vec::with_capacity(f.rows());
    for i in 0..f.rows() {
        let n = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(ShdError::invalid(format!("feature row {i} has zero norm")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Cosine Gram matrix: entry `(i, j)` is the cosine of feature rows `i` and `j`.
pub fn cosine_gram(f: &Matrix) -> Result<Matrix> {
    let (n, _) = normalized_rows(f)?;
    Ok(mm(&n, &n.transpose()))
}

/// `1 − cos(Cor_t, Cor_s)` over flattened cosine Gram matrices. Feature widths
/// may differ.
pub fn self_correlation_loss(teacher: &Matrix, student: &Matrix) -> Result<f64> {
    self_correlation_loss_grad(teacher, student).map(|(l, _)| l)
}

pub fn self_correlation_loss_grad(teacher: &Matrix, student: &Matrix) -> Result<(f64, Matrix)> {
    if teacher.rows() != student.rows() {
        return Err(ShdError::Shape {
            op: "self_correlation_loss",
            left: teacher.shape(),
            right: student.shape(),
        });
    }
    let gt = cosine_gram(teacher)?;
    let (ns, norms) = normalized_rows(student)?;
    let gs = mm(&ns, &ns.transpose());
    let (a, b) = (gt.frobenius_norm(), gs.frobenius_norm());
    let c: f64 = gt.as_slice().iter().zip(gs.as_slice()).map(|(x, y)| x * y).sum();
    let loss = 1.0 - c / (a * b);
    // ∂L/∂Gs, then through Gs = N Nᵀ and the row normalisation.
    let d_gs = gt.zip_with(&gs, "self_correlation", |t, s| -(t / (a * b) - c * s / (a * b * b * b)))?;
    let d_n = mm(&d_gs.add(&d_gs.transpose())?, &ns);
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for i in 0..student.rows() {
        let n_i = ns.row(i);
        let dn_i = d_n.row(i);
        let proj: f64 = n_i.iter().zip(dn_i).map(|(x, y)| x * y).sum();
        for (g, (dn, nv)) in grad.row_mut(i).iter_mut().zip(dn_i.iter().zip(n_i)) {
            *g = (dn - proj * nv) / norms[i];
        }
    }
    Ok((loss, grad))
}

/// Mean squared error against a constant target; gradient is w.r.t. `pred`.
pub fn mse_loss_grad(target: &Matrix, pred: &Matrix) -> Result<(f64, Matrix)> {
    check_same("mse", target, pred)?;
    let count = target.as_slice().len() as f64;
    let diff = pred.sub(target)?;
    Ok((diff.frobenius_norm_sq() / count, diff.scale(2.0 / count)))
}

/// `mean((F_s W − F_t)²)`.
pub fn projector_fd_loss(teacher: &Matrix, student: &Matrix, projector: &Matrix) -> Result<f64> {
    if student.cols() != projector.rows() || teacher.cols() != projector.cols() {
        return Err(ShdError::Shape {
            op: "projector_fd_loss",
            left: student.shape(),
            right: projector.shape(),
        });
    }
    if teacher.rows() != student.rows() {
        return Err(ShdError::Shape {
            op: "projector_fd_loss",
            left: teacher.shape(),
            right: student.shape(),
        });
    }
    Ok(mse_loss_grad(teacher, &mm(student, projector))?.0)
}

/// Squeezed, tempered teacher maps for one layer of one sample.
pub fn supervision_maps(teacher: &AttentionBundle, cfg: &DistillConfig, plan: &MergePlan) -> Result<MergeResult> {
    let tempered = teacher.tempered_maps(cfg.attn_temperature)?;
    squeeze_heads(&tempered, &teacher.head_values, plan)
}

/// Squeezed-attention loss for one sample: β times the sum over mapped layers
/// and student heads of the attention-map loss, both sides at `T_a`.
///
/// `plans[k]` is the merge plan for the `k`-th pair of `layer_map`.
pub fn shd_loss(
    teacher: &[AttentionBundle],
    student: &[AttentionBundle],
    cfg: &DistillConfig,
    layer_map: &LayerMap,
    plans: &[MergePlan],
) -> Result<f64> {
    if plans.len() != layer_map.pairs.len() {
        return Err(ShdError::invalid("one merge plan per mapped layer pair is required"));
    }
    if cfg.beta == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((s, t), plan) in layer_map.zero_based().zip(plans) {
        let (tb, sb) = match (teacher.get(t), student.get(s)) {
            (Some(tb), Some(sb)) => (tb, sb),
            _ => return Err(ShdError::invalid("layer map refers to a missing layer")),
        };
        if tb.seq_len() != sb.seq_len() || tb.causal != sb.causal {
            return Err(ShdError::invalid(
                "teacher and student disagree on sequence length or mask",
            ));
        }
        if plan.student_heads() != sb.heads() {
            return Err(ShdError::invalid(format!(
                "plan yields {} maps for a student layer with {} heads",
                plan.student_heads(),
                sb.heads()
            )));
        }
        let targets = supervision_maps(tb, cfg, plan)?;
        let student_maps = sb.tempered_maps(cfg.attn_temperature)?;
        let mask = sb.mask();
        for (tm, sm) in targets.maps.iter().zip(&student_maps) {
            total += attn_map_loss(tm, sm, cfg.attn_loss, mask.as_ref())?;
        }
    }
    Ok(cfg.beta * total)
}
