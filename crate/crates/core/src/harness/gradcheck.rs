//! Central-difference verification of the analytic training gradients.

use crate::distill::DistillConfig;
use crate::error::{Result, ShdError};
use crate::numkernel::{Matrix, SeededRng};
use crate::par::Exec;

use super::data::Sample;
use super::model::{TinyTransformer, TinyTransformerConfig};
use super::train::{sample_objective, Distiller, SampleDistill};

pub const FD_EPS: f64 = 1e-5;
pub const MAX_SEQ: usize = 8;
pub const MAX_D_MODEL: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst per-tensor `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖)`.
    pub max_rel_err: f64,
    /// Worst absolute entry difference.
    pub max_abs_err: f64,
    pub per_tensor: Vec<(String, f64)>,
    pub parameters: usize,
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        return 0.0;
    }
    a.sub(b).expect("same shape").frobenius_norm() / scale
}

/// Checks the student objective (task loss plus whatever `distill` enables)
/// on one random sequence of length `student.max_seq`.
pub fn grad_check(
    teacher: TinyTransformerConfig,
    student: TinyTransformerConfig,
    distill: Option<&DistillConfig>,
    seed: u64,
    exec: Exec,
) -> Result<GradCheckReport> {
    for c in [&teacher, &student] {
        if c.max_seq > MAX_SEQ || c.d_model > MAX_D_MODEL {
            return Err(ShdError::invalid(format!(
                "gradient checks are limited to max_seq <= {MAX_SEQ} and d_model <= {MAX_D_MODEL}"
            )));
        }
    }
    student.validate()?;
    let mut rng = SeededRng::stream(seed, 3);
    let n = student.max_seq;
    let sample = Sample {
        tokens: (0..n).map(|_| rng.below(student.vocab)).collect(),
        targets: (0..n).map(|_| rng.below(student.vocab)).collect(),
        loss_mask: vec![true; n],
    };
    let model = TinyTransformer::init(student, &mut SeededRng::stream(seed, 0))?;
    let setup = match distill {
        Some(cfg) => {
            let t = TinyTransformer::init(teacher, &mut SeededRng::stream(seed, 4))?;
            let d = Distiller::new(t, &student, cfg.clone(), std::slice::from_ref(&sample))?;
            let signals = d.signals(&sample)?;
            let projectors = if cfg.baseline == Some(crate::distill::Baseline::Projector) {
                d.layer_map
                    .pairs
                    .iter()
                    .map(|_| rng.normal_matrix(student.d_model, teacher.d_model, 0.3))
                    .collect()
            } else {
                Vec::new()
            };
            Some((d, signals, projectors))
        }
        None => None,
    };
    let objective = |m: &TinyTransformer, proj: &[Matrix], want: bool| {
        let ctx = setup.as_ref().map(|(d, signals, _)| SampleDistill {
            config: &d.config,
            layer_map: &d.layer_map,
            signals,
            projectors: proj,
        });
        sample_objective(m, &sample, ctx, want)
    };
    let base_proj: Vec<Matrix> = setup.as_ref().map(|s| s.2.clone()).unwrap_or_default();
    let analytic = objective(&model, &base_proj, true)?.1.expect("gradients requested");

    let mut names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    names.extend((0..base_proj.len()).map(|k| format!("projector.{k}")));
    let entries: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(t, g)| (0..g.as_slice().len()).map(move |e| (t, e)))
        .collect();
    let n_model = model.tensors().len();
    let numeric_flat = exec.try_map(entries.len(), |k| {
        let (t, e) = entries[k];
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            let mut p = base_proj.clone();
            let target = if t < n_model {
                m.tensors_mut().swap_remove(t)
            } else {
                &mut p[t - n_model]
            };
            target.as_mut_slice()[e] += delta;
            Ok(objective(&m, &p, false)?.0.total())
        };
        Ok::<_, ShdError>((eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS))
    })?;
    let mut numeric: Vec<Matrix> = analytic.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
    for (&(t, e), v) in entries.iter().zip(numeric_flat) {
        numeric[t].as_mut_slice()[e] = v;
    }
    let per_tensor: Vec<(String, f64)> = names
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(n, (a, b))| (n, rel_err(a, b)))
        .collect();
    Ok(GradCheckReport {
        max_rel_err: per_tensor.iter().map(|p| p.1).fold(0.0, f64::max),
        max_abs_err: analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max),
        per_tensor,
        parameters: entries.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{AttnLossKind, Baseline};

    fn toy(d_model: usize, heads: usize) -> TinyTransformerConfig {
        TinyTransformerConfig {
            vocab: 7,
            d_model,
            heads,
            layers: 2,
            max_seq: 8,
            causal: true,
        }
    }

    #[test]
    fn task_only_gradients_match_finite_differences() {
        let r = grad_check(toy(16, 4), toy(12, 3), None, 1, Exec::default()).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn shd_kl_gradients_match_finite_differences() {
        let cfg = DistillConfig::default();
        let r = grad_check(toy(16, 4), toy(12, 3), Some(&cfg), 2, Exec::default()).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn shd_mse_with_self_correlation_gradients_match() {
        let cfg = DistillConfig {
            attn_loss: AttnLossKind::Mse,
            baseline: Some(Baseline::SelfCorrelation),
            ..DistillConfig::default()
        };
        let r = grad_check(toy(16, 4), toy(12, 3), Some(&cfg), 3, Exec::default()).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn projector_and_logit_kd_gradients_match() {
        let cfg = DistillConfig {
            kd_weight: 0.5,
            logit_temperature: 2.0,
            baseline: Some(Baseline::Projector),
            ..DistillConfig::default()
        };
        let r = grad_check(toy(16, 4), toy(12, 3), Some(&cfg), 4, Exec::default()).unwrap();
        assert!(r.per_tensor.iter().any(|(n, _)| n == "projector.0"));
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn oversized_models_are_refused() {
        assert!(grad_check(toy(16, 4), toy(32, 4), None, 0, Exec::default()).is_err());
    }
}
