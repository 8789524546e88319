//! Training loops for the teacher and for distilled students.
//!
//! Optimiser: Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) with optional global-norm
//! gradient clipping. Per-sample forward/backward passes run through [`Exec`];
//! their gradients are summed in batch order, so parallel and sequential runs
//! agree bit for bit.
//!
//! Random streams derived from `TrainConfig::seed`: 0 initialises the model,
//! 1 draws batches, 2 initialises feature projectors.

use crate::attention::AttentionBundle;
use crate::distill::{
    attn_map_loss_grad, logit_kd_loss_grad, mse_loss_grad, self_correlation_loss_grad, Baseline, DistillConfig,
    LayerMap,
};
use crate::error::{Result, ShdError};
use crate::numkernel::{Mask, Matrix, SeededRng};
use crate::par::Exec;
use crate::squeeze::{head_similarity, MergePlan, MergeStrategy};

use super::data::Sample;
use super::model::{TinyTransformer, TinyTransformerConfig};
use super::tape::{Tape, Var};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub const ALPHA_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation cadence in steps; 0 evaluates only after the last step.
    pub val_every: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// α values are recorded on steps divisible by this; 0 disables recording.
    pub alpha_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
            val_every: 100,
            grad_clip: 1.0,
            alpha_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ShdError::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(ShdError::invalid("batch_size must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(ShdError::invalid("grad_clip must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task: f64,
    pub shd: f64,
    pub aux: f64,
    pub total: f64,
    /// Validation loss measured after this step's update, when scheduled.
    pub val: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaRecord {
    pub step: usize,
    /// Zero-based student layer.
    pub layer: usize,
    pub group: usize,
    /// Position within the step's batch.
    pub sample: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub alphas: Vec<AlphaRecord>,
    /// Validation loss of the returned parameters.
    pub final_val: f64,
}

impl RunMetrics {
    /// Per student layer, counts of recorded α in 20 equal bins over `[0, 1]`.
    pub fn alpha_histograms(&self, layers: usize) -> Vec<[usize; ALPHA_HISTOGRAM_BINS]> {
        let mut out = vec![[0; ALPHA_HISTOGRAM_BINS]; layers];
        for r in &self.alphas {
            if let Some(h) = out.get_mut(r.layer) {
                h[alpha_bin(r.alpha)] += 1;
            }
        }
        out
    }
}

/// Bin index of `alpha` among 20 equal bins over `[0, 1]`; 1 falls in the last bin.
pub fn alpha_bin(alpha: f64) -> usize {
    ((alpha.clamp(0.0, 1.0) * ALPHA_HISTOGRAM_BINS as f64) as usize).min(ALPHA_HISTOGRAM_BINS - 1)
}

/// Loss components of one sample or a batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub task: f64,
    pub shd: f64,
    pub aux: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.task + self.shd + self.aux
    }
}

/// Teacher-side constants for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSignals {
    pub logits: Matrix,
    /// Per layer-map pair, one squeezed tempered map per student head.
    pub targets: Vec<Vec<Matrix>>,
    /// Per layer-map pair and group, the fold coefficients used.
    pub alphas: Vec<Vec<Vec<f64>>>,
    /// Per layer-map pair, the teacher block output.
    pub features: Vec<Matrix>,
}

/// Frozen teacher plus everything needed to turn a sample into supervision.
#[derive(Debug, Clone)]
pub struct Distiller {
    pub teacher: TinyTransformer,
    pub config: DistillConfig,
    pub layer_map: LayerMap,
    /// One merge plan per layer-map pair.
    pub plans: Vec<MergePlan>,
}

impl Distiller {
    /// Checks compatibility and builds merge plans. Head matching averages
    /// teacher head similarities over `calibration`.
    pub fn new(
        teacher: TinyTransformer,
        student: &TinyTransformerConfig,
        config: DistillConfig,
        calibration: &[Sample],
    ) -> Result<Self> {
        config.validate()?;
        student.validate()?;
        let tc = teacher.config;
        if student.vocab != tc.vocab || student.max_seq != tc.max_seq || student.causal != tc.causal {
            return Err(ShdError::invalid(
                "student and teacher must share vocab, max_seq and masking",
            ));
        }
        if student.heads > tc.heads {
            return Err(ShdError::invalid(format!(
                "student has {} heads but the teacher only {}",
                student.heads, tc.heads
            )));
        }
        let layer_map = LayerMap::uniform(tc.layers, student.layers)?;
        let plans = match config.strategy {
            MergeStrategy::HeadMatch => {
                if calibration.is_empty() {
                    return Err(ShdError::invalid("head matching needs calibration samples"));
                }
                let mut sums = vec![Matrix::zeros(tc.heads, tc.heads); tc.layers];
                for s in calibration {
                    let insp = teacher.inspect(&s.tokens)?;
                    for (sum, b) in sums.iter_mut().zip(&insp.bundles) {
                        sum.axpy(1.0 / calibration.len() as f64, &head_similarity(&b.maps)?)?;
                    }
                }
                layer_map
                    .zero_based()
                    .map(|(_, t)| MergePlan::from_similarity(&sums[t], student.heads))
                    .collect::<Result<Vec<_>>>()?
            }
            strategy => {
                let plan = MergePlan::new(tc.heads, student.heads, strategy)?;
                vec![plan; layer_map.pairs.len()]
            }
        };
        Ok(Distiller {
            teacher,
            config,
            layer_map,
            plans,
        })
    }

    pub fn signals(&self, sample: &Sample) -> Result<TeacherSignals> {
        let insp = self.teacher.inspect(&sample.tokens)?;
        let mut out = TeacherSignals {
            logits: insp.logits,
            targets: Vec::with_capacity(self.plans.len()),
            alphas: Vec::with_capacity(self.plans.len()),
            features: Vec::with_capacity(self.plans.len()),
        };
        for ((_, t), plan) in self.layer_map.zero_based().zip(&self.plans) {
            let merged = crate::distill::supervision_maps(&insp.bundles[t], &self.config, plan)?;
            out.targets.push(merged.maps);
            out.alphas.push(merged.alphas);
            out.features.push(insp.features[t].clone());
        }
        Ok(out)
    }

    /// Teacher bundles for a sample, at temperature 1.
    pub fn teacher_bundles(&self, sample: &Sample) -> Result<Vec<AttentionBundle>> {
        Ok(self.teacher.inspect(&sample.tokens)?.bundles)
    }
}

/// Mean next-token cross-entropy over masked-in positions and its logit gradient.
pub fn cross_entropy_grad(logits: &Matrix, targets: &[usize], mask: &[bool]) -> (f64, Matrix) {
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if count == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for i in (0..logits.rows()).filter(|&i| mask[i]) {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[i]];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = ((row[j] - lse).exp() - if j == targets[i] { 1.0 } else { 0.0 }) / count as f64;
        }
    }
    (total / count as f64, grad)
}

/// Distillation context for one sample.
#[derive(Clone, Copy)]
pub struct SampleDistill<'a> {
    pub config: &'a DistillConfig,
    pub layer_map: &'a LayerMap,
    pub signals: &'a TeacherSignals,
    /// Projector per layer-map pair when the projector baseline is active.
    pub projectors: &'a [Matrix],
}

/// Full objective for one sample. Gradients, when requested, follow the order
/// of [`TinyTransformer::tensors`] followed by the projectors.
pub fn sample_objective(
    model: &TinyTransformer,
    sample: &Sample,
    distill: Option<SampleDistill<'_>>,
    want_grad: bool,
) -> Result<(LossParts, Option<Vec<Matrix>>)> {
    let mut tape = Tape::new();
    let params = model.leaves(&mut tape);
    let projectors: Vec<Var> = distill
        .map(|d| d.projectors.iter().map(|p| tape.leaf(p.clone())).collect())
        .unwrap_or_default();
    let trace = model.forward(&mut tape, &params, &sample.tokens)?;
    let (task, g) = cross_entropy_grad(tape.value(trace.logits), &sample.targets, &sample.loss_mask);
    let task_node = tape.loss(trace.logits, task, g);
    let mut parts = LossParts {
        task,
        ..Default::default()
    };
    let mut terms = vec![(task_node, 1.0)];
    if let Some(d) = distill {
        let cfg = d.config;
        if cfg.beta != 0.0 {
            let mask = model.config.causal.then(|| Mask::causal(sample.len()));
            for (k, (s, _)) in d.layer_map.zero_based().enumerate() {
                for (j, target) in d.signals.targets[k].iter().enumerate() {
                    let tempered = tape.softmax(trace.layers[s].logits[j], mask.as_ref(), cfg.attn_temperature);
                    let (l, g) = attn_map_loss_grad(target, tape.value(tempered), cfg.attn_loss, mask.as_ref())?;
                    parts.shd += cfg.beta * l;
                    terms.push((tape.loss(tempered, l, g), cfg.beta));
                }
            }
        }
        if cfg.kd_weight != 0.0 {
            let (l, g) = logit_kd_loss_grad(
                &d.signals.logits,
                tape.value(trace.logits),
                cfg.logit_temperature,
                &sample.loss_mask,
            )?;
            parts.aux += cfg.kd_weight * l;
            terms.push((tape.loss(trace.logits, l, g), cfg.kd_weight));
        }
        if let (Some(baseline), true) = (cfg.baseline, cfg.aux_weight != 0.0) {
            for (k, (s, _)) in d.layer_map.zero_based().enumerate() {
                let feat = trace.layers[s].output;
                let target = &d.signals.features[k];
                let (node, l) = match baseline {
                    Baseline::SelfCorrelation => {
                        let (l, g) = self_correlation_loss_grad(target, tape.value(feat))?;
                        (tape.loss(feat, l, g), l)
                    }
                    Baseline::Projector => {
                        let proj = tape.matmul(feat, projectors[k]);
                        let (l, g) = mse_loss_grad(target, tape.value(proj))?;
                        (tape.loss(proj, l, g), l)
                    }
                };
                parts.aux += cfg.aux_weight * l;
                terms.push((node, cfg.aux_weight));
            }
        }
    }
    if !want_grad {
        return Ok((parts, None));
    }
    let total = tape.weighted_sum(terms);
    let grads = tape.backward(total);
    let all: Vec<Var> = params.into_iter().chain(projectors).collect();
    let out = all
        .into_iter()
        .map(|v| grads.get_or_zeros(v, tape.value(v).shape()))
        .collect();
    Ok((parts, Some(out)))
}

/// Mean task cross-entropy over `samples`.
pub fn evaluate(model: &TinyTransformer, samples: &[Sample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(ShdError::invalid("evaluation set is empty"));
    }
    let losses = exec.try_map(samples.len(), |i| {
        Ok::<_, ShdError>(sample_objective(model, &samples[i], None, false)?.0.task)
    })?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let ps = p.as_mut_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for (k, &gk) in g.as_slice().iter().enumerate() {
                ms[k] = ADAM_BETA1 * ms[k] + (1.0 - ADAM_BETA1) * gk;
                vs[k] = ADAM_BETA2 * vs[k] + (1.0 - ADAM_BETA2) * gk * gk;
                ps[k] -= lr * (ms[k] / c1) / ((vs[k] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn check_samples(cfg: &TinyTransformerConfig, samples: &[Sample]) -> Result<()> {
    for s in samples {
        if s.len() > cfg.max_seq || s.targets.len() != s.len() || s.loss_mask.len() != s.len() {
            return Err(ShdError::invalid(format!(
                "sample of length {} does not fit max_seq {}",
                s.len(),
                cfg.max_seq
            )));
        }
        if s.targets.iter().chain(&s.tokens).any(|&t| t >= cfg.vocab) {
            return Err(ShdError::invalid("sample token outside the model vocabulary"));
        }
    }
    Ok(())
}

/// Plain cross-entropy training from a seeded random initialisation.
pub fn train_teacher(
    config: TinyTransformerConfig,
    train: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
    exec: Exec,
) -> Result<(TinyTransformer, RunMetrics)> {
    let model = TinyTransformer::init(config, &mut SeededRng::stream(tc.seed, 0))?;
    run(model, Vec::new(), train, val, tc, None, exec)
}

/// Trains a randomly initialised student against a frozen teacher.
pub fn distill_student(
    distiller: &Distiller,
    student: TinyTransformerConfig,
    train: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
    exec: Exec,
) -> Result<(TinyTransformer, RunMetrics)> {
    let model = TinyTransformer::init(student, &mut SeededRng::stream(tc.seed, 0))?;
    distill_from(distiller, model, train, val, tc, exec)
}

/// As [`distill_student`] from a caller-supplied student.
pub fn distill_from(
    distiller: &Distiller,
    student: TinyTransformer,
    train: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
    exec: Exec,
) -> Result<(TinyTransformer, RunMetrics)> {
    let projectors = initial_projectors(distiller, &student.config, tc.seed);
    run(student, projectors, train, val, tc, Some(distiller), exec)
}

fn initial_projectors(distiller: &Distiller, student: &TinyTransformerConfig, seed: u64) -> Vec<Matrix> {
    if distiller.config.baseline != Some(Baseline::Projector) || distiller.config.aux_weight == 0.0 {
        return Vec::new();
    }
    let mut rng = SeededRng::stream(seed, 2);
    let std = (student.d_model as f64).powf(-0.5);
    distiller
        .layer_map
        .pairs
        .iter()
        .map(|_| rng.normal_matrix(student.d_model, distiller.teacher.config.d_model, std))
        .collect()
}

fn run(
    mut model: TinyTransformer,
    mut projectors: Vec<Matrix>,
    train: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
    distiller: Option<&Distiller>,
    exec: Exec,
) -> Result<(TinyTransformer, RunMetrics)> {
    tc.validate()?;
    if train.is_empty() {
        return Err(ShdError::invalid("training set is empty"));
    }
    check_samples(&model.config, train)?;
    check_samples(&model.config, val)?;
    let signals: Vec<TeacherSignals> = match distiller {
        Some(d) => exec.try_map(train.len(), |i| d.signals(&train[i]))?,
        None => Vec::new(),
    };
    let shapes: Vec<(usize, usize)> = model
        .tensors()
        .iter()
        .map(|(_, m)| m.shape())
        .chain(projectors.iter().map(Matrix::shape))
        .collect();
    let mut adam = Adam::new(&shapes);
    let mut batches = SeededRng::stream(tc.seed, 1);
    let mut metrics = RunMetrics::default();
    for step in 0..tc.steps {
        let batch: Vec<usize> = (0..tc.batch_size).map(|_| batches.below(train.len())).collect();
        let results = {
            let (model, projectors) = (&model, &projectors);
            exec.try_map(batch.len(), |b| {
                let i = batch[b];
                let ctx = distiller.map(|d| SampleDistill {
                    config: &d.config,
                    layer_map: &d.layer_map,
                    signals: &signals[i],
                    projectors,
                });
                sample_objective(model, &train[i], ctx, true)
            })
            .map_err(|e| match e {
                ShdError::NonFinite { .. } => ShdError::Divergence { step, loss: f64::NAN },
                e => e,
            })?
        };
        let inv_b = 1.0 / batch.len() as f64;
        let mut mean = LossParts::default();
        let mut grads: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        for (parts, g) in &results {
            mean.task += parts.task * inv_b;
            mean.shd += parts.shd * inv_b;
            mean.aux += parts.aux * inv_b;
            for (acc, gi) in grads.iter_mut().zip(g.as_ref().expect("gradients requested")) {
                acc.axpy(inv_b, gi)?;
            }
        }
        let total = mean.total();
        let norm = grads.iter().map(Matrix::frobenius_norm_sq).sum::<f64>().sqrt();
        if !total.is_finite() || !norm.is_finite() {
            return Err(ShdError::Divergence { step, loss: total });
        }
        if tc.grad_clip > 0.0 && norm > tc.grad_clip {
            let k = tc.grad_clip / norm;
            grads.iter_mut().for_each(|g| *g = g.scale(k));
        }
        let params: Vec<&mut Matrix> = model.tensors_mut().into_iter().chain(projectors.iter_mut()).collect();
        adam.step(params, &grads, tc.lr);
        if let Some(d) = distiller.filter(|_| tc.alpha_every > 0 && step % tc.alpha_every == 0) {
            let pairs: Vec<usize> = d.layer_map.zero_based().map(|(s, _)| s).collect();
            for (b, &i) in batch.iter().enumerate() {
                for (k, groups) in signals[i].alphas.iter().enumerate() {
                    for (group, alphas) in groups.iter().enumerate() {
                        metrics.alphas.extend(alphas.iter().map(|&alpha| AlphaRecord {
                            step,
                            layer: pairs[k],
                            group,
                            sample: b,
                            alpha,
                        }));
                    }
                }
            }
        }
        let last = step + 1 == tc.steps;
        let scheduled = tc.val_every > 0 && (step + 1) % tc.val_every == 0;
        let val_loss = if (scheduled || last) && !val.is_empty() {
            Some(evaluate(&model, val, exec)?)
        } else {
            None
        };
        metrics.steps.push(StepRecord {
            step,
            task: mean.task,
            shd: mean.shd,
            aux: mean.aux,
            total,
            val: val_loss,
        });
    }
    metrics.final_val = match metrics.steps.last().and_then(|r| r.val) {
        Some(v) => v,
        None if val.is_empty() => f64::NAN,
        None => evaluate(&model, val, exec)?,
    };
    Ok((model, metrics))
}
