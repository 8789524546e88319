//! Student comparison on a synthetic task: plain training, logit KD, and
//! logit KD plus squeezed-attention supervision, all from one frozen teacher.

use std::fmt::Write as _;

use crate::distill::DistillConfig;
use crate::error::Result;
use crate::par::Exec;

use super::data::{make_dataset, TaskKind};
use super::model::TinyTransformerConfig;
use super::train::{distill_student, train_teacher, Distiller, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    NoKd,
    Kd,
    KdShd,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoKd, Variant::Kd, Variant::KdShd];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoKd => "no-KD",
            Variant::Kd => "KD",
            Variant::KdShd => "KD+SHD",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonSpec {
    pub teacher: TinyTransformerConfig,
    pub student: TinyTransformerConfig,
    pub task: TaskKind,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub data_seed: u64,
    pub teacher_train: TrainConfig,
    /// Its `seed` is replaced by each entry of `seeds`.
    pub student_train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Used for the KD row with `beta` forced to 0, and as is for the KD+SHD row.
    pub distill: DistillConfig,
}

impl ComparisonSpec {
    /// Copy task, teacher h=8 × 4 layers, student h=2 × 2 layers, N = 16, vocab 32.
    pub fn copy_task(steps: usize, seeds: Vec<u64>) -> Self {
        let teacher = TinyTransformerConfig {
            vocab: 32,
            d_model: 64,
            heads: 8,
            layers: 4,
            max_seq: 16,
            causal: true,
        };
        let student = TinyTransformerConfig {
            d_model: 32,
            heads: 2,
            layers: 2,
            ..teacher
        };
        let train = TrainConfig {
            steps,
            lr: 3e-3,
            batch_size: 8,
            seed: 0,
            val_every: 500,
            grad_clip: 1.0,
            alpha_every: 0,
        };
        ComparisonSpec {
            teacher,
            student,
            task: TaskKind::Copy,
            seq_len: 16,
            train_size: 2000,
            val_size: 200,
            data_seed: 1,
            teacher_train: train.clone(),
            student_train: train,
            seeds,
            distill: DistillConfig {
                kd_weight: 1.0,
                ..DistillConfig::image_generation()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub seed: u64,
    /// First scheduled validation loss.
    pub early_val: Option<f64>,
    pub final_val: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub teacher_val: f64,
    pub early_step: Option<usize>,
    pub rows: Vec<ComparisonRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl ComparisonReport {
    pub fn mean_final(&self, variant: Variant) -> f64 {
        mean(self.rows.iter().filter(|r| r.variant == variant).map(|r| r.final_val))
    }

    pub fn mean_early(&self, variant: Variant) -> Option<f64> {
        let v: Option<Vec<f64>> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.early_val)
            .collect();
        v.map(|v| mean(v.into_iter()))
    }

    /// Plain-text table of validation cross-entropy per variant.
    pub fn table(&self) -> String {
        let early = self
            .early_step
            .map(|s| format!("val@{}", s + 1))
            .unwrap_or_else(|| "val@early".into());
        let mut out = format!("teacher val CE {:.6}\n", self.teacher_val);
        let _ = writeln!(out, "{:<8} {:>12} {:>12}  per-seed final", "variant", early, "final");
        for v in Variant::ALL {
            let finals: Vec<String> = self
                .rows
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| format!("{:.6}", r.final_val))
                .collect();
            let e = self
                .mean_early(v)
                .map(|x| format!("{x:.6}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<8} {:>12} {:>12.6}  {}",
                v.label(),
                e,
                self.mean_final(v),
                finals.join(" ")
            );
        }
        out
    }
}

pub fn run_comparison(spec: &ComparisonSpec, exec: Exec) -> Result<ComparisonReport> {
    let train = make_dataset(
        spec.task,
        spec.data_seed,
        spec.train_size,
        spec.seq_len,
        spec.teacher.vocab,
    )?;
    let val = make_dataset(
        spec.task,
        spec.data_seed.wrapping_add(1),
        spec.val_size,
        spec.seq_len,
        spec.teacher.vocab,
    )?;
    let (teacher, tm) = train_teacher(spec.teacher, &train, &val, &spec.teacher_train, exec)?;
    let kd = Distiller::new(
        teacher.clone(),
        &spec.student,
        DistillConfig {
            beta: 0.0,
            ..spec.distill.clone()
        },
        &train,
    )?;
    let shd = Distiller::new(teacher, &spec.student, spec.distill.clone(), &train)?;
    let mut rows = Vec::with_capacity(3 * spec.seeds.len());
    let mut early_step = None;
    for &seed in &spec.seeds {
        let tc = TrainConfig {
            seed,
            ..spec.student_train.clone()
        };
        for variant in Variant::ALL {
            let (_, m) = match variant {
                Variant::NoKd => train_teacher(spec.student, &train, &val, &tc, exec)?,
                Variant::Kd => distill_student(&kd, spec.student, &train, &val, &tc, exec)?,
                Variant::KdShd => distill_student(&shd, spec.student, &train, &val, &tc, exec)?,
            };
            let first = m.steps.iter().find(|r| r.val.is_some());
            early_step = first.map(|r| r.step);
            rows.push(ComparisonRow {
                variant,
                seed,
                early_val: first.and_then(|r| r.val),
                final_val: m.final_val,
            });
        }
    }
    Ok(ComparisonReport {
        teacher_val: tm.final_val,
        early_step,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_comparison_runs_and_tabulates() {
        let mut spec = ComparisonSpec::copy_task(6, vec![0, 1]);
        spec.teacher = TinyTransformerConfig {
            d_model: 16,
            heads: 4,
            layers: 2,
            max_seq: 8,
            ..spec.teacher
        };
        spec.student = TinyTransformerConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            ..spec.teacher
        };
        spec.seq_len = 8;
        spec.train_size = 20;
        spec.val_size = 5;
        spec.student_train.val_every = 3;
        let report = run_comparison(&spec, Exec::default()).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.rows.iter().all(|r| r.final_val.is_finite()));
        let table = report.table();
        for v in Variant::ALL {
            assert!(table.contains(v.label()));
        }
        assert!(table.contains("val@3"));
    }
}
