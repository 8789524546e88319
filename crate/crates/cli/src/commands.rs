//! Subcommand implementations. Each returns `Ok` on success; errors carry the
//! exit code.

use std::path::Path;

use serde::Serialize;
use shd_core::attention::random_bundle;
use shd_core::distill::AttnLossKind;
use shd_core::harness::train::alpha_bin;
use shd_core::harness::{distill_student, train_teacher, Distiller, TinyTransformerConfig, TrainConfig};
use shd_core::oracle::{
    constrained_solve, exact_unconstrained, grid_search_alpha, literal_bias_alpha, pair_objective, residual_energy,
    CompressionInstance, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use shd_core::squeeze::{head_similarity, merge_group, squeeze_heads, MergePlan, MergeStrategy};
use shd_core::{Exec, Matrix, SeededRng};

use crate::config::{read_json, DistillRunConfig, StrategyFlag, TeacherRunConfig};
use crate::dump::{Dump, LayerDump};
use crate::error::CliError;
use crate::metrics::{alphas_csv, distill_csv, teacher_csv};
use crate::params;

pub const PARAMS_FILE: &str = "params.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ALPHAS_FILE: &str = "alphas.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SQUEEZE_ALPHAS_FILE: &str = "alphas.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io("cannot write", path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io("cannot create", dir, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable") + "\n"
}

pub fn train_teacher_cmd(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg: TeacherRunConfig = read_json(config)?;
    let model_cfg: TinyTransformerConfig = cfg.model.into();
    model_cfg.validate()?;
    let (train, val) = cfg.task.datasets(model_cfg.vocab)?;
    let tc: TrainConfig = (&cfg.train).into();
    let (model, metrics) = train_teacher(model_cfg, &train, &val, &tc, Exec::default())?;
    create_dir(out)?;
    params::save(&out.join(PARAMS_FILE), &model)?;
    write(&out.join(METRICS_FILE), teacher_csv(&metrics))?;
    write(&out.join(CONFIG_FILE), to_json(&cfg))?;
    println!("final validation loss {}", metrics.final_val);
    Ok(())
}

pub fn distill_cmd(
    teacher_dir: &Path,
    config: &Path,
    strategy: StrategyFlag,
    attn_loss: AttnLossKind,
    out: &Path,
) -> Result<(), CliError> {
    let cfg: DistillRunConfig = read_json(config)?;
    let teacher_cfg: TeacherRunConfig = read_json(&teacher_dir.join(CONFIG_FILE))?;
    let teacher = params::load(&teacher_dir.join(PARAMS_FILE))?;
    let student: TinyTransformerConfig = cfg.student.into();
    student.validate()?;
    let dcfg = cfg.distill.resolve(strategy, attn_loss);
    for w in dcfg.validate()? {
        eprintln!("warning: {w}");
    }
    let task = cfg.task.clone().unwrap_or(teacher_cfg.task);
    let (train, val) = task.datasets(student.vocab)?;
    let calibration = &train[..cfg.calibration_size.min(train.len())];
    let distiller = Distiller::new(teacher, &student, dcfg, calibration)?;
    let tc: TrainConfig = (&cfg.train).into();
    let (model, metrics) = distill_student(&distiller, student, &train, &val, &tc, Exec::default())?;
    create_dir(out)?;
    params::save(&out.join(PARAMS_FILE), &model)?;
    write(&out.join(METRICS_FILE), distill_csv(&metrics))?;
    write(&out.join(ALPHAS_FILE), alphas_csv(&metrics))?;
    println!("final validation loss {}", metrics.final_val);
    Ok(())
}

/// Writes the attention of a trained model on one task sequence as a dump.
pub fn dump_cmd(model_dir: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg: TeacherRunConfig = read_json(&model_dir.join(CONFIG_FILE))?;
    let model = params::load(&model_dir.join(PARAMS_FILE))?;
    let sample =
        shd_core::harness::make_dataset(cfg.task.kind()?, seed, 1, cfg.task.seq_len, model.config.vocab)?.remove(0);
    let insp = model.inspect(&sample.tokens)?;
    let layers = insp
        .bundles
        .into_iter()
        .map(|b| LayerDump {
            maps: b.maps,
            values: b.head_values,
        })
        .collect();
    Dump::new(layers, model.config.causal)?.write(out)
}

#[derive(Debug, Serialize)]
struct SqueezeAlphas {
    target_heads: usize,
    groups: Vec<Vec<usize>>,
    /// Per layer, per group, the fold coefficients.
    layers: Vec<Vec<Vec<f64>>>,
}

pub fn squeeze_cmd(dump_dir: &Path, target_heads: usize, out: &Path) -> Result<(), CliError> {
    let dump = Dump::read(dump_dir)?;
    let heads = dump.manifest.heads;
    if target_heads == 0 || target_heads > heads {
        return Err(CliError::Usage(format!(
            "--target-heads must lie in 1..={heads}, got {target_heads}"
        )));
    }
    let plan = MergePlan::new(heads, target_heads, MergeStrategy::Shd)?;
    let mut layers = Vec::with_capacity(dump.layers.len());
    let mut alphas = Vec::with_capacity(dump.layers.len());
    for layer in &dump.layers {
        let merged = squeeze_heads(&layer.maps, &layer.values, &plan)?;
        let values = plan
            .groups
            .iter()
            .map(|g| {
                g[1..]
                    .iter()
                    .try_fold(layer.values[g[0]].clone(), |acc, &h| acc.add(&layer.values[h]))
            })
            .collect::<shd_core::Result<Vec<Matrix>>>()?;
        layers.push(LayerDump {
            maps: merged.maps,
            values,
        });
        alphas.push(merged.alphas);
    }
    Dump::new(layers, dump.manifest.causal)?.write(out)?;
    let report = SqueezeAlphas {
        target_heads,
        groups: plan.groups.clone(),
        layers: alphas,
    };
    write(&out.join(SQUEEZE_ALPHAS_FILE), to_json(&report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OracleMode {
    Grid,
    Exact,
    Constrained,
    All,
}

/// Relative slack of every sandwich inequality on dump data.
pub const SANDWICH_TOL: f64 = 1e-6;

pub fn oracle_cmd(dump_dir: &Path, layer: usize, group: &[usize], mode: OracleMode, step: f64) -> Result<(), CliError> {
    let dump = Dump::read(dump_dir)?;
    let data = dump
        .layers
        .get(layer)
        .ok_or_else(|| CliError::Usage(format!("layer {layer} out of range (dump has {})", dump.layers.len())))?;
    let mut seen = vec![false; dump.manifest.heads];
    for &h in group {
        if h >= seen.len() || std::mem::replace(&mut seen[h], true) {
            return Err(CliError::Usage(format!("bad head index {h} in --group")));
        }
    }
    if group.is_empty() {
        return Err(CliError::Usage("--group needs at least one head".into()));
    }
    let maps: Vec<Matrix> = group.iter().map(|&h| data.maps[h].clone()).collect();
    let vals: Vec<Matrix> = group.iter().map(|&h| data.values[h].clone()).collect();
    let inst = CompressionInstance::new(maps.clone(), vals.clone())?;
    let scale = inst.target.frobenius_norm_sq();
    let slack = SANDWICH_TOL * (1.0 + scale);
    let map_refs: Vec<&Matrix> = maps.iter().collect();
    let val_refs: Vec<&Matrix> = vals.iter().collect();
    let closed = merge_group(&map_refs, &val_refs)?;
    let e_closed = residual_energy(&inst, &closed.map)?;

    let mut rows: Vec<(String, String)> = vec![("alpha_closed".into(), format!("{:?}", closed.alphas))];
    rows.push(("E(alpha_closed)".into(), format!("{e_closed:.12e}")));
    let mut checks: Vec<(String, bool)> = Vec::new();
    let pair = maps.len() == 2;
    let (want_grid, want_exact, want_con) = match mode {
        OracleMode::Grid => (true, false, false),
        OracleMode::Exact => (false, true, false),
        OracleMode::Constrained => (false, false, true),
        OracleMode::All => (true, true, true),
    };
    if pair {
        let (a1, a2, x1, x2) = (&maps[0], &maps[1], &vals[0], &vals[1]);
        let e = |a| pair_objective(a1, a2, x1, x2, a);
        let (e0, eh, e1) = (e(0.0)?, e(0.5)?, e(1.0)?);
        rows.push((
            "E(0) / E(0.5) / E(1)".into(),
            format!("{e0:.12e} / {eh:.12e} / {e1:.12e}"),
        ));
        checks.push((
            "E(alpha_closed) <= min(E(0), E(0.5), E(1))".into(),
            e_closed <= e0.min(eh).min(e1) + slack,
        ));
        if want_grid {
            let grid = grid_search_alpha(a1, a2, x1, x2, step)?;
            let literal = literal_bias_alpha(a1, a2, x1, x2)?;
            rows.push(("alpha_grid".into(), format!("{}", grid.alpha)));
            rows.push(("E(alpha_grid)".into(), format!("{:.12e}", grid.energy)));
            rows.push(("alpha_literal_form".into(), format!("{}", literal.alpha)));
            rows.push(("E(alpha_literal_form)".into(), format!("{:.12e}", literal.energy)));
            checks.push((
                "E(alpha_closed) <= E(alpha_grid)".into(),
                e_closed <= grid.energy + slack,
            ));
            checks.push((
                "E(alpha_closed) <= E(alpha_literal_form)".into(),
                e_closed <= literal.energy + slack,
            ));
        }
    } else {
        rows.push(("alpha_grid".into(), "n/a (pairs only)".into()));
        rows.push(("alpha_literal_form".into(), "n/a (pairs only)".into()));
    }
    let unconstrained = if want_exact {
        let (_, r) = exact_unconstrained(&inst)?;
        rows.push(("residual_unconstrained".into(), format!("{r:.12e}")));
        checks.push((
            "residual_unconstrained <= E(alpha_closed)".into(),
            r <= e_closed + slack,
        ));
        Some(r)
    } else {
        None
    };
    if want_con {
        let sol = constrained_solve(&inst, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
        rows.push(("residual_constrained".into(), format!("{:.12e}", sol.residual)));
        checks.push((
            "residual_constrained <= E(alpha_closed)".into(),
            sol.residual <= e_closed + slack,
        ));
        if let Some(r) = unconstrained {
            checks.push((
                "residual_unconstrained <= residual_constrained".into(),
                r <= sol.residual + slack,
            ));
        }
    }
    println!("layer {layer}, heads {group:?}, |target|^2 = {scale:.6e}");
    for (k, v) in &rows {
        println!("  {k:<28} {v}");
    }
    let mut ok = true;
    for (name, pass) in &checks {
        println!("  [{}] {name}", if *pass { "ok" } else { "VIOLATED" });
        ok &= pass;
    }
    if ok {
        println!("PASS sandwich chain");
        Ok(())
    } else {
        println!("FAIL sandwich chain");
        Err(CliError::Numeric("sandwich chain violated".into()))
    }
}

/// Settings for `analyze --make-random`.
#[derive(Debug, Clone, Copy)]
pub struct RandomDumpSpec {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub causal: bool,
}

/// Logit scale of the random inputs; large enough that maps are far from uniform.
const RANDOM_INPUT_SCALE: f64 = 2.0;

pub fn make_random_dump(spec: RandomDumpSpec, out: &Path) -> Result<(), CliError> {
    let mut rng = SeededRng::new(spec.seed);
    let layers = (0..spec.layers)
        .map(|_| {
            let b = random_bundle(
                spec.seq_len,
                spec.d_model,
                spec.heads,
                spec.causal,
                RANDOM_INPUT_SCALE,
                &mut rng,
            )?;
            Ok(LayerDump {
                maps: b.maps,
                values: b.head_values,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Dump::new(layers, spec.causal)?.write(out)
}

#[derive(Debug, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub similarity: Vec<Vec<f64>>,
    /// `None` for single-head layers.
    pub mean_off_diagonal: Option<f64>,
    /// Pairs `(2k, 2k+1)` merged for the histogram.
    pub pairs: Vec<[usize; 2]>,
    pub alphas: Vec<f64>,
    pub alpha_histogram: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub heads: usize,
    pub seq_len: usize,
    pub samples: usize,
    pub histogram_bins: usize,
    pub layers: Vec<LayerReport>,
}

pub fn analyze(dump: &Dump) -> Result<AnalysisReport, CliError> {
    let heads = dump.manifest.heads;
    let pairs: Vec<[usize; 2]> = (0..heads / 2).map(|k| [2 * k, 2 * k + 1]).collect();
    let mut layers = Vec::with_capacity(dump.layers.len());
    for (l, layer) in dump.layers.iter().enumerate() {
        let sim = head_similarity(&layer.maps)?;
        let off: Vec<f64> = (0..heads)
            .flat_map(|i| (0..heads).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| sim[(i, j)])
            .collect();
        let alphas = pairs
            .iter()
            .map(|&[a, b]| {
                Ok(merge_group(&[&layer.maps[a], &layer.maps[b]], &[&layer.values[a], &layer.values[b]])?.alphas[0])
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        let mut hist = vec![0; shd_core::harness::train::ALPHA_HISTOGRAM_BINS];
        for &a in &alphas {
            hist[alpha_bin(a)] += 1;
        }
        layers.push(LayerReport {
            layer: l,
            similarity: (0..heads).map(|i| sim.row(i).to_vec()).collect(),
            mean_off_diagonal: (!off.is_empty()).then(|| off.iter().sum::<f64>() / off.len() as f64),
            pairs: pairs.clone(),
            alphas,
            alpha_histogram: hist,
        });
    }
    Ok(AnalysisReport {
        heads,
        seq_len: dump.manifest.seq_len,
        samples: 1,
        histogram_bins: shd_core::harness::train::ALPHA_HISTOGRAM_BINS,
        layers,
    })
}

pub fn analyze_cmd(dump_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let report = analyze(&Dump::read(dump_dir)?)?;
    let json = to_json(&report);
    match out {
        Some(p) => write(p, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}
