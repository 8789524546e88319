//! Compressing `h_t` teacher attention maps into `h_s` supervision maps.
//!
//! Two heads with maps `A1, A2` and value terms `X1, X2` are replaced by
//! `Ã = α A1 + (1 − α) A2`, with `α` chosen to minimise
//! `‖Ã (X1 + X2) − (A1 X1 + A2 X2)‖_F²`. Expanding, the residual is `α M + B` with
//! `M = (A1 − A2)(X1 + X2)` and `B = (A2 − A1) X1`, so the minimiser is
//! `α = −⟨M, B⟩ / ‖M‖²`, clamped to `[0, 1]` so `Ã` stays row-stochastic.
//! Larger groups fold left to right, accumulating `X`.

use crate::error::{Result, ShdError};
use crate::numkernel::{frobenius_inner, mm, Matrix, SeededRng};

/// Below this `‖M‖²` the pair energy is flat in `α` and `α = 0.5` is used.
pub const FLAT_ENERGY_EPS: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAlpha {
    pub alpha: f64,
    /// Residual energy `‖α M + B‖²` at the returned `alpha`.
    pub energy: f64,
}

/// Contiguous partition of `0..h_t` into `h_s` groups, larger groups first.
pub fn partition_heads(h_t: usize, h_s: usize) -> Result<Vec<Vec<usize>>> {
    let sizes = group_sizes(h_t, h_s)?;
    let mut next = 0;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let g = (next..next + s).collect();
            next += s;
            g
        })
        .collect())
}

fn group_sizes(h_t: usize, h_s: usize) -> Result<Vec<usize>> {
    if h_s == 0 {
        return Err(ShdError::invalid("student must have at least one head"));
    }
    if h_s > h_t {
        return Err(ShdError::invalid(format!(
            "student has more heads ({h_s}) than teacher ({h_t})"
        )));
    }
    let (base, extra) = (h_t / h_s, h_t % h_s);
    Ok((0..h_s).map(|g| base + usize::from(g < extra)).collect())
}

/// The α-dependent and α-independent parts of the pair residual.
pub fn pair_residual_terms(a1: &Matrix, a2: &Matrix, x1: &Matrix, x2: &Matrix) -> Result<(Matrix, Matrix)> {
    check_pair_shapes(a1, a2, x1, x2)?;
    let diff = a1.sub(a2)?;
    let m = mm(&diff, &x1.add(x2)?);
    let bias = mm(&a2.sub(a1)?, x1);
    Ok((m, bias))
}

pub(crate) fn check_pair_shapes(a1: &Matrix, a2: &Matrix, x1: &Matrix, x2: &Matrix) -> Result<()> {
    let n = a1.rows();
    let bad = a1.shape() != (n, n) || a2.shape() != (n, n) || x1.rows() != n || x2.shape() != x1.shape();
    if bad {
        return Err(ShdError::Shape {
            op: "pairwise_alpha",
            left: a1.shape(),
            right: x1.shape(),
        });
    }
    Ok(())
}

/// `‖α M + B‖²`.
pub fn energy_at(m: &Matrix, bias: &Matrix, alpha: f64) -> f64 {
    m.as_slice()
        .iter()
        .zip(bias.as_slice())
        .map(|(mv, bv)| (alpha * mv + bv).powi(2))
        .sum()
}

/// Closed-form merge coefficient for two heads.
pub fn pairwise_alpha(a1: &Matrix, a2: &Matrix, x1: &Matrix, x2: &Matrix) -> Result<PairAlpha> {
    let (m, bias) = pair_residual_terms(a1, a2, x1, x2)?;
    Ok(alpha_from_terms(&m, &bias))
}

pub(crate) fn alpha_from_terms(m: &Matrix, bias: &Matrix) -> PairAlpha {
    let m_sq = m.frobenius_norm_sq();
    let alpha = if m_sq < FLAT_ENERGY_EPS {
        0.5
    } else {
        let inner = frobenius_inner(m, bias).expect("terms share a shape");
        (-inner / m_sq).clamp(0.0, 1.0)
    };
    PairAlpha {
        alpha,
        energy: energy_at(m, bias, alpha),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMerge {
    pub map: Matrix,
    /// One coefficient per fold step; empty for a singleton group.
    pub alphas: Vec<f64>,
    /// Sum of the group's value terms.
    pub x_acc: Matrix,
}

#[derive(Debug, Clone, Copy)]
enum Coefficient {
    ClosedForm,
    Fixed(f64),
}

fn fold_group(maps: &[&Matrix], values: &[&Matrix], coef: Coefficient) -> Result<GroupMerge> {
    if maps.is_empty() {
        return Err(ShdError::invalid("cannot merge an empty head group"));
    }
    if maps.len() != values.len() {
        return Err(ShdError::invalid(format!(
            "{} maps but {} head values",
            maps.len(),
            values.len()
        )));
    }
    let mut map = maps[0].clone();
    let mut x_acc = values[0].clone();
    let mut alphas = Vec::with_capacity(maps.len() - 1);
    for (a_next, x_next) in maps[1..].iter().zip(&values[1..]) {
        let alpha = match coef {
            Coefficient::ClosedForm => pairwise_alpha(&map, a_next, &x_acc, x_next)?.alpha,
            Coefficient::Fixed(a) => {
                check_pair_shapes(&map, a_next, &x_acc, x_next)?;
                a
            }
        };
        map = map.zip_with(a_next, "merge", |p, q| alpha * p + (1.0 - alpha) * q)?;
        x_acc = x_acc.add(x_next)?;
        alphas.push(alpha);
    }
    Ok(GroupMerge { map, alphas, x_acc })
}

/// Left fold of closed-form pairwise merges over a group of heads.
pub fn merge_group(maps: &[&Matrix], head_values: &[&Matrix]) -> Result<GroupMerge> {
    fold_group(maps, head_values, Coefficient::ClosedForm)
}

/// Same fold with every coefficient fixed to `alpha`.
pub fn merge_group_fixed(maps: &[&Matrix], head_values: &[&Matrix], alpha: f64) -> Result<GroupMerge> {
    fold_group(maps, head_values, Coefficient::Fixed(alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeStrategy {
    /// Closed-form α per sample.
    Shd,
    /// α fixed at 0.5.
    ConstantHalf,
    /// One teacher head per group, drawn once from the seed.
    HardSelect { seed: u64 },
    /// Groups from similarity matching, then closed-form merging.
    HeadMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub groups: Vec<Vec<usize>>,
    pub strategy: MergeStrategy,
    /// Chosen head per group under [`MergeStrategy::HardSelect`].
    pub selected: Option<Vec<usize>>,
}

impl MergePlan {
    /// Contiguous-partition plan. Head matching needs similarities; use
    /// [`MergePlan::from_similarity`] for it.
    pub fn new(h_t: usize, h_s: usize, strategy: MergeStrategy) -> Result<Self> {
        let groups = partition_heads(h_t, h_s)?;
        let selected = match strategy {
            MergeStrategy::HardSelect { seed } => {
                let mut rng = SeededRng::new(seed);
                Some(groups.iter().map(|g| g[rng.below(g.len())]).collect())
            }
            MergeStrategy::HeadMatch => {
                return Err(ShdError::invalid(
                    "head matching needs a similarity matrix; use MergePlan::from_similarity",
                ))
            }
            _ => None,
        };
        Ok(MergePlan {
            groups,
            strategy,
            selected,
        })
    }

    pub fn from_similarity(sim: &Matrix, h_s: usize) -> Result<Self> {
        Ok(MergePlan {
            groups: match_heads(sim, h_s)?,
            strategy: MergeStrategy::HeadMatch,
            selected: None,
        })
    }

    pub fn teacher_heads(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn student_heads(&self) -> usize {
        self.groups.len()
    }

    fn validate(&self, h_t: usize) -> Result<()> {
        let mut seen = vec![false; h_t];
        for &h in self.groups.iter().flatten() {
            if h >= h_t || std::mem::replace(&mut seen[h], true) {
                return Err(ShdError::invalid(format!(
                    "merge plan does not partition {h_t} teacher heads"
                )));
            }
        }
        if seen.iter().any(|s| !s) || self.groups.iter().any(Vec::is_empty) {
            return Err(ShdError::invalid(format!(
                "merge plan does not partition {h_t} teacher heads"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    pub maps: Vec<Matrix>,
    pub alphas: Vec<Vec<f64>>,
    /// Per group `‖Ã ΣX − Σ A X‖²` at the chosen map.
    pub residuals: Vec<f64>,
}

/// Squeezes one sample's (already tempered) teacher maps according to `plan`.
pub fn squeeze_heads(maps: &[Matrix], head_values: &[Matrix], plan: &MergePlan) -> Result<MergeResult> {
    if maps.len() != head_values.len() {
        return Err(ShdError::invalid(format!(
            "{} maps but {} head values",
            maps.len(),
            head_values.len()
        )));
    }
    plan.validate(maps.len())?;
    let mut out = MergeResult {
        maps: Vec::with_capacity(plan.groups.len()),
        alphas: Vec::with_capacity(plan.groups.len()),
        residuals: Vec::with_capacity(plan.groups.len()),
    };
    for (g, group) in plan.groups.iter().enumerate() {
        let gm: Vec<&Matrix> = group.iter().map(|&h| &maps[h]).collect();
        let gv: Vec<&Matrix> = group.iter().map(|&h| &head_values[h]).collect();
        let merged = match plan.strategy {
            MergeStrategy::Shd | MergeStrategy::HeadMatch => merge_group(&gm, &gv)?,
            MergeStrategy::ConstantHalf => merge_group_fixed(&gm, &gv, 0.5)?,
            MergeStrategy::HardSelect { .. } => {
                let pick = plan
                    .selected
                    .as_ref()
                    .ok_or_else(|| ShdError::invalid("hard-select plan without a selection"))?[g];
                let x_acc = gv[1..].iter().try_fold(gv[0].clone(), |acc, x| acc.add(x))?;
                GroupMerge {
                    map: maps[pick].clone(),
                    alphas: Vec::new(),
                    x_acc,
                }
            }
        };
        out.residuals.push(group_residual(&merged.map, &gm, &gv, &merged.x_acc));
        out.maps.push(merged.map);
        out.alphas.push(merged.alphas);
    }
    Ok(out)
}

fn group_residual(merged: &Matrix, maps: &[&Matrix], values: &[&Matrix], x_acc: &Matrix) -> f64 {
    if maps.len() == 1 && std::ptr::eq(maps[0], merged) {
        return 0.0;
    }
    let mut r = mm(merged, x_acc);
    for (a, x) in maps.iter().zip(values) {
        r.axpy(-1.0, &mm(a, x)).expect("value terms share a shape");
    }
    r.frobenius_norm_sq()
}

/// Cosine similarity between every pair of flattened maps.
pub fn head_similarity(maps: &[Matrix]) -> Result<Matrix> {
    if maps.len() < 2 {
        return Err(ShdError::invalid("head similarity needs at least two maps"));
    }
    let norms = maps
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.shape() != maps[0].shape() {
                return Err(ShdError::Shape {
                    op: "head_similarity",
                    left: maps[0].shape(),
                    right: m.shape(),
                });
            }
            let n = m.frobenius_norm();
            if n == 0.0 {
                Err(ShdError::invalid(format!("map {i} has zero norm")))
            } else {
                Ok(n)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let h = maps.len();
    let mut sim = Matrix::identity(h);
    for i in 0..h {
        for j in i + 1..h {
            let c = frobenius_inner(&maps[i], &maps[j])? / (norms[i] * norms[j]);
            sim[(i, j)] = c;
            sim[(j, i)] = c;
        }
    }
    Ok(sim)
}

/// Greedy similarity grouping with the [`partition_heads`] size profile.
///
/// Each group is seeded with the most similar unassigned pair and grown by the
/// unassigned head with the highest mean similarity to its members. Ties go to
/// the lowest index. Indices within a group are sorted.
pub fn match_heads(sim: &Matrix, h_s: usize) -> Result<Vec<Vec<usize>>> {
    let h_t = sim.rows();
    if sim.cols() != h_t {
        return Err(ShdError::invalid("similarity matrix must be square"));
    }
    let sizes = group_sizes(h_t, h_s)?;
    let mut free = vec![true; h_t];
    let mut groups = Vec::with_capacity(h_s);
    for size in sizes {
        let mut group = Vec::with_capacity(size);
        if size == 1 {
            let i = free.iter().position(|&f| f).expect("heads remain");
            group.push(i);
        } else {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in (0..h_t).filter(|&i| free[i]) {
                for j in (i + 1..h_t).filter(|&j| free[j]) {
                    if best.is_none_or(|(s, _, _)| sim[(i, j)] > s) {
                        best = Some((sim[(i, j)], i, j));
                    }
                }
            }
            let (_, i, j) = best.expect("at least two free heads");
            group.extend([i, j]);
        }
        for &g in &group {
            free[g] = false;
        }
        while group.len() < size {
            let mut best: Option<(f64, usize)> = None;
            for k in (0..h_t).filter(|&k| free[k]) {
                let mean = group.iter().map(|&g| sim[(g, k)]).sum::<f64>() / group.len() as f64;
                if best.is_none_or(|(s, _)| mean > s) {
                    best = Some((mean, k));
                }
            }
            let (_, k) = best.expect("free head available");
            free[k] = false;
            group.push(k);
        }
        group.sort_unstable();
        groups.push(group);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::random_bundle;

    fn row_stochastic(m: &Matrix, tol: f64) -> bool {
        (0..m.rows()).all(|i| m.row(i).iter().all(|&v| v >= 0.0) && (m.row(i).iter().sum::<f64>() - 1.0).abs() <= tol)
    }

    fn random_pair(seed: u64) -> (Matrix, Matrix, Matrix, Matrix) {
        let b = random_bundle(6, 8, 4, false, 2.0, &mut SeededRng::new(seed)).unwrap();
        (
            b.maps[0].clone(),
            b.maps[1].clone(),
            b.head_values[0].clone(),
            b.head_values[1].clone(),
        )
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_heads(6, 3).unwrap(), vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert_eq!(partition_heads(4, 4).unwrap(), vec![vec![0], vec![1], vec![2], vec![3]]);
        let p = partition_heads(25, 12).unwrap();
        assert_eq!(p[0], vec![0, 1, 2]);
        assert!(p[1..].iter().all(|g| g.len() == 2));
        assert_eq!(p[11], vec![23, 24]);
        assert!(partition_heads(3, 4).is_err());
        assert!(partition_heads(3, 0).is_err());
    }

    #[test]
    fn alpha_tie_break_for_identical_maps() {
        let (a1, _, x1, x2) = random_pair(1);
        let r = pairwise_alpha(&a1, &a1, &x1, &x2).unwrap();
        assert_eq!(r.alpha, 0.5);
        assert_eq!(r.energy, 0.0);
    }

    #[test]
    fn alpha_half_when_values_equal() {
        let (a1, a2, x1, _) = random_pair(2);
        assert_eq!(pairwise_alpha(&a1, &a2, &x1, &x1).unwrap().alpha, 0.5);
    }

    #[test]
    fn alpha_one_when_second_value_zero() {
        let (a1, a2, x1, x2) = random_pair(3);
        let r = pairwise_alpha(&a1, &a2, &x1, &Matrix::zeros(x2.rows(), x2.cols())).unwrap();
        assert_eq!(r.alpha, 1.0);
        assert!(r.energy < 1e-24);
    }

    #[test]
    fn pair_shape_mismatch_errors() {
        let (a1, a2, x1, _) = random_pair(4);
        assert!(pairwise_alpha(&a1, &a2, &x1, &Matrix::zeros(6, 3)).is_err());
    }

    #[test]
    fn singleton_and_duplicate_groups() {
        let (a1, _, x1, _) = random_pair(5);
        let single = merge_group(&[&a1], &[&x1]).unwrap();
        assert_eq!(single.map, a1);
        assert!(single.alphas.is_empty());

        let dup = merge_group(&[&a1, &a1], &[&x1, &x1]).unwrap();
        assert_eq!(dup.alphas, vec![0.5]);
        assert!(dup.map.max_abs_diff(&a1) < 1e-15);
        assert!(merge_group(&[], &[]).is_err());
    }

    #[test]
    fn zero_valued_third_head_keeps_two_head_merge() {
        let b = random_bundle(6, 9, 3, false, 2.0, &mut SeededRng::new(6)).unwrap();
        let zero = Matrix::zeros(6, 9);
        let three = merge_group(
            &[&b.maps[0], &b.maps[1], &b.maps[2]],
            &[&b.head_values[0], &b.head_values[1], &zero],
        )
        .unwrap();
        let two = merge_group(&[&b.maps[0], &b.maps[1]], &[&b.head_values[0], &b.head_values[1]]).unwrap();
        assert_eq!(three.alphas[1], 1.0);
        assert!(three.map.max_abs_diff(&two.map) < 1e-15);
    }

    #[test]
    fn equal_head_counts_are_identity_for_every_strategy() {
        let b = random_bundle(5, 8, 4, true, 1.0, &mut SeededRng::new(7)).unwrap();
        let sim = head_similarity(&b.maps).unwrap();
        let plans = [
            MergePlan::new(4, 4, MergeStrategy::Shd).unwrap(),
            MergePlan::new(4, 4, MergeStrategy::ConstantHalf).unwrap(),
            MergePlan::new(4, 4, MergeStrategy::HardSelect { seed: 3 }).unwrap(),
            MergePlan::from_similarity(&sim, 4).unwrap(),
        ];
        for plan in plans {
            let r = squeeze_heads(&b.maps, &b.head_values, &plan).unwrap();
            assert_eq!(r.maps, b.maps);
            assert!(r.residuals.iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn shd_beats_constant_half_on_random_bundles() {
        let mut rng = SeededRng::new(8);
        for _ in 0..100 {
            let b = random_bundle(6, 8, 4, false, 2.0, &mut rng).unwrap();
            let shd = squeeze_heads(
                &b.maps,
                &b.head_values,
                &MergePlan::new(4, 2, MergeStrategy::Shd).unwrap(),
            )
            .unwrap();
            let half = squeeze_heads(
                &b.maps,
                &b.head_values,
                &MergePlan::new(4, 2, MergeStrategy::ConstantHalf).unwrap(),
            )
            .unwrap();
            for (e_shd, e_half) in shd.residuals.iter().zip(&half.residuals) {
                assert!(e_shd <= &(e_half + 1e-12), "{e_shd} > {e_half}");
            }
            for m in shd.maps.iter().chain(&half.maps) {
                assert!(row_stochastic(m, 1e-9));
            }
            assert!(shd.alphas.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
            assert!(half.alphas.iter().flatten().all(|&a| a == 0.5));
        }
    }

    #[test]
    fn pair_energy_matches_group_residual() {
        let (a1, a2, x1, x2) = random_pair(9);
        let p = pairwise_alpha(&a1, &a2, &x1, &x2).unwrap();
        let r = squeeze_heads(&[a1, a2], &[x1, x2], &MergePlan::new(2, 1, MergeStrategy::Shd).unwrap()).unwrap();
        assert!((r.residuals[0] - p.energy).abs() <= 1e-10 * (1.0 + p.energy));
    }

    #[test]
    fn hard_select_is_deterministic_and_picks_group_members() {
        let a = MergePlan::new(8, 3, MergeStrategy::HardSelect { seed: 42 }).unwrap();
        let b = MergePlan::new(8, 3, MergeStrategy::HardSelect { seed: 42 }).unwrap();
        assert_eq!(a, b);
        for (g, &s) in a.groups.iter().zip(a.selected.as_ref().unwrap()) {
            assert!(g.contains(&s));
        }
        let bundle = random_bundle(5, 8, 8, false, 1.0, &mut SeededRng::new(10)).unwrap();
        let r1 = squeeze_heads(&bundle.maps, &bundle.head_values, &a).unwrap();
        let r2 = squeeze_heads(&bundle.maps, &bundle.head_values, &b).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.maps[1], bundle.maps[a.selected.as_ref().unwrap()[1]]);
    }

    #[test]
    fn head_match_plan_requires_similarity() {
        assert!(MergePlan::new(4, 2, MergeStrategy::HeadMatch).is_err());
    }

    #[test]
    fn similarity_examples() {
        let (a1, a2, _, _) = random_pair(11);
        let same = head_similarity(&[a1.clone(), a1.clone(), a1.clone()]).unwrap();
        assert!(same.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let s = head_similarity(&[a1, a2]).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(0, 1)], s[(1, 0)]);

        // Disjoint supports, equal mass per row.
        let p = Matrix::from_rows(&[
            [0.5, 0.5, 0.0, 0.0],
            [0.5, 0.5, 0.0, 0.0],
            [0.25, 0.25, 0.25, 0.25],
            [1.0, 0.0, 0.0, 0.0],
        ]);
        let q = Matrix::from_rows(&[
            [0.0, 0.0, 0.5, 0.5],
            [0.0, 0.0, 0.5, 0.5],
            [0.25, 0.25, 0.25, 0.25],
            [0.0, 1.0, 0.0, 0.0],
        ]);
        let dot: f64 = 4.0 * 0.0625;
        let want = dot / (p.frobenius_norm() * q.frobenius_norm());
        let s = head_similarity(&[p, q]).unwrap();
        assert!((s[(0, 1)] - want).abs() < 1e-15);
        assert!(s[(0, 1)] < 1.0);
        assert!(head_similarity(&[Matrix::zeros(2, 2), Matrix::identity(2)]).is_err());
    }

    #[test]
    fn match_heads_examples() {
        let mut sim = Matrix::filled(4, 4, 0.1);
        for i in 0..4 {
            sim[(i, i)] = 1.0;
        }
        for (i, j, v) in [(0, 3, 0.9), (1, 2, 0.8)] {
            sim[(i, j)] = v;
            sim[(j, i)] = v;
        }
        assert_eq!(match_heads(&sim, 2).unwrap(), vec![vec![0, 3], vec![1, 2]]);

        let flat = Matrix::filled(8, 8, 0.3);
        assert_eq!(match_heads(&flat, 3).unwrap(), partition_heads(8, 3).unwrap());
        assert_eq!(match_heads(&flat, 8).unwrap(), partition_heads(8, 8).unwrap());
    }
}
