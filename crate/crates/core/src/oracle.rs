//! Slow reference solvers for the head-compression objective
//! `min_Ã ‖Ã ΣX_i − Σ A_i X_i‖_F²`.
//!
//! These are verification tools for the closed-form merge in [`crate::squeeze`];
//! nothing in the training path calls them.

use crate::error::{Result, ShdError};
use crate::numkernel::{least_squares_rows, mm, simplex_project, Matrix};
use crate::par::Exec;
use crate::squeeze::{check_pair_shapes, energy_at, merge_group, pair_residual_terms, PairAlpha, FLAT_ENERGY_EPS};

/// Largest sequence length the constrained solver accepts.
pub const CONSTRAINED_MAX_N: usize = 64;
pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITERS: usize = 50_000;
pub const DEFAULT_GRID_STEP: f64 = 1e-4;
const POWER_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionInstance {
    pub maps: Vec<Matrix>,
    pub head_vals: Vec<Matrix>,
    /// `Σ A_i X_i`
    pub target: Matrix,
    /// `Σ X_i`
    pub p: Matrix,
}

impl CompressionInstance {
    pub fn new(maps: Vec<Matrix>, head_vals: Vec<Matrix>) -> Result<Self> {
        if maps.is_empty() || maps.len() != head_vals.len() {
            return Err(ShdError::invalid(
                "instance needs equally many (at least one) maps and head values",
            ));
        }
        let n = maps[0].rows();
        let shape = head_vals[0].shape();
        let mut target = Matrix::zeros(shape.0, shape.1);
        let mut p = Matrix::zeros(shape.0, shape.1);
        for (a, x) in maps.iter().zip(&head_vals) {
            if a.shape() != (n, n) || x.shape() != shape || shape.0 != n {
                return Err(ShdError::Shape {
                    op: "CompressionInstance",
                    left: a.shape(),
                    right: x.shape(),
                });
            }
            target.axpy(1.0, &mm(a, x))?;
            p.axpy(1.0, x)?;
        }
        Ok(CompressionInstance {
            maps,
            head_vals,
            target,
            p,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.p.rows()
    }
}

/// `‖Ã P − target‖_F²`.
pub fn residual_energy(inst: &CompressionInstance, a_tilde: &Matrix) -> Result<f64> {
    let n = inst.seq_len();
    if a_tilde.shape() != (n, n) {
        return Err(ShdError::Shape {
            op: "residual_energy",
            left: a_tilde.shape(),
            right: (n, n),
        });
    }
    Ok(mm(a_tilde, &inst.p).sub(&inst.target)?.frobenius_norm_sq())
}

/// Pair objective evaluated from its definition for a fixed `alpha`.
pub fn pair_objective(a1: &Matrix, a2: &Matrix, x1: &Matrix, x2: &Matrix, alpha: f64) -> Result<f64> {
    check_pair_shapes(a1, a2, x1, x2)?;
    let merged = a1.zip_with(a2, "pair_objective", |p, q| alpha * p + (1.0 - alpha) * q)?;
    let mut r = mm(&merged, &x1.add(x2)?);
    r.axpy(-1.0, &mm(a1, x1))?;
    r.axpy(-1.0, &mm(a2, x2))?;
    Ok(r.frobenius_norm_sq())
}

/// Exhaustive scan of `α ∈ {0, step, 2·step, …, 1}`; ties keep the smaller α.
///
/// The merged output is linear in `α`, so `A1 P` and `A2 P` are formed once
/// and each grid point costs `O(N · d_model)`.
pub fn grid_search_alpha(a1: &Matrix, a2: &Matrix, x1: &Matrix, x2: &Matrix, step: f64) -> Result<PairAlpha> {
    if !(step > 0.0 && step <= 0.1) {
        return Err(ShdError::invalid(format!("grid step must lie in (0, 0.1], got {step}")));
    }
    check_pair_shapes(a1, a2, x1, x2)?;
    let p = x1.add(x2)?;
    let (a1p, a2p) = (mm(a1, &p), mm(a2, &p));
    let mut target = mm(a1, x1);
    target.axpy(1.0, &mm(a2, x2))?;
    let count = (1.0 / step).round() as usize;
    let mut best = PairAlpha {
        alpha: f64::NAN,
        energy: f64::INFINITY,
    };
    for k in 0..=count {
        let alpha = (k as f64 / count as f64).min(1.0);
        let energy: f64 = a1p
            .as_slice()
            .iter()
            .zip(a2p.as_slice())
            .zip(target.as_slice())
            .map(|((u, v), t)| (alpha * u + (1.0 - alpha) * v - t).powi(2))
            .sum();
        if energy < best.energy {
            best = PairAlpha { alpha, energy };
        }
    }
    Ok(best)
}

/// Coefficient obtained when the α-free term is taken literally as
/// `A2 X1 − A1 X2`, scored on the true objective.
pub fn literal_bias_alpha(a1: &Matrix, a2: &Matrix, x1: &Matrix, x2: &Matrix) -> Result<PairAlpha> {
    let (m, _) = pair_residual_terms(a1, a2, x1, x2)?;
    let literal = mm(a2, x1).sub(&mm(a1, x2))?;
    let m_sq = m.frobenius_norm_sq();
    let alpha = if m_sq < FLAT_ENERGY_EPS {
        0.5
    } else {
        let inner: f64 = m.as_slice().iter().zip(literal.as_slice()).map(|(a, b)| a * b).sum();
        (-inner / m_sq).clamp(0.0, 1.0)
    };
    Ok(PairAlpha {
        alpha,
        energy: pair_objective(a1, a2, x1, x2, alpha)?,
    })
}

/// Energy of the pair residual `α M + B` at a given α (factored form).
pub fn factored_energy(a1: &Matrix, a2: &Matrix, x1: &Matrix, x2: &Matrix, alpha: f64) -> Result<f64> {
    let (m, b) = pair_residual_terms(a1, a2, x1, x2)?;
    Ok(energy_at(&m, &b, alpha))
}

/// Minimum-norm unconstrained optimum via the pseudo-inverse.
pub fn exact_unconstrained(inst: &CompressionInstance) -> Result<(Matrix, f64)> {
    let a = least_squares_rows(&inst.p, &inst.target)?;
    let r = residual_energy(inst, &a)?;
    Ok((a, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedSolution {
    pub a_tilde: Matrix,
    pub residual: f64,
    /// Largest iteration count over rows.
    pub iterations: usize,
}

/// Row-stochastic optimum by projected gradient descent, warm-started from the
/// closed-form merge of all heads (a feasible point, so the result never
/// exceeds the merge's residual).
pub fn constrained_solve(inst: &CompressionInstance, max_iters: usize, tol: f64) -> Result<ConstrainedSolution> {
    let maps: Vec<&Matrix> = inst.maps.iter().collect();
    let vals: Vec<&Matrix> = inst.head_vals.iter().collect();
    let start = merge_group(&maps, &vals)?.map;
    constrained_solve_from(inst, &start, max_iters, tol, Exec::default())
}

/// Projected gradient descent from an explicit start; rows of `start` are
/// projected onto the simplex first.
pub fn constrained_solve_from(
    inst: &CompressionInstance,
    start: &Matrix,
    max_iters: usize,
    tol: f64,
    exec: Exec,
) -> Result<ConstrainedSolution> {
    let n = inst.seq_len();
    if n > CONSTRAINED_MAX_N {
        return Err(ShdError::invalid(format!(
            "constrained oracle is desk-scale only (N = {n} > {CONSTRAINED_MAX_N})"
        )));
    }
    if max_iters == 0 {
        return Err(ShdError::invalid("max_iters must be at least 1"));
    }
    if start.shape() != (n, n) {
        return Err(ShdError::Shape {
            op: "constrained_solve",
            left: start.shape(),
            right: (n, n),
        });
    }
    // Row r minimises ½ aᵀ G a − c_rᵀ a with G = P Pᵀ and c_r = P t_r.
    let gram = mm(&inst.p, &inst.p.transpose());
    let lipschitz = power_iteration(&gram);
    let rows = exec.map(n, |r| {
        let c: Vec<f64> = (0..n)
            .map(|i| inst.p.row(i).iter().zip(inst.target.row(r)).map(|(p, t)| p * t).sum())
            .collect();
        pgd_row(&gram, &c, simplex_project(start.row(r)), lipschitz, max_iters, tol)
    });
    let mut a_tilde = Matrix::zeros(n, n);
    let mut iterations = 0;
    for (r, (row, iters)) in rows.into_iter().enumerate() {
        a_tilde.row_mut(r).copy_from_slice(&row);
        iterations = iterations.max(iters);
    }
    let residual = residual_energy(inst, &a_tilde)?;
    Ok(ConstrainedSolution {
        a_tilde,
        residual,
        iterations,
    })
}

/// Largest eigenvalue of a symmetric PSD matrix; fixed start vector of ones.
fn power_iteration(g: &Matrix) -> f64 {
    let n = g.rows();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let w = sym_apply(g, &v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

fn sym_apply(g: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..g.rows())
        .map(|i| g.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn row_objective(g: &Matrix, c: &[f64], a: &[f64]) -> f64 {
    let ga = sym_apply(g, a);
    a.iter()
        .zip(&ga)
        .zip(c)
        .map(|((ai, gai), ci)| 0.5 * ai * gai - ci * ai)
        .sum()
}

fn pgd_row(g: &Matrix, c: &[f64], mut a: Vec<f64>, lipschitz: f64, max_iters: usize, tol: f64) -> (Vec<f64>, usize) {
    if lipschitz <= 0.0 {
        return (a, 0);
    }
    let mut step = 1.0 / lipschitz;
    let mut f = row_objective(g, c, &a);
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let grad: Vec<f64> = sym_apply(g, &a).iter().zip(c).map(|(ga, ci)| ga - ci).collect();
        // Backtrack if the power-iteration estimate undershoots the true curvature.
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = a.iter().zip(&grad).map(|(ai, gi)| ai - step * gi).collect();
            let cand = simplex_project(&cand);
            let f_cand = row_objective(g, c, &cand);
            if f_cand <= f {
                accepted = Some((cand, f_cand));
                break;
            }
            step *= 0.5;
        }
        let Some((next, f_next)) = accepted else {
            break;
        };
        debug_assert!(f_next <= f, "projected gradient step increased the objective");
        let improvement = f - f_next;
        a = next;
        f = f_next;
        if improvement < tol {
            break;
        }
    }
    (a, iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::random_bundle;
    use crate::numkernel::{mm, SeededRng};
    use crate::squeeze::pairwise_alpha;

    fn pair_instance(n: usize, d_model: usize, heads: usize, seed: u64) -> CompressionInstance {
        let b = random_bundle(n, d_model, heads, false, 2.0, &mut SeededRng::new(seed)).unwrap();
        CompressionInstance::new(b.maps[..2].to_vec(), b.head_values[..2].to_vec()).unwrap()
    }

    fn random_stochastic(n: usize, rng: &mut SeededRng) -> Matrix {
        let mut m = rng.uniform_matrix(n, n, 0.0, 1.0);
        for i in 0..n {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    #[test]
    fn residual_energy_examples() {
        let inst = pair_instance(6, 8, 4, 1);
        let zero = Matrix::zeros(6, 6);
        assert!((residual_energy(&inst, &zero).unwrap() - inst.target.frobenius_norm_sq()).abs() < 1e-12);

        let b = random_bundle(5, 8, 2, false, 1.0, &mut SeededRng::new(2)).unwrap();
        let single = CompressionInstance::new(vec![b.maps[0].clone()], vec![b.head_values[0].clone()]).unwrap();
        assert!(residual_energy(&single, &b.maps[0]).unwrap() < 1e-28);
        assert!(residual_energy(&single, &Matrix::zeros(4, 4)).is_err());
    }

    #[test]
    fn grid_search_forced_minima() {
        let inst = pair_instance(6, 8, 4, 3);
        let (a1, a2) = (&inst.maps[0], &inst.maps[1]);
        let (x1, x2) = (&inst.head_vals[0], &inst.head_vals[1]);
        let step = 1e-3;
        let zero = Matrix::zeros(6, 8);
        assert!((grid_search_alpha(a1, a2, x1, &zero, step).unwrap().alpha - 1.0).abs() <= step);
        assert!((grid_search_alpha(a1, a2, x1, x1, step).unwrap().alpha - 0.5).abs() <= step);
        assert!(grid_search_alpha(a1, a2, x1, x2, 0.5).is_err());
    }

    #[test]
    fn grid_agrees_with_closed_form() {
        for seed in 0..20 {
            let inst = pair_instance(6, 8, 4, 100 + seed);
            let (a1, a2) = (&inst.maps[0], &inst.maps[1]);
            let (x1, x2) = (&inst.head_vals[0], &inst.head_vals[1]);
            let closed = pairwise_alpha(a1, a2, x1, x2).unwrap();
            let grid = grid_search_alpha(a1, a2, x1, x2, 1e-4).unwrap();
            assert!(grid.energy >= closed.energy - 1e-9);
            assert!(closed.energy - grid.energy <= 1e-6 * (1.0 + grid.energy));
            assert!((grid.alpha - closed.alpha).abs() <= 1e-4 + 1e-12);
            let direct = pair_objective(a1, a2, x1, x2, closed.alpha).unwrap();
            assert!((direct - closed.energy).abs() <= 1e-10 * (1.0 + direct));
        }
    }

    #[test]
    fn unconstrained_identical_maps_is_exact() {
        let b = random_bundle(6, 9, 3, false, 1.0, &mut SeededRng::new(4)).unwrap();
        let a = b.maps[0].clone();
        let inst = CompressionInstance::new(vec![a.clone(); 3], b.head_values.clone()).unwrap();
        assert!(residual_energy(&inst, &a).unwrap() <= 1e-16);
        let (_, r) = exact_unconstrained(&inst).unwrap();
        assert!(r <= 1e-16, "residual {r}");
    }

    #[test]
    fn unconstrained_generic_two_head_is_lossless() {
        let inst = pair_instance(8, 8, 4, 5);
        let (_, r) = exact_unconstrained(&inst).unwrap();
        assert!(r <= 1e-8 * inst.target.frobenius_norm_sq(), "residual {r}");
    }

    /// Residual of projecting each target row onto the row space of P, using an
    /// orthonormal basis from Gram–Schmidt (independent of the SVD path).
    fn projection_residual(p: &Matrix, target: &Matrix) -> f64 {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for i in 0..p.rows() {
            let mut v = p.row(i).to_vec();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-10 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        (0..target.rows())
            .map(|r| {
                let mut t = target.row(r).to_vec();
                for b in &basis {
                    let d: f64 = t.iter().zip(b).map(|(x, y)| x * y).sum();
                    t.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                t.iter().map(|x| x * x).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn unconstrained_reports_projection_residual_when_unreachable() {
        // P of rank 2 inside a 4-dim space; target has components outside it.
        let mut rng = SeededRng::new(6);
        let x1 = mm(&rng.normal_matrix(4, 2, 1.0), &rng.normal_matrix(2, 4, 1.0));
        let x2 = x1.scale(0.5);
        let a1 = random_stochastic(4, &mut rng);
        let a2 = random_stochastic(4, &mut rng);
        let mut inst = CompressionInstance::new(vec![a1, a2], vec![x1, x2]).unwrap();
        inst.target = rng.normal_matrix(4, 4, 1.0);
        let (_, r) = exact_unconstrained(&inst).unwrap();
        let want = projection_residual(&inst.p, &inst.target);
        assert!(r > 1e-3);
        assert!((r - want).abs() <= 1e-9 * (1.0 + want), "{r} vs {want}");
    }

    #[test]
    fn constrained_reaches_feasible_unconstrained_optimum() {
        // X1 = X2 with invertible P: the unconstrained optimum (A1 + A2)/2 is stochastic.
        let mut rng = SeededRng::new(7);
        let x = rng.normal_matrix(4, 4, 1.0);
        let a1 = random_stochastic(4, &mut rng);
        let a2 = random_stochastic(4, &mut rng);
        let inst = CompressionInstance::new(vec![a1, a2], vec![x.clone(), x]).unwrap();
        let (_, r_unc) = exact_unconstrained(&inst).unwrap();
        let uniform = Matrix::filled(4, 4, 0.25);
        let sol = constrained_solve_from(&inst, &uniform, DEFAULT_MAX_ITERS, DEFAULT_TOL, Exec::Sequential).unwrap();
        assert!((sol.residual - r_unc).abs() <= 1e-8, "{} vs {r_unc}", sol.residual);
    }

    #[test]
    fn constrained_rows_on_simplex_and_sandwiched() {
        for seed in 0..10 {
            let inst = pair_instance(8, 8, 4, 200 + seed);
            let (a1, a2) = (&inst.maps[0], &inst.maps[1]);
            let (x1, x2) = (&inst.head_vals[0], &inst.head_vals[1]);
            let closed = pairwise_alpha(a1, a2, x1, x2).unwrap();
            let (_, r_unc) = exact_unconstrained(&inst).unwrap();
            let sol = constrained_solve(&inst, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
            for i in 0..8 {
                let row = sol.a_tilde.row(i);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
            assert!(sol.residual >= r_unc - 1e-10);
            assert!(sol.residual <= closed.energy + 1e-8);
        }
    }

    #[test]
    fn constrained_rejects_large_instances() {
        let b = random_bundle(65, 4, 2, false, 1.0, &mut SeededRng::new(8)).unwrap();
        let inst = CompressionInstance::new(b.maps, b.head_values).unwrap();
        let err = constrained_solve(&inst, 10, 1e-12).unwrap_err();
        assert!(err.to_string().contains("desk-scale only"));
    }

    #[test]
    fn objective_is_convex_on_feasible_set() {
        let inst = pair_instance(6, 8, 4, 9);
        let mut rng = SeededRng::new(10);
        for _ in 0..20 {
            let a = random_stochastic(6, &mut rng);
            let b = random_stochastic(6, &mut rng);
            let lambda = rng.uniform();
            let mix = a.zip_with(&b, "mix", |x, y| lambda * x + (1.0 - lambda) * y).unwrap();
            let lhs = residual_energy(&inst, &mix).unwrap();
            let rhs =
                lambda * residual_energy(&inst, &a).unwrap() + (1.0 - lambda) * residual_energy(&inst, &b).unwrap();
            assert!(lhs <= rhs + 1e-9);
        }
    }

    #[test]
    fn literal_bias_never_beats_derived_form() {
        for seed in 0..30 {
            let inst = pair_instance(6, 8, 4, 300 + seed);
            let (a1, a2) = (&inst.maps[0], &inst.maps[1]);
            let (x1, x2) = (&inst.head_vals[0], &inst.head_vals[1]);
            let derived = pairwise_alpha(a1, a2, x1, x2).unwrap();
            let literal = literal_bias_alpha(a1, a2, x1, x2).unwrap();
            assert!(literal.energy >= derived.energy - 1e-9);
        }
    }

    #[test]
    fn factored_energy_matches_definition() {
        let inst = pair_instance(6, 8, 4, 11);
        let (a1, a2) = (&inst.maps[0], &inst.maps[1]);
        let (x1, x2) = (&inst.head_vals[0], &inst.head_vals[1]);
        for alpha in [0.0, 0.3, 0.5, 1.0] {
            let f = factored_energy(a1, a2, x1, x2, alpha).unwrap();
            let d = pair_objective(a1, a2, x1, x2, alpha).unwrap();
            assert!((f - d).abs() <= 1e-10 * (1.0 + d));
        }
    }
}
