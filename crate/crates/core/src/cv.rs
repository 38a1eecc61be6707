//! Literal cross-validation by re-solving on the reduced data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::looe::mean_stderr;
use crate::solver::{solve_from, Problem, RegWeights, SolverConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold id of every sample.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Shuffles the samples and deals them round-robin into `k` folds, so
    /// fold sizes differ by at most one.
    pub fn random(m: usize, k: usize, seed: u64) -> Result<FoldPlan> {
        if k < 2 || k > m {
            return Err(Error::invalid("folds", format!("need 2 <= k <= M = {m}, got {k}")));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; m];
        for (pos, &mu) in order.iter().enumerate() {
            assignment[mu] = pos % k;
        }
        Ok(FoldPlan { k, assignment, seed })
    }

    /// One fold per sample, fold id equal to the sample index.
    pub fn leave_one_out(m: usize) -> FoldPlan {
        FoldPlan {
            k: m,
            assignment: (0..m).collect(),
            seed: 0,
        }
    }

    pub fn folds(&self) -> Vec<Vec<usize>> {
        let mut folds = vec![Vec::new(); self.k];
        for (mu, &f) in self.assignment.iter().enumerate() {
            folds[f].push(mu);
        }
        folds
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    /// `0.5 * sum` of squared held-out residuals.
    pub total: f64,
    pub per_sample_mean: f64,
    pub stderr: f64,
    /// Held-out error of each fold.
    pub fold_errors: Vec<f64>,
    /// Held-out term of each sample.
    pub terms: Vec<f64>,
    /// Folds whose solve did not converge.
    pub unconverged: Vec<usize>,
}

/// Held-out errors over the folds of `plan`. Each fold is solved from
/// `warm` when given, otherwise from zero. Folds run in parallel and are
/// reduced in fold order.
pub fn kfold_cv(
    problem: &Problem,
    weights: &RegWeights,
    plan: &FoldPlan,
    config: &SolverConfig,
    warm: Option<&[f64]>,
) -> Result<CvResult> {
    let m = problem.m();
    if plan.assignment.len() != m {
        return Err(Error::DimensionMismatch {
            what: "fold assignment vs samples",
            expected: m,
            got: plan.assignment.len(),
        });
    }
    let folds = plan.folds();
    if folds.iter().any(Vec::is_empty) {
        return Err(Error::invalid("folds", "every fold needs at least one sample"));
    }
    let per_fold: Vec<Result<(Vec<(usize, f64)>, bool)>> = folds
        .par_iter()
        .map(|held| {
            let reduced = problem.without_rows(held);
            let sol = solve_from(&reduced, weights, config, warm)?;
            let x = nalgebra::DVector::from_column_slice(&sol.x_hat);
            let terms = held
                .iter()
                .map(|&mu| {
                    let r = problem.y()[mu] - problem.a().row(mu).transpose().dot(&x);
                    (mu, 0.5 * r * r)
                })
                .collect();
            Ok((terms, sol.converged))
        })
        .collect();
    let mut terms = vec![0.0; m];
    let mut fold_errors = Vec::with_capacity(folds.len());
    let mut unconverged = Vec::new();
    for (f, res) in per_fold.into_iter().enumerate() {
        let (fold_terms, converged) = res?;
        if !converged {
            unconverged.push(f);
        }
        let mut err = 0.0;
        for (mu, t) in fold_terms {
            terms[mu] = t;
            err += t;
        }
        fold_errors.push(err);
    }
    let total = terms.iter().sum();
    let (per_sample_mean, stderr) = mean_stderr(&terms);
    Ok(CvResult {
        total,
        per_sample_mean,
        stderr,
        fold_errors,
        terms,
        unconverged,
    })
}

/// Exact leave-one-out error: `M` re-solves, each omitting one sample.
pub fn literal_loo(
    problem: &Problem,
    weights: &RegWeights,
    config: &SolverConfig,
    warm: Option<&[f64]>,
) -> Result<CvResult> {
    if problem.m() < 2 {
        return Err(Error::invalid("samples", "leave-one-out needs at least two"));
    }
    kfold_cv(problem, weights, &FoldPlan::leave_one_out(problem.m()), config, warm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, TvVariant};
    use crate::solver::solve;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    fn random_problem(seed: u64) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(14, 9, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(9, |i, _| if i % 3 == 0 { 2.0 } else { 0.0 });
        let y = &a * x0 + DVector::from_fn(14, |_, _| rng.random_range(-0.2..0.2));
        Problem::new(a, y, build_grid(3, 3).unwrap(), TvVariant::Isotropic).unwrap()
    }

    #[test]
    fn fold_plan_is_balanced_and_seeded() {
        let p = FoldPlan::random(23, 5, 4).unwrap();
        let sizes: Vec<usize> = p.folds().iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 23);
        assert_eq!(p, FoldPlan::random(23, 5, 4).unwrap());
        assert_ne!(p, FoldPlan::random(23, 5, 5).unwrap());
        assert!(FoldPlan::random(3, 4, 0).is_err());
        assert!(FoldPlan::random(3, 1, 0).is_err());
    }

    #[test]
    fn two_sample_closed_form() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let y = DVector::from_vec(vec![0.3, 1.7]);
        let p = Problem::new(a, y, build_grid(1, 1).unwrap(), TvVariant::Isotropic).unwrap();
        let r = literal_loo(&p, &RegWeights::new(0.0, 0.0).unwrap(), &SolverConfig::default(), None).unwrap();
        let d: f64 = 0.3 - 1.7;
        assert!((r.total - d * d).abs() < 1e-12);
    }

    #[test]
    fn huge_l1_kills_everything() {
        let p = random_problem(1);
        let r = literal_loo(&p, &RegWeights::new(1e6, 1.0).unwrap(), &SolverConfig::default(), None).unwrap();
        assert!((r.total - 0.5 * p.y().norm_squared()).abs() < 1e-12 * r.total);
    }

    #[test]
    fn warm_and_cold_agree() {
        let p = random_problem(2);
        let w = RegWeights::new(0.5, 0.4).unwrap();
        let cfg = SolverConfig::default();
        let full = solve(&p, &w, &cfg).unwrap();
        let warm = literal_loo(&p, &w, &cfg, Some(&full.x_hat)).unwrap();
        let cold = literal_loo(&p, &w, &cfg, None).unwrap();
        assert!(warm.unconverged.is_empty() && cold.unconverged.is_empty());
        assert!((warm.total - cold.total).abs() <= 1e-8 * cold.total, "{} vs {}", warm.total, cold.total);
    }

    #[test]
    fn k_equal_m_is_loo() {
        let p = random_problem(3);
        let w = RegWeights::new(0.3, 0.2).unwrap();
        let cfg = SolverConfig::default();
        let loo = literal_loo(&p, &w, &cfg, None).unwrap();
        let plan = FoldPlan::random(14, 14, 9).unwrap();
        let kf = kfold_cv(&p, &w, &plan, &cfg, None).unwrap();
        assert!((loo.total - kf.total).abs() <= 1e-12 * loo.total);
    }

    #[test]
    fn kfold_is_reproducible() {
        let p = random_problem(4);
        let w = RegWeights::new(0.3, 0.2).unwrap();
        let plan = FoldPlan::random(14, 5, 1).unwrap();
        let a = kfold_cv(&p, &w, &plan, &SolverConfig::default(), None).unwrap();
        let b = kfold_cv(&p, &w, &plan, &SolverConfig::default(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fold_errors.len(), 5);
        assert!((a.fold_errors.iter().sum::<f64>() - a.total).abs() < 1e-12 * a.total);
    }

    #[test]
    fn noiseless_recovery_has_tiny_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(30, 9, |_, _| rng.random_range(-1.0..1.0));
        let y = &a * DVector::from_fn(9, |i, _| if i == 4 { 3.0 } else { 0.0 });
        let p = Problem::new(a, y, build_grid(3, 3).unwrap(), TvVariant::Isotropic).unwrap();
        let plan = FoldPlan::random(30, 10, 0).unwrap();
        let r = kfold_cv(&p, &RegWeights::new(1e-6, 1e-6).unwrap(), &plan, &SolverConfig::default(), None).unwrap();
        assert!(r.per_sample_mean <= 1e-6);
    }
}
