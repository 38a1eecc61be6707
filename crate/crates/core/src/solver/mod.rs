//! Penalized least squares,
//! `argmin_x 0.5 ||y - A x||^2 + lambda_l1 ||x||_1 + lambda_tv TV(x)`,
//! by monotone FISTA with an exact dual proximal step, followed by a Newton
//! refinement on the identified sparsity / flat-region structure.

mod prox;
mod refine;

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::grid::{square_tv_matrix, tv_value, GridGraph, SparseSym, TvVariant};

use prox::TvProx;
pub use refine::{merged_gradient, Structure};

/// Measurement matrix, observations, lattice and TV variant.
#[derive(Clone, Debug)]
pub struct Problem {
    a: DMatrix<f64>,
    y: DVector<f64>,
    grid: GridGraph,
    variant: TvVariant,
    gram: OnceLock<DMatrix<f64>>,
}

impl Problem {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, grid: GridGraph, variant: TvVariant) -> Result<Self> {
        if a.nrows() == 0 {
            return Err(Error::invalid("A", "needs at least one row"));
        }
        check_len("rows of A vs length of y", a.nrows(), y.len())?;
        check_len("columns of A vs pixels", grid.len(), a.ncols())?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("A", "contains non-finite entries"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("y", "contains non-finite entries"));
        }
        Ok(Problem {
            a,
            y,
            grid,
            variant,
            gram: OnceLock::new(),
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn grid(&self) -> &GridGraph {
        &self.grid
    }

    pub fn variant(&self) -> TvVariant {
        self.variant
    }

    /// Number of measurements `M`.
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    /// Number of pixels `N`.
    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn with_variant(&self, variant: TvVariant) -> Problem {
        let mut p = self.clone();
        p.variant = variant;
        p
    }

    /// `A^T A`, computed once and cached.
    pub fn gram(&self) -> &DMatrix<f64> {
        self.gram.get_or_init(|| self.a.tr_mul(&self.a))
    }

    /// The problem with the listed measurement rows removed.
    pub fn without_rows(&self, rows: &[usize]) -> Problem {
        let mut drop = rows.to_vec();
        drop.sort_unstable();
        drop.dedup();
        let a = self.a.clone().remove_rows_at(&drop);
        let y = self.y.clone().remove_rows_at(&drop);
        let gram = OnceLock::new();
        if let Some(g) = self.gram.get() {
            let mut g = g.clone();
            for &mu in &drop {
                let row = self.a.row(mu).transpose();
                g.ger(-1.0, &row, &row, 1.0);
            }
            let _ = gram.set(g);
        }
        Problem {
            a,
            y,
            grid: self.grid.clone(),
            variant: self.variant,
            gram,
        }
    }

    /// `y - A x`
    pub fn residual(&self, x: &[f64]) -> DVector<f64> {
        &self.y - &self.a * DVector::from_column_slice(x)
    }

    /// `0.5 ||y - A x||^2`
    pub fn rss(&self, x: &[f64]) -> f64 {
        0.5 * self.residual(x).norm_squared()
    }
}

/// Regularization weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegWeights {
    pub lambda_l1: f64,
    pub lambda_tv: f64,
}

impl RegWeights {
    pub fn new(lambda_l1: f64, lambda_tv: f64) -> Result<Self> {
        let w = RegWeights { lambda_l1, lambda_tv };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_l1", self.lambda_l1), ("lambda_tv", self.lambda_tv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} is not a finite non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_outer_iters: usize,
    /// Stop once the relative objective decrease over a short window falls below this.
    pub rel_tol: f64,
    pub inner_prox_iters: usize,
    pub lipschitz_margin: f64,
    /// Seed for the power-iteration start vector.
    pub seed: u64,
    /// Polish the iterate by Newton steps on the detected structure.
    pub refine: bool,
    /// Relative thresholds (times `max |x|`) tried when detecting flat regions
    /// for the refinement.
    pub refine_taus: Vec<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_outer_iters: 5000,
            rel_tol: 1e-10,
            inner_prox_iters: 50,
            lipschitz_margin: 1.1,
            seed: 0,
            refine: true,
            refine_taus: vec![1e-7, 1e-5],
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 {
            return Err(Error::invalid("max_outer_iters", "must be positive"));
        }
        if self.inner_prox_iters == 0 {
            return Err(Error::invalid("inner_prox_iters", "must be positive"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid("rel_tol", "must be positive"));
        }
        if !(self.lipschitz_margin >= 1.0) {
            return Err(Error::invalid("lipschitz_margin", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub x_hat: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
}

impl Solution {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// `0.5 ||y - A x||^2 + lambda_l1 ||x||_1 + lambda_tv TV(x)`
pub fn objective(x: &[f64], problem: &Problem, weights: &RegWeights) -> Result<f64> {
    check_len("x vs pixels", problem.n(), x.len())?;
    let tv = if weights.lambda_tv > 0.0 {
        weights.lambda_tv * tv_value(x, &problem.grid, problem.variant)?
    } else {
        0.0
    };
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    Ok(problem.rss(x) + weights.lambda_l1 * l1 + tv)
}

/// Evaluates the objective given a precomputed `A x`.
fn objective_with(x: &[f64], ax: &DVector<f64>, problem: &Problem, w: &RegWeights) -> f64 {
    let rss = 0.5 * (&problem.y - ax).norm_squared();
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    let tv = if w.lambda_tv > 0.0 {
        w.lambda_tv * tv_value(x, &problem.grid, problem.variant).expect("length checked")
    } else {
        0.0
    };
    rss + w.lambda_l1 * l1 + tv
}

/// Largest eigenvalue of `A^T A (+ lambda_tv J)` by power iteration.
fn lipschitz(problem: &Problem, extra: Option<(&SparseSym, f64)>, seed: u64) -> f64 {
    let n = problem.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let mut est = 0.0;
    for _ in 0..30 {
        let nrm = v.norm();
        if nrm == 0.0 {
            break;
        }
        v /= nrm;
        let av = &problem.a * &v;
        let mut w = problem.a.tr_mul(&av);
        if let Some((j, lam)) = extra {
            let jv = j.mul_vec(v.as_slice());
            for (wi, ji) in w.iter_mut().zip(jv) {
                *wi += lam * ji;
            }
        }
        est = v.dot(&w);
        v = w;
    }
    est.max(f64::MIN_POSITIVE)
}

/// Solves from `x = 0`.
pub fn solve(problem: &Problem, weights: &RegWeights, config: &SolverConfig) -> Result<Solution> {
    solve_from(problem, weights, config, None)
}

/// Solves from an optional starting point.
pub fn solve_from(
    problem: &Problem,
    weights: &RegWeights,
    config: &SolverConfig,
    x0: Option<&[f64]>,
) -> Result<Solution> {
    weights.validate()?;
    config.validate()?;
    let n = problem.n();
    if let Some(x0) = x0 {
        check_len("starting point vs pixels", n, x0.len())?;
    }

    let square = problem.variant == TvVariant::Square && weights.lambda_tv > 0.0;
    let j = square.then(|| square_tv_matrix(&problem.grid));
    let extra = j.as_ref().map(|j| (j, weights.lambda_tv));
    let lip = config.lipschitz_margin * lipschitz(problem, extra, config.seed);
    let a_step = weights.lambda_l1 / lip;
    let b_step = if square { 0.0 } else { weights.lambda_tv / lip };
    let mut prox = TvProx::new(&problem.grid, problem.variant);

    let mut x: Vec<f64> = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut ax = &problem.a * DVector::from_column_slice(&x);
    let mut fx = objective_with(&x, &ax, problem, weights);
    let mut trace = vec![fx];

    let mut x_prev = x.clone();
    let mut ax_prev = ax.clone();
    let mut yk = x.clone();
    let mut ayk = ax.clone();
    let mut t = 1.0_f64;
    let mut v = vec![0.0; n];
    let mut z = vec![0.0; n];

    let window = 10;
    let mut refine_gate = 1e-6_f64.max(config.rel_tol);
    let mut converged = false;
    let mut iters = 0;

    while iters < config.max_outer_iters {
        iters += 1;
        // gradient of the smooth part at the extrapolated point
        let r = &ayk - &problem.y;
        let grad = problem.a.tr_mul(&r);
        let jy = j.as_ref().map(|j| j.mul_vec(&yk));
        for i in 0..n {
            let mut gi = grad[i];
            if let Some(jy) = &jy {
                gi += weights.lambda_tv * jy[i];
            }
            v[i] = yk[i] - gi / lip;
        }
        prox.apply(&v, a_step, b_step, config.inner_prox_iters, &mut z);
        let az = &problem.a * DVector::from_column_slice(&z);
        let fz = objective_with(&z, &az, problem, weights);

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        std::mem::swap(&mut x_prev, &mut x);
        std::mem::swap(&mut ax_prev, &mut ax);
        if fz <= fx {
            x.copy_from_slice(&z);
            ax.copy_from(&az);
            fx = fz;
            let c1 = t / t_next;
            let c2 = (t - 1.0) / t_next;
            for i in 0..n {
                yk[i] = x[i] + c1 * (z[i] - x[i]) + c2 * (x[i] - x_prev[i]);
            }
            ayk = &ax + (&az - &ax) * c1 + (&ax - &ax_prev) * c2;
            t = t_next;
        } else {
            // rejected step: keep the previous iterate and restart momentum
            x.copy_from_slice(&x_prev);
            ax.copy_from(&ax_prev);
            yk.copy_from_slice(&x);
            ayk.copy_from(&ax);
            t = 1.0;
        }
        trace.push(fx);

        if trace.len() > window {
            let old = trace[trace.len() - 1 - window];
            let decrease = (old - fx) / fx.abs().max(f64::MIN_POSITIVE);
            if decrease <= refine_gate {
                let stalled = decrease <= config.rel_tol;
                let mut improved = 0.0;
                if config.refine {
                    if let Some((xr, fr)) = refine::refine(problem, weights, &x, &config.refine_taus) {
                        if fr <= fx + 1e-14 * fx.abs() {
                            improved = (fx - fr) / fx.abs().max(f64::MIN_POSITIVE);
                            x = xr;
                            ax = &problem.a * DVector::from_column_slice(&x);
                            fx = fr;
                            x_prev.copy_from_slice(&x);
                            ax_prev.copy_from(&ax);
                            yk.copy_from_slice(&x);
                            ayk.copy_from(&ax);
                            t = 1.0;
                            trace.push(fx);
                        }
                    }
                }
                refine_gate = (refine_gate * 1e-2).max(config.rel_tol);
                if stalled && improved <= config.rel_tol {
                    converged = true;
                    break;
                }
            }
        }
    }

    Ok(Solution {
        x_hat: x,
        objective_trace: trace,
        converged,
        iters,
    })
}

#[cfg(test)]
mod tests {
    use super::prox::soft;
    use super::*;
    use crate::grid::build_grid;

    fn random_problem(rows: usize, cols: usize, m: usize, seed: u64, variant: TvVariant) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rows * cols;
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let x0: Vec<f64> = (0..n)
            .map(|i| if i % 3 == 0 { 0.0 } else { 1.0 + (i % 4) as f64 })
            .collect();
        let y = &a * DVector::from_vec(x0) + DVector::from_fn(m, |_, _| rng.random_range(-0.3..0.3));
        Problem::new(a, y, build_grid(rows, cols).unwrap(), variant).unwrap()
    }

    #[test]
    fn objective_at_zero_is_half_norm() {
        let p = random_problem(2, 2, 5, 1, TvVariant::Isotropic);
        let w = RegWeights::new(1.0, 2.0).unwrap();
        let f = objective(&[0.0; 4], &p, &w).unwrap();
        assert!((f - 0.5 * p.y().norm_squared()).abs() < 1e-12);
        assert!(objective(&[0.0; 3], &p, &w).is_err());
    }

    #[test]
    fn objective_exact_fit_without_penalty() {
        let p0 = random_problem(2, 2, 5, 2, TvVariant::Isotropic);
        let x = [0.5, -1.0, 2.0, 0.25];
        let y = p0.a() * DVector::from_column_slice(&x);
        let p = Problem::new(p0.a().clone(), y, p0.grid().clone(), p0.variant()).unwrap();
        let f = objective(&x, &p, &RegWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert!(f.abs() < 1e-24);
    }

    #[test]
    fn objective_term_by_term() {
        let p = random_problem(2, 2, 3, 3, TvVariant::Isotropic);
        let x = [1.0, -2.0, 0.5, 3.0];
        let (l1w, tvw) = (0.7, 1.3);
        // hand summation
        let mut rss = 0.0;
        for mu in 0..3 {
            let mut pred = 0.0;
            for i in 0..4 {
                pred += p.a()[(mu, i)] * x[i];
            }
            rss += 0.5 * (p.y()[mu] - pred).powi(2);
        }
        let l1 = 1.0 + 2.0 + 0.5 + 3.0;
        let t0 = ((-2.0f64 - 1.0).powi(2) + (0.5f64 - 1.0).powi(2)).sqrt();
        let t1 = (3.0f64 + 2.0).abs();
        let t2 = (3.0f64 - 0.5).abs();
        let expect = rss + l1w * l1 + tvw * (t0 + t1 + t2);
        let got = objective(&x, &p, &RegWeights::new(l1w, tvw).unwrap()).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn weights_and_config_validation() {
        assert!(RegWeights::new(-1.0, 0.0).is_err());
        assert!(RegWeights::new(0.0, f64::NAN).is_err());
        let mut c = SolverConfig::default();
        assert!(c.validate().is_ok());
        c.lipschitz_margin = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn problem_rejects_bad_shapes() {
        let g = build_grid(2, 2).unwrap();
        let a = DMatrix::zeros(3, 4);
        assert!(Problem::new(a.clone(), DVector::zeros(2), g.clone(), TvVariant::Isotropic).is_err());
        assert!(Problem::new(DMatrix::zeros(3, 5), DVector::zeros(3), g.clone(), TvVariant::Isotropic).is_err());
        let mut bad = a.clone();
        bad[(0, 0)] = f64::INFINITY;
        assert!(Problem::new(bad, DVector::zeros(3), g, TvVariant::Isotropic).is_err());
    }

    #[test]
    fn gram_downdate_matches_recompute() {
        let p = random_problem(3, 3, 12, 4, TvVariant::Isotropic);
        let _ = p.gram();
        let q = p.without_rows(&[2, 7]);
        let direct = q.a().tr_mul(q.a());
        assert_eq!(q.m(), 10);
        assert!((q.gram() - direct).abs().max() < 1e-12);
    }

    #[test]
    fn identity_design_is_soft_threshold() {
        let g = build_grid(2, 3).unwrap();
        let y = DVector::from_vec(vec![3.0, -0.5, 1.2, -2.5, 0.1, 0.0]);
        let p = Problem::new(DMatrix::identity(6, 6), y.clone(), g, TvVariant::Isotropic).unwrap();
        let w = RegWeights::new(1.0, 0.0).unwrap();
        let sol = solve(&p, &w, &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        for i in 0..6 {
            let expect = soft(y[i], 1.0);
            assert!((sol.x_hat[i] - expect).abs() < 1e-12, "{i}");
            if expect == 0.0 {
                assert_eq!(sol.x_hat[i], 0.0);
            }
        }
    }

    #[test]
    fn large_l1_gives_zero() {
        let p = random_problem(3, 3, 10, 5, TvVariant::Isotropic);
        let aty = p.a().tr_mul(p.y());
        let lam = aty.amax();
        let sol = solve(&p, &RegWeights::new(lam, 0.0).unwrap(), &SolverConfig::default()).unwrap();
        assert!(sol.x_hat.iter().all(|&v| v == 0.0));
        assert!(sol.converged);
    }

    #[test]
    fn unpenalized_matches_least_squares() {
        let p = random_problem(3, 3, 20, 6, TvVariant::Isotropic);
        let sol = solve(&p, &RegWeights::new(0.0, 0.0).unwrap(), &SolverConfig::default()).unwrap();
        let ls = p.gram().clone().cholesky().unwrap().solve(&p.a().tr_mul(p.y()));
        for i in 0..9 {
            assert!((sol.x_hat[i] - ls[i]).abs() <= 1e-8 * ls.amax());
        }
    }

    #[test]
    fn trace_is_monotone() {
        for variant in [TvVariant::Isotropic, TvVariant::Anisotropic, TvVariant::Square] {
            let p = random_problem(4, 4, 20, 7, variant);
            let sol = solve(&p, &RegWeights::new(0.8, 1.5).unwrap(), &SolverConfig::default()).unwrap();
            assert!(sol.converged, "{variant}");
            for w in sol.objective_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-13), "{variant}: {} > {}", w[1], w[0]);
            }
        }
    }
}
