//! Approximate leave-one-out error from the full-data solution.
//!
//! The regular part of the Hessian (Gram matrix plus the softened TV
//! curvature of non-vanishing terms) is restricted to the active pixels,
//! each locked cluster is contracted to one variable, and the per-sample
//! factor `1 - a^T F^-1 a` rescales each training residual.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::grid::{square_tv_matrix, term_soft_value, tv_soft_hessian, SoftParams, TvVariant};
use crate::partition::Partition;
use crate::solver::{Problem, RegWeights};

/// What to do with samples whose factor falls below the floor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DivergentPolicy {
    /// Leave them out of the sum and the mean.
    #[default]
    Exclude,
    /// Replace the factor by the floor.
    Clamp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LooeConfig {
    pub factor_floor: f64,
    pub divergent: DivergentPolicy,
    /// Add `1e-10 * trace / dof` to the diagonal of the merged Hessian.
    pub jitter: bool,
    /// Pixels with `|x| <= eps_active` count as killed.
    pub eps_active: f64,
}

impl Default for LooeConfig {
    fn default() -> Self {
        LooeConfig {
            factor_floor: 1e-8,
            divergent: DivergentPolicy::Exclude,
            jitter: false,
            eps_active: 0.0,
        }
    }
}

/// Column of the merged system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergedIndex {
    Cluster(usize),
    Isolated(usize),
}

#[derive(Clone, Debug)]
pub struct MergedSystem {
    pub f_bar: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    /// Clusters first (in partition order), then isolated pixels.
    pub index_map: Vec<MergedIndex>,
    pub dof: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LooeDiagnostics {
    /// Samples whose factor fell below the floor.
    pub divergent: Vec<usize>,
    /// Diagonal shift applied when jitter is on.
    pub jitter: f64,
}

#[derive(Clone, Debug)]
pub struct LooeResult {
    pub total: f64,
    pub per_sample_mean: f64,
    pub stderr: f64,
    pub factors: Vec<f64>,
    pub dof: usize,
    pub n_clusters: usize,
    pub n_isolated: usize,
    pub n_killed: usize,
    pub diagnostics: LooeDiagnostics,
}

fn check_partition(x_hat: &[f64], partition: &Partition) -> Result<()> {
    let n = x_hat.len();
    let mut seen = vec![false; n];
    for &i in partition.active.iter().chain(&partition.killed) {
        if i >= n || seen[i] {
            return Err(Error::invalid("partition", format!("pixel {i} missing or listed twice")));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("partition", "active and killed sets do not cover the image"));
    }
    let killed_max = partition.killed.iter().map(|&i| x_hat[i].abs()).fold(0.0, f64::max);
    if partition.active.iter().any(|&i| x_hat[i].abs() <= killed_max) {
        return Err(Error::invalid("partition", "an active pixel is no larger than a killed one"));
    }
    let mut in_active = vec![false; n];
    for &i in &partition.active {
        in_active[i] = true;
    }
    let mut covered = 0;
    for &i in partition.clusters.iter().flatten().chain(&partition.isolated) {
        if !in_active[i] {
            return Err(Error::invalid("partition", format!("pixel {i} grouped but not active")));
        }
        covered += 1;
    }
    if covered != partition.active.len() {
        return Err(Error::invalid("partition", "clusters and isolated pixels do not cover the active set"));
    }
    Ok(())
}

/// TV terms counted as vanishing: `t_i^delta <= delta + theta`.
pub fn vanishing_terms(problem: &Problem, x_hat: &[f64], soft: &SoftParams) -> BTreeSet<usize> {
    let g = problem.grid();
    g.tv_terms()
        .iter()
        .copied()
        .filter(|&i| term_soft_value(x_hat, g, i, soft.delta) <= soft.delta + soft.theta)
        .collect()
}

/// Position of each pixel inside `partition.active`.
fn active_positions(n: usize, partition: &Partition) -> Vec<Option<usize>> {
    let mut pos = vec![None; n];
    for (k, &i) in partition.active.iter().enumerate() {
        pos[i] = Some(k);
    }
    pos
}

fn gram_block(problem: &Problem, idx: &[usize]) -> DMatrix<f64> {
    let gram = problem.gram();
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| gram[(idx[r], idx[c])])
}

/// Regular Hessian on the active pixels, rows ordered as `partition.active`.
pub fn build_regular_hessian(
    problem: &Problem,
    x_hat: &[f64],
    partition: &Partition,
    weights: &RegWeights,
    soft: &SoftParams,
) -> Result<DMatrix<f64>> {
    check_len("x_hat vs pixels", problem.n(), x_hat.len())?;
    check_partition(x_hat, partition)?;
    soft.validate()?;
    let mut f = gram_block(problem, &partition.active);
    if weights.lambda_tv == 0.0 {
        return Ok(f);
    }
    let pos = active_positions(problem.n(), partition);
    match problem.variant() {
        TvVariant::Isotropic => {
            let exclude = vanishing_terms(problem, x_hat, soft);
            let h = tv_soft_hessian(x_hat, problem.grid(), soft.delta, &exclude)?;
            h.add_restricted_to(&mut f, &pos, weights.lambda_tv);
        }
        TvVariant::Square => {
            square_tv_matrix(problem.grid()).add_restricted_to(&mut f, &pos, weights.lambda_tv);
        }
        TvVariant::Anisotropic => {}
    }
    Ok(f)
}

/// Merged column of each active position.
fn merged_positions(partition: &Partition) -> (Vec<usize>, Vec<MergedIndex>) {
    let n = partition.active.iter().copied().max().map_or(0, |m| m + 1);
    let mut col = vec![usize::MAX; n];
    let mut index_map = Vec::with_capacity(partition.dof());
    for (c, members) in partition.clusters.iter().enumerate() {
        for &i in members {
            col[i] = index_map.len();
        }
        index_map.push(MergedIndex::Cluster(c));
    }
    for &i in &partition.isolated {
        col[i] = index_map.len();
        index_map.push(MergedIndex::Isolated(i));
    }
    let by_active = partition.active.iter().map(|&i| col[i]).collect();
    (by_active, index_map)
}

/// Contracts each cluster of `F` (indexed by `partition.active`) and of the
/// columns of `A` (indexed by pixel) into one variable.
pub fn merge(f: &DMatrix<f64>, a: &DMatrix<f64>, partition: &Partition) -> Result<MergedSystem> {
    let na = partition.active.len();
    check_len("rows of F vs active pixels", na, f.nrows())?;
    check_len("columns of F vs active pixels", na, f.ncols())?;
    let (col, index_map) = merged_positions(partition);
    let dof = index_map.len();
    let mut f_bar = DMatrix::<f64>::zeros(dof, dof);
    for c in 0..na {
        for r in 0..na {
            f_bar[(col[r], col[c])] += f[(r, c)];
        }
    }
    let mut a_bar = DMatrix::<f64>::zeros(a.nrows(), dof);
    for (k, &i) in partition.active.iter().enumerate() {
        let mut dst = a_bar.column_mut(col[k]);
        dst += a.column(i);
    }
    Ok(MergedSystem {
        f_bar,
        a_bar,
        index_map,
        dof,
    })
}

/// First non-positive pivot of a plain Cholesky sweep (or the smallest one).
fn smallest_pivot(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let d = m[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        min_pivot = min_pivot.min(d);
        if d <= 0.0 || !d.is_finite() {
            return d;
        }
        let s = d.sqrt();
        l[(j, j)] = s;
        for i in j + 1..n {
            l[(i, j)] = (m[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>()) / s;
        }
    }
    min_pivot
}

/// Cholesky factor of `f_bar`; pivots below `1e-14` of the largest diagonal
/// entry count as a failure, since rounding can leave a rank-deficient
/// matrix with tiny positive pivots.
fn factorize(f_bar: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let singular = |min_pivot| Error::SingularHessian {
        dof: f_bar.nrows(),
        min_pivot,
    };
    let ch = f_bar.clone().cholesky().ok_or_else(|| singular(smallest_pivot(f_bar)))?;
    let scale = f_bar.diagonal().amax();
    let min_pivot = ch.l_dirty().diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-14 * scale {
        return Err(singular(min_pivot));
    }
    Ok(ch)
}

/// `a^T F^-1 a` for every row of `a_bar`, sharing one factorization.
fn quadratic_forms(f_bar: &DMatrix<f64>, a_bar: &DMatrix<f64>) -> Result<Vec<f64>> {
    if f_bar.nrows() == 0 {
        return Ok(vec![0.0; a_bar.nrows()]);
    }
    let ch = factorize(f_bar)?;
    let v = ch.solve(&a_bar.transpose());
    Ok((0..a_bar.nrows()).map(|mu| a_bar.row(mu).transpose().dot(&v.column(mu))).collect())
}

/// `1 - a_mu^T F^-1 a_mu` for every sample.
pub fn looe_factors(merged: &MergedSystem) -> Result<Vec<f64>> {
    Ok(quadratic_forms(&merged.f_bar, &merged.a_bar)?.into_iter().map(|q| 1.0 - q).collect())
}

/// Single-sample factor; prefer [`looe_factors`] when all are needed.
pub fn looe_factor(mu: usize, merged: &MergedSystem) -> Result<f64> {
    if mu >= merged.a_bar.nrows() {
        return Err(Error::invalid("mu", format!("{mu} >= {}", merged.a_bar.nrows())));
    }
    let row = merged.a_bar.rows(mu, 1).into_owned();
    Ok(1.0 - quadratic_forms(&merged.f_bar, &row)?[0])
}

/// Standard error of the mean of `terms`: population deviation over `sqrt(M - 1)`.
pub fn mean_stderr(terms: &[f64]) -> (f64, f64) {
    let m = terms.len();
    if m == 0 {
        return (0.0, 0.0);
    }
    let mean = terms.iter().sum::<f64>() / m as f64;
    if m < 2 {
        return (mean, 0.0);
    }
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / m as f64;
    (mean, (var / (m - 1) as f64).sqrt())
}

/// Builds the merged system for `x_hat` and returns it with its partition.
pub fn merged_system(
    problem: &Problem,
    x_hat: &[f64],
    weights: &RegWeights,
    soft: &SoftParams,
    eps_active: f64,
) -> Result<(MergedSystem, Partition)> {
    let partition = Partition::build(x_hat, problem.grid(), soft, problem.variant(), eps_active);
    let f = build_regular_hessian(problem, x_hat, &partition, weights, soft)?;
    Ok((merge(&f, problem.a(), &partition)?, partition))
}

pub fn approx_looe(
    problem: &Problem,
    x_hat: &[f64],
    weights: &RegWeights,
    soft: &SoftParams,
    config: &LooeConfig,
) -> Result<LooeResult> {
    weights.validate()?;
    let (mut merged, partition) = merged_system(problem, x_hat, weights, soft, config.eps_active)?;
    let mut diagnostics = LooeDiagnostics::default();
    if config.jitter && merged.dof > 0 {
        let eps = 1e-10 * merged.f_bar.trace() / merged.dof as f64;
        for k in 0..merged.dof {
            merged.f_bar[(k, k)] += eps;
        }
        diagnostics.jitter = eps;
    }
    let factors = looe_factors(&merged)?;
    let r = problem.residual(x_hat);
    let mut terms = Vec::with_capacity(factors.len());
    for (mu, &fac) in factors.iter().enumerate() {
        let mut fac = fac;
        if fac <= config.factor_floor {
            diagnostics.divergent.push(mu);
            match config.divergent {
                DivergentPolicy::Exclude => continue,
                DivergentPolicy::Clamp => fac = config.factor_floor,
            }
        }
        terms.push(0.5 * (r[mu] / fac).powi(2));
    }
    let total: f64 = terms.iter().sum();
    let (per_sample_mean, stderr) = mean_stderr(&terms);
    Ok(LooeResult {
        total,
        per_sample_mean,
        stderr,
        factors,
        dof: merged.dof,
        n_clusters: partition.clusters.len(),
        n_isolated: partition.isolated.len(),
        n_killed: partition.killed.len(),
        diagnostics,
    })
}

/// Gap between the softened and merged response at one `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChiGap {
    pub delta: f64,
    pub dof: usize,
    /// `None` when the softened Hessian could not be factorized.
    pub gap: Option<f64>,
}

/// For each `delta`, compares `a^T (H^delta)^-1 a` on the active pixels, with
/// every softened TV term kept, against the merged quadratic form.
pub fn chi_direct_diagnostic(
    problem: &Problem,
    x_hat: &[f64],
    weights: &RegWeights,
    theta: f64,
    deltas: &[f64],
    eps_active: f64,
) -> Result<Vec<ChiGap>> {
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("deltas", "must be strictly decreasing"));
    }
    let mut out = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let soft = SoftParams::new(delta, theta)?;
        let (merged, partition) = merged_system(problem, x_hat, weights, &soft, eps_active)?;
        let merged_q = quadratic_forms(&merged.f_bar, &merged.a_bar)?;
        let mut h = gram_block(problem, &partition.active);
        if weights.lambda_tv > 0.0 && problem.variant() == TvVariant::Isotropic {
            let full = tv_soft_hessian(x_hat, problem.grid(), delta, &BTreeSet::new())?;
            full.add_restricted_to(&mut h, &active_positions(problem.n(), &partition), weights.lambda_tv);
        } else if weights.lambda_tv > 0.0 && problem.variant() == TvVariant::Square {
            let pos = active_positions(problem.n(), &partition);
            square_tv_matrix(problem.grid()).add_restricted_to(&mut h, &pos, weights.lambda_tv);
        }
        let a_active = problem.a().select_columns(&partition.active);
        let gap = quadratic_forms(&h, &a_active).ok().map(|direct| {
            direct
                .iter()
                .zip(&merged_q)
                .map(|(d, m)| (d - m).abs())
                .fold(0.0, f64::max)
        });
        out.push(ChiGap {
            delta,
            dof: merged.dof,
            gap,
        });
    }
    Ok(out)
}

/// Residuals scaled by their factors, for callers wanting per-sample terms.
pub fn scaled_residuals(problem: &Problem, x_hat: &[f64], factors: &[f64]) -> Result<DVector<f64>> {
    check_len("factors vs samples", problem.m(), factors.len())?;
    let r = problem.residual(x_hat);
    Ok(DVector::from_fn(r.len(), |mu, _| r[mu] / factors[mu]))
}
