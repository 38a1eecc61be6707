//! Grid sweeps over `(lambda_l1, lambda_tv)`, CSV output and text reports.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{kfold_cv, literal_loo, FoldPlan};
use crate::error::{Error, Result};
use crate::grid::SoftParams;
use crate::looe::{approx_looe, LooeConfig};
use crate::solver::{solve, Problem, RegWeights, Solution, SolverConfig};

/// One grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_l1: f64,
    pub lambda_tv: f64,
    pub cve_approx_total: f64,
    pub cve_approx_mean: f64,
    pub cve_approx_stderr: f64,
    pub cve_kfold_mean: f64,
    pub cve_kfold_stderr: f64,
    pub cve_loo_mean: f64,
    pub cve_loo_stderr: f64,
    pub rss: f64,
    pub dof: usize,
    pub n_clusters: usize,
    pub n_isolated: usize,
    pub n_killed: usize,
    pub n_divergent_factors: usize,
    pub wall_time_solve: f64,
    pub wall_time_approx: f64,
    pub converged: bool,
    /// `*` on the row with the smallest approximate CVE.
    pub best: String,
    /// Empty, or the error that stopped this point.
    pub status: String,
}

impl SweepRow {
    pub fn empty(w: &RegWeights) -> SweepRow {
        SweepRow {
            lambda_l1: w.lambda_l1,
            lambda_tv: w.lambda_tv,
            cve_approx_total: f64::NAN,
            cve_approx_mean: f64::NAN,
            cve_approx_stderr: f64::NAN,
            cve_kfold_mean: f64::NAN,
            cve_kfold_stderr: f64::NAN,
            cve_loo_mean: f64::NAN,
            cve_loo_stderr: f64::NAN,
            rss: f64::NAN,
            dof: 0,
            n_clusters: 0,
            n_isolated: 0,
            n_killed: 0,
            n_divergent_factors: 0,
            wall_time_solve: 0.0,
            wall_time_approx: 0.0,
            converged: false,
            best: String::new(),
            status: String::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.status.is_empty() && self.converged
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub solver: SolverConfig,
    pub soft: SoftParams,
    pub looe: LooeConfig,
    /// Folds for k-fold CV; `None` skips it.
    pub folds: Option<FoldPlan>,
    /// Also run literal leave-one-out.
    pub loo: bool,
}

/// Solves at `w` and fills one row. Errors are recorded in the row.
pub fn evaluate_point(problem: &Problem, w: &RegWeights, opts: &SweepOptions) -> (SweepRow, Option<Solution>) {
    let mut row = SweepRow::empty(w);
    let t = Instant::now();
    let sol = match solve(problem, w, &opts.solver) {
        Ok(s) => s,
        Err(e) => {
            row.status = e.to_string();
            return (row, None);
        }
    };
    row.wall_time_solve = t.elapsed().as_secs_f64();
    row.converged = sol.converged;
    row.rss = problem.rss(&sol.x_hat);
    let t = Instant::now();
    match approx_looe(problem, &sol.x_hat, w, &opts.soft, &opts.looe) {
        Ok(r) => {
            row.wall_time_approx = t.elapsed().as_secs_f64();
            row.cve_approx_total = r.total;
            row.cve_approx_mean = r.per_sample_mean;
            row.cve_approx_stderr = r.stderr;
            row.dof = r.dof;
            row.n_clusters = r.n_clusters;
            row.n_isolated = r.n_isolated;
            row.n_killed = r.n_killed;
            row.n_divergent_factors = r.diagnostics.divergent.len();
        }
        Err(e) => row.status = e.to_string(),
    }
    if let Some(plan) = &opts.folds {
        match kfold_cv(problem, w, plan, &opts.solver, Some(&sol.x_hat)) {
            Ok(cv) => {
                row.cve_kfold_mean = cv.per_sample_mean;
                row.cve_kfold_stderr = cv.stderr;
                if !cv.unconverged.is_empty() {
                    row.converged = false;
                }
            }
            Err(e) => {
                if row.status.is_empty() {
                    row.status = e.to_string();
                }
            }
        }
    }
    if opts.loo {
        match literal_loo(problem, w, &opts.solver, Some(&sol.x_hat)) {
            Ok(cv) => {
                row.cve_loo_mean = cv.per_sample_mean;
                row.cve_loo_stderr = cv.stderr;
                if !cv.unconverged.is_empty() {
                    row.converged = false;
                }
            }
            Err(e) => {
                if row.status.is_empty() {
                    row.status = e.to_string();
                }
            }
        }
    }
    (row, Some(sol))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub n_l1: usize,
    pub n_tv: usize,
    /// Pairs of row indices where the RSS decreased as one weight grew.
    pub rss_violations: Vec<(usize, usize)>,
}

impl SweepResult {
    fn argmin_by(&self, key: impl Fn(&SweepRow) -> f64) -> Option<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| key(r).is_finite())
            .min_by(|a, b| key(a.1).total_cmp(&key(b.1)))
            .map(|(i, _)| i)
    }

    pub fn argmin_approx(&self) -> Option<usize> {
        self.argmin_by(|r| r.cve_approx_mean)
    }

    pub fn argmin_kfold(&self) -> Option<usize> {
        self.argmin_by(|r| r.cve_kfold_mean)
    }

    pub fn rss_monotone(&self) -> bool {
        self.rss_violations.is_empty()
    }
}

/// Index pairs `(smaller weight, larger weight)` along either axis of a
/// `lambda_l1`-major grid where `rss` drops by more than `tol` relative.
pub fn rss_violations(rows: &[SweepRow], n_l1: usize, n_tv: usize, tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut check = |a: usize, b: usize| {
        let (ra, rb) = (rows[a].rss, rows[b].rss);
        if ra.is_finite() && rb.is_finite() && rb < ra - tol * ra.abs().max(f64::MIN_POSITIVE) {
            out.push((a, b));
        }
    };
    for i in 0..n_l1 {
        for j in 0..n_tv {
            if j + 1 < n_tv {
                check(i * n_tv + j, i * n_tv + j + 1);
            }
            if i + 1 < n_l1 {
                check(i * n_tv + j, (i + 1) * n_tv + j);
            }
        }
    }
    out
}

/// Evaluates the full grid, `lambda_l1` major. Points run in parallel.
/// Weights are sorted ascending so that the RSS check follows growing weights.
pub fn sweep(problem: &Problem, lambda_l1: &[f64], lambda_tv: &[f64], opts: &SweepOptions) -> Result<SweepResult> {
    if lambda_l1.is_empty() || lambda_tv.is_empty() {
        return Err(Error::invalid("lambda grid", "both axes need at least one value"));
    }
    let mut l1 = lambda_l1.to_vec();
    let mut tv = lambda_tv.to_vec();
    l1.sort_by(f64::total_cmp);
    tv.sort_by(f64::total_cmp);
    let weights: Vec<RegWeights> = l1
        .iter()
        .flat_map(|&a| tv.iter().map(move |&b| RegWeights::new(a, b)))
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = weights.par_iter().map(|w| evaluate_point(problem, w, opts).0).collect();
    let mut result = SweepResult {
        rss_violations: rss_violations(&rows, l1.len(), tv.len(), 1e-8),
        rows,
        n_l1: l1.len(),
        n_tv: tv.len(),
    };
    if let Some(best) = result.argmin_approx() {
        result.rows[best].best = "*".into();
    }
    Ok(result)
}

/// Writes `rows` as CSV, preceded by `# `-comment lines from `header`.
pub fn write_rows_csv(path: &Path, rows: &[SweepRow], header: &str) -> Result<()> {
    let mut buf = Vec::new();
    for line in header.lines() {
        writeln!(buf, "# {line}").expect("write to vec");
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
    Ok(rows)
}

fn fmt_val(v: f64, err: f64) -> String {
    if !v.is_finite() {
        return "-".into();
    }
    if err.is_finite() {
        format!("{v:.4}({err:.4})")
    } else {
        format!("{v:.4}")
    }
}

/// Aligned text table; the best row (by approximate CVE) is marked `*`.
pub fn render_table(rows: &[SweepRow]) -> String {
    let header = [
        "", "lambda_l1", "lambda_tv", "approx CVE", "k-fold CVE", "LOO CVE", "rss", "dof", "clusters", "killed", "div", "status",
    ];
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.cve_approx_mean.is_finite())
        .min_by(|a, b| a.1.cve_approx_mean.total_cmp(&b.1.cve_approx_mean))
        .map(|(i, _)| i);
    let body: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                if Some(i) == best { "*".into() } else { String::new() },
                format!("{}", r.lambda_l1),
                format!("{}", r.lambda_tv),
                fmt_val(r.cve_approx_mean, r.cve_approx_stderr),
                fmt_val(r.cve_kfold_mean, r.cve_kfold_stderr),
                fmt_val(r.cve_loo_mean, r.cve_loo_stderr),
                format!("{:.4}", r.rss),
                r.dof.to_string(),
                r.n_clusters.to_string(),
                r.n_killed.to_string(),
                r.n_divergent_factors.to_string(),
                if !r.status.is_empty() {
                    r.status.clone()
                } else if !r.converged {
                    "not converged".into()
                } else {
                    String::new()
                },
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<String>| {
        let text: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", text.join("  ").trim_end());
    };
    line(header.iter().map(|s| s.to_string()).collect());
    for row in body {
        line(row);
    }
    out
}

/// Approximate CVE and dof at one `(delta, theta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityRow {
    pub delta: f64,
    pub theta: f64,
    pub cve_mean: f64,
    pub dof: usize,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sensitivity {
    pub by_delta: Vec<SensitivityRow>,
    pub by_theta: Vec<SensitivityRow>,
}

/// `(max - min) / min` of the finite values.
pub fn relative_spread(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        f64::NAN
    } else if hi == lo {
        0.0
    } else {
        (hi - lo) / lo
    }
}

impl Sensitivity {
    pub fn delta_spread(&self) -> f64 {
        relative_spread(self.by_delta.iter().map(|r| r.cve_mean))
    }

    pub fn theta_spread(&self) -> f64 {
        relative_spread(self.by_theta.iter().map(|r| r.cve_mean))
    }

    /// dof never grows as theta grows (rows sorted by theta).
    pub fn dof_monotone(&self) -> bool {
        self.by_theta.windows(2).all(|w| w[1].dof <= w[0].dof)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (title, rows, spread) in [
            ("delta sweep", &self.by_delta, self.delta_spread()),
            ("theta sweep", &self.by_theta, self.theta_spread()),
        ] {
            let _ = writeln!(out, "{title} (relative spread {spread:.4})");
            let _ = writeln!(out, "{:>10}  {:>10}  {:>12}  {:>5}", "delta", "theta", "approx CVE", "dof");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{:>10.1e}  {:>10.1e}  {:>12.6}  {:>5}  {}",
                    r.delta, r.theta, r.cve_mean, r.dof, r.status
                );
            }
        }
        let _ = writeln!(out, "dof non-increasing in theta: {}", self.dof_monotone());
        out
    }
}

/// Reruns the approximation at `x_hat` over `deltas` (with `base.theta`) and
/// over `thetas` (with `base.delta`).
pub fn sensitivity(
    problem: &Problem,
    x_hat: &[f64],
    w: &RegWeights,
    base: &SoftParams,
    deltas: &[f64],
    thetas: &[f64],
    looe: &LooeConfig,
) -> Sensitivity {
    let run = |delta: f64, theta: f64| {
        let res = SoftParams::new(delta, theta).and_then(|soft| approx_looe(problem, x_hat, w, &soft, looe));
        match res {
            Ok(r) => SensitivityRow {
                delta,
                theta,
                cve_mean: r.per_sample_mean,
                dof: r.dof,
                status: String::new(),
            },
            Err(e) => SensitivityRow {
                delta,
                theta,
                cve_mean: f64::NAN,
                dof: 0,
                status: e.to_string(),
            },
        }
    };
    let mut thetas = thetas.to_vec();
    thetas.sort_by(f64::total_cmp);
    Sensitivity {
        by_delta: deltas.iter().map(|&d| run(d, base.theta)).collect(),
        by_theta: thetas.iter().map(|&t| run(base.delta, t)).collect(),
    }
}
