use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tvcv::config::RunConfig;
use tvcv::cv::{kfold_cv, literal_loo, FoldPlan};
use tvcv::datagen::synthesize;
use tvcv::io::{read_matrix, read_vector, write_matrix, write_vector};
use tvcv::sweep::{read_rows_csv, render_table, sensitivity, sweep, write_rows_csv, SweepOptions, SweepRow};
use tvcv::{approx_looe, build_grid, solve, Error, Problem, RegWeights, Result, Solution};

/// l1 + TV penalized regression with approximate leave-one-out CV.
#[derive(Parser, Debug)]
#[command(name = "tvcv", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated lambda_l1 values
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    lambda_l1: Option<Vec<f64>>,
    /// Comma-separated lambda_tv values
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    lambda_tv: Option<Vec<f64>>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Sets every generator seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory written by `gen`
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Add a small diagonal shift to the merged Hessian
    #[arg(long, global = true)]
    jitter: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate an image, a partial-Fourier operator and noisy data
    Gen,
    /// Solve at one (lambda_l1, lambda_tv) pair
    Solve,
    /// Cross-validation error at each grid point
    Cve {
        #[arg(long, value_enum, default_value_t = Mode::Approx)]
        mode: Mode,
        /// Use this solution instead of solving (single grid point only)
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Approximate and k-fold CVE over the lambda grid
    Sweep {
        /// Also run literal leave-one-out at every point
        #[arg(long)]
        loo: bool,
        /// Skip k-fold CV
        #[arg(long)]
        no_kfold: bool,
    },
    /// Render a sweep or cve CSV as a table
    Report {
        #[arg(long)]
        csv: PathBuf,
        /// Rerun the approximation over the configured delta and theta lists
        /// at the best row
        #[arg(long)]
        sensitivity: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Approx,
    Kfold,
    Loo,
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
    set("seed", cli.seed.map(|s| s.to_string()))?;
    set("lambda_l1", cli.lambda_l1.as_deref().map(join))?;
    set("lambda_tv", cli.lambda_tv.as_deref().map(join))?;
    set("delta", cli.delta.map(|v| v.to_string()))?;
    set("theta", cli.theta.map(|v| v.to_string()))?;
    set("folds", cli.folds.map(|v| v.to_string()))?;
    set("out", cli.out.as_ref().map(|v| v.display().to_string()))?;
    set("data", cli.data.as_ref().map(|v| v.display().to_string()))?;
    set("jobs", cli.jobs.map(|v| v.to_string()))?;
    if cli.jitter {
        cfg.looe.jitter = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn cmd_gen(cfg: &RunConfig) -> Result<bool> {
    let d = synthesize(&cfg.scene, &cfg.sampling, cfg.snr, cfg.unit_noise, cfg.noise_seed)?;
    ensure_dir(&cfg.out)?;
    write_matrix(cfg.out.join("A.bin"), &d.a)?;
    write_vector(cfg.out.join("y.bin"), d.y.as_slice())?;
    write_vector(cfg.out.join("x0.bin"), &d.x0)?;
    let freqs: Vec<String> = d.frequencies.iter().map(|(u, v)| format!("{u}:{v}")).collect();
    let manifest = format!(
        "{}# sigma = {}\n# frequencies = {}\n",
        cfg.echo(""),
        d.sigma,
        freqs.join(" ")
    );
    write_text(&cfg.out.join("manifest.txt"), &manifest)?;
    println!(
        "wrote {}: A {}x{}, sigma {:.6}, flux {:.6}",
        cfg.out.display(),
        d.a.nrows(),
        d.a.ncols(),
        d.sigma,
        d.x0.iter().sum::<f64>()
    );
    Ok(true)
}

/// Grid shape recorded by `gen`, falling back to the run configuration.
fn grid_shape(cfg: &RunConfig) -> (usize, usize) {
    let Ok(text) = fs::read_to_string(cfg.data.join("manifest.txt")) else {
        return (cfg.scene.rows, cfg.scene.cols);
    };
    let mut m = RunConfig::default();
    let rows_cols: String = text
        .lines()
        .filter(|l| l.starts_with("rows") || l.starts_with("cols"))
        .map(|l| format!("{l}\n"))
        .collect();
    match m.apply_text(&rows_cols) {
        Ok(()) => (m.scene.rows, m.scene.cols),
        Err(_) => (cfg.scene.rows, cfg.scene.cols),
    }
}

fn load_problem(cfg: &RunConfig) -> Result<Problem> {
    let a = read_matrix(cfg.data.join("A.bin"))?;
    let y = read_vector(cfg.data.join("y.bin"))?;
    let (rows, cols) = grid_shape(cfg);
    if rows * cols != a.ncols() {
        return Err(Error::Config(format!(
            "A has {} columns but the grid is {rows}x{cols}; set rows and cols",
            a.ncols()
        )));
    }
    Problem::new(a, y, build_grid(rows, cols)?, cfg.variant)
}

fn single_weights(cfg: &RunConfig) -> Result<RegWeights> {
    match (cfg.lambda_l1.as_slice(), cfg.lambda_tv.as_slice()) {
        ([l1], [tv]) => RegWeights::new(*l1, *tv),
        _ => Err(Error::Config("need exactly one --lambda-l1 and one --lambda-tv value".into())),
    }
}

fn cmd_solve(cfg: &RunConfig) -> Result<bool> {
    let p = load_problem(cfg)?;
    let w = single_weights(cfg)?;
    let sol = solve(&p, &w, &cfg.solver)?;
    ensure_dir(&cfg.out)?;
    write_vector(cfg.out.join("x_hat.bin"), &sol.x_hat)?;
    let mut trace = cfg.echo("# ");
    trace.push_str("iteration,objective\n");
    for (k, f) in sol.objective_trace.iter().enumerate() {
        trace.push_str(&format!("{k},{f}\n"));
    }
    write_text(&cfg.out.join("trace.csv"), &trace)?;
    report_solution(&p, &sol);
    if !sol.converged {
        log::warn!("solver stopped after {} iterations without converging", sol.iters);
    }
    Ok(sol.converged)
}

fn report_solution(p: &Problem, sol: &Solution) {
    let nnz = sol.x_hat.iter().filter(|v| **v != 0.0).count();
    println!(
        "objective {:.12e}  rss {:.6e}  nonzero {nnz}/{}  iterations {}  converged {}",
        sol.objective(),
        p.rss(&sol.x_hat),
        p.n(),
        sol.iters,
        sol.converged
    );
}

fn quantiles(v: &[f64]) -> [f64; 5] {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return [f64::NAN; 5];
    }
    let at = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
    [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]
}

fn cmd_cve(cfg: &RunConfig, mode: Mode, solution: Option<&Path>) -> Result<bool> {
    let p = load_problem(cfg)?;
    let (l1s, tvs) = cfg.lambda_grids(p.m());
    if solution.is_some() && l1s.len() * tvs.len() != 1 {
        return Err(Error::Config("--solution needs a single grid point".into()));
    }
    let mut rows = Vec::new();
    let mut all_ok = true;
    for &l1 in &l1s {
        for &tv in &tvs {
            let w = RegWeights::new(l1, tv)?;
            let mut row = SweepRow::empty(&w);
            let sol = match solution {
                Some(path) => {
                    let x = read_vector(path)?;
                    Solution {
                        objective_trace: vec![tvcv::objective(x.as_slice(), &p, &w)?],
                        x_hat: x.as_slice().to_vec(),
                        converged: true,
                        iters: 0,
                    }
                }
                None => solve(&p, &w, &cfg.solver)?,
            };
            row.converged = sol.converged;
            row.rss = p.rss(&sol.x_hat);
            match mode {
                Mode::Approx => {
                    let r = approx_looe(&p, &sol.x_hat, &w, &cfg.soft, &cfg.looe).map_err(|e| match e {
                        Error::SingularHessian { .. } => Error::Config(format!(
                            "{e} at delta = {}, theta = {}; try a larger delta or --jitter",
                            cfg.soft.delta, cfg.soft.theta
                        )),
                        other => other,
                    })?;
                    row.cve_approx_total = r.total;
                    row.cve_approx_mean = r.per_sample_mean;
                    row.cve_approx_stderr = r.stderr;
                    row.dof = r.dof;
                    row.n_clusters = r.n_clusters;
                    row.n_isolated = r.n_isolated;
                    row.n_killed = r.n_killed;
                    row.n_divergent_factors = r.diagnostics.divergent.len();
                    if !r.diagnostics.divergent.is_empty() {
                        log::warn!(
                            "{} factors at or below {} (samples {:?}) left out",
                            r.diagnostics.divergent.len(),
                            cfg.looe.factor_floor,
                            r.diagnostics.divergent
                        );
                    }
                    let q = quantiles(&r.factors);
                    println!(
                        "lambda_l1 {l1} lambda_tv {tv}: approx total {:.6e} mean {:.6e} ({:.2e}) dof {} clusters {} killed {}",
                        r.total, r.per_sample_mean, r.stderr, r.dof, r.n_clusters, r.n_killed
                    );
                    println!(
                        "  factors min {:.4} q25 {:.4} median {:.4} q75 {:.4} max {:.4}, {} below floor",
                        q[0],
                        q[1],
                        q[2],
                        q[3],
                        q[4],
                        r.diagnostics.divergent.len()
                    );
                }
                Mode::Kfold | Mode::Loo => {
                    let cv = if mode == Mode::Kfold {
                        let plan = FoldPlan::random(p.m(), cfg.folds, cfg.fold_seed)?;
                        kfold_cv(&p, &w, &plan, &cfg.solver, Some(&sol.x_hat))?
                    } else {
                        literal_loo(&p, &w, &cfg.solver, Some(&sol.x_hat))?
                    };
                    if !cv.unconverged.is_empty() {
                        log::warn!("folds {:?} did not converge", cv.unconverged);
                        row.converged = false;
                    }
                    if mode == Mode::Kfold {
                        row.cve_kfold_mean = cv.per_sample_mean;
                        row.cve_kfold_stderr = cv.stderr;
                    } else {
                        row.cve_loo_mean = cv.per_sample_mean;
                        row.cve_loo_stderr = cv.stderr;
                    }
                    println!(
                        "lambda_l1 {l1} lambda_tv {tv}: {} total {:.6e} mean {:.6e} ({:.2e})",
                        if mode == Mode::Kfold { "k-fold" } else { "loo" },
                        cv.total,
                        cv.per_sample_mean,
                        cv.stderr
                    );
                }
            }
            all_ok &= row.converged;
            rows.push(row);
        }
    }
    ensure_dir(&cfg.out)?;
    let name = match mode {
        Mode::Approx => "cve_approx.csv",
        Mode::Kfold => "cve_kfold.csv",
        Mode::Loo => "cve_loo.csv",
    };
    write_rows_csv(&cfg.out.join(name), &rows, &cfg.echo(""))?;
    Ok(all_ok)
}

fn cmd_sweep(cfg: &RunConfig, loo: bool, no_kfold: bool) -> Result<bool> {
    let p = load_problem(cfg)?;
    let (l1s, tvs) = cfg.lambda_grids(p.m());
    let opts = SweepOptions {
        solver: cfg.solver.clone(),
        soft: cfg.soft,
        looe: cfg.looe.clone(),
        folds: if no_kfold {
            None
        } else {
            Some(FoldPlan::random(p.m(), cfg.folds, cfg.fold_seed)?)
        },
        loo,
    };
    let res = sweep(&p, &l1s, &tvs, &opts)?;
    let fmt_idx = |i: Option<usize>| i.map_or("-".to_string(), |i| i.to_string());
    let summary = format!(
        "argmin approx = {}\nargmin kfold = {}\nrss monotone = {}\n",
        fmt_idx(res.argmin_approx()),
        fmt_idx(res.argmin_kfold()),
        res.rss_monotone()
    );
    ensure_dir(&cfg.out)?;
    write_rows_csv(&cfg.out.join("sweep.csv"), &res.rows, &format!("{}{summary}", cfg.echo("")))?;
    print!("{}", render_table(&res.rows));
    print!("{summary}");
    for &(a, b) in &res.rss_violations {
        log::warn!("rss decreased from row {a} to row {b}");
    }
    let failed: Vec<usize> = (0..res.rows.len()).filter(|&i| !res.rows[i].ok()).collect();
    if !failed.is_empty() {
        log::warn!("rows {failed:?} failed or did not converge");
    }
    Ok(failed.is_empty())
}

fn cmd_report(cfg: &RunConfig, csv: &Path, with_sensitivity: bool) -> Result<bool> {
    let rows = read_rows_csv(csv)?;
    print!("{}", render_table(&rows));
    if !with_sensitivity {
        return Ok(true);
    }
    let best = rows
        .iter()
        .filter(|r| r.cve_approx_mean.is_finite())
        .min_by(|a, b| a.cve_approx_mean.total_cmp(&b.cve_approx_mean))
        .ok_or_else(|| Error::Config("no row with an approximate CVE to analyse".into()))?;
    let p = load_problem(cfg)?;
    let w = RegWeights::new(best.lambda_l1, best.lambda_tv)?;
    let sol = solve(&p, &w, &cfg.solver)?;
    println!("sensitivity at lambda_l1 = {}, lambda_tv = {}", w.lambda_l1, w.lambda_tv);
    let s = sensitivity(&p, &sol.x_hat, &w, &cfg.soft, &cfg.deltas, &cfg.thetas, &cfg.looe);
    print!("{}", s.render());
    Ok(sol.converged)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = effective_config(cli)?;
    if cfg.jobs > 0 {
        // only fails if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    log::info!("effective configuration:\n{}", cfg.echo("  "));
    match &cli.cmd {
        Cmd::Gen => cmd_gen(&cfg),
        Cmd::Solve => cmd_solve(&cfg),
        Cmd::Cve { mode, solution } => cmd_cve(&cfg, *mode, solution.as_deref()),
        Cmd::Sweep { loo, no_kfold } => cmd_sweep(&cfg, *loo, *no_kfold),
        Cmd::Report { csv, sensitivity } => cmd_report(&cfg, csv, *sensitivity),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more solves did not converge");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["tvcv", "sweep", "--lambda-l1", "1,2", "--delta", "0.001", "--seed", "4"]);
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.lambda_l1, vec![1.0, 2.0]);
        assert_eq!(cfg.soft.delta, 1e-3);
        assert_eq!(cfg.scene.seed, 4);
    }

    #[test]
    fn quantile_summary() {
        assert_eq!(quantiles(&[3.0, 1.0, 2.0, 5.0, 4.0]), [1.0, 2.0, 3.0, 4.0, 5.0]);
    }
}
