//! Run configuration as `key = value` lines.
//!
//! Blank lines and `#` comments are ignored, unknown or repeated keys are
//! errors. [`RunConfig::echo`] prints every key with its effective value, and
//! parsing that text back yields the same configuration.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::{SamplingSpec, SceneKind, SceneSpec};
use crate::error::{Error, Result};
use crate::grid::{SoftParams, TvVariant};
use crate::looe::{DivergentPolicy, LooeConfig};
use crate::solver::SolverConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub sampling: SamplingSpec,
    pub snr: f64,
    /// Rescale the image so the noise level is one (`flux` is then ignored).
    pub unit_noise: bool,
    pub noise_seed: u64,
    pub variant: TvVariant,
    pub solver: SolverConfig,
    pub soft: SoftParams,
    pub looe: LooeConfig,
    pub folds: usize,
    pub fold_seed: u64,
    /// Empty means `(M/2) * {1, 10, 100, 1000}`.
    pub lambda_l1: Vec<f64>,
    /// Empty means `(M/8) * {1, 10, 100, 1000}`.
    pub lambda_tv: Vec<f64>,
    /// Sensitivity lists for `report`.
    pub deltas: Vec<f64>,
    pub thetas: Vec<f64>,
    /// Directory holding `A.bin`, `y.bin`, `x0.bin`.
    pub data: PathBuf,
    pub out: PathBuf,
    /// Worker threads; 0 means all available.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneSpec {
                kind: SceneKind::Ring,
                ..SceneSpec::default()
            },
            sampling: SamplingSpec::default(),
            snr: 10.0,
            unit_noise: true,
            noise_seed: 1000,
            variant: TvVariant::Isotropic,
            solver: SolverConfig::default(),
            soft: SoftParams::default(),
            looe: LooeConfig::default(),
            folds: 10,
            fold_seed: 0,
            lambda_l1: Vec::new(),
            lambda_tv: Vec::new(),
            deltas: vec![1e-6, 1e-5, 1e-4, 1e-3],
            thetas: vec![1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6],
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            jobs: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn policy_str(p: DivergentPolicy) -> &'static str {
    match p {
        DivergentPolicy::Exclude => "exclude",
        DivergentPolicy::Clamp => "clamp",
    }
}

impl RunConfig {
    /// Sets all generator seeds from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.sampling.seed = seed;
        self.noise_seed = seed + 1000;
        self.fold_seed = seed;
        self.solver.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "scene" => self.scene.kind = parse(key, v)?,
            "rows" => self.scene.rows = parse(key, v)?,
            "cols" => self.scene.cols = parse(key, v)?,
            "components" => self.scene.components = parse(key, v)?,
            "scene_seed" => self.scene.seed = parse(key, v)?,
            "flux" => self.scene.flux = parse(key, v)?,
            "m_complex" => self.sampling.m_complex = parse(key, v)?,
            "sampling" => self.sampling.scheme = parse(key, v)?,
            "sampling_seed" => self.sampling.seed = parse(key, v)?,
            "include_zero_frequency" => self.sampling.include_zero_frequency = parse(key, v)?,
            "snr" => self.snr = parse(key, v)?,
            "unit_noise" => self.unit_noise = parse(key, v)?,
            "noise_seed" => self.noise_seed = parse(key, v)?,
            "tv" => self.variant = parse(key, v)?,
            "max_outer_iters" => self.solver.max_outer_iters = parse(key, v)?,
            "rel_tol" => self.solver.rel_tol = parse(key, v)?,
            "inner_prox_iters" => self.solver.inner_prox_iters = parse(key, v)?,
            "lipschitz_margin" => self.solver.lipschitz_margin = parse(key, v)?,
            "solver_seed" => self.solver.seed = parse(key, v)?,
            "refine" => self.solver.refine = parse(key, v)?,
            "refine_taus" => self.solver.refine_taus = parse_list(key, v)?,
            "delta" => self.soft.delta = parse(key, v)?,
            "theta" => self.soft.theta = parse(key, v)?,
            "factor_floor" => self.looe.factor_floor = parse(key, v)?,
            "divergent" => {
                self.looe.divergent = match v {
                    "exclude" => DivergentPolicy::Exclude,
                    "clamp" => DivergentPolicy::Clamp,
                    _ => return Err(Error::Config(format!("divergent = {v}: expected exclude or clamp"))),
                }
            }
            "jitter" => self.looe.jitter = parse(key, v)?,
            "eps_active" => self.looe.eps_active = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "fold_seed" => self.fold_seed = parse(key, v)?,
            "lambda_l1" => self.lambda_l1 = parse_list(key, v)?,
            "lambda_tv" => self.lambda_tv = parse_list(key, v)?,
            "deltas" => self.deltas = parse_list(key, v)?,
            "thetas" => self.thetas = parse_list(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "jobs" => self.jobs = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", n + 1)));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.soft.validate()?;
        if !(self.snr > 0.0) {
            return Err(Error::Config("snr must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.lambda_l1.iter().chain(&self.lambda_tv).any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("lambda values must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("scene", self.scene.kind.to_string()),
            ("rows", self.scene.rows.to_string()),
            ("cols", self.scene.cols.to_string()),
            ("components", self.scene.components.to_string()),
            ("scene_seed", self.scene.seed.to_string()),
            ("flux", self.scene.flux.to_string()),
            ("m_complex", self.sampling.m_complex.to_string()),
            ("sampling", self.sampling.scheme.to_string()),
            ("sampling_seed", self.sampling.seed.to_string()),
            ("include_zero_frequency", self.sampling.include_zero_frequency.to_string()),
            ("snr", self.snr.to_string()),
            ("unit_noise", self.unit_noise.to_string()),
            ("noise_seed", self.noise_seed.to_string()),
            ("tv", self.variant.to_string()),
            ("max_outer_iters", self.solver.max_outer_iters.to_string()),
            ("rel_tol", self.solver.rel_tol.to_string()),
            ("inner_prox_iters", self.solver.inner_prox_iters.to_string()),
            ("lipschitz_margin", self.solver.lipschitz_margin.to_string()),
            ("solver_seed", self.solver.seed.to_string()),
            ("refine", self.solver.refine.to_string()),
            ("refine_taus", list(&self.solver.refine_taus)),
            ("delta", self.soft.delta.to_string()),
            ("theta", self.soft.theta.to_string()),
            ("factor_floor", self.looe.factor_floor.to_string()),
            ("divergent", policy_str(self.looe.divergent).to_string()),
            ("jitter", self.looe.jitter.to_string()),
            ("eps_active", self.looe.eps_active.to_string()),
            ("folds", self.folds.to_string()),
            ("fold_seed", self.fold_seed.to_string()),
            ("lambda_l1", list(&self.lambda_l1)),
            ("lambda_tv", list(&self.lambda_tv)),
            ("deltas", list(&self.deltas)),
            ("thetas", list(&self.thetas)),
            ("data", self.data.display().to_string()),
            ("out", self.out.display().to_string()),
            ("jobs", self.jobs.to_string()),
        ]
    }

    /// `key = value` lines, each prefixed with `prefix`.
    pub fn echo(&self, prefix: &str) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{prefix}{k} = {v}\n"))
            .collect()
    }

    /// The default grids `(M/2) * {1, 10, 100, 1000}` and
    /// `(M/8) * {1, 10, 100, 1000}` unless lists were given.
    pub fn lambda_grids(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        let scale = |s: f64| [1.0, 10.0, 100.0, 1000.0].iter().map(|k| k * s).collect::<Vec<_>>();
        let l1 = if self.lambda_l1.is_empty() { scale(m as f64 / 2.0) } else { self.lambda_l1.clone() };
        let tv = if self.lambda_tv.is_empty() { scale(m as f64 / 8.0) } else { self.lambda_tv.clone() };
        (l1, tv)
    }
}
