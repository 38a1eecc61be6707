//! Synthetic imaging problems: ground-truth scenes, partial-Fourier
//! measurement operators with stacked real/imaginary rows, and noisy
//! observations.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, Error, Result};
use crate::grid::GridGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SceneKind {
    #[default]
    Blobs,
    Ring,
    PointSources,
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::Blobs => "blobs",
            SceneKind::Ring => "ring",
            SceneKind::PointSources => "point-sources",
        })
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SceneKind::Blobs),
            "ring" => Ok(SceneKind::Ring),
            "point-sources" | "points" => Ok(SceneKind::PointSources),
            other => Err(Error::invalid("scene", format!("unknown scene kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub rows: usize,
    pub cols: usize,
    pub components: usize,
    pub seed: u64,
    /// Total flux (sum of pixel values) of the generated image.
    pub flux: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            kind: SceneKind::Blobs,
            rows: 8,
            cols: 8,
            components: 3,
            seed: 0,
            flux: 100.0,
        }
    }
}

fn gaussian(d2: f64, width: f64) -> f64 {
    (-0.5 * d2 / (width * width)).exp()
}

/// Generates a non-negative image whose pixel values sum to `spec.flux`.
/// Pixels below a thousandth of the peak are set to exactly zero.
pub fn make_image(spec: &SceneSpec) -> Result<Vec<f64>> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(Error::invalid("scene", "image needs at least one pixel"));
    }
    if !(spec.flux > 0.0 && spec.flux.is_finite()) {
        return Err(Error::invalid("flux", "must be positive"));
    }
    let (rows, cols) = (spec.rows, spec.cols);
    let n = rows * cols;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img = vec![0.0; n];
    let count = spec.components.max(1);
    match spec.kind {
        SceneKind::PointSources => {
            let count = count.min(n);
            for i in sample(&mut rng, n, count) {
                img[i] = rng.random_range(0.5..1.5);
            }
        }
        SceneKind::Blobs => {
            let scale = rows.min(cols) as f64;
            for _ in 0..count {
                let cr = rng.random_range(0.0..rows as f64);
                let cc = rng.random_range(0.0..cols as f64);
                let w = rng.random_range(0.08..0.2) * scale;
                let amp = rng.random_range(0.5..1.5);
                for (i, v) in img.iter_mut().enumerate() {
                    let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                    *v += amp * gaussian((r - cr).powi(2) + (c - cc).powi(2), w);
                }
            }
        }
        SceneKind::Ring => {
            let cr = 0.5 * (rows as f64 - 1.0) + rng.random_range(-0.5..0.5);
            let cc = 0.5 * (cols as f64 - 1.0) + rng.random_range(-0.5..0.5);
            let radius = 0.3 * rows.min(cols) as f64;
            let width = (0.25 * radius).max(0.5);
            // brighter on one side, like a Doppler-boosted photon ring
            let tilt = rng.random_range(0.0..2.0 * PI);
            for (i, v) in img.iter_mut().enumerate() {
                let (dr, dc) = ((i / cols) as f64 - cr, (i % cols) as f64 - cc);
                let rho = (dr * dr + dc * dc).sqrt();
                let phi = dc.atan2(dr);
                let boost = 1.0 + 0.5 * (phi - tilt).cos();
                *v = boost * gaussian((rho - radius).powi(2), width);
            }
        }
    }
    let peak = img.iter().fold(0.0_f64, |m, &v| m.max(v));
    for v in img.iter_mut() {
        if *v < 1e-3 * peak {
            *v = 0.0;
        }
    }
    let total: f64 = img.iter().sum();
    img.iter_mut().for_each(|v| *v *= spec.flux / total);
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplingScheme {
    #[default]
    UniformRandom,
    RadialTracks,
}

impl fmt::Display for SamplingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingScheme::UniformRandom => "uniform-random",
            SamplingScheme::RadialTracks => "radial-tracks",
        })
    }
}

impl FromStr for SamplingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-random" | "uniform" => Ok(SamplingScheme::UniformRandom),
            "radial-tracks" | "radial" => Ok(SamplingScheme::RadialTracks),
            other => Err(Error::invalid("sampling", format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSpec {
    /// Number of sampled complex frequencies.
    pub m_complex: usize,
    pub scheme: SamplingScheme,
    pub seed: u64,
    pub include_zero_frequency: bool,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            m_complex: 24,
            scheme: SamplingScheme::UniformRandom,
            seed: 0,
            include_zero_frequency: false,
        }
    }
}

/// Frequency `(u, v)` with `u < rows`, `v < cols`.
pub type Frequency = (usize, usize);

fn conjugate(f: Frequency, rows: usize, cols: usize) -> Frequency {
    ((rows - f.0) % rows, (cols - f.1) % cols)
}

/// One representative of each conjugate pair of frequencies, excluding the
/// self-conjugate ones (zero and Nyquist), whose imaginary rows vanish.
pub fn half_plane_pool(rows: usize, cols: usize) -> Vec<Frequency> {
    let mut pool = Vec::new();
    for u in 0..rows {
        for v in 0..cols {
            let f = (u, v);
            if f < conjugate(f, rows, cols) {
                pool.push(f);
            }
        }
    }
    pool
}

fn canonical(f: Frequency, rows: usize, cols: usize) -> Frequency {
    f.min(conjugate(f, rows, cols))
}

/// Picks the sampled frequencies for `grid`; the zero frequency, when
/// requested, comes first.
pub fn sample_frequencies(grid: &GridGraph, sampling: &SamplingSpec) -> Result<Vec<Frequency>> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let pool = half_plane_pool(rows, cols);
    let zero = usize::from(sampling.include_zero_frequency);
    if sampling.m_complex == 0 || sampling.m_complex > pool.len() + zero {
        return Err(Error::invalid(
            "m_complex",
            format!(
                "{} frequencies requested but a {rows}x{cols} grid offers {} distinct ones",
                sampling.m_complex,
                pool.len() + zero
            ),
        ));
    }
    let want = sampling.m_complex - zero;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut out: Vec<Frequency> = Vec::with_capacity(sampling.m_complex);
    if zero == 1 {
        out.push((0, 0));
    }
    match sampling.scheme {
        SamplingScheme::UniformRandom => {
            let mut picked = sample(&mut rng, pool.len(), want).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|k| pool[k]));
        }
        SamplingScheme::RadialTracks => {
            let tracks = 6;
            let offset = rng.random_range(0.0..PI / tracks as f64);
            let max_r = rows.max(cols) as f64;
            let mut seen: BTreeSet<Frequency> = BTreeSet::new();
            let mut picked = Vec::new();
            let mut radius = 1.0;
            while picked.len() < want && radius <= max_r {
                for k in 0..tracks {
                    let phi = offset + PI * k as f64 / tracks as f64;
                    let u = (radius * phi.cos()).round() as i64;
                    let v = (radius * phi.sin()).round() as i64;
                    let f = (
                        u.rem_euclid(rows as i64) as usize,
                        v.rem_euclid(cols as i64) as usize,
                    );
                    if f == conjugate(f, rows, cols) {
                        continue;
                    }
                    let c = canonical(f, rows, cols);
                    if picked.len() < want && seen.insert(c) {
                        picked.push(c);
                    }
                }
                radius += 1.0;
            }
            // tracks exhausted: fill from the remaining pool
            if picked.len() < want {
                let rest: Vec<Frequency> = pool.iter().copied().filter(|f| !seen.contains(f)).collect();
                let extra = sample(&mut rng, rest.len(), want - picked.len());
                picked.extend(extra.into_iter().map(|k| rest[k]));
            }
            out.extend(picked);
        }
    }
    Ok(out)
}

/// Real measurement matrix for the given frequencies: for each `(u, v)` the
/// rows `Re` and `Im` of `exp(-2 pi i (u r / rows + v c / cols))` over pixels
/// `(r, c)`; the zero frequency contributes its real row only.
pub fn fourier_operator(grid: &GridGraph, freqs: &[Frequency]) -> Result<DMatrix<f64>> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut seen = BTreeSet::new();
    let mut m = 0;
    for &f in freqs {
        if f.0 >= rows || f.1 >= cols {
            return Err(Error::invalid("frequency", format!("{f:?} outside the {rows}x{cols} grid")));
        }
        if !seen.insert(canonical(f, rows, cols)) {
            return Err(Error::DuplicateFrequency(f.0, f.1));
        }
        m += if f == (0, 0) { 1 } else { 2 };
    }
    let n = grid.len();
    let mut a = DMatrix::<f64>::zeros(m, n);
    let mut row = 0;
    for &(u, v) in freqs {
        for p in 0..n {
            let (r, c) = (p / cols, p % cols);
            // reduce the phase exactly before converting to radians
            let num = (u * r * cols + v * c * rows) % (rows * cols);
            let phase = -2.0 * PI * num as f64 / (rows * cols) as f64;
            a[(row, p)] = phase.cos();
            if (u, v) != (0, 0) {
                a[(row + 1, p)] = phase.sin();
            }
        }
        row += if (u, v) == (0, 0) { 1 } else { 2 };
    }
    Ok(a)
}

pub fn make_fourier_operator(grid: &GridGraph, sampling: &SamplingSpec) -> Result<DMatrix<f64>> {
    fourier_operator(grid, &sample_frequencies(grid, sampling)?)
}

/// `y = A x0 + xi` with `xi ~ N(0, sigma^2)` i.i.d.
pub fn observe(a: &DMatrix<f64>, x0: &[f64], sigma: f64, seed: u64) -> Result<DVector<f64>> {
    check_len("x0 vs columns of A", a.ncols(), x0.len())?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", format!("{sigma} is not a non-negative number")));
    }
    let mut y = a * DVector::from_column_slice(x0);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma checked");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(y)
}

/// Noise level giving `rms(A x0) / sigma = snr`.
pub fn sigma_for_snr(a: &DMatrix<f64>, x0: &[f64], snr: f64) -> f64 {
    let clean = a * DVector::from_column_slice(x0);
    (clean.norm_squared() / clean.len() as f64).sqrt() / snr
}

/// A generated problem instance.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x0: Vec<f64>,
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma: f64,
    pub frequencies: Vec<Frequency>,
}

/// Image, operator and noisy data with `rms(A x0) / sigma = snr`. With
/// `unit_noise` the image is rescaled so that `sigma = 1`.
pub fn synthesize(
    scene: &SceneSpec,
    sampling: &SamplingSpec,
    snr: f64,
    unit_noise: bool,
    noise_seed: u64,
) -> Result<Dataset> {
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(Error::invalid("snr", "must be positive"));
    }
    let grid = GridGraph::new(scene.rows, scene.cols)?;
    let mut x0 = make_image(scene)?;
    let frequencies = sample_frequencies(&grid, sampling)?;
    let a = fourier_operator(&grid, &frequencies)?;
    let mut sigma = sigma_for_snr(&a, &x0, snr);
    if unit_noise && sigma > 0.0 {
        x0.iter_mut().for_each(|v| *v /= sigma);
        sigma = 1.0;
    }
    let y = observe(&a, &x0, sigma, noise_seed)?;
    Ok(Dataset {
        x0,
        a,
        y,
        sigma,
        frequencies,
    })
}
