//! Pixel lattice and the total-variation penalty.
//!
//! Each pixel `i` owns one TV term built from the differences to its right and
//! down neighbours. Pixels in the bottom row only see the right neighbour,
//! pixels in the rightmost column only see the down neighbour, and the
//! bottom-right corner owns no term at all.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};

/// Lattice neighbour structure of a `rows x cols` image stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridGraph {
    rows: usize,
    cols: usize,
    neighbors: Vec<Vec<usize>>,
    tv_terms: Vec<usize>,
}

impl GridGraph {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        build_grid(rows, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Neighbours of pixel `i` in (right, down) order.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Pixels owning a TV term, in increasing order.
    pub fn tv_terms(&self) -> &[usize] {
        &self.tv_terms
    }

    /// Every (pixel, neighbour) pair, i.e. the edges of the lattice.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tv_terms
            .iter()
            .flat_map(move |&i| self.neighbors[i].iter().map(move |&j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Pixels touched by the term owned by `i`: `i` first, then its neighbours.
    pub fn term_pixels(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(i).chain(self.neighbors[i].iter().copied())
    }
}

/// Builds the right/down neighbour lattice.
pub fn build_grid(rows: usize, cols: usize) -> Result<GridGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("grid", format!("{rows}x{cols} has no pixels")));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or(Error::SizeOverflow { rows, cols })?;
    let mut neighbors = Vec::with_capacity(n);
    let mut tv_terms = Vec::with_capacity(n - 1);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let mut nb = Vec::with_capacity(2);
            if c + 1 < cols {
                nb.push(i + 1);
            }
            if r + 1 < rows {
                nb.push(i + cols);
            }
            if !nb.is_empty() {
                tv_terms.push(i);
            }
            neighbors.push(nb);
        }
    }
    Ok(GridGraph {
        rows,
        cols,
        neighbors,
        tv_terms,
    })
}

/// Which total-variation penalty is in use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum TvVariant {
    /// Euclidean norm of the (right, down) differences per pixel.
    #[default]
    Isotropic,
    /// Sum of absolute differences over lattice edges.
    Anisotropic,
    /// Sum of squared differences over lattice edges.
    Square,
}

impl TvVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            TvVariant::Isotropic => "isotropic",
            TvVariant::Anisotropic => "anisotropic",
            TvVariant::Square => "square",
        }
    }
}

impl fmt::Display for TvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "isotropic" | "iso" => Ok(TvVariant::Isotropic),
            "anisotropic" | "aniso" => Ok(TvVariant::Anisotropic),
            "square" | "sq" => Ok(TvVariant::Square),
            other => Err(Error::invalid("variant", format!("unknown TV variant `{other}`"))),
        }
    }
}

/// Softening constant and link threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftParams {
    pub delta: f64,
    pub theta: f64,
}

impl Default for SoftParams {
    fn default() -> Self {
        SoftParams {
            delta: 1e-4,
            theta: 1e-12,
        }
    }
}

impl SoftParams {
    pub fn new(delta: f64, theta: f64) -> Result<Self> {
        let p = SoftParams { delta, theta };
        p.validate()?;
        Ok(p)
    }

    /// Checks `0 < theta < delta`; logs a warning when theta is not well below delta.
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::invalid("theta", format!("{} is not positive", self.theta)));
        }
        if self.theta >= self.delta {
            return Err(Error::invalid(
                "theta",
                format!("theta = {:e} must be smaller than delta = {:e}", self.theta, self.delta),
            ));
        }
        if self.theta >= self.delta / 10.0 {
            log::warn!(
                "theta = {:e} is not much smaller than delta = {:e}; cluster detection may be unreliable",
                self.theta,
                self.delta
            );
        }
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid("delta", format!("{delta} is not positive")));
    }
    Ok(())
}

/// Sum of squared differences of term `i`.
#[inline]
pub(crate) fn term_sq(x: &[f64], g: &GridGraph, i: usize) -> f64 {
    let xi = x[i];
    g.neighbors(i).iter().map(|&j| (x[j] - xi) * (x[j] - xi)).sum()
}

/// Value of the softened term `t_i^delta`.
#[inline]
pub fn term_soft_value(x: &[f64], g: &GridGraph, i: usize, delta: f64) -> f64 {
    (term_sq(x, g, i) + delta * delta).sqrt()
}

pub fn tv_value(x: &[f64], g: &GridGraph, variant: TvVariant) -> Result<f64> {
    check_len("image length", g.len(), x.len())?;
    let v = match variant {
        TvVariant::Isotropic => g.tv_terms().iter().map(|&i| term_sq(x, g, i).sqrt()).sum(),
        TvVariant::Anisotropic => g.edges().map(|(i, j)| (x[j] - x[i]).abs()).sum(),
        TvVariant::Square => g.edges().map(|(i, j)| (x[j] - x[i]).powi(2)).sum(),
    };
    Ok(v)
}

/// Softened isotropic TV, `sum_i sqrt(sum_j (x_j - x_i)^2 + delta^2)`.
pub fn tv_soft_value(x: &[f64], g: &GridGraph, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    check_len("image length", g.len(), x.len())?;
    Ok(g.tv_terms()
        .iter()
        .map(|&i| term_soft_value(x, g, i, delta))
        .sum())
}

/// Adds the gradient of `t_i^delta` to `grad`. With `delta == 0` a vanishing
/// term contributes nothing.
pub(crate) fn add_term_gradient(x: &[f64], g: &GridGraph, i: usize, delta: f64, grad: &mut [f64]) {
    let t = term_soft_value(x, g, i, delta);
    if t == 0.0 {
        return;
    }
    let xi = x[i];
    for &j in g.neighbors(i) {
        let d = (x[j] - xi) / t;
        grad[j] += d;
        grad[i] -= d;
    }
}

pub fn tv_soft_gradient(x: &[f64], g: &GridGraph, delta: f64) -> Result<Vec<f64>> {
    check_delta(delta)?;
    check_len("image length", g.len(), x.len())?;
    let mut grad = vec![0.0; x.len()];
    for &i in g.tv_terms() {
        add_term_gradient(x, g, i, delta, &mut grad);
    }
    Ok(grad)
}

/// Dense second-derivative block of `t_i^delta` over `term_pixels(i)`, as a
/// row-major `k x k` array with `k = 1 + |neighbors(i)|` (at most 3).
pub(crate) fn term_hessian_block(x: &[f64], g: &GridGraph, i: usize, delta: f64) -> ([f64; 9], usize) {
    let nb = g.neighbors(i);
    let k = nb.len() + 1;
    let mut out = [0.0; 9];
    let t2 = term_sq(x, g, i) + delta * delta;
    if t2 == 0.0 {
        return (out, k);
    }
    let t = t2.sqrt();
    let t3 = t2 * t;
    let mut d = [0.0; 2];
    for (a, &j) in nb.iter().enumerate() {
        d[a] = x[j] - x[i];
    }
    // curvature in difference coordinates: (t^2 I - d d^T) / t^3
    let mut m = [[0.0; 2]; 2];
    for a in 0..nb.len() {
        for b in 0..nb.len() {
            let id = if a == b { t2 } else { 0.0 };
            m[a][b] = (id - d[a] * d[b]) / t3;
        }
    }
    // map back through d_a = x_{nb[a]} - x_i
    let mut total = 0.0;
    for a in 0..nb.len() {
        let mut col = 0.0;
        for b in 0..nb.len() {
            out[(a + 1) * k + (b + 1)] = m[a][b];
            col += m[a][b];
            total += m[a][b];
        }
        out[a + 1] = -col;
        out[(a + 1) * k] = -col;
    }
    out[0] = total;
    (out, k)
}

/// Symmetric sparse matrix in coordinate form. Both `(i, j)` and `(j, i)`
/// are stored for off-diagonal entries; duplicates are summed.
#[derive(Clone, Debug, Default)]
pub struct SparseSym {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseSym {
    pub fn new(n: usize) -> Self {
        SparseSym {
            n,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub(crate) fn push(&mut self, i: usize, j: usize, v: f64) {
        self.entries.push((i, j, v));
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, j, a) in &self.entries {
            out[i] += a * v[j];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        self.add_scaled_to(&mut m, 1.0);
        m
    }

    pub fn add_scaled_to(&self, m: &mut DMatrix<f64>, scale: f64) {
        for &(i, j, a) in &self.entries {
            m[(i, j)] += scale * a;
        }
    }

    /// Adds `scale * H[idx, idx]` into `m`, where `pos[i]` is the row of pixel
    /// `i` in `m` (or `None` when the pixel is dropped).
    pub fn add_restricted_to(&self, m: &mut DMatrix<f64>, pos: &[Option<usize>], scale: f64) {
        for &(i, j, a) in &self.entries {
            if let (Some(r), Some(c)) = (pos[i], pos[j]) {
                m[(r, c)] += scale * a;
            }
        }
    }
}

pub(crate) fn push_term_hessian(h: &mut SparseSym, x: &[f64], g: &GridGraph, i: usize, delta: f64) {
    let (block, k) = term_hessian_block(x, g, i, delta);
    let pix: Vec<usize> = g.term_pixels(i).collect();
    for a in 0..k {
        for b in 0..k {
            let v = block[a * k + b];
            if v != 0.0 {
                h.push(pix[a], pix[b], v);
            }
        }
    }
}

/// Hessian of the softened isotropic TV summed over `tv_terms \ exclude`.
pub fn tv_soft_hessian(
    x: &[f64],
    g: &GridGraph,
    delta: f64,
    exclude: &BTreeSet<usize>,
) -> Result<SparseSym> {
    check_delta(delta)?;
    check_len("image length", g.len(), x.len())?;
    if let Some(&bad) = exclude.iter().find(|&&i| i >= g.len() || g.neighbors(i).is_empty()) {
        return Err(Error::invalid("exclude", format!("pixel {bad} owns no TV term")));
    }
    let mut h = SparseSym::new(g.len());
    for &i in g.tv_terms() {
        if !exclude.contains(&i) {
            push_term_hessian(&mut h, x, g, i, delta);
        }
    }
    Ok(h)
}

/// `J` with `T_sq(x) = x^T J x / 2`, i.e. twice the lattice Laplacian.
pub fn square_tv_matrix(g: &GridGraph) -> SparseSym {
    let mut h = SparseSym::new(g.len());
    for (i, j) in g.edges() {
        h.push(i, i, 2.0);
        h.push(j, j, 2.0);
        h.push(i, j, -2.0);
        h.push(j, i, -2.0);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_pixel_grid() {
        let g = build_grid(1, 1).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.neighbors(0).is_empty());
        assert!(g.tv_terms().is_empty());
    }

    #[test]
    fn two_by_two_boundary_rule() {
        let g = build_grid(2, 2).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
        assert_eq!(g.neighbors(1), &[3]);
        assert_eq!(g.neighbors(2), &[3]);
        assert!(g.neighbors(3).is_empty());
        assert_eq!(g.tv_terms(), &[0, 1, 2]);
    }

    #[test]
    fn three_by_three_counts() {
        let g = build_grid(3, 3).unwrap();
        assert_eq!(g.tv_terms().len(), 8);
        assert_eq!(g.edge_count(), 12);
    }

    #[test]
    fn grid_rejects_empty_and_overflow() {
        assert!(build_grid(0, 3).is_err());
        assert!(matches!(
            build_grid(usize::MAX, 2),
            Err(Error::SizeOverflow { .. })
        ));
    }

    #[test]
    fn grid_invariants_hold_for_rectangles() {
        for (r, c) in [(1, 5), (5, 1), (4, 7), (6, 6)] {
            let g = build_grid(r, c).unwrap();
            assert_eq!(g.tv_terms().len(), r * c - 1);
            for i in 0..g.len() {
                let (ri, ci) = (i / c, i % c);
                let expect = usize::from(ci + 1 < c) + usize::from(ri + 1 < r);
                assert_eq!(g.neighbors(i).len(), expect);
                assert!(g.neighbors(i).iter().all(|&j| j < g.len()));
            }
        }
    }

    #[test]
    fn constant_image_has_zero_tv() {
        let g = build_grid(3, 4).unwrap();
        let x = vec![2.5; 12];
        for v in [TvVariant::Isotropic, TvVariant::Anisotropic, TvVariant::Square] {
            assert_eq!(tv_value(&x, &g, v).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_by_two_column_image() {
        let g = build_grid(2, 2).unwrap();
        let x = [0.0, 1.0, 0.0, 1.0];
        assert!((tv_value(&x, &g, TvVariant::Isotropic).unwrap() - 2.0).abs() < 1e-15);
        assert!((tv_value(&x, &g, TvVariant::Square).unwrap() - 2.0).abs() < 1e-15);
        assert!((tv_value(&x, &g, TvVariant::Anisotropic).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn tv_length_mismatch_is_rejected() {
        let g = build_grid(2, 2).unwrap();
        assert!(tv_value(&[0.0; 3], &g, TvVariant::Isotropic).is_err());
        assert!(tv_soft_value(&[0.0; 5], &g, 1e-3).is_err());
    }

    #[test]
    fn soft_value_of_constant_image() {
        let g = build_grid(2, 2).unwrap();
        let delta = 1e-3;
        let v = tv_soft_value(&[1.0; 4], &g, delta).unwrap();
        assert!((v - 3.0 * delta).abs() < 1e-15);
        assert!(tv_soft_value(&[1.0; 4], &g, 0.0).is_err());
        assert!(tv_soft_value(&[1.0; 4], &g, -1.0).is_err());
    }

    #[test]
    fn soft_value_tends_to_hard_value() {
        let g = build_grid(4, 4).unwrap();
        let x = random_image(16, 3);
        let hard = tv_value(&x, &g, TvVariant::Isotropic).unwrap();
        let soft = tv_soft_value(&x, &g, 1e-9).unwrap();
        assert!((soft - hard).abs() < 1e-7);
    }

    // Three-variable star: one term owned by pixel 0 with neighbours 1 and 2.
    fn star_terms(x: &[f64], g: &GridGraph, delta: f64) -> (Vec<f64>, SparseSym) {
        let mut grad = vec![0.0; 4];
        add_term_gradient(x, g, 0, delta, &mut grad);
        let exclude: BTreeSet<usize> = [1, 2].into_iter().collect();
        (grad, tv_soft_hessian(x, g, delta, &exclude).unwrap())
    }

    #[test]
    fn star_value_at_origin_is_delta() {
        let g = build_grid(2, 2).unwrap();
        assert_eq!(term_soft_value(&[0.0; 4], &g, 0, 1e-4), 1e-4);
    }

    #[test]
    fn star_gradient_matches_closed_form() {
        let g = build_grid(2, 2).unwrap();
        let (p, q, delta) = (0.3, -0.7, 0.05);
        let x = [0.0, p, q, 0.0];
        let (grad, _) = star_terms(&x, &g, delta);
        let s = (p * p + q * q + delta * delta).sqrt();
        let expect = [(-p - q) / s, p / s, q / s];
        for k in 0..3 {
            assert!((grad[k] - expect[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn star_hessian_matches_closed_form() {
        let g = build_grid(2, 2).unwrap();
        let (p, q, d) = (0.3, -0.7, 0.05);
        let x = [0.0, p, q, 0.0];
        let (_, h) = star_terms(&x, &g, d);
        let h = h.to_dense();
        let s3 = (p * p + q * q + d * d).powf(1.5);
        let d2 = d * d;
        let expect = [
            [(p - q).powi(2) + 2.0 * d2, p * q - q * q - d2, p * q - p * p - d2],
            [p * q - q * q - d2, q * q + d2, -p * q],
            [p * q - p * p - d2, -p * q, p * p + d2],
        ];
        for a in 0..3 {
            for b in 0..3 {
                assert!((h[(a, b)] - expect[a][b] / s3).abs() < 1e-10, "({a},{b})");
            }
        }
    }

    #[test]
    fn star_eigenvalues_at_flat_point() {
        let g = build_grid(2, 2).unwrap();
        let delta = 1e-4;
        let (_, h) = star_terms(&[0.0; 4], &g, delta);
        let block = h.to_dense().view((0, 0), (3, 3)).into_owned();
        let mut ev: Vec<f64> = SymmetricEigen::new(block).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(ev[0].abs() < 1e-8 / delta);
        assert!((ev[1] - 1.0 / delta).abs() <= 1e-8 / delta);
        assert!((ev[2] - 3.0 / delta).abs() <= 3e-8 / delta);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = build_grid(4, 5).unwrap();
        let delta = 1e-3;
        for seed in 0..5 {
            let x = random_image(g.len(), seed);
            let grad = tv_soft_gradient(&x, &g, delta).unwrap();
            let h = 1e-6;
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (tv_soft_value(&xp, &g, delta).unwrap()
                    - tv_soft_value(&xm, &g, delta).unwrap())
                    / (2.0 * h);
                let scale = grad[i].abs().max(1.0);
                assert!((fd - grad[i]).abs() <= 1e-6 * scale, "i={i} fd={fd} g={}", grad[i]);
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let g = build_grid(3, 3).unwrap();
        let delta = 1e-2;
        let x = random_image(9, 11);
        let h = tv_soft_hessian(&x, &g, delta, &BTreeSet::new()).unwrap().to_dense();
        let step = 1e-6;
        for j in 0..9 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let gp = tv_soft_gradient(&xp, &g, delta).unwrap();
            let gm = tv_soft_gradient(&xm, &g, delta).unwrap();
            for i in 0..9 {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                let scale = h[(i, j)].abs().max(1.0);
                assert!((fd - h[(i, j)]).abs() <= 1e-5 * scale);
            }
        }
    }

    #[test]
    fn hessian_rejects_bad_exclude() {
        let g = build_grid(2, 2).unwrap();
        let ex: BTreeSet<usize> = [3].into_iter().collect();
        assert!(tv_soft_hessian(&[0.0; 4], &g, 1e-3, &ex).is_err());
    }

    #[test]
    fn square_matrix_is_quadratic_form() {
        let g = build_grid(3, 4).unwrap();
        let j = square_tv_matrix(&g);
        let x = random_image(12, 5);
        let jx = j.mul_vec(&x);
        let quad: f64 = 0.5 * x.iter().zip(&jx).map(|(a, b)| a * b).sum::<f64>();
        let direct = tv_value(&x, &g, TvVariant::Square).unwrap();
        assert!((quad - direct).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn soft_params_validation() {
        assert!(SoftParams::new(1e-4, 1e-12).is_ok());
        assert!(SoftParams::new(1e-4, 1e-4).is_err());
        assert!(SoftParams::new(0.0, 1e-12).is_err());
        assert!(SoftParams::new(1e-4, 0.0).is_err());
        assert_eq!(SoftParams::default(), SoftParams { delta: 1e-4, theta: 1e-12 });
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("isotropic".parse::<TvVariant>().unwrap(), TvVariant::Isotropic);
        assert_eq!("Square".parse::<TvVariant>().unwrap(), TvVariant::Square);
        assert!("l2".parse::<TvVariant>().is_err());
        assert_eq!(TvVariant::default(), TvVariant::Isotropic);
    }

    fn image_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), prop::collection::vec(-5.0f64..5.0, r * c))
        })
    }

    proptest! {
        #[test]
        fn isotropic_bounded_by_anisotropic((r, c, x) in image_strategy()) {
            let g = build_grid(r, c).unwrap();
            let iso = tv_value(&x, &g, TvVariant::Isotropic).unwrap();
            let ani = tv_value(&x, &g, TvVariant::Anisotropic).unwrap();
            prop_assert!(iso <= ani + 1e-12);
        }

        #[test]
        fn softening_gap_is_bounded((r, c, x) in image_strategy(), delta in 1e-6f64..1.0) {
            let g = build_grid(r, c).unwrap();
            let hard = tv_value(&x, &g, TvVariant::Isotropic).unwrap();
            let soft = tv_soft_value(&x, &g, delta).unwrap();
            let gap = soft - hard;
            if !g.tv_terms().is_empty() {
                prop_assert!(gap > 0.0);
            }
            prop_assert!(gap <= g.tv_terms().len() as f64 * delta * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn hessian_rows_sum_to_zero(
            (r, c, x) in image_strategy(),
            delta in 1e-4f64..1.0,
            mask in prop::collection::vec(any::<bool>(), 36),
        ) {
            let g = build_grid(r, c).unwrap();
            let exclude: BTreeSet<usize> = g
                .tv_terms()
                .iter()
                .copied()
                .filter(|&i| mask[i % mask.len()])
                .collect();
            let h = tv_soft_hessian(&x, &g, delta, &exclude).unwrap();
            let ones = vec![1.0; g.len()];
            for v in h.mul_vec(&ones) {
                prop_assert!(v.abs() <= 1e-10);
            }
        }
    }
}
