//! Newton refinement on a fixed structure.
//!
//! Near the optimum, proximal iterations identify which pixels are zero and
//! which TV terms vanish, but flat regions are only flat up to the accuracy
//! of the inner dual solve. On the manifold where killed pixels are zero and
//! each flat region shares one value, the objective is smooth, so a few
//! Newton steps in the merged coordinates land on the minimizer to machine
//! precision. The caller keeps the result only if it does not increase the
//! objective.

use nalgebra::{DMatrix, DVector};

use super::{objective, Problem, RegWeights};
use crate::grid::{add_term_gradient, square_tv_matrix, term_hessian_block, term_sq, TvVariant};
use crate::partition::DisjointSet;

/// Killed pixels and groups of pixels sharing one value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Structure {
    /// Group id of each pixel, `None` for killed pixels.
    pub comp: Vec<Option<usize>>,
    /// Pixels of each group, in increasing order.
    pub members: Vec<Vec<usize>>,
}

impl Structure {
    /// Groups pixels whose TV terms (edges, for anisotropic TV) are within
    /// `tau` of zero and drops groups touching an exact zero.
    pub fn detect(x: &[f64], problem: &Problem, tau: f64) -> Structure {
        let g = problem.grid();
        let n = x.len();
        let mut ds = DisjointSet::new(n);
        match problem.variant() {
            TvVariant::Isotropic => {
                for &i in g.tv_terms() {
                    if term_sq(x, g, i).sqrt() <= tau {
                        for &j in g.neighbors(i) {
                            ds.union(i, j);
                        }
                    }
                }
            }
            TvVariant::Anisotropic => {
                for (i, j) in g.edges() {
                    if (x[j] - x[i]).abs() <= tau {
                        ds.union(i, j);
                    }
                }
            }
            TvVariant::Square => {}
        }
        let mut root_killed = vec![false; n];
        for i in 0..n {
            if x[i] == 0.0 {
                root_killed[ds.find(i)] = true;
            }
        }
        let mut root_id = vec![usize::MAX; n];
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut comp = vec![None; n];
        for i in 0..n {
            let r = ds.find(i);
            if root_killed[r] {
                continue;
            }
            if root_id[r] == usize::MAX {
                root_id[r] = members.len();
                members.push(Vec::new());
            }
            comp[i] = Some(root_id[r]);
            members[root_id[r]].push(i);
        }
        Structure { comp, members }
    }

    pub fn dof(&self) -> usize {
        self.members.len()
    }

    pub fn expand(&self, z: &[f64]) -> Vec<f64> {
        self.comp.iter().map(|c| c.map_or(0.0, |r| z[r])).collect()
    }

    fn collapse(&self, x: &[f64]) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| m.iter().map(|&i| x[i]).sum::<f64>() / m.len() as f64)
            .collect()
    }
}

/// Gradient of the objective in merged coordinates at a point lying on `s`.
/// Vanishing TV terms inside a group contribute nothing, so at the minimizer
/// on the structure this is zero.
pub fn merged_gradient(problem: &Problem, w: &RegWeights, x: &[f64], s: &Structure) -> Vec<f64> {
    let n = x.len();
    let g = problem.grid();
    let r = problem.a() * DVector::from_column_slice(x) - problem.y();
    let mut gx: Vec<f64> = problem.a().tr_mul(&r).iter().copied().collect();
    for i in 0..n {
        if x[i] != 0.0 {
            gx[i] += w.lambda_l1 * x[i].signum();
        }
    }
    if w.lambda_tv > 0.0 {
        let mut gt = vec![0.0; n];
        match problem.variant() {
            TvVariant::Isotropic => {
                for &i in g.tv_terms() {
                    add_term_gradient(x, g, i, 0.0, &mut gt);
                }
            }
            TvVariant::Anisotropic => {
                for (i, j) in g.edges() {
                    let d = x[j] - x[i];
                    if d != 0.0 {
                        gt[j] += d.signum();
                        gt[i] -= d.signum();
                    }
                }
            }
            TvVariant::Square => {
                gt = square_tv_matrix(g).mul_vec(x);
            }
        }
        for i in 0..n {
            gx[i] += w.lambda_tv * gt[i];
        }
    }
    s.members
        .iter()
        .map(|m| m.iter().map(|&i| gx[i]).sum())
        .collect()
}

/// Hessian of the objective in merged coordinates.
fn merged_hessian(problem: &Problem, w: &RegWeights, x: &[f64], s: &Structure) -> DMatrix<f64> {
    let dof = s.dof();
    let gram = problem.gram();
    let n = x.len();
    // sum columns then rows of the Gram matrix over each group
    let mut cols = DMatrix::<f64>::zeros(n, dof);
    for (r, m) in s.members.iter().enumerate() {
        for &j in m {
            let src = gram.column(j);
            let mut dst = cols.column_mut(r);
            dst += src;
        }
    }
    let mut h = DMatrix::<f64>::zeros(dof, dof);
    for (r, m) in s.members.iter().enumerate() {
        for &i in m {
            for c in 0..dof {
                h[(r, c)] += cols[(i, c)];
            }
        }
    }
    if w.lambda_tv > 0.0 {
        let g = problem.grid();
        match problem.variant() {
            TvVariant::Isotropic => {
                for &i in g.tv_terms() {
                    let (block, k) = term_hessian_block(x, g, i, 0.0);
                    let pix: Vec<usize> = g.term_pixels(i).collect();
                    for a in 0..k {
                        for b in 0..k {
                            if let (Some(ra), Some(rb)) = (s.comp[pix[a]], s.comp[pix[b]]) {
                                h[(ra, rb)] += w.lambda_tv * block[a * k + b];
                            }
                        }
                    }
                }
            }
            TvVariant::Square => {
                for &(i, j, v) in square_tv_matrix(g).entries() {
                    if let (Some(ri), Some(rj)) = (s.comp[i], s.comp[j]) {
                        h[(ri, rj)] += w.lambda_tv * v;
                    }
                }
            }
            // piecewise linear away from vanishing edges
            TvVariant::Anisotropic => {}
        }
    }
    h
}

fn solve_damped(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let dof = h.nrows();
    let scale = (h.trace() / dof as f64).abs().max(f64::MIN_POSITIVE);
    let mut mu = 1e-12 * scale;
    for _ in 0..8 {
        let mut hd = h.clone();
        for k in 0..dof {
            hd[(k, k)] += mu;
        }
        if let Some(ch) = hd.cholesky() {
            return Some(ch.solve(rhs));
        }
        mu *= 100.0;
    }
    None
}

/// Minimizes the objective on the manifold described by `s`, starting from
/// the projection of `x`. Returns the point and its objective.
fn newton_on(problem: &Problem, w: &RegWeights, x: &[f64], s: &Structure) -> Option<(Vec<f64>, f64)> {
    let mut z = s.collapse(x);
    let sign: Vec<f64> = z.iter().map(|v| v.signum()).collect();
    if z.iter().any(|&v| v == 0.0) {
        return None;
    }
    let mut xf = s.expand(&z);
    let mut f = objective(&xf, problem, w).ok()?;
    if s.dof() == 0 {
        return Some((xf, f));
    }
    for _ in 0..50 {
        let g = DVector::from_vec(merged_gradient(problem, w, &xf, s));
        let h = merged_hessian(problem, w, &xf, s);
        let step = solve_damped(&h, &(-&g))?;
        let slope = g.dot(&step);
        if slope >= 0.0 {
            break;
        }
        let mut alpha: f64 = 1.0;
        for r in 0..z.len() {
            let next = z[r] + step[r];
            if next * sign[r] <= 0.0 {
                alpha = alpha.min(0.9 * z[r].abs() / step[r].abs());
            }
        }
        let mut accepted = false;
        for _ in 0..40 {
            let zt: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + alpha * b).collect();
            let xt = s.expand(&zt);
            let ft = objective(&xt, problem, w).ok()?;
            if ft <= f + 1e-4 * alpha * slope + 1e-15 * f.abs() {
                let moved = step.amax() * alpha;
                z = zt;
                xf = xt;
                f = ft;
                accepted = true;
                if moved <= 1e-15 * z.iter().fold(0.0_f64, |m, v| m.max(v.abs())) {
                    return Some((xf, f));
                }
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some((xf, f))
}

/// Tries each detection threshold and returns the best refined point.
pub(crate) fn refine(
    problem: &Problem,
    w: &RegWeights,
    x: &[f64],
    taus: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut seen: Vec<Structure> = Vec::new();
    let taus: &[f64] = if taus.is_empty() { &[0.0] } else { taus };
    for &tau in taus {
        let s = Structure::detect(x, problem, tau * scale);
        if seen.contains(&s) {
            continue;
        }
        if let Some((xr, fr)) = newton_on(problem, w, x, &s) {
            if best.as_ref().is_none_or(|(_, fb)| fr < *fb) {
                best = Some((xr, fr));
            }
        }
        seen.push(s);
    }
    best
}
