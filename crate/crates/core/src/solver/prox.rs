//! Proximal map of `a * ||x||_1 + b * TV(x)`.
//!
//! The TV term is dualized edge by edge. For a fixed dual `p` the primal
//! minimizer is `soft(v - b D^T p, a)`, so the dual objective becomes
//! `0.5 * ||soft(v - b D^T p, a)||^2`, which is convex with a Lipschitz
//! gradient and is minimized by fast projected gradient. The soft-threshold
//! applied to the dual iterate gives exact zeros; at the dual optimum it is
//! the exact proximal point of the combined penalty.

use crate::grid::{GridGraph, TvVariant};

#[inline]
pub(crate) fn soft(v: f64, a: f64) -> f64 {
    if v > a {
        v - a
    } else if v < -a {
        v + a
    } else {
        0.0
    }
}

/// Dual state of the TV proximal problem, reused between calls as a warm start.
#[derive(Clone, Debug)]
pub(crate) struct TvProx {
    /// (i, j) for each lattice edge, grouped by owning term.
    edges: Vec<(usize, usize)>,
    /// Edge ranges `[start, end)` per term, for the isotropic ball projection.
    groups: Vec<(usize, usize)>,
    variant: TvVariant,
    p: Vec<f64>,
    // scratch
    q: Vec<f64>,
    p_prev: Vec<f64>,
    u: Vec<f64>,
}

impl TvProx {
    pub(crate) fn new(g: &GridGraph, variant: TvVariant) -> Self {
        let mut edges = Vec::with_capacity(g.edge_count());
        let mut groups = Vec::with_capacity(g.tv_terms().len());
        for &i in g.tv_terms() {
            let start = edges.len();
            edges.extend(g.neighbors(i).iter().map(|&j| (i, j)));
            groups.push((start, edges.len()));
        }
        let ne = edges.len();
        TvProx {
            edges,
            groups,
            variant,
            p: vec![0.0; ne],
            q: vec![0.0; ne],
            p_prev: vec![0.0; ne],
            u: vec![0.0; g.len()],
        }
    }

    /// `out = v - b * D^T p`
    fn primal_shift(&self, p: &[f64], v: &[f64], b: f64, out: &mut [f64]) {
        out.copy_from_slice(v);
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let s = b * p[e];
            out[j] -= s;
            out[i] += s;
        }
    }

    fn project(&self, p: &mut [f64]) {
        match self.variant {
            TvVariant::Isotropic => {
                for &(s, e) in &self.groups {
                    let nrm2: f64 = p[s..e].iter().map(|v| v * v).sum();
                    if nrm2 > 1.0 {
                        let inv = 1.0 / nrm2.sqrt();
                        p[s..e].iter_mut().for_each(|v| *v *= inv);
                    }
                }
            }
            _ => p.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)),
        }
    }

    /// Writes `prox(v)` for the penalty `a ||x||_1 + b TV(x)` into `out`,
    /// running at most `iters` dual iterations from the stored dual point.
    pub(crate) fn apply(&mut self, v: &[f64], a: f64, b: f64, iters: usize, out: &mut [f64]) {
        if b <= 0.0 || self.edges.is_empty() || self.variant == TvVariant::Square {
            for (o, &vi) in out.iter_mut().zip(v) {
                *o = soft(vi, a);
            }
            return;
        }
        // Lipschitz constant of the dual gradient is b^2 ||D||^2 <= 8 b^2.
        let step = 1.0 / (8.0 * b);
        let mut t = 1.0_f64;
        let mut u = std::mem::take(&mut self.u);
        self.q.copy_from_slice(&self.p);
        for _ in 0..iters {
            self.primal_shift(&self.q, v, b, &mut u);
            u.iter_mut().for_each(|w| *w = soft(*w, a));
            std::mem::swap(&mut self.p_prev, &mut self.p);
            for (e, &(i, j)) in self.edges.iter().enumerate() {
                self.p[e] = self.q[e] + step * (u[j] - u[i]);
            }
            let mut p = std::mem::take(&mut self.p);
            self.project(&mut p);
            self.p = p;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            let mut change = 0.0_f64;
            for e in 0..self.p.len() {
                let d = self.p[e] - self.p_prev[e];
                change = change.max(d.abs());
                self.q[e] = self.p[e] + beta * d;
            }
            t = t_next;
            if change <= 1e-15 {
                break;
            }
        }
        self.primal_shift(&self.p, v, b, out);
        out.iter_mut().for_each(|w| *w = soft(*w, a));
        self.u = u;
    }
}
