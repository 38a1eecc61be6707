//! Active/killed variables, links between pixels of vanishing TV terms, and
//! the locked clusters they form.

use std::collections::BTreeSet;

use crate::grid::{term_soft_value, GridGraph, SoftParams, TvVariant};

/// Disjoint-set forest with path compression and union by rank.
#[derive(Clone, Debug)]
pub struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut node: usize) -> usize {
        let mut root = node;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[node] != node {
            let next = self.parent[node];
            self.parent[node] = root;
            node = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let mut a = self.find(a);
        let mut b = self.find(b);
        if a == b {
            return a;
        }
        if self.rank[a] < self.rank[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        if self.rank[a] == self.rank[b] {
            self.rank[a] = self.rank[a].saturating_add(1);
        }
        a
    }
}

/// A link between two pixels, stored as (term pixel, neighbour pixel).
pub type Link = (usize, usize);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub active: Vec<usize>,
    pub killed: Vec<usize>,
    /// Locked clusters, each sorted, ordered by smallest member.
    pub clusters: Vec<Vec<usize>>,
    pub isolated: Vec<usize>,
    pub links: BTreeSet<Link>,
    /// Active pixels that were in a component dropped for touching a killed pixel.
    pub reassigned: Vec<usize>,
}

impl Partition {
    /// Builds the full partition of `x_hat`.
    pub fn build(
        x_hat: &[f64],
        grid: &GridGraph,
        soft: &SoftParams,
        variant: TvVariant,
        eps_active: f64,
    ) -> Partition {
        let (active, killed) = detect_active(x_hat, eps_active);
        let links = enumerate_links(x_hat, grid, soft, variant);
        let (clusters, isolated, reassigned) = clusters_with_removed(&links, &active, &killed);
        Partition {
            active,
            killed,
            clusters,
            isolated,
            links,
            reassigned,
        }
    }

    /// Clusters plus isolated active variables.
    pub fn dof(&self) -> usize {
        self.clusters.len() + self.isolated.len()
    }
}

/// Splits pixels into active (`|x| > eps`) and killed (`|x| <= eps`) sets.
pub fn detect_active(x_hat: &[f64], eps_active: f64) -> (Vec<usize>, Vec<usize>) {
    let (killed, active): (Vec<usize>, Vec<usize>) =
        (0..x_hat.len()).partition(|&i| x_hat[i].abs() <= eps_active);
    (active, killed)
}

/// Links from vanishing TV terms.
///
/// Isotropic: every pixel pair `(i, j)`, `j` a neighbour of `i`, whenever
/// `t_i^delta <= delta + theta`. Anisotropic: `(i, j)` whenever
/// `|x_j - x_i| <= theta`. Square TV never links.
pub fn enumerate_links(
    x_hat: &[f64],
    grid: &GridGraph,
    soft: &SoftParams,
    variant: TvVariant,
) -> BTreeSet<Link> {
    let mut links = BTreeSet::new();
    match variant {
        TvVariant::Isotropic => {
            for &i in grid.tv_terms() {
                if term_soft_value(x_hat, grid, i, soft.delta) <= soft.delta + soft.theta {
                    links.extend(grid.neighbors(i).iter().map(|&j| (i, j)));
                }
            }
        }
        TvVariant::Anisotropic => {
            links.extend(grid.edges().filter(|&(i, j)| (x_hat[j] - x_hat[i]).abs() <= soft.theta));
        }
        TvVariant::Square => {}
    }
    links
}

/// Connected components of the link graph; components touching a killed
/// pixel are dropped. Returns `(clusters, isolated)`.
pub fn enumerate_clusters(
    links: &BTreeSet<Link>,
    active: &[usize],
    killed: &[usize],
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let (c, i, _) = clusters_with_removed(links, active, killed);
    (c, i)
}

fn clusters_with_removed(
    links: &BTreeSet<Link>,
    active: &[usize],
    killed: &[usize],
) -> (Vec<Vec<usize>>, Vec<usize>, Vec<usize>) {
    let n = active
        .iter()
        .chain(killed)
        .chain(links.iter().flat_map(|(a, b)| [a, b]))
        .max()
        .map_or(0, |&m| m + 1);
    let mut ds = DisjointSet::new(n);
    let mut linked = vec![false; n];
    for &(a, b) in links {
        ds.union(a, b);
        linked[a] = true;
        linked[b] = true;
    }
    let mut is_killed = vec![false; n];
    for &k in killed {
        is_killed[k] = true;
    }
    let mut root_killed = vec![false; n];
    for i in 0..n {
        if linked[i] && is_killed[i] {
            root_killed[ds.find(i)] = true;
        }
    }
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        if linked[i] {
            by_root[ds.find(i)].push(i);
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut in_cluster = vec![false; n];
    let mut reassigned = Vec::new();
    for (root, members) in by_root.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if root_killed[root] {
            reassigned.extend(members.iter().copied().filter(|&i| !is_killed[i]));
            continue;
        }
        for &i in &members {
            in_cluster[i] = true;
        }
        clusters.push(members);
    }
    clusters.sort_by_key(|c| c[0]);
    reassigned.sort_unstable();
    let isolated = active.iter().copied().filter(|&i| !in_cluster[i]).collect();
    (clusters, isolated, reassigned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    #[test]
    fn detect_active_examples() {
        assert_eq!(detect_active(&[0.0; 3], 0.0), (vec![], vec![0, 1, 2]));
        assert_eq!(detect_active(&[1.0, -2.0], 0.0), (vec![0, 1], vec![]));
        assert_eq!(detect_active(&[0.0, 0.5, 0.0, 1.2], 0.0), (vec![1, 3], vec![0, 2]));
        assert_eq!(detect_active(&[1e-9, 0.5], 1e-8), (vec![1], vec![0]));
    }

    #[test]
    fn constant_image_links_everything() {
        let g = build_grid(2, 2).unwrap();
        let links = enumerate_links(&[1.0; 4], &g, &SoftParams::default(), TvVariant::Isotropic);
        assert_eq!(links.len(), g.edge_count());
        let (clusters, isolated) = enumerate_clusters(&links, &[0, 1, 2, 3], &[]);
        assert_eq!(clusters, vec![vec![0, 1, 2, 3]]);
        assert!(isolated.is_empty());
    }

    #[test]
    fn well_separated_image_has_no_links() {
        let g = build_grid(3, 3).unwrap();
        let x: Vec<f64> = (0..9).map(|i| (i * i) as f64 * 2.0).collect();
        let links = enumerate_links(&x, &g, &SoftParams::default(), TvVariant::Isotropic);
        assert!(links.is_empty());
        let (clusters, isolated) = enumerate_clusters(&links, &(0..9).collect::<Vec<_>>(), &[]);
        assert!(clusters.is_empty());
        assert_eq!(isolated.len(), 9);
    }

    #[test]
    fn partial_flatness_does_not_link() {
        // [[a, a], [b, c]]: term (0,0) has a zero right difference but a large
        // down difference, so no term vanishes.
        let g = build_grid(2, 2).unwrap();
        let x = [1.0, 1.0, 5.0, 9.0];
        assert!(enumerate_links(&x, &g, &SoftParams::default(), TvVariant::Isotropic).is_empty());
        // [[a, a], [a, c]]: term (0,0) vanishes, (0,1) and (1,0) do not.
        let x = [1.0, 1.0, 1.0, 9.0];
        let links = enumerate_links(&x, &g, &SoftParams::default(), TvVariant::Isotropic);
        assert_eq!(links.into_iter().collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn anisotropic_and_square_links() {
        let g = build_grid(2, 2).unwrap();
        let x = [1.0, 1.0, 5.0, 9.0];
        let soft = SoftParams::default();
        let links = enumerate_links(&x, &g, &soft, TvVariant::Anisotropic);
        assert_eq!(links.into_iter().collect::<Vec<_>>(), vec![(0, 1)]);
        assert!(enumerate_links(&[1.0; 4], &g, &soft, TvVariant::Square).is_empty());
        let p = Partition::build(&[1.0; 4], &g, &soft, TvVariant::Square, 0.0);
        assert!(p.clusters.is_empty());
        assert_eq!(p.isolated, p.active);
    }

    #[test]
    fn clusters_touching_killed_are_removed() {
        // 1x4 strip [0, 0, 2, 3]: pixels 0 and 1 linked and killed.
        let g = build_grid(1, 4).unwrap();
        let x = [0.0, 0.0, 2.0, 2.0];
        let p = Partition::build(&x, &g, &SoftParams::default(), TvVariant::Isotropic, 0.0);
        assert_eq!(p.killed, vec![0, 1]);
        assert_eq!(p.clusters, vec![vec![2, 3]]);
        assert!(p.isolated.is_empty());
        // a component mixing a killed and an active pixel goes to S_I
        let links: BTreeSet<Link> = [(0, 1), (1, 2)].into_iter().collect();
        let (clusters, isolated) = enumerate_clusters(&links, &[1, 2, 3], &[0]);
        assert!(clusters.is_empty());
        assert_eq!(isolated, vec![1, 2, 3]);
    }

    #[test]
    fn empty_links_give_all_isolated() {
        let (c, i) = enumerate_clusters(&BTreeSet::new(), &[0, 3, 5], &[1, 2, 4]);
        assert!(c.is_empty());
        assert_eq!(i, vec![0, 3, 5]);
    }

    fn bfs_components(n: usize, links: &[Link]) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in links {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] || adj[s].is_empty() {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([s]);
            seen[s] = true;
            while let Some(u) = queue.pop_front() {
                comp.push(u);
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out.sort_by_key(|c| c[0]);
        out
    }

    #[test]
    fn components_match_bfs_on_random_links() {
        let g = build_grid(6, 6).unwrap();
        let edges: Vec<Link> = g.edges().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let links: Vec<Link> = edges.iter().copied().filter(|_| rng.random_bool(0.35)).collect();
            let set: BTreeSet<Link> = links.iter().copied().collect();
            let all: Vec<usize> = (0..36).collect();
            let (clusters, isolated) = enumerate_clusters(&set, &all, &[]);
            let expect = bfs_components(36, &links);
            assert_eq!(clusters, expect);
            let covered: usize = clusters.iter().map(Vec::len).sum();
            assert_eq!(covered + isolated.len(), 36);
        }
    }

    proptest! {
        #[test]
        fn clusters_invariants(seed in 0u64..10_000, p_link in 0.0f64..0.8, p_kill in 0.0f64..0.5) {
            let g = build_grid(5, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut links: Vec<Link> = g.edges().filter(|_| rng.random_bool(p_link)).collect();
            let killed: Vec<usize> = (0..25).filter(|_| rng.random_bool(p_kill)).collect();
            let active: Vec<usize> = (0..25).filter(|i| !killed.contains(i)).collect();
            let set: BTreeSet<Link> = links.iter().copied().collect();
            let (clusters, isolated) = enumerate_clusters(&set, &active, &killed);
            // order independence
            links.shuffle(&mut rng);
            let shuffled: BTreeSet<Link> = links.iter().copied().collect();
            prop_assert_eq!(enumerate_clusters(&shuffled, &active, &killed), (clusters.clone(), isolated.clone()));
            let mut seen = BTreeSet::new();
            for c in &clusters {
                prop_assert!(c.len() >= 2);
                for &i in c {
                    prop_assert!(active.contains(&i));
                    prop_assert!(seen.insert(i));
                }
            }
            for &i in &isolated {
                prop_assert!(!seen.contains(&i));
            }
            prop_assert_eq!(seen.len() + isolated.len(), active.len());
        }
    }
}
