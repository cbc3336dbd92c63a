//! DBSCAN under the mixed distance
//! `d^2 = beta |x_i - x_j|^2 + (1 - beta) |phi_i - phi_j|^2`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    /// Weight of the location term, in `[0, 1]`.
    pub beta: f64,
    /// Neighborhood radius in mixed-distance units.
    pub eps: f64,
    /// Neighbors (self included) needed for a core point.
    pub min_pts: usize,
    /// Use only `(x, y)` in the location term.
    #[serde(default)]
    pub planar: bool,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            eps: 0.8,
            min_pts: 3,
            planar: false,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::Config("min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Points to cluster: locations plus `dim`-wide embeddings, row-major.
#[derive(Clone, Copy, Debug)]
pub struct ClusterInput<'a> {
    pub xyz: &'a [[f64; 3]],
    pub phi: &'a [f64],
    pub dim: usize,
}

impl ClusterInput<'_> {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    /// Squared mixed distance between points `i` and `j`.
    pub fn dist2(&self, i: usize, j: usize, cfg: &ClusteringConfig) -> f64 {
        let axes = if cfg.planar { 2 } else { 3 };
        let dx: f64 = (0..axes).map(|a| (self.xyz[i][a] - self.xyz[j][a]).powi(2)).sum();
        let d = self.dim;
        let de: f64 = (0..d).map(|f| (self.phi[i * d + f] - self.phi[j * d + f]).powi(2)).sum();
        cfg.beta * dx + (1.0 - cfg.beta) * de
    }
}

/// Neighbor lookup. With `beta > 0` any neighbor lies within
/// `eps / sqrt(beta)` in location, so a uniform grid over locations prunes
/// candidates; otherwise every pair is tested.
enum Index {
    Brute,
    Grid {
        cell: f64,
        buckets: HashMap<[i64; 3], Vec<usize>>,
    },
}

impl Index {
    fn new(input: &ClusterInput<'_>, cfg: &ClusteringConfig) -> Self {
        if cfg.beta <= 0.0 {
            return Index::Brute;
        }
        let cell = cfg.eps / cfg.beta.sqrt();
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in input.xyz.iter().enumerate() {
            buckets.entry(Self::key(p, cell, cfg.planar)).or_default().push(i);
        }
        Index::Grid { cell, buckets }
    }

    fn key(p: &[f64; 3], cell: f64, planar: bool) -> [i64; 3] {
        let k = |v: f64| (v / cell).floor() as i64;
        [k(p[0]), k(p[1]), if planar { 0 } else { k(p[2]) }]
    }

    fn neighbors(&self, input: &ClusterInput<'_>, cfg: &ClusteringConfig, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let eps2 = cfg.eps * cfg.eps;
        match self {
            Index::Brute => out.extend((0..input.len()).filter(|&j| input.dist2(i, j, cfg) <= eps2)),
            Index::Grid { cell, buckets } => {
                let k = Self::key(&input.xyz[i], *cell, cfg.planar);
                let dz = if cfg.planar { 0..=0 } else { -1..=1 };
                for a in -1..=1 {
                    for b in -1..=1 {
                        for c in dz.clone() {
                            if let Some(list) = buckets.get(&[k[0] + a, k[1] + b, k[2] + c]) {
                                out.extend(list.iter().copied().filter(|&j| input.dist2(i, j, cfg) <= eps2));
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cluster label of every point. Clusters are numbered in the order they
/// are discovered scanning points by index; a border point joins the first
/// cluster that reaches it; noise points become singleton clusters numbered
/// after all dense clusters, again in index order.
pub fn dbscan(input: &ClusterInput<'_>, cfg: &ClusteringConfig) -> Vec<usize> {
    const UNSET: usize = usize::MAX;
    let n = input.len();
    let index = Index::new(input, cfg);
    let mut label = vec![UNSET; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    let mut nbrs = Vec::new();
    let mut queue = Vec::new();
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        index.neighbors(input, cfg, i, &mut nbrs);
        if nbrs.len() < cfg.min_pts {
            continue;
        }
        let c = next;
        next += 1;
        label[i] = c;
        queue.clear();
        queue.extend(nbrs.iter().copied());
        while let Some(j) = queue.pop() {
            if label[j] == UNSET {
                label[j] = c;
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            index.neighbors(input, cfg, j, &mut nbrs);
            if nbrs.len() >= cfg.min_pts {
                queue.extend(nbrs.iter().copied().filter(|&k| !visited[k] || label[k] == UNSET));
            }
        }
    }
    for l in &mut label {
        if *l == UNSET {
            *l = next;
            next += 1;
        }
    }
    label
}
