//! Reconstructed volume → point list: relative thresholding followed by
//! single-linkage clustering.

use std::collections::HashMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Volume;
use crate::scene::{Source, SourceList};

pub const DEFAULT_THRESHOLD_FRAC: f64 = 0.05;
pub const DEFAULT_CLUSTER_RADIUS: f64 = 2.0;

/// A detected source; coordinates in voxel units as in
/// [`Source`](crate::scene::Source).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointSet(pub Vec<Point>);

impl PointSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.0.iter()
    }

    pub fn total_weight(&self) -> f64 {
        self.0.iter().map(|p| p.weight).sum()
    }

    /// The points as sources with `flux = weight`.
    pub fn to_sources(&self) -> SourceList {
        SourceList(
            self.0
                .iter()
                .map(|p| Source {
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    flux: p.weight,
                })
                .collect(),
        )
    }
}

/// Distance used for clustering (and, by default, for matching).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Isotropic Euclidean distance over all three voxel axes.
    #[default]
    Euclidean3d,
    /// Distance in the transverse plane only; depth is ignored.
    Transverse,
}

impl Metric {
    pub fn distance(self, a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
        let (dx, dy) = (a.0 - b.0, a.1 - b.1);
        match self {
            Metric::Euclidean3d => {
                let dz = a.2 - b.2;
                (dx * dx + dy * dy + dz * dz).sqrt()
            }
            Metric::Transverse => (dx * dx + dy * dy).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractParams {
    pub threshold_frac: f64,
    pub cluster_radius: f64,
    pub metric: Metric,
}

impl Default for ExtractParams {
    fn default() -> Self {
        ExtractParams {
            threshold_frac: DEFAULT_THRESHOLD_FRAC,
            cluster_radius: DEFAULT_CLUSTER_RADIUS,
            metric: Metric::Euclidean3d,
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins, for a deterministic representative
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[derive(Clone, Copy)]
struct Cluster {
    sx: f64,
    sy: f64,
    sz: f64,
    w: f64,
}

impl Cluster {
    fn centroid(&self) -> (f64, f64, f64) {
        (self.sx / self.w, self.sy / self.w, self.sz / self.w)
    }

    fn absorb(&mut self, o: &Cluster) {
        self.sx += o.sx;
        self.sy += o.sy;
        self.sz += o.sz;
        self.w += o.w;
    }
}

/// Threshold at `threshold_frac · max(x)`, link surviving voxels closer than
/// `cluster_radius`, and emit intensity-weighted centroids.
///
/// Clusters whose centroids still end up within the radius are merged as
/// well, so no two output points are within `cluster_radius` of each other.
/// Output is sorted by `(z, y, x)`.
pub fn extract_points(x: &Volume, params: &ExtractParams) -> Result<PointSet> {
    let ExtractParams {
        threshold_frac,
        cluster_radius,
        metric,
    } = *params;
    if !(0.0..1.0).contains(&threshold_frac) {
        return Err(Error::Range(format!("threshold_frac {threshold_frac} outside [0, 1)")));
    }
    if !(cluster_radius >= 0.0) || !cluster_radius.is_finite() {
        return Err(Error::Range(format!("cluster_radius {cluster_radius} must be finite and ≥ 0")));
    }
    let data = x.data();
    let peak = x.max();
    if !(peak > 0.0) {
        return Ok(PointSet::default());
    }
    let cut = threshold_frac * peak;
    let (d, h, w) = data.dim();

    // survivors in (k, row, col) order
    let mut voxels = Vec::new();
    let mut index = Array3::<usize>::from_elem((d, h, w), usize::MAX);
    for ((k, i, j), &v) in data.indexed_iter() {
        if v > 0.0 && v >= cut {
            index[[k, i, j]] = voxels.len();
            voxels.push((k, i, j, v));
        }
    }

    let r = cluster_radius.floor() as isize;
    let dk_span = match metric {
        Metric::Euclidean3d => r,
        Metric::Transverse => d as isize,
    };
    let mut offsets = Vec::new();
    for dk in -dk_span..=dk_span {
        for di in -r..=r {
            for dj in -r..=r {
                let o = (dk as f64, di as f64, dj as f64);
                let dist = metric.distance((o.1, o.2, o.0), (0.0, 0.0, 0.0));
                if (dk, di, dj) != (0, 0, 0) && dist <= cluster_radius {
                    offsets.push((dk, di, dj));
                }
            }
        }
    }

    let mut uf = UnionFind::new(voxels.len());
    for (n, &(k, i, j, _)) in voxels.iter().enumerate() {
        for &(dk, di, dj) in &offsets {
            let (kk, ii, jj) = (k as isize + dk, i as isize + di, j as isize + dj);
            if kk < 0 || ii < 0 || jj < 0 || kk >= d as isize || ii >= h as isize || jj >= w as isize {
                continue;
            }
            let m = index[[kk as usize, ii as usize, jj as usize]];
            if m != usize::MAX {
                uf.union(n, m);
            }
        }
    }

    let mut by_root: HashMap<usize, usize> = HashMap::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    for (n, &(k, i, j, v)) in voxels.iter().enumerate() {
        let root = uf.find(n);
        let c = *by_root.entry(root).or_insert_with(|| {
            clusters.push(Cluster {
                sx: 0.0,
                sy: 0.0,
                sz: 0.0,
                w: 0.0,
            });
            clusters.len() - 1
        });
        let cl = &mut clusters[c];
        cl.sx += v * i as f64;
        cl.sy += v * j as f64;
        cl.sz += v * k as f64;
        cl.w += v;
    }

    merge_close(&mut clusters, cluster_radius, metric);

    let mut points: Vec<Point> = clusters
        .iter()
        .map(|c| {
            let (x, y, z) = c.centroid();
            Point { x, y, z, weight: c.w }
        })
        .collect();
    sort_canonical(&mut points);
    Ok(PointSet(points))
}

/// Merge the closest pair of clusters within `radius` until none remain.
fn merge_close(clusters: &mut Vec<Cluster>, radius: f64, metric: Metric) {
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            let ca = clusters[a].centroid();
            for b in a + 1..clusters.len() {
                let dist = metric.distance(ca, clusters[b].centroid());
                if dist <= radius && best.is_none_or(|(bd, _, _)| dist < bd) {
                    best = Some((dist, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { return };
        let other = clusters.remove(b);
        clusters[a].absorb(&other);
    }
}

pub fn sort_canonical(points: &mut [Point]) {
    points.sort_by(|p, q| {
        p.z.total_cmp(&q.z)
            .then(p.y.total_cmp(&q.y))
            .then(p.x.total_cmp(&q.x))
            .then(p.weight.total_cmp(&q.weight))
    });
}
