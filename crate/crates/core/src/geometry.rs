//! Point-cloud containers, kNN graph construction, sampling, and augmentation.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};
use crate::rng::Rng;

/// A set of 3D points in meters with a per-point validity mask
/// (`true` = valid / non-occluded).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Matrix<f32>,
    mask: Vec<bool>,
}

impl PointCloud {
    /// Build a cloud from an `N x 3` coordinate matrix. `mask` defaults to
    /// all-true when `None`.
    pub fn new(points: Matrix<f32>, mask: Option<Vec<bool>>) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::invalid_argument("point cloud must have N >= 1"));
        }
        if points.cols() != 3 {
            return Err(Error::invalid_argument(format!(
                "point cloud must be N x 3, got N x {}",
                points.cols()
            )));
        }
        if !points.all_finite() {
            return Err(Error::invalid_input("non-finite coordinate in point cloud"));
        }
        let mask = mask.unwrap_or_else(|| vec![true; points.rows()]);
        if mask.len() != points.rows() {
            return Err(Error::invalid_argument(format!(
                "mask length {} != N {}",
                mask.len(),
                points.rows()
            )));
        }
        Ok(PointCloud { points, mask })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    pub fn points(&self) -> &Matrix<f32> {
        &self.points
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn point(&self, i: usize) -> [f32; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    /// Rows selected by `idx`, mask included.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: self.points.select_rows(idx),
            mask: idx.iter().map(|&i| self.mask[i]).collect(),
        }
    }
}

/// k-nearest-neighbor indices per point. Row `i` holds the `k` nearest
/// points to point `i` (self excluded), sorted by ascending distance with
/// ties broken by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    indices: Vec<usize>,
    n: usize,
    k: usize,
}

impl NeighborGraph {
    /// Build from flat row-major indices (`n * k` entries). Callers are
    /// responsible for the ordering invariants; bounds are checked.
    pub fn from_indices(indices: Vec<usize>, n: usize, k: usize) -> Result<Self> {
        if indices.len() != n * k {
            return Err(Error::invalid_argument(format!(
                "neighbor indices length {} != n*k = {}",
                indices.len(),
                n * k
            )));
        }
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::invalid_argument("neighbor index out of range"));
        }
        Ok(NeighborGraph { indices, n, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Flat `N*k` neighbor indices, row-major.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    /// Flat `N*k` indices repeating each query point `k` times
    /// (`[0,0,...,1,1,...]`), pairing with [`NeighborGraph::flat`].
    pub fn query_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.n * self.k);
        for i in 0..self.n {
            idx.extend(std::iter::repeat(i).take(self.k));
        }
        idx
    }
}

/// Exact brute-force kNN over the rows of any feature matrix. Works on
/// coordinates (width 3) and on feature-space rows for dynamic graphs.
pub fn knn_rows<S: Scalar>(rows: &Matrix<S>, k: usize) -> Result<NeighborGraph> {
    let n = rows.rows();
    if k < 1 || k >= n {
        return Err(Error::invalid_argument(format!(
            "knn requires 1 <= k < N, got k={k}, N={n}"
        )));
    }
    if !rows.all_finite() {
        return Err(Error::invalid_input("non-finite value in knn input"));
    }
    let mut indices = Vec::with_capacity(n * k);
    // Per query, keep the k best (dist^2, index) pairs in sorted order. The
    // (dist, index) ordering is total because all values are finite.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..n {
        best.clear();
        let qi = rows.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let rj = rows.row(j);
            let mut d2 = 0.0f64;
            for (a, b) in qi.iter().zip(rj) {
                let d = a.as_f64() - b.as_f64();
                d2 += d * d;
            }
            if best.len() == k && (d2, j) >= best[k - 1] {
                continue;
            }
            let pos = best.partition_point(|&(bd, bj)| (bd, bj) < (d2, j));
            best.insert(pos, (d2, j));
            if best.len() > k {
                best.pop();
            }
        }
        indices.extend(best.iter().map(|&(_, j)| j));
    }
    Ok(NeighborGraph { indices, n, k })
}

/// kNN on a point cloud's coordinates.
pub fn knn(cloud: &PointCloud, k: usize) -> Result<NeighborGraph> {
    knn_rows(cloud.points(), k)
}

/// A supervised scene: source/target clouds, per-source-point ground-truth
/// flow, and per-source-point occlusion flags (`true` = the point's
/// correspondence is missing from the target).
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt_flow: Matrix<f32>,
    pub occlusion: Vec<bool>,
}

impl ScenePair {
    pub fn new(
        source: PointCloud,
        target: PointCloud,
        gt_flow: Matrix<f32>,
        occlusion: Vec<bool>,
    ) -> Result<Self> {
        if gt_flow.shape() != (source.len(), 3) {
            return Err(Error::invalid_argument(format!(
                "gt_flow must be {} x 3, got {} x {}",
                source.len(),
                gt_flow.rows(),
                gt_flow.cols()
            )));
        }
        if !gt_flow.all_finite() {
            return Err(Error::invalid_input("non-finite gt_flow"));
        }
        if occlusion.len() != source.len() {
            return Err(Error::invalid_argument(format!(
                "occlusion length {} != N1 {}",
                occlusion.len(),
                source.len()
            )));
        }
        Ok(ScenePair {
            source,
            target,
            gt_flow,
            occlusion,
        })
    }

    pub fn n_source(&self) -> usize {
        self.source.len()
    }

    pub fn n_target(&self) -> usize {
        self.target.len()
    }
}

/// Subsample a pair to `n` points per cloud. Source rows, flow, and
/// occlusion travel together under one index set; the target uses an
/// independent set. Both sets come from seeded partial Fisher-Yates
/// sampling (see [`Rng::sample_without_replacement`]): source indices are
/// drawn first, then target indices, from `Rng::new(seed)`.
pub fn random_sample(pair: &ScenePair, n: usize, seed: u64) -> Result<ScenePair> {
    if n == 0 || n > pair.n_source() || n > pair.n_target() {
        return Err(Error::invalid_argument(format!(
            "sample size {n} out of range for pair with N1={}, N2={}",
            pair.n_source(),
            pair.n_target()
        )));
    }
    let mut rng = Rng::new(seed);
    let src_idx = rng.sample_without_replacement(pair.n_source(), n);
    let tgt_idx = rng.sample_without_replacement(pair.n_target(), n);
    Ok(ScenePair {
        source: pair.source.select(&src_idx),
        target: pair.target.select(&tgt_idx),
        gt_flow: pair.gt_flow.select_rows(&src_idx),
        occlusion: src_idx.iter().map(|&i| pair.occlusion[i]).collect(),
    })
}

/// Random horizontal/vertical flip augmentation: with independent
/// probability 0.5 each (x drawn first, then y), negate the x and/or y
/// axis of source, target, and the matching flow components. Occlusion and
/// validity masks are unchanged.
pub fn augment_flip(pair: &ScenePair, seed: u64) -> ScenePair {
    let mut rng = Rng::new(seed);
    let flip_x = rng.flip();
    let flip_y = rng.flip();
    apply_flip(pair, flip_x, flip_y)
}

/// Deterministic flip of the chosen axes; `augment_flip` with the random
/// draws made explicit.
pub fn apply_flip(pair: &ScenePair, flip_x: bool, flip_y: bool) -> ScenePair {
    if !flip_x && !flip_y {
        return pair.clone();
    }
    let flip_mat = |m: &Matrix<f32>| {
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            if flip_x {
                row[0] = -row[0];
            }
            if flip_y {
                row[1] = -row[1];
            }
        }
        out
    };
    ScenePair {
        source: PointCloud {
            points: flip_mat(pair.source.points()),
            mask: pair.source.mask.clone(),
        },
        target: PointCloud {
            points: flip_mat(pair.target.points()),
            mask: pair.target.mask.clone(),
        },
        gt_flow: flip_mat(&pair.gt_flow),
        occlusion: pair.occlusion.clone(),
    }
}
