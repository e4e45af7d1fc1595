//! Deterministic point-cloud geometry: sampling, neighborhoods,
//! patchification, and the thresholds used by the offset regularizer.

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Sharpness of the log-sum-exp softened diameter. Shared by the loss side
/// so thresholds and penalties agree.
pub const DIAMETER_SHARPNESS: f64 = 50.0;

/// A raw cloud of N xyz points with an optional category.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<u32>,
    pub category_name: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::argument("point cloud must contain at least one point"));
        }
        for p in &points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric("point cloud contains non-finite coordinates"));
            }
        }
        Ok(PointCloud {
            points,
            label: None,
            category_name: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// n patches of k absolute-coordinate points each, with their center points.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    /// n x k absolute coordinates; each patch holds the k nearest points to
    /// its center, center included, sorted by distance.
    pub local_points: Vec<Vec<Point>>,
    pub center_indices: Vec<usize>,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn points_per_patch(&self) -> usize {
        self.local_points.first().map_or(0, |p| p.len())
    }
}

/// Position/size bounds derived from the original (un-deformed) patches.
#[derive(Debug, Clone)]
pub struct Thresholds {
    /// max distance from an original patch centroid to the global centroid
    pub h: f64,
    /// max exact diameter among original patches
    pub g: f64,
    /// max softened diameter among original patches; the trained size hinge
    /// compares against this so the penalty is exactly zero at the identity
    /// start (the softened diameter upper-bounds the exact one)
    pub g_soft: f64,
    pub global_centroid: Point,
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

/// Greedy farthest point sampling. Deterministic given `start`; the first
/// selected index is `start`, and max-min ties go to the lowest index.
pub fn fps(points: &[Point], n: usize, start: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::argument("fps: need at least one sample"));
    }
    if n > points.len() {
        return Err(Error::argument(format!(
            "fps: requested {n} samples from {} points",
            points.len()
        )));
    }
    if start >= points.len() {
        return Err(Error::argument(format!(
            "fps: start index {start} out of range for {} points",
            points.len()
        )));
    }
    let mut selected = Vec::with_capacity(n);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = start;
    selected.push(current);
    for _ in 1..n {
        let mut best = 0usize;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &points[current]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        selected.push(best);
        current = best;
    }
    Ok(selected)
}

/// Indices of the k nearest points to `query`, sorted by distance, ties to
/// the lowest index. With `include_self == false`, points bit-identical to
/// the query are skipped.
pub fn knn(query: &Point, points: &[Point], k: usize, include_self: bool) -> Result<Vec<usize>> {
    let mut candidates: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| include_self || *p != query)
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    if k > candidates.len() {
        return Err(Error::argument(format!(
            "knn: requested {k} neighbors from {} candidates",
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(candidates[..k].iter().map(|&(_, i)| i).collect())
}

/// FPS centers plus KNN grouping (center included in its own patch).
pub fn patchify(pc: &PointCloud, n: usize, k: usize) -> Result<PatchSet> {
    if k > pc.len() {
        return Err(Error::argument(format!(
            "patchify: {k} points per patch exceeds cloud size {}",
            pc.len()
        )));
    }
    let center_indices = fps(&pc.points, n, 0)?;
    let mut centers = Vec::with_capacity(n);
    let mut local_points = Vec::with_capacity(n);
    for &ci in &center_indices {
        let center = pc.points[ci];
        let neighbors = knn(&center, &pc.points, k, true)?;
        local_points.push(neighbors.iter().map(|&i| pc.points[i]).collect());
        centers.push(center);
    }
    Ok(PatchSet {
        centers,
        local_points,
        center_indices,
    })
}

/// Arithmetic mean per axis.
pub fn centroid(points: &[Point]) -> Result<Point> {
    if points.is_empty() {
        return Err(Error::argument("centroid: empty point set"));
    }
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let inv = 1.0 / points.len() as f64;
    for a in 0..3 {
        c[a] *= inv;
    }
    Ok(c)
}

/// Exact maximum pairwise distance; 0 for a single point.
pub fn patch_diameter(points: &[Point]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.max(dist2(&points[i], &points[j]));
        }
    }
    best.sqrt()
}

/// Log-sum-exp softened maximum pairwise distance with the given sharpness.
/// Upper-bounds the exact diameter; 0 for a single point.
pub fn soft_patch_diameter(points: &[Point], sharpness: f64) -> f64 {
    let m = points.len();
    if m < 2 {
        return 0.0;
    }
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    let mut max_d = 0.0f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let d = dist(&points[i], &points[j]);
            max_d = max_d.max(d);
            dists.push(d);
        }
    }
    let sum: f64 = dists.iter().map(|&d| (sharpness * (d - max_d)).exp()).sum();
    max_d + sum.ln() / sharpness
}

/// H, G (exact and softened) and the global centroid, all taken over the
/// original patches.
pub fn compute_thresholds(pc: &PointCloud, ps: &PatchSet) -> Thresholds {
    let global_centroid = centroid(&pc.points).expect("non-empty cloud");
    let mut h = 0.0f64;
    let mut g = 0.0f64;
    let mut g_soft = 0.0f64;
    for patch in &ps.local_points {
        let mu = centroid(patch).expect("non-empty patch");
        h = h.max(dist(&mu, &global_centroid));
        g = g.max(patch_diameter(patch));
        g_soft = g_soft.max(soft_patch_diameter(patch, DIAMETER_SHARPNESS));
    }
    Thresholds {
        h,
        g,
        g_soft,
        global_centroid,
    }
}
