//! Pure geometric operations on point clouds and meshes: sampling,
//! neighborhoods, normalization, policy-input assembly, and projected
//! coverage. Everything here is a pure function of its inputs.

use ndarray::Array2;

use crate::error::{FcbvError, Result};

pub mod vec3 {
    pub fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }
    pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
    pub fn scale(a: [f64; 3], c: f64) -> [f64; 3] {
        [a[0] * c, a[1] * c, a[2] * c]
    }
    pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }
    pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }
    pub fn norm_sq(a: [f64; 3]) -> f64 {
        dot(a, a)
    }
    pub fn norm(a: [f64; 3]) -> f64 {
        norm_sq(a).sqrt()
    }
    pub fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
        norm_sq(sub(a, b))
    }
    pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        dist_sq(a, b).sqrt()
    }
    pub fn normalize(a: [f64; 3]) -> [f64; 3] {
        let n = norm(a);
        if n < 1e-12 {
            [0.0, 0.0, 0.0]
        } else {
            scale(a, 1.0 / n)
        }
    }
}

/// An observed point set in the world frame. When the cloud was rendered by
/// the simulator, `source_vertex_ids` maps each point to the mesh vertex it
/// was sampled nearest to.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub source_vertex_ids: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(FcbvError::invalid("point cloud must contain at least one point"));
        }
        if points.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(FcbvError::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(PointCloud { points, source_vertex_ids: None })
    }

    pub fn with_sources(points: Vec<[f64; 3]>, sources: Vec<usize>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        if sources.len() != cloud.len() {
            return Err(FcbvError::invalid("source id count must match point count"));
        }
        cloud.source_vertex_ids = Some(sources);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = vec3::add(c, *p);
        }
        vec3::scale(c, 1.0 / self.points.len() as f64)
    }
}

/// Farthest-point sampling over a raw point slice. Each successive pick
/// maximizes the minimum distance to the already-selected set; ties break to
/// the lowest index.
pub fn fps_indices(points: &[[f64; 3]], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if n == 0 {
        return Err(FcbvError::invalid("farthest point sampling on empty cloud"));
    }
    if k < 1 || k > n {
        return Err(FcbvError::invalid(format!(
            "farthest point sampling needs 1 <= k <= {n}, got {k}"
        )));
    }
    if seed_index >= n {
        return Err(FcbvError::invalid(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = seed_index;
    selected.push(current);
    for _ in 1..k {
        let mut best = 0usize;
        let mut best_dist = f64::NEG_INFINITY;
        for i in 0..n {
            let d = vec3::dist_sq(points[i], points[current]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_dist && !selected.contains(&i) {
                best_dist = min_dist[i];
                best = i;
            }
        }
        selected.push(best);
        current = best;
    }
    Ok(selected)
}

/// Spec-facing wrapper over [`fps_indices`].
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed_index: usize) -> Result<Vec<usize>> {
    fps_indices(&cloud.points, k, seed_index)
}

/// Radius neighborhoods around existing cloud points. The center is always
/// first; remaining members are within `radius`, truncated to
/// `max_neighbors`, tie-broken by ascending index.
pub fn neighborhood_query(
    cloud: &PointCloud,
    centers: &[usize],
    radius: f64,
    max_neighbors: usize,
) -> Result<Vec<Vec<usize>>> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(FcbvError::invalid(format!("radius must be positive, got {radius}")));
    }
    if max_neighbors < 1 {
        return Err(FcbvError::invalid("max_neighbors must be at least 1"));
    }
    let r_sq = radius * radius;
    let mut out = Vec::with_capacity(centers.len());
    for &c in centers {
        if c >= cloud.len() {
            return Err(FcbvError::invalid(format!("center index {c} out of range")));
        }
        let mut list = Vec::with_capacity(max_neighbors);
        list.push(c);
        for (i, p) in cloud.points.iter().enumerate() {
            if list.len() >= max_neighbors {
                break;
            }
            if i != c && vec3::dist_sq(*p, cloud.points[c]) <= r_sq {
                list.push(i);
            }
        }
        out.push(list);
    }
    Ok(out)
}

/// Neighborhood variant used inside the point networks: members are ordered
/// by (distance, index) before truncation so the grouping is stable under
/// input permutation for generic clouds.
pub fn radius_neighbors_ranked(
    points: &[[f64; 3]],
    center: usize,
    radius: f64,
    max_neighbors: usize,
) -> Vec<usize> {
    let r_sq = radius * radius;
    let mut cands: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, p)| i != center && vec3::dist_sq(*p, points[center]) <= r_sq)
        .map(|(i, p)| (vec3::dist_sq(*p, points[center]), i))
        .collect();
    cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut list = Vec::with_capacity(max_neighbors);
    list.push(center);
    for (_, i) in cands.into_iter().take(max_neighbors.saturating_sub(1)) {
        list.push(i);
    }
    list
}

/// Indices and inverse-distance weights of (up to) the three nearest coarse
/// points for each fine point; used for feature interpolation.
pub fn three_nn_weights(
    fine: &[[f64; 3]],
    coarse: &[[f64; 3]],
) -> (Vec<[usize; 3]>, Vec<[f64; 3]>) {
    assert!(!coarse.is_empty());
    let mut idx_out = Vec::with_capacity(fine.len());
    let mut w_out = Vec::with_capacity(fine.len());
    for f in fine {
        let mut best: Vec<(f64, usize)> = coarse
            .iter()
            .enumerate()
            .map(|(i, c)| (vec3::dist_sq(*f, *c), i))
            .collect();
        best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        best.truncate(3);
        while best.len() < 3 {
            best.push(best[best.len() - 1]);
        }
        let mut w = [0.0; 3];
        let mut idx = [0usize; 3];
        let mut total = 0.0;
        for (j, (d_sq, i)) in best.iter().enumerate() {
            let inv = 1.0 / (d_sq + 1e-10);
            w[j] = inv;
            idx[j] = *i;
            total += inv;
        }
        for wj in w.iter_mut() {
            *wj /= total;
        }
        idx_out.push(idx);
        w_out.push(w);
    }
    (idx_out, w_out)
}

/// Per-point feature rows aligned with a source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub features: Array2<f64>,
}

impl FeatureField {
    pub fn new(features: Array2<f64>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FcbvError::invalid("feature field contains non-finite values"));
        }
        Ok(FeatureField { features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Network input: centroid-centered, scale-normalized coordinates next to
/// L2-normalized feature rows, plus the transform back to the world frame.
#[derive(Debug, Clone)]
pub struct PolicyInput {
    pub coords_norm: Array2<f64>,
    pub feats_norm: Array2<f64>,
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl PolicyInput {
    pub fn len(&self) -> usize {
        self.coords_norm.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords_norm.nrows() == 0
    }

    pub fn width(&self) -> usize {
        3 + self.feats_norm.ncols()
    }

    /// Normalized coordinates as a point list (used for grouping geometry).
    pub fn coords_norm_points(&self) -> Vec<[f64; 3]> {
        self.coords_norm
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect()
    }

    /// Full `n x (3 + d)` input matrix.
    pub fn combined(&self) -> Array2<f64> {
        let n = self.len();
        let d = self.feats_norm.ncols();
        let mut out = Array2::zeros((n, 3 + d));
        out.slice_mut(ndarray::s![.., 0..3]).assign(&self.coords_norm);
        out.slice_mut(ndarray::s![.., 3..]).assign(&self.feats_norm);
        out
    }

    pub fn to_world(&self, p_norm: [f64; 3]) -> [f64; 3] {
        vec3::add(vec3::scale(p_norm, self.scale), self.centroid)
    }

    pub fn to_norm(&self, p_world: [f64; 3]) -> [f64; 3] {
        vec3::scale(vec3::sub(p_world, self.centroid), 1.0 / self.scale)
    }
}

/// Centers coordinates at the centroid, scales by the maximum centroid
/// distance, and L2-normalizes each feature row.
pub fn assemble_policy_input(cloud: &PointCloud, feats: &FeatureField) -> Result<PolicyInput> {
    let n = cloud.len();
    if feats.len() != n {
        return Err(FcbvError::invalid(format!(
            "feature rows ({}) must match cloud points ({n})",
            feats.len()
        )));
    }
    let centroid = cloud.centroid();
    let mut scale = 0.0f64;
    for p in &cloud.points {
        scale = scale.max(vec3::dist(*p, centroid));
    }
    if scale < 1e-12 {
        scale = 1.0;
    }
    let mut coords = Array2::zeros((n, 3));
    for (i, p) in cloud.points.iter().enumerate() {
        let q = vec3::scale(vec3::sub(*p, centroid), 1.0 / scale);
        coords[[i, 0]] = q[0];
        coords[[i, 1]] = q[1];
        coords[[i, 2]] = q[2];
    }
    let mut fnorm = feats.features.clone();
    for (i, mut row) in fnorm.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            return Err(FcbvError::DegenerateFeature(i));
        }
        row /= norm;
    }
    Ok(PolicyInput { coords_norm: coords, feats_norm: fnorm, centroid, scale })
}

/// Fixed workspace grid for coverage rasterization.
#[derive(Debug, Clone, Copy)]
pub struct CoverageGrid {
    /// Side length of the square workspace in meters, centered at the origin.
    pub extent: f64,
    pub resolution: usize,
}

impl CoverageGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 16 {
            return Err(FcbvError::invalid(format!(
                "grid resolution must be >= 16, got {resolution}"
            )));
        }
        Ok(CoverageGrid { extent: 1.5, resolution })
    }

    /// Number of grid cells whose centers fall inside the vertical projection
    /// of at least one triangle.
    pub fn occupied_cells(&self, positions: &[[f64; 3]], triangles: &[[usize; 3]]) -> usize {
        let r = self.resolution;
        let cell = self.extent / r as f64;
        let half = self.extent / 2.0;
        let mut bits = vec![0u64; (r * r + 63) / 64];
        for tri in triangles {
            let a = positions[tri[0]];
            let b = positions[tri[1]];
            let c = positions[tri[2]];
            let (ax, ay) = (a[0], a[1]);
            let (bx, by) = (b[0], b[1]);
            let (cx, cy) = (c[0], c[1]);
            let area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
            if area2.abs() < 1e-14 {
                continue;
            }
            let min_x = ax.min(bx).min(cx);
            let max_x = ax.max(bx).max(cx);
            let min_y = ay.min(by).min(cy);
            let max_y = ay.max(by).max(cy);
            let i0 = (((min_x + half) / cell).floor().max(0.0)) as usize;
            let i1 = (((max_x + half) / cell).ceil()).min(r as f64) as usize;
            let j0 = (((min_y + half) / cell).floor().max(0.0)) as usize;
            let j1 = (((max_y + half) / cell).ceil()).min(r as f64) as usize;
            let sign = area2.signum();
            for i in i0..i1 {
                let px = -half + (i as f64 + 0.5) * cell;
                for j in j0..j1 {
                    let py = -half + (j as f64 + 0.5) * cell;
                    let w0 = ((bx - ax) * (py - ay) - (by - ay) * (px - ax)) * sign;
                    let w1 = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) * sign;
                    let w2 = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) * sign;
                    if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                        let bit = i * r + j;
                        bits[bit / 64] |= 1u64 << (bit % 64);
                    }
                }
            }
        }
        bits.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Projected coverage of a posed mesh, normalized by the cached occupied-cell
/// count of its flat rest pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageResult {
    pub fraction: f64,
    pub degenerate: bool,
}

pub fn projected_coverage(
    positions: &[[f64; 3]],
    triangles: &[[usize; 3]],
    flat_cells: usize,
    grid: &CoverageGrid,
) -> Result<CoverageResult> {
    if triangles.is_empty() {
        return Err(FcbvError::invalid("mesh must have at least one triangle"));
    }
    if flat_cells == 0 {
        return Err(FcbvError::invalid(
            "rest-pose coverage cache is missing (flat cell count is zero)",
        ));
    }
    let occupied = grid.occupied_cells(positions, triangles);
    if occupied == 0 {
        return Ok(CoverageResult { fraction: 0.0, degenerate: true });
    }
    let fraction = (occupied as f64 / flat_cells as f64).min(1.0);
    Ok(CoverageResult { fraction, degenerate: false })
}
