//! Overhead depth-camera stand-in: area-weighted surface sampling of
//! upward-visible triangles.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FcbvError, Result};
use crate::geometry::{vec3, PointCloud};
use crate::sim::garment::GarmentInstance;
use crate::sim::state::SimState;

fn tri_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    0.5 * vec3::norm(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
}

/// Height of the triangle plane at an xy location inside its projection.
fn height_at(a: [f64; 3], b: [f64; 3], c: [f64; 3], x: f64, y: f64) -> Option<f64> {
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if det.abs() < 1e-14 {
        return None;
    }
    let w1 = ((x - a[0]) * (c[1] - a[1]) - (y - a[1]) * (c[0] - a[0])) / det;
    let w2 = ((b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0])) / det;
    let w0 = 1.0 - w1 - w2;
    if w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9 {
        return None;
    }
    Some(w0 * a[2] + w1 * b[2] + w2 * c[2])
}

/// Triangles whose centroid is not shadowed by any higher triangle along the
/// vertical view ray.
fn visible_triangles(positions: &[[f64; 3]], triangles: &[[usize; 3]]) -> Vec<usize> {
    let tri_pts: Vec<([f64; 3], [f64; 3], [f64; 3])> = triangles
        .iter()
        .map(|t| (positions[t[0]], positions[t[1]], positions[t[2]]))
        .collect();
    let centroids: Vec<[f64; 3]> = tri_pts
        .iter()
        .map(|(a, b, c)| vec3::scale(vec3::add(vec3::add(*a, *b), *c), 1.0 / 3.0))
        .collect();
    let bboxes: Vec<[f64; 4]> = tri_pts
        .iter()
        .map(|(a, b, c)| {
            [
                a[0].min(b[0]).min(c[0]),
                a[0].max(b[0]).max(c[0]),
                a[1].min(b[1]).min(c[1]),
                a[1].max(b[1]).max(c[1]),
            ]
        })
        .collect();
    let mut visible = Vec::new();
    'outer: for (t, cen) in centroids.iter().enumerate() {
        for u in 0..triangles.len() {
            if u == t {
                continue;
            }
            let bb = bboxes[u];
            if cen[0] < bb[0] || cen[0] > bb[1] || cen[1] < bb[2] || cen[1] > bb[3] {
                continue;
            }
            let (a, b, c) = tri_pts[u];
            if let Some(h) = height_at(a, b, c, cen[0], cen[1]) {
                if h > cen[2] + 1e-5 {
                    continue 'outer;
                }
            }
        }
        visible.push(t);
    }
    visible
}

/// Samples exactly `n_points` surface points from upward-visible triangles,
/// area-weighted, with each point tagged by its barycentric-nearest vertex.
pub fn render_pointcloud(
    state: &SimState,
    instance: &GarmentInstance,
    n_points: usize,
    seed: u64,
) -> Result<PointCloud> {
    if n_points < 1 {
        return Err(FcbvError::invalid("n_points must be at least 1"));
    }
    let visible = visible_triangles(&state.positions, &instance.triangles);
    let mut cum = Vec::with_capacity(visible.len());
    let mut total = 0.0;
    for &t in &visible {
        let [i, j, k] = instance.triangles[t];
        let area = tri_area(state.positions[i], state.positions[j], state.positions[k]);
        total += area;
        cum.push(total);
    }
    if total < 1e-12 {
        return Err(FcbvError::SimulationDivergence(
            "render failed: no visible surface area".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x72656e64);
    let mut points = Vec::with_capacity(n_points);
    let mut sources = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let r = rng.gen_range(0.0..total);
        let slot = cum.partition_point(|&c| c <= r).min(visible.len() - 1);
        let [i, j, k] = instance.triangles[visible[slot]];
        let (a, b, c) = (state.positions[i], state.positions[j], state.positions[k]);
        let r1: f64 = rng.gen_range(0.0..1.0);
        let r2: f64 = rng.gen_range(0.0..1.0);
        let su = r1.sqrt();
        let w0 = 1.0 - su;
        let w1 = su * (1.0 - r2);
        let w2 = su * r2;
        let p = [
            w0 * a[0] + w1 * b[0] + w2 * c[0],
            w0 * a[1] + w1 * b[1] + w2 * c[1],
            w0 * a[2] + w1 * b[2] + w2 * c[2],
        ];
        let src = if w0 >= w1 && w0 >= w2 {
            i
        } else if w1 >= w2 {
            j
        } else {
            k
        };
        points.push(p);
        sources.push(src);
    }
    PointCloud::with_sources(points, sources)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::garment::{generate_garment, GarmentRanges};
    use crate::sim::primitives::crumple;
    use crate::sim::state::SimParams;

    fn setup() -> GarmentInstance {
        let ranges = GarmentRanges { coverage_resolution: 128, ..GarmentRanges::default() };
        generate_garment(1, &ranges).unwrap()
    }

    #[test]
    fn exact_point_count_and_sources() {
        let g = setup();
        let s = SimState::rest(&g);
        let cloud = render_pointcloud(&s, &g, 10_000, 0).unwrap();
        assert_eq!(cloud.len(), 10_000);
        let sources = cloud.source_vertex_ids.as_ref().unwrap();
        assert_eq!(sources.len(), 10_000);
        assert!(sources.iter().all(|&v| v < g.vertex_count()));
    }

    #[test]
    fn flat_rest_points_lie_on_the_ground() {
        let g = setup();
        let s = SimState::rest(&g);
        let cloud = render_pointcloud(&s, &g, 512, 3).unwrap();
        let thickness = 0.002;
        assert!(cloud.points.iter().all(|p| p[2] >= 0.0 && p[2] <= thickness));
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let g = setup();
        let s = crumple(&g, 3, 9, &SimParams::default()).unwrap();
        let a = render_pointcloud(&s, &g, 777, 5).unwrap();
        let b = render_pointcloud(&s, &g, 777, 5).unwrap();
        assert_eq!(a, b);
        let c = render_pointcloud(&s, &g, 777, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn occluded_layer_is_culled() {
        // Fold the garment in half: the lower layer's triangles under the
        // fold should not contribute samples from directly below the top
        // layer. We check that sampled points concentrate near the top
        // surface where layers overlap.
        let g = setup();
        let mut s = SimState::rest(&g);
        let max_x = s.positions.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_x = s.positions.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let mid = 0.5 * (max_x + min_x);
        for p in s.positions.iter_mut() {
            if p[0] > mid {
                p[0] = 2.0 * mid - p[0];
                p[2] = 0.01; // folded layer floats above the lower one
            }
        }
        let cloud = render_pointcloud(&s, &g, 2000, 1).unwrap();
        // Points in the overlapped band must come from the raised layer.
        let overlapped: Vec<_> = cloud
            .points
            .iter()
            .filter(|p| p[0] < mid - 0.02)
            .collect();
        assert!(!overlapped.is_empty());
        let top_fraction = overlapped.iter().filter(|p| p[2] > 0.005).count() as f64
            / overlapped.len() as f64;
        assert!(top_fraction > 0.95, "only {top_fraction:.2} of overlap points on top layer");
    }

    #[test]
    fn rejects_zero_points() {
        let g = setup();
        let s = SimState::rest(&g);
        assert!(render_pointcloud(&s, &g, 0, 0).is_err());
    }
}
