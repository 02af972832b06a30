//! Procedural "tops" generation with canonical material coordinates, plus
//! ground-truth cross-instance correspondence queries.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FcbvError, Result};
use crate::geometry::{vec3, CoverageGrid};
use crate::io::{ArrayContainer, ArrayData};

/// Spring stiffness classes of the mass-spring mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpringClass {
    Structural,
    Shear,
    Bend,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
    pub class: SpringClass,
}

/// Anatomical region of a vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartLabel {
    Body,
    SleeveLeft,
    SleeveRight,
    BottomHem,
}

impl PartLabel {
    pub fn to_index(self) -> i64 {
        match self {
            PartLabel::Body => 0,
            PartLabel::SleeveLeft => 1,
            PartLabel::SleeveRight => 2,
            PartLabel::BottomHem => 3,
        }
    }

    pub fn from_index(i: i64) -> Result<Self> {
        Ok(match i {
            0 => PartLabel::Body,
            1 => PartLabel::SleeveLeft,
            2 => PartLabel::SleeveRight,
            3 => PartLabel::BottomHem,
            _ => return Err(FcbvError::Container(format!("bad part label {i}"))),
        })
    }
}

/// Metric dimensions and material constants of one garment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceParams {
    pub body_width: f64,
    pub body_height: f64,
    pub sleeve_length: f64,
    pub sleeve_width: f64,
    pub pitch: f64,
    pub mass: f64,
    pub k_structural: f64,
    pub k_shear: f64,
    pub k_bend: f64,
}

/// Sampling ranges for [`generate_garment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GarmentRanges {
    pub body_width: (f64, f64),
    pub body_height: (f64, f64),
    pub sleeve_length: (f64, f64),
    pub sleeve_width: (f64, f64),
    pub pitch: (f64, f64),
    pub mass: f64,
    pub k_structural: f64,
    pub k_shear: f64,
    pub k_bend: f64,
    /// Grid resolution at which the flat-pose coverage cache is built.
    pub coverage_resolution: usize,
}

impl Default for GarmentRanges {
    fn default() -> Self {
        GarmentRanges {
            body_width: (0.26, 0.40),
            body_height: (0.30, 0.44),
            sleeve_length: (0.10, 0.20),
            sleeve_width: (0.09, 0.14),
            pitch: (0.024, 0.032),
            mass: 0.18,
            k_structural: 45.0,
            k_shear: 18.0,
            k_bend: 6.0,
            coverage_resolution: 256,
        }
    }
}

impl GarmentRanges {
    pub fn validate(&self) -> Result<()> {
        let pos = |(lo, hi): (f64, f64), name: &str, allow_zero: bool| -> Result<()> {
            let min_ok = if allow_zero { lo >= 0.0 } else { lo > 0.0 };
            if !min_ok || hi < lo || !hi.is_finite() {
                return Err(FcbvError::invalid(format!("bad garment range for {name}: ({lo}, {hi})")));
            }
            Ok(())
        };
        pos(self.body_width, "body_width", false)?;
        pos(self.body_height, "body_height", false)?;
        pos(self.sleeve_length, "sleeve_length", true)?;
        pos(self.sleeve_width, "sleeve_width", false)?;
        pos(self.pitch, "pitch", false)?;
        if self.mass <= 0.0 || self.k_structural <= 0.0 || self.k_shear <= 0.0 || self.k_bend <= 0.0 {
            return Err(FcbvError::invalid("mass and stiffnesses must be positive"));
        }
        Ok(())
    }
}

/// A procedural garment mesh: flat rest pose in the z = 0 plane, spring
/// topology, per-vertex material coordinates, and the cached rest-pose
/// coverage cell count.
#[derive(Debug, Clone)]
pub struct GarmentInstance {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub springs: Vec<Spring>,
    pub canonical_uv: Vec<[f64; 2]>,
    pub part_labels: Vec<PartLabel>,
    pub flat_coverage_cells: usize,
    pub coverage_resolution: usize,
    pub params: InstanceParams,
    pub seed: u64,
}

impl GarmentInstance {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn mass_per_vertex(&self) -> f64 {
        self.params.mass / self.vertices.len() as f64
    }

    /// Coverage grid matching the cached rest-pose rasterization.
    pub fn coverage_grid(&self) -> CoverageGrid {
        CoverageGrid { extent: 1.5, resolution: self.coverage_resolution }
    }

    /// Projected coverage of a posed copy of this garment, normalized by the
    /// flat rest pose.
    pub fn projected_coverage(&self, positions: &[[f64; 3]]) -> Result<crate::geometry::CoverageResult> {
        crate::geometry::projected_coverage(
            positions,
            &self.triangles,
            self.flat_coverage_cells,
            &self.coverage_grid(),
        )
    }

    /// Shortest on-surface distance between two vertices along spring edges
    /// (structural and shear), in rest-pose meters.
    pub fn geodesic_distances_from(&self, source: usize) -> Vec<f64> {
        let n = self.vertices.len();
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for s in &self.springs {
            if s.class == SpringClass::Bend {
                continue;
            }
            adj[s.i].push((s.j, s.rest_length));
            adj[s.j].push((s.i, s.rest_length));
        }
        let mut dist = vec![f64::INFINITY; n];
        dist[source] = 0.0;
        let mut heap = std::collections::BinaryHeap::new();
        heap.push((std::cmp::Reverse(ordered_float(0.0)), source));
        while let Some((std::cmp::Reverse(d), u)) = heap.pop() {
            let d = d.0;
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push((std::cmp::Reverse(ordered_float(nd)), v));
                }
            }
        }
        dist
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "garment_instance",
            "seed": self.seed,
            "instance_params": self.params,
            "flat_coverage_cells": self.flat_coverage_cells,
            "coverage_resolution": self.coverage_resolution,
        });
        let mut c = ArrayContainer::new(meta);
        c.push_points("vertices", &self.vertices);
        let tri_flat: Vec<i64> = self
            .triangles
            .iter()
            .flat_map(|t| t.iter().map(|&v| v as i64))
            .collect();
        c.push("triangles", vec![self.triangles.len(), 3], ArrayData::I64(tri_flat));
        let spring_idx: Vec<i64> = self
            .springs
            .iter()
            .flat_map(|s| {
                [s.i as i64, s.j as i64, match s.class {
                    SpringClass::Structural => 0,
                    SpringClass::Shear => 1,
                    SpringClass::Bend => 2,
                }]
            })
            .collect();
        c.push("spring_topology", vec![self.springs.len(), 3], ArrayData::I64(spring_idx));
        c.push_f64_vec(
            "spring_rest_lengths",
            &self.springs.iter().map(|s| s.rest_length).collect::<Vec<_>>(),
        );
        let uv_flat: Vec<f64> = self.canonical_uv.iter().flat_map(|u| u.iter().copied()).collect();
        c.push("canonical_uv", vec![self.canonical_uv.len(), 2], ArrayData::F64(uv_flat));
        c.push(
            "part_labels",
            vec![self.part_labels.len()],
            ArrayData::I64(self.part_labels.iter().map(|p| p.to_index()).collect()),
        );
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = ArrayContainer::load(path)?;
        let params: InstanceParams = serde_json::from_value(c.meta["instance_params"].clone())?;
        let vertices = c.points("vertices")?;
        let tri_raw = c.indices("triangles")?;
        let triangles: Vec<[usize; 3]> =
            tri_raw.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect();
        let topo = c.indices("spring_topology")?;
        let rests = c.f64_vec("spring_rest_lengths")?;
        let springs: Vec<Spring> = topo
            .chunks_exact(3)
            .zip(rests.iter())
            .map(|(t, &rest)| {
                Ok(Spring {
                    i: t[0],
                    j: t[1],
                    rest_length: rest,
                    class: match t[2] {
                        0 => SpringClass::Structural,
                        1 => SpringClass::Shear,
                        2 => SpringClass::Bend,
                        other => {
                            return Err(FcbvError::Container(format!("bad spring class {other}")))
                        }
                    },
                })
            })
            .collect::<Result<_>>()?;
        let uv_mat = c.f64_matrix("canonical_uv")?;
        let canonical_uv: Vec<[f64; 2]> =
            uv_mat.rows().into_iter().map(|r| [r[0], r[1]]).collect();
        let part_labels: Vec<PartLabel> = c
            .indices("part_labels")?
            .into_iter()
            .map(|i| PartLabel::from_index(i as i64))
            .collect::<Result<_>>()?;
        Ok(GarmentInstance {
            vertices,
            triangles,
            springs,
            canonical_uv,
            part_labels,
            flat_coverage_cells: c.meta["flat_coverage_cells"].as_u64().unwrap_or(0) as usize,
            coverage_resolution: c.meta["coverage_resolution"].as_u64().unwrap_or(256) as usize,
            params,
            seed: c.meta["seed"].as_u64().unwrap_or(0),
        })
    }
}

fn ordered_float(v: f64) -> ordered::OrderedF64 {
    ordered::OrderedF64(v)
}

mod ordered {
    #[derive(PartialEq, PartialOrd)]
    pub struct OrderedF64(pub f64);
    impl Eq for OrderedF64 {}
    #[allow(clippy::derive_ord_xor_partial_ord)]
    impl Ord for OrderedF64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.partial_cmp(other).expect("geodesic distances are finite")
        }
    }
}

/// Deterministic procedural top: a body panel with two optional sleeve
/// panels joined at shoulder seams, flat in the z = 0 plane and centered at
/// the origin.
pub fn generate_garment(seed: u64, ranges: &GarmentRanges) -> Result<GarmentInstance> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67617273);
    let sample = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    };
    let pitch = sample(&mut rng, ranges.pitch);
    let snap = |v: f64, min_cells: usize| -> usize {
        ((v / pitch).round() as usize).max(min_cells)
    };
    let body_nx = snap(sample(&mut rng, ranges.body_width), 4);
    let body_ny = snap(sample(&mut rng, ranges.body_height), 4);
    let sleeve_raw = sample(&mut rng, ranges.sleeve_length);
    let sleeve_nx = if sleeve_raw < pitch * 0.5 { 0 } else { snap(sleeve_raw, 1) };
    let sleeve_ny = snap(sample(&mut rng, ranges.sleeve_width), 2).min(body_ny);

    let params = InstanceParams {
        body_width: body_nx as f64 * pitch,
        body_height: body_ny as f64 * pitch,
        sleeve_length: sleeve_nx as f64 * pitch,
        sleeve_width: sleeve_ny as f64 * pitch,
        pitch,
        mass: ranges.mass,
        k_structural: ranges.k_structural,
        k_shear: ranges.k_shear,
        k_bend: ranges.k_bend,
    };
    build_instance(seed, params, ranges.coverage_resolution)
}

/// Mesh construction from already-snapped parameters.
pub fn build_instance(
    seed: u64,
    params: InstanceParams,
    coverage_resolution: usize,
) -> Result<GarmentInstance> {
    let pitch = params.pitch;
    let body_nx = (params.body_width / pitch).round() as usize;
    let body_ny = (params.body_height / pitch).round() as usize;
    let sleeve_nx = (params.sleeve_length / pitch).round() as usize;
    let sleeve_ny = (params.sleeve_width / pitch).round() as usize;
    if body_nx < 2 || body_ny < 2 || (sleeve_nx > 0 && sleeve_ny < 1) {
        return Err(FcbvError::invalid("degenerate garment dimensions"));
    }

    // Grid node bookkeeping: (col, row) -> vertex id, col in a virtual frame
    // spanning sleeves and body. Body columns 0..=body_nx, rows 0..=body_ny.
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut uv: Vec<[f64; 2]> = Vec::new();
    let mut labels: Vec<PartLabel> = Vec::new();
    let mut body_id = vec![vec![usize::MAX; body_ny + 1]; body_nx + 1];

    for col in 0..=body_nx {
        for row in 0..=body_ny {
            let x = col as f64 * pitch;
            let y = row as f64 * pitch;
            body_id[col][row] = vertices.len();
            vertices.push([x, y, 0.0]);
            uv.push([col as f64 / body_nx as f64, row as f64 / body_ny as f64]);
            labels.push(if row == 0 { PartLabel::BottomHem } else { PartLabel::Body });
        }
    }

    // Sleeve bands share the top `sleeve_ny` rows of the body side columns.
    let seam_rows: Vec<usize> = ((body_ny - sleeve_ny)..=body_ny).collect();
    let mut left_id: Vec<Vec<usize>> = Vec::new(); // [out_col][band_row]
    let mut right_id: Vec<Vec<usize>> = Vec::new();
    if sleeve_nx > 0 {
        // Column 0 of each sleeve is the body's seam column.
        left_id.push(seam_rows.iter().map(|&r| body_id[0][r]).collect());
        right_id.push(seam_rows.iter().map(|&r| body_id[body_nx][r]).collect());
        for (seam_col, ids, dir) in [(0usize, &mut left_id, -1.0f64), (body_nx, &mut right_id, 1.0)] {
            for out in 1..=sleeve_nx {
                let mut col_ids = Vec::with_capacity(seam_rows.len());
                for &r in &seam_rows {
                    let x = seam_col as f64 * pitch + dir * out as f64 * pitch;
                    let y = r as f64 * pitch;
                    col_ids.push(vertices.len());
                    vertices.push([x, y, 0.0]);
                    uv.push([
                        out as f64 / sleeve_nx as f64,
                        (r - (body_ny - sleeve_ny)) as f64 / sleeve_ny as f64,
                    ]);
                    labels.push(if dir < 0.0 { PartLabel::SleeveLeft } else { PartLabel::SleeveRight });
                }
                ids.push(col_ids);
            }
        }
        // Seam vertices belong to the sleeves; rewrite their uv to the seam
        // column of the sleeve chart so seams correspond across instances.
        for (ids, label) in [(&left_id, PartLabel::SleeveLeft), (&right_id, PartLabel::SleeveRight)] {
            for (band_row, &v) in ids[0].iter().enumerate() {
                labels[v] = label;
                uv[v] = [0.0, band_row as f64 / sleeve_ny as f64];
            }
        }
    }

    // Center the garment at the origin in xy.
    let mut cx = 0.0;
    let mut cy = 0.0;
    for v in &vertices {
        cx += v[0];
        cy += v[1];
    }
    cx /= vertices.len() as f64;
    cy /= vertices.len() as f64;
    for v in vertices.iter_mut() {
        v[0] -= cx;
        v[1] -= cy;
    }

    // Triangles and springs from the three panel grids.
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut springs: Vec<Spring> = Vec::new();
    let mut spring_set = std::collections::BTreeSet::new();
    let mut grids: Vec<Vec<Vec<usize>>> = vec![body_id
        .iter()
        .map(|col| col.clone())
        .collect()];
    if sleeve_nx > 0 {
        let mut left_rev = left_id.clone();
        left_rev.reverse(); // cuff..seam so x increases with column index
        grids.push(left_rev);
        grids.push(right_id.clone());
    }
    for grid in &grids {
        let ncol = grid.len();
        let nrow = grid[0].len();
        for c in 0..ncol - 1 {
            for r in 0..nrow - 1 {
                let v00 = grid[c][r];
                let v10 = grid[c + 1][r];
                let v01 = grid[c][r + 1];
                let v11 = grid[c + 1][r + 1];
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let mut add_spring = |a: usize, b: usize, class: SpringClass| {
            let key = (a.min(b), a.max(b));
            if spring_set.insert(key) {
                springs.push(Spring {
                    i: key.0,
                    j: key.1,
                    rest_length: vec3::dist(vertices[key.0], vertices[key.1]),
                    class,
                });
            }
        };
        for c in 0..ncol {
            for r in 0..nrow {
                if c + 1 < ncol {
                    add_spring(grid[c][r], grid[c + 1][r], SpringClass::Structural);
                }
                if r + 1 < nrow {
                    add_spring(grid[c][r], grid[c][r + 1], SpringClass::Structural);
                }
                if c + 1 < ncol && r + 1 < nrow {
                    add_spring(grid[c][r], grid[c + 1][r + 1], SpringClass::Shear);
                    add_spring(grid[c + 1][r], grid[c][r + 1], SpringClass::Shear);
                }
                if c + 2 < ncol {
                    add_spring(grid[c][r], grid[c + 2][r], SpringClass::Bend);
                }
                if r + 2 < nrow {
                    add_spring(grid[c][r], grid[c][r + 2], SpringClass::Bend);
                }
            }
        }
    }

    let grid = CoverageGrid::new(coverage_resolution)?;
    let flat_cells = grid.occupied_cells(&vertices, &triangles);
    if flat_cells == 0 {
        return Err(FcbvError::invalid("flat rest pose rasterized to zero cells"));
    }

    Ok(GarmentInstance {
        vertices,
        triangles,
        springs,
        canonical_uv: uv,
        part_labels: labels,
        flat_coverage_cells: flat_cells,
        coverage_resolution,
        params,
        seed,
    })
}

/// Ground-truth cross-instance correspondence: the vertex on `b` sharing
/// `vertex_a`'s part whose material coordinates are nearest. `None` when the
/// part does not exist on `b` (e.g. sleeves on a vest).
pub fn canonical_correspondence(
    a: &GarmentInstance,
    b: &GarmentInstance,
    vertex_a: usize,
) -> Option<usize> {
    let part = a.part_labels[vertex_a];
    let target_uv = a.canonical_uv[vertex_a];
    let mut best: Option<(f64, usize)> = None;
    for (i, (&label, uv)) in b.part_labels.iter().zip(b.canonical_uv.iter()).enumerate() {
        if label != part {
            continue;
        }
        let d = (uv[0] - target_uv[0]).powi(2) + (uv[1] - target_uv[1]).powi(2);
        let better = match best {
            None => true,
            Some((bd, _)) => d < bd,
        };
        if better {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges() -> GarmentRanges {
        GarmentRanges { coverage_resolution: 128, ..GarmentRanges::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_garment(7, &ranges()).unwrap();
        let b = generate_garment(7, &ranges()).unwrap();
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.springs.len(), b.springs.len());
        assert_eq!(a.canonical_uv, b.canonical_uv);
    }

    #[test]
    fn distinct_seeds_give_distinct_params() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..50u64 {
            let g = generate_garment(seed, &ranges()).unwrap();
            let key = format!(
                "{:.9}-{:.9}-{:.9}-{:.9}-{:.9}",
                g.params.body_width,
                g.params.body_height,
                g.params.sleeve_length,
                g.params.sleeve_width,
                g.params.pitch
            );
            seen.insert(key);
        }
        assert_eq!(seen.len(), 50);
    }

    #[test]
    fn flat_pose_has_zero_height() {
        let g = generate_garment(3, &ranges()).unwrap();
        assert!(g.vertices.iter().all(|v| v[2] == 0.0));
    }

    fn connected(g: &GarmentInstance) -> bool {
        let n = g.vertices.len();
        let mut adj = vec![Vec::new(); n];
        for s in &g.springs {
            adj[s.i].push(s.j);
            adj[s.j].push(s.i);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    }

    #[test]
    fn spring_graph_is_connected() {
        for seed in [0, 5, 9] {
            let g = generate_garment(seed, &ranges()).unwrap();
            assert!(connected(&g), "seed {seed} produced a disconnected mesh");
        }
    }

    #[test]
    fn vest_when_sleeve_length_zero() {
        let mut r = ranges();
        r.sleeve_length = (0.0, 0.0);
        let g = generate_garment(4, &r).unwrap();
        assert!(g.part_labels.iter().all(|&p| p != PartLabel::SleeveLeft));
        assert!(connected(&g));
    }

    #[test]
    fn uv_injective_per_part() {
        let g = generate_garment(11, &ranges()).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for (i, uv) in g.canonical_uv.iter().enumerate() {
            let key = (
                g.part_labels[i].to_index(),
                (uv[0] * 1e9).round() as i64,
                (uv[1] * 1e9).round() as i64,
            );
            assert!(seen.insert(key), "duplicate uv in part at vertex {i}");
        }
    }

    #[test]
    fn correspondence_identity_on_same_instance() {
        let g = generate_garment(2, &ranges()).unwrap();
        for v in [0, 10, g.vertices.len() - 1] {
            assert_eq!(canonical_correspondence(&g, &g, v), Some(v));
        }
    }

    #[test]
    fn correspondence_shoulder_seam_across_sizes() {
        let a = generate_garment(2, &ranges()).unwrap();
        let b = generate_garment(13, &ranges()).unwrap();
        // Pick a left-sleeve seam vertex on `a` (seam column has uv u = 0).
        let va = (0..a.vertices.len())
            .find(|&i| a.part_labels[i] == PartLabel::SleeveLeft && a.canonical_uv[i][0] == 0.0)
            .expect("left seam vertex");
        let vb = canonical_correspondence(&a, &b, va).expect("correspondence");
        assert_eq!(b.part_labels[vb], PartLabel::SleeveLeft);
        // Exhaustive uv-distance oracle.
        let target = a.canonical_uv[va];
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, uv) in b.canonical_uv.iter().enumerate() {
            if b.part_labels[i] != PartLabel::SleeveLeft {
                continue;
            }
            let d = (uv[0] - target[0]).powi(2) + (uv[1] - target[1]).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        assert_eq!(vb, best.1);
        assert!(best.0.sqrt() < 0.05, "uv distance {} too large", best.0.sqrt());
    }

    #[test]
    fn sleeve_to_vest_has_no_correspondence() {
        let a = generate_garment(2, &ranges()).unwrap();
        let mut r = ranges();
        r.sleeve_length = (0.0, 0.0);
        let vest = generate_garment(4, &r).unwrap();
        let va = (0..a.vertices.len())
            .find(|&i| a.part_labels[i] == PartLabel::SleeveRight)
            .unwrap();
        assert_eq!(canonical_correspondence(&a, &vest, va), None);
    }

    #[test]
    fn rejects_degenerate_ranges() {
        let mut r = ranges();
        r.body_width = (0.0, 0.0);
        assert!(generate_garment(1, &r).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let g = generate_garment(21, &ranges()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.fcbv");
        g.save(&path).unwrap();
        let loaded = GarmentInstance::load(&path).unwrap();
        assert_eq!(loaded.vertices, g.vertices);
        assert_eq!(loaded.triangles, g.triangles);
        assert_eq!(loaded.part_labels, g.part_labels);
        assert_eq!(loaded.flat_coverage_cells, g.flat_coverage_cells);
        assert_eq!(loaded.params, g.params);
    }

    #[test]
    fn geodesic_is_zero_at_source_and_grows() {
        let g = generate_garment(2, &ranges()).unwrap();
        let d = g.geodesic_distances_from(0);
        assert_eq!(d[0], 0.0);
        assert!(d.iter().all(|&x| x.is_finite()));
        assert!(d.iter().any(|&x| x > 0.2));
    }
}
