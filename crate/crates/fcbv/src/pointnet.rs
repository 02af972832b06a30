//! Hierarchical point-network building blocks: set-abstraction levels
//! (farthest-point subsampling + radius grouping + shared MLP + max pool) and
//! feature-propagation levels (inverse-distance interpolation + skip links).
//!
//! Grouping geometry is derived from coordinates only and enters the tape as
//! constants; gradients flow through feature channels.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{fps_indices, radius_neighbors_ranked, three_nn_weights};
use crate::nn::{Binding, Mlp, ParamStore};
use crate::tensor::{TId, Tape};

/// Architecture of a segmentation-style point network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegNetConfig {
    /// Feature channels accompanying each input point (0 = coordinates only).
    pub in_channels: usize,
    /// Centers kept by each set-abstraction level.
    pub sa_centers: Vec<usize>,
    /// Grouping radius per level (in the coordinate units of the input).
    pub sa_radii: Vec<f64>,
    /// Neighbor cap per group.
    pub sa_neighbors: Vec<usize>,
    /// Widths of each set-abstraction MLP (hidden..output).
    pub sa_widths: Vec<Vec<usize>>,
    /// Widths of each feature-propagation MLP, deepest level first.
    pub fp_widths: Vec<Vec<usize>>,
    /// Widths of the final per-point head (hidden layers only).
    pub head_hidden: Vec<usize>,
    /// Per-point output dimension.
    pub out_dim: usize,
}

impl SegNetConfig {
    pub fn levels(&self) -> usize {
        self.sa_centers.len()
    }

    pub fn validate(&self) -> bool {
        let l = self.levels();
        l >= 1
            && self.sa_radii.len() == l
            && self.sa_neighbors.len() == l
            && self.sa_widths.len() == l
            && self.fp_widths.len() == l
            && self.sa_widths.iter().all(|w| !w.is_empty())
            && self.fp_widths.iter().all(|w| !w.is_empty())
    }

    /// Smallest cloud this architecture accepts.
    pub fn min_points(&self) -> usize {
        4
    }
}

/// Segmentation-style point network producing one feature row per input point.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub cfg: SegNetConfig,
    sa_mlps: Vec<Mlp>,
    fp_mlps: Vec<Mlp>,
    head: Mlp,
}

impl SegNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: SegNetConfig) -> Self {
        assert!(cfg.validate(), "inconsistent segnet config");
        let levels = cfg.levels();
        let mut sa_mlps = Vec::with_capacity(levels);
        let mut level_width = cfg.in_channels; // feature width entering each SA level
        let mut sa_out = Vec::with_capacity(levels);
        for l in 0..levels {
            let in_w = 3 + level_width;
            let mut widths = vec![in_w];
            widths.extend_from_slice(&cfg.sa_widths[l]);
            sa_mlps.push(Mlp::new(store, rng, &format!("{name}.sa{l}"), &widths));
            level_width = *cfg.sa_widths[l].last().unwrap();
            sa_out.push(level_width);
        }
        // Feature propagation from level `levels` back to 0; fp_mlps[i]
        // reconstructs level `levels - 1 - i`.
        let mut fp_mlps = Vec::with_capacity(levels);
        let mut carried = sa_out[levels - 1];
        for i in 0..levels {
            let target_level = levels - 1 - i;
            let skip_feat = if target_level == 0 { cfg.in_channels } else { sa_out[target_level - 1] };
            let in_w = carried + 3 + skip_feat;
            let mut widths = vec![in_w];
            widths.extend_from_slice(&cfg.fp_widths[i]);
            fp_mlps.push(Mlp::new(store, rng, &format!("{name}.fp{i}"), &widths));
            carried = *cfg.fp_widths[i].last().unwrap();
        }
        let mut head_widths = vec![carried];
        head_widths.extend_from_slice(&cfg.head_hidden);
        head_widths.push(cfg.out_dim);
        let head = Mlp::new(store, rng, &format!("{name}.head"), &head_widths);
        SegNet { cfg, sa_mlps, fp_mlps, head }
    }

    /// Runs the network over one cloud. `feats` must be `n x in_channels`
    /// when `in_channels > 0`. Output is `n x out_dim`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        coords: &[[f64; 3]],
        feats: Option<TId>,
    ) -> TId {
        let levels = self.cfg.levels();
        let n = coords.len();
        assert!(n >= self.cfg.min_points(), "cloud too small for the backbone");

        let mut level_coords: Vec<Vec<[f64; 3]>> = vec![coords.to_vec()];
        let mut level_feats: Vec<Option<TId>> = vec![feats];

        for l in 0..levels {
            let pts = &level_coords[l];
            let k = self.cfg.sa_centers[l].min(pts.len());
            let seed = canonical_seed(pts);
            let centers = fps_indices(pts, k, seed).expect("fps over non-empty level");

            // Build the grouped neighbor matrix: relative offsets next to
            // gathered features, segments contiguous per center.
            let mut flat_idx = Vec::new();
            let mut offsets = Vec::with_capacity(k + 1);
            offsets.push(0usize);
            let mut rel_rows: Vec<f64> = Vec::new();
            for &c in &centers {
                let members =
                    radius_neighbors_ranked(pts, c, self.cfg.sa_radii[l], self.cfg.sa_neighbors[l]);
                for &m in &members {
                    flat_idx.push(m);
                    rel_rows.push(pts[m][0] - pts[c][0]);
                    rel_rows.push(pts[m][1] - pts[c][1]);
                    rel_rows.push(pts[m][2] - pts[c][2]);
                }
                offsets.push(flat_idx.len());
            }
            let rel = Array2::from_shape_vec((flat_idx.len(), 3), rel_rows).unwrap();
            let rel_id = tape.leaf(rel);
            let group_in = match level_feats[l] {
                Some(f) => {
                    let gathered = tape.gather_rows(f, Rc::new(flat_idx));
                    tape.concat_cols(&[rel_id, gathered])
                }
                None => rel_id,
            };
            let transformed = self.sa_mlps[l].forward_all_relu(tape, binding, group_in);
            let pooled = tape.segment_max(transformed, Rc::new(offsets));

            level_coords.push(centers.iter().map(|&c| pts[c]).collect());
            level_feats.push(Some(pooled));
        }

        // Feature propagation back to the full-resolution cloud.
        let mut carried = level_feats[levels].expect("deepest features");
        for (i, fp) in self.fp_mlps.iter().enumerate() {
            let target = levels - 1 - i;
            let fine = &level_coords[target];
            let coarse = &level_coords[target + 1];
            let (idx, w) = three_nn_weights(fine, coarse);
            let lifted = tape.interp(carried, Rc::new(idx), Rc::new(w));
            let coords_const = tape.leaf(points_matrix(fine));
            let fp_in = match level_feats[target] {
                Some(skip) => tape.concat_cols(&[lifted, coords_const, skip]),
                None => tape.concat_cols(&[lifted, coords_const]),
            };
            carried = fp.forward_all_relu(tape, binding, fp_in);
        }
        self.head.forward(tape, binding, carried)
    }
}

/// Pointwise MLP, column-wise max pool, then a second MLP; used for global
/// predictions over a whole cloud (primitive selection, smoothness).
#[derive(Debug, Clone)]
pub struct GlobalNet {
    point_mlp: Mlp,
    global_mlp: Mlp,
}

impl GlobalNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        point_widths: &[usize],
        global_widths: &[usize],
        out_dim: usize,
    ) -> Self {
        let mut pw = vec![in_dim];
        pw.extend_from_slice(point_widths);
        let point_mlp = Mlp::new(store, rng, &format!("{name}.point"), &pw);
        let mut gw = vec![*pw.last().unwrap()];
        gw.extend_from_slice(global_widths);
        gw.push(out_dim);
        let global_mlp = Mlp::new(store, rng, &format!("{name}.global"), &gw);
        GlobalNet { point_mlp, global_mlp }
    }

    /// Input `n x in_dim`, output `1 x out_dim` (raw, no squashing).
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: TId) -> TId {
        let per_point = self.point_mlp.forward_all_relu(tape, binding, x);
        let pooled = tape.global_max_rows(per_point);
        self.global_mlp.forward(tape, binding, pooled)
    }
}

/// FPS seed chosen by geometry (lexicographically smallest point) so center
/// selection does not depend on input ordering.
pub fn canonical_seed(points: &[[f64; 3]]) -> usize {
    let mut best = 0usize;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = points[best];
        if (p[0], p[1], p[2]) < (b[0], b[1], b[2]) {
            best = i;
        }
    }
    best
}

pub fn points_matrix(points: &[[f64; 3]]) -> Array2<f64> {
    let mut m = Array2::zeros((points.len(), 3));
    for (i, p) in points.iter().enumerate() {
        m[[i, 0]] = p[0];
        m[[i, 1]] = p[1];
        m[[i, 2]] = p[2];
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_cfg(in_channels: usize) -> SegNetConfig {
        SegNetConfig {
            in_channels,
            sa_centers: vec![16, 8],
            sa_radii: vec![0.4, 0.8],
            sa_neighbors: vec![8, 8],
            sa_widths: vec![vec![8, 16], vec![16, 32]],
            fp_widths: vec![vec![16], vec![16]],
            head_hidden: vec![16],
            out_dim: 6,
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2)])
            .collect()
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let net = SegNet::new(&mut store, &mut rng, "t", tiny_cfg(0));
        let cloud = random_cloud(&mut rng, 40);

        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let out = net.forward(&mut tape, &binding, &cloud, None);
            tape.value(out).clone()
        };
        let a = run(&store);
        assert_eq!(a.dim(), (40, 6));
        assert_eq!(a, run(&store), "same cloud must give bitwise-identical output");
    }

    #[test]
    fn permuting_points_permutes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let net = SegNet::new(&mut store, &mut rng, "t", tiny_cfg(0));
        let cloud = random_cloud(&mut rng, 32);
        let mut perm: Vec<usize> = (0..32).collect();
        // Deterministic shuffle.
        for i in (1..32usize).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled: Vec<[f64; 3]> = perm.iter().map(|&i| cloud[i]).collect();

        let eval = |cloud: &[[f64; 3]]| {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape);
            let out = net.forward(&mut tape, &binding, cloud, None);
            tape.value(out).clone()
        };
        let base = eval(&cloud);
        let permuted = eval(&shuffled);
        for (new_row, &src) in perm.iter().enumerate() {
            for c in 0..6 {
                let d = (permuted[[new_row, c]] - base[[src, c]]).abs();
                assert!(d < 1e-9, "row alignment broke: {d}");
            }
        }
    }

    #[test]
    fn gradients_flow_to_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let net = SegNet::new(&mut store, &mut rng, "t", tiny_cfg(2));
        let cloud = random_cloud(&mut rng, 24);
        let feats = Array2::from_shape_fn((24, 2), |_| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let f = tape.leaf(feats);
        let out = net.forward(&mut tape, &binding, &cloud, Some(f));
        let loss = tape.mean_all(out);
        tape.backward(loss);
        let grads = binding.grads(&tape);
        let nonzero = grads.iter().filter(|g| g.iter().any(|&x| x != 0.0)).count();
        // Max pooling can starve a few biases, but the bulk must receive signal.
        assert!(nonzero * 10 >= grads.len() * 8, "{nonzero}/{} params got gradient", grads.len());
    }
}
