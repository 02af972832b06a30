//! Pre-trained, frozen dense geometric features and their contrastive
//! pre-training on simulator-generated correspondence pairs.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FcbvError, Result};
use crate::geometry::{FeatureField, PointCloud};
use crate::io::ArrayContainer;
use crate::nn::{Adam, ParamStore};
use crate::pointnet::{SegNet, SegNetConfig};
use crate::sim::{
    canonical_correspondence, crumple, generate_garment, render_pointcloud, GarmentInstance,
    GarmentRanges, SimParams,
};
use crate::tensor::{TId, Tape};

/// Architecture and contrastive hyperparameters of the feature extractor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractorConfig {
    pub backbone: SegNetConfig,
    /// Softmax temperature of the contrastive loss.
    pub tau: f64,
    /// Negatives per anchor.
    pub m_neg: usize,
    /// Negatives are drawn at least this far (rest-pose meters) from the
    /// positive's source vertex.
    pub neg_exclusion_radius: f64,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            backbone: SegNetConfig {
                in_channels: 0,
                sa_centers: vec![1024, 256, 64],
                sa_radii: vec![0.05, 0.12, 0.30],
                sa_neighbors: vec![16, 16, 16],
                sa_widths: vec![vec![32, 32, 64], vec![64, 64, 128], vec![128, 128, 256]],
                fp_widths: vec![vec![256, 128], vec![128, 128], vec![128, 64]],
                head_hidden: vec![128],
                out_dim: 512,
            },
            tau: 0.07,
            m_neg: 128,
            neg_exclusion_radius: 0.05,
        }
    }
}

impl FeatureExtractorConfig {
    /// Small architecture for fast desk-scale runs and tests.
    pub fn desk(out_dim: usize) -> Self {
        FeatureExtractorConfig {
            backbone: SegNetConfig {
                in_channels: 0,
                sa_centers: vec![128, 32],
                sa_radii: vec![0.06, 0.18],
                sa_neighbors: vec![12, 12],
                sa_widths: vec![vec![32, 32], vec![64, 64]],
                fp_widths: vec![vec![64], vec![48]],
                head_hidden: vec![48],
                out_dim,
            },
            tau: 0.07,
            m_neg: 64,
            neg_exclusion_radius: 0.05,
        }
    }
}

/// The dense geometric feature extractor. Once frozen, the parameter
/// fingerprint pins every weight; downstream training verifies it.
pub struct FeatureExtractorState {
    pub config: FeatureExtractorConfig,
    pub store: ParamStore,
    net: SegNet,
    pub frozen: bool,
    pub fingerprint: String,
    pub training_echo: serde_json::Value,
}

impl FeatureExtractorState {
    pub fn new(config: FeatureExtractorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x66656174);
        let mut store = ParamStore::new();
        let net = SegNet::new(&mut store, &mut rng, "feat", config.backbone.clone());
        FeatureExtractorState {
            config,
            store,
            net,
            frozen: false,
            fingerprint: String::new(),
            training_echo: serde_json::Value::Null,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.backbone.out_dim
    }

    /// Minimum cloud size the backbone accepts.
    pub fn min_points(&self) -> usize {
        16
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.fingerprint = self.store.fingerprint();
    }

    /// Confirms no parameter changed since `freeze`.
    pub fn verify_frozen(&self) -> Result<()> {
        if !self.frozen {
            return Err(FcbvError::ContractViolation("extractor is not frozen".into()));
        }
        if self.store.fingerprint() != self.fingerprint {
            return Err(FcbvError::ContractViolation(
                "frozen extractor parameters were mutated".into(),
            ));
        }
        Ok(())
    }

    /// Runs the backbone on a centroid-centered copy of the cloud inside an
    /// existing tape (used by training graphs).
    pub fn forward_on_tape(&self, tape: &mut Tape, binding: &crate::nn::Binding, cloud: &PointCloud) -> TId {
        let centroid = cloud.centroid();
        let centered: Vec<[f64; 3]> = cloud
            .points
            .iter()
            .map(|p| crate::geometry::vec3::sub(*p, centroid))
            .collect();
        self.net.forward(tape, binding, &centered, None)
    }

    /// Per-point dense features, row-aligned with the input cloud.
    pub fn extract_features(&self, cloud: &PointCloud) -> Result<FeatureField> {
        if cloud.len() < self.min_points() {
            return Err(FcbvError::invalid(format!(
                "cloud has {} points, extractor needs at least {}",
                cloud.len(),
                self.min_points()
            )));
        }
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &binding, cloud);
        FeatureField::new(tape.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "feature_extractor",
            "config": self.config,
            "frozen": self.frozen,
            "fingerprint": self.fingerprint,
            "training": self.training_echo,
        });
        let mut c = ArrayContainer::new(meta);
        self.store.write_arrays(&mut c);
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = ArrayContainer::load(path)?;
        let config: FeatureExtractorConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut state = FeatureExtractorState::new(config, 0);
        state.store.read_arrays(&c)?;
        state.frozen = c.meta["frozen"].as_bool().unwrap_or(false);
        state.fingerprint = c.meta["fingerprint"].as_str().unwrap_or("").to_string();
        state.training_echo = c.meta["training"].clone();
        if state.frozen {
            state.verify_frozen()?;
        }
        Ok(state)
    }
}

/// InfoNCE-style contrastive loss: `-log softmax(sim(a, p) / tau)` over the
/// positive and all negatives, similarities being dot products.
pub fn contrastive_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(FcbvError::invalid(format!("temperature must be positive, got {tau}")));
    }
    if negatives.is_empty() {
        return Err(FcbvError::invalid("need at least one negative sample"));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(FcbvError::invalid("feature dimension mismatch in contrastive loss"));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(dot(anchor, positive) / tau);
    for n in negatives {
        sims.push(dot(anchor, n) / tau);
    }
    let m = sims.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + sims.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
    Ok(lse - sims[0])
}

/// One anchor's contrastive pairing within a pair of feature fields.
#[derive(Debug, Clone)]
pub struct AnchorPairing {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Mean contrastive loss of a batch of pairings, on the tape. `f_a` and
/// `f_b` are per-point feature nodes of the two clouds.
pub fn contrastive_batch_loss(
    tape: &mut Tape,
    f_a_raw: TId,
    f_b_raw: TId,
    pairings: &[AnchorPairing],
    tau: f64,
) -> TId {
    // Similarities are dot products of unit-norm rows (the same
    // normalization the policy input applies).
    let f_a = tape.row_normalize(f_a_raw);
    let f_b = tape.row_normalize(f_b_raw);
    let b = pairings.len();
    let m = pairings[0].negatives.len();
    let anchor_idx: Vec<usize> = pairings.iter().map(|p| p.anchor).collect();
    let pos_idx: Vec<usize> = pairings.iter().map(|p| p.positive).collect();
    let anchors = tape.gather_rows(f_a, Rc::new(anchor_idx.clone()));
    let positives = tape.gather_rows(f_b, Rc::new(pos_idx));
    let pos_sims = tape.row_dot(anchors, positives);

    let mut anchor_rep = Vec::with_capacity(b * m);
    let mut neg_flat = Vec::with_capacity(b * m);
    for p in pairings {
        debug_assert_eq!(p.negatives.len(), m);
        for &n in &p.negatives {
            anchor_rep.push(p.anchor);
            neg_flat.push(n);
        }
    }
    let anchors_rep = tape.gather_rows(f_a, Rc::new(anchor_rep));
    let negs = tape.gather_rows(f_b, Rc::new(neg_flat));
    let neg_sims_flat = tape.row_dot(anchors_rep, negs);
    let neg_sims = tape.reshape(neg_sims_flat, (b, m));

    let logits = tape.concat_cols(&[pos_sims, neg_sims]);
    let scaled = tape.scale(logits, 1.0 / tau);
    let ce = tape.cross_entropy_rows(scaled, Rc::new(vec![0; b]), Rc::new(vec![1.0; b]));
    tape.mean_all(ce)
}

/// Index on `field_b` with maximal dot-product similarity to
/// `field_a[query]`; ties break to the lowest index.
pub fn match_points(field_a: &FeatureField, field_b: &FeatureField, query: usize) -> Result<usize> {
    if field_a.is_empty() || field_b.is_empty() {
        return Err(FcbvError::invalid("cannot match against an empty feature field"));
    }
    if field_a.dim() != field_b.dim() {
        return Err(FcbvError::invalid("feature dimension mismatch"));
    }
    if query >= field_a.len() {
        return Err(FcbvError::invalid(format!("query index {query} out of range")));
    }
    let q = field_a.features.row(query);
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, row) in field_b.features.rows().into_iter().enumerate() {
        let sim = q.dot(&row);
        if sim > best_sim {
            best_sim = sim;
            best = i;
        }
    }
    Ok(best)
}

/// Sizes and seeds of the simulator-backed pre-training corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub n_instances: usize,
    pub deformations_per_instance: usize,
    pub crumple_moves: usize,
    pub n_points: usize,
    pub anchors_per_step: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            n_instances: 24,
            deformations_per_instance: 10,
            crumple_moves: 3,
            n_points: 512,
            anchors_per_step: 48,
            epochs: 6,
            steps_per_epoch: 48,
            learning_rate: 1.0e-3,
            seed: 0,
        }
    }
}

/// One rendered deformation with its correspondence lookup table.
pub struct DeformationSample {
    pub instance_id: usize,
    pub cloud: PointCloud,
    /// Best cloud point for every mesh vertex (nearest in rest pose when the
    /// vertex itself was not sampled).
    pub point_for_vertex: Vec<usize>,
}

impl DeformationSample {
    pub fn build(instance: &GarmentInstance, instance_id: usize, cloud: PointCloud) -> Self {
        let sources = cloud.source_vertex_ids.clone().expect("rendered clouds carry sources");
        let n_vert = instance.vertex_count();
        let mut point_for_vertex = vec![usize::MAX; n_vert];
        for (pt, &v) in sources.iter().enumerate() {
            if point_for_vertex[v] == usize::MAX {
                point_for_vertex[v] = pt;
            }
        }
        // Vertices with no sampled point borrow the nearest sampled vertex.
        let sampled: Vec<usize> =
            (0..n_vert).filter(|&v| point_for_vertex[v] != usize::MAX).collect();
        for v in 0..n_vert {
            if point_for_vertex[v] != usize::MAX {
                continue;
            }
            let mut best = sampled[0];
            let mut best_d = f64::INFINITY;
            for &s in &sampled {
                let d = crate::geometry::vec3::dist_sq(instance.vertices[v], instance.vertices[s]);
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            point_for_vertex[v] = point_for_vertex[best];
        }
        DeformationSample { instance_id, cloud, point_for_vertex }
    }
}

/// The in-memory pre-training corpus: instances plus rendered deformations.
pub struct PretrainCorpus {
    pub instances: Vec<GarmentInstance>,
    pub deformations: Vec<Vec<DeformationSample>>,
}

impl PretrainCorpus {
    pub fn generate(
        cfg: &PretrainConfig,
        ranges: &GarmentRanges,
        sim: &SimParams,
        instance_seed_base: u64,
    ) -> Result<Self> {
        let mut instances = Vec::with_capacity(cfg.n_instances);
        let mut deformations = Vec::with_capacity(cfg.n_instances);
        for i in 0..cfg.n_instances {
            let inst = generate_garment(instance_seed_base + i as u64, ranges)?;
            let mut defs = Vec::with_capacity(cfg.deformations_per_instance);
            for d in 0..cfg.deformations_per_instance {
                let state_seed = cfg.seed
                    .wrapping_mul(0x9e37)
                    .wrapping_add((i * 1009 + d) as u64);
                let state = crumple(&inst, cfg.crumple_moves, state_seed, sim)?;
                let cloud = render_pointcloud(&state, &inst, cfg.n_points, state_seed ^ 0x51)?;
                defs.push(DeformationSample::build(&inst, i, cloud));
            }
            instances.push(inst);
            deformations.push(defs);
        }
        Ok(PretrainCorpus { instances, deformations })
    }
}

/// Draws the anchor/positive/negative index sets for one (A, B) cloud pair.
/// `correspond` maps an A-source vertex to the matching B vertex.
fn build_pairings(
    rng: &mut ChaCha8Rng,
    a: &DeformationSample,
    b: &DeformationSample,
    instance_b: &GarmentInstance,
    correspond: impl Fn(usize) -> Option<usize>,
    n_anchors: usize,
    m_neg: usize,
    exclusion_radius: f64,
) -> Vec<AnchorPairing> {
    let a_sources = a.cloud.source_vertex_ids.as_ref().unwrap();
    let b_sources = b.cloud.source_vertex_ids.as_ref().unwrap();
    let n_a = a.cloud.len();
    let n_b = b.cloud.len();
    let mut out = Vec::with_capacity(n_anchors);
    let mut guard = 0;
    while out.len() < n_anchors && guard < n_anchors * 20 {
        guard += 1;
        let anchor = rng.gen_range(0..n_a);
        let Some(vb) = correspond(a_sources[anchor]) else { continue };
        let positive = b.point_for_vertex[vb];
        let pos_rest = instance_b.vertices[vb];
        let mut negatives = Vec::with_capacity(m_neg);
        let mut neg_guard = 0;
        while negatives.len() < m_neg && neg_guard < m_neg * 30 {
            neg_guard += 1;
            let cand = rng.gen_range(0..n_b);
            let cand_rest = instance_b.vertices[b_sources[cand]];
            if crate::geometry::vec3::dist(cand_rest, pos_rest) > exclusion_radius {
                negatives.push(cand);
            }
        }
        if negatives.len() == m_neg {
            out.push(AnchorPairing { anchor, positive, negatives });
        }
    }
    out
}

/// Per-epoch record of the pre-training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Self-supervised contrastive pre-training: alternating cross-deformation
/// and cross-instance batches, ground-truth correspondences from the
/// simulator. Returns the trained extractor, frozen.
pub fn pretrain_features(
    extractor_cfg: &FeatureExtractorConfig,
    cfg: &PretrainConfig,
    corpus: &PretrainCorpus,
    checkpoint: Option<&Path>,
) -> Result<(FeatureExtractorState, PretrainLog)> {
    if corpus.instances.is_empty() || cfg.deformations_per_instance < 2 {
        return Err(FcbvError::invalid(
            "pre-training needs at least one instance with two deformations",
        ));
    }
    let mut extractor = FeatureExtractorState::new(extractor_cfg.clone(), cfg.seed);
    let mut adam = Adam::new(&extractor.store, cfg.learning_rate, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x70726574);
    let mut log = PretrainLog { epoch_losses: Vec::new(), steps: 0 };

    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0;
        for step_i in 0..cfg.steps_per_epoch {
            let cross_object = step_i % 2 == 1 && corpus.instances.len() > 1;
            let (ia, da, ib, db) = if cross_object {
                let ia = rng.gen_range(0..corpus.instances.len());
                let mut ib = rng.gen_range(0..corpus.instances.len());
                while ib == ia {
                    ib = rng.gen_range(0..corpus.instances.len());
                }
                (
                    ia,
                    rng.gen_range(0..corpus.deformations[ia].len()),
                    ib,
                    rng.gen_range(0..corpus.deformations[ib].len()),
                )
            } else {
                let ia = rng.gen_range(0..corpus.instances.len());
                let da = rng.gen_range(0..corpus.deformations[ia].len());
                let mut db = rng.gen_range(0..corpus.deformations[ia].len());
                while db == da && corpus.deformations[ia].len() > 1 {
                    db = rng.gen_range(0..corpus.deformations[ia].len());
                }
                (ia, da, ia, db)
            };
            let sample_a = &corpus.deformations[ia][da];
            let sample_b = &corpus.deformations[ib][db];
            let inst_a = &corpus.instances[ia];
            let inst_b = &corpus.instances[ib];
            let pairings = build_pairings(
                &mut rng,
                sample_a,
                sample_b,
                inst_b,
                |va| {
                    if ia == ib {
                        Some(va)
                    } else {
                        canonical_correspondence(inst_a, inst_b, va)
                    }
                },
                cfg.anchors_per_step,
                extractor_cfg.m_neg,
                extractor_cfg.neg_exclusion_radius,
            );
            if pairings.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let binding = extractor.store.bind(&mut tape);
            let f_a = extractor.forward_on_tape(&mut tape, &binding, &sample_a.cloud);
            let f_b = extractor.forward_on_tape(&mut tape, &binding, &sample_b.cloud);
            let loss = contrastive_batch_loss(&mut tape, f_a, f_b, &pairings, extractor_cfg.tau);
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(FcbvError::TrainingDivergence {
                    step: log.steps,
                    detail: format!("contrastive loss became {loss_value}"),
                });
            }
            tape.backward(loss);
            let grads = binding.grads(&tape);
            adam.step(&mut extractor.store, &grads);
            epoch_loss += loss_value;
            epoch_count += 1;
            log.steps += 1;
        }
        log.epoch_losses.push(epoch_loss / epoch_count.max(1) as f64);
    }

    extractor.training_echo = serde_json::json!({
        "pretrain": cfg,
        "epoch_losses": log.epoch_losses,
    });
    extractor.freeze();
    if let Some(path) = checkpoint {
        extractor.save(path)?;
    }
    Ok((extractor, log))
}

/// Unit-norm copy of a feature field (zero rows left untouched).
pub fn normalized(field: FeatureField) -> FeatureField {
    let mut m = field.features;
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 1e-12 {
            row /= n;
        }
    }
    FeatureField { features: m }
}

/// Fraction of held-out queries whose feature match lands within
/// `radius_m` geodesic distance of the true corresponding vertex.
pub fn matching_accuracy(
    extractor: &FeatureExtractorState,
    instance: &GarmentInstance,
    a: &DeformationSample,
    b: &DeformationSample,
    n_queries: usize,
    radius_m: f64,
    seed: u64,
) -> Result<f64> {
    let f_a = normalized(extractor.extract_features(&a.cloud)?);
    let f_b = normalized(extractor.extract_features(&b.cloud)?);
    let a_sources = a.cloud.source_vertex_ids.as_ref().unwrap();
    let b_sources = b.cloud.source_vertex_ids.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d617463);
    let mut correct = 0;
    for _ in 0..n_queries {
        let q = rng.gen_range(0..a.cloud.len());
        let predicted = match_points(&f_a, &f_b, q)?;
        let true_vertex = a_sources[q];
        let matched_vertex = b_sources[predicted];
        let geo = instance.geodesic_distances_from(true_vertex);
        if geo[matched_vertex] <= radius_m {
            correct += 1;
        }
    }
    Ok(correct as f64 / n_queries as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_uniform_similarities() {
        let a = vec![0.0; 4];
        let p = vec![0.5; 4];
        let negs = vec![vec![1.0, 0.0, 0.0, 0.0]; 7];
        // Zero anchor makes every similarity zero.
        let loss = contrastive_loss(&a, &p, &negs, 0.07).unwrap();
        assert!((loss - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_spot_value() {
        // sim(a,p) = 1, three negatives at 0, tau = 1:
        // loss = ln(e + 3) - 1.
        let a = vec![1.0, 0.0];
        let p = vec![1.0, 0.0];
        let negs = vec![vec![0.0, 1.0]; 3];
        let loss = contrastive_loss(&a, &p, &negs, 1.0).unwrap();
        let expected = (std::f64::consts::E + 3.0).ln() - 1.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.7437).abs() < 1e-3);
    }

    #[test]
    fn contrastive_dominant_positive_drives_loss_to_zero() {
        let a = vec![10.0, 0.0];
        let p = vec![10.0, 0.0];
        let negs = vec![vec![0.0, 0.0]; 4];
        let loss = contrastive_loss(&a, &p, &negs, 1.0).unwrap();
        assert!(loss < 1e-8, "loss {loss}");
    }

    #[test]
    fn contrastive_rejects_bad_inputs() {
        let a = vec![0.0; 3];
        assert!(contrastive_loss(&a, &a, &[vec![0.0; 3]], 0.0).is_err());
        assert!(contrastive_loss(&a, &a, &[], 0.1).is_err());
        assert!(contrastive_loss(&a, &vec![0.0; 2], &[vec![0.0; 3]], 0.1).is_err());
    }

    #[test]
    fn batch_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f_a_mat = Array2::from_shape_fn((10, 5), |_| rng.gen_range(-1.0..1.0));
        let f_b_mat = Array2::from_shape_fn((12, 5), |_| rng.gen_range(-1.0..1.0));
        let pairings = vec![
            AnchorPairing { anchor: 1, positive: 3, negatives: vec![0, 5, 7] },
            AnchorPairing { anchor: 8, positive: 11, negatives: vec![2, 4, 6] },
        ];
        let mut tape = Tape::new();
        let f_a = tape.leaf(f_a_mat.clone());
        let f_b = tape.leaf(f_b_mat.clone());
        let loss = contrastive_batch_loss(&mut tape, f_a, f_b, &pairings, 0.2);
        let got = tape.scalar(loss);

        let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
        let mut expected = 0.0;
        for p in &pairings {
            let negs: Vec<Vec<f64>> = p.negatives.iter().map(|&n| row(&f_b_mat, n)).collect();
            expected +=
                contrastive_loss(&row(&f_a_mat, p.anchor), &row(&f_b_mat, p.positive), &negs, 0.2)
                    .unwrap();
        }
        expected /= pairings.len() as f64;
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn match_points_identity_and_one_hot() {
        // Unit-norm rows: self-similarity is maximal.
        let mut m = Array2::zeros((4, 4));
        for i in 0..4 {
            m[[i, i]] = 1.0;
        }
        let f = FeatureField::new(m).unwrap();
        for q in 0..4 {
            assert_eq!(match_points(&f, &f, q).unwrap(), q);
        }
        let mut other = Array2::zeros((3, 4));
        other[[0, 2]] = 1.0;
        other[[1, 0]] = 1.0;
        other[[2, 1]] = 1.0;
        let g = FeatureField::new(other).unwrap();
        assert_eq!(match_points(&f, &g, 0).unwrap(), 1);
        assert_eq!(match_points(&f, &g, 2).unwrap(), 0);
    }

    #[test]
    fn extractor_shapes_and_determinism() {
        let cfg = FeatureExtractorConfig::desk(16);
        let ex = FeatureExtractorState::new(cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 3]> = (0..80)
            .map(|_| {
                [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.0..0.05)]
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let f1 = ex.extract_features(&cloud).unwrap();
        assert_eq!(f1.features.dim(), (80, 16));
        let f2 = ex.extract_features(&cloud).unwrap();
        assert_eq!(f1.features, f2.features);
    }

    #[test]
    fn extractor_permutation_alignment() {
        let cfg = FeatureExtractorConfig::desk(8);
        let ex = FeatureExtractorState::new(cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pts: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.0..0.05)]
            })
            .collect();
        let mut perm: Vec<usize> = (0..60).collect();
        for i in (1..60usize).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled: Vec<[f64; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let f = ex.extract_features(&PointCloud::new(pts).unwrap()).unwrap();
        let g = ex.extract_features(&PointCloud::new(shuffled).unwrap()).unwrap();
        for (new_row, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((g.features[[new_row, c]] - f.features[[src, c]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn extractor_rejects_tiny_clouds() {
        let ex = FeatureExtractorState::new(FeatureExtractorConfig::desk(8), 0);
        let cloud = PointCloud::new(vec![[0.0; 3]; 4]).unwrap();
        assert!(ex.extract_features(&cloud).is_err());
    }

    #[test]
    fn freeze_detects_mutation() {
        let mut ex = FeatureExtractorState::new(FeatureExtractorConfig::desk(8), 0);
        ex.freeze();
        ex.verify_frozen().unwrap();
        let mut v = ex.store.value(crate::nn::ParamId(0)).clone();
        v[[0, 0]] += 1.0;
        ex.store.set_value(crate::nn::ParamId(0), v);
        assert!(ex.verify_frozen().is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_fingerprint() {
        let mut ex = FeatureExtractorState::new(FeatureExtractorConfig::desk(8), 5);
        ex.freeze();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.fcbv");
        ex.save(&path).unwrap();
        let loaded = FeatureExtractorState::load(&path).unwrap();
        assert!(loaded.frozen);
        assert_eq!(loaded.fingerprint, ex.fingerprint);
        assert_eq!(loaded.store.fingerprint(), ex.fingerprint);
    }
}
