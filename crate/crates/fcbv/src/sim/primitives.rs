//! Bimanual action definition, crumpling, and scripted primitive execution.
//!
//! Primitives are kinematic handle trajectories: grippers are modeled as
//! rigid attachments that carry co-grasped vertices along scripted paths,
//! with the cloth settling freely after release.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FcbvError, Result};
use crate::geometry::vec3;
use crate::sim::garment::GarmentInstance;
use crate::sim::state::{settle, step, GraspConstraint, SimParams, SimState};

/// Discrete manipulation skills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Primitive {
    Fling,
    Drag,
    PickPlace,
    Done,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Fling, Primitive::Drag, Primitive::PickPlace, Primitive::Done];

    pub fn index(self) -> usize {
        match self {
            Primitive::Fling => 0,
            Primitive::Drag => 1,
            Primitive::PickPlace => 2,
            Primitive::Done => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Primitive::ALL
            .get(i)
            .copied()
            .ok_or_else(|| FcbvError::invalid(format!("unknown primitive index {i}")))
    }

    pub fn needs_two_grippers(self) -> bool {
        matches!(self, Primitive::Fling | Primitive::Drag)
    }
}

/// One grasp: a world-frame point and a discretized jaw orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspSpec {
    pub point: [f64; 3],
    pub theta_bin: usize,
}

impl GraspSpec {
    pub fn jaw_angle(&self, n_theta: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.theta_bin as f64 / n_theta as f64
    }
}

/// A primitive plus two (grasp point, orientation bin) pairs. For PickPlace
/// the second entry is the place target; Done carries no grasps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimanualAction {
    pub primitive: Primitive,
    pub grasp_1: Option<GraspSpec>,
    pub grasp_2: Option<GraspSpec>,
}

impl BimanualAction {
    pub fn done() -> Self {
        BimanualAction { primitive: Primitive::Done, grasp_1: None, grasp_2: None }
    }

    pub fn validate(&self, params: &SimParams) -> Result<()> {
        match self.primitive {
            Primitive::Done => {
                if self.grasp_1.is_some() || self.grasp_2.is_some() {
                    return Err(FcbvError::invalid("Done carries no grasps"));
                }
                return Ok(());
            }
            _ => {
                if self.grasp_1.is_none() || self.grasp_2.is_none() {
                    return Err(FcbvError::invalid("non-Done actions need both grasp entries"));
                }
            }
        }
        let g1 = self.grasp_1.as_ref().unwrap();
        let g2 = self.grasp_2.as_ref().unwrap();
        for g in [g1, g2] {
            if g.theta_bin >= params.n_theta {
                return Err(FcbvError::invalid(format!(
                    "theta bin {} out of range (n_theta = {})",
                    g.theta_bin, params.n_theta
                )));
            }
            if g.point[0].abs() > params.workspace_half || g.point[1].abs() > params.workspace_half {
                return Err(FcbvError::invalid("grasp point outside workspace bounds"));
            }
        }
        if self.primitive.needs_two_grippers() {
            let d = vec3::dist(g1.point, g2.point);
            if d < params.min_grasp_separation {
                return Err(FcbvError::invalid(format!(
                    "bimanual grasps {d:.3} m apart, need {}",
                    params.min_grasp_separation
                )));
            }
        }
        Ok(())
    }
}

/// Vertices caught by a gripper jaw closing at `center` with axis angle
/// `phi`: within the jaw capsule along the axis, nearby across it, and
/// locally connected in material space (a pinch picks up one layer, not
/// whatever other fold happens to pass through the jaw).
fn co_grasped(
    state: &SimState,
    instance: &GarmentInstance,
    center: usize,
    phi: f64,
    params: &SimParams,
    exclude: &[usize],
) -> Vec<usize> {
    let axis = [phi.cos(), phi.sin(), 0.0];
    let c = state.positions[center];
    let material_limit = params.jaw_half_length + 0.5 * instance.params.pitch;
    let mut out = Vec::new();
    for (v, p) in state.positions.iter().enumerate() {
        if exclude.contains(&v) {
            continue;
        }
        if vec3::dist(instance.vertices[v], instance.vertices[center]) > material_limit {
            continue;
        }
        let d = vec3::sub(*p, c);
        let along = vec3::dot(d, axis);
        if along.abs() > params.jaw_half_length {
            continue;
        }
        let perp = vec3::sub(d, vec3::scale(axis, along));
        if vec3::norm(perp) <= params.jaw_radius {
            out.push(v);
        }
    }
    out
}

fn attach_gripper(
    state: &mut SimState,
    instance: &GarmentInstance,
    grasp: &GraspSpec,
    params: &SimParams,
    exclude: &[usize],
) -> Result<usize> {
    let center = state.nearest_vertex_within(grasp.point, params.snap_radius).ok_or(
        FcbvError::GraspMiss(grasp.point[0], grasp.point[1], grasp.point[2], params.snap_radius),
    )?;
    let phi = grasp.jaw_angle(params.n_theta);
    let members = co_grasped(state, instance, center, phi, params, exclude);
    let handle = state.positions[center];
    let attached = members
        .iter()
        .map(|&v| (v, vec3::sub(state.positions[v], handle)))
        .collect();
    state.constraints.push(GraspConstraint { attached, handle, handle_velocity: [0.0; 3] });
    Ok(state.constraints.len() - 1)
}

/// Moves each listed constraint handle linearly to its target over
/// `duration`, stepping the cloth along the way.
fn animate(
    state: &mut SimState,
    instance: &GarmentInstance,
    params: &SimParams,
    moves: &[(usize, [f64; 3])],
    duration: f64,
) -> Result<()> {
    let steps = ((duration / params.dt).ceil() as usize).max(1);
    let starts: Vec<[f64; 3]> = moves.iter().map(|&(ci, _)| state.constraints[ci].handle).collect();
    for k in 1..=steps {
        let t01 = k as f64 / steps as f64;
        for ((ci, target), start) in moves.iter().zip(starts.iter()) {
            let h = vec3::add(*start, vec3::scale(vec3::sub(*target, *start), t01));
            let c = &mut state.constraints[*ci];
            c.handle_velocity = vec3::scale(vec3::sub(h, c.handle), 1.0 / params.dt);
            c.handle = h;
        }
        step(state, instance, params)?;
    }
    Ok(())
}

fn release_all(state: &mut SimState) {
    state.constraints.clear();
}

/// Vertex of a constraint nearest its handle (the snapped grasp center).
fn nearest_attached(state: &SimState, ci: usize) -> usize {
    state.constraints[ci]
        .attached
        .iter()
        .min_by(|a, b| vec3::norm_sq(a.1).partial_cmp(&vec3::norm_sq(b.1)).unwrap())
        .map(|&(v, _)| v)
        .expect("constraint has at least one vertex")
}

fn clamp_to_workspace(p: [f64; 3], params: &SimParams) -> [f64; 3] {
    let lim = params.workspace_half - 0.05;
    [p[0].clamp(-lim, lim), p[1].clamp(-lim, lim), p[2]]
}

fn cloth_centroid(state: &SimState) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in &state.positions {
        c = vec3::add(c, *p);
    }
    vec3::scale(c, 1.0 / state.positions.len() as f64)
}

/// Horizontal unit vector from the cloth centroid through the grasp midpoint;
/// +x when degenerate.
fn away_direction(state: &SimState, g1: [f64; 3], g2: [f64; 3]) -> [f64; 3] {
    let c = cloth_centroid(state);
    let mid = vec3::scale(vec3::add(g1, g2), 0.5);
    let mut d = [mid[0] - c[0], mid[1] - c[1], 0.0];
    let n = vec3::norm(d);
    if n < 1e-6 {
        d = [1.0, 0.0, 0.0];
    } else {
        d = vec3::scale(d, 1.0 / n);
    }
    d
}

/// Executes one bimanual primitive and settles the cloth. The returned flag
/// is true when the action terminates the episode (Done).
pub fn execute_primitive(
    state: &SimState,
    instance: &GarmentInstance,
    action: &BimanualAction,
    params: &SimParams,
) -> Result<(SimState, bool)> {
    action.validate(params)?;
    if action.primitive == Primitive::Done {
        return Ok((state.clone(), true));
    }
    let mut s = state.clone();
    s.constraints.clear();
    let g1 = action.grasp_1.clone().unwrap();
    let g2 = action.grasp_2.clone().unwrap();

    match action.primitive {
        Primitive::Fling => {
            let c1 = attach_gripper(&mut s, instance, &g1, params, &[])?;
            let held: Vec<usize> =
                s.constraints[c1].attached.iter().map(|&(v, _)| v).collect();
            let c2 = attach_gripper(&mut s, instance, &g2, params, &held)?;
            let dir = away_direction(&s, s.constraints[c1].handle, s.constraints[c2].handle);
            let v1 = nearest_attached(&s, c1);
            let v2 = nearest_attached(&s, c2);
            // Hang length and taut gripper separation from the rest pose.
            let hang = 1.15 * instance.params.body_height + 0.05;
            let height = params.fling_height.max(hang);
            let taut = 0.96 * vec3::dist(instance.vertices[v1], instance.vertices[v2]);
            let h1 = s.constraints[c1].handle;
            let h2 = s.constraints[c2].handle;
            // Lift both grippers, keeping their horizontal separation.
            let up1 = [h1[0], h1[1], height];
            let up2 = [h2[0], h2[1], height];
            animate(&mut s, instance, params, &[(c1, up1), (c2, up2)], params.fling_lift_time)?;
            // Stretch taut perpendicular to the swing direction so the cloth
            // hangs flat and lays out cleanly. The stretch sign follows the
            // body bulk's current orientation, not the (possibly folded-over)
            // grasp pair, to avoid hanging the cloth with a half twist.
            let mid = vec3::scale(vec3::add(up1, up2), 0.5);
            let sep = vec3::sub(up2, up1);
            let sep_n = vec3::norm(sep);
            let mut axis = [-dir[1], dir[0], 0.0];
            if vec3::dot(sep, axis) < 0.0 {
                axis = vec3::scale(axis, -1.0);
            }
            let half = 0.5 * taut.max(sep_n);
            let st1 = vec3::sub(mid, vec3::scale(axis, half));
            let st2 = vec3::add(mid, vec3::scale(axis, half));
            animate(&mut s, instance, params, &[(c1, st1), (c2, st2)], 0.35)?;
            animate(&mut s, instance, params, &[(c1, st1), (c2, st2)], 0.30)?;
            // Carry to a swing start so the whole laydown fits the workspace.
            let swing_dist = params.fling_distance.max(hang + 0.05);
            let end_mid = vec3::scale(dir, 0.5 * hang);
            let start_mid = vec3::sub(end_mid, vec3::scale(dir, swing_dist));
            let off1 = vec3::sub(st1, mid);
            let off2 = vec3::sub(st2, mid);
            let carry1 = [start_mid[0] + off1[0], start_mid[1] + off1[1], height];
            let carry2 = [start_mid[0] + off2[0], start_mid[1] + off2[1], height];
            let carry_dist = vec3::dist([mid[0], mid[1], 0.0], [start_mid[0], start_mid[1], 0.0]);
            let carry_time = (carry_dist / 0.8).max(0.2);
            animate(&mut s, instance, params, &[(c1, carry1), (c2, carry2)], carry_time)?;
            // Swing forward while descending; release mid-swing, low, so the
            // trailing cloth lays out along the path.
            let f = params.fling_release_fraction;
            let rel_mid = vec3::add(start_mid, vec3::scale(dir, swing_dist * f));
            let rel_z = height + (0.02 - height) * f;
            let r1 = clamp_to_workspace([rel_mid[0] + off1[0], rel_mid[1] + off1[1], rel_z], params);
            let r2 = clamp_to_workspace([rel_mid[0] + off2[0], rel_mid[1] + off2[1], rel_z], params);
            animate(&mut s, instance, params, &[(c1, r1), (c2, r2)], params.fling_swing_time * f)?;
            release_all(&mut s);
            settle(&mut s, instance, params)?;
        }
        Primitive::Drag => {
            let c1 = attach_gripper(&mut s, instance, &g1, params, &[])?;
            let held: Vec<usize> =
                s.constraints[c1].attached.iter().map(|&(v, _)| v).collect();
            let c2 = attach_gripper(&mut s, instance, &g2, params, &held)?;
            let dir = away_direction(&s, s.constraints[c1].handle, s.constraints[c2].handle);
            let h1 = s.constraints[c1].handle;
            let h2 = s.constraints[c2].handle;
            let lift1 = [h1[0], h1[1], params.drag_height];
            let lift2 = [h2[0], h2[1], params.drag_height];
            animate(&mut s, instance, params, &[(c1, lift1), (c2, lift2)], 0.12)?;
            let shift = vec3::scale(dir, params.drag_distance);
            let t1 = clamp_to_workspace(vec3::add(lift1, shift), params);
            let t2 = clamp_to_workspace(vec3::add(lift2, shift), params);
            animate(&mut s, instance, params, &[(c1, t1), (c2, t2)], params.drag_time)?;
            release_all(&mut s);
            settle(&mut s, instance, params)?;
        }
        Primitive::PickPlace => {
            let c1 = attach_gripper(&mut s, instance, &g1, params, &[])?;
            let h = s.constraints[c1].handle;
            let up = [h[0], h[1], params.place_height];
            animate(&mut s, instance, params, &[(c1, up)], 0.30)?;
            let place = clamp_to_workspace(g2.point, params);
            let over = [place[0], place[1], params.place_height];
            animate(&mut s, instance, params, &[(c1, over)], params.place_travel_time)?;
            let low = [place[0], place[1], 0.05];
            animate(&mut s, instance, params, &[(c1, low)], 0.20)?;
            release_all(&mut s);
            settle(&mut s, instance, params)?;
        }
        Primitive::Done => unreachable!(),
    }
    Ok((s, false))
}

/// Applies `n_moves` random pick-lift-drop perturbations to the rest pose and
/// settles to a quasi-static crumpled state. Deterministic per seed.
pub fn crumple(
    instance: &GarmentInstance,
    n_moves: usize,
    seed: u64,
    params: &SimParams,
) -> Result<SimState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6372756d);
    let mut s = SimState::rest(instance);
    let spread = instance.params.body_width.max(instance.params.body_height);
    for _ in 0..n_moves {
        let v = rng.gen_range(0..instance.vertex_count());
        let height = rng.gen_range(0.10..0.22);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let dist = rng.gen_range(0.25..0.70) * spread;
        let p = s.positions[v];
        s.constraints.push(GraspConstraint {
            attached: vec![(v, [0.0; 3])],
            handle: p,
            handle_velocity: [0.0; 3],
        });
        let ci = s.constraints.len() - 1;
        let up = [p[0], p[1], height];
        animate(&mut s, instance, params, &[(ci, up)], 0.22)?;
        let target = clamp_to_workspace(
            [p[0] + dist * angle.cos(), p[1] + dist * angle.sin(), height],
            params,
        );
        animate(&mut s, instance, params, &[(ci, target)], 0.30)?;
        release_all(&mut s);
        // Brief free fall between moves; full settling happens at the end.
        let relax_steps = (0.35 / params.dt) as usize;
        for _ in 0..relax_steps {
            step(&mut s, instance, params)?;
        }
    }
    settle(&mut s, instance, params)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::garment::{generate_garment, GarmentRanges};

    fn setup() -> (GarmentInstance, SimParams) {
        let ranges = GarmentRanges { coverage_resolution: 128, ..GarmentRanges::default() };
        (generate_garment(1, &ranges).unwrap(), SimParams::default())
    }

    #[test]
    fn done_returns_identical_state_and_terminal_flag() {
        let (g, params) = setup();
        let s = SimState::rest(&g);
        let (after, terminal) = execute_primitive(&s, &g, &BimanualAction::done(), &params).unwrap();
        assert!(terminal);
        assert_eq!(after.positions, s.positions);
    }

    #[test]
    fn crumple_zero_moves_is_flat() {
        let (g, params) = setup();
        let s = crumple(&g, 0, 1, &params).unwrap();
        let cov = g.projected_coverage(&s.positions).unwrap();
        assert_eq!(cov.fraction, 1.0);
    }

    #[test]
    fn crumple_is_deterministic_and_seed_sensitive() {
        let (g, params) = setup();
        let a = crumple(&g, 3, 42, &params).unwrap();
        let b = crumple(&g, 3, 42, &params).unwrap();
        assert_eq!(a.positions, b.positions);
        let c = crumple(&g, 3, 43, &params).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn crumple_reduces_coverage() {
        let (g, params) = setup();
        let s = crumple(&g, 5, 7, &params).unwrap();
        let cov = g.projected_coverage(&s.positions).unwrap();
        assert!(cov.fraction < 0.8, "expected crumpled coverage < 0.8, got {}", cov.fraction);
        let two = crumple(&g, 2, 3, &params).unwrap();
        let cov2 = g.projected_coverage(&two.positions).unwrap();
        assert!(cov2.fraction < 1.0);
    }

    #[test]
    fn grasp_miss_is_reported() {
        let (g, params) = setup();
        let s = SimState::rest(&g);
        let action = BimanualAction {
            primitive: Primitive::Fling,
            grasp_1: Some(GraspSpec { point: [0.6, 0.6, 0.0], theta_bin: 0 }),
            grasp_2: Some(GraspSpec { point: [-0.6, 0.6, 0.0], theta_bin: 0 }),
        };
        match execute_primitive(&s, &g, &action, &params) {
            Err(FcbvError::GraspMiss(..)) => {}
            other => panic!("expected grasp miss, got {other:?}"),
        }
    }

    #[test]
    fn separation_is_enforced_for_bimanual_primitives() {
        let (g, params) = setup();
        let s = SimState::rest(&g);
        let p = s.positions[0];
        let action = BimanualAction {
            primitive: Primitive::Drag,
            grasp_1: Some(GraspSpec { point: p, theta_bin: 0 }),
            grasp_2: Some(GraspSpec { point: [p[0] + 0.01, p[1], p[2]], theta_bin: 0 }),
        };
        assert!(matches!(
            execute_primitive(&s, &g, &action, &params),
            Err(FcbvError::InvalidArgument(_))
        ));
    }

    #[test]
    fn drag_grasped_vertices_follow_displacement_until_release() {
        let (g, params) = setup();
        let mut s = SimState::rest(&g);
        let left = s
            .positions
            .iter()
            .enumerate()
            .min_by(|a, b| a.1[0].partial_cmp(&b.1[0]).unwrap())
            .unwrap()
            .0;
        let right = s
            .positions
            .iter()
            .enumerate()
            .max_by(|a, b| a.1[0].partial_cmp(&b.1[0]).unwrap())
            .unwrap()
            .0;
        let left_grasp = GraspSpec { point: s.positions[left], theta_bin: 5 };
        let right_grasp = GraspSpec { point: s.positions[right], theta_bin: 5 };
        let c1 = attach_gripper(&mut s, &g, &left_grasp, &params, &[]).unwrap();
        let held: Vec<usize> = s.constraints[c1].attached.iter().map(|&(v, _)| v).collect();
        let c2 = attach_gripper(&mut s, &g, &right_grasp, &params, &held).unwrap();
        let starts: Vec<(usize, [f64; 3])> = s
            .constraints
            .iter()
            .flat_map(|c| c.attached.iter().map(|&(v, _)| (v, s.positions[v])))
            .collect();
        let v = [0.11, -0.05, 0.02];
        let t1 = vec3::add(s.constraints[c1].handle, v);
        let t2 = vec3::add(s.constraints[c2].handle, v);
        animate(&mut s, &g, &params, &[(c1, t1), (c2, t2)], 0.4).unwrap();
        // At release every grasped vertex has rigidly followed the commanded
        // displacement.
        for (vertex, start) in &starts {
            let moved = vec3::sub(s.positions[*vertex], *start);
            assert!(
                vec3::dist(moved, v) < 0.01,
                "vertex {vertex} moved {moved:?}, commanded {v:?}"
            );
        }
    }

    #[test]
    fn drag_shifts_cloth_away_from_centroid() {
        let (g, params) = setup();
        let s = SimState::rest(&g);
        // Grasp two separated vertices on the +x edge; away-from-centroid
        // drag should shift mass toward +x.
        let mut edge: Vec<usize> = (0..g.vertex_count()).collect();
        edge.sort_by(|&a, &b| s.positions[b][0].partial_cmp(&s.positions[a][0]).unwrap());
        let a = edge[0];
        let b = *edge
            .iter()
            .find(|&&v| vec3::dist(s.positions[v], s.positions[a]) > params.min_grasp_separation)
            .unwrap();
        let action = BimanualAction {
            primitive: Primitive::Drag,
            grasp_1: Some(GraspSpec { point: s.positions[a], theta_bin: 5 }),
            grasp_2: Some(GraspSpec { point: s.positions[b], theta_bin: 5 }),
        };
        let centroid_before = cloth_centroid(&s);
        let (after, terminal) = execute_primitive(&s, &g, &action, &params).unwrap();
        assert!(!terminal);
        let centroid_after = cloth_centroid(&after);
        assert!(
            centroid_after[0] - centroid_before[0] > 0.02,
            "drag moved centroid by {:.3}",
            centroid_after[0] - centroid_before[0]
        );
    }

    #[test]
    fn fling_from_crumpled_state_increases_coverage() {
        let (g, params) = setup();
        let s = crumple(&g, 4, 11, &params).unwrap();
        let before = g.projected_coverage(&s.positions).unwrap().fraction;
        // Grasp the two vertices that were the garment's shoulders.
        let (l, r) = shoulder_vertices(&g);
        let action = BimanualAction {
            primitive: Primitive::Fling,
            grasp_1: Some(GraspSpec { point: s.positions[l], theta_bin: 0 }),
            grasp_2: Some(GraspSpec { point: s.positions[r], theta_bin: 0 }),
        };
        let (after, _) = execute_primitive(&s, &g, &action, &params).unwrap();
        let cov_after = g.projected_coverage(&after.positions).unwrap().fraction;
        assert!(
            cov_after > before,
            "fling should spread the cloth: {before:.3} -> {cov_after:.3}"
        );
    }

    /// Top-left and top-right body corners in the rest pose.
    fn shoulder_vertices(g: &GarmentInstance) -> (usize, usize) {
        let mut left = 0;
        let mut right = 0;
        let mut best_l = f64::NEG_INFINITY;
        let mut best_r = f64::NEG_INFINITY;
        for (i, v) in g.vertices.iter().enumerate() {
            let score_l = v[1] - v[0];
            let score_r = v[1] + v[0];
            if score_l > best_l {
                best_l = score_l;
                left = i;
            }
            if score_r > best_r {
                best_r = score_r;
                right = i;
            }
        }
        (left, right)
    }
}
