//! Simulation state and semi-implicit time stepping.

use serde::{Deserialize, Serialize};

use crate::error::{FcbvError, Result};
use crate::geometry::vec3;
use crate::io::ArrayContainer;
use crate::sim::garment::GarmentInstance;

/// Tunable constants of the simulator and primitive trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dt: f64,
    pub gravity: f64,
    /// Exponential velocity damping rate (1/s), unconditionally stable.
    pub air_damping: f64,
    /// Per-spring damping on the relative velocity along the spring axis.
    pub spring_damping: f64,
    /// Fraction of tangential velocity removed per contact step.
    pub ground_friction: f64,
    pub contact_tolerance: f64,
    /// Settle terminates when every vertex is slower than this (m/s).
    pub settle_speed: f64,
    pub max_settle_steps: usize,
    /// Grasp points snap to the nearest vertex within this radius.
    pub snap_radius: f64,
    /// Gripper jaw capsule: half-length along the jaw axis and radius.
    pub jaw_half_length: f64,
    pub jaw_radius: f64,
    pub min_grasp_separation: f64,
    /// Orientation bins shared with the policy heads.
    pub n_theta: usize,
    /// Half-extent of the square workspace (meters).
    pub workspace_half: f64,
    pub fling_height: f64,
    pub fling_distance: f64,
    pub fling_lift_time: f64,
    pub fling_swing_time: f64,
    /// Fraction of the swing after which the grippers release.
    pub fling_release_fraction: f64,
    pub drag_height: f64,
    pub drag_distance: f64,
    pub drag_time: f64,
    pub place_height: f64,
    pub place_travel_time: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 2.0e-3,
            gravity: 9.81,
            air_damping: 2.5,
            spring_damping: 0.01,
            ground_friction: 0.35,
            contact_tolerance: 1.0e-4,
            settle_speed: 0.025,
            max_settle_steps: 6000,
            snap_radius: 0.03,
            jaw_half_length: 0.025,
            jaw_radius: 0.010,
            min_grasp_separation: 0.08,
            n_theta: 20,
            workspace_half: 0.75,
            fling_height: 0.50,
            fling_distance: 0.50,
            fling_lift_time: 0.45,
            fling_swing_time: 0.70,
            fling_release_fraction: 0.92,
            drag_height: 0.02,
            drag_distance: 0.16,
            drag_time: 0.45,
            place_height: 0.20,
            place_travel_time: 0.40,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 5.0e-3) {
            return Err(FcbvError::invalid(format!("dt must be in (0, 5e-3], got {}", self.dt)));
        }
        if self.n_theta == 0 {
            return Err(FcbvError::invalid("n_theta must be positive"));
        }
        Ok(())
    }
}

/// A kinematic handle rigidly carrying a set of vertices.
#[derive(Debug, Clone)]
pub struct GraspConstraint {
    /// (vertex, offset from the handle at grasp time)
    pub attached: Vec<(usize, [f64; 3])>,
    pub handle: [f64; 3],
    pub handle_velocity: [f64; 3],
}

/// Positions, velocities, active grasp constraints, and simulated time.
#[derive(Debug, Clone)]
pub struct SimState {
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub constraints: Vec<GraspConstraint>,
    pub time: f64,
}

impl SimState {
    /// Rest state of an instance, flat on the ground plane.
    pub fn rest(instance: &GarmentInstance) -> Self {
        SimState {
            positions: instance.vertices.clone(),
            velocities: vec![[0.0; 3]; instance.vertices.len()],
            constraints: Vec::new(),
            time: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(self.velocities.iter()).all(|v| v.iter().all(|c| c.is_finite()))
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().map(|v| vec3::norm(*v)).fold(0.0, f64::max)
    }

    fn constrained_mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for c in &self.constraints {
            for &(v, _) in &c.attached {
                mask[v] = true;
            }
        }
        mask
    }

    /// Nearest vertex within `radius` of `p`, ties by ascending index.
    pub fn nearest_vertex_within(&self, p: [f64; 3], radius: f64) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, q) in self.positions.iter().enumerate() {
            let d = vec3::dist_sq(*q, p);
            if d <= radius * radius {
                let better = match best {
                    None => true,
                    Some((bd, _)) => d < bd,
                };
                if better {
                    best = Some((d, i));
                }
            }
        }
        best.map(|(_, i)| i)
    }

    /// Serializes positions and velocities. Grasp constraints are transient
    /// execution state and are not persisted; only free states are saved.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({"kind": "sim_state", "time": self.time});
        let mut c = ArrayContainer::new(meta);
        c.push_points("positions", &self.positions);
        c.push_points("velocities", &self.velocities);
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = ArrayContainer::load(path)?;
        Ok(SimState {
            positions: c.points("positions")?,
            velocities: c.points("velocities")?,
            constraints: Vec::new(),
            time: c.meta["time"].as_f64().unwrap_or(0.0),
        })
    }
}

/// One semi-implicit integration step: spring, gravity, and damping forces
/// update velocities, velocities update positions, constrained vertices track
/// their handles exactly, and ground contact projects penetrating vertices.
pub fn step(state: &mut SimState, instance: &GarmentInstance, params: &SimParams) -> Result<()> {
    let dt = params.dt;
    params.validate()?;
    let n = state.positions.len();
    debug_assert_eq!(n, instance.vertices.len());
    let m = instance.mass_per_vertex();
    let mut forces = vec![[0.0f64; 3]; n];

    for s in &instance.springs {
        let k = match s.class {
            super::garment::SpringClass::Structural => instance.params.k_structural,
            super::garment::SpringClass::Shear => instance.params.k_shear,
            super::garment::SpringClass::Bend => instance.params.k_bend,
        };
        let delta = vec3::sub(state.positions[s.j], state.positions[s.i]);
        let len = vec3::norm(delta);
        if len < 1e-9 {
            continue;
        }
        let dir = vec3::scale(delta, 1.0 / len);
        let stretch = len - s.rest_length;
        let rel_v = vec3::dot(vec3::sub(state.velocities[s.j], state.velocities[s.i]), dir);
        let mag = k * stretch + params.spring_damping * rel_v;
        let f = vec3::scale(dir, mag);
        forces[s.i] = vec3::add(forces[s.i], f);
        forces[s.j] = vec3::sub(forces[s.j], f);
    }

    let damp = (-params.air_damping * dt).exp();
    let constrained = state.constrained_mask(n);
    for i in 0..n {
        if constrained[i] {
            continue;
        }
        let mut v = state.velocities[i];
        v = vec3::add(v, vec3::scale(forces[i], dt / m));
        v[2] -= params.gravity * dt;
        v = vec3::scale(v, damp);
        let mut p = vec3::add(state.positions[i], vec3::scale(v, dt));
        if p[2] < 0.0 {
            p[2] = 0.0;
            if v[2] < 0.0 {
                v[2] = 0.0;
            }
            v[0] *= 1.0 - params.ground_friction;
            v[1] *= 1.0 - params.ground_friction;
        }
        state.positions[i] = p;
        state.velocities[i] = v;
    }

    // Constrained vertices follow their handles exactly.
    for c in &state.constraints {
        for &(v, offset) in &c.attached {
            state.positions[v] = vec3::add(c.handle, offset);
            state.velocities[v] = c.handle_velocity;
        }
    }

    state.time += dt;
    if !state.is_finite() {
        return Err(FcbvError::SimulationDivergence(format!(
            "non-finite state at t = {:.4}",
            state.time
        )));
    }
    Ok(())
}

/// Steps until every vertex is slower than `settle_speed`; fails if the
/// budget is exhausted.
pub fn settle(state: &mut SimState, instance: &GarmentInstance, params: &SimParams) -> Result<()> {
    for i in 0..params.max_settle_steps {
        step(state, instance, params)?;
        if i % 20 == 19 && state.max_speed() < params.settle_speed {
            return Ok(());
        }
    }
    Err(FcbvError::SimulationDivergence(format!(
        "failed to settle within {} steps (max speed {:.4})",
        params.max_settle_steps,
        state.max_speed()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::garment::{generate_garment, GarmentRanges};

    fn test_instance() -> GarmentInstance {
        let ranges = GarmentRanges { coverage_resolution: 128, ..GarmentRanges::default() };
        generate_garment(1, &ranges).unwrap()
    }

    #[test]
    fn flat_rest_state_is_equilibrium() {
        let g = test_instance();
        let mut s = SimState::rest(&g);
        let params = SimParams::default();
        let initial = s.positions.clone();
        for _ in 0..100 {
            step(&mut s, &g, &params).unwrap();
        }
        for (p, q) in s.positions.iter().zip(initial.iter()) {
            assert!(vec3::dist(*p, *q) < 1e-6);
        }
    }

    #[test]
    fn constrained_vertex_tracks_handle() {
        let g = test_instance();
        let mut s = SimState::rest(&g);
        let params = SimParams::default();
        let target = [0.05, 0.02, 0.20];
        s.constraints.push(GraspConstraint {
            attached: vec![(0, [0.0; 3])],
            handle: target,
            handle_velocity: [0.0; 3],
        });
        for _ in 0..50 {
            step(&mut s, &g, &params).unwrap();
        }
        assert!(vec3::dist(s.positions[0], target) < 1e-12);
    }

    #[test]
    fn free_fall_matches_kinematics() {
        let g = test_instance();
        let mut s = SimState::rest(&g);
        // Lift everything high and drop with damping off.
        for p in s.positions.iter_mut() {
            p[2] += 2.0;
        }
        let params = SimParams { air_damping: 0.0, spring_damping: 0.0, ..SimParams::default() };
        let steps = 200;
        let t = steps as f64 * params.dt;
        for _ in 0..steps {
            step(&mut s, &g, &params).unwrap();
        }
        let expected = -0.5 * params.gravity * t * t;
        let dz = s.positions[0][2] - 2.0 - g.vertices[0][2];
        let rel = ((dz - expected) / expected).abs();
        assert!(rel < 0.05, "free fall off by {rel}: dz = {dz}, expected {expected}");
    }

    #[test]
    fn settle_from_rest_is_fast() {
        let g = test_instance();
        let mut s = SimState::rest(&g);
        settle(&mut s, &g, &SimParams::default()).unwrap();
        assert!(s.max_speed() < 0.025);
    }

    #[test]
    fn vertices_never_sink_below_ground() {
        let g = test_instance();
        let mut s = SimState::rest(&g);
        for p in s.positions.iter_mut() {
            p[2] += 0.3;
        }
        let params = SimParams::default();
        settle(&mut s, &g, &params).unwrap();
        assert!(s.positions.iter().all(|p| p[2] >= -params.contact_tolerance));
    }

    #[test]
    fn rejects_bad_dt() {
        let g = test_instance();
        let mut s = SimState::rest(&g);
        let params = SimParams { dt: 1.0e-2, ..SimParams::default() };
        assert!(step(&mut s, &g, &params).is_err());
    }

    #[test]
    fn structural_stretch_bounded_after_settle() {
        let g = test_instance();
        let mut s = SimState::rest(&g);
        for p in s.positions.iter_mut() {
            p[2] += 0.2;
            p[0] += 0.05;
        }
        settle(&mut s, &g, &SimParams::default()).unwrap();
        for spring in &g.springs {
            if spring.class != crate::sim::garment::SpringClass::Structural {
                continue;
            }
            let len = vec3::dist(s.positions[spring.i], s.positions[spring.j]);
            assert!(
                len <= 1.5 * spring.rest_length,
                "structural spring stretched to {:.3}x",
                len / spring.rest_length
            );
        }
    }
}
