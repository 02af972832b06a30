//! Desk-scale deformable-garment simulator: procedural tops, mass-spring
//! physics, scripted manipulation primitives, observation rendering, and
//! ground-truth correspondences.

pub mod garment;
pub mod primitives;
pub mod render;
pub mod state;

pub use garment::{
    build_instance, canonical_correspondence, generate_garment, GarmentInstance, GarmentRanges,
    InstanceParams, PartLabel, Spring, SpringClass,
};
pub use primitives::{crumple, execute_primitive, BimanualAction, GraspSpec, Primitive};
pub use render::render_pointcloud;
pub use state::{settle, step, GraspConstraint, SimParams, SimState};
