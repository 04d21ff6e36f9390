//! Synthetic transparent-object scenes: parametric glassware, ray-cast
//! ground truth, and a depth-sensor corruption model.

mod corrupt;
mod mesh;
mod render;
mod scene;

pub use corrupt::{corrupt_depth, CorruptionParams};
pub use mesh::{build_mesh, Category, CategorySpec, Mesh};
pub use render::{ray_triangle, render_mesh, render_mesh_brute_force, Render};
pub use scene::{
    canonical_symmetric_rotation, derive_seed, generate_scene, instance_mesh, instance_scale,
    patch_intrinsics, quantize, render_patch, synth_rgb, ObjectAnnotation, PatchBundle, Scene,
    SceneAnnotation, SceneConfig, SceneInstance, SceneSeeds, GENERATOR_VERSION,
};
