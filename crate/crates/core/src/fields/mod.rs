//! Scene representation: a VM-factorized density grid, three independent
//! appearance grids with their material decoders, the implicit specular
//! network, and the environment map tensor.

pub mod encoding;
pub mod mlp;
pub mod model;
pub mod vm;

pub use encoding::PositionalEncoding;
pub use mlp::{mlp_forward, MlpShape};
pub use model::{
    apply_multiplier_var, material_channels, MaterialHooks, MaterialVars, ModelConfig, ModelVars, NormalVars,
    SceneModel, MATERIALS,
};
pub use vm::{grid_plans, vm_features, vm_spatial_gradient, Aabb, GridPlans, VmLayout, VmVars};
