//! Microfacet BRDF, environment illumination, and the Monte Carlo shading
//! estimators.

pub mod brdf;
pub mod envmap;
pub mod integrator;
pub mod sampling;

pub use brdf::{brdf, fresnel, ndf, smith_g1, specular, BrdfQuery};
pub use envmap::{inverse_softplus_f32, softplus_f32, uv_direction, EnvironmentMap};
pub use integrator::{env_radiance, shade, IncomingFn, ShadePoints, ShadingConfig};
pub use sampling::sample_specular;
