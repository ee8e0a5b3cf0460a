//! Volume rendering of ray batches through the microfacet field.

pub mod camera;
pub mod image;
pub mod volume;

pub use camera::{generate_rays, Camera, RayBatch};
pub use image::{render_image, render_pixels, RenderOutput, TILE_PIXELS};
pub use volume::{render_rays, RayRender, RenderConfig};
