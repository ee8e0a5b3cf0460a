use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera; camera-to-world pose with -z forward and +y up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub c2w: [[f64; 4]; 4],
    /// Horizontal field of view in radians.
    pub fov_x: f64,
    pub width: usize,
    pub height: usize,
}

/// Rays for a pixel set; `pixels` holds row-major pixel indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub pixels: Vec<usize>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn push(&mut self, o: [f64; 3], d: [f64; 3], pixel: usize) {
        self.origins.push(o);
        self.dirs.push(d);
        self.pixels.push(pixel);
    }
}

impl Camera {
    pub fn new(c2w: [[f64; 4]; 4], fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Camera { c2w, fov_x, width, height };
        if !c2w.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera matrix".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| c2w[k][i] * c2w[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-4 {
                    return Err(Error::Config(format!("camera rotation is not orthonormal (R^T R [{i}][{j}] = {d})")));
                }
            }
        }
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_x: f64, width: usize, height: usize) -> Self {
        use crate::shading::brdf::{cross, normalize};
        let back = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        let mut c2w = [[0.0; 4]; 4];
        for r in 0..3 {
            c2w[r][0] = right[r];
            c2w[r][1] = true_up[r];
            c2w[r][2] = back[r];
            c2w[r][3] = eye[r];
        }
        c2w[3][3] = 1.0;
        Camera { c2w, fov_x, width, height }
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_x).tan()
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Ray through the centre of pixel `(x, y)`.
    pub fn ray(&self, x: usize, y: usize) -> ([f64; 3], [f64; 3]) {
        let f = self.focal();
        let cx = (x as f64 + 0.5 - 0.5 * self.width as f64) / f;
        let cy = -(y as f64 + 0.5 - 0.5 * self.height as f64) / f;
        let local = [cx, cy, -1.0];
        let mut d = [0.0; 3];
        for (r, dr) in d.iter_mut().enumerate() {
            *dr = (0..3).map(|k| self.c2w[r][k] * local[k]).sum();
        }
        (self.origin(), crate::shading::brdf::normalize(d))
    }

    pub fn all_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height).flat_map(|y| (0..self.width).map(move |x| (x, y))).collect()
    }
}

pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<RayBatch> {
    let mut batch = RayBatch::default();
    for &(x, y) in pixels {
        if x >= camera.width || y >= camera.height {
            return Err(Error::PixelOutOfBounds { x, y, width: camera.width, height: camera.height });
        }
        let (o, d) = camera.ray(x, y);
        batch.push(o, d, y * camera.width + x);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        m
    }

    #[test]
    fn centre_ray_follows_optical_axis() {
        // odd size so a pixel centre sits on the axis
        let cam = Camera::new(identity(), 0.8, 5, 5).unwrap();
        let b = generate_rays(&cam, &[(2, 2)]).unwrap();
        assert_eq!(b.origins[0], [0.0, 0.0, 0.0]);
        let d = b.dirs[0];
        assert!(d[0].abs() < 1e-15 && d[1].abs() < 1e-15 && (d[2] + 1.0).abs() < 1e-15);
        assert_eq!(b.pixels[0], 12);
    }

    #[test]
    fn corner_ray_angle_matches_pinhole_geometry() {
        let (w, h, fov) = (64usize, 48usize, 1.0f64);
        let cam = Camera::new(identity(), fov, w, h).unwrap();
        let f = 0.5 * w as f64 / (0.5 * fov).tan();
        let b = generate_rays(&cam, &[(0, 0)]).unwrap();
        let (px, py) = (0.5 * w as f64 - 0.5, 0.5 * h as f64 - 0.5);
        let want = ((px * px + py * py).sqrt() / f).atan();
        let got = (-b.dirs[0][2]).acos();
        assert!((got - want).abs() < 1e-12);
        assert!(b.dirs[0][0] < 0.0 && b.dirs[0][1] > 0.0);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let cam = Camera::new(identity(), 0.8, 4, 4).unwrap();
        assert!(matches!(generate_rays(&cam, &[(4, 0)]), Err(Error::PixelOutOfBounds { .. })));
    }

    #[test]
    fn look_at_points_at_target() {
        let cam = Camera::look_at([0.0, 1.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0], 0.7, 9, 9);
        assert!(Camera::new(cam.c2w, cam.fov_x, 9, 9).is_ok());
        let (o, d) = cam.ray(4, 4);
        let to = crate::shading::brdf::normalize([-o[0], -o[1], -o[2]]);
        assert!((crate::shading::brdf::dot(d, to) - 1.0).abs() < 1e-12);
    }
}
