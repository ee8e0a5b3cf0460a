use crate::diffmath::graph::{equirect_coords, equirect_taps};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Stable `ln(1 + e^x)`.
pub fn softplus_f32(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of `softplus` for positive radiance; tiny values are floored so
/// the stored parameter stays finite.
pub fn inverse_softplus_f32(y: f32) -> f32 {
    let y = y.max(1e-6) as f64;
    // y + ln(1 - e^-y)
    (y + (-(-y).exp()).ln_1p()) as f32
}

/// Equirectangular radiance map, `[height, width, 3]` row-major, linear and
/// nonnegative. Row 0 is the +y pole.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl EnvironmentMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "environment map {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(EnvironmentMap { height, width, data })
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        EnvironmentMap { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut([f64; 3]) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(Self::texel_direction(height, width, x, y)));
            }
        }
        EnvironmentMap { height, width, data }
    }

    /// Radiance of a stored (pre-softplus) model tensor.
    pub fn from_stored(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::ShapeMismatch(format!("environment tensor must be [H, W, 3], got {s:?}")));
        }
        Self::new(s[0], s[1], t.data().iter().map(|&x| softplus_f32(x)).collect())
    }

    pub fn to_stored(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.iter().map(|&y| inverse_softplus_f32(y)).collect())
            .expect("consistent shape")
    }

    pub fn texel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Unit direction through the centre of texel `(x, y)`.
    pub fn texel_direction(height: usize, width: usize, x: usize, y: usize) -> [f64; 3] {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        uv_direction(u, v)
    }

    /// Bilinear lookup along a unit direction.
    pub fn lookup(&self, d: [f64; 3]) -> [f64; 3] {
        let (x, y, ..) = equirect_coords(d, self.height, self.width);
        self.sample_texel_coords(x, y)
    }

    /// Bilinear sample at continuous texel coordinates (centres at `i + 0.5`
    /// minus the half-texel offset, i.e. integer = texel centre).
    pub fn sample_texel_coords(&self, x: f64, y: f64) -> [f64; 3] {
        let (idx, w, ..) = equirect_taps(x, y, self.height, self.width);
        let mut out = [0.0; 3];
        for k in 0..4 {
            for c in 0..3 {
                out[c] += w[k] * self.data[idx[k] * 3 + c] as f64;
            }
        }
        out
    }

    /// Bilinear resampling to a new resolution (texel centres mapped
    /// through `u, v`).
    pub fn resample(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 + 0.5) / width as f64;
                let v = (y as f64 + 0.5) / height as f64;
                let px = self.sample_texel_coords(u * self.width as f64 - 0.5, v * self.height as f64 - 0.5);
                data.extend(px.map(|c| c as f32));
            }
        }
        EnvironmentMap { height, width, data }
    }

    pub fn mean(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut m = [0.0; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                m[c] += px[c] as f64;
            }
        }
        m.map(|v| v / n)
    }

    pub fn scaled(&self, s: f32) -> Self {
        EnvironmentMap { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }
}

/// Inverse of the equirectangular mapping `u = 0.5 + atan2(dx, -dz) / 2pi`,
/// `v = acos(dy) / pi`.
pub fn uv_direction(u: f64, v: f64) -> [f64; 3] {
    let phi = (u - 0.5) * 2.0 * std::f64::consts::PI;
    let theta = v * std::f64::consts::PI;
    let s = theta.sin();
    [s * phi.sin(), theta.cos(), -s * phi.cos()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> EnvironmentMap {
        EnvironmentMap::new(4, 8, (0..4 * 8 * 3).map(|i| i as f32 * 0.1).collect()).unwrap()
    }

    #[test]
    fn constant_map_returns_constant() {
        let e = EnvironmentMap::constant(8, 16, [0.3, 0.5, 2.0]);
        for d in [[0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.6, 0.0, 0.8], [-0.36, 0.48, 0.8]] {
            let v = e.lookup(d);
            assert!((v[0] - 0.3).abs() < 1e-7 && (v[1] - 0.5).abs() < 1e-7 && (v[2] - 2.0).abs() < 1e-7);
        }
    }

    #[test]
    fn north_pole_reads_top_row() {
        let e = ramp();
        let v = e.lookup([0.0, 1.0, 0.0]);
        // v = 0 sits above the first row centre; clamped to row 0
        let (x, y, ..) = equirect_coords([0.0, 1.0, 0.0], 4, 8);
        assert_eq!(y, -0.5);
        let want = e.sample_texel_coords(x, 0.0);
        assert_eq!(v, want);
    }

    #[test]
    fn midpoint_between_texel_centres_is_mean() {
        let e = ramp();
        // row 1 centre, halfway between columns 2 and 3
        let u = 3.0 / 8.0;
        let v = 1.5 / 4.0;
        let got = e.lookup(uv_direction(u, v));
        let (a, b) = (e.texel(2, 1), e.texel(3, 1));
        for c in 0..3 {
            assert!((got[c] - 0.5 * (a[c] + b[c]) as f64).abs() < 1e-5, "{got:?}");
        }
    }

    #[test]
    fn texel_centre_direction_reads_that_texel() {
        let e = ramp();
        for (x, y) in [(0, 1), (5, 2), (7, 0)] {
            let got = e.lookup(EnvironmentMap::texel_direction(4, 8, x, y));
            let want = e.texel(x, y);
            for c in 0..3 {
                assert!((got[c] - want[c] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn stored_roundtrip() {
        let e = EnvironmentMap::new(1, 2, vec![0.1, 1.0, 3.0, 0.5, 0.01, 10.0]).unwrap();
        let back = EnvironmentMap::from_stored(&e.to_stored()).unwrap();
        for (a, b) in e.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-5 * (1.0 + a));
        }
    }

    proptest! {
        #[test]
        fn lookup_is_periodic_in_longitude(theta in 0.05f64..3.09, phi in 0.0f64..6.28, k in -3i32..3) {
            let e = ramp();
            let d = |p: f64| [theta.sin() * p.sin(), theta.cos(), -theta.sin() * p.cos()];
            let a = e.lookup(d(phi));
            let b = e.lookup(d(phi + 2.0 * std::f64::consts::PI * k as f64));
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() < 1e-9);
            }
        }
    }
}
