/// sRGB transfer function, encoded `[0, 1]` to linear.
pub fn srgb_to_linear(c: f32) -> f32 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear to sRGB-encoded, input clamped to `[0, 1]`.
pub fn linear_to_srgb(l: f32) -> f32 {
    let l = l.clamp(0.0, 1.0);
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

pub fn decode_byte(b: u8) -> f32 {
    srgb_to_linear(b as f32 / 255.0)
}

pub fn encode_byte(l: f32) -> u8 {
    (linear_to_srgb(l) * 255.0).round() as u8
}
