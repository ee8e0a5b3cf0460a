use std::fs;
use std::io::Write;
use std::path::Path;

use super::color::{decode_byte, encode_byte};
use crate::error::{Error, Result};
use crate::metrics::Image;
use crate::shading::EnvironmentMap;

/// Decode an 8-bit PNG to linear RGBA (alpha kept linear as stored).
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.into_rgba8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .flat_map(|p| [decode_byte(p[0]), decode_byte(p[1]), decode_byte(p[2]), p[3] as f32 / 255.0])
        .collect();
    Image::new(w as usize, h as usize, 4, data)
}

/// Write a linear image (1, 3 or 4 channels) as 8-bit sRGB PNG. A fourth
/// channel is written as linear alpha.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let err = |source| Error::Image { path: path.into(), source };
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => {
            let bytes = img.data.iter().map(|&v| encode_byte(v)).collect();
            image::GrayImage::from_raw(w, h, bytes).expect("sized").save(path).map_err(err)
        }
        3 => {
            let bytes = img.data.iter().map(|&v| encode_byte(v)).collect();
            image::RgbImage::from_raw(w, h, bytes).expect("sized").save(path).map_err(err)
        }
        4 => {
            let bytes = img
                .data
                .chunks(4)
                .flat_map(|p| [encode_byte(p[0]), encode_byte(p[1]), encode_byte(p[2]), (p[3].clamp(0.0, 1.0) * 255.0).round() as u8])
                .collect();
            image::RgbaImage::from_raw(w, h, bytes).expect("sized").save(path).map_err(err)
        }
        c => Err(Error::UnsupportedFormat(format!("{c}-channel PNG"))),
    }
}

/// Portable float map. Rows are returned top-down.
pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes).map_err(|m| Error::schema(path, m))
}

fn parse_pfm(bytes: &[u8]) -> std::result::Result<Image, String> {
    // three whitespace-separated header tokens, then one whitespace byte
    let mut tokens = Vec::new();
    let mut at = 0;
    while tokens.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err("truncated PFM header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| "PFM header is not ASCII")?.to_string());
    }
    at += 1;
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(format!("bad PFM magic `{t}`")),
    };
    let w: usize = tokens[1].parse().map_err(|_| "bad PFM width")?;
    let h: usize = tokens[2].parse().map_err(|_| "bad PFM height")?;
    let scale: f32 = tokens[3].parse().map_err(|_| "bad PFM scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("PFM scale must be nonzero".into());
    }
    let little = scale < 0.0;
    let n = w * h * channels;
    let body = bytes.get(at..at + 4 * n).ok_or("truncated PFM data")?;
    let mut data = vec![0.0f32; n];
    for y in 0..h {
        // stored bottom-up
        let src_row = h - 1 - y;
        for i in 0..w * channels {
            let o = 4 * (src_row * w * channels + i);
            let b = [body[o], body[o + 1], body[o + 2], body[o + 3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            if !v.is_finite() {
                return Err("non-finite value in PFM data".into());
            }
            data[y * w * channels + i] = v;
        }
    }
    Image::new(w, h, channels, data).map_err(|e| e.to_string())
}

/// Write a 1- or 3-channel image as little-endian PFM.
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let magic = match img.channels {
        3 => "PF",
        1 => "Pf",
        c => return Err(Error::UnsupportedFormat(format!("{c}-channel PFM"))),
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Load an environment map from PFM (linear) or PNG (sRGB).
pub fn load_envmap(path: &Path) -> Result<EnvironmentMap> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let img = match ext.as_str() {
        "pfm" => read_pfm(path)?,
        "png" => read_png(path)?,
        _ => return Err(Error::UnsupportedFormat(format!("environment map {}", path.display()))),
    };
    if img.width != 2 * img.height {
        log::warn!("environment map {} is {}x{}, not 2:1", path.display(), img.width, img.height);
    }
    let data: Vec<f32> = img
        .data
        .chunks(img.channels)
        .flat_map(|p| if img.channels >= 3 { [p[0], p[1], p[2]] } else { [p[0]; 3] })
        .map(|v| v.max(0.0))
        .collect();
    EnvironmentMap::new(img.height, img.width, data)
}

pub fn save_envmap(path: &Path, env: &EnvironmentMap) -> Result<()> {
    let img = Image::new(env.width, env.height, 3, env.data.clone())?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "pfm" => write_pfm(path, &img),
        "png" => write_png(path, &img),
        _ => Err(Error::UnsupportedFormat(format!("environment map {}", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_hand_written_little_endian() {
        // 2x1, one channel, negative scale => little-endian
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]); // 1.0
        bytes.extend_from_slice(&[0x00, 0x00, 0x20, 0xc0]); // -2.5
        let img = parse_pfm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![1.0, -2.5]);
    }

    #[test]
    fn pfm_big_endian_and_row_order() {
        let mut bytes = b"Pf 1 2 1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes()); // bottom row
        bytes.extend_from_slice(&7.0f32.to_be_bytes()); // top row
        let img = parse_pfm(&bytes).unwrap();
        assert_eq!(img.data, vec![7.0, 1.5]);
    }

    #[test]
    fn pfm_rejects_nan_and_truncation() {
        let mut bytes = b"Pf\n1 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(parse_pfm(&bytes).is_err());
        assert!(parse_pfm(b"PF\n2 2\n-1.0\n\x00\x00").is_err());
        assert!(parse_pfm(b"P6\n1 1\n-1.0\n\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let img = Image::new(2, 1, 3, vec![0.25, 1.0, 3.5, 1e-3, 0.0, 12.0]).unwrap();
        write_pfm(&p, &img).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), img);
        let env = load_envmap(&p).unwrap();
        assert_eq!(env.data, img.data);
    }

    #[test]
    fn png_white_is_linear_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        write_png(&p, &Image::filled(4, 2, 3, 1.0)).unwrap();
        let env = load_envmap(&p).unwrap();
        assert!(env.data.iter().all(|&v| v == 1.0));
        let rgba = read_png(&p).unwrap();
        assert_eq!(rgba.channels, 4);
        assert!(rgba.data.chunks(4).all(|px| px[3] == 1.0));
    }

    #[test]
    fn png_encodes_srgb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_png(&p, &Image::filled(1, 1, 1, 0.2158)).unwrap();
        let raw = image::open(&p).unwrap().into_luma8();
        assert_eq!(raw.get_pixel(0, 0)[0], 128);
    }

    #[test]
    fn unknown_extension_is_rejected() {
        assert!(matches!(load_envmap(Path::new("x.exr")), Err(Error::UnsupportedFormat(_))));
    }
}
