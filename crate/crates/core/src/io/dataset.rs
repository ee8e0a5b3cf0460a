use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::images::{load_envmap, read_pfm, read_png, save_envmap, write_pfm, write_png};
use crate::error::{Error, Result};
use crate::metrics::Image;
use crate::renderer::Camera;
use crate::shading::EnvironmentMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One posed view. `rgb` is linear and not composited; `alpha` is kept
/// separately for masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub name: String,
    pub split: Split,
    pub rgb: Image,
    pub alpha: Vec<f32>,
    pub c2w: [[f64; 4]; 4],
    /// Unit ground-truth normals per pixel, when provided.
    pub normals: Option<Vec<[f64; 3]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub name: String,
    pub fov_x: f64,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Frame>,
    pub env: Option<EnvironmentMap>,
}

impl SceneDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn camera(&self, frame: &Frame) -> Result<Camera> {
        Camera::new(frame.c2w, self.fov_x, self.width, self.height)
    }

    /// Add frames from another split of the same scene.
    pub fn merge(&mut self, other: SceneDataset) -> Result<()> {
        if (other.width, other.height) != (self.width, self.height) || (other.fov_x - self.fov_x).abs() > 1e-9 {
            return Err(Error::DatasetMismatch(format!(
                "resolution/fov {}x{} @ {} vs {}x{} @ {}",
                other.width, other.height, other.fov_x, self.width, self.height, self.fov_x
            )));
        }
        self.frames.extend(other.frames);
        if self.env.is_none() {
            self.env = other.env;
        }
        Ok(())
    }
}

fn image_path(base: &Path, file: &str) -> PathBuf {
    let p = base.join(file);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

fn parse_matrix(v: &Value) -> Option<[[f64; 4]; 4]> {
    let rows = v.as_array()?;
    if rows.len() != 4 {
        return None;
    }
    let mut m = [[0.0; 4]; 4];
    for (r, row) in rows.iter().enumerate() {
        let row = row.as_array()?;
        if row.len() != 4 {
            return None;
        }
        for (c, x) in row.iter().enumerate() {
            m[r][c] = x.as_f64()?;
        }
    }
    Some(m)
}

fn load_normals(path: &Path, w: usize, h: usize) -> Result<Vec<[f64; 3]>> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path)?,
        _ => {
            // 8-bit normal maps store n * 0.5 + 0.5 without a transfer curve
            let raw = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.into_rgb8();
            let (iw, ih) = raw.dimensions();
            let data = raw.pixels().flat_map(|p| [0, 1, 2].map(|c| p[c] as f32 / 255.0 * 2.0 - 1.0)).collect();
            Image::new(iw as usize, ih as usize, 3, data)?
        }
    };
    if (img.width, img.height) != (w, h) || img.channels != 3 {
        return Err(Error::schema(path, format!("normal map must be {w}x{h}x3")));
    }
    Ok(img
        .data
        .chunks(3)
        .map(|p| {
            let v = [p[0] as f64, p[1] as f64, p[2] as f64];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if l > 1e-6 {
                v.map(|c| c / l)
            } else {
                [0.0; 3]
            }
        })
        .collect())
}

/// Read one `transforms_<split>.json` file (NeRF-synthetic layout).
///
/// Frames may carry an optional `"normal_path"` (PFM or 8-bit PNG) with
/// ground-truth normals.
pub fn load_transforms(path: &Path, split: Split) -> Result<SceneDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json: Value = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let fov_x = json
        .get("camera_angle_x")
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::schema(path, "missing numeric \"camera_angle_x\""))?;
    if !(fov_x.is_finite() && fov_x > 0.0) {
        return Err(Error::schema(path, "camera_angle_x must be positive"));
    }
    let frames_json = json.get("frames").and_then(Value::as_array).ok_or_else(|| Error::schema(path, "missing \"frames\" array"))?;
    let mut frames = Vec::with_capacity(frames_json.len());
    let mut dims = None;
    for (i, f) in frames_json.iter().enumerate() {
        let file = f
            .get("file_path")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::schema(path, format!("frame {i}: missing \"file_path\"")))?;
        let c2w = f
            .get("transform_matrix")
            .and_then(parse_matrix)
            .ok_or_else(|| Error::schema(path, format!("frame {i}: \"transform_matrix\" must be 4x4 numbers")))?;
        if !c2w.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{} frame {i} transform_matrix", path.display())));
        }
        let img_path = image_path(base, file);
        if !img_path.exists() {
            return Err(Error::schema(path, format!("frame {i}: missing image {}", img_path.display())));
        }
        let rgba = read_png(&img_path)?;
        let (w, h) = (rgba.width, rgba.height);
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::DatasetMismatch(format!("frame {i} is {w}x{h}, expected {}x{}", d.0, d.1)))
            }
            _ => {}
        }
        let rgb = Image::new(w, h, 3, rgba.data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect())?;
        let alpha = rgba.data.chunks(4).map(|p| p[3]).collect();
        let normals = match f.get("normal_path").and_then(Value::as_str) {
            Some(n) => Some(load_normals(&base.join(n), w, h)?),
            None => None,
        };
        let name = Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| i.to_string());
        frames.push(Frame { name, split, rgb, alpha, c2w, normals });
    }
    let (width, height) = dims.ok_or_else(|| Error::schema(path, "no frames"))?;
    let name = base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(SceneDataset { name, fov_x, width, height, frames, env: None })
}

/// Load `transforms_train.json`, `transforms_test.json` (optional) and an
/// optional `envmap.pfm` / `envmap.png` from a scene directory.
pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let mut ds = load_transforms(&dir.join("transforms_train.json"), Split::Train)?;
    let test = dir.join("transforms_test.json");
    if test.exists() {
        ds.merge(load_transforms(&test, Split::Test)?)?;
    }
    for name in ["envmap.pfm", "envmap.png"] {
        let p = dir.join(name);
        if p.exists() {
            ds.env = Some(load_envmap(&p)?);
            break;
        }
    }
    ds.name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ds)
}

/// Write a dataset in the layout `load_scene` reads. Images go out as
/// 8-bit sRGB RGBA PNGs and normals as PFM.
pub fn write_scene(dir: &Path, ds: &SceneDataset) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        if ds.count(split) == 0 {
            continue;
        }
        let sub = dir.join(split.as_str());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut frames = Vec::new();
        for f in ds.split(split) {
            let rel = format!("{}/{}", split.as_str(), f.name);
            let rgba: Vec<f32> = f.rgb.data.chunks(3).zip(&f.alpha).flat_map(|(p, &a)| [p[0], p[1], p[2], a]).collect();
            write_png(&dir.join(format!("{rel}.png")), &Image::new(ds.width, ds.height, 4, rgba)?)?;
            let mut entry = serde_json::json!({ "file_path": format!("./{rel}"), "transform_matrix": f.c2w });
            if let Some(n) = &f.normals {
                let npath = format!("{rel}_normal.pfm");
                let data = n.iter().flat_map(|v| v.map(|c| c as f32)).collect();
                write_pfm(&dir.join(&npath), &Image::new(ds.width, ds.height, 3, data)?)?;
                entry["normal_path"] = Value::String(npath);
            }
            frames.push(entry);
        }
        let json = serde_json::json!({ "camera_angle_x": ds.fov_x, "frames": frames });
        let p = dir.join(format!("transforms_{}.json", split.as_str()));
        let text = serde_json::to_string_pretty(&json).map_err(|source| Error::Json { path: p.clone(), source })?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    if let Some(env) = &ds.env {
        save_envmap(&dir.join("envmap.pfm"), env)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(tx: f64) -> [[f64; 4]; 4] {
        [[1.0, 0.0, 0.0, tx], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 4.0], [0.0, 0.0, 0.0, 1.0]]
    }

    fn fixture(dir: &Path) {
        fs::create_dir_all(dir.join("train")).unwrap();
        for i in 0..2 {
            let img = Image::new(3, 2, 4, (0..24).map(|k| if k % 4 == 3 { 1.0 } else { 0.2158 }).collect()).unwrap();
            write_png(&dir.join(format!("train/r_{i}.png")), &img).unwrap();
        }
        let json = serde_json::json!({
            "camera_angle_x": 0.69,
            "frames": [
                { "file_path": "./train/r_0", "transform_matrix": pose(0.0) },
                { "file_path": "./train/r_1", "transform_matrix": pose(1.0) },
            ]
        });
        fs::write(dir.join("transforms_train.json"), json.to_string()).unwrap();
    }

    #[test]
    fn two_frame_fixture() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_scene(dir.path()).unwrap();
        assert_eq!(ds.frames.len(), 2);
        assert_eq!((ds.width, ds.height), (3, 2));
        assert_eq!(ds.frames[1].c2w, pose(1.0));
        assert!((ds.frames[0].rgb.data[0] - 0.2158).abs() < 1e-3);
        assert!(ds.frames[0].alpha.iter().all(|&a| a == 1.0));
        assert_eq!(ds.count(Split::Test), 0);
        ds.camera(&ds.frames[0]).unwrap();
    }

    #[test]
    fn missing_fov_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::write(dir.path().join("transforms_train.json"), r#"{"frames": []}"#).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::Schema { .. })));
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::remove_file(dir.path().join("train/r_1.png")).unwrap();
        assert!(matches!(load_scene(dir.path()), Err(Error::Schema { .. })));
    }

    #[test]
    fn non_finite_matrix_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let text = fs::read_to_string(dir.path().join("transforms_train.json")).unwrap();
        // JSON has no NaN; an overflowing literal must still be rejected
        let text = text.replacen("4.0", "1e999", 1);
        fs::write(dir.path().join("transforms_train.json"), text).unwrap();
        assert!(load_scene(dir.path()).is_err());
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let n = vec![[0.0, 0.0, 1.0]; 4];
        let frame = |name: &str, split| Frame {
            name: name.into(),
            split,
            rgb: rgb.clone(),
            alpha: vec![1.0, 0.0, 1.0, 1.0],
            c2w: pose(0.5),
            normals: Some(n.clone()),
        };
        let ds = SceneDataset {
            name: "x".into(),
            fov_x: 0.5,
            width: 2,
            height: 2,
            frames: vec![frame("a", Split::Train), frame("b", Split::Test)],
            env: Some(EnvironmentMap::constant(2, 4, [0.5, 1.0, 2.0])),
        };
        write_scene(dir.path(), &ds).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.count(Split::Train), 1);
        assert_eq!(back.count(Split::Test), 1);
        assert_eq!(back.frames[1].alpha, vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(back.frames[0].normals.as_ref().unwrap(), &n);
        assert_eq!(back.env, ds.env);
        assert!((back.frames[0].rgb.data[0] - 0.5).abs() < 5e-3);
    }
}
