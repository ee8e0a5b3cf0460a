use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CSV header of the experiment matrix.
pub const CSV_HEADER: [&str; 8] = ["scene", "manipulated", "direction", "finetuned", "psnr", "ssim", "mae", "epsnr"];

/// One matrix cell. `finetuned` is `none` for the no-fine-tune column and
/// the baseline row uses `manipulated = baseline`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scene: String,
    pub manipulated: String,
    pub direction: String,
    pub finetuned: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: Option<f64>,
    pub epsnr: Option<f64>,
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let err = |source| Error::Csv { path: path.into(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let err = |source| Error::Csv { path: path.into(), source };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let header: Vec<String> = r.headers().map_err(err)?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::schema(path, format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(err)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ReportRow> {
        vec![
            ReportRow {
                scene: "sphere".into(),
                manipulated: "albedo_under".into(),
                direction: "under".into(),
                finetuned: "none".into(),
                psnr: 24.125,
                ssim: 0.9,
                mae: Some(3.5),
                epsnr: None,
            },
            ReportRow {
                scene: "sphere".into(),
                manipulated: "envmap".into(),
                direction: "n/a".into(),
                finetuned: "envmap".into(),
                psnr: 30.0,
                ssim: 0.95,
                mae: None,
                epsnr: Some(12.0),
            },
        ]
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_csv(&p, &rows()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(read_csv(&p).unwrap(), rows());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_json(&p, &rows()).unwrap();
        let back: Vec<ReportRow> = read_json(&p).unwrap();
        assert_eq!(back, rows());
    }

    #[test]
    fn missing_file_reports_path() {
        let e = read_csv(Path::new("/nonexistent/x.csv")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x.csv"));
    }
}
