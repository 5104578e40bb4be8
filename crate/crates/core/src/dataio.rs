//! Dataset records and serialization. One JSON record per line holds the
//! face box, per-landmark annotations (nullable), the annotation mask,
//! binary occlusion labels, and the error-normalizer landmark indices;
//! images live beside the record file as binary PGM rasters.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::shape::{FaceBox, Point, Shape};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// Which landmark pair normalizes this sample's detection error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Normalizer {
    /// Distance between two eye landmarks.
    InterOcular { left: usize, right: usize },
    /// Half the distance from an outer eye corner to a mouth corner, for
    /// profile faces where only one eye is visible.
    Profile { eye: usize, mouth: usize },
}

/// One annotated face instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// Image path, relative to the record file's directory.
    pub image: String,
    pub face_box: FaceBox,
    /// Ground-truth locations; `None` where no annotation exists.
    pub landmarks: Vec<Option<Point>>,
    /// 1 = location annotation available.
    pub mask: Vec<bool>,
    /// 1 = visible, 0 = occluded. Occluded-but-annotated and
    /// unannotated-and-occluded are both legal combinations.
    pub occlusion: Vec<u8>,
    pub normalizer: Normalizer,
}

impl SampleRecord {
    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }

    /// Structural invariants every record must satisfy.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let d = self.landmarks.len();
        if self.mask.len() != d {
            return Err(format!("mask length {} != landmark count {d}", self.mask.len()));
        }
        if self.occlusion.len() != d {
            return Err(format!(
                "occlusion length {} != landmark count {d}",
                self.occlusion.len()
            ));
        }
        if !(self.face_box.width > 0.0 && self.face_box.height > 0.0) {
            return Err("face box must have positive size".into());
        }
        for (i, bit) in self.occlusion.iter().enumerate() {
            if *bit > 1 {
                return Err(format!("occlusion bit {i} is {bit}, expected 0 or 1"));
            }
        }
        for (i, (m, l)) in self.mask.iter().zip(&self.landmarks).enumerate() {
            if *m && l.is_none() {
                return Err(format!("landmark {i} is annotated (mask=1) but null"));
            }
            if let Some(p) = l {
                if !p.x.is_finite() || !p.y.is_finite() {
                    return Err(format!("landmark {i} has non-finite coordinates"));
                }
            }
        }
        let check_idx = |name: &str, idx: usize| {
            if idx >= d {
                Err(format!("normalizer {name} index {idx} out of range (D_l={d})"))
            } else {
                Ok(())
            }
        };
        match self.normalizer {
            Normalizer::InterOcular { left, right } => {
                check_idx("left", left)?;
                check_idx("right", right)?;
            }
            Normalizer::Profile { eye, mouth } => {
                check_idx("eye", eye)?;
                check_idx("mouth", mouth)?;
            }
        }
        Ok(())
    }

    /// Annotated ground-truth shape with unannotated points at the
    /// origin; pair with `mask` everywhere it is consumed.
    pub fn annotated_shape(&self) -> Shape {
        Shape::new(
            self.landmarks
                .iter()
                .map(|l| l.unwrap_or(Point::new(0.0, 0.0)))
                .collect(),
        )
    }
}

/// Records plus their decoded images, index-aligned.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub images: Vec<GrayImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The common landmark count, checked across all records.
    pub fn landmark_count(&self) -> Result<usize> {
        let d = self
            .records
            .first()
            .map(|r| r.landmark_count())
            .ok_or(Error::EmptyInput("dataset has no records"))?;
        for (i, r) in self.records.iter().enumerate() {
            if r.landmark_count() != d {
                return Err(Error::DatasetParse {
                    path: String::new(),
                    line: i + 1,
                    message: format!("landmark count {} != {d}", r.landmark_count()),
                });
            }
        }
        Ok(d)
    }

    /// Write records to `path` (JSONL) and every image next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = parent_dir(path);
        save_records(&self.records, path)?;
        for (rec, img) in self.records.iter().zip(&self.images) {
            let img_path = dir.join(&rec.image);
            if let Some(p) = img_path.parent() {
                std::fs::create_dir_all(p)?;
            }
            img.write_pgm(&img_path)?;
        }
        Ok(())
    }

    /// Load records from `path` and the images they reference.
    pub fn load(path: &Path) -> Result<Self> {
        let records = load_records(path)?;
        let dir = parent_dir(path);
        let mut images = Vec::with_capacity(records.len());
        for rec in &records {
            images.push(GrayImage::read_pgm(&dir.join(&rec.image))?);
        }
        let ds = Self { records, images };
        if !ds.records.is_empty() {
            ds.landmark_count()?;
        }
        Ok(ds)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Write one JSON record per line.
pub fn save_records(records: &[SampleRecord], path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, rec) in records.iter().enumerate() {
        if let Err(message) = rec.validate() {
            return Err(Error::DatasetParse {
                path: path.display().to_string(),
                line: i + 1,
                message,
            });
        }
        let line = serde_json::to_string(rec).map_err(|e| Error::DatasetParse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Read a JSONL record file. Unknown fields and invariant violations are
/// rejected with the offending line number; an empty file is an empty
/// dataset.
pub fn load_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::DatasetParse {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(parse_err)?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(image: &str) -> SampleRecord {
        SampleRecord {
            image: image.to_string(),
            face_box: FaceBox::new(10.0, 12.0, 40.0, 44.0),
            landmarks: vec![
                Some(Point::new(20.0, 25.0)),
                Some(Point::new(35.0, 25.5)),
                None,
            ],
            mask: vec![true, true, false],
            occlusion: vec![1, 0, 0],
            normalizer: Normalizer::InterOcular { left: 0, right: 1 },
        }
    }

    #[test]
    fn jsonl_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let records = vec![sample("a.pgm"), {
            let mut r = sample("b.pgm");
            r.normalizer = Normalizer::Profile { eye: 0, mouth: 1 };
            r
        }];
        save_records(&records, &path).unwrap();
        let back = load_records(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_records(&path).unwrap().is_empty());
    }

    #[test]
    fn unknown_fields_are_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&sample("a.pgm")).unwrap();
        let bad = good.replacen('{', "{\"surprise\":1,", 1);
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_records(&path).unwrap_err() {
            Error::DatasetParse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("surprise"), "message: {message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn masked_null_landmark_is_rejected_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut rec = sample("a.pgm");
        rec.landmarks[1] = None; // mask still claims annotated
        let line = serde_json::to_string(&rec).unwrap();
        std::fs::write(&path, format!("{line}\n")).unwrap();
        match load_records(&path).unwrap_err() {
            Error::DatasetParse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("landmark 1"), "message: {message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dataset_save_load_round_trips_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set/data.jsonl");
        let mut img0 = GrayImage::new(8, 8).unwrap();
        img0.fill(200);
        let mut img1 = GrayImage::new(8, 8).unwrap();
        img1.set(3, 4, 77);
        let ds = Dataset {
            records: vec![sample("img/0.pgm"), sample("img/1.pgm")],
            images: vec![img0, img1],
        };
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.images, ds.images);
        assert_eq!(back.landmark_count().unwrap(), 3);
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_records(&[sample("nowhere.pgm")], &path).unwrap();
        assert!(Dataset::load(&path).is_err());
    }
}
