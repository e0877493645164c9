//! Labeled cyclone imagery: ingestion, storm/speed indexing, splitting,
//! debiased batch sampling, augmentation and a synthetic generator.

mod augment;
mod image;
mod sampler;
mod split;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use self::augment::{augment_rotate, rotate_angle, rotate_quarter, RotationPolicy};
pub use self::image::Image;
pub use self::sampler::{images_to_tensor, Batch, BatchSampler, SamplerConfig};
pub use self::split::{bootstrap_subset, event_disjoint_split};

use crate::error::{Error, Result, RowError};

/// One labeled satellite image.
#[derive(Clone, Debug, PartialEq)]
pub struct CycloneSample {
    pub image_id: String,
    pub storm_id: String,
    pub image: Arc<Image>,
    /// Maximum sustained wind, knots.
    pub wind_speed: f32,
    pub ocean: Option<String>,
    pub relative_time: Option<f64>,
}

impl CycloneSample {
    /// Integer knot bin used for speed indexing.
    pub fn speed_key(&self) -> u32 {
        speed_key(self.wind_speed)
    }
}

pub fn speed_key(speed: f32) -> u32 {
    speed.round().max(0.0) as u32
}

/// Samples plus storm and speed indices.
#[derive(Clone, Debug, Default)]
pub struct DatasetIndex {
    samples: Vec<CycloneSample>,
    by_storm: BTreeMap<String, Vec<usize>>,
    /// speed bin -> storm -> sample positions
    by_speed: BTreeMap<u32, BTreeMap<String, Vec<usize>>>,
}

impl DatasetIndex {
    pub fn new(samples: Vec<CycloneSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut by_storm: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_speed: BTreeMap<u32, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if !seen.insert(s.image_id.as_str()) {
                return Err(Error::Data(format!("duplicate image_id {}", s.image_id)));
            }
            if !(s.wind_speed > 0.0) || !s.wind_speed.is_finite() {
                return Err(Error::Data(format!("{}: wind speed must be positive", s.image_id)));
            }
            by_storm.entry(s.storm_id.clone()).or_default().push(i);
            by_speed
                .entry(s.speed_key())
                .or_default()
                .entry(s.storm_id.clone())
                .or_default()
                .push(i);
        }
        Ok(DatasetIndex {
            samples,
            by_storm,
            by_speed,
        })
    }

    pub fn samples(&self) -> &[CycloneSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn storm_ids(&self) -> impl Iterator<Item = &str> {
        self.by_storm.keys().map(String::as_str)
    }

    pub fn storm_count(&self) -> usize {
        self.by_storm.len()
    }

    /// Sample positions belonging to `storm`.
    pub fn storm(&self, storm: &str) -> &[usize] {
        self.by_storm.get(storm).map_or(&[], Vec::as_slice)
    }

    /// Distinct integer speed bins, ascending.
    pub fn speeds(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_speed.keys().copied()
    }

    pub fn speed_count(&self) -> usize {
        self.by_speed.len()
    }

    /// Storms holding at least one image at `speed`, each with those images.
    pub fn storms_at_speed(&self, speed: u32) -> Option<&BTreeMap<String, Vec<usize>>> {
        self.by_speed.get(&speed)
    }

    pub fn max_speed(&self) -> Option<f32> {
        self.samples.iter().map(|s| s.wind_speed).reduce(f32::max)
    }

    pub fn wind_speeds(&self) -> Vec<f32> {
        self.samples.iter().map(|s| s.wind_speed).collect()
    }

    /// New index over the samples accepted by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&CycloneSample) -> bool) -> DatasetIndex {
        let kept = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        DatasetIndex::new(kept).expect("subset of a valid index is valid")
    }

    /// Samples of the listed storms, in the order given.
    pub fn select_storms<'a>(&self, storms: impl IntoIterator<Item = &'a str>) -> DatasetIndex {
        let samples = storms
            .into_iter()
            .flat_map(|s| self.storm(s).iter().map(|&i| self.samples[i].clone()))
            .collect();
        DatasetIndex::new(samples).expect("subset of a valid index is valid")
    }
}

/// Outcome of [`load_dataset`]: the good rows plus every rejected one.
#[derive(Debug)]
pub struct LoadReport {
    pub index: DatasetIndex,
    pub rejected: Vec<RowError>,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "tif", "tiff", "pgm", "jpg", "jpeg"];

fn resolve_image(dir: &Path, image_id: &str) -> Option<PathBuf> {
    let direct = dir.join(image_id);
    if direct.extension().is_some() && direct.is_file() {
        return Some(direct);
    }
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

#[derive(Deserialize)]
struct LabelRow {
    image_id: String,
    storm_id: String,
    wind_speed: String,
    #[serde(default)]
    ocean: Option<String>,
    #[serde(default)]
    relative_time: Option<String>,
}

/// Reads a labels CSV (`image_id, storm_id, wind_speed[, ocean, relative_time]`)
/// and the referenced grayscale images. Bad rows are collected, not fatal.
pub fn load_dataset(image_dir: impl AsRef<Path>, labels_csv: impl AsRef<Path>) -> Result<LoadReport> {
    let image_dir = image_dir.as_ref();
    let labels_csv = labels_csv.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(labels_csv)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(labels_csv, io),
            other => Error::Data(format!("{}: {other:?}", labels_csv.display())),
        })?;
    let headers = reader.headers()?.clone();
    for required in ["image_id", "storm_id", "wind_speed"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Data(format!(
                "{}: missing required column {required}",
                labels_csv.display()
            )));
        }
    }
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.deserialize::<LabelRow>().enumerate() {
        let row = i + 1;
        let parsed = match record {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RowError {
                    row,
                    image_id: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let reject = |reason: String| RowError {
            row,
            image_id: Some(parsed.image_id.clone()),
            reason,
        };
        let speed: f32 = match parsed.wind_speed.parse() {
            Ok(v) => v,
            Err(_) => {
                rejected.push(reject(format!("unparseable wind_speed {:?}", parsed.wind_speed)));
                continue;
            }
        };
        if !(speed > 0.0) || !speed.is_finite() {
            rejected.push(reject(format!("wind_speed {speed} must be positive")));
            continue;
        }
        if !seen.insert(parsed.image_id.clone()) {
            rejected.push(reject("duplicate image_id".into()));
            continue;
        }
        let Some(path) = resolve_image(image_dir, &parsed.image_id) else {
            rejected.push(reject(format!("no image file in {}", image_dir.display())));
            continue;
        };
        let image = match Image::load(&path) {
            Ok(img) => img,
            Err(e) => {
                rejected.push(reject(e.to_string()));
                continue;
            }
        };
        let relative_time = match parsed.relative_time.as_deref().filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => match s.parse() {
                Ok(v) => Some(v),
                Err(_) => {
                    rejected.push(reject(format!("unparseable relative_time {s:?}")));
                    continue;
                }
            },
        };
        samples.push(CycloneSample {
            image_id: parsed.image_id,
            storm_id: parsed.storm_id,
            image: Arc::new(image),
            wind_speed: speed,
            ocean: parsed.ocean.filter(|s| !s.is_empty()),
            relative_time,
        });
    }
    if samples.is_empty() && !rejected.is_empty() {
        return Err(Error::NoRows {
            path: labels_csv.to_path_buf(),
            rows: rejected,
        });
    }
    Ok(LoadReport {
        index: DatasetIndex::new(samples)?,
        rejected,
    })
}

#[derive(Serialize)]
struct LabelOut<'a> {
    image_id: &'a str,
    storm_id: &'a str,
    wind_speed: f32,
    ocean: Option<&'a str>,
    relative_time: Option<f64>,
}

/// Writes a labels CSV only (no images), for split outputs.
pub fn write_labels(index: &DatasetIndex, labels_csv: impl AsRef<Path>) -> Result<()> {
    let path = labels_csv.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for s in index.samples() {
        w.serialize(LabelOut {
            image_id: &s.image_id,
            storm_id: &s.storm_id,
            wind_speed: s.wind_speed,
            ocean: s.ocean.as_deref(),
            relative_time: s.relative_time,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes `dir/images/<id>.png` (16-bit grayscale) and `dir/labels.csv`, the
/// same layout [`load_dataset`] reads.
pub fn export_dataset(index: &DatasetIndex, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in index.samples() {
        s.image.save_png16(images.join(format!("{}.png", s.image_id)))?;
    }
    write_labels(index, dir.join("labels.csv"))
}
