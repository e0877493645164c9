//! Grad-CAM heatmaps for the speed regressor, ensemble median masks and
//! PGM/PPM/CSV export.
//!
//! The explained scalar is the head output (log speed). For conv stage `k`
//! with activations `A` (after ReLU), channel weights are the spatial means of
//! `d head / d A`, the map is `ReLU(sum_c alpha_c A_c)`, upsampled bilinearly
//! to the image resolution and divided by its maximum.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{images_to_tensor, Image};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::models::GlobalEnsemble;
use crate::network::{Model, CONV_STAGES};
use crate::rng::stream_rng;
use crate::tensor::Scalar;

/// Deepest conv stage, used when no layer is given.
pub const DEFAULT_LAYER: usize = CONV_STAGES;
/// Overlay opacity at heat 1.
pub const OVERLAY_ALPHA: f32 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub size: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f32>,
    /// Conv stage, 1-based.
    pub layer: usize,
    /// What produced the map, e.g. `member 3` or `median`.
    pub source: String,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.size + col]
    }

    /// `(row, col)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.size, best % self.size)
    }
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn normalize_max(values: &mut [f32]) {
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v /= max;
        }
    }
}

/// Intermediate quantities of one Grad-CAM computation.
#[derive(Clone, Debug)]
pub struct GradCam {
    pub heatmap: Heatmap,
    /// Per-channel weights.
    pub alphas: Vec<f64>,
    /// `ReLU(sum_c alpha_c A_c)` at the stage's spatial extent, before
    /// upsampling and normalization.
    pub raw_map: Vec<f64>,
    pub raw_extent: usize,
    /// Head output for the image.
    pub log_speed: f64,
}

fn check_layer(layer: usize) -> Result<()> {
    if !(1..=CONV_STAGES).contains(&layer) {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range, expected 1..={CONV_STAGES}"
        )));
    }
    Ok(())
}

/// Bilinear upsampling of an `extent`-square map to `size` (half-pixel
/// centers, edge clamped).
fn upsample(map: &[f64], extent: usize, size: usize) -> Vec<f32> {
    let scale = extent as f64 / size as f64;
    let max = (extent - 1) as f64;
    let at = |r: usize, c: usize| map[r * extent + c];
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let y = ((r as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(extent - 1);
        for c in 0..size {
            let x = ((c as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(extent - 1);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Grad-CAM of `model` (evaluated in eval mode) on `image` at conv stage
/// `layer` (1-based). The heatmap has the image's resolution.
pub fn grad_cam_detail<T: Scalar>(model: &Model<T>, image: &Image, layer: usize) -> Result<GradCam> {
    check_layer(layer)?;
    let size = model.config().input_size;
    let input = images_to_tensor([image], size).cast::<T>();
    let mut unused = stream_rng(0, 0);

    let mut g = Graph::<T>::new();
    let x = g.constant(input);
    let trace = model.trace(&mut g, x, Mode::Eval, false, &mut unused)?;
    let activation = g.value(trace.stages[layer - 1]).clone();

    let mut g = Graph::<T>::new();
    let a = g.leaf(activation.clone());
    let trace = model.trace_from(&mut g, layer, a, Mode::Eval, false, &mut unused)?;
    let log_speed = g.value(trace.log_speed).data()[0].to_f64().unwrap_or(f64::NAN);
    let grads = g.backward(trace.log_speed)?;
    let grad = grads.get(a).expect("leaf gradient");

    let shape = activation.shape();
    let (channels, extent) = (shape[1], shape[2]);
    let plane = extent * extent;
    let to64 = |v: &T| v.to_f64().unwrap_or(f64::NAN);
    let alphas: Vec<f64> = grad
        .data()
        .chunks_exact(plane)
        .map(|ch| ch.iter().map(to64).sum::<f64>() / plane as f64)
        .collect();
    let mut raw_map = vec![0.0f64; plane];
    for (c, &alpha) in alphas.iter().enumerate().take(channels) {
        for (m, v) in raw_map.iter_mut().zip(&activation.data()[c * plane..(c + 1) * plane]) {
            *m += alpha * to64(v);
        }
    }
    for m in &mut raw_map {
        *m = m.max(0.0);
    }
    let mut values = upsample(&raw_map, extent, image.size());
    normalize_max(&mut values);
    Ok(GradCam {
        heatmap: Heatmap {
            size: image.size(),
            values,
            layer,
            source: "model".into(),
        },
        alphas,
        raw_map,
        raw_extent: extent,
        log_speed,
    })
}

pub fn grad_cam<T: Scalar>(model: &Model<T>, image: &Image, layer: usize) -> Result<Heatmap> {
    Ok(grad_cam_detail(model, image, layer)?.heatmap)
}

/// Pixelwise median of equally sized maps; for an even count the lower of the
/// two middle values.
pub fn pixel_median(maps: &[&[f32]]) -> Vec<f32> {
    let Some(first) = maps.first() else {
        return Vec::new();
    };
    let mid = (maps.len() - 1) / 2;
    let mut column = vec![0.0f32; maps.len()];
    (0..first.len())
        .map(|i| {
            for (slot, m) in column.iter_mut().zip(maps) {
                *slot = m[i];
            }
            column.sort_by(f32::total_cmp);
            column[mid]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EnsembleHeatmap {
    pub members: Vec<Heatmap>,
    /// Renormalized pixelwise median.
    pub median: Heatmap,
}

/// Grad-CAM for every member (in parallel) and their renormalized median.
pub fn ensemble_heatmap(ensemble: &GlobalEnsemble, image: &Image, layer: usize) -> Result<EnsembleHeatmap> {
    check_layer(layer)?;
    let members: Vec<Heatmap> = ensemble
        .members()
        .par_iter()
        .enumerate()
        .map(|(index, m)| {
            grad_cam(m, image, layer)
                .map(|mut h| {
                    h.source = format!("member {index}");
                    h
                })
                .map_err(|e| Error::Member {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let maps: Vec<&[f32]> = members.iter().map(|h| h.values.as_slice()).collect();
    let mut values = pixel_median(&maps);
    normalize_max(&mut values);
    Ok(EnsembleHeatmap {
        median: Heatmap {
            size: image.size(),
            values,
            layer,
            source: "median".into(),
        },
        members,
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Monotone black-red-yellow-white colormap.
pub fn colormap(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (3.0 * v).min(1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Binary 8-bit portable graymap.
pub fn write_pgm(path: impl AsRef<Path>, size: usize, values: &[f32]) -> Result<()> {
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| quantize(v)));
    write_file(path.as_ref(), &bytes)
}

/// Heat colors blended over the grayscale image with per-pixel opacity
/// `OVERLAY_ALPHA * heat`, as interleaved RGB in `[0, 1]`.
pub fn overlay_rgb(image: &Image, heatmap: &Heatmap) -> Result<Vec<[f32; 3]>> {
    if image.size() != heatmap.size {
        return Err(Error::shape(
            "overlay",
            "image size",
            format!("image {} vs heatmap {}", image.size(), heatmap.size),
        ));
    }
    Ok(image
        .pixels()
        .iter()
        .zip(&heatmap.values)
        .map(|(&gray, &h)| {
            let alpha = OVERLAY_ALPHA * h.clamp(0.0, 1.0);
            let color = colormap(h);
            [0, 1, 2].map(|k| (1.0 - alpha) * gray + alpha * color[k])
        })
        .collect())
}

/// Binary 8-bit portable pixmap.
pub fn write_ppm(path: impl AsRef<Path>, size: usize, rgb: &[[f32; 3]]) -> Result<()> {
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    bytes.extend(rgb.iter().flat_map(|p| p.map(quantize)));
    write_file(path.as_ref(), &bytes)
}

/// One image row per line, shortest round-trip decimal formatting.
pub fn write_heatmap_csv(path: impl AsRef<Path>, heatmap: &Heatmap) -> Result<()> {
    let mut text = String::new();
    for row in heatmap.values.chunks(heatmap.size) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    write_file(path.as_ref(), text.as_bytes())
}

pub fn read_heatmap_csv(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for field in line.split(',') {
            values.push(
                field
                    .trim()
                    .parse::<f32>()
                    .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
            );
        }
    }
    Ok(values)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlayFiles {
    pub heatmap_pgm: PathBuf,
    pub overlay_ppm: PathBuf,
    pub heatmap_csv: PathBuf,
}

/// Writes `<stem>_heatmap.pgm`, `<stem>_overlay.ppm` and `<stem>_heatmap.csv`
/// into `dir`.
pub fn overlay_export(image: &Image, heatmap: &Heatmap, dir: impl AsRef<Path>, stem: &str) -> Result<OverlayFiles> {
    let dir = dir.as_ref();
    let rgb = overlay_rgb(image, heatmap)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = OverlayFiles {
        heatmap_pgm: dir.join(format!("{stem}_heatmap.pgm")),
        overlay_ppm: dir.join(format!("{stem}_overlay.ppm")),
        heatmap_csv: dir.join(format!("{stem}_heatmap.csv")),
    };
    write_pgm(&files.heatmap_pgm, heatmap.size, &heatmap.values)?;
    write_ppm(&files.overlay_ppm, heatmap.size, &rgb)?;
    write_heatmap_csv(&files.heatmap_csv, heatmap)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    #[test]
    fn median_examples() {
        let a = [0.2f32; 4];
        let b = [0.5f32; 4];
        let c = [0.9f32; 4];
        assert_eq!(pixel_median(&[&a, &b, &c]), vec![0.5; 4]);
        assert_eq!(pixel_median(&[&c, &a, &b]), vec![0.5; 4]);
        assert_eq!(pixel_median(&[&c, &a]), vec![0.2; 4]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut v = vec![0.0, 0.5, 2.0];
        normalize_max(&mut v);
        assert_eq!(v, vec![0.0, 0.25, 1.0]);
        let once = v.clone();
        normalize_max(&mut v);
        assert_eq!(v, once);
        let mut z = vec![0.0; 3];
        normalize_max(&mut z);
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn invalid_layer() {
        let m = Model::<f32>::build(NetworkConfig::small(), 0).unwrap();
        let img = Image::new(64, vec![0.5; 64 * 64]).unwrap();
        assert!(grad_cam(&m, &img, 0).is_err());
        assert!(grad_cam(&m, &img, 6).is_err());
    }

    #[test]
    fn heatmap_range_on_random_model() {
        let m = Model::<f32>::build(NetworkConfig::small(), 7).unwrap();
        let img = Image::from_fn(64, |r, c| ((r * 13 + c * 7) % 17) as f32 / 16.0);
        for layer in 1..=5 {
            let h = grad_cam(&m, &img, layer).unwrap();
            assert_eq!(h.values.len(), 64 * 64);
            assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = h.values.iter().copied().fold(0.0, f32::max);
            assert!(max == 0.0 || max == 1.0);
        }
    }

    #[test]
    fn zero_heat_overlay_is_gray() {
        let img = Image::from_fn(4, |r, c| (r * 4 + c) as f32 / 15.0);
        let h = Heatmap {
            size: 4,
            values: vec![0.0; 16],
            layer: 5,
            source: "test".into(),
        };
        let rgb = overlay_rgb(&img, &h).unwrap();
        for (p, &g) in rgb.iter().zip(img.pixels()) {
            assert_eq!(*p, [g, g, g]);
        }
    }

    #[test]
    fn colormap_is_monotone() {
        let mut prev = colormap(0.0);
        for i in 1..=100 {
            let c = colormap(i as f32 / 100.0);
            assert!((0..3).all(|k| c[k] >= prev[k]));
            prev = c;
        }
        assert_eq!(colormap(0.0), [0.0; 3]);
        assert_eq!(colormap(1.0), [1.0; 3]);
    }
}
