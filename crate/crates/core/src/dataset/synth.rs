//! Parametric vortex imagery with known labels.
//!
//! Each image is a two-armed logarithmic-spiral cloud band around a central
//! dense overcast with an eye. Band tightness, overcast radius, eye radius and
//! eye depth are deterministic functions of wind speed, so the label can be
//! recovered from a noiseless image by template matching. Storms are runs of
//! consecutive samples whose speed, center and band phase drift smoothly.

use std::f32::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CycloneSample, DatasetIndex, Image};
use crate::error::{Error, Result};
use crate::network::DOWNSAMPLE;
use crate::rng::{stream_rng, streams};

pub const MIN_SPEED: f32 = 15.0;
pub const MAX_SPEED: f32 = 185.0;
/// Band phase is quantized to `PHASE_STEPS` steps over half a turn (the two
/// arms make the pattern pi-periodic).
pub const PHASE_STEPS: u32 = 36;

fn default_noise() -> f32 {
    0.04
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default = "default_noise")]
    pub noise_std: f32,
    #[serde(default = "SynthConfig::default_min")]
    pub speed_min: f32,
    #[serde(default = "SynthConfig::default_max")]
    pub speed_max: f32,
}

impl SynthConfig {
    fn default_min() -> f32 {
        MIN_SPEED
    }

    fn default_max() -> f32 {
        MAX_SPEED
    }

    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            size,
            seed,
            noise_std: default_noise(),
            speed_min: MIN_SPEED,
            speed_max: MAX_SPEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic dataset needs n >= 1".into()));
        }
        if self.size == 0 || self.size % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "synthetic image size {} must be a positive multiple of {DOWNSAMPLE}",
                self.size
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if !(self.speed_min >= 1.0 && self.speed_min.ceil() <= self.speed_max.floor()) {
            return Err(Error::Config(format!(
                "speed range [{}, {}] must contain an integer >= 1",
                self.speed_min, self.speed_max
            )));
        }
        Ok(())
    }
}

/// Generator parameters of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VortexParams {
    pub wind_speed: f32,
    /// Eye offset from the image center, pixels, `(row, col)`.
    pub offset: (i32, i32),
    pub phase_step: u32,
}

impl VortexParams {
    /// Eye centroid in pixel-edge coordinates `(row, col)`.
    pub fn eye_center(&self, size: usize) -> (f32, f32) {
        let half = size as f32 / 2.0;
        (half + self.offset.0 as f32, half + self.offset.1 as f32)
    }
}

/// Largest eye offset from the image center, in pixels.
pub fn max_offset(size: usize) -> i32 {
    (size / 8) as i32
}

fn smoothstep(x: f32) -> f32 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Noiseless brightness at displacement `(dy, dx)` pixels from the eye.
pub fn vortex_intensity(speed: f32, phase_step: u32, size: usize, dy: f32, dx: f32) -> f32 {
    let t = ((speed - MIN_SPEED) / (MAX_SPEED - MIN_SPEED)).clamp(0.0, 1.0);
    let s = size as f32;
    let rn = (dy * dy + dx * dx).sqrt() / s;
    let theta = dy.atan2(dx);

    let eye_radius = 0.05 + 0.03 * (1.0 - t);
    let eye_depth = smoothstep((speed - 50.0) / 60.0);
    let cdo_radius = 0.06 + 0.16 * t;
    let pitch = 0.25 + 0.5 * (1.0 - t);
    let envelope_radius = 0.22 + 0.12 * t;
    let phase = phase_step as f32 * PI / PHASE_STEPS as f32;

    let psi = theta - (rn.max(1e-3) / 0.05).ln() / pitch + phase;
    let band = (0.5 + 0.5 * (2.0 * psi).cos()).powi(3);
    let envelope = (-(rn / envelope_radius).powi(2)).exp();
    let clouds = envelope * (0.25 + 0.7 * band);
    let cdo = 0.9 * (-(rn / cdo_radius).powi(4)).exp();
    let eye = 1.0 - eye_depth * (-(rn / eye_radius).powi(4)).exp();
    0.08 + 0.9 * clouds.max(cdo) * eye
}

/// Noiseless image for `params`.
pub fn render_vortex(params: &VortexParams, size: usize) -> Image {
    let (cy, cx) = params.eye_center(size);
    Image::from_fn(size, |r, c| {
        vortex_intensity(
            params.wind_speed,
            params.phase_step,
            size,
            r as f32 + 0.5 - cy,
            c as f32 + 0.5 - cx,
        )
    })
}

/// A generated dataset with the parameters behind every sample.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub index: DatasetIndex,
    /// Aligned with `index.samples()`.
    pub truth: Vec<VortexParams>,
}

/// Default-noise synthetic dataset of `n` images of side `size`.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<DatasetIndex> {
    Ok(synth_generate_with(&SynthConfig::new(n, size, seed))?.index)
}

fn reflect(mut v: f32, lo: f32, hi: f32) -> f32 {
    if hi <= lo {
        return lo;
    }
    for _ in 0..8 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            break;
        }
    }
    v.clamp(lo, hi)
}

pub fn synth_generate_with(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, streams::SYNTH);
    let lo = cfg.speed_min.ceil();
    let hi = cfg.speed_max.floor();
    let jitter = max_offset(cfg.size);
    let drift = Normal::new(0.0f32, 2.5).expect("valid normal");
    let noise = Normal::new(0.0f32, cfg.noise_std.max(f32::MIN_POSITIVE)).expect("valid normal");

    let mut samples = Vec::with_capacity(cfg.n);
    let mut truth = Vec::with_capacity(cfg.n);
    let mut storm = 0usize;
    while samples.len() < cfg.n {
        let u: f32 = rng.random();
        let length = 4 + (36.0 * u * u) as usize;
        let trend: f32 = rng.random_range(-1.5..1.5);
        let mut speed: f32 = rng.random_range(lo..=hi);
        let mut offset = (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter));
        let mut phase = rng.random_range(0..PHASE_STEPS);
        let storm_id = format!("storm_{storm:04}");
        for j in 0..length {
            if samples.len() == cfg.n {
                break;
            }
            if j > 0 {
                speed = reflect(speed + trend + drift.sample(&mut rng), lo, hi);
                if rng.random::<f32>() < 0.3 {
                    offset.0 = (offset.0 + rng.random_range(-1..=1)).clamp(-jitter, jitter);
                    offset.1 = (offset.1 + rng.random_range(-1..=1)).clamp(-jitter, jitter);
                }
                phase = (phase + rng.random_range(1..4)) % PHASE_STEPS;
            }
            let params = VortexParams {
                wind_speed: speed.round().clamp(lo, hi),
                offset,
                phase_step: phase,
            };
            let clean = render_vortex(&params, cfg.size);
            let image = if cfg.noise_std > 0.0 {
                Image::from_fn(cfg.size, |r, c| clean.get(r, c) + noise.sample(&mut rng))
            } else {
                clean
            };
            samples.push(CycloneSample {
                image_id: format!("img_{:06}", samples.len()),
                storm_id: storm_id.clone(),
                image: Arc::new(image),
                wind_speed: params.wind_speed,
                ocean: None,
                relative_time: Some(j as f64 * 1800.0),
            });
            truth.push(params);
        }
        storm += 1;
    }
    Ok(SynthDataset {
        index: DatasetIndex::new(samples)?,
        truth,
    })
}
