use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationPolicy {
    /// 90, 180 or 270 degrees, chosen uniformly. Lossless.
    #[default]
    QuarterTurns,
    /// Uniform angle in `[0, 2pi)`, bilinear, zero fill outside the source.
    ArbitraryAngle,
}

/// Rotates by `turns` quarter turns. One turn maps `out[r][c] = in[n-1-c][r]`,
/// so `[[1,2],[3,4]]` becomes `[[3,1],[4,2]]`.
pub fn rotate_quarter(image: &Image, turns: u32) -> Image {
    let n = image.size();
    let p = image.pixels();
    let mut out = p.to_vec();
    for _ in 0..turns % 4 {
        let src = out.clone();
        for r in 0..n {
            for c in 0..n {
                out[r * n + c] = src[(n - 1 - c) * n + r];
            }
        }
    }
    Image::new(n, out).expect("permutation of a valid image")
}

/// Bilinear rotation about the image center; pixels mapped from outside the
/// source are zero.
pub fn rotate_angle(image: &Image, radians: f32) -> Image {
    let n = image.size();
    let center = (n as f32 - 1.0) / 2.0;
    let (s, c) = radians.sin_cos();
    Image::from_fn(n, |r, col| {
        let (dy, dx) = (r as f32 - center, col as f32 - center);
        // inverse map: rotate output coordinates back by -angle
        let sy = c * dy - s * dx + center;
        let sx = s * dy + c * dx + center;
        image.sample(sy, sx).unwrap_or(0.0)
    })
}

pub fn augment_rotate<R: Rng + ?Sized>(image: &Image, policy: RotationPolicy, rng: &mut R) -> Image {
    match policy {
        RotationPolicy::QuarterTurns => rotate_quarter(image, rng.random_range(1..4)),
        RotationPolicy::ArbitraryAngle => rotate_angle(image, rng.random_range(0.0..std::f32::consts::TAU)),
    }
}
