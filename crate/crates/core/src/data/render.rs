//! Procedural frame pairs: a smooth random texture and its in-plane warp.

use std::f64::consts::TAU;

use emavio_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::PoseDelta;
use crate::{Error, Result};

use super::FramePair;

const GRATINGS: usize = 6;
const WAVELENGTH_PX: (f64, f64) = (6.0, 16.0);

/// Seed for the texture of pair `pair` of a sequence.
pub fn pair_texture_seed(texture_seed: u64, pair: usize) -> u64 {
    texture_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(pair as u64)
}

/// Sum of random cosine gratings, scaled into `[0, 1]`. Shape `[C, H, W]`.
pub fn texture(seed: u64, channels: usize, height: usize, width: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(channels * height * width);
    for _ in 0..channels {
        let gratings: Vec<(f64, f64, f64, f64)> = (0..GRATINGS)
            .map(|_| {
                let amp = rng.random_range(0.5..1.0);
                let wavelength = rng.random_range(WAVELENGTH_PX.0..WAVELENGTH_PX.1);
                let dir = rng.random_range(0.0..TAU);
                let phase = rng.random_range(0.0..TAU);
                let k = TAU / wavelength;
                (amp, k * dir.cos(), k * dir.sin(), phase)
            })
            .collect();
        let total: f64 = gratings.iter().map(|g| g.0).sum();
        for y in 0..height {
            for x in 0..width {
                let s: f64 = gratings
                    .iter()
                    .map(|(a, kx, ky, p)| a * (kx * x as f64 + ky * y as f64 + p).cos())
                    .sum();
                data.push(0.5 + 0.5 * s / total);
            }
        }
    }
    Tensor::new(&[channels, height, width], data).expect("texture shape")
}

/// In-plane warp taking target pixel `p` to reference coordinates
/// `c + Rot(yaw) (p - c) + ppm (t_x, t_y)`, with x along columns.
#[derive(Clone, Copy, Debug)]
struct Warp {
    cos: f64,
    sin: f64,
    shift: [f64; 2],
    center: [f64; 2],
}

impl Warp {
    fn new(rel: &PoseDelta, height: usize, width: usize, pixels_per_meter: f64) -> Self {
        let (sin, cos) = rel.psi[2].sin_cos();
        Self {
            cos,
            sin,
            shift: [pixels_per_meter * rel.t[0], pixels_per_meter * rel.t[1]],
            center: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
        }
    }

    fn source(&self, x: f64, y: f64) -> [f64; 2] {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        [
            self.center[0] + self.cos * dx - self.sin * dy + self.shift[0],
            self.center[1] + self.sin * dx + self.cos * dy + self.shift[1],
        ]
    }
}

/// Largest pixel displacement of the four image corners under `rel`.
pub fn warp_magnitude(rel: &PoseDelta, height: usize, width: usize, pixels_per_meter: f64) -> f64 {
    let w = Warp::new(rel, height, width, pixels_per_meter);
    let (xm, ym) = (width as f64 - 1.0, height as f64 - 1.0);
    [(0.0, 0.0), (xm, 0.0), (0.0, ym), (xm, ym)]
        .iter()
        .map(|&(x, y)| {
            let s = w.source(x, y);
            ((s[0] - x).powi(2) + (s[1] - y).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

fn bilinear(img: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= width as f64 || yi >= height as f64 {
            0.0
        } else {
            img[yi as usize * width + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps every channel of `image` by `rel`; samples falling outside the
/// frame read 0.
pub fn warp_image(image: &Tensor, rel: &PoseDelta, pixels_per_meter: f64) -> Result<Tensor> {
    let &[channels, height, width] = image.shape() else {
        return Err(Error::Contract(format!(
            "expected a [C, H, W] image, got {:?}",
            image.shape()
        )));
    };
    let warp = Warp::new(rel, height, width, pixels_per_meter);
    let plane = height * width;
    let mut out = Vec::with_capacity(image.numel());
    for c in 0..channels {
        let src = &image.data()[c * plane..(c + 1) * plane];
        for y in 0..height {
            for x in 0..width {
                let [sx, sy] = warp.source(x as f64, y as f64);
                out.push(bilinear(src, height, width, sx, sy));
            }
        }
    }
    Ok(Tensor::new(image.shape(), out)?)
}

/// Reference texture and its warp by `rel`, both rounded to `f32`.
pub fn render_frame_pair(
    rel: &PoseDelta,
    texture_seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    pixels_per_meter: f64,
) -> Result<FramePair> {
    let mag = warp_magnitude(rel, height, width, pixels_per_meter);
    let limit = height as f64 / 4.0;
    if mag > limit {
        return Err(Error::Config(format!(
            "warp moves image corners by {mag:.2} px, beyond the {limit:.2} px limit"
        )));
    }
    let reference = texture(texture_seed, channels, height, width).map(|v| v as f32 as f64);
    let target = warp_image(&reference, rel, pixels_per_meter)?.map(|v| v as f32 as f64);
    Ok(FramePair { reference, target })
}
