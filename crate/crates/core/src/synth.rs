//! Synthetic segmentation data: bright soft-edged ellipses on a textured
//! background, with exact binary masks from the same geometry.
//!
//! Generation is stateless per image: image `i` of a dataset draws from a
//! ChaCha8 stream keyed by `(seed, i)`, so any subset can be regenerated
//! without walking the whole sequence and resumed training sees identical
//! data.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One grayscale image with its binary mask, both `(1, 1, size, size)`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos_t: f64,
    sin_t: f64,
    brightness: f64,
}

impl Ellipse {
    /// Normalized squared radius of `(x, y)`: 1 on the boundary.
    fn d2(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.rx;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.ry;
        u * u + v * v
    }
}

/// ChaCha stream for image `index` of a dataset keyed by `seed`.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw one sample. `size` must be positive and even.
pub fn gen_sample(size: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if size == 0 || size % 2 != 0 {
        return Err(Error::invalid("synth", "size must be positive and even"));
    }
    let s = size as f64;
    let n_blobs = rng.gen_range(1..=3usize);
    let blobs: Vec<Ellipse> = (0..n_blobs)
        .map(|_| {
            let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: rng.gen_range(0.25 * s..0.75 * s),
                cy: rng.gen_range(0.25 * s..0.75 * s),
                rx: rng.gen_range(0.10 * s..0.28 * s),
                ry: rng.gen_range(0.10 * s..0.28 * s),
                cos_t: t.cos(),
                sin_t: t.sin(),
                brightness: rng.gen_range(0.70..0.95),
            }
        })
        .collect();

    // Low-frequency background shading plus per-pixel noise.
    let base = rng.gen_range(0.15..0.30);
    let gx = rng.gen_range(-0.10..0.10);
    let gy = rng.gen_range(-0.10..0.10);

    let mut image = Tensor::zeros([1, 1, size, size]);
    let mut mask = Tensor::zeros([1, 1, size, size]);
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / s;
            let fy = y as f64 / s;
            let mut v = base + gx * fx + gy * fy + rng.gen_range(-0.04..0.04);
            let mut inside = false;
            for b in &blobs {
                let d = b.d2(fx * s, fy * s).sqrt();
                if d <= 1.0 {
                    inside = true;
                }
                // Soft shoulder: full brightness inside d = 0.85, linear
                // falloff to the background by d = 1.15.
                let w = ((1.15 - d) / 0.30).clamp(0.0, 1.0);
                if w > 0.0 {
                    v = v.max(v * (1.0 - w) + b.brightness * w);
                }
            }
            image.set(0, 0, y, x, v.clamp(0.0, 1.0));
            if inside {
                mask.set(0, 0, y, x, 1.0);
            }
        }
    }
    Ok(Sample { image, mask })
}

/// Generate `n` samples under dataset key `seed`.
pub fn gen_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| gen_sample(size, &mut image_rng(seed, i as u64)))
        .collect()
}

/// Apply one of the 8 square symmetries: bit 0 flips horizontally, bit 1
/// flips vertically, bit 2 transposes. `k = 0` is the identity.
pub fn dihedral(t: &Tensor, k: u8) -> Tensor {
    let [b, c, h, w] = t.shape();
    debug_assert_eq!(h, w, "square images only");
    let mut out = Tensor::zeros(t.shape());
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut sy = y;
                    let mut sx = x;
                    if k & 4 != 0 {
                        std::mem::swap(&mut sy, &mut sx);
                    }
                    if k & 1 != 0 {
                        sx = w - 1 - sx;
                    }
                    if k & 2 != 0 {
                        sy = h - 1 - sy;
                    }
                    out.set(bi, ci, y, x, t.at(bi, ci, sy, sx));
                }
            }
        }
    }
    out
}

/// Augment image and mask with the same symmetry.
pub fn augment(s: &Sample, k: u8) -> Sample {
    Sample { image: dihedral(&s.image, k), mask: dihedral(&s.mask, k) }
}
