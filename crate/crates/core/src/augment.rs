//! Stochastic view generation. A pipeline at strength `μ` applies, in order,
//! a random resized crop, a horizontal flip, color jitter and grayscale
//! conversion; `μ` scales each stage's application probability and magnitude
//! linearly, so `μ = 0` is the identity.

use air_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{precondition, Result};
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    RandomResizedCrop,
    HorizontalFlip,
    ColorJitter,
    Grayscale,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 4] = [
        AugmentOp::RandomResizedCrop,
        AugmentOp::HorizontalFlip,
        AugmentOp::ColorJitter,
        AugmentOp::Grayscale,
    ];
}

// Magnitudes at full strength.
const MIN_CROP_SCALE: f64 = 0.08;
const MAX_LOG_ASPECT: f64 = 0.287_682_072_451_780_9; // ln(4/3)
const FLIP_P: f64 = 0.5;
const JITTER_P: f64 = 0.8;
const JITTER_BCS: f64 = 0.4;
const JITTER_HUE: f64 = 0.1;
const GRAY_P: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPipeline {
    strength: f64,
    ops: Vec<AugmentOp>,
}

impl AugmentationPipeline {
    pub fn new(strength: f64) -> Result<Self> {
        Self::with_ops(strength, AugmentOp::ALL.to_vec())
    }

    pub fn with_ops(strength: f64, ops: Vec<AugmentOp>) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(precondition(format!(
                "augmentation strength {strength} outside [0,1]"
            )));
        }
        Ok(Self { strength, ops })
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// Applies one transformation whose parameters are drawn from `seed`.
    pub fn apply(&self, x: &Sample, seed: u64) -> Result<Sample> {
        let shape = x.pixels.shape();
        if shape.len() != 3 {
            return Err(precondition(format!("expected (C,H,W), got {shape:?}")));
        }
        if x.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(precondition("input pixels outside [0,1]"));
        }
        let mut rng = rng_for(seed, &[stream::AUGMENT]);
        let mut img = x.pixels.clone();
        for op in &self.ops {
            img = match op {
                AugmentOp::RandomResizedCrop => self.crop(&img, &mut rng),
                AugmentOp::HorizontalFlip => self.flip(img, &mut rng),
                AugmentOp::ColorJitter => self.jitter(img, &mut rng),
                AugmentOp::Grayscale => self.grayscale(img, &mut rng),
            };
        }
        Ok(Sample {
            pixels: img,
            label: x.label,
        })
    }

    fn crop(&self, img: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        let &[c, h, w] = img.shape() else {
            unreachable!()
        };
        let mu = self.strength;
        // Draw a fixed number of variates so the stream layout does not depend on μ.
        let scale_lo = 1.0 - (1.0 - MIN_CROP_SCALE) * mu;
        let mut chosen = None;
        for _ in 0..10 {
            let scale = lerp(scale_lo, 1.0, rng.random::<f64>());
            let log_ratio = MAX_LOG_ASPECT * mu * (2.0 * rng.random::<f64>() - 1.0);
            let ratio = log_ratio.exp();
            let (fw, fh) = ((scale * ratio).sqrt(), (scale / ratio).sqrt());
            let (ux, uy) = (rng.random::<f64>(), rng.random::<f64>());
            if chosen.is_none() && fw <= 1.0 && fh <= 1.0 {
                let (cw, ch) = (fw * w as f64, fh * h as f64);
                chosen = Some((ux * (w as f64 - cw), uy * (h as f64 - ch), cw, ch));
            }
        }
        let (x0, y0, cw, ch) = chosen.unwrap_or((0.0, 0.0, w as f64, h as f64));
        if x0 == 0.0 && y0 == 0.0 && cw == w as f64 && ch == h as f64 {
            return img.clone();
        }
        let mut out = vec![0.0; img.len()];
        let (sx, sy) = (cw / w as f64, ch / h as f64);
        for oy in 0..h {
            let fy = y0 + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..w {
                let fx = x0 + (ox as f64 + 0.5) * sx - 0.5;
                for ch_i in 0..c {
                    let plane = &img.data()[ch_i * h * w..(ch_i + 1) * h * w];
                    out[(ch_i * h + oy) * w + ox] = bilinear(plane, h, w, fy, fx);
                }
            }
        }
        Tensor::new(img.shape().to_vec(), out).expect("crop shape")
    }

    fn flip(&self, mut img: Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        if rng.random::<f64>() >= FLIP_P * self.strength {
            return img;
        }
        let w = img.shape()[2];
        for row in img.data_mut().chunks_mut(w) {
            row.reverse();
        }
        img
    }

    fn jitter(&self, mut img: Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        let mu = self.strength;
        let apply = rng.random::<f64>() < JITTER_P * mu;
        let mut factor = |m: f64| 1.0 + m * mu * (2.0 * rng.random::<f64>() - 1.0);
        let brightness = factor(JITTER_BCS);
        let contrast = factor(JITTER_BCS);
        let saturation = factor(JITTER_BCS);
        let hue = JITTER_HUE * mu * (2.0 * rng.random::<f64>() - 1.0);
        if !apply {
            return img;
        }
        let &[c, h, w] = img.shape() else {
            unreachable!()
        };
        let hw = h * w;
        let d = img.data_mut();
        for v in d.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let mean = if c == 3 {
            (0..hw)
                .map(|i| luma(d[i], d[hw + i], d[2 * hw + i]))
                .sum::<f64>()
                / hw as f64
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        };
        for v in d.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        if c == 3 {
            let (cos, sin) = (
                (2.0 * std::f64::consts::PI * hue).cos(),
                (2.0 * std::f64::consts::PI * hue).sin(),
            );
            for i in 0..hw {
                let (r, g, b) = (d[i], d[hw + i], d[2 * hw + i]);
                let gray = luma(r, g, b);
                let (r, g, b) = (
                    gray + (r - gray) * saturation,
                    gray + (g - gray) * saturation,
                    gray + (b - gray) * saturation,
                );
                // Hue rotation in YIQ space.
                let y = 0.299 * r + 0.587 * g + 0.114 * b;
                let iq = 0.596 * r - 0.274 * g - 0.322 * b;
                let q = 0.211 * r - 0.523 * g + 0.312 * b;
                let (i2, q2) = (iq * cos - q * sin, iq * sin + q * cos);
                d[i] = (y + 0.956 * i2 + 0.621 * q2).clamp(0.0, 1.0);
                d[hw + i] = (y - 0.272 * i2 - 0.647 * q2).clamp(0.0, 1.0);
                d[2 * hw + i] = (y - 1.106 * i2 + 1.703 * q2).clamp(0.0, 1.0);
            }
        }
        img
    }

    fn grayscale(&self, mut img: Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        if rng.random::<f64>() >= GRAY_P * self.strength || img.shape()[0] != 3 {
            return img;
        }
        let hw = img.shape()[1] * img.shape()[2];
        let d = img.data_mut();
        for i in 0..hw {
            let g = luma(d[i], d[hw + i], d[2 * hw + i]).clamp(0.0, 1.0);
            d[i] = g;
            d[hw + i] = g;
            d[2 * hw + i] = g;
        }
        img
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
    let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
    (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0)
}

/// `τ(x)` with `τ` drawn from the strength-`μ` family using `seed`.
pub fn augment(x: &Sample, strength: f64, seed: u64) -> Result<Sample> {
    AugmentationPipeline::new(strength)?.apply(x, seed)
}

/// Two independent views `(τ_i(x), τ_j(x))` of the same sample.
pub fn make_view_pair(
    x: &Sample,
    strength: f64,
    seed_i: u64,
    seed_j: u64,
) -> Result<(Sample, Sample)> {
    if seed_i == seed_j {
        return Err(precondition("view seeds must differ for a positive pair"));
    }
    let pipeline = AugmentationPipeline::new(strength)?;
    Ok((pipeline.apply(x, seed_i)?, pipeline.apply(x, seed_j)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(c: usize, h: usize, w: usize) -> Sample {
        let data = (0..c * h * w).map(|i| (i % 17) as f64 / 16.0).collect();
        Sample::new(Tensor::new(vec![c, h, w], data).unwrap(), None).unwrap()
    }

    #[test]
    fn zero_strength_is_identity() {
        let x = gradient_image(3, 8, 8);
        for seed in 0..20 {
            assert_eq!(augment(&x, 0.0, seed).unwrap(), x);
        }
    }

    #[test]
    fn same_seed_is_bitwise_deterministic() {
        let x = gradient_image(3, 8, 8);
        assert_eq!(augment(&x, 1.0, 42).unwrap(), augment(&x, 1.0, 42).unwrap());
    }

    #[test]
    fn constant_gray_stays_in_range_for_every_stage() {
        let x = Sample::new(Tensor::full(&[3, 8, 8], 0.5), None).unwrap();
        for op in AugmentOp::ALL {
            let p = AugmentationPipeline::with_ops(1.0, vec![op]).unwrap();
            for seed in 0..50 {
                let y = p.apply(&x, seed).unwrap();
                assert!(
                    y.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)),
                    "{op:?}"
                );
            }
        }
    }

    #[test]
    fn rejects_out_of_range_inputs() {
        let x = gradient_image(1, 4, 4);
        assert!(augment(&x, 1.5, 0).is_err());
        assert!(augment(&x, -0.1, 0).is_err());
        let bad = Sample {
            pixels: Tensor::full(&[1, 2, 2], 1.5),
            label: None,
        };
        assert!(augment(&bad, 0.5, 0).is_err());
    }

    #[test]
    fn view_pair_contract() {
        let x = gradient_image(3, 8, 8);
        let (a, b) = make_view_pair(&x, 0.0, 1, 2).unwrap();
        assert_eq!((&a, &b), (&x, &x));
        assert!(make_view_pair(&x, 1.0, 5, 5).is_err());
        let (a, b) = make_view_pair(&x, 0.5, 1, 2).unwrap();
        assert!(a.pixels.max_abs_diff(&b.pixels) > 0.0);
    }

    #[test]
    fn flip_at_full_strength_happens_sometimes() {
        let x = gradient_image(1, 4, 4);
        let p = AugmentationPipeline::with_ops(1.0, vec![AugmentOp::HorizontalFlip]).unwrap();
        let flipped = (0..100).filter(|&s| p.apply(&x, s).unwrap() != x).count();
        assert!((25..=75).contains(&flipped), "{flipped}");
    }

    proptest! {
        #[test]
        fn outputs_stay_in_unit_range(
            pixels in proptest::collection::vec(0.0f64..=1.0, 3 * 6 * 6),
            strength in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let x = Sample::new(Tensor::new(vec![3, 6, 6], pixels).unwrap(), None).unwrap();
            let y = augment(&x, strength, seed).unwrap();
            prop_assert_eq!(y.pixels.shape(), x.pixels.shape());
            prop_assert!(y.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
