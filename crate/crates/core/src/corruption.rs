//! Six common image corruptions with five severity levels each.
//!
//! | kind           | parameter              | severity 1..5                  |
//! |----------------|------------------------|--------------------------------|
//! | gaussian_noise | noise std              | 0.04 0.06 0.08 0.09 0.10       |
//! | shot_noise     | photon count (Poisson) | 500 250 100 75 50              |
//! | defocus_blur   | disc radius, pixels    | 0.5 0.75 1.0 1.5 2.0           |
//! | brightness     | additive shift         | 0.05 0.10 0.15 0.20 0.30       |
//! | contrast       | contrast factor        | 0.75 0.50 0.40 0.30 0.15       |
//! | jpeg_like      | quality                | 80 65 58 50 40                 |
//!
//! Radii are for 32x32 inputs and scale linearly with the image width.

use std::fmt;
use std::str::FromStr;

use air_tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{precondition, AirError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    DefocusBlur,
    Brightness,
    Contrast,
    JpegLike,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::JpegLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::JpegLike => "jpeg_like",
        }
    }

    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            CorruptionKind::DefocusBlur => [0.5, 0.75, 1.0, 1.5, 2.0],
            CorruptionKind::Brightness => [0.05, 0.10, 0.15, 0.20, 0.30],
            CorruptionKind::Contrast => [0.75, 0.50, 0.40, 0.30, 0.15],
            CorruptionKind::JpegLike => [80.0, 65.0, 58.0, 50.0, 40.0],
        }
    }

    /// Parameter value for which the corruption is the identity.
    pub fn identity_parameter(self) -> f64 {
        match self {
            CorruptionKind::GaussianNoise
            | CorruptionKind::DefocusBlur
            | CorruptionKind::Brightness => 0.0,
            CorruptionKind::Contrast => 1.0,
            CorruptionKind::ShotNoise | CorruptionKind::JpegLike => f64::INFINITY,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = AirError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AirError::Config(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(precondition(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity })
    }

    pub fn parameter(&self) -> f64 {
        self.kind.table()[self.severity as usize - 1]
    }
}

/// Corrupts one `(C, H, W)` image at the given severity.
pub fn corrupt(img: &Tensor, spec: CorruptionSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    corrupt_with(img, spec.kind, spec.parameter(), rng)
}

/// Corrupts one `(C, H, W)` image with an explicit parameter value.
pub fn corrupt_with(
    img: &Tensor,
    kind: CorruptionKind,
    param: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(precondition(format!(
            "expected (C,H,W), got {:?}",
            img.shape()
        )));
    };
    if param == kind.identity_parameter() {
        return Ok(img.clone());
    }
    let mut out = img.data().to_vec();
    match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, param).map_err(|e| precondition(e.to_string()))?;
            out.iter_mut().for_each(|v| *v += n.sample(rng));
        }
        CorruptionKind::ShotNoise => {
            for v in out.iter_mut() {
                let rate = *v * param;
                *v = if rate > 0.0 {
                    Poisson::new(rate)
                        .map_err(|e| precondition(e.to_string()))?
                        .sample(rng)
                        / param
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::DefocusBlur => out = defocus(img.data(), c, h, w, param * w as f64 / 32.0),
        CorruptionKind::Brightness => out.iter_mut().for_each(|v| *v += param),
        CorruptionKind::Contrast => {
            let hw = h * w;
            for ch in out.chunks_mut(hw) {
                let mean = ch.iter().sum::<f64>() / hw as f64;
                ch.iter_mut().for_each(|v| *v = (*v - mean) * param + mean);
            }
        }
        CorruptionKind::JpegLike => {
            for ch in out.chunks_mut(h * w) {
                jpeg_plane(ch, h, w, param);
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Tensor::new(vec![c, h, w], out)?)
}

fn defocus(data: &[f64], c: usize, h: usize, w: usize, radius: f64) -> Vec<f64> {
    let r = (radius + 1.0).ceil() as isize;
    let mut kernel = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let weight = (radius + 1.0 - ((dx * dx + dy * dy) as f64).sqrt()).clamp(0.0, 1.0);
            if weight > 0.0 {
                kernel.push((dy, dx, weight));
            }
        }
    }
    let norm = 1.0 / kernel.iter().map(|k| k.2).sum::<f64>();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let s: f64 = kernel
                    .iter()
                    .map(|&(dy, dx, k)| {
                        k * plane[clampi(y as isize + dy, h) * w + clampi(x as isize + dx, w)]
                    })
                    .sum();
                out[ch * h * w + y * w + x] = s * norm;
            }
        }
    }
    out
}

const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120.,
    101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Blockwise 8x8 DCT quantization of one plane with the standard luminance
/// table scaled to `quality`.
fn jpeg_plane(plane: &mut [f64], h: usize, w: usize, quality: f64) {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 {
        5000.0 / q
    } else {
        200.0 - 2.0 * q
    };
    let table: Vec<f64> = JPEG_LUMA
        .iter()
        .map(|v| ((v * scale + 50.0) / 100.0).floor().max(1.0))
        .collect();
    let basis = |k: usize, n: usize| {
        let a = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos()
    };
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        for (n, v) in row.iter_mut().enumerate() {
            *v = basis(k, n);
        }
    }
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let (yy, xx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                    *v = plane[yy * w + xx] * 255.0 - 128.0;
                }
            }
            // coef = M · block · Mᵀ
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += m[u][y] * block[y][x] * m[v][x];
                        }
                    }
                    let qv = table[u * 8 + v];
                    coef[u][v] = (s / qv).round() * qv;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    if by + y >= h || bx + x >= w {
                        continue;
                    }
                    let mut s = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            s += m[u][y] * coef[u][v] * m[v][x];
                        }
                    }
                    plane[(by + y) * w + bx + x] = (s + 128.0) / 255.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn image(seed: u64) -> Tensor {
        let mut rng = rng_for(seed, &[]);
        Tensor::new(
            vec![3, 16, 16],
            (0..768).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn every_kind_and_severity_stays_in_range() {
        let x = image(1);
        for kind in CorruptionKind::ALL {
            for s in 1..=5 {
                let y = corrupt(
                    &x,
                    CorruptionSpec::new(kind, s).unwrap(),
                    &mut rng_for(s as u64, &[]),
                )
                .unwrap();
                assert_eq!(y.shape(), x.shape());
                assert!(
                    y.data().iter().all(|v| (0.0..=1.0).contains(v)),
                    "{kind} {s}"
                );
                assert_ne!(y, x, "{kind} {s}");
            }
        }
    }

    #[test]
    fn identity_parameter_is_identity() {
        let x = image(2);
        for kind in CorruptionKind::ALL {
            let y =
                corrupt_with(&x, kind, kind.identity_parameter(), &mut rng_for(0, &[])).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn damage_grows_with_severity() {
        let x = image(3);
        for kind in CorruptionKind::ALL {
            let err = |s: u8| {
                let y = corrupt(
                    &x,
                    CorruptionSpec::new(kind, s).unwrap(),
                    &mut rng_for(9, &[]),
                )
                .unwrap();
                y.data()
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            };
            assert!(err(5) > err(1), "{kind}");
        }
    }

    #[test]
    fn names_round_trip_and_bad_severity_fails() {
        for kind in CorruptionKind::ALL {
            assert_eq!(kind.name().parse::<CorruptionKind>().unwrap(), kind);
        }
        assert!("fog".parse::<CorruptionKind>().is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6).is_err());
    }

    #[test]
    fn jpeg_at_full_quality_is_nearly_lossless() {
        let x = image(4);
        let y = corrupt_with(&x, CorruptionKind::JpegLike, 100.0, &mut rng_for(0, &[])).unwrap();
        assert!(y.max_abs_diff(&x) < 3.0 / 255.0);
    }
}
