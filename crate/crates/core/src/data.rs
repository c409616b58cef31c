//! Image datasets: in-memory tensors, the descriptor file, the packed binary
//! container, and the synthetic blob generator used for desk-scale runs.
//!
//! Packed binary layout (all integers little-endian `u32`):
//!
//! ```text
//! magic   b"AIRD"
//! version 1
//! count   N
//! C, H, W
//! dtype   1 (= float32)
//! pixels  N*C*H*W little-endian f32, sample-major, CHW within a sample
//! nlabels 0 or N
//! labels  nlabels little-endian u32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use air_tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, precondition, AirError, Result};
use crate::rng::{rng_for, stream};

pub const PACKED_MAGIC: &[u8; 4] = b"AIRD";
pub const PACKED_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

/// One image with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(C, H, W)` in `[0, 1]`.
    pub pixels: Tensor,
    pub label: Option<usize>,
}

impl Sample {
    pub fn new(pixels: Tensor, label: Option<usize>) -> Result<Self> {
        if pixels.ndim() != 3 {
            return Err(precondition(format!(
                "sample must be (C,H,W), got {:?}",
                pixels.shape()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(precondition(format!("pixel {v} outside [0,1]")));
        }
        Ok(Self { pixels, label })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Packed binaries or directories of raw tensors, relative to the descriptor.
    #[serde(default)]
    pub files: Vec<PathBuf>,
}

impl DatasetDescriptor {
    pub fn sample_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| AirError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Images stored contiguously as `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub descriptor: DatasetDescriptor,
    images: Tensor,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        descriptor: DatasetDescriptor,
        images: Tensor,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let [c, h, w] = descriptor.sample_shape();
        match images.shape() {
            &[_, ic, ih, iw] if (ic, ih, iw) == (c, h, w) => {}
            other => {
                return Err(AirError::Shape {
                    expected: vec![images.rows(), c, h, w],
                    actual: other.to_vec(),
                })
            }
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(precondition(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.rows()
                )));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= descriptor.classes) {
                return Err(precondition(format!(
                    "label {bad} out of range for {} classes",
                    descriptor.classes
                )));
            }
        }
        Ok(Self {
            descriptor,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn sample(&self, i: usize) -> Sample {
        let [c, h, w] = self.descriptor.sample_shape();
        Sample {
            pixels: Tensor::new(vec![c, h, w], self.images.row(i).to_vec()).expect("sample shape"),
            label: self.labels.as_ref().map(|l| l[i]),
        }
    }

    /// Stacks the selected images into `(len, C, H, W)`.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let [c, h, w] = self.descriptor.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("gather shape")
    }

    pub fn with_labels(mut self, labels: Vec<usize>, classes: usize) -> Result<Self> {
        self.descriptor.classes = classes;
        Self::new(self.descriptor, self.images, Some(labels))
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Self {
            descriptor: self.descriptor.clone(),
            images: self.gather(&idx),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// Loads every file listed in a descriptor.
    pub fn from_descriptor(path: &Path) -> Result<Self> {
        let descriptor = DatasetDescriptor::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if descriptor.files.is_empty() {
            return Err(AirError::Format {
                path: path.to_path_buf(),
                reason: "descriptor lists no files".into(),
            });
        }
        let mut parts = Vec::new();
        let mut labels: Option<Vec<usize>> = Some(Vec::new());
        for f in &descriptor.files {
            let full = base.join(f);
            let (images, l) = if full.is_dir() {
                read_raw_dir(&full, descriptor.sample_shape())?
            } else {
                let (images, l) = read_packed(&full)?;
                if images.shape()[1..] != descriptor.sample_shape() {
                    return Err(AirError::Shape {
                        expected: descriptor.sample_shape().to_vec(),
                        actual: images.shape()[1..].to_vec(),
                    });
                }
                (images, l)
            };
            labels = match (labels, l) {
                (Some(mut acc), Some(l)) => {
                    acc.extend(l);
                    Some(acc)
                }
                _ => None,
            };
            parts.push(images);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let images = Tensor::concat_rows(&refs)?;
        Self::new(descriptor, images, labels)
    }
}

pub fn write_packed(path: &Path, images: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let &[n, c, h, w] = images.shape() else {
        return Err(precondition("packed images must be (N,C,H,W)"));
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        out.write_all(PACKED_MAGIC)?;
        for v in [
            PACKED_VERSION,
            n as u32,
            c as u32,
            h as u32,
            w as u32,
            DTYPE_F32,
        ] {
            out.write_u32::<LittleEndian>(v)?;
        }
        for &v in images.data() {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
        match labels {
            Some(l) => {
                out.write_u32::<LittleEndian>(l.len() as u32)?;
                for &y in l {
                    out.write_u32::<LittleEndian>(y as u32)?;
                }
            }
            None => out.write_u32::<LittleEndian>(0)?,
        }
        out.flush()
    })();
    res.map_err(io_err(path))
}

pub fn read_packed(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let bad = |reason: &str| AirError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != PACKED_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut header = [0u32; 6];
    for v in header.iter_mut() {
        *v = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
    }
    let [version, n, c, h, w, dtype] = header.map(|v| v as usize);
    if version != PACKED_VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    if dtype != DTYPE_F32 as usize {
        return Err(bad(&format!("unsupported dtype {dtype}")));
    }
    let total = n * c * h * w;
    let mut data = Vec::with_capacity(total);
    for _ in 0..total {
        let v = r.read_f32::<LittleEndian>().map_err(io_err(path))? as f64;
        if !(0.0..=1.0).contains(&v) {
            return Err(bad("pixel outside [0,1]"));
        }
        data.push(v);
    }
    let nlabels = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let labels = match nlabels {
        0 => None,
        k if k == n => {
            let mut l = Vec::with_capacity(n);
            for _ in 0..n {
                l.push(r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize);
            }
            Some(l)
        }
        _ => return Err(bad("label count differs from image count")),
    };
    Ok((Tensor::new(vec![n, c, h, w], data)?, labels))
}

/// Directory of `*.f32` files, each one little-endian `C*H*W` image, read in
/// file-name order. An optional `labels.txt` holds one label per line in the
/// same order.
fn read_raw_dir(dir: &Path, shape: [usize; 3]) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "f32"))
        .collect();
    files.sort();
    let per = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(files.len() * per);
    for f in &files {
        let bytes = std::fs::read(f).map_err(io_err(f))?;
        if bytes.len() != per * 4 {
            return Err(AirError::Format {
                path: f.clone(),
                reason: format!("expected {} bytes, found {}", per * 4, bytes.len()),
            });
        }
        data.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        );
    }
    let labels_path = dir.join("labels.txt");
    let labels = if labels_path.exists() {
        let text = std::fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?;
        let l = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| AirError::Format {
                path: labels_path.clone(),
                reason: e.to_string(),
            })?;
        Some(l)
    } else {
        None
    };
    let [c, h, w] = shape;
    Ok((Tensor::new(vec![files.len(), c, h, w], data)?, labels))
}

/// Parameters of the synthetic blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticBlobs {
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticBlobs {
    fn default() -> Self {
        Self {
            samples: 512,
            size: 32,
            channels: 3,
            noise: 0.05,
            seed: 0,
        }
    }
}

pub const BLOB_CLASSES: usize = 4;

impl SyntheticBlobs {
    /// Four shape classes that survive crops, flips and color changes:
    /// horizontal ellipse, vertical ellipse, round blob, ring. Position, scale
    /// and color are random per image; labels cycle so classes are balanced.
    pub fn generate(&self) -> Dataset {
        let (s, c) = (self.size, self.channels);
        let mut rng = rng_for(self.seed, &[stream::DATA]);
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("noise sigma");
        let mut data = Vec::with_capacity(self.samples * c * s * s);
        let mut labels = Vec::with_capacity(self.samples);
        let unit = s as f64 / 32.0;
        for i in 0..self.samples {
            let class = i % BLOB_CLASSES;
            let jitter = 4.0 * unit;
            let cx = s as f64 / 2.0 - 0.5 + rng.random_range(-jitter..=jitter);
            let cy = s as f64 / 2.0 - 0.5 + rng.random_range(-jitter..=jitter);
            let scale = rng.random_range(0.8..1.2) * unit;
            let color: Vec<f64> = (0..c).map(|_| rng.random_range(0.45..1.0)).collect();
            let background = rng.random_range(0.0..0.15);
            let intensity = |x: f64, y: f64| -> f64 {
                let (dx, dy) = (x - cx, y - cy);
                match class {
                    0 => (-(dx * dx) / (2.0 * (7.0 * scale).powi(2))
                        - (dy * dy) / (2.0 * (2.0 * scale).powi(2)))
                    .exp(),
                    1 => (-(dx * dx) / (2.0 * (2.0 * scale).powi(2))
                        - (dy * dy) / (2.0 * (7.0 * scale).powi(2)))
                    .exp(),
                    2 => (-(dx * dx + dy * dy) / (2.0 * (3.0 * scale).powi(2))).exp(),
                    _ => {
                        let r = (dx * dx + dy * dy).sqrt();
                        (-(r - 7.0 * scale).powi(2) / (2.0 * (1.3 * scale).powi(2))).exp()
                    }
                }
            };
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let v = background
                            + color[ch] * intensity(x as f64, y as f64)
                            + noise.sample(&mut rng);
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
        let descriptor = DatasetDescriptor {
            name: format!("blobs{s}"),
            channels: c,
            height: s,
            width: s,
            classes: BLOB_CLASSES,
            files: vec![],
        };
        let images = Tensor::new(vec![self.samples, c, s, s], data).expect("blob shape");
        Dataset::new(descriptor, images, Some(labels)).expect("blob dataset")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_round_trip_preserves_f32_values() {
        let ds = SyntheticBlobs {
            samples: 6,
            size: 8,
            ..Default::default()
        }
        .generate();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.bin");
        write_packed(&path, ds.images(), ds.labels()).unwrap();
        let (images, labels) = read_packed(&path).unwrap();
        assert_eq!(labels.as_deref(), ds.labels());
        let max_err = images.max_abs_diff(ds.images());
        assert!(max_err < 1e-7, "{max_err}");
    }

    #[test]
    fn packed_header_is_little_endian() {
        let images = Tensor::zeros(&[2, 1, 2, 3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_packed(&path, &images, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"AIRD");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &DTYPE_F32.to_le_bytes());
        assert_eq!(bytes.len(), 28 + 12 * 4 + 4);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE00000000000000000000000000").unwrap();
        assert!(matches!(read_packed(&path), Err(AirError::Format { .. })));
    }

    #[test]
    fn descriptor_loads_packed_and_raw_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = SyntheticBlobs {
            samples: 4,
            size: 4,
            channels: 1,
            ..Default::default()
        }
        .generate();
        write_packed(&dir.path().join("a.bin"), ds.images(), ds.labels()).unwrap();
        let raw = dir.path().join("raw");
        std::fs::create_dir(&raw).unwrap();
        for i in 0..2 {
            let bytes: Vec<u8> = ds
                .images()
                .row(i)
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            std::fs::write(raw.join(format!("{i:03}.f32")), bytes).unwrap();
        }
        std::fs::write(raw.join("labels.txt"), "0\n1\n").unwrap();
        let desc = dir.path().join("data.toml");
        std::fs::write(
            &desc,
            "name = \"t\"\nchannels = 1\nheight = 4\nwidth = 4\nclasses = 4\nfiles = [\"a.bin\", \"raw\"]\n",
        )
        .unwrap();
        let loaded = Dataset::from_descriptor(&desc).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.labels().unwrap(), &[0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn blobs_are_balanced_and_in_range() {
        let ds = SyntheticBlobs::default().generate();
        assert_eq!(ds.len(), 512);
        let labels = ds.labels().unwrap();
        for k in 0..BLOB_CLASSES {
            assert_eq!(labels.iter().filter(|&&y| y == k).count(), 128);
        }
        assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dataset_rejects_out_of_range_labels() {
        let ds = SyntheticBlobs {
            samples: 4,
            size: 4,
            ..Default::default()
        }
        .generate();
        assert!(ds.with_labels(vec![0, 1, 2, 9], 4).is_err());
    }
}
