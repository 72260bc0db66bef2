//! Synthetic generators and image-format parsers.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3072;
pub const IMAGE_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetMeta {
    pub name: String,
    pub normalization: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    fn new(x: Vec<DVector<f64>>, y: Vec<DVector<f64>>, name: &str, normalization: &str, seed: Option<u64>) -> Dataset {
        Dataset {
            x,
            y,
            meta: DatasetMeta {
                name: name.into(),
                normalization: normalization.into(),
                seed,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.first().map_or(0, |v| v.len())
    }

    pub fn label_dim(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: indices.iter().map(|&i| self.x[i].clone()).collect(),
            y: indices.iter().map(|&i| self.y[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Random halving: the first `len / 2` shuffled samples train, the rest test.
    pub fn split_half(&self, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (train, test) = order.split_at(self.len() / 2);
        (self.subset(train), self.subset(test))
    }

    /// Label matrix `N x label_dim`.
    pub fn label_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.len(), self.label_dim(), |i, j| self.y[i][j])
    }
}

/// `x ~ U[0, pi]`, `y = sin x`.
pub fn gen_sine(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=std::f64::consts::PI)).collect();
    Ok(Dataset::new(
        xs.iter().map(|&x| DVector::from_element(1, x)).collect(),
        xs.iter().map(|&x| DVector::from_element(1, x.sin())).collect(),
        "sine",
        "none",
        Some(seed),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CircleSpacing {
    #[default]
    Uniform,
    /// `gamma_i = -pi + 2 pi i / n`.
    Even,
}

/// Points `(cos g, sin g)` on the unit circle labelled `cos g * sin g`.
pub fn circle_point(gamma: f64) -> (DVector<f64>, f64) {
    let (s, c) = gamma.sin_cos();
    (DVector::from_vec(vec![c, s]), c * s)
}

pub fn gen_circle(n: usize, spacing: CircleSpacing, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    let pi = std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gammas: Vec<f64> = match spacing {
        CircleSpacing::Uniform => (0..n).map(|_| rng.random_range(-pi..=pi)).collect(),
        CircleSpacing::Even => (0..n).map(|i| -pi + 2.0 * pi * i as f64 / n as f64).collect(),
    };
    let (x, y) = gammas
        .iter()
        .map(|&g| {
            let (p, label) = circle_point(g);
            (p, DVector::from_element(1, label))
        })
        .unzip();
    Ok(Dataset::new(x, y, "circle", "unit_norm", Some(seed)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    #[default]
    StandardNormal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SphereVariant {
    /// `x ~ N(0, I_d)`.
    #[default]
    Gaussian,
    /// Uniform on the unit sphere.
    Sphere,
}

/// Inputs with `||x|| = Theta(sqrt d)` (gaussian) or unit norm (sphere).
/// With `LabelKind::None` every label is an empty vector.
pub fn gen_wellscaled(n: usize, d: usize, labels: LabelKind, variant: SphereVariant, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::Domain("n and d must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        if variant == SphereVariant::Sphere {
            // a zero draw has probability zero; guard anyway
            let norm = v.norm();
            if norm > 0.0 {
                v /= norm;
            } else {
                v[0] = 1.0;
            }
        }
        x.push(v);
        y.push(match labels {
            LabelKind::StandardNormal => DVector::from_element(1, StandardNormal.sample(&mut rng)),
            LabelKind::None => DVector::zeros(0),
        });
    }
    let norm = match variant {
        SphereVariant::Gaussian => "standard_normal",
        SphereVariant::Sphere => "unit_sphere",
    };
    Ok(Dataset::new(x, y, "wellscaled", norm, Some(seed)))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let chunk = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Length(format!("{what}: header ends at byte {}", bytes.len())))?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
}

fn one_hot(label: u8, what: &str) -> Result<DVector<f64>> {
    if label as usize >= IMAGE_CLASSES {
        return Err(Error::Format(format!("{what}: label {label} outside 0..{IMAGE_CLASSES}")));
    }
    let mut v = DVector::zeros(IMAGE_CLASSES);
    v[label as usize] = 1.0;
    Ok(v)
}

/// Parses an IDX image/label file pair (MNIST layout).
pub fn parse_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "images: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "labels: magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
        )));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let label_count = be_u32(labels, 4, "labels")? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "image count {count} differs from label count {label_count}"
        )));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < n * dim {
        return Err(Error::Length(format!(
            "images: need {} pixel bytes for {n} samples, found {}",
            n * dim,
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n {
        return Err(Error::Length(format!(
            "labels: need {n} bytes, found {}",
            label_bytes.len()
        )));
    }
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let img = &pixels[i * dim..(i + 1) * dim];
        x.push(DVector::from_iterator(dim, img.iter().map(|&b| b as f64 / 255.0)));
        y.push(one_hot(label_bytes[i], "labels")?);
    }
    Ok(Dataset::new(x, y, "idx", "pixels/255", None))
}

pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_idx(&images, &labels, limit)
}

/// Parses CIFAR-10 binary records: one label byte, then 3072 channel-planar pixel bytes.
pub fn parse_cifar10(bytes: &[u8], limit: Option<usize>) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "cifar10: length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let n = limit.map_or(count, |l| l.min(count));
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        y.push(one_hot(rec[0], "cifar10")?);
        x.push(DVector::from_iterator(
            CIFAR_RECORD - 1,
            rec[1..].iter().map(|&b| b as f64 / 255.0),
        ));
    }
    Ok(Dataset::new(x, y, "cifar10", "pixels/255", None))
}

/// Concatenates batches in order, stopping once `limit` samples are read.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P], limit: Option<usize>) -> Result<Dataset> {
    let mut out = Dataset::new(Vec::new(), Vec::new(), "cifar10", "pixels/255", None);
    for p in batch_paths {
        let remaining = limit.map(|l| l - out.len());
        if remaining == Some(0) {
            break;
        }
        let part = parse_cifar10(&read_file(p.as_ref())?, remaining)?;
        out.x.extend(part.x);
        out.y.extend(part.y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGE_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn sine_range_and_determinism() {
        let a = gen_sine(500, 4).unwrap();
        assert_eq!(a.len(), 500);
        for (x, y) in a.x.iter().zip(&a.y) {
            assert!((0.0..=std::f64::consts::PI).contains(&x[0]));
            assert!((0.0..=1.0).contains(&y[0]));
            assert_eq!(y[0], x[0].sin());
        }
        assert_eq!(a, gen_sine(500, 4).unwrap());
        assert_ne!(a.x, gen_sine(500, 5).unwrap().x);
        assert!(gen_sine(0, 1).is_err());
    }

    #[test]
    fn circle_points() {
        let (p, label) = circle_point(0.0);
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
        assert_eq!(label, 0.0);
        let (p, label) = circle_point(std::f64::consts::FRAC_PI_4);
        assert!((p[0] - 0.5f64.sqrt()).abs() < 1e-15 && (p[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((label - 0.5).abs() < 1e-15);
        for spacing in [CircleSpacing::Uniform, CircleSpacing::Even] {
            let ds = gen_circle(64, spacing, 2).unwrap();
            for x in &ds.x {
                assert!((x.norm() - 1.0).abs() < 1e-14);
            }
        }
        let even = gen_circle(4, CircleSpacing::Even, 0).unwrap();
        assert!((even.x[2][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wellscaled_gaussian_norms() {
        let ds = gen_wellscaled(10_000, 5, LabelKind::StandardNormal, SphereVariant::Gaussian, 8).unwrap();
        let mean_sq: f64 = ds.x.iter().map(|x| x.norm_squared() / 5.0).sum::<f64>() / 10_000.0;
        assert!((mean_sq - 1.0).abs() < 0.05, "{mean_sq}");
        assert_eq!(ds.label_dim(), 1);
        let sphere = gen_wellscaled(50, 7, LabelKind::None, SphereVariant::Sphere, 8).unwrap();
        for x in &sphere.x {
            assert!((x.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(sphere.label_dim(), 0);
    }

    #[test]
    fn idx_roundtrip() {
        let images = idx_images(3, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4, 9, 9, 9, 9]);
        let labels = idx_labels(&[7, 0, 9]);
        let ds = parse_idx(&images, &labels, None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.x[0][1], 1.0);
        assert!((ds.x[0][2] - 0.2).abs() < 1e-15);
        assert_eq!(ds.y[0][7], 1.0);
        assert_eq!(ds.y[2].sum(), 1.0);
        let limited = parse_idx(&images, &labels, Some(2)).unwrap();
        assert_eq!(limited.len(), 2);
        assert_eq!(limited.x[1], ds.x[1]);
    }

    #[test]
    fn idx_errors() {
        let images = idx_images(2, 2, 2, &[0; 8]);
        let labels = idx_labels(&[1, 2]);
        // label file in the image slot
        assert!(matches!(parse_idx(&labels, &labels, None), Err(Error::Format(m)) if m.contains("0x00000801")));
        let truncated = idx_images(2, 2, 2, &[0; 7]);
        assert!(matches!(parse_idx(&truncated, &labels, None), Err(Error::Length(_))));
        assert!(matches!(parse_idx(&images[..10], &labels, None), Err(Error::Length(_))));
        assert!(parse_idx(&images, &labels, None).is_ok());
    }

    #[test]
    fn cifar_records() {
        let mut rec = vec![9u8];
        rec.extend(std::iter::repeat_n(0u8, 3072));
        let ds = parse_cifar10(&rec, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.input_dim(), 3072);
        assert_eq!(ds.y[0][9], 1.0);
        assert!(ds.x[0].iter().all(|&v| v == 0.0));
        assert!(matches!(parse_cifar10(&rec[..3000], None), Err(Error::Format(_))));
    }

    #[test]
    fn halving_partitions() {
        let ds = gen_sine(9, 1).unwrap();
        let (a, b) = ds.split_half(3);
        assert_eq!((a.len(), b.len()), (4, 5));
        let mut all: Vec<f64> = a.x.iter().chain(&b.x).map(|v| v[0]).collect();
        let mut orig: Vec<f64> = ds.x.iter().map(|v| v[0]).collect();
        all.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(all, orig);
        assert_eq!(ds.split_half(3), (a, b));
    }
}
