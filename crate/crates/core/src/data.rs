//! Datasets: seeded synthetic generators, an IDX reader/writer, batching
//! and per-feature standardization.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if x.rows() != y.len() {
            return Err(Error::Data(format!(
                "{} feature rows for {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        if !x.is_finite() {
            return Err(Error::Data("non-finite feature".into()));
        }
        Ok(Self { x, y, classes, split })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Features and labels of the given rows.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Splits off the trailing `n` rows as a new dataset.
    pub fn split_tail(&self, n: usize, split: Split) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Data(format!("cannot split {n} of {} rows", self.len())));
        }
        let cut = self.len() - n;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        let (hx, hy) = self.gather(&head);
        let (tx, ty) = self.gather(&tail);
        Ok((
            Dataset::new(hx, hy, self.classes, self.split)?,
            Dataset::new(tx, ty, self.classes, split)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Spirals,
    Gaussians,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn spirals(classes: usize, samples_per_class: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::Spirals,
            classes,
            samples_per_class,
            noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise {} must be finite and ≥ 0", self.noise)));
        }
        Ok(())
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        match self.kind {
            SyntheticKind::Spirals => gen_spirals(self, split),
            SyntheticKind::Gaussians => gen_gaussians(self, split),
        }
    }
}

/// Angular offset of spiral arm `c` out of `k`.
pub fn arm_offset(c: usize, k: usize) -> f64 {
    2.0 * PI * c as f64 / k as f64
}

/// `K` interleaved arms: radius `t`, angle `4πt + 2πc/K`, `t ~ U[0, 1]`,
/// plus isotropic Gaussian noise. Rows are grouped by class.
pub fn gen_spirals(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let n = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for c in 0..spec.classes {
        let offset = arm_offset(c, spec.classes);
        for _ in 0..spec.samples_per_class {
            let t = rng.uniform();
            let angle = 4.0 * PI * t + offset;
            let nx = rng.normal() * spec.noise;
            let ny = rng.normal() * spec.noise;
            data.push(t * angle.cos() + nx);
            data.push(t * angle.sin() + ny);
            y.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, y, spec.classes, split)
}

/// Isotropic blobs centred on the unit circle.
pub fn gen_gaussians(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let n = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for c in 0..spec.classes {
        let a = arm_offset(c, spec.classes);
        for _ in 0..spec.samples_per_class {
            data.push(a.cos() + rng.normal() * spec.noise);
            data.push(a.sin() + rng.normal() * spec.noise);
            y.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, y, spec.classes, split)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file (`0x00000803`, rank 3, u8) into rows of
/// pixels scaled by 1/255. Returns `(count, rows·cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let d = rows * cols;
    let payload = &bytes[16..];
    if payload.len() != n * d {
        return Err(Error::Format(format!(
            "images: expected {} payload bytes, found {}",
            n * d,
            payload.len()
        )));
    }
    Ok((n, d, payload.iter().map(|&p| p as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "labels: expected {n} payload bytes, found {}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, d, px) = parse_idx_images(&fs::read(images)?)?;
    let y = parse_idx_labels(&fs::read(labels)?)?;
    if y.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", y.len())));
    }
    let classes = y.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(Tensor::new(vec![n, d], px)?, y, classes, Split::Train)
}

/// Encodes u8 images (`count × rows × cols`) and labels as IDX files.
pub fn encode_idx(pixels: &[u8], count: usize, rows: usize, cols: usize, labels: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if pixels.len() != count * rows * cols || labels.len() != count {
        return Err(Error::Format("pixel or label count does not match header".into()));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, count as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS, count as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    Ok((img, lab))
}

/// Index batches for one epoch. The order is a permutation keyed by
/// `(seed, epoch)`; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let perm = RngStream::derive(seed, epoch).permutation(n);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn fit(ds: &Dataset) -> Result<Self> {
        let (n, d) = (ds.x.rows(), ds.x.cols());
        if n < 2 {
            return Err(Error::Data("need at least 2 rows to fit normalization".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(ds.x.row_slice(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(ds.x.row_slice(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n as f64).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let d = ds.x.cols();
        if d != self.mean.len() {
            return Err(Error::Dimension {
                op: "normalize",
                left: ds.x.shape().to_vec(),
                right: vec![self.mean.len()],
            });
        }
        let mut x = ds.x.clone();
        for (j, v) in x.data_mut().iter_mut().enumerate() {
            let c = j % d;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        Dataset::new(x, ds.y.clone(), ds.classes, ds.split)
    }
}

/// Fits on `ds` and returns it standardized along with the statistics.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, Normalizer)> {
    let stats = Normalizer::fit(ds)?;
    Ok((stats.apply(ds)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spirals_deterministic_and_balanced() {
        let spec = SyntheticSpec::spirals(3, 50, 0.1, 4);
        let a = spec.generate(Split::Train).unwrap();
        let b = spec.generate(Split::Train).unwrap();
        assert!(a.x.bitwise_eq(&b.x));
        assert_eq!(a.y, b.y);
        for c in 0..3 {
            assert_eq!(a.y.iter().filter(|&&y| y == c).count(), 50);
        }
    }

    #[test]
    fn noiseless_spirals_lie_on_their_arm() {
        let spec = SyntheticSpec::spirals(4, 100, 0.0, 2);
        let ds = spec.generate(Split::Train).unwrap();
        for i in 0..ds.len() {
            let (px, py) = (ds.x.get(i, 0), ds.x.get(i, 1));
            let r = px.hypot(py);
            // t equals the radius; rebuild the arm point from it
            let angle = 4.0 * PI * r + arm_offset(ds.y[i], 4);
            assert!((r * angle.cos() - px).abs() < 1e-12);
            assert!((r * angle.sin() - py).abs() < 1e-12);
        }
    }

    #[test]
    fn idx_fixture_loads_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [0u8, 255, 128, 7, 1, 2, 3, 4];
        let (img, lab) = encode_idx(&pixels, 2, 2, 2, &[3, 1]).unwrap();
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.x.shape(), &[2, 4]);
        assert_eq!(ds.y, vec![3, 1]);
        for (v, p) in ds.x.data().iter().zip(pixels) {
            assert_eq!(*v, p as f64 / 255.0);
        }
    }

    #[test]
    fn idx_rejects_bad_files() {
        let (mut img, lab) = encode_idx(&[1, 2, 3, 4], 1, 2, 2, &[0]).unwrap();
        let (_, lab2) = encode_idx(&[1, 2, 3, 4, 5, 6, 7, 8], 2, 2, 2, &[0, 1]).unwrap();
        assert!(matches!(parse_idx_images(&[0, 0, 0, 0, 0, 0, 0, 0]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&img[..18]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&img), Err(Error::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab2).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
        fs::write(&lp, &lab).unwrap();
        assert!(load_idx(&ip, &lp).is_ok());
        img[3] = 0;
        fs::write(&ip, &img).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let b = batches(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batches(10, 4, 1, 0).unwrap());
        assert_ne!(b, batches(10, 4, 1, 1).unwrap());
        assert!(batches(10, 0, 1, 0).is_err());
    }

    #[test]
    fn normalization_contract() {
        let train = Dataset::new(
            Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]).unwrap(),
            vec![0, 1, 0],
            2,
            Split::Train,
        )
        .unwrap();
        let (norm, stats) = normalize(&train).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..3).map(|i| norm.x.get(i, j)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-10);
        }
        assert!((0..3).all(|i| norm.x.get(i, 1) == 0.0));
        let val = Dataset::new(Tensor::from_rows(&[[3.0, 6.0]]).unwrap(), vec![1], 2, Split::Val).unwrap();
        let v = stats.apply(&val).unwrap();
        assert_eq!(v.x.get(0, 0), 0.0);
        assert!(Normalizer::fit(&val).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_the_dataset(n in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
            let mut all: Vec<usize> = batches(n, bs, seed, epoch).unwrap().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn idx_roundtrip_u8(px in proptest::collection::vec(any::<u8>(), 12), labels in proptest::collection::vec(0u8..10, 3)) {
            let (img, lab) = encode_idx(&px, 3, 2, 2, &labels).unwrap();
            let (n, d, vals) = parse_idx_images(&img).unwrap();
            prop_assert_eq!((n, d), (3, 4));
            let back: Vec<u8> = vals.iter().map(|v| (v * 255.0).round() as u8).collect();
            prop_assert_eq!(back, px);
            let y = parse_idx_labels(&lab).unwrap();
            prop_assert_eq!(y, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
        }
    }
}
