//! Datasets: 2-D toy distributions, MNIST IDX files with dynamic
//! binarization, and a PGM writer for image samples.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{stream, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const TOY_RADIUS: f64 = 2.0;
pub const TOY_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "toy8gauss")]
    Toy8Gauss,
    #[serde(rename = "swissroll")]
    SwissRoll,
    #[serde(rename = "mnist-binarized")]
    MnistBinarized,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Toy8Gauss => "toy8gauss",
            DatasetKind::SwissRoll => "swissroll",
            DatasetKind::MnistBinarized => "mnist-binarized",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// `n x dim`; grayscale intensities in `[0, 1]` for MNIST.
    pub data: Tensor<f32>,
    /// Per-item shape, e.g. `[2]` or `[28, 28]`.
    pub item_shape: Vec<usize>,
    /// Seed of the per-epoch Bernoulli binarization, if any.
    pub binarize_seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn with_binarization(mut self, seed: u64) -> Self {
        self.binarize_seed = Some(seed);
        self
    }

    /// The data as seen in `epoch`: a fresh `Bernoulli(pixel)` draw per
    /// epoch when binarization is on, otherwise the raw tensor.
    pub fn epoch_data(&self, epoch: u64) -> Tensor<f32> {
        match self.binarize_seed {
            None => self.data.clone(),
            Some(seed) => {
                let mut rng = stream(seed, Purpose::Binarize, epoch);
                let bits = self
                    .data
                    .data()
                    .iter()
                    .map(|&p| if rng.random::<f32>() < p { 1.0 } else { 0.0 })
                    .collect();
                Tensor::new(self.data.shape().to_vec(), bits).expect("same shape")
            }
        }
    }

    /// Shuffled mini-batches for `epoch`; the last partial batch is dropped
    /// unless it is the only one.
    pub fn batches(&self, epoch: u64, batch_size: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let data = self.epoch_data(epoch);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream(seed, Purpose::Batch, epoch));
        let n_full = (self.len() / batch_size).max(1);
        let dim = self.dim();
        let mut out = Vec::with_capacity(n_full);
        for chunk in idx.chunks(batch_size).take(n_full) {
            let mut rows = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                rows.extend_from_slice(data.row(i));
            }
            out.push(Tensor::matrix(chunk.len(), dim, rows)?);
        }
        Ok(out)
    }

    /// First `n` items (or all).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let dim = self.dim();
        Dataset {
            kind: self.kind,
            data: Tensor::matrix(n, dim, self.data.data()[..n * dim].to_vec()).expect("prefix"),
            item_shape: self.item_shape.clone(),
            binarize_seed: self.binarize_seed,
        }
    }
}

/// Centres of the eight toy modes.
pub fn toy_centers() -> Vec<[f64; 2]> {
    (0..8)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 8.0;
            [TOY_RADIUS * a.cos(), TOY_RADIUS * a.sin()]
        })
        .collect()
}

/// Index of the nearest toy centre and the distance to it.
pub fn nearest_mode(p: [f64; 2]) -> (usize, f64) {
    toy_centers()
        .iter()
        .enumerate()
        .map(|(k, c)| (k, ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("eight centres")
}

/// Per-mode sample counts for the eight-Gaussian toy set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCoverage {
    pub counts: [usize; 8],
    /// Points farther than `radius` from every centre.
    pub off_mode: usize,
    pub total: usize,
}

impl ModeCoverage {
    /// Modes holding at least `min_frac` of all points.
    pub fn covered(&self, min_frac: f64) -> usize {
        self.counts.iter().filter(|&&c| c as f64 >= min_frac * self.total as f64).count()
    }
}

pub fn mode_coverage(points: &Tensor<f64>, radius: f64) -> Result<ModeCoverage> {
    if points.cols() != 2 {
        return Err(Error::shape("2 columns", points.cols()));
    }
    let mut cov = ModeCoverage {
        counts: [0; 8],
        off_mode: 0,
        total: points.rows(),
    };
    for i in 0..points.rows() {
        let r = points.row(i);
        let (k, d) = nearest_mode([r[0], r[1]]);
        if d <= radius {
            cov.counts[k] += 1;
        } else {
            cov.off_mode += 1;
        }
    }
    Ok(cov)
}

/// Generates `n` points of a 2-D toy distribution.
pub fn gen_toy(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    gen_toy_split(kind, n, seed, 0)
}

/// As [`gen_toy`], drawing from an independent stream per `split` so held-out
/// sets never overlap the training draws.
pub fn gen_toy_split(kind: DatasetKind, n: usize, seed: u64, split: u64) -> Result<Dataset> {
    let mut rng = stream(seed, Purpose::Data, split);
    let mut pts = Vec::with_capacity(2 * n);
    match kind {
        DatasetKind::Toy8Gauss => {
            let centers = toy_centers();
            for _ in 0..n {
                let c = centers[rng.random_range(0..8)];
                for v in c {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    pts.push((v + TOY_STD * e) as f32);
                }
            }
        }
        DatasetKind::SwissRoll => {
            // Unrolled angle in [1.5 pi, 4.5 pi], scaled to roughly [-3, 3].
            for _ in 0..n {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let (ex, ey): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                pts.push((t * t.cos() / 5.0 + 0.05 * ex) as f32);
                pts.push((t * t.sin() / 5.0 + 0.05 * ey) as f32);
            }
        }
        DatasetKind::MnistBinarized => {
            return Err(Error::config("dataset", "mnist-binarized is loaded from IDX files, not generated"));
        }
    }
    Ok(Dataset {
        kind,
        data: Tensor::matrix(n, 2, pts)?,
        item_shape: vec![2],
        binarize_seed: None,
    })
}

/// Parses an IDX file with unsigned-byte payload, returning its dims and bytes.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX file shorter than its magic number".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != expected_magic {
        return Err(Error::Format(format!(
            "bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != n {
        return Err(Error::Format(format!("IDX payload has {} bytes, header implies {n}", body.len())));
    }
    Ok((dims, body))
}

/// Loads an IDX image file as grayscale in `[0, 1]`, binarized per epoch
/// with `binarize_seed`.
pub fn load_mnist_idx(path: &Path, binarize_seed: u64) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let (dims, body) = parse_idx(&bytes, IDX_IMAGES_MAGIC)?;
    let n = dims[0];
    let item_shape = dims[1..].to_vec();
    let dim: usize = item_shape.iter().product();
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Dataset {
        kind: DatasetKind::MnistBinarized,
        data: Tensor::matrix(n, dim, data)?,
        item_shape,
        binarize_seed: Some(binarize_seed),
    })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    let (_, body) = parse_idx(&bytes, IDX_LABELS_MAGIC)?;
    Ok(body.to_vec())
}

/// Serializes images in the IDX unsigned-byte layout.
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for im in images {
        out.extend_from_slice(im);
    }
    out
}

/// Writes a binary PGM (`P5`, maxval 255) from intensities in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(width * height, pixels.len()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
