//! MNIST IDX loading, label-sorted non-IID partitioning and synthetic
//! Bernoulli Gaussian-mixture gradients.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::bgm::{sample_bgm, BgmParams};
use crate::error::{Error, Result};
use crate::rng;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_PIXELS: usize = 784;
pub const NUM_CLASSES: usize = 10;

/// Environment variable naming the directory with the four MNIST IDX files.
pub const DATA_ENV: &str = "FEDQCS_DATA";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x 784`, pixels in `[0, 1]`.
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::dim("dataset labels", images.nrows(), labels.len()));
        }
        if images.ncols() != IMAGE_PIXELS {
            return Err(Error::dim("image pixels", IMAGE_PIXELS, images.ncols()));
        }
        if let Some(bad) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("pixel {bad} outside [0, 1]")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidInput(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let row = self.images.row(i);
        row.to_slice().expect("images are stored row-major")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Array2::zeros((indices.len(), IMAGE_PIXELS));
        for (r, &i) in indices.iter().enumerate() {
            images.row_mut(r).assign(&self.images.row(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded random subset of `n` samples (all of them if `n >= len`), in
    /// ascending index order.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, "test-subset", &[n as u64]));
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, offset, "truncated header"))
}

/// Images from an IDX3 buffer; `path` only labels errors.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(parse_err(path, 0, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows * cols != IMAGE_PIXELS {
        return Err(parse_err(path, 8, format!("image size {rows}x{cols}, expected 28x28")));
    }
    let body = &bytes[16..];
    if body.len() != n * IMAGE_PIXELS {
        return Err(parse_err(
            path,
            16 + body.len().min(n * IMAGE_PIXELS),
            format!("{} pixel bytes for {n} images, expected {}", body.len(), n * IMAGE_PIXELS),
        ));
    }
    Ok(Array2::from_shape_fn((n, IMAGE_PIXELS), |(i, j)| {
        f64::from(body[i * IMAGE_PIXELS + j]) / 255.0
    }))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(parse_err(path, 0, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(parse_err(path, 8 + body.len().min(n), format!("{} label bytes, expected {n}", body.len())));
    }
    if let Some(pos) = body.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(parse_err(path, 8 + pos, format!("label {} outside 0..{NUM_CLASSES}", body[pos])));
    }
    Ok(body.to_vec())
}

/// Reads an image/label file pair, gzip-compressed or raw.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_maybe_gz(images)?, images)?;
    let y = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
    if x.nrows() != y.len() {
        return Err(Error::dim("IDX image/label counts", x.nrows(), y.len()));
    }
    Dataset::new(x, y)
}

/// `$FEDQCS_DATA`, or the `data/mnist` directory of the source tree.
pub fn data_root() -> PathBuf {
    match std::env::var_os(DATA_ENV) {
        Some(p) => PathBuf::from(p),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

fn locate(root: &Path, stem: &str) -> Result<PathBuf> {
    [format!("{stem}.gz"), stem.to_string()]
        .into_iter()
        .map(|name| root.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::config(
                "dataset",
                format!("{stem}[.gz] not found under {} (set {DATA_ENV})", root.display()),
            )
        })
}

/// `(train, test)` from the standard MNIST file names under `root`.
pub fn load_mnist(root: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &locate(root, "train-images-idx3-ubyte")?,
        &locate(root, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(
        &locate(root, "t10k-images-idx3-ubyte")?,
        &locate(root, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}

/// Per-device sample indices into the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub devices: Vec<Vec<usize>>,
}

/// Label held by device `k` (0-based): `floor(k / (K / 10))`.
pub fn device_label(k: usize, num_devices: usize) -> usize {
    k / (num_devices / NUM_CLASSES)
}

/// Device `k` gets `per_device` samples drawn without replacement from the
/// pool labelled `floor(k / (K / 10))`.
pub fn partition_noniid(labels: &[u8], num_devices: usize, per_device: usize, seed: u64) -> Result<Partition> {
    if num_devices == 0 || num_devices % NUM_CLASSES != 0 {
        return Err(Error::config("K", format!("must be a positive multiple of 10, got {num_devices}")));
    }
    if per_device == 0 {
        return Err(Error::config("samples_per_device", "must be positive"));
    }
    let per_label = num_devices / NUM_CLASSES;
    let mut devices = vec![Vec::new(); num_devices];
    for d in 0..NUM_CLASSES {
        let mut pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == d).collect();
        let need = per_label * per_device;
        if pool.len() < need {
            return Err(Error::config(
                "samples_per_device",
                format!("label {d} has {} samples, {need} needed", pool.len()),
            ));
        }
        pool.shuffle(&mut rng::stream(seed, "partition", &[d as u64]));
        for j in 0..per_label {
            let mut mine = pool[j * per_device..(j + 1) * per_device].to_vec();
            mine.sort_unstable();
            devices[d * per_label + j] = mine;
        }
    }
    Ok(Partition { devices })
}

/// `K` gradient vectors of length `B N`, every entry IID from `theta`.
pub fn synthetic_gradients(
    theta: &BgmParams,
    num_devices: usize,
    num_blocks: usize,
    block_len: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    theta.validate()?;
    (0..num_devices)
        .map(|k| {
            let mut r = rng::stream(seed, "synthetic", &[k as u64]);
            sample_bgm(theta, num_blocks * block_len, &mut r)
        })
        .collect()
}
