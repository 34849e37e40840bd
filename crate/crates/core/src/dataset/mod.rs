//! MNIST-family datasets: loading, padding and minibatching.
//!
//! Pixels are converted to scalars (`u / 255` by default, or raw bytes) and
//! optionally zero-padded. Nothing else is done to them: no normalization, no
//! centering, no augmentation.
//!
//! On disk a dataset lives in `<data_dir>/<dataset>/` under the four standard
//! file names, each either raw or gzip-compressed (with or without a `.gz`
//! suffix).

mod fetch;
mod idx;

use std::cell::OnceCell;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::TargetEncoding;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use fetch::{default_sources, fetch_dataset, md5_hex, FileSource};
pub use idx::{
    parse_idx_images, parse_idx_images_scaled, parse_idx_labels, write_idx_images, write_idx_labels, PixelScale,
    IMAGE_MAGIC, LABEL_MAGIC,
};

pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "mnist")]
    Mnist,
    #[serde(rename = "fashion-mnist")]
    FashionMnist,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
        }
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashion" => Ok(DatasetName::FashionMnist),
            other => Err(Error::Argument(format!("unknown dataset `{other}` (expected mnist or fashion-mnist)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    /// Standard `(images, labels)` file names.
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            SplitKind::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            SplitKind::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    images: Tensor,
    labels: Vec<usize>,
    pub dataset: DatasetName,
    pub kind: SplitKind,
}

impl DatasetSplit {
    pub fn new(images: Tensor, labels: Vec<usize>, dataset: DatasetName, kind: SplitKind) -> Result<Self> {
        match *images.dims() {
            [n, h, w, 1] if h == w => {
                if n != labels.len() {
                    return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
                }
            }
            _ => return Err(Error::Shape(format!("images must be [n, e, e, 1], got {:?}", images.shape()))),
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::Argument(format!("label {bad} is not in 0..{CLASSES}")));
        }
        Ok(DatasetSplit { images, labels, dataset, kind })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Spatial extent (images are square).
    pub fn extent(&self) -> usize {
        self.images.dims()[1]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The first `limit` samples (or all of them, if fewer).
    pub fn take(&self, limit: usize) -> Result<DatasetSplit> {
        let n = limit.min(self.len());
        self.gather(&(0..n).collect::<Vec<_>>()).and_then(|b| DatasetSplit::new(b.x, b.labels, self.dataset, self.kind))
    }

    /// Copies the samples at `indices` into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let e = self.extent();
        let per = e * e;
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!("sample {i} out of range 0..{}", self.len())));
            }
            x.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok(Batch::new(Tensor::from_vec(&[indices.len(), e, e, 1], x)?, labels))
    }
}

/// A minibatch of images and labels. The `{-1, +1}` target matrix is built
/// on first request.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    encoding: OnceCell<TargetEncoding>,
}

impl Batch {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Self {
        Batch { x, labels, encoding: OnceCell::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn encoding(&self) -> Result<&TargetEncoding> {
        if let Some(enc) = self.encoding.get() {
            return Ok(enc);
        }
        let enc = TargetEncoding::new(&self.labels, CLASSES)?;
        Ok(self.encoding.get_or_init(|| enc))
    }
}

/// Zero-pads every image symmetrically to `target × target`.
pub fn pad_images(split: &DatasetSplit, target: usize) -> Result<DatasetSplit> {
    let e = split.extent();
    if target < e || (target - e) % 2 != 0 {
        return Err(Error::Argument(format!(
            "cannot pad {e}x{e} images to {target}x{target}: the difference must be even and non-negative"
        )));
    }
    if target == e {
        return Ok(split.clone());
    }
    let border = (target - e) / 2;
    let n = split.len();
    let mut out = vec![0.0; n * target * target];
    for (img, dst) in split.images.data().chunks_exact(e * e).zip(out.chunks_exact_mut(target * target)) {
        for (r, row) in img.chunks_exact(e).enumerate() {
            let start = (r + border) * target + border;
            dst[start..start + e].copy_from_slice(row);
        }
    }
    DatasetSplit::new(Tensor::from_vec(&[n, target, target, 1], out)?, split.labels.clone(), split.dataset, split.kind)
}

fn epoch_order(n: usize, shuffle: bool, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order
}

fn check_batch_size(split: &DatasetSplit, batch_size: usize) -> Result<()> {
    if batch_size == 0 || batch_size > split.len() {
        return Err(Error::Argument(format!("batch size {batch_size} must lie in 1..={}", split.len())));
    }
    Ok(())
}

/// One epoch of minibatches; the last one may be short.
pub struct EpochBatches<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.split.gather(&self.order[self.pos..end]).expect("epoch indices are in range");
        self.pos = end;
        Some(batch)
    }
}

pub fn batches<'a>(
    split: &'a DatasetSplit,
    batch_size: usize,
    shuffle: bool,
    rng: &mut Rng,
) -> Result<EpochBatches<'a>> {
    check_batch_size(split, batch_size)?;
    Ok(EpochBatches { split, order: epoch_order(split.len(), shuffle, rng), batch_size, pos: 0 })
}

/// Endless minibatch stream for step-based training. Every batch holds
/// exactly `batch_size` samples: when an epoch runs out, the batch is
/// completed from the start of the next, freshly shuffled, epoch.
pub struct StepSampler<'a> {
    split: &'a DatasetSplit,
    batch_size: usize,
    shuffle: bool,
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl<'a> StepSampler<'a> {
    pub fn new(split: &'a DatasetSplit, batch_size: usize, shuffle: bool, mut rng: Rng) -> Result<Self> {
        check_batch_size(split, batch_size)?;
        let order = epoch_order(split.len(), shuffle, &mut rng);
        Ok(StepSampler { split, batch_size, shuffle, rng, order, pos: 0, epoch: 0 })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut indices = Vec::with_capacity(self.batch_size);
        while indices.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order = epoch_order(self.split.len(), self.shuffle, &mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            let end = (self.pos + self.batch_size - indices.len()).min(self.order.len());
            indices.extend_from_slice(&self.order[self.pos..end]);
            self.pos = end;
        }
        self.split.gather(&indices).expect("epoch indices are in range")
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Finds `name` or `name.gz` in `dir`.
fn locate(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))].into_iter().find(|p| p.is_file())
}

pub fn dataset_dir(data_dir: &Path, dataset: DatasetName) -> PathBuf {
    data_dir.join(dataset.as_str())
}

/// True when all four files of `dataset` are present under `data_dir`.
pub fn dataset_available(data_dir: &Path, dataset: DatasetName) -> bool {
    let dir = dataset_dir(data_dir, dataset);
    [SplitKind::Train, SplitKind::Test].into_iter().all(|k| {
        let (images, labels) = k.file_names();
        locate(&dir, images).is_some() && locate(&dir, labels).is_some()
    })
}

pub fn load_split(data_dir: &Path, dataset: DatasetName, kind: SplitKind, scale: PixelScale) -> Result<DatasetSplit> {
    let dir = dataset_dir(data_dir, dataset);
    let (image_name, label_name) = kind.file_names();
    let find = |name: &str| {
        locate(&dir, name).ok_or_else(|| {
            Error::io(dir.join(name), std::io::Error::new(std::io::ErrorKind::NotFound, "file (or .gz) not found"))
        })
    };
    let image_path = find(image_name)?;
    let label_path = find(label_name)?;
    let with_path = |path: &Path, e: Error| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Length(m) => Error::Length(format!("{}: {m}", path.display())),
        other => other,
    };
    let images = parse_idx_images_scaled(&read_maybe_gz(&image_path)?, scale).map_err(|e| with_path(&image_path, e))?;
    let labels = parse_idx_labels(&read_maybe_gz(&label_path)?).map_err(|e| with_path(&label_path, e))?;
    DatasetSplit::new(images, labels, dataset, kind)
}
