//! Downloads the four dataset files and checks their MD5 digests.
//!
//! `http://`, `https://` and `file://` URLs are accepted. Files already on
//! disk with the right digest are left alone.

use std::fs;
use std::path::{Path, PathBuf};

use md5::{Digest, Md5};

use super::{dataset_dir, DatasetName};
use crate::error::{Error, Result};

const MNIST_BASE: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";
const FASHION_BASE: &str = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/";

// MD5 of the published gzip files.
const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
];
const FASHION_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
    ("train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe"),
    ("t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79"),
    ("t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310"),
];

const MAX_DOWNLOAD: u64 = 128 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileSource {
    /// File name inside the dataset directory.
    pub file_name: String,
    pub url: String,
    /// Lowercase hex MD5 of the file as downloaded.
    pub md5: String,
}

/// The published files of `dataset`, optionally served from `base_url`
/// instead of the default mirror.
pub fn default_sources(dataset: DatasetName, base_url: Option<&str>) -> Vec<FileSource> {
    let (default_base, files) = match dataset {
        DatasetName::Mnist => (MNIST_BASE, MNIST_FILES),
        DatasetName::FashionMnist => (FASHION_BASE, FASHION_FILES),
    };
    let base = base_url.unwrap_or(default_base);
    let sep = if base.ends_with('/') { "" } else { "/" };
    files
        .iter()
        .map(|(name, md5)| FileSource {
            file_name: name.to_string(),
            url: format!("{base}{sep}{name}"),
            md5: md5.to_string(),
        })
        .collect()
}

pub fn md5_hex(bytes: &[u8]) -> String {
    Md5::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn download(url: &str) -> Result<Vec<u8>> {
    if let Some(path) = url.strip_prefix("file://") {
        return fs::read(path).map_err(|e| Error::io(path, e));
    }
    let fail = |reason: String| Error::Download { url: url.to_string(), reason };
    let mut response = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
    response.body_mut().with_config().limit(MAX_DOWNLOAD).read_to_vec().map_err(|e| fail(e.to_string()))
}

/// Fetches every source into `<data_dir>/<dataset>/`, verifying digests.
/// Returns the paths of the files now present.
pub fn fetch_dataset(data_dir: &Path, dataset: DatasetName, sources: &[FileSource]) -> Result<Vec<PathBuf>> {
    let dir = dataset_dir(data_dir, dataset);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::with_capacity(sources.len());
    for source in sources {
        let target = dir.join(&source.file_name);
        let expected = source.md5.to_ascii_lowercase();
        if let Ok(existing) = fs::read(&target) {
            if md5_hex(&existing) == expected {
                written.push(target);
                continue;
            }
        }
        let bytes = download(&source.url)?;
        let actual = md5_hex(&bytes);
        if actual != expected {
            return Err(Error::Checksum { path: target, expected, actual });
        }
        let partial = target.with_extension("part");
        fs::write(&partial, &bytes).map_err(|e| Error::io(&partial, e))?;
        fs::rename(&partial, &target).map_err(|e| Error::io(&target, e))?;
        written.push(target);
    }
    Ok(written)
}
