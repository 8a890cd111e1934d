//! Semantic source: MNIST ingestion, two-task labelling and minibatching.
//!
//! Each observation carries two semantic variables: a binary one (`z1`,
//! digit parity by default) and the categorical digit itself (`z2`).

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, IdxError, Result};
use crate::nnet::{loss, Activation};
use crate::stochastic::Rng64;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const OBSERVATION_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const DIGIT_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Rule mapping a digit to the binary semantic variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinaryTask {
    /// `digit mod 2`
    #[default]
    Parity,
    /// `1` when `digit < 5`
    LessThanFive,
}

impl FromStr for BinaryTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(Self::Parity),
            "lt5" => Ok(Self::LessThanFive),
            other => Err(Error::Config(format!("data.binary_task must be parity|lt5, got '{other}'"))),
        }
    }
}

impl fmt::Display for BinaryTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Parity => "parity",
            Self::LessThanFive => "lt5",
        })
    }
}

/// The two semantic tasks sharing one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Bernoulli variable, sigmoid head.
    Binary,
    /// Ten-way categorical variable, softmax head.
    Digit,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Binary, Task::Digit];

    /// 1-based task number used in file names and roles.
    pub fn id(self) -> u8 {
        match self {
            Task::Binary => 1,
            Task::Digit => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Task::Binary),
            2 => Ok(Task::Digit),
            _ => Err(Error::InvalidArgument(format!("task id must be 1 or 2, got {id}"))),
        }
    }

    /// Width of the decoder head.
    pub fn head_dim(self) -> usize {
        match self {
            Task::Binary => 1,
            Task::Digit => DIGIT_CLASSES,
        }
    }

    /// Output nonlinearity of the decoder head.
    pub fn head_activation(self) -> Activation {
        match self {
            Task::Binary => Activation::Sigmoid,
            Task::Digit => Activation::Softmax,
        }
    }

    /// Per-row negative log-likelihood of `targets` and its derivative with
    /// respect to the head logits.
    pub fn nll(self, logits: &Array2<f64>, targets: &[usize]) -> Result<(Array1<f64>, Array2<f64>)> {
        match self {
            Task::Binary => loss::bernoulli_nll(logits, targets),
            Task::Digit => loss::categorical_nll(logits, targets),
        }
    }

    /// Hard decisions from head outputs: `p >= 0.5` for the binary task,
    /// argmax with the lowest index winning ties for the digit.
    pub fn decide(self, outputs: &Array2<f64>) -> Vec<usize> {
        match self {
            Task::Binary => outputs.column(0).iter().map(|&p| usize::from(p >= 0.5)).collect(),
            Task::Digit => outputs
                .rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                        .0
                })
                .collect(),
        }
    }
}

/// `(z1, z2)` for a digit label.
pub fn derive_tasks(digit: u8, rule: BinaryTask) -> Result<(u8, u8)> {
    if digit as usize >= DIGIT_CLASSES {
        return Err(Error::InvalidArgument(format!("digit label {digit} outside 0..=9")));
    }
    let z1 = match rule {
        BinaryTask::Parity => digit % 2,
        BinaryTask::LessThanFive => u8::from(digit < 5),
    };
    Ok((z1, digit))
}

/// One observation with both semantic labels.
#[derive(Debug, Clone, Copy)]
pub struct SemanticSample<'a> {
    pub observation: ArrayView1<'a, f64>,
    pub z1: u8,
    pub z2: u8,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Array2<f64>,
    digits: Vec<u8>,
    split: Split,
    binary_task: BinaryTask,
    /// Row indices into the originally loaded split when subsampled.
    source_rows: Option<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset from normalized observations and digit labels.
    pub fn new(images: Array2<f64>, digits: Vec<u8>, split: Split) -> Result<Self> {
        if images.nrows() != digits.len() {
            return Err(IdxError::CountMismatch {
                images: images.nrows(),
                labels: digits.len(),
            }
            .into());
        }
        if let Some((index, &label)) = digits.iter().enumerate().find(|(_, &d)| d as usize >= DIGIT_CLASSES) {
            return Err(IdxError::LabelRange { index, label }.into());
        }
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("observations must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            digits,
            split,
            binary_task: BinaryTask::default(),
            source_rows: None,
        })
    }

    pub fn with_binary_task(mut self, rule: BinaryTask) -> Self {
        self.binary_task = rule;
        self
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn binary_task(&self) -> BinaryTask {
        self.binary_task
    }

    pub fn observation_dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn digits(&self) -> &[u8] {
        &self.digits
    }

    pub fn source_rows(&self) -> Option<&[usize]> {
        self.source_rows.as_deref()
    }

    pub fn sample(&self, i: usize) -> SemanticSample<'_> {
        let (z1, z2) = derive_tasks(self.digits[i], self.binary_task).expect("labels validated on load");
        SemanticSample {
            observation: self.images.row(i),
            z1,
            z2,
        }
    }

    /// Class index of `task` for every sample.
    pub fn labels(&self, task: Task) -> Vec<usize> {
        self.digits
            .iter()
            .map(|&d| {
                let (z1, z2) = derive_tasks(d, self.binary_task).expect("labels validated on load");
                match task {
                    Task::Binary => z1 as usize,
                    Task::Digit => z2 as usize,
                }
            })
            .collect()
    }

    /// Observation rows for `indices`, in order.
    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.images.select(Axis(0), indices)
    }

    /// Seeded subset of `n` samples, kept in original order. Returns the
    /// dataset unchanged when `n >= len`.
    pub fn subsample(&self, n: usize, rng: &mut Rng64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut perm: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut perm);
        let mut keep = perm[..n].to_vec();
        keep.sort_unstable();
        let source_rows = match &self.source_rows {
            Some(prev) => keep.iter().map(|&i| prev[i]).collect(),
            None => keep.clone(),
        };
        Dataset {
            images: self.rows(&keep),
            digits: keep.iter().map(|&i| self.digits[i]).collect(),
            split: self.split,
            binary_task: self.binary_task,
            source_rows: Some(source_rows),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| IdxError::Truncated {
            file: file.to_owned(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<u8>), IdxError> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            file: file.to_owned(),
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            file: file.to_owned(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((count, rows, cols, bytes[16..expected].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>, IdxError> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            file: file.to_owned(),
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            file: file.to_owned(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Reads a file, transparently inflating gzip payloads.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an IDX image/label pair and scales pixels to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let (count, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images_path)?, &img_name)?;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(IdxError::ImageShape { rows, cols }.into());
    }
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, &lbl_name)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: labels.len(),
        }
        .into());
    }
    let images = Array2::from_shape_vec((count, rows * cols), pixels.into_iter().map(|p| p as f64 / 255.0).collect())
        .expect("pixel count checked");
    Dataset::new(images, labels, split)
}

/// Seeded epoch permutation split into blocks of `batch` indices; the last
/// block may be shorter.
#[derive(Debug, Clone)]
pub struct Minibatches {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Iterator for Minibatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let block = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(block)
    }
}

pub fn minibatches(len: usize, batch: usize, rng: &mut Rng64) -> Result<Minibatches> {
    if batch == 0 {
        return Err(Error::InvalidArgument("minibatch size must be >= 1".into()));
    }
    if batch > len {
        return Err(Error::InvalidArgument(format!(
            "minibatch size {batch} exceeds dataset size {len}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    Ok(Minibatches { order, batch, pos: 0 })
}

/// A file served by a dataset mirror and the SHA-256 of its decompressed
/// contents.
#[derive(Debug, Clone, Copy)]
pub struct RemoteFile {
    pub name: &'static str,
    pub sha256: &'static str,
}

pub const DEFAULT_MNIST_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

pub const MNIST_FILES: [RemoteFile; 4] = [
    RemoteFile {
        name: "train-images-idx3-ubyte",
        sha256: "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    },
    RemoteFile {
        name: "train-labels-idx1-ubyte",
        sha256: "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    },
    RemoteFile {
        name: "t10k-images-idx3-ubyte",
        sha256: "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    },
    RemoteFile {
        name: "t10k-labels-idx1-ubyte",
        sha256: "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    },
];

/// Local paths of the four MNIST files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join(MNIST_FILES[0].name),
            train_labels: dir.join(MNIST_FILES[1].name),
            test_images: dir.join(MNIST_FILES[2].name),
            test_labels: dir.join(MNIST_FILES[3].name),
        }
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        match split {
            Split::Train => load_idx(&self.train_images, &self.train_labels, split),
            Split::Test => load_idx(&self.test_images, &self.test_labels, split),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Downloads the MNIST files into `cache_dir` unless already present and
/// valid.
pub fn fetch_dataset(url_base: &str, cache_dir: &Path) -> Result<MnistPaths> {
    fetch_files(url_base, cache_dir, &MNIST_FILES)?;
    Ok(MnistPaths::in_dir(cache_dir))
}

/// Ensures each file exists in `cache_dir` with the expected digest,
/// fetching `<url_base>/<name>.gz` for missing or corrupt entries.
///
/// Downloads land in a `.part` file and are renamed into place only after
/// the digest checks out.
pub fn fetch_files(url_base: &str, cache_dir: &Path, files: &[RemoteFile]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(cache_dir)?;
    let mut paths = Vec::with_capacity(files.len());
    for file in files {
        let dest = cache_dir.join(file.name);
        if dest.exists() {
            if sha256_hex(&fs::read(&dest)?) == file.sha256 {
                paths.push(dest);
                continue;
            }
            log::warn!("cached {} failed digest check, refetching", dest.display());
            fs::remove_file(&dest)?;
        }
        let url = format!("{}/{}.gz", url_base.trim_end_matches('/'), file.name);
        let part = cache_dir.join(format!("{}.part", file.name));
        let result = download(&url, &part).and_then(|()| {
            let payload = read_maybe_gz(&part)?;
            let actual = sha256_hex(&payload);
            if actual != file.sha256 {
                return Err(Error::DigestMismatch {
                    file: file.name.to_owned(),
                    expected: file.sha256.to_owned(),
                    actual,
                });
            }
            let mut f = fs::File::create(&part)?;
            f.write_all(&payload)?;
            f.sync_all()?;
            fs::rename(&part, &dest)?;
            Ok(())
        });
        if let Err(e) = result {
            let _ = fs::remove_file(&part);
            return Err(e);
        }
        paths.push(dest);
    }
    Ok(paths)
}

fn download(url: &str, to: &Path) -> Result<()> {
    log::info!("fetching {url}");
    let http_err = |message: String| Error::Http {
        url: url.to_owned(),
        message,
    };
    let response = ureq::get(url).call().map_err(|e| http_err(e.to_string()))?;
    let mut reader = response.into_body().into_reader();
    let mut out = fs::File::create(to)?;
    io::copy(&mut reader, &mut out).map_err(|e| http_err(e.to_string()))?;
    out.sync_all()?;
    Ok(())
}
