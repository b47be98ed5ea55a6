//! Dataset ingestion and generation: MNIST-style IDX files, deterministic
//! contiguous splits and synthetic Gaussian-cluster data for fast tests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Feature matrix (`n` rows of `d` values in `[0, 1]`) with integer class
/// labels in `[0, num_classes)`. Immutable after construction.
///
/// Empty datasets (`n = 0`) are permitted so that splits can have empty
/// validation or test parts; training requires a non-empty dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DatasetError> {
        if features.nrows() != labels.len() {
            return Err(DatasetError::Consistency(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if num_classes < 1 {
            return Err(DatasetError::InvalidArgument(
                "need at least one class".into(),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DatasetError::Consistency(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DatasetError::Consistency(
                "feature values must lie in [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Train / validation / test parts cut from disjoint index ranges.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DataSplit {
    pub fn new(train: Dataset, validation: Dataset, test: Dataset) -> Self {
        DataSplit {
            train,
            validation,
            test,
        }
    }
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

fn read_u32_be(reader: &mut impl Read, what: &str) -> Result<u32, DatasetError> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::Format(format!("truncated file while reading {what}"))
        } else {
            DatasetError::Io(e)
        }
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an image/label IDX pair into a dataset with pixels scaled by 1/255.
///
/// Images use magic `0x00000803` (unsigned bytes, 3 dimensions: count, rows,
/// columns) and are flattened row-major; labels use magic `0x00000801`. The
/// class count is `max(label) + 1`, at least 10 for digit files.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DatasetError> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut images, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )));
    }
    let n = read_u32_be(&mut images, "image count")? as usize;
    let rows = read_u32_be(&mut images, "image rows")? as usize;
    let cols = read_u32_be(&mut images, "image columns")? as usize;
    let dim = rows * cols;
    let mut pixel_bytes = vec![0u8; n * dim];
    images.read_exact(&mut pixel_bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::Format(format!(
                "truncated image payload: expected {} bytes",
                n * dim
            ))
        } else {
            DatasetError::Io(e)
        }
    })?;

    let mut labels = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut labels, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DatasetError::Format(format!(
            "bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
        )));
    }
    let n_labels = read_u32_be(&mut labels, "label count")? as usize;
    if n_labels != n {
        return Err(DatasetError::Consistency(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    let mut label_bytes = vec![0u8; n];
    labels.read_exact(&mut label_bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::Format(format!("truncated label payload: expected {n} bytes"))
        } else {
            DatasetError::Io(e)
        }
    })?;

    let features = Array2::from_shape_vec(
        (n, dim),
        pixel_bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("shape matches payload length");
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(features, labels, num_classes)
}

/// Write a dataset back out as an IDX pair. `rows * cols` must equal the
/// feature dimension; pixel bytes are recovered as `round(value * 255)`.
pub fn save_idx(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DatasetError> {
    if rows * cols != dataset.dim() {
        return Err(DatasetError::InvalidArgument(format!(
            "{rows}x{cols} does not match feature dimension {}",
            dataset.dim()
        )));
    }
    let mut images = BufWriter::new(File::create(images_path)?);
    images.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    images.write_all(&(dataset.n() as u32).to_be_bytes())?;
    images.write_all(&(rows as u32).to_be_bytes())?;
    images.write_all(&(cols as u32).to_be_bytes())?;
    for &v in dataset.features().iter() {
        images.write_all(&[(v * 255.0).round() as u8])?;
    }
    images.flush()?;

    let mut labels = BufWriter::new(File::create(labels_path)?);
    labels.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    labels.write_all(&(dataset.n() as u32).to_be_bytes())?;
    for &l in dataset.labels() {
        labels.write_all(&[l as u8])?;
    }
    labels.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

fn take_rows(source: &Dataset, range: std::ops::Range<usize>) -> Dataset {
    Dataset {
        features: source.features.slice(ndarray::s![range.clone(), ..]).to_owned(),
        labels: source.labels[range].to_vec(),
        num_classes: source.num_classes,
    }
}

/// Deterministic contiguous split: the first `n_train` rows become the
/// training set, the next `n_val` the validation set, the remainder the test
/// set.
pub fn split(dataset: &Dataset, n_train: usize, n_val: usize) -> Result<DataSplit, DatasetError> {
    let n = dataset.n();
    if n_train + n_val > n {
        return Err(DatasetError::InvalidArgument(format!(
            "split sizes {n_train}+{n_val} exceed {n} datapoints"
        )));
    }
    Ok(DataSplit {
        train: take_rows(dataset, 0..n_train),
        validation: take_rows(dataset, n_train..n_train + n_val),
        test: take_rows(dataset, n_train + n_val..n),
    })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Class-mean coordinate for synthetic clusters: a fixed low-discrepancy
/// pattern inside [0.15, 0.85] so clusters stay separated for small spreads.
fn blob_mean(class: usize, dim: usize) -> f64 {
    const PHI: f64 = 0.618_033_988_749_894_9;
    let t = 0.37 + class as f64 * PHI + dim as f64 * (1.0 - PHI);
    0.15 + 0.7 * t.fract()
}

/// Generate `n` datapoints in `c` Gaussian clusters with per-class fixed
/// means, standard deviation `spread`, clamped to `[0, 1]`. Classes are
/// balanced up to the remainder (`n mod c` extra points go to the lowest
/// class ids) and the result is a pure function of the arguments.
pub fn synthetic_blobs(
    n: usize,
    d: usize,
    c: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if c < 2 || n < c {
        return Err(DatasetError::InvalidArgument(format!(
            "need n >= c >= 2, got n={n}, c={c}"
        )));
    }
    if d < 1 {
        return Err(DatasetError::InvalidArgument("need d >= 1".into()));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(DatasetError::InvalidArgument(format!(
            "spread must be positive and finite, got {spread}"
        )));
    }
    let normal = Normal::new(0.0, spread).expect("validated spread");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % c;
        labels.push(class);
        for j in 0..d {
            let value = blob_mean(class, j) + normal.sample(&mut rng);
            features[[i, j]] = value.clamp(0.0, 1.0);
        }
    }
    Dataset::new(features, labels, c)
}
