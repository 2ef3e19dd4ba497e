//! IDX dataset loading, label-pair task streams and accumulative validation.
//!
//! IDX layout: a 4-byte big-endian magic (`0x00000803` for 3-d image
//! tensors, `0x00000801` for 1-d label vectors), one 4-byte big-endian size
//! per dimension, then the raw unsigned bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images scaled to `[0, 1]`, one flattened image per row.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {l} outside 0..{NUM_CLASSES}")));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.images.cols()
    }

    /// Indices of all samples whose label is in `classes`, ascending.
    pub fn indices_with_labels(&self, classes: &[u8]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn view<'a>(&'a self, indices: &'a [usize], classes: &'a [u8]) -> TaskView<'a> {
        TaskView {
            images: &self.images,
            labels: &self.labels,
            indices,
            classes,
        }
    }

    /// Fraction of `indices` whose argmax prediction is correct.
    pub fn accuracy(&self, indices: &[usize], predictions: &[u8]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let hits = indices
            .iter()
            .zip(predictions)
            .filter(|(&i, &p)| self.labels[i] == p)
            .count();
        hits as f64 / indices.len() as f64
    }
}

/// A subset of a dataset together with the labels that are active for it.
#[derive(Clone, Copy, Debug)]
pub struct TaskView<'a> {
    pub images: &'a Matrix,
    pub labels: &'a [u8],
    pub indices: &'a [usize],
    pub classes: &'a [u8],
}

impl TaskView<'_> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<u8>) {
        let x = self.images.select_rows(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetPair {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetPair {
    /// Loads the four conventionally named IDX files from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        for name in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset file"),
                ));
            }
        }
        let train = load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS), Split::Train)?;
        let test = load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS), Split::Test)?;
        if train.pixels_per_image() != test.pixels_per_image() {
            return Err(Error::Data(format!(
                "train images have {} pixels, test images {}",
                train.pixels_per_image(),
                test.pixels_per_image()
            )));
        }
        Ok(DatasetPair { train, test })
    }
}

/// Reads an IDX image file and its label file into a [`Dataset`].
/// Pixels are divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let (count, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::Data(format!(
            "{} holds {count} images but {} holds {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Matrix::from_vec(count, rows * cols, data)?;
    Dataset::new(images, labels, split).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", labels_path.display())),
        other => other,
    })
}

/// Returns `(count, rows, cols, raw pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dims = parse_header(path, &bytes, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = body(path, &bytes, 16, count * rows * cols)?;
    Ok((count, rows, cols, body.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dims = parse_header(path, &bytes, LABEL_MAGIC, 1)?;
    Ok(body(path, &bytes, 8, dims[0])?.to_vec())
}

fn parse_header(path: &Path, bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * ndims;
    if bytes.len() >= 4 {
        let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        if found != magic {
            return Err(Error::Data(format!(
                "{}: bad IDX magic {found:#010x}, expected {magic:#010x}",
                path.display()
            )));
        }
    }
    if bytes.len() < header_len {
        return Err(Error::Data(format!(
            "{}: truncated IDX header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    Ok((0..ndims).map(|d| word(4 + 4 * d) as usize).collect())
}

fn body<'a>(path: &Path, bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    let available = bytes.len() - offset;
    if available != len {
        return Err(Error::Data(format!(
            "{}: header announces {len} data bytes but file has {available}{}",
            path.display(),
            if available < len { " (truncated)" } else { "" }
        )));
    }
    Ok(&bytes[offset..])
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per_image = rows * cols;
    if per_image == 0 || pixels.len() % per_image != 0 {
        return Err(Error::Data(format!(
            "{} pixels do not split into {rows}x{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [pixels.len() / per_image, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The four conventional file paths under `dir`.
pub fn conventional_paths(dir: &Path) -> [PathBuf; 4] {
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS].map(|n| dir.join(n))
}

/// One incremental task: a label group plus its train and validation samples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    pub labels: Vec<u8>,
    /// Indices into the train split.
    pub train: Vec<usize>,
    /// Indices into the test split.
    pub validation: Vec<usize>,
}

pub fn sequential_label_order() -> Vec<u8> {
    (0..NUM_CLASSES as u8).collect()
}

pub fn random_label_order(rng: &mut Rng) -> Vec<u8> {
    rng.permutation(NUM_CLASSES).into_iter().map(|c| c as u8).collect()
}

/// Cuts `label_order` into consecutive groups of `group_size` labels.
pub fn make_task_stream(data: &DatasetPair, label_order: &[u8], group_size: usize) -> Result<Vec<TaskSpec>> {
    let mut seen = [false; NUM_CLASSES];
    for &l in label_order {
        if l as usize >= NUM_CLASSES || std::mem::replace(&mut seen[l as usize], true) {
            return Err(Error::Config(format!(
                "label order {label_order:?} is not a permutation of 0..{NUM_CLASSES}"
            )));
        }
    }
    if label_order.len() != NUM_CLASSES {
        return Err(Error::Config(format!(
            "label order {label_order:?} is not a permutation of 0..{NUM_CLASSES}"
        )));
    }
    if group_size == 0 || NUM_CLASSES % group_size != 0 {
        return Err(Error::Config(format!(
            "cannot split {NUM_CLASSES} labels into groups of {group_size}"
        )));
    }
    Ok(label_order
        .chunks(group_size)
        .enumerate()
        .map(|(index, labels)| TaskSpec {
            index,
            labels: labels.to_vec(),
            train: data.train.indices_with_labels(labels),
            validation: data.test.indices_with_labels(labels),
        })
        .collect())
}

/// Union of the validation samples of every task learned so far.
#[derive(Clone, Debug, Default)]
pub struct AccumulativeValidation {
    indices: Vec<usize>,
    labels: Vec<u8>,
    tasks: Vec<usize>,
}

impl AccumulativeValidation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, task: &TaskSpec) -> Result<()> {
        if self.tasks.contains(&task.index) {
            return Err(Error::State(format!(
                "task {} is already part of the accumulative validation set",
                task.index
            )));
        }
        if let Some(l) = task.labels.iter().find(|l| self.labels.contains(l)) {
            return Err(Error::State(format!(
                "label {l} of task {} was already accumulated",
                task.index
            )));
        }
        self.tasks.push(task.index);
        self.labels.extend_from_slice(&task.labels);
        self.indices.extend_from_slice(&task.validation);
        self.indices.sort_unstable();
        Ok(())
    }

    /// Sorted test-split indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn fixture(dir: &Path, pixels: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
        let img = dir.join("img");
        let lab = dir.join("lab");
        write_idx_images(&img, 2, 2, pixels).unwrap();
        write_idx_labels(&lab, labels).unwrap();
        (img, lab)
    }

    fn synthetic_pair(per_class_train: usize, per_class_test: usize) -> DatasetPair {
        let make = |per: usize, split| {
            let labels: Vec<u8> = (0..per * NUM_CLASSES).map(|i| (i % NUM_CLASSES) as u8).collect();
            let images = Matrix::zeros(labels.len(), 4);
            Dataset::new(images, labels, split).unwrap()
        };
        DatasetPair {
            train: make(per_class_train, Split::Train),
            test: make(per_class_test, Split::Test),
        }
    }

    #[test]
    fn normalization_endpoints() {
        let tmp = TempDir::new().unwrap();
        let (img, lab) = fixture(tmp.path(), &[0, 255, 0, 255, 255, 0, 255, 0], &[3, 7]);
        let ds = load_idx(&img, &lab, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), (2, 4));
        assert_eq!(ds.images.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(ds.images.row(1), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.labels, vec![3, 7]);
    }

    #[test]
    fn count_mismatch_is_a_load_error() {
        let tmp = TempDir::new().unwrap();
        let (img, lab) = fixture(tmp.path(), &[0; 8], &[1, 2, 3]);
        match load_idx(&img, &lab, Split::Train) {
            Err(Error::Data(msg)) => assert!(msg.contains("2 images"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let tmp = TempDir::new().unwrap();
        let (img, lab) = fixture(tmp.path(), &[0; 8], &[1, 2]);
        // labels file where images are expected
        assert!(matches!(load_idx(&lab, &lab, Split::Train), Err(Error::Data(m)) if m.contains("magic")));

        let mut bytes = fs::read(&img).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&img, &bytes).unwrap();
        assert!(matches!(load_idx(&img, &lab, Split::Train), Err(Error::Data(m)) if m.contains("truncated")));

        fs::write(&img, [0u8, 0, 8]).unwrap();
        assert!(matches!(load_idx(&img, &lab, Split::Train), Err(Error::Data(m)) if m.contains("header")));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let tmp = TempDir::new().unwrap();
        let (img, lab) = fixture(tmp.path(), &[0; 8], &[1, 12]);
        assert!(matches!(load_idx(&img, &lab, Split::Train), Err(Error::Data(_))));
    }

    #[test]
    fn missing_directory_names_the_file() {
        let err = DatasetPair::load_dir("/definitely/not/here").unwrap_err();
        assert!(err.to_string().contains(TRAIN_IMAGES), "{err}");
    }

    #[test]
    fn identity_order_gives_consecutive_pairs() {
        let data = synthetic_pair(3, 2);
        let tasks = make_task_stream(&data, &sequential_label_order(), 2).unwrap();
        let labels: Vec<Vec<u8>> = tasks.iter().map(|t| t.labels.clone()).collect();
        assert_eq!(labels, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]);
        assert_eq!(tasks[1].train.len(), 6);
        assert_eq!(tasks[1].validation.len(), 4);
    }

    #[test]
    fn invalid_orders_are_rejected() {
        let data = synthetic_pair(1, 1);
        assert!(make_task_stream(&data, &[0, 1, 2], 2).is_err());
        assert!(make_task_stream(&data, &[0, 0, 2, 3, 4, 5, 6, 7, 8, 9], 2).is_err());
        assert!(make_task_stream(&data, &sequential_label_order(), 3).is_err());
    }

    #[test]
    fn seeded_order_repeats() {
        assert_eq!(
            random_label_order(&mut Rng::new(5)),
            random_label_order(&mut Rng::new(5))
        );
    }

    #[test]
    fn accumulating_twice_fails() {
        let data = synthetic_pair(2, 2);
        let tasks = make_task_stream(&data, &sequential_label_order(), 2).unwrap();
        let mut acc = AccumulativeValidation::new();
        acc.accumulate(&tasks[0]).unwrap();
        assert_eq!(acc.len(), 4);
        assert!(acc.accumulate(&tasks[0]).is_err());
        for t in &tasks[1..] {
            acc.accumulate(t).unwrap();
        }
        assert_eq!(acc.indices(), (0..20).collect::<Vec<_>>().as_slice());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn any_order_partitions_the_train_split(seed in any::<u64>()) {
                let data = synthetic_pair(4, 1);
                let order = random_label_order(&mut crate::linalg::Rng::new(seed));
                let tasks = make_task_stream(&data, &order, 2).unwrap();
                let mut all: Vec<usize> = tasks.iter().flat_map(|t| t.train.iter().copied()).collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..data.train.len()).collect::<Vec<_>>());
            }
        }
    }
}
