//! Datasets: loading, generation, and feature standardization.
//!
//! Three sources are supported: the classic big-endian IDX image/label pair,
//! a plain CSV with the label in the last column, and a deterministic
//! synthetic Gaussian-blob generator used for desk-scale experiments.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Labeled samples with a shared shape: `inputs` is `[n, ...sample]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::Data(format!(
                "inputs must be [n, ...sample], got shape {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::Data(format!(
                "need at least 2 classes, got {class_count}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} is outside the {class_count} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, without the leading sample axis.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Collects the given sample indices into a batch tensor and label list.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Usage("cannot gather an empty batch".into()));
        }
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }
}

/// Deterministic Gaussian blobs, one cluster per class.
///
/// Cluster centres are the standard basis vectors when `classes <= dim`,
/// otherwise points on the unit circle in the first two feature dimensions.
/// Samples are drawn class-major; the first `train_per_class` of each class
/// form the training split and the remaining `test_per_class` the test split,
/// so both splits come from one deterministic stream.
pub fn synth_blobs(
    seed: u64,
    classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Param(format!(
            "synthetic data needs at least 2 classes, got {classes}"
        )));
    }
    if dim < 2 {
        return Err(Error::Param(format!(
            "synthetic data needs at least 2 feature dimensions, got {dim}"
        )));
    }
    if train_per_class == 0 || test_per_class == 0 {
        return Err(Error::Param(
            "both splits need at least one sample per class".into(),
        ));
    }
    if !(spread > 0.0) {
        return Err(Error::Param(format!(
            "cluster spread must be positive, got {spread}"
        )));
    }
    let mut centers = vec![vec![0.0; dim]; classes];
    if classes <= dim {
        for (c, center) in centers.iter_mut().enumerate() {
            center[c] = 1.0;
        }
    } else {
        for (c, center) in centers.iter_mut().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            center[0] = angle.cos();
            center[1] = angle.sin();
        }
    }
    let mut rng = SeededRng::new(seed);
    let per_class = train_per_class + test_per_class;
    let mut train_data = Vec::with_capacity(classes * train_per_class * dim);
    let mut test_data = Vec::with_capacity(classes * test_per_class * dim);
    let mut train_labels = Vec::with_capacity(classes * train_per_class);
    let mut test_labels = Vec::with_capacity(classes * test_per_class);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..per_class {
            let dst = if s < train_per_class {
                train_labels.push(c);
                &mut train_data
            } else {
                test_labels.push(c);
                &mut test_data
            };
            for &coord in center {
                dst.push(coord + spread * rng.next_gauss());
            }
        }
    }
    let train = Dataset::new(
        Tensor::from_vec(&[classes * train_per_class, dim], train_data)?,
        train_labels,
        classes,
    )?;
    let test = Dataset::new(
        Tensor::from_vec(&[classes * test_per_class, dim], test_data)?,
        test_labels,
        classes,
    )?;
    Ok((train, test))
}

/// Loads a CSV of `f1,f2,...,fK,label` rows. Blank lines are skipped; every
/// parse failure reports its 1-based line number.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut features: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = no + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Data(format!(
                "{}:{lineno}: need at least one feature and a label",
                path.display()
            )));
        }
        match width {
            None => width = Some(fields.len() - 1),
            Some(w) if w != fields.len() - 1 => {
                return Err(Error::Data(format!(
                    "{}:{lineno}: row has {} features, previous rows have {w}",
                    path.display(),
                    fields.len() - 1
                )));
            }
            _ => {}
        }
        for f in &fields[..fields.len() - 1] {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{lineno}: cannot parse feature value {f:?}",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}:{lineno}: non-finite feature value {f:?}",
                    path.display()
                )));
            }
            features.push(v);
        }
        let label_field = fields[fields.len() - 1].trim();
        let label: usize = label_field.parse().map_err(|_| {
            Error::Data(format!(
                "{}:{lineno}: cannot parse label {label_field:?} as a class index",
                path.display()
            ))
        })?;
        labels.push(label);
    }
    let width = width.ok_or_else(|| {
        Error::Data(format!("{}: no data rows", path.display()))
    })?;
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::from_vec(&[labels.len(), width], features)?,
        labels,
        classes.max(2),
    )
}

/// Writes a dataset with flat `[n, F]` samples as CSV rows.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.sample_shape().len() != 1 {
        return Err(Error::Data(format!(
            "CSV export needs flat [n, F] samples, got sample shape {:?}",
            ds.sample_shape()
        )));
    }
    let width = ds.sample_shape()[0];
    let mut out = BufWriter::new(File::create(path)?);
    for (i, &label) in ds.labels.iter().enumerate() {
        for v in &ds.inputs.data()[i * width..(i + 1) * width] {
            write!(out, "{v},")?;
        }
        writeln!(out, "{label}")?;
    }
    out.flush()?;
    Ok(())
}

const IDX_IMAGES_DIMS: u8 = 3;
const IDX_LABELS_DIMS: u8 = 1;
const IDX_U8: u8 = 0x08;

/// Loads a big-endian IDX image/label pair. Pixels are scaled to `[0, 1]`
/// and samples get an explicit single channel: `[n, 1, rows, cols]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (img_dims, img_payload) = read_idx_file(images, IDX_IMAGES_DIMS)?;
    let (lbl_dims, lbl_payload) = read_idx_file(labels, IDX_LABELS_DIMS)?;
    let (n, rows, cols) = (img_dims[0], img_dims[1], img_dims[2]);
    if lbl_dims[0] != n {
        return Err(Error::Data(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            lbl_dims[0]
        )));
    }
    let data: Vec<f64> = img_payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels_vec: Vec<usize> = lbl_payload.iter().map(|&b| b as usize).collect();
    let classes = labels_vec.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::from_vec(&[n, 1, rows, cols], data)?,
        labels_vec,
        classes.max(2),
    )
}

/// Writes a dataset with `[n, 1, rows, cols]` samples in `[0, 1]` as an IDX
/// image/label pair, quantizing pixels to bytes.
pub fn write_idx(images: &Path, labels: &Path, ds: &Dataset) -> Result<()> {
    let [channels, rows, cols] = ds.sample_shape()[..] else {
        return Err(Error::Data(format!(
            "IDX export needs [n, 1, rows, cols] samples, got sample shape {:?}",
            ds.sample_shape()
        )));
    };
    if channels != 1 {
        return Err(Error::Data(format!(
            "IDX export supports a single channel, got {channels}"
        )));
    }
    if ds.class_count > 256 {
        return Err(Error::Data(format!(
            "IDX labels are bytes; {} classes do not fit",
            ds.class_count
        )));
    }
    let mut pixels = Vec::with_capacity(ds.inputs.len());
    for &v in ds.inputs.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!(
                "IDX export needs pixel values in [0, 1], got {v}"
            )));
        }
        pixels.push((v * 255.0).round() as u8);
    }
    write_idx_file(
        images,
        IDX_U8,
        &[ds.len() as u32, rows as u32, cols as u32],
        &pixels,
    )?;
    let bytes: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    write_idx_file(labels, IDX_U8, &[ds.len() as u32], &bytes)?;
    Ok(())
}

fn read_idx_file(path: &Path, want_dims: u8) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("{}: cannot read magic: {e}", path.display())))?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::Data(format!(
            "{}: not an IDX file (magic starts {:02x}{:02x})",
            path.display(),
            magic[0],
            magic[1]
        )));
    }
    if magic[2] != IDX_U8 {
        return Err(Error::Data(format!(
            "{}: unsupported element type 0x{:02x}, expected unsigned bytes",
            path.display(),
            magic[2]
        )));
    }
    if magic[3] != want_dims {
        return Err(Error::Data(format!(
            "{}: has {} dimensions, expected {want_dims}",
            path.display(),
            magic[3]
        )));
    }
    let mut dims = Vec::with_capacity(want_dims as usize);
    for _ in 0..want_dims {
        let mut buf = [0u8; 4];
        file.read_exact(&mut buf)
            .map_err(|e| Error::Data(format!("{}: truncated header: {e}", path.display())))?;
        dims.push(u32::from_be_bytes(buf) as usize);
    }
    let expected: usize = dims.iter().product();
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Data(format!(
            "{}: payload has {} bytes, header promises {expected}",
            path.display(),
            payload.len()
        )));
    }
    Ok((dims, payload))
}

fn write_idx_file(path: &Path, dtype: u8, dims: &[u32], payload: &[u8]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&[0, 0, dtype, dims.len() as u8])?;
    for &d in dims {
        out.write_all(&d.to_be_bytes())?;
    }
    out.write_all(payload)?;
    out.flush()?;
    Ok(())
}

/// Per-feature mean and population standard deviation over a dataset,
/// computed on the flattened sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn feature_stats(ds: &Dataset) -> Result<FeatureStats> {
    let per: usize = ds.sample_shape().iter().product();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; per];
    for sample in ds.inputs.data().chunks(per) {
        for (m, &v) in mean.iter_mut().zip(sample) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; per];
    for sample in ds.inputs.data().chunks(per) {
        for ((s, &v), &m) in var.iter_mut().zip(sample).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std = var.iter().map(|&s| (s / n).sqrt()).collect();
    Ok(FeatureStats { mean, std })
}

/// Standardizes every feature in place: `(x - mean) / std`. Features whose
/// training-split deviation is zero carry no information and become 0.
pub fn apply_standardize(ds: &mut Dataset, stats: &FeatureStats) -> Result<()> {
    let per: usize = ds.sample_shape().iter().product();
    if stats.mean.len() != per || stats.std.len() != per {
        return Err(Error::Shape(format!(
            "standardization stats cover {} features, samples have {per}",
            stats.mean.len()
        )));
    }
    for sample in ds.inputs.data_mut().chunks_mut(per) {
        for ((v, &m), &s) in sample.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = if s == 0.0 { 0.0 } else { (*v - m) / s };
        }
    }
    Ok(())
}
