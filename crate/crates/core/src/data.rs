//! Datasets and their ingestion: CSV and IDX loaders, synthetic Gaussian-blob
//! generation, and the distinctness-restoring jitter perturbation.
//!
//! Labels are 1-based throughout (`y_i ∈ {1..m}`), matching the convention
//! used by the loss and report modules. Feature matrices are plain dense
//! [`Matrix`] values, one sample per row.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A labelled training set: `N × d` features plus 1-based class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<usize>,
    m: usize,
    provenance: String,
}

impl Dataset {
    /// Wraps features and labels, validating label range and shape agreement.
    pub fn new(x: Matrix, y: Vec<usize>, m: usize, provenance: impl Into<String>) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::InvalidInput(
                "dataset needs at least one sample and one feature".into(),
            ));
        }
        if y.len() != x.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if m == 0 {
            return Err(Error::InvalidInput("class count m must be ≥ 1".into()));
        }
        if let Some((i, &label)) = y.iter().enumerate().find(|(_, &l)| l < 1 || l > m) {
            return Err(Error::InvalidInput(format!(
                "label {label} of sample {i} outside 1..={m}"
            )));
        }
        Ok(Self {
            x,
            y,
            m,
            provenance: provenance.into(),
        })
    }

    /// Number of samples `N`.
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// Input dimension `d`.
    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// Number of classes `m`.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Feature matrix, one sample per row.
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    /// 1-based labels.
    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    /// Human-readable description of where the data came from.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Features of sample `i` together with its label.
    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.x.row(i), self.y[i])
    }

    /// One-hot target matrix `Y` (`N × m`, rows summing to 1).
    pub fn one_hot(&self) -> Matrix {
        let mut y = Matrix::zeros(self.n(), self.m);
        for (i, &label) in self.y.iter().enumerate() {
            y.set(i, label - 1, 1.0);
        }
        y
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::InvalidInput(
                "subset needs at least one index".into(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidInput(format!(
                "subset index {bad} out of range for {} samples",
                self.n()
            )));
        }
        let x = Matrix::from_fn(indices.len(), self.d(), |i, j| self.x.get(indices[i], j))?;
        let y = indices.iter().map(|&i| self.y[i]).collect();
        Dataset::new(
            x,
            y,
            self.m,
            format!("{} [subset of {}]", self.provenance, indices.len()),
        )
    }

    /// Splits into the first `n_first` samples and the rest.
    pub fn split(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        if n_first == 0 || n_first >= self.n() {
            return Err(Error::InvalidInput(format!(
                "split point {n_first} must lie strictly inside 1..{}",
                self.n()
            )));
        }
        let head: Vec<usize> = (0..n_first).collect();
        let tail: Vec<usize> = (n_first..self.n()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// True when all sample rows are pairwise distinct under exact
    /// floating-point comparison.
    pub fn rows_distinct(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.n());
        for i in 0..self.n() {
            if !seen.insert(row_key(self.x.row(i))) {
                return false;
            }
        }
        true
    }
}

/// Bit-pattern key for exact row comparison. Adding `0.0` first folds `-0.0`
/// into `+0.0` so the key agrees with `==` on floats (data is NaN-free by the
/// `Matrix` construction invariant).
pub(crate) fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|&v| (v + 0.0).to_bits()).collect()
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Loads a CSV dataset: every row is `d` real features followed by one
/// 1-based integer label. The class count is inferred as the largest label.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Parse(format!(
                "{}: line {}: expected at least one feature and a label, found {} field(s)",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Parse(format!(
                    "{}: line {}: {} fields, expected {} as in the first row",
                    path.display(),
                    lineno + 1,
                    fields.len(),
                    w
                )));
            }
            _ => {}
        }
        let mut feats = Vec::with_capacity(fields.len() - 1);
        for f in &fields[..fields.len() - 1] {
            let v: f64 = f.parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: line {}: cannot parse feature {f:?} as a real number",
                    path.display(),
                    lineno + 1
                ))
            })?;
            feats.push(v);
        }
        let label_str = fields[fields.len() - 1];
        let label: usize = label_str.parse().map_err(|_| {
            Error::Parse(format!(
                "{}: line {}: cannot parse label {label_str:?} as a positive integer",
                path.display(),
                lineno + 1
            ))
        })?;
        if label == 0 {
            return Err(Error::Parse(format!(
                "{}: line {}: labels are 1-based, found 0",
                path.display(),
                lineno + 1
            )));
        }
        rows.push(feats);
        labels.push(label);
    }

    if rows.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no data rows found",
            path.display()
        )));
    }
    let m = *labels.iter().max().expect("nonempty");
    let x = Matrix::from_rows(&rows)?;
    Dataset::new(x, labels, m, format!("csv:{}", path.display()))
}

/// Saves a dataset in the CSV layout read by [`load_csv`]. Features use
/// shortest-round-trip formatting, so a save/load cycle is bit-exact.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for i in 0..dataset.n() {
        let (row, label) = dataset.sample(i);
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Parse(format!(
            "{}: truncated while reading {what} at byte {offset} (file has {} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image file (magic `0x00000803`): returns the flattened
/// `count × (rows·cols)` matrix with pixels scaled from `u8` into `[0,1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, "magic", path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse(format!(
            "{}: bad IDX image magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGES_MAGIC:08x}",
            path.display()
        )));
    }
    let count = read_be_u32(&bytes, 4, "image count", path)? as usize;
    let rows = read_be_u32(&bytes, 8, "row count", path)? as usize;
    let cols = read_be_u32(&bytes, 12, "column count", path)? as usize;
    let pixels = count * rows * cols;
    if bytes.len() != 16 + pixels {
        return Err(Error::Parse(format!(
            "{}: expected {} pixel bytes after the 16-byte header, found {}",
            path.display(),
            pixels,
            bytes.len().saturating_sub(16)
        )));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::new(count, rows * cols, data)
}

/// Loads an IDX label file (magic `0x00000801`): returns raw `u8` labels.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, "magic", path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse(format!(
            "{}: bad IDX label magic 0x{magic:08x} at byte 0, expected 0x{IDX_LABELS_MAGIC:08x}",
            path.display()
        )));
    }
    let count = read_be_u32(&bytes, 4, "label count", path)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::Parse(format!(
            "{}: expected {count} label bytes after the 8-byte header, found {}",
            path.display(),
            bytes.len().saturating_sub(8)
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an IDX image/label pair into a dataset. Raw labels are shifted to
/// the 1-based convention (`0 → 1`), and the class count is the largest
/// shifted label.
pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let images = images.as_ref();
    let labels_path = labels.as_ref();
    let x = load_idx_images(images)?;
    let raw = load_idx_labels(labels_path)?;
    if raw.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            x.rows(),
            raw.len()
        )));
    }
    let y: Vec<usize> = raw.iter().map(|&l| l as usize + 1).collect();
    let m = *y.iter().max().expect("nonempty");
    Dataset::new(
        x,
        y,
        m,
        format!("idx:{}+{}", images.display(), labels_path.display()),
    )
}

// ---------------------------------------------------------------------------
// Synthesis and jitter
// ---------------------------------------------------------------------------

/// Synthetic Gaussian-blob dataset: one unit-variance blob per class, class
/// means at `separation × (random unit vector)`, labels assigned round-robin.
/// Samples are guaranteed pairwise distinct (resampled on exact collision).
pub fn synth_dataset(n: usize, d: usize, m: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if m == 0 || d == 0 {
        return Err(Error::InvalidInput("need d ≥ 1 and m ≥ 1".into()));
    }
    if n < m {
        return Err(Error::InvalidInput(format!(
            "need at least one sample per class: n = {n} < m = {m}"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "separation must be a finite nonnegative real, got {separation}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut means = Vec::with_capacity(m);
    for _ in 0..m {
        let mut dir: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut dir {
                *v *= separation / norm;
            }
        }
        means.push(dir);
    }

    let mut seen = HashSet::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % m;
        let mut attempts = 0;
        let row = loop {
            let row: Vec<f64> = means[class]
                .iter()
                .map(|&mu| mu + rng.sample::<f64, _>(StandardNormal))
                .collect();
            if seen.insert(row_key(&row)) {
                break row;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::DegenerateData(format!(
                    "could not draw a distinct sample after 1000 attempts (sample {i})"
                )));
            }
        };
        data.extend_from_slice(&row);
        labels.push(class + 1);
    }

    Dataset::new(
        Matrix::new(n, d, data)?,
        labels,
        m,
        format!("synth(n={n},d={d},m={m},sep={separation},seed={seed})"),
    )
}

/// Adds independent uniform noise in `[−magnitude, magnitude]` to every
/// coordinate, leaving labels untouched. Returns the perturbed dataset plus
/// a flag saying whether all rows came out pairwise distinct (the perturbed
/// form of the distinct-patch requirement; true with probability 1 for any
/// positive magnitude).
pub fn jitter(dataset: &Dataset, magnitude: f64, seed: u64) -> Result<(Dataset, bool)> {
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "jitter magnitude must be a positive finite real, got {magnitude}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = dataset.x().clone();
    for v in x.data_mut() {
        *v += rng.random_range(-magnitude..=magnitude);
    }
    let jittered = Dataset::new(
        x,
        dataset.labels().to_vec(),
        dataset.m(),
        format!("{} +jitter({magnitude},seed={seed})", dataset.provenance()),
    )?;
    let distinct = jittered.rows_distinct();
    Ok((jittered, distinct))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rows_sum_to_one_at_label_position() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let ds = Dataset::new(x, vec![2, 1, 3], 3, "test").unwrap();
        let y = ds.one_hot();
        for i in 0..3 {
            let sum: f64 = y.row(i).iter().sum();
            assert_eq!(sum, 1.0);
            assert_eq!(y.get(i, ds.labels()[i] - 1), 1.0);
        }
    }

    #[test]
    fn dataset_rejects_bad_labels_and_shapes() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(
            Dataset::new(x.clone(), vec![1, 4], 3, "t").unwrap_err(),
            Error::InvalidInput(_)
        ));
        assert!(matches!(
            Dataset::new(x.clone(), vec![1, 0], 3, "t").unwrap_err(),
            Error::InvalidInput(_)
        ));
        assert!(matches!(
            Dataset::new(x, vec![1], 3, "t").unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn csv_parses_the_two_row_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        std::fs::write(&path, "0,0,1\n1,1,2\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.m(), 2);
        assert_eq!(ds.labels(), &[1, 2]);
        assert_eq!(ds.x().row(1), &[1.0, 1.0]);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        // Awkward values on purpose: subnormal-ish, negative zero, long
        // fractions — shortest-round-trip formatting must restore all bits.
        let x = Matrix::from_rows(&[
            vec![0.1, 1e-300, -0.0],
            vec![2.0 / 3.0, -1.2345678901234567, 1e17],
        ])
        .unwrap();
        let ds = Dataset::new(x, vec![1, 2], 2, "t").unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.x().data(), ds.x().data());
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,0,1\n1,oops,2\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("line 2"), "message was: {msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "0,0,0\n").unwrap();
        let err = load_csv(&path).unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("1-based"), "message was: {msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn write_idx_fixture(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // Three 2×2 images with pixel values 0..11 and labels 0, 1, 2.
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend((0u8..12).collect::<Vec<u8>>());
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&3u32.to_be_bytes());
        lab.extend_from_slice(&[0u8, 1, 2]);
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_pair_loads_scaled_pixels_and_shifted_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_fixture(dir.path());
        let ds = load_idx_pair(&ip, &lp).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.d(), 4);
        assert_eq!(ds.m(), 3);
        assert_eq!(ds.labels(), &[1, 2, 3]);
        assert_eq!(ds.x().get(0, 1), 1.0 / 255.0);
        assert_eq!(ds.x().get(2, 3), 11.0 / 255.0);
    }

    #[test]
    fn idx_rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_fixture(dir.path());
        let err = load_idx_images(&lp).unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("magic"), "message was: {msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 1);
        let tp = dir.path().join("trunc.idx");
        std::fs::write(&tp, bytes).unwrap();
        assert!(matches!(load_idx_images(&tp).unwrap_err(), Error::Parse(_)));
    }

    #[test]
    fn synth_is_deterministic_and_distinct() {
        let a = synth_dataset(100, 3, 4, 0.0, 7).unwrap();
        let b = synth_dataset(100, 3, 4, 0.0, 7).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.labels(), b.labels());
        assert!(a.rows_distinct());
        // Round-robin labelling balances classes.
        for class in 1..=4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == class).count(), 25);
        }
        assert!(matches!(
            synth_dataset(3, 2, 4, 1.0, 0).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    #[test]
    fn synth_separates_class_means_when_asked() {
        let ds = synth_dataset(400, 5, 2, 50.0, 3).unwrap();
        // With separation 50 and unit blobs, per-class means are far apart.
        let mut mean = vec![vec![0.0; 5]; 2];
        let mut count = [0usize; 2];
        for i in 0..ds.n() {
            let (row, label) = ds.sample(i);
            count[label - 1] += 1;
            for (acc, v) in mean[label - 1].iter_mut().zip(row) {
                *acc += v;
            }
        }
        for (c, row) in mean.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v /= count[c] as f64;
            }
        }
        let dist: f64 = mean[0]
            .iter()
            .zip(&mean[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 25.0, "class means only {dist} apart");
    }

    #[test]
    fn jitter_bounds_noise_and_preserves_labels() {
        let ds = synth_dataset(30, 4, 3, 1.0, 11).unwrap();
        let (jit, distinct) = jitter(&ds, 1e-3, 5).unwrap();
        assert!(distinct);
        assert_eq!(jit.labels(), ds.labels());
        let max_move = jit
            .x()
            .data()
            .iter()
            .zip(ds.x().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max_move <= 1e-3);
        assert!(matches!(
            jitter(&ds, 0.0, 5).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    #[test]
    fn jitter_restores_distinctness_of_duplicated_samples() {
        // Duplicate every row, then jitter: distinct in all 100 seeds.
        let base = synth_dataset(10, 3, 2, 1.0, 2).unwrap();
        let doubled_rows: Vec<usize> = (0..10).chain(0..10).collect();
        let doubled = base.subset(&doubled_rows).unwrap();
        assert!(!doubled.rows_distinct());
        for seed in 0..100 {
            let (_, distinct) = jitter(&doubled, 1e-9, seed).unwrap();
            assert!(distinct, "seed {seed} left duplicate rows");
        }
    }

    #[test]
    fn subset_and_split_preserve_content() {
        let ds = synth_dataset(10, 2, 2, 1.0, 1).unwrap();
        let (head, tail) = ds.split(4).unwrap();
        assert_eq!(head.n(), 4);
        assert_eq!(tail.n(), 6);
        assert_eq!(head.x().row(0), ds.x().row(0));
        assert_eq!(tail.x().row(0), ds.x().row(4));
        assert_eq!(tail.labels()[0], ds.labels()[4]);
        assert!(ds.split(0).is_err());
        assert!(ds.subset(&[10]).is_err());
    }
}
