//! Labelled feature datasets: a synthetic two-Gaussian generator and a
//! plain CSV reader.
//!
//! CSV layout: header `f0,…,f{d-1},label`, one example per row, integer
//! labels in `{0, 1}`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BilevelError, Result};
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(BilevelError::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `range` as a new split.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let rows: Vec<Vec<T>> = range.clone().map(|i| self.features.row(i).to_vec()).collect();
        let features = if rows.is_empty() {
            Matrix::zeros(0, self.dim())
        } else {
            Matrix::from_rows(&rows).expect("rows share a width")
        };
        Self {
            features,
            labels: self.labels[range].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub train: Split<T>,
    pub val: Split<T>,
    pub test: Split<T>,
}

/// Two isotropic unit-variance Gaussian blobs centred at `±(separation/2)·u`
/// for a random unit vector `u`; labels are fair coin flips.
pub fn synth_gaussian_dataset<T: Scalar>(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if n_train == 0 || n_val == 0 || n_test == 0 || d == 0 {
        return Err(BilevelError::InvalidArgument(
            "dataset sizes and dimension must be ≥ 1".into(),
        ));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(BilevelError::InvalidArgument(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = linalg::standard_normal(&mut rng, d);
    let dir = linalg::scale(1.0 / linalg::norm(&dir), &dir);
    let mut draw = |n: usize| -> Split<T> {
        let mut labels = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let label = usize::from(rng.random_bool(0.5));
            let sign = if label == 1 { 0.5 } else { -0.5 };
            let noise: Vec<f64> = linalg::standard_normal(&mut rng, d);
            let row = linalg::axpy(&noise, sign * separation, &dir);
            rows.push(row.into_iter().map(T::lit).collect::<Vec<T>>());
            labels.push(label);
        }
        Split {
            features: Matrix::from_rows(&rows).expect("rows share a width"),
            labels,
        }
    };
    let train = draw(n_train);
    let val = draw(n_val);
    let test = draw(n_test);
    Ok(Dataset { train, val, test })
}

/// Reads `f0,…,f{d-1},label` rows.
pub fn read_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<Split<T>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| BilevelError::InvalidArgument(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| BilevelError::InvalidArgument(format!("{}: {e}", path.display())))?
        .clone();
    let d = headers.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
        BilevelError::InvalidArgument(format!("{}: need at least one feature column", path.display()))
    })?;
    for (j, h) in headers.iter().take(d).enumerate() {
        if h.trim() != format!("f{j}") {
            return Err(BilevelError::InvalidArgument(format!(
                "{}: expected header f{j}, found {h:?}",
                path.display()
            )));
        }
    }
    if headers.get(d).map(str::trim) != Some("label") {
        return Err(BilevelError::InvalidArgument(format!(
            "{}: last column must be named label",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| BilevelError::InvalidArgument(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| {
            BilevelError::InvalidArgument(format!("{}: row {}: {what}", path.display(), line + 2))
        };
        let row = (0..d)
            .map(|j| {
                rec.get(j)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| bad(&format!("feature f{j} is not a finite number")))
            })
            .collect::<Result<Vec<T>>>()?;
        let label: usize = rec
            .get(d)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("label is not a nonnegative integer"))?;
        if label > 1 {
            return Err(bad("only binary labels 0/1 are supported"));
        }
        rows.push(row);
        labels.push(label);
    }
    let features = if rows.is_empty() {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&rows)?
    };
    Split::new(features, labels)
}

/// Splits one labelled file into consecutive train / validation / test blocks.
pub fn dataset_from_csv<T: Scalar>(path: impl AsRef<Path>, n_train: usize, n_val: usize) -> Result<Dataset<T>> {
    let all = read_csv(path)?;
    if n_train + n_val >= all.len() {
        return Err(BilevelError::InvalidArgument(format!(
            "file has {} rows; need more than n_train + n_val = {}",
            all.len(),
            n_train + n_val
        )));
    }
    Ok(Dataset {
        train: all.slice(0..n_train),
        val: all.slice(n_train..n_train + n_val),
        test: all.slice(n_train + n_val..all.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn zero_train_is_an_error() {
        assert!(synth_gaussian_dataset::<f64>(0, 5, 5, 2, 1.0, 0).is_err());
        assert!(synth_gaussian_dataset::<f64>(5, 5, 5, 2, 0.0, 0).is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let a = synth_gaussian_dataset::<f64>(20, 10, 10, 3, 2.0, 42).unwrap();
        let b = synth_gaussian_dataset::<f64>(20, 10, 10, 3, 2.0, 42).unwrap();
        assert_eq!(a, b);
        let c = synth_gaussian_dataset::<f64>(20, 10, 10, 3, 2.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        let mut f = std::fs::File::create(&good).unwrap();
        writeln!(f, "f0,f1,label\n0.5,-1,1\n2,3.25,0\n1,1,1").unwrap();
        let split = read_csv::<f64>(&good).unwrap();
        assert_eq!(split.labels, vec![1, 0, 1]);
        assert_eq!(split.features.row(1), &[2.0, 3.25]);
        let ds = dataset_from_csv::<f64>(&good, 1, 1).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (1, 1, 1));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "f0,label\n0.5,3\n").unwrap();
        assert!(read_csv::<f64>(&bad).is_err());
        let bad_header = dir.path().join("hdr.csv");
        std::fs::write(&bad_header, "a,label\n0.5,1\n").unwrap();
        assert!(read_csv::<f64>(&bad_header).is_err());
    }
}
