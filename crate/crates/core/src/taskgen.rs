//! Seeded synthetic modalities and classification tasks.
//!
//! A modality is an orthogonal change of frame plus an offset. A task of that
//! modality draws Gaussian clusters in a shared base space and maps every
//! point through the modality's frame, so tasks of one modality share their
//! input geometry while tasks of different modalities do not.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, SplitMix64};

pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_CLASSES: usize = 4;
pub const DEFAULT_PER_CLASS: usize = 200;
pub const DEFAULT_MARGIN: f64 = 6.0;
const OFFSET_SCALE: f64 = 2.0;
const MAX_CENTER_ATTEMPTS: usize = 1000;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModality {
    pub id: String,
    pub seed: u64,
    /// Orthogonal `d x d` frame.
    pub transform: Matrix,
    /// `d x 1` offset added after the transform.
    pub offset: Matrix,
}

impl SyntheticModality {
    pub fn dim(&self) -> usize {
        self.transform.rows()
    }

    /// `Q x + offset` applied to each column of `x`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let y = self
            .transform
            .matmul(x)
            .expect("dimension checked by caller");
        Matrix::from_fn(y.rows(), y.cols(), |i, j| {
            y.get(i, j) + self.offset.get(i, 0)
        })
    }

    /// `Q^T (y - offset)`.
    pub fn invert(&self, y: &Matrix) -> Matrix {
        let centered = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
            y.get(i, j) - self.offset.get(i, 0)
        });
        self.transform
            .transpose()
            .matmul(&centered)
            .expect("dimension checked by caller")
    }
}

/// Gram-Schmidt, applied twice per column, of a seeded Gaussian matrix.
pub fn gen_modality(id: &str, d: usize, seed: u64) -> Result<SyntheticModality> {
    if d < 2 {
        return Err(Error::Config(format!(
            "modality dimension must be >= 2, got {d}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let g = Matrix::from_fn(d, d, |_, _| rng.normal());
    let transform = orthonormalize_columns(&g)?;
    let offset = Matrix::from_fn(d, 1, |_, _| OFFSET_SCALE * rng.normal());
    Ok(SyntheticModality {
        id: id.to_string(),
        seed,
        transform,
        offset,
    })
}

fn orthonormalize_columns(g: &Matrix) -> Result<Matrix> {
    let (n, m) = g.shape();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for j in 0..m {
        let mut v: Vec<f64> = (0..n).map(|i| g.get(i, j)).collect();
        for _pass in 0..2 {
            for q in &cols {
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= dot * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Dataset("degenerate Gaussian draw".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    Ok(Matrix::from_fn(n, m, |i, j| cols[j][i]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `d x N`, one example per column.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn subset(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_columns(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn train_split(&self) -> (Matrix, Vec<usize>) {
        self.subset(&self.train)
    }

    pub fn test_split(&self) -> (Matrix, Vec<usize>) {
        self.subset(&self.test)
    }

    /// Assigns a seeded 80/20 split.
    fn split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(seed).shuffle(&mut order);
        let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }

    /// Writes `label,f0,...,f{d-1}` rows, one per example.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|k| format!("f{k}")));
        w.write_record(&header)?;
        for (j, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.to_string()];
            rec.extend((0..self.dim()).map(|i| format!("{:?}", self.features.get(i, j))));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV written by [`LabeledDataset::write_csv`] and splits it with `split_seed`.
    pub fn read_csv(path: &Path, classes: usize, split_seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("label") {
            return Err(Error::Dataset(format!(
                "{}: first column must be `label`",
                path.display()
            )));
        }
        let d = headers.len() - 1;
        for (k, h) in headers.iter().skip(1).enumerate() {
            if h != format!("f{k}") {
                return Err(Error::Dataset(format!(
                    "{}: expected column f{k}, found `{h}`",
                    path.display()
                )));
            }
        }
        let mut labels = Vec::new();
        let mut cols: Vec<f64> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| {
                Error::Dataset(format!("{}: row {}: {what}", path.display(), line + 2))
            };
            let label: usize = rec[0].trim().parse().map_err(|_| bad("bad label"))?;
            if label >= classes {
                return Err(bad(&format!("label {label} >= {classes} classes")));
            }
            labels.push(label);
            for k in 1..=d {
                let v: f64 = rec[k].trim().parse().map_err(|_| bad("bad feature"))?;
                if !v.is_finite() {
                    return Err(bad("non-finite feature"));
                }
                cols.push(v);
            }
        }
        let n = labels.len();
        if n == 0 {
            return Err(Error::Dataset(format!("{}: no rows", path.display())));
        }
        let features = Matrix::from_fn(d, n, |i, j| cols[j * d + i]);
        let (train, test) = Self::split(n, split_seed);
        Ok(Self {
            features,
            labels,
            classes,
            train,
            test,
        })
    }
}

/// Clusters with pairwise center distance at least `margin`, mapped through `modality`.
pub fn gen_task(
    modality: &SyntheticModality,
    task_seed: u64,
    classes: usize,
    per_class: usize,
    margin: f64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "class count must be >= 2, got {classes}"
        )));
    }
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::Config(format!("margin must be > 0, got {margin}")));
    }
    let d = modality.dim();
    let seed = derive_seed(modality.seed, task_seed);
    let mut rng = SplitMix64::new(seed);
    let spread = 2.0 * margin / (d as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        if attempts == MAX_CENTER_ATTEMPTS {
            return Err(Error::CenterPlacement {
                classes,
                margin,
                dim: d,
            });
        }
        attempts += 1;
        let c: Vec<f64> = (0..d).map(|_| spread * rng.normal()).collect();
        let far = centers.iter().all(|o| {
            o.iter()
                .zip(&c)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= margin
        });
        if far {
            centers.push(c);
        }
    }
    let n = classes * per_class;
    let mut base = Matrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for s in 0..per_class {
            let col = k * per_class + s;
            for (i, &c) in center.iter().enumerate() {
                base.set(i, col, c + rng.normal());
            }
            labels.push(k);
        }
    }
    let features = modality.apply(&base);
    let (train, test) = LabeledDataset::split(n, derive_seed(seed, 0x5157));
    Ok(LabeledDataset {
        features,
        labels,
        classes,
        train,
        test,
    })
}

/// Where a task's data comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetRef {
    /// `synth:<modality-seed>:<task-seed>:<C>`
    Synthetic {
        modality_seed: u64,
        task_seed: u64,
        classes: usize,
    },
    Csv(PathBuf),
}

impl FromStr for DatasetRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synth:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let bad = || {
                Error::Config(format!(
                    "bad generator spec `{s}`, expected synth:<modality-seed>:<task-seed>:<C>"
                ))
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(DatasetRef::Synthetic {
                modality_seed: parts[0].parse().map_err(|_| bad())?,
                task_seed: parts[1].parse().map_err(|_| bad())?,
                classes: parts[2].parse().map_err(|_| bad())?,
            })
        } else if s.is_empty() {
            Err(Error::Config("empty dataset reference".into()))
        } else {
            Ok(DatasetRef::Csv(PathBuf::from(s)))
        }
    }
}

impl fmt::Display for DatasetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetRef::Synthetic {
                modality_seed,
                task_seed,
                classes,
            } => write!(f, "synth:{modality_seed}:{task_seed}:{classes}"),
            DatasetRef::Csv(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for DatasetRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Generator knobs shared by all synthetic tasks of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SynthParams {
    pub per_class: usize,
    pub margin: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            per_class: DEFAULT_PER_CLASS,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl DatasetRef {
    /// Materializes the dataset for a model of width `dim`.
    pub fn resolve(
        &self,
        dim: usize,
        classes: usize,
        params: SynthParams,
        split_seed: u64,
    ) -> Result<LabeledDataset> {
        let ds = match self {
            DatasetRef::Synthetic {
                modality_seed,
                task_seed,
                classes: c,
            } => {
                if *c != classes {
                    return Err(Error::Config(format!(
                        "dataset `{self}` has {c} classes but the task declares {classes}"
                    )));
                }
                let modality = gen_modality(&modality_seed.to_string(), dim, *modality_seed)?;
                gen_task(&modality, *task_seed, *c, params.per_class, params.margin)?
            }
            DatasetRef::Csv(path) => LabeledDataset::read_csv(path, classes, split_seed)?,
        };
        if ds.dim() != dim {
            return Err(Error::Dataset(format!(
                "dataset `{self}` has dimension {} but the model width is {dim}",
                ds.dim()
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_is_orthogonal_and_seeded() {
        let m = gen_modality("a", 16, 5).unwrap();
        let qtq = m.transform.transpose().matmul(&m.transform).unwrap();
        assert!(qtq.max_abs_diff(&Matrix::identity(16)).unwrap() < 1e-10);
        let again = gen_modality("a", 16, 5).unwrap();
        assert!(m.transform.bitwise_eq(&again.transform));
        assert!(m.offset.bitwise_eq(&again.offset));
    }

    #[test]
    fn transform_preserves_norms() {
        let m = gen_modality("a", 16, 9).unwrap();
        let mut rng = SplitMix64::new(1);
        let x = Matrix::from_fn(16, 1, |_, _| rng.normal());
        let y = m.transform.matmul(&x).unwrap();
        assert!((x.frobenius_sq().sqrt() - y.frobenius_sq().sqrt()).abs() < 1e-10);
    }

    #[test]
    fn distinct_seeds_give_distinct_frames() {
        for s in 0..100u64 {
            let a = gen_modality("a", 16, 2 * s).unwrap();
            let b = gen_modality("b", 16, 2 * s + 1).unwrap();
            let mad = a
                .transform
                .sub(&b.transform)
                .unwrap()
                .as_slice()
                .iter()
                .map(|x| x.abs())
                .sum::<f64>()
                / 256.0;
            assert!(mad > 0.1, "seed pair {s}: {mad}");
        }
    }

    #[test]
    fn rejects_small_dimension() {
        assert!(gen_modality("a", 1, 0).is_err());
    }

    #[test]
    fn task_is_deterministic_and_balanced() {
        let m = gen_modality("a", 16, 1).unwrap();
        let d1 = gen_task(&m, 7, 4, 200, 6.0).unwrap();
        let d2 = gen_task(&m, 7, 4, 200, 6.0).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 800);
        let min_count = 800usize.div_ceil(2 * 4);
        for c in 0..4 {
            assert!(d1.labels.iter().filter(|&&l| l == c).count() >= min_count);
        }
        assert_eq!(d1.train.len(), 640);
        assert_eq!(d1.test.len(), 160);
        assert!(d1.train.iter().all(|i| !d1.test.contains(i)));
    }

    #[test]
    fn inverse_transform_round_trips() {
        let m = gen_modality("a", 16, 3).unwrap();
        for seed in [1, 2] {
            let ds = gen_task(&m, seed, 3, 20, 6.0).unwrap();
            let base = m.invert(&ds.features);
            let back = m.apply(&base);
            assert!(back.max_abs_diff(&ds.features).unwrap() < 1e-10);
        }
    }

    #[test]
    fn impossible_margin_fails() {
        let m = gen_modality("a", 2, 3).unwrap();
        assert!(matches!(
            gen_task(&m, 1, 50, 2, 1e6),
            Err(Error::CenterPlacement { .. })
        ));
        assert!(gen_task(&m, 1, 1, 2, 1.0).is_err());
        assert!(gen_task(&m, 1, 2, 2, 0.0).is_err());
    }

    #[test]
    fn dataset_ref_parsing() {
        let r: DatasetRef = "synth:1:2:4".parse().unwrap();
        assert_eq!(
            r,
            DatasetRef::Synthetic {
                modality_seed: 1,
                task_seed: 2,
                classes: 4
            }
        );
        assert_eq!(r.to_string(), "synth:1:2:4");
        assert!("synth:1:2".parse::<DatasetRef>().is_err());
        assert!(matches!(
            "data/x.csv".parse::<DatasetRef>().unwrap(),
            DatasetRef::Csv(_)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let m = gen_modality("a", 4, 3).unwrap();
        let ds = gen_task(&m, 1, 3, 10, 3.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("label,f0,f1,f2,f3\n"));
        let back = LabeledDataset::read_csv(&path, 3, 0).unwrap();
        assert!(back.features.bitwise_eq(&ds.features));
        assert_eq!(back.labels, ds.labels);
        assert!(LabeledDataset::read_csv(&path, 2, 0).is_err());
    }
}
