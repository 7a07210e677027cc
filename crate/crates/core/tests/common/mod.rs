//! Helpers shared by the integration tests.
#![allow(dead_code)]

use mslora::taskgen::LabeledDataset;

/// Multinomial logistic regression fit by full-batch gradient descent on
/// standardized features. Written with plain vectors so it shares no code
/// with the library's autodiff or model.
pub struct LogisticOracle {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `classes x (d + 1)`, last column is the bias.
    weights: Vec<Vec<f64>>,
}

fn column(ds: &LabeledDataset, j: usize) -> Vec<f64> {
    (0..ds.features.rows())
        .map(|i| ds.features.get(i, j))
        .collect()
}

impl LogisticOracle {
    pub fn fit(ds: &LabeledDataset, iterations: usize, lr: f64) -> Self {
        let d = ds.features.rows();
        let c = ds.classes;
        let xs: Vec<Vec<f64>> = ds.train.iter().map(|&j| column(ds, j)).collect();
        let ys: Vec<usize> = ds.train.iter().map(|&j| ds.labels[j]).collect();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in &xs {
            for i in 0..d {
                mean[i] += x[i] / n;
            }
        }
        let mut std = vec![0.0; d];
        for x in &xs {
            for i in 0..d {
                std[i] += (x[i] - mean[i]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-12);
        }
        let mut oracle = Self {
            mean,
            std,
            weights: vec![vec![0.0; d + 1]; c],
        };
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| oracle.standardize(x)).collect();
        for _ in 0..iterations {
            let mut grad = vec![vec![0.0; d + 1]; c];
            for (z, &y) in zs.iter().zip(&ys) {
                let p = oracle.probs_std(z);
                for k in 0..c {
                    let g = p[k] - if k == y { 1.0 } else { 0.0 };
                    for i in 0..d {
                        grad[k][i] += g * z[i] / n;
                    }
                    grad[k][d] += g / n;
                }
            }
            for (w, g) in oracle.weights.iter_mut().zip(&grad) {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            }
        }
        oracle
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn probs_std(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[d])
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs_std(&self.standardize(x));
        (0..p.len()).fold(0, |best, k| if p[k] > p[best] { k } else { best })
    }

    pub fn accuracy(&self, ds: &LabeledDataset, idx: &[usize]) -> f64 {
        let hits = idx
            .iter()
            .filter(|&&j| self.predict(&column(ds, j)) == ds.labels[j])
            .count();
        hits as f64 / idx.len() as f64
    }
}

/// Test accuracy of the oracle fit on the train split.
pub fn oracle_test_accuracy(ds: &LabeledDataset) -> f64 {
    LogisticOracle::fit(ds, 300, 0.5).accuracy(ds, &ds.test)
}
