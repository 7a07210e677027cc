//! Central finite-difference gradient checks.
//!
//! The analytic side comes from [`Tape::backward`]; the numeric side only
//! re-evaluates the forward pass with perturbed inputs. Relative error is
//! measured in the max norm over the whole gradient:
//! `max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-12)`.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::regularizers::{self, BranchVars, CrReduce, LayerBranches, LossWeights, SimilarityOpts};
use crate::rng::SplitMix64;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;

/// Max-norm relative error between two gradients of equal shape.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic
        .max_abs_diff(numeric)
        .expect("gradient shapes agree");
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-12);
    diff / scale
}

/// Central-difference gradient of `f` at `inputs[which]`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Matrix], which: usize, step: f64) -> Result<Matrix>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut work = inputs.to_vec();
    let (r, c) = inputs[which].shape();
    let mut grad = Matrix::zeros(r, c);
    for k in 0..r * c {
        let orig = work[which].as_slice()[k];
        work[which].as_mut_slice()[k] = orig + step;
        let plus = eval(&work)?;
        work[which].as_mut_slice()[k] = orig - step;
        let minus = eval(&work)?;
        work[which].as_mut_slice()[k] = orig;
        grad.as_mut_slice()[k] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Analytic gradients of `f` with every input treated as a parameter.
pub fn analytic_gradients<F>(f: &F, inputs: &[Matrix]) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Worst relative error over all inputs of `f`.
pub fn check<F>(f: &F, inputs: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(f, inputs)?;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let n = numeric_gradient(f, inputs, i, FD_STEP)?;
        worst = worst.max(relative_error(a, &n));
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn random(rng: &mut SplitMix64, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.uniform_range(-1.0, 1.0))
}

/// Random matrix with every entry at least `gap` away from zero.
fn away_from_zero(rng: &mut SplitMix64, r: usize, c: usize, gap: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| loop {
        let x = rng.uniform_range(-1.0, 1.0);
        if x.abs() >= gap {
            break x;
        }
    })
}

/// Random matrix whose entries all differ from `other` by at least `gap`.
fn apart_from(rng: &mut SplitMix64, other: &Matrix, gap: f64) -> Matrix {
    Matrix::from_fn(other.rows(), other.cols(), |i, j| loop {
        let x = rng.uniform_range(-1.0, 1.0);
        if (x - other.get(i, j)).abs() >= gap {
            break x;
        }
    })
}

const KINK_GAP: f64 = 1e-3;

type Instance = (Vec<Matrix>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn shape(rng: &mut SplitMix64) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4))
}

/// Projects a matrix-valued node to a scalar with a fixed random target.
fn project(tape: &mut Tape, y: Var, target: &Matrix) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(y, t)?;
    Ok(tape.frobenius_sq(d))
}

fn branch_pair(rng: &mut SplitMix64, d_out: usize, d_in: usize, rank: usize) -> [Matrix; 4] {
    let a = random(rng, d_out, rank);
    let b = random(rng, rank, d_in);
    let a2 = apart_from(rng, &a, KINK_GAP);
    let b2 = apart_from(rng, &b, KINK_GAP);
    [a, b, a2, b2]
}

fn make_instance(name: &str, rng: &mut SplitMix64) -> Instance {
    let sim = SimilarityOpts { normalize: true };
    match name {
        "matmul" => {
            let (n, k) = shape(rng);
            let m = 1 + rng.below(4);
            let target = random(rng, n, m);
            (
                vec![random(rng, n, k), random(rng, k, m)],
                Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, &target)
                }),
            )
        }
        "add" | "sub" => {
            let (r, c) = shape(rng);
            let target = random(rng, r, c);
            let is_add = name == "add";
            (
                vec![random(rng, r, c), random(rng, r, c)],
                Box::new(move |t, v| {
                    let y = if is_add {
                        t.add(v[0], v[1])?
                    } else {
                        t.sub(v[0], v[1])?
                    };
                    project(t, y, &target)
                }),
            )
        }
        "scale" => {
            let (r, c) = shape(rng);
            let s = rng.uniform_range(-2.0, 2.0);
            let target = random(rng, r, c);
            (
                vec![random(rng, r, c)],
                Box::new(move |t, v| {
                    let y = t.scale(v[0], s);
                    project(t, y, &target)
                }),
            )
        }
        "relu" => {
            let (r, c) = shape(rng);
            let target = random(rng, r, c);
            (
                vec![away_from_zero(rng, r, c, KINK_GAP)],
                Box::new(move |t, v| {
                    let y = t.relu(v[0]);
                    project(t, y, &target)
                }),
            )
        }
        "transpose" => {
            let (r, c) = shape(rng);
            let target = random(rng, c, r);
            (
                vec![random(rng, r, c)],
                Box::new(move |t, v| {
                    let y = t.transpose(v[0]);
                    project(t, y, &target)
                }),
            )
        }
        "add_column" => {
            let (r, c) = shape(rng);
            let target = random(rng, r, c);
            (
                vec![random(rng, r, c), random(rng, r, 1)],
                Box::new(move |t, v| {
                    let y = t.add_column(v[0], v[1])?;
                    project(t, y, &target)
                }),
            )
        }
        "add_row" => {
            let (r, c) = shape(rng);
            let target = random(rng, r, c);
            (
                vec![random(rng, r, c), random(rng, 1, c)],
                Box::new(move |t, v| {
                    let y = t.add_row(v[0], v[1])?;
                    project(t, y, &target)
                }),
            )
        }
        "sum" => {
            let (r, c) = shape(rng);
            (
                vec![random(rng, r, c)],
                Box::new(|t, v| {
                    let s = t.sum(v[0]);
                    let sq = t.frobenius_sq(s);
                    Ok(sq)
                }),
            )
        }
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..3).map(|_| rng.below(4)).collect();
            (
                vec![random(rng, 3, 4)],
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            )
        }
        "frobenius_sq" => {
            let (r, c) = shape(rng);
            (
                vec![random(rng, r, c)],
                Box::new(|t, v| Ok(t.frobenius_sq(v[0]))),
            )
        }
        "mean_abs_diff" => {
            let (r, c) = shape(rng);
            let a = random(rng, r, c);
            let b = apart_from(rng, &a, KINK_GAP);
            (vec![a, b], Box::new(|t, v| t.mean_abs_diff(v[0], v[1])))
        }
        "exp_neg" => (
            vec![random(rng, 1, 1)],
            Box::new(|t, v| Ok(t.exp_neg(v[0]))),
        ),
        "branch_similarity" => {
            let (d_out, d_in, rank) = (2 + rng.below(3), 2 + rng.below(3), 1 + rng.below(2));
            (
                branch_pair(rng, d_out, d_in, rank).to_vec(),
                Box::new(move |t, v| {
                    regularizers::branch_similarity(
                        t,
                        BranchVars { a: v[0], b: v[1] },
                        BranchVars { a: v[2], b: v[3] },
                        sim,
                    )
                }),
            )
        }
        "converge_loss" | "diverge_loss" => {
            let (d_out, d_in, rank) = (2 + rng.below(3), 2 + rng.below(3), 1 + rng.below(2));
            let [a, b, a1, b1] = branch_pair(rng, d_out, d_in, rank);
            let a2 = apart_from(rng, &a, KINK_GAP);
            let b2 = apart_from(rng, &b, KINK_GAP);
            let converge = name == "converge_loss";
            (
                vec![a, b, a1, b1, a2, b2],
                Box::new(move |t, v| {
                    let cur = BranchVars { a: v[0], b: v[1] };
                    let others = [
                        BranchVars { a: v[2], b: v[3] },
                        BranchVars { a: v[4], b: v[5] },
                    ];
                    if converge {
                        regularizers::converge_loss(t, cur, &others, sim)
                    } else {
                        regularizers::diverge_loss(t, cur, &others, sim)
                    }
                }),
            )
        }
        "cr_loss" => {
            // Two layers, one same-modality and one cross-modality prior branch each.
            let (d, rank) = (2 + rng.below(3), 1 + rng.below(2));
            let mut inputs = Vec::new();
            for _ in 0..2 {
                let [a, b, a1, b1] = branch_pair(rng, d, d, rank);
                let a2 = apart_from(rng, &a, KINK_GAP);
                let b2 = apart_from(rng, &b, KINK_GAP);
                inputs.extend([a, b, a1, b1, a2, b2]);
            }
            let reduce = if rng.below(2) == 0 {
                CrReduce::Sum
            } else {
                CrReduce::Mean
            };
            (
                inputs,
                Box::new(move |t, v| {
                    let layers: Vec<LayerBranches> = (0..2)
                        .map(|l| {
                            let o = 6 * l;
                            LayerBranches {
                                current: BranchVars {
                                    a: v[o],
                                    b: v[o + 1],
                                },
                                same: vec![BranchVars {
                                    a: v[o + 2],
                                    b: v[o + 3],
                                }],
                                different: vec![BranchVars {
                                    a: v[o + 4],
                                    b: v[o + 5],
                                }],
                            }
                        })
                        .collect();
                    regularizers::cr_loss_layers(t, &layers, sim, reduce)
                }),
            )
        }
        "ortho_loss" => {
            let rank = 1 + rng.below(3);
            let (d_out, d_in) = (rank + rng.below(3), rank + rng.below(3));
            (
                vec![random(rng, d_out, rank), random(rng, rank, d_in)],
                Box::new(|t, v| regularizers::ortho_loss(t, BranchVars { a: v[0], b: v[1] })),
            )
        }
        "total_loss" => {
            let weights = LossWeights {
                alpha: rng.uniform(),
                beta: rng.uniform(),
            };
            (
                vec![random(rng, 1, 1), random(rng, 1, 1), random(rng, 1, 1)],
                Box::new(move |t, v| {
                    let ce = t.frobenius_sq(v[0]);
                    let cr = t.exp_neg(v[1]);
                    let ortho = t.frobenius_sq(v[2]);
                    regularizers::total_loss(t, ce, cr, ortho, weights)
                }),
            )
        }
        other => panic!("unknown gradient check `{other}`"),
    }
}

/// Names of the differentiable primitives covered by [`battery`].
pub const OPERATIONS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "scale",
    "relu",
    "transpose",
    "add_column",
    "add_row",
    "sum",
    "softmax_cross_entropy",
    "frobenius_sq",
    "mean_abs_diff",
    "exp_neg",
];

/// Names of the regularizer checks covered by [`battery`].
pub const REGULARIZERS: &[&str] = &[
    "branch_similarity",
    "converge_loss",
    "diverge_loss",
    "cr_loss",
    "ortho_loss",
    "total_loss",
];

/// Runs every operation and regularizer check on `instances` random inputs.
pub fn battery(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut entries = Vec::new();
    for (k, name) in OPERATIONS.iter().chain(REGULARIZERS).enumerate() {
        let mut rng = SplitMix64::new(crate::rng::derive_seed(seed, k as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (inputs, f) = make_instance(name, &mut rng);
            worst = worst.max(check(&f, &inputs)?);
        }
        entries.push(GradCheckEntry {
            name: (*name).to_string(),
            instances,
            max_rel_err: worst,
            passed: worst < FD_REL_TOL,
        });
    }
    Ok(GradCheckReport {
        tolerance: FD_REL_TOL,
        entries,
    })
}
