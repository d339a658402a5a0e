use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use super::linalg::to_nalgebra;
use super::{argmax, class_counts, failure, present_classes, Classifier, MlError, Params, TrainView};

pub const MAX_EPOCHS: usize = 200;
const BATCH: usize = 32;
const LEARNING_RATE: f64 = 0.01;
const GD_TOL: f64 = 1e-4;
const GD_PATIENCE: usize = 5;
const PA_TOL: f64 = 1e-3;
const LDA_RIDGE: f64 = 1e-6;
const LDA_SINGULAR: f64 = 1e-10;

/// Linear discriminant analysis with a shared covariance.
#[derive(Debug)]
pub struct Lda {
    classes: Vec<usize>,
    coef: Array2<f64>,
    intercept: Array1<f64>,
}

impl Lda {
    pub fn fit(p: &Params, d: &TrainView) -> Result<Self, MlError> {
        let uniform = p.cat("priors", &["empirical", "uniform"])? == "uniform";
        let classes = present_classes(d.y, d.n_classes);
        let counts = class_counts(d.y, d.n_classes);
        let (n, width) = (d.x.nrows(), d.x.ncols());
        if n <= classes.len() {
            return Err(failure("lda", "not enough rows for a pooled covariance"));
        }
        let mut means = Array2::<f64>::zeros((classes.len(), width));
        let mut slot = vec![usize::MAX; d.n_classes];
        for (ci, &c) in classes.iter().enumerate() {
            slot[c] = ci;
        }
        for (row, &c) in d.x.outer_iter().zip(d.y) {
            let mut m = means.row_mut(slot[c]);
            m += &(&row / counts[c] as f64);
        }
        let mut scatter = DMatrix::<f64>::zeros(width, width);
        for (row, &c) in d.x.outer_iter().zip(d.y) {
            let diff = DVector::from_iterator(width, row.iter().zip(means.row(slot[c])).map(|(a, b)| a - b));
            scatter += &diff * diff.transpose();
        }
        scatter /= (n - classes.len()) as f64;

        let eig = scatter.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if max <= 0.0 || min <= LDA_SINGULAR * max {
            return Err(failure("lda", "within-class scatter is singular"));
        }
        for i in 0..width {
            scatter[(i, i)] += LDA_RIDGE;
        }
        let chol = scatter
            .cholesky()
            .ok_or_else(|| failure("lda", "within-class scatter is not positive definite"))?;
        let mu = to_nalgebra(&means).transpose();
        let solved = chol.solve(&mu);
        let coef = Array2::from_shape_fn((classes.len(), width), |(ci, j)| solved[(j, ci)]);
        let intercept = Array1::from_shape_fn(classes.len(), |ci| {
            let prior = if uniform {
                1.0 / classes.len() as f64
            } else {
                counts[classes[ci]] as f64 / n as f64
            };
            -0.5 * means.row(ci).dot(&coef.row(ci)) + prior.ln()
        });
        Ok(Self {
            classes,
            coef,
            intercept,
        })
    }
}

impl Classifier for Lda {
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let scores = x.dot(&self.coef.t()) + &self.intercept;
        scores
            .outer_iter()
            .map(|r| self.classes[argmax(r.iter().copied())])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Loss {
    Logistic,
    Hinge,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Penalty {
    L1,
    L2,
}

/// Binary linear models combined one-vs-rest. With two classes a single
/// model separates the larger class id from the smaller one.
#[derive(Debug)]
pub struct OneVsRest {
    classes: Vec<usize>,
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl OneVsRest {
    pub fn fit_logistic(p: &Params, d: &TrainView, rng: &mut dyn RngCore) -> Result<Self, MlError> {
        let penalty = penalty(p)?;
        let c = p.float("C", 1.0)?;
        Self::fit_with("logisticRegression", d, rng, |x, t, rng| gradient_descent(x, t, Loss::Logistic, penalty, c, rng))
    }

    pub fn fit_svc(p: &Params, d: &TrainView, rng: &mut dyn RngCore) -> Result<Self, MlError> {
        let penalty = penalty(p)?;
        let c = p.float("C", 1.0)?;
        Self::fit_with("lsvc", d, rng, |x, t, rng| gradient_descent(x, t, Loss::Hinge, penalty, c, rng))
    }

    pub fn fit_passive_aggressive(p: &Params, d: &TrainView, rng: &mut dyn RngCore) -> Result<Self, MlError> {
        let c = p.float("C", 1.0)?;
        let squared = p.cat("loss", &["hinge", "squared_hinge"])? == "squared_hinge";
        Self::fit_with("passiveAggressiveClassifier", d, rng, |x, t, rng| passive_aggressive(x, t, c, squared, rng))
    }

    fn fit_with<F>(id: &str, d: &TrainView, rng: &mut dyn RngCore, mut train: F) -> Result<Self, MlError>
    where
        F: FnMut(&Array2<f64>, &[f64], &mut dyn RngCore) -> (Array1<f64>, f64),
    {
        let classes = present_classes(d.y, d.n_classes);
        let positives: Vec<usize> = if classes.len() == 2 {
            vec![classes[1]]
        } else {
            classes.clone()
        };
        let mut weights = Array2::zeros((positives.len(), d.x.ncols()));
        let mut bias = Array1::zeros(positives.len());
        for (i, &c) in positives.iter().enumerate() {
            let t: Vec<f64> = d.y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            let (w, b) = train(d.x, &t, rng);
            weights.row_mut(i).assign(&w);
            bias[i] = b;
        }
        if weights.iter().any(|v| !v.is_finite()) || bias.iter().any(|v| !v.is_finite()) {
            return Err(failure(id, "diverged"));
        }
        Ok(Self {
            classes,
            weights,
            bias,
        })
    }
}

impl Classifier for OneVsRest {
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let scores = x.dot(&self.weights.t()) + &self.bias;
        scores
            .outer_iter()
            .map(|r| {
                if self.classes.len() == 2 {
                    self.classes[usize::from(r[0] > 0.0)]
                } else {
                    self.classes[argmax(r.iter().copied())]
                }
            })
            .collect()
    }
}

fn penalty(p: &Params) -> Result<Penalty, MlError> {
    Ok(match p.cat("penalty", &["l2", "l1"])? {
        "l1" => Penalty::L1,
        _ => Penalty::L2,
    })
}

fn loss_and_slope(loss: Loss, t: f64, z: f64) -> (f64, f64) {
    let m = t * z;
    match loss {
        Loss::Logistic => {
            // ln(1 + e^{-m}) computed stably
            let l = if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
            let s = 1.0 / (1.0 + m.exp());
            (l, -t * s)
        }
        Loss::Hinge => {
            if m < 1.0 {
                (1.0 - m, -t)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Mini-batch Adam on `mean loss + penalty / (C n)`, stopping once the
/// epoch objective stalls.
fn gradient_descent(
    x: &Array2<f64>,
    t: &[f64],
    loss: Loss,
    penalty: Penalty,
    c: f64,
    rng: &mut dyn RngCore,
) -> (Array1<f64>, f64) {
    let (n, width) = (x.nrows(), x.ncols());
    let reg = 1.0 / (c * n as f64);
    let mut w = Array1::<f64>::zeros(width);
    let mut b = 0.0;
    let mut adam = Adam::new(width + 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut stall = 0;
    let mut grad = Array1::<f64>::zeros(width + 1);
    for _ in 0..MAX_EPOCHS {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(BATCH) {
            grad.fill(0.0);
            for &i in batch {
                let row = x.row(i);
                let (l, slope) = loss_and_slope(loss, t[i], row.dot(&w) + b);
                epoch_loss += l;
                if slope != 0.0 {
                    grad.slice_mut(ndarray::s![..width]).scaled_add(slope, &row);
                    grad[width] += slope;
                }
            }
            grad /= batch.len() as f64;
            for j in 0..width {
                grad[j] += reg
                    * match penalty {
                        Penalty::L2 => w[j],
                        Penalty::L1 => w[j].signum() * f64::from(w[j] != 0.0),
                    };
            }
            let step = adam.step(grad.view());
            w -= &step.slice(ndarray::s![..width]);
            b -= step[width];
        }
        let objective = epoch_loss / n as f64
            + reg
                * match penalty {
                    Penalty::L2 => 0.5 * w.dot(&w),
                    Penalty::L1 => w.mapv(f64::abs).sum(),
                };
        if objective > best - GD_TOL {
            stall += 1;
            if stall >= GD_PATIENCE {
                break;
            }
        } else {
            stall = 0;
        }
        best = best.min(objective);
    }
    (w, b)
}

/// Passive-aggressive online updates (PA-I for hinge, PA-II for squared
/// hinge); the intercept is updated as a constant feature.
fn passive_aggressive(x: &Array2<f64>, t: &[f64], c: f64, squared: bool, rng: &mut dyn RngCore) -> (Array1<f64>, f64) {
    let n = x.nrows();
    let mut w = Array1::<f64>::zeros(x.ncols());
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut stall = 0;
    for _ in 0..MAX_EPOCHS {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let row = x.row(i);
            let l = (1.0 - t[i] * (row.dot(&w) + b)).max(0.0);
            if l <= 0.0 {
                continue;
            }
            epoch_loss += if squared { l * l } else { l };
            let norm = row.dot(&row) + 1.0;
            let tau = if squared { l / (norm + 0.5 / c) } else { (l / norm).min(c) };
            w.scaled_add(tau * t[i], &row);
            b += tau * t[i];
        }
        let avg = epoch_loss / n as f64;
        if avg > best - PA_TOL {
            stall += 1;
            if stall >= GD_PATIENCE {
                break;
            }
        } else {
            stall = 0;
        }
        best = best.min(avg);
    }
    (w, b)
}

pub(crate) struct Adam {
    m: Array1<f64>,
    v: Array1<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    pub fn new(size: usize) -> Self {
        Self::with_rate(size, LEARNING_RATE)
    }

    pub fn with_rate(size: usize, lr: f64) -> Self {
        Self {
            m: Array1::zeros(size),
            v: Array1::zeros(size),
            t: 0,
            lr,
        }
    }

    /// Parameter decrement for gradient `g`.
    pub fn step(&mut self, g: ArrayView1<f64>) -> Array1<f64> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        self.m = &self.m * B1 + &g * (1.0 - B1);
        self.v = &self.v * B2 + &g.mapv(|x| x * x) * (1.0 - B2);
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let lr = self.lr;
        ndarray::Zip::from(&self.m)
            .and(&self.v)
            .map_collect(|m, v| lr * (m / c1) / ((v / c2).sqrt() + 1e-8))
    }
}

/// Small uniform initialisation helper shared with the MLP.
pub(crate) fn uniform(rng: &mut dyn RngCore, bound: f64) -> f64 {
    rng.gen_range(-bound..bound)
}
