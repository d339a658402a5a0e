use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::RngCore;

use super::linear::{uniform, Adam, MAX_EPOCHS};
use super::{argmax, failure, present_classes, Classifier, MlError, Params, TrainView};

const LEARNING_RATE: f64 = 0.01;
const BATCH: usize = 32;
const L2: f64 = 1e-4;
const TOL: f64 = 1e-4;
const PATIENCE: usize = 10;

#[derive(Clone, Copy, Debug)]
enum Activation {
    Relu,
    Tanh,
    Logistic,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Logistic => z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(a > 0.0),
            Activation::Tanh => 1.0 - a * a,
            Activation::Logistic => a * (1.0 - a),
        }
    }
}

/// One hidden layer, softmax output over the classes seen in training.
#[derive(Debug)]
pub struct Mlp {
    classes: Vec<usize>,
    activation: Activation,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Mlp {
    pub fn fit(p: &Params, d: &TrainView, rng: &mut dyn RngCore) -> Result<Self, MlError> {
        let hidden = p.int("hidden_layer_size", 16)?.max(1) as usize;
        let activation = match p.cat("activation", &["relu", "tanh", "logistic"])? {
            "tanh" => Activation::Tanh,
            "logistic" => Activation::Logistic,
            _ => Activation::Relu,
        };
        let classes = present_classes(d.y, d.n_classes);
        let mut slot = vec![0; d.n_classes];
        for (i, &c) in classes.iter().enumerate() {
            slot[c] = i;
        }
        let (n, width, k) = (d.x.nrows(), d.x.ncols(), classes.len());
        let init = |rng: &mut dyn RngCore, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_simple_fn((fan_in, fan_out), || uniform(rng, bound))
        };
        let mut net = Self {
            classes,
            activation,
            w1: init(rng, width, hidden),
            b1: Array1::zeros(hidden),
            w2: init(rng, hidden, k),
            b2: Array1::zeros(k),
        };
        let sizes = [width * hidden, hidden, hidden * k, k];
        let mut adam = Adam::with_rate(sizes.iter().sum(), LEARNING_RATE);
        let mut order: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        let mut stall = 0;
        for _ in 0..MAX_EPOCHS {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(BATCH) {
                let xb = d.x.select(Axis(0), batch);
                let m = batch.len() as f64;
                let mut h = xb.dot(&net.w1) + &net.b1;
                activation.apply(&mut h);
                let logits = h.dot(&net.w2) + &net.b2;
                let mut probs = softmax(logits);
                for (r, &i) in batch.iter().enumerate() {
                    let target = slot[d.y[i]];
                    epoch_loss -= probs[[r, target]].max(1e-300).ln();
                    probs[[r, target]] -= 1.0;
                }
                let delta2 = probs / m;
                let gw2 = h.t().dot(&delta2) + &net.w2 * (L2 / m);
                let gb2 = delta2.sum_axis(Axis(0));
                let mut delta1 = delta2.dot(&net.w2.t());
                ndarray::Zip::from(&mut delta1)
                    .and(&h)
                    .for_each(|d, &a| *d *= activation.slope(a));
                let gw1 = xb.t().dot(&delta1) + &net.w1 * (L2 / m);
                let gb1 = delta1.sum_axis(Axis(0));
                let flat: Array1<f64> = gw1
                    .iter()
                    .chain(gb1.iter())
                    .chain(gw2.iter())
                    .chain(gb2.iter())
                    .copied()
                    .collect();
                let step = adam.step(flat.view());
                let mut off = 0;
                for (dst, len) in [
                    (net.w1.as_slice_mut(), sizes[0]),
                    (net.b1.as_slice_mut(), sizes[1]),
                    (net.w2.as_slice_mut(), sizes[2]),
                    (net.b2.as_slice_mut(), sizes[3]),
                ] {
                    let dst = dst.expect("standard layout");
                    for (v, s) in dst.iter_mut().zip(step.slice(ndarray::s![off..off + len])) {
                        *v -= s;
                    }
                    off += len;
                }
            }
            let loss = epoch_loss / n as f64;
            if !loss.is_finite() {
                return Err(failure("mlpClassifier", "training diverged"));
            }
            if loss > best - TOL {
                stall += 1;
                if stall >= PATIENCE {
                    break;
                }
            } else {
                stall = 0;
            }
            best = best.min(loss);
        }
        Ok(net)
    }
}

fn softmax(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    z
}

impl Classifier for Mlp {
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let mut h = x.dot(&self.w1) + &self.b1;
        self.activation.apply(&mut h);
        let logits = h.dot(&self.w2) + &self.b2;
        logits
            .outer_iter()
            .map(|r| self.classes[argmax(r.iter().copied())])
            .collect()
    }
}
