use ndarray::{Array2, ArrayView2};

use super::linalg::column_variances;
use super::{argmax, class_counts, failure, present_classes, Classifier, MlError, Params, TrainView};

#[derive(Debug)]
pub struct GaussianNb {
    classes: Vec<usize>,
    log_prior: Vec<f64>,
    mean: Array2<f64>,
    var: Array2<f64>,
}

impl GaussianNb {
    pub fn fit(p: &Params, d: &TrainView) -> Result<Self, MlError> {
        let smoothing = p.float("var_smoothing", 1e-9)?;
        let epsilon = smoothing * column_variances(d.x).fold(0.0f64, |a, &b| a.max(b));
        let classes = present_classes(d.y, d.n_classes);
        let counts = class_counts(d.y, d.n_classes);
        let n = d.y.len() as f64;
        let width = d.x.ncols();
        let mut mean = Array2::zeros((classes.len(), width));
        let mut var = Array2::zeros((classes.len(), width));
        for (ci, &c) in classes.iter().enumerate() {
            let m = counts[c] as f64;
            for (row, _) in d.x.outer_iter().zip(d.y).filter(|(_, &l)| l == c) {
                let mut r = mean.row_mut(ci);
                r += &(&row / m);
            }
            for (row, _) in d.x.outer_iter().zip(d.y).filter(|(_, &l)| l == c) {
                let diff = &row - &mean.row(ci);
                let mut r = var.row_mut(ci);
                r += &(diff.mapv(|v| v * v) / m);
            }
        }
        // A zero variance cannot be evaluated; keep it at the smallest
        // positive value so the matching feature dominates the likelihood.
        var.mapv_inplace(|v| (v + epsilon).max(f64::MIN_POSITIVE));
        let log_prior = classes.iter().map(|&c| (counts[c] as f64 / n).ln()).collect();
        Ok(Self {
            classes,
            log_prior,
            mean,
            var,
        })
    }
}

impl Classifier for GaussianNb {
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        x.outer_iter()
            .map(|row| {
                let scores = (0..self.classes.len()).map(|ci| {
                    let mut s = self.log_prior[ci];
                    for j in 0..row.len() {
                        let v = self.var[[ci, j]];
                        let d = row[j] - self.mean[[ci, j]];
                        s -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
                    }
                    s
                });
                self.classes[argmax(scores)]
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct MultinomialNb {
    classes: Vec<usize>,
    log_prior: Vec<f64>,
    log_prob: Array2<f64>,
}

impl MultinomialNb {
    pub fn fit(p: &Params, d: &TrainView) -> Result<Self, MlError> {
        if d.x.iter().any(|&v| v < 0.0) {
            return Err(failure("multinomialNB", "negative feature values"));
        }
        let alpha = p.float("alpha", 1.0)?;
        let fit_prior = p.cat("fit_prior", &["true", "false"])? == "true";
        let classes = present_classes(d.y, d.n_classes);
        let counts = class_counts(d.y, d.n_classes);
        let width = d.x.ncols();
        let mut log_prob = Array2::zeros((classes.len(), width));
        for (ci, &c) in classes.iter().enumerate() {
            let mut feature_count = vec![alpha; width];
            for (row, _) in d.x.outer_iter().zip(d.y).filter(|(_, &l)| l == c) {
                for (f, v) in feature_count.iter_mut().zip(row) {
                    *f += v;
                }
            }
            let total: f64 = feature_count.iter().sum();
            for (j, f) in feature_count.iter().enumerate() {
                log_prob[[ci, j]] = (f / total).ln();
            }
        }
        let n = d.y.len() as f64;
        let log_prior = classes
            .iter()
            .map(|&c| {
                if fit_prior {
                    (counts[c] as f64 / n).ln()
                } else {
                    -(classes.len() as f64).ln()
                }
            })
            .collect();
        Ok(Self {
            classes,
            log_prior,
            log_prob,
        })
    }
}

impl Classifier for MultinomialNb {
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let jll = x.dot(&self.log_prob.t());
        jll.outer_iter()
            .map(|row| {
                let scores = row.iter().zip(&self.log_prior).map(|(a, b)| a + b);
                self.classes[argmax(scores)]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::HyperValue;
    use ndarray::array;
    use std::collections::BTreeMap;

    #[test]
    fn gaussian_nb_matches_hand_likelihood() {
        let x = array![[0.0], [2.0], [10.0], [12.0]];
        let y = [0, 0, 1, 1];
        let d = TrainView { x: &x, y: &y, n_classes: 2 };
        let v = BTreeMap::from([("var_smoothing".to_string(), HyperValue::Float(0.0))]);
        let nb = GaussianNb::fit(&Params { algorithm: "gaussianNB", values: &v }, &d).unwrap();
        assert_eq!(nb.mean, array![[1.0], [11.0]]);
        assert_eq!(nb.var, array![[1.0], [1.0]]);
        assert_eq!(nb.predict(array![[5.9], [6.1]].view()), vec![0, 1]);
    }

    #[test]
    fn multinomial_nb_counts() {
        let x = array![[3.0, 0.0], [2.0, 1.0], [0.0, 4.0]];
        let y = [0, 0, 1];
        let d = TrainView { x: &x, y: &y, n_classes: 2 };
        let v = BTreeMap::from([("alpha".to_string(), HyperValue::Float(1.0))]);
        let nb = MultinomialNb::fit(&Params { algorithm: "multinomialNB", values: &v }, &d).unwrap();
        // class 0 counts (5+1, 1+1) / 8
        assert!((nb.log_prob[[0, 0]] - (6.0f64 / 8.0).ln()).abs() < 1e-12);
        assert_eq!(nb.predict(array![[5.0, 0.0], [0.0, 5.0]].view()), vec![0, 1]);
    }
}
