use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};

use super::linalg::{column_means, gram, inv_sqrt_sym, rows, top_eigen};
use super::{failure, MlError, Params, Transformer};

const ICA_TOL: f64 = 1e-4;
const ICA_MAX_ITER: usize = 200;

#[derive(Debug)]
pub struct Pca {
    mean: Array1<f64>,
    /// Components as rows, pre-scaled when whitening.
    projection: Array2<f64>,
}

impl Pca {
    pub fn fit(p: &Params, x: &Array2<f64>, rng: &mut dyn RngCore) -> Result<Self, MlError> {
        let k = (p.int("n_components", 2)?.max(1) as usize).min(x.ncols()).min(x.nrows());
        let whiten = p.cat("whiten", &["false", "true"])? == "true";
        let mean = column_means(x);
        let centred = x - &mean;
        let denom = (x.nrows().max(2) - 1) as f64;
        let (values, vectors) = top_eigen(&gram(centred.view(), denom), k, rng);
        let mut projection = rows(&vectors, x.ncols());
        if whiten {
            let top = values.first().copied().unwrap_or(0.0);
            for (i, &l) in values.iter().enumerate() {
                if l <= 1e-12 * top.max(1e-300) {
                    return Err(failure("pca", "cannot whiten a zero-variance component"));
                }
                projection.row_mut(i).mapv_inplace(|v| v / l.sqrt());
            }
        }
        Ok(Self { mean, projection })
    }
}

impl Transformer for Pca {
    fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean).dot(&self.projection.t())
    }
}

#[derive(Debug)]
pub struct TruncatedSvd {
    components: Array2<f64>,
}

impl TruncatedSvd {
    pub fn fit(p: &Params, x: &Array2<f64>, rng: &mut dyn RngCore) -> Result<Self, MlError> {
        let k = (p.int("n_components", 2)?.max(1) as usize).min(x.ncols());
        let (_, vectors) = top_eigen(&gram(x.view(), 1.0), k, rng);
        Ok(Self {
            components: rows(&vectors, x.ncols()),
        })
    }
}

impl Transformer for TruncatedSvd {
    fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.components.t())
    }
}

#[derive(Debug)]
pub struct FastIca {
    mean: Array1<f64>,
    unmixing: Array2<f64>,
}

impl FastIca {
    pub fn fit(p: &Params, x: &Array2<f64>, rng: &mut dyn RngCore) -> Result<Self, MlError> {
        let k = (p.int("n_components", 2)?.max(1) as usize).min(x.ncols()).min(x.nrows());
        let fun = p.cat("fun", &["logcosh", "exp", "cube"])?;
        let n = x.nrows() as f64;
        let mean = column_means(x);
        let centred = x - &mean;

        // Whitening by the leading principal directions.
        let (values, vectors) = top_eigen(&gram(centred.view(), n), k, rng);
        let top = values.first().copied().unwrap_or(0.0);
        if values.iter().any(|&l| l <= 1e-12 * top.max(1e-300)) {
            return Err(failure("fastICA", "data is rank deficient"));
        }
        let mut whitening = rows(&vectors, x.ncols());
        for (i, &l) in values.iter().enumerate() {
            whitening.row_mut(i).mapv_inplace(|v| v / l.sqrt());
        }
        let xw = centred.dot(&whitening.t());

        let init = Array2::from_shape_fn((k, k), |_| rng.gen_range(-1.0..1.0));
        let mut w = decorrelate(&init).ok_or_else(|| failure("fastICA", "degenerate initial unmixing"))?;
        let mut converged = false;
        for _ in 0..ICA_MAX_ITER {
            let u = xw.dot(&w.t());
            let (g, gp) = contrast(fun, &u);
            let mean_gp = gp.mean_axis(Axis(0)).expect("rows");
            let mut w1 = g.t().dot(&xw) / n;
            for i in 0..k {
                let row = w.row(i).to_owned() * mean_gp[i];
                let mut r = w1.row_mut(i);
                r -= &row;
            }
            let w1 = decorrelate(&w1).ok_or_else(|| failure("fastICA", "singular update"))?;
            let lim = w1
                .dot(&w.t())
                .diag()
                .iter()
                .map(|d| (d.abs() - 1.0).abs())
                .fold(0.0, f64::max);
            w = w1;
            if lim < ICA_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(failure("fastICA", "did not converge"));
        }
        Ok(Self {
            mean,
            unmixing: w.dot(&whitening),
        })
    }
}

impl Transformer for FastIca {
    fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean).dot(&self.unmixing.t())
    }
}

/// Symmetric decorrelation `(W W^T)^{-1/2} W`.
fn decorrelate(w: &Array2<f64>) -> Option<Array2<f64>> {
    Some(inv_sqrt_sym(&w.dot(&w.t()))?.dot(w))
}

fn contrast(fun: &str, u: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    match fun {
        "exp" => {
            let e = u.mapv(|v| (-v * v / 2.0).exp());
            (u * &e, u.mapv(|v| 1.0 - v * v) * &e)
        }
        "cube" => (u.mapv(|v| v * v * v), u.mapv(|v| 3.0 * v * v)),
        _ => {
            let t = u.mapv(f64::tanh);
            let d = t.mapv(|v| 1.0 - v * v);
            (t, d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::HyperValue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn data(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = Array2::from_shape_fn((80, 3), |_| rng.gen_range(-1.0..1.0));
        let mix = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let noise = Array2::from_shape_fn((80, 6), |_| rng.gen_range(-0.05..0.05));
        latent.dot(&mix) + noise
    }

    fn with(name: &str, v: HyperValue) -> BTreeMap<String, HyperValue> {
        BTreeMap::from([(name.to_string(), v)])
    }

    #[test]
    fn pca_reconstruction_error_is_non_increasing() {
        let x = data(1);
        let mean = column_means(&x);
        let centred = &x - &mean;
        let mut last = f64::INFINITY;
        for k in 1..=5 {
            let v = with("n_components", HyperValue::Integer(k));
            let p = Params { algorithm: "pca", values: &v };
            let pca = Pca::fit(&p, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let z = pca.transform(x.view());
            assert_eq!(z.ncols(), k as usize);
            let recon = z.dot(&pca.projection);
            let err = (&centred - &recon).mapv(|e| e * e).sum();
            assert!(err <= last + 1e-6, "k={k}: {err} > {last}");
            last = err;
        }
    }

    #[test]
    fn truncated_svd_shape_and_error() {
        let x = data(2);
        let mut last = f64::INFINITY;
        for k in 1..=5 {
            let v = with("n_components", HyperValue::Integer(k));
            let p = Params { algorithm: "truncatedSVD", values: &v };
            let svd = TruncatedSvd::fit(&p, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let z = svd.transform(x.view());
            assert_eq!(z.ncols(), k as usize);
            let err = (&x - &z.dot(&svd.components)).mapv(|e| e * e).sum();
            assert!(err <= last + 1e-6);
            last = err;
        }
    }

    #[test]
    fn pca_whitening_gives_unit_variance() {
        let x = data(3);
        let mut v = with("n_components", HyperValue::Integer(2));
        v.insert("whiten".into(), HyperValue::Categorical("true".into()));
        let p = Params { algorithm: "pca", values: &v };
        let z = Pca::fit(&p, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().transform(x.view());
        for j in 0..2 {
            assert!((z.column(j).var(1.0) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ica_output_is_white() {
        let x = data(4);
        for fun in ["logcosh", "exp", "cube"] {
            let mut v = with("n_components", HyperValue::Integer(3));
            v.insert("fun".into(), HyperValue::Categorical(fun.into()));
            let p = Params { algorithm: "fastICA", values: &v };
            let ica = FastIca::fit(&p, &x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let z = ica.transform(x.view());
            let cov = gram(z.view(), x.nrows() as f64);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((cov[[i, j]] - want).abs() < 1e-6, "{fun}");
                }
            }
        }
    }

    #[test]
    fn ica_rejects_rank_deficient_data() {
        let x = Array2::from_shape_fn((20, 3), |(i, _)| i as f64);
        let v = with("n_components", HyperValue::Integer(2));
        let p = Params { algorithm: "fastICA", values: &v };
        assert!(FastIca::fit(&p, &x, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
