use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};

pub const POWER_TOL: f64 = 1e-7;
pub const POWER_MAX_ITER: usize = 500;

pub fn column_means(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}

/// Population variance per column.
pub fn column_variances(x: &Array2<f64>) -> Array1<f64> {
    x.var_axis(Axis(0), 0.0)
}

/// `x^T x` of an already centred (or raw) matrix, divided by `denom`.
pub fn gram(x: ArrayView2<f64>, denom: f64) -> Array2<f64> {
    x.t().dot(&x) / denom
}

/// Leading `k` eigenpairs of a symmetric positive semi-definite matrix by
/// power iteration with deflation. Eigenvalues come out in descending order.
pub fn top_eigen(a: &Array2<f64>, k: usize, rng: &mut dyn RngCore) -> (Vec<f64>, Vec<Array1<f64>>) {
    let d = a.nrows();
    let mut m = a.clone();
    let mut values = Vec::with_capacity(k);
    let mut vectors: Vec<Array1<f64>> = Vec::with_capacity(k);
    for _ in 0..k.min(d) {
        let mut v: Array1<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        orthogonalise(&mut v, &vectors);
        normalise(&mut v);
        for _ in 0..POWER_MAX_ITER {
            let mut next = m.dot(&v);
            orthogonalise(&mut next, &vectors);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-300 {
                // Remaining spectrum is zero; any orthogonal direction will do.
                break;
            }
            next /= norm;
            let delta = (&next - &v).mapv(f64::abs).sum().min((&next + &v).mapv(f64::abs).sum());
            v = next;
            if delta < POWER_TOL {
                break;
            }
        }
        let lambda = v.dot(&m.dot(&v)).max(0.0);
        // Sign convention: largest-magnitude coordinate positive.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        let outer = outer(&v, &v) * lambda;
        m -= &outer;
        values.push(lambda);
        vectors.push(v);
    }
    (values, vectors)
}

fn orthogonalise(v: &mut Array1<f64>, basis: &[Array1<f64>]) {
    for b in basis {
        let p = v.dot(b);
        v.scaled_add(-p, b);
    }
}

fn normalise(v: &mut Array1<f64>) {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    } else if !v.is_empty() {
        v[0] = 1.0;
    }
}

pub fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut o = Array2::zeros((a.len(), b.len()));
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            o[[i, j]] = x * y;
        }
    }
    o
}

/// Stacks vectors as the rows of a matrix.
pub fn rows(vs: &[Array1<f64>], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((vs.len(), width));
    for (i, v) in vs.iter().enumerate() {
        m.row_mut(i).assign(v);
    }
    m
}

pub fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_nalgebra(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Inverse square root of a symmetric positive definite matrix, or None
/// when it is numerically singular.
pub fn inv_sqrt_sym(a: &Array2<f64>) -> Option<Array2<f64>> {
    let eig = to_nalgebra(a).symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    if eig.eigenvalues.iter().any(|&l| l <= 1e-12 * max.max(1e-300)) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let r = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Some(from_nalgebra(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn power_iteration_matches_known_spectrum() {
        let a = array![[4.0, 1.0, 0.0], [1.0, 3.0, 0.0], [0.0, 0.0, 1.0]];
        let (vals, vecs) = top_eigen(&a, 3, &mut ChaCha8Rng::seed_from_u64(0));
        // eigenvalues of the 2x2 block: (7 ± sqrt(5)) / 2
        let expect = [(7.0 + 5f64.sqrt()) / 2.0, (7.0 - 5f64.sqrt()) / 2.0, 1.0];
        for (v, e) in vals.iter().zip(expect) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
        for (v, l) in vecs.iter().zip(&vals) {
            let r = a.dot(v) - v * *l;
            assert!(r.mapv(f64::abs).sum() < 1e-5);
        }
    }

    #[test]
    fn inverse_square_root() {
        let a = array![[4.0, 0.0], [0.0, 9.0]];
        let r = inv_sqrt_sym(&a).unwrap();
        assert!((r[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((r[[1, 1]] - 1.0 / 3.0).abs() < 1e-12);
        assert!(inv_sqrt_sym(&array![[1.0, 1.0], [1.0, 1.0]]).is_none());
    }
}
