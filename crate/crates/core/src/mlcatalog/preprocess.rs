use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use super::linalg::{column_means, column_variances};
use super::{class_counts, failure, MlError, Params, TrainView, Transformer};

#[derive(Debug)]
pub struct StandardScaler {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl StandardScaler {
    pub fn fit(x: &Array2<f64>) -> Self {
        let mean = column_means(x);
        let ddof = if x.nrows() > 1 { 1.0 } else { 0.0 };
        let scale = x
            .var_axis(Axis(0), ddof)
            .mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }
}

impl Transformer for StandardScaler {
    fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

#[derive(Debug)]
pub struct MinMaxScaler {
    min: Array1<f64>,
    range: Array1<f64>,
}

impl MinMaxScaler {
    pub fn fit(x: &Array2<f64>) -> Self {
        let min = x.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b));
        let max = x.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
        let range = (&max - &min).mapv(|r| if r > 0.0 { r } else { 1.0 });
        Self { min, range }
    }
}

impl Transformer for MinMaxScaler {
    fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.min) / &self.range
    }
}

/// Keeps a subset of the input columns.
#[derive(Debug)]
pub struct ColumnSelect {
    columns: Vec<usize>,
}

impl Transformer for ColumnSelect {
    fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.select(Axis(1), &self.columns)
    }
}

pub struct VarianceThreshold;

impl VarianceThreshold {
    pub fn fit(p: &Params, x: &Array2<f64>) -> Result<ColumnSelect, MlError> {
        let threshold = p.float("threshold", 0.0)?;
        let columns: Vec<usize> = column_variances(x)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > threshold)
            .map(|(j, _)| j)
            .collect();
        if columns.is_empty() {
            return Err(failure("varianceThreshold", "no feature meets the variance threshold"));
        }
        Ok(ColumnSelect { columns })
    }
}

pub struct SelectKBest;

impl SelectKBest {
    pub fn fit(p: &Params, d: &TrainView) -> Result<ColumnSelect, MlError> {
        let k = p.int("k", 10)?.max(1) as usize;
        let scores = match p.cat("score_func", &["f_classif", "chi2"])? {
            "chi2" => chi2(d)?,
            _ => f_classif(d),
        };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // NaN scores (constant features) rank last; ties keep column order.
        order.sort_by(|&a, &b| {
            let (sa, sb) = (scores[a], scores[b]);
            match (sa.is_nan(), sb.is_nan()) {
                (true, false) => std::cmp::Ordering::Greater,
                (false, true) => std::cmp::Ordering::Less,
                (true, true) => a.cmp(&b),
                _ => sb.total_cmp(&sa).then(a.cmp(&b)),
            }
        });
        let mut columns: Vec<usize> = order.into_iter().take(k).collect();
        columns.sort_unstable();
        Ok(ColumnSelect { columns })
    }
}

/// One-way ANOVA F statistic per column.
pub fn f_classif(d: &TrainView) -> Vec<f64> {
    let n = d.x.nrows();
    let counts = class_counts(d.y, d.n_classes);
    let groups = counts.iter().filter(|&&c| c > 0).count();
    (0..d.x.ncols())
        .map(|j| {
            let col = d.x.column(j);
            let grand = col.sum() / n as f64;
            let mut sums = vec![0.0; d.n_classes];
            for (v, &c) in col.iter().zip(d.y) {
                sums[c] += v;
            }
            let mut between = 0.0;
            for c in 0..d.n_classes {
                if counts[c] > 0 {
                    let m = sums[c] / counts[c] as f64;
                    between += counts[c] as f64 * (m - grand).powi(2);
                }
            }
            let within: f64 = col
                .iter()
                .zip(d.y)
                .map(|(v, &c)| (v - sums[c] / counts[c] as f64).powi(2))
                .sum();
            let df_b = groups.saturating_sub(1) as f64;
            let df_w = n.saturating_sub(groups) as f64;
            if df_b == 0.0 || df_w == 0.0 {
                return f64::NAN;
            }
            let f = (between / df_b) / (within / df_w);
            if f.is_finite() {
                f
            } else if between > 0.0 {
                f64::INFINITY
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Chi-squared statistic of class-summed feature values against the
/// class-frequency expectation; needs non-negative input.
pub fn chi2(d: &TrainView) -> Result<Vec<f64>, MlError> {
    if d.x.iter().any(|&v| v < 0.0) {
        return Err(failure("selectKBest", "chi2 requires non-negative features"));
    }
    let n = d.x.nrows() as f64;
    let counts = class_counts(d.y, d.n_classes);
    Ok((0..d.x.ncols())
        .map(|j| {
            let col = d.x.column(j);
            let total = col.sum();
            let mut observed = vec![0.0; d.n_classes];
            for (v, &c) in col.iter().zip(d.y) {
                observed[c] += v;
            }
            let mut stat = 0.0;
            for c in 0..d.n_classes {
                let expected = total * counts[c] as f64 / n;
                if expected > 0.0 {
                    stat += (observed[c] - expected).powi(2) / expected;
                }
            }
            if total > 0.0 {
                stat
            } else {
                f64::NAN
            }
        })
        .collect())
}

/// Averages clusters of similar features, found bottom-up.
#[derive(Debug)]
pub struct FeatureAgglomeration {
    clusters: Vec<Vec<usize>>,
}

impl FeatureAgglomeration {
    pub fn fit(p: &Params, x: &Array2<f64>) -> Result<Self, MlError> {
        let target = (p.int("n_clusters", 2)?.max(1) as usize).min(x.ncols());
        let linkage = p.cat("linkage", &["ward", "complete", "average"])?;
        let d = x.ncols();
        let mut clusters: Vec<Vec<usize>> = (0..d).map(|j| vec![j]).collect();
        // Pairwise distances between active clusters; ward works on squared
        // Euclidean distances through the Lance-Williams update.
        let mut dist = Array2::<f64>::zeros((d, d));
        for a in 0..d {
            for b in a + 1..d {
                let sq: f64 = x
                    .column(a)
                    .iter()
                    .zip(x.column(b).iter())
                    .map(|(u, v)| (u - v).powi(2))
                    .sum();
                let v = if linkage == "ward" { sq } else { sq.sqrt() };
                dist[[a, b]] = v;
                dist[[b, a]] = v;
            }
        }
        let mut active: Vec<usize> = (0..d).collect();
        while active.len() > target {
            let mut best = (f64::INFINITY, 0, 0);
            for (ia, &a) in active.iter().enumerate() {
                for &b in &active[ia + 1..] {
                    if dist[[a, b]] < best.0 {
                        best = (dist[[a, b]], a, b);
                    }
                }
            }
            let (_, i, j) = best;
            let (ni, nj) = (clusters[i].len() as f64, clusters[j].len() as f64);
            for &k in &active {
                if k == i || k == j {
                    continue;
                }
                let nk = clusters[k].len() as f64;
                let merged = match linkage {
                    "ward" => {
                        ((ni + nk) * dist[[k, i]] + (nj + nk) * dist[[k, j]] - nk * dist[[i, j]]) / (ni + nj + nk)
                    }
                    "complete" => dist[[k, i]].max(dist[[k, j]]),
                    _ => (ni * dist[[k, i]] + nj * dist[[k, j]]) / (ni + nj),
                };
                dist[[k, i]] = merged;
                dist[[i, k]] = merged;
            }
            let moved = std::mem::take(&mut clusters[j]);
            clusters[i].extend(moved);
            active.retain(|&k| k != j);
        }
        let mut clusters: Vec<Vec<usize>> = active
            .into_iter()
            .map(|k| {
                let mut c = clusters[k].clone();
                c.sort_unstable();
                c
            })
            .collect();
        clusters.sort();
        Ok(Self { clusters })
    }
}

impl Transformer for FeatureAgglomeration {
    fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.clusters.len()));
        for (k, cols) in self.clusters.iter().enumerate() {
            let mean = x.select(Axis(1), cols).mean_axis(Axis(1)).expect("non-empty cluster");
            out.column_mut(k).assign(&mean);
        }
        out
    }
}

/// Random under- or oversampling of whole rows, per class.
pub fn resample(
    algorithm: &str,
    p: &Params,
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    rng: &mut dyn RngCore,
) -> Result<(Array2<f64>, Vec<usize>), MlError> {
    let counts = class_counts(y, n_classes);
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    let min = present.iter().map(|&c| counts[c]).min().unwrap_or(0);
    let max = present.iter().map(|&c| counts[c]).max().unwrap_or(0);
    // Majority/minority ties resolve to the lowest class id.
    let majority = present.iter().copied().find(|&c| counts[c] == max);
    let minority = present.iter().copied().find(|&c| counts[c] == min);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in y.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut keep: Vec<usize> = Vec::with_capacity(y.len());
    if algorithm == "rus" {
        let strategy = p.cat("sampling_strategy", &["majority", "not_minority", "all"])?;
        for &c in &present {
            let target = match strategy {
                "majority" if Some(c) == majority => min,
                "not_minority" if Some(c) != minority => min,
                "all" => min,
                _ => counts[c],
            };
            let mut rows = by_class[c].clone();
            if target < rows.len() {
                rows.shuffle(rng);
                rows.truncate(target);
                rows.sort_unstable();
            }
            keep.extend(rows);
        }
    } else {
        let strategy = p.cat("sampling_strategy", &["minority", "not_majority", "all"])?;
        for &c in &present {
            let target = match strategy {
                "minority" if Some(c) == minority => max,
                "not_majority" if Some(c) != majority => max,
                "all" => max,
                _ => counts[c],
            };
            let rows = &by_class[c];
            keep.extend(rows);
            for _ in rows.len()..target {
                keep.push(rows[rng.gen_range(0..rows.len())]);
            }
        }
    }
    if keep.is_empty() {
        return Err(failure(algorithm, "no rows left"));
    }
    Ok((x.select(Axis(0), &keep), keep.iter().map(|&i| y[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::HyperValue;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, HyperValue)]) -> BTreeMap<String, HyperValue> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn cat(s: &str) -> HyperValue {
        HyperValue::Categorical(s.into())
    }

    #[test]
    fn standard_scaler_moments() {
        let x = array![[1.0, 5.0, 2.0], [2.0, 5.0, 4.0], [4.0, 5.0, 9.0], [7.0, 5.0, 1.0]];
        let z = StandardScaler::fit(&x).transform(x.view());
        for j in 0..3 {
            let col = z.column(j);
            assert!(col.mean().unwrap().abs() < 1e-9);
            if j != 1 {
                assert!((col.var(1.0).sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn min_max_range() {
        let x = array![[1.0, -2.0], [3.0, 2.0], [2.0, 0.0]];
        let z = MinMaxScaler::fit(&x).transform(x.view());
        assert_eq!(z, array![[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]]);
    }

    #[test]
    fn variance_threshold_drops_constant_and_fails_when_empty() {
        let x = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]];
        let v = params(&[("threshold", HyperValue::Float(0.0))]);
        let p = Params { algorithm: "varianceThreshold", values: &v };
        assert_eq!(VarianceThreshold::fit(&p, &x).unwrap().columns, vec![1]);
        let v = params(&[("threshold", HyperValue::Float(10.0))]);
        let p = Params { algorithm: "varianceThreshold", values: &v };
        assert!(VarianceThreshold::fit(&p, &x).is_err());
    }

    #[test]
    fn f_classif_matches_hand_anova() {
        // groups {1,2,3} and {5,6,7}: between = 2*3*... computed by hand
        let x = array![[1.0], [2.0], [3.0], [5.0], [6.0], [7.0]];
        let y = [0, 0, 0, 1, 1, 1];
        let d = TrainView { x: &x, y: &y, n_classes: 2 };
        // grand mean 4; between = 3*(2-4)^2 + 3*(6-4)^2 = 24 (df 1)
        // within = 2 + 2 = 4 (df 4) -> F = 24 / 1 = 24
        assert!((f_classif(&d)[0] - 24.0).abs() < 1e-12);
    }

    #[test]
    fn chi2_rejects_negative() {
        let x = array![[-1.0], [1.0]];
        let y = [0, 1];
        let d = TrainView { x: &x, y: &y, n_classes: 2 };
        assert!(chi2(&d).is_err());
    }

    #[test]
    fn select_k_best_keeps_informative_column() {
        let x = array![[0.3, 1.0], [0.1, 1.1], [0.2, 9.0], [0.3, 9.2]];
        let y = [0, 0, 1, 1];
        let v = params(&[("k", HyperValue::Integer(1)), ("score_func", cat("f_classif"))]);
        let p = Params { algorithm: "selectKBest", values: &v };
        let d = TrainView { x: &x, y: &y, n_classes: 2 };
        assert_eq!(SelectKBest::fit(&p, &d).unwrap().columns, vec![1]);
    }

    #[test]
    fn agglomeration_merges_nearest_features() {
        let x = array![[0.0, 0.1, 10.0], [1.0, 1.1, 20.0], [2.0, 2.1, 30.0]];
        for linkage in ["ward", "complete", "average"] {
            let v = params(&[("n_clusters", HyperValue::Integer(2)), ("linkage", cat(linkage))]);
            let p = Params { algorithm: "fagg", values: &v };
            let f = FeatureAgglomeration::fit(&p, &x).unwrap();
            assert_eq!(f.clusters, vec![vec![0, 1], vec![2]], "{linkage}");
            let z = f.transform(x.view());
            assert!((z[[0, 0]] - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn undersampling_majority_balances_counts() {
        let x = Array2::zeros((150, 1));
        let y: Vec<usize> = (0..150).map(|i| usize::from(i >= 100)).collect();
        let v = params(&[("sampling_strategy", cat("majority"))]);
        let p = Params { algorithm: "rus", values: &v };
        let (nx, ny) = resample("rus", &p, &x, &y, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(nx.nrows(), 100);
        assert_eq!(class_counts(&ny, 2), vec![50, 50]);
    }

    #[test]
    fn sampling_strategies_follow_brute_force_targets() {
        let y: Vec<usize> = [vec![0; 10], vec![1; 4], vec![2; 7]].concat();
        let x = Array2::zeros((y.len(), 1));
        let cases = [
            ("rus", "majority", vec![4, 4, 7]),
            ("rus", "not_minority", vec![4, 4, 4]),
            ("rus", "all", vec![4, 4, 4]),
            ("ros", "minority", vec![10, 10, 7]),
            ("ros", "not_majority", vec![10, 10, 10]),
            ("ros", "all", vec![10, 10, 10]),
        ];
        for (alg, strategy, expect) in cases {
            let v = params(&[("sampling_strategy", cat(strategy))]);
            let p = Params { algorithm: alg, values: &v };
            let (_, ny) = resample(alg, &p, &x, &y, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(class_counts(&ny, 3), expect, "{alg} {strategy}");
        }
    }
}
