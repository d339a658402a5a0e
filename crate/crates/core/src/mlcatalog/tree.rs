use ndarray::ArrayView2;
use rand::{Rng, RngCore};

use super::{argmax, Classifier, MlError, Params, TrainView};

#[derive(Debug)]
enum TreeNode {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Copy, PartialEq)]
enum Criterion {
    Gini,
    Entropy,
}

impl Criterion {
    fn impurity(self, counts: &[usize], total: usize) -> f64 {
        if total == 0 {
            return 0.0;
        }
        let n = total as f64;
        match self {
            Criterion::Gini => 1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>(),
            Criterion::Entropy => -counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    p * p.log2()
                })
                .sum::<f64>(),
        }
    }
}

/// Binary classification tree. The randomised variant draws one uniform
/// threshold per feature instead of scanning all cut points.
#[derive(Debug)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

struct Builder<'a> {
    d: &'a TrainView<'a>,
    criterion: Criterion,
    max_depth: usize,
    randomised: bool,
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn fit(p: &Params, d: &TrainView, randomised: bool, rng: &mut dyn RngCore) -> Result<Self, MlError> {
        let criterion = match p.cat("criterion", &["gini", "entropy"])? {
            "entropy" => Criterion::Entropy,
            _ => Criterion::Gini,
        };
        let max_depth = p.int("maxDepth", 20)?.max(1) as usize;
        let mut b = Builder {
            d,
            criterion,
            max_depth,
            randomised,
            nodes: Vec::new(),
        };
        let all: Vec<usize> = (0..d.y.len()).collect();
        b.build(all, 0, rng);
        Ok(Self { nodes: b.nodes })
    }
}

impl Builder<'_> {
    fn counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.d.n_classes];
        for &r in rows {
            c[self.d.y[r]] += 1;
        }
        c
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize, rng: &mut dyn RngCore) -> usize {
        let counts = self.counts(&rows);
        let majority = argmax(counts.iter().map(|&c| c as f64));
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(majority));
        if pure || depth >= self.max_depth || rows.len() < 2 {
            return id;
        }
        let split = if self.randomised {
            self.random_split(&rows, rng)
        } else {
            self.best_split(&rows)
        };
        let Some((feature, threshold)) = split else {
            return id;
        };
        let x = self.d.x;
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[[i, feature]] <= threshold);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64)> {
        let x = self.d.x;
        let k = self.d.n_classes;
        let n = rows.len();
        let total = self.counts(rows);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for f in 0..x.ncols() {
            sorted.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
            let mut left = vec![0usize; k];
            for i in 0..n - 1 {
                left[self.d.y[sorted[i]]] += 1;
                let (v, next) = (x[[sorted[i], f]], x[[sorted[i + 1], f]]);
                if v == next {
                    continue;
                }
                let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let nl = i + 1;
                let score = nl as f64 * self.criterion.impurity(&left, nl)
                    + (n - nl) as f64 * self.criterion.impurity(&right, n - nl);
                if best.is_none_or(|(s, _, _)| score < s - 1e-12) {
                    let mut threshold = v + (next - v) / 2.0;
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some((score, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn random_split(&self, rows: &[usize], rng: &mut dyn RngCore) -> Option<(usize, f64)> {
        let x = self.d.x;
        let n = rows.len();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..x.ncols() {
            let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(x[[i, f]]), hi.max(x[[i, f]]))
            });
            if lo >= hi {
                continue;
            }
            let mut threshold = rng.gen_range(lo..hi);
            if threshold >= hi {
                threshold = lo;
            }
            let mut left = vec![0usize; self.d.n_classes];
            let mut right = vec![0usize; self.d.n_classes];
            for &i in rows {
                if x[[i, f]] <= threshold {
                    left[self.d.y[i]] += 1;
                } else {
                    right[self.d.y[i]] += 1;
                }
            }
            let nl: usize = left.iter().sum();
            let score = nl as f64 * self.criterion.impurity(&left, nl)
                + (n - nl) as f64 * self.criterion.impurity(&right, n - nl);
            if best.is_none_or(|(s, _, _)| score < s - 1e-12) {
                best = Some((score, f, threshold));
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

impl Classifier for DecisionTree {
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        x.outer_iter()
            .map(|row| {
                let mut at = 0;
                loop {
                    match &self.nodes[at] {
                        TreeNode::Leaf(c) => return *c,
                        TreeNode::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => at = if row[*feature] <= *threshold { *left } else { *right },
                    }
                }
            })
            .collect()
    }
}
