use ndarray::{Array2, ArrayView2};

use super::{argmax, Classifier, MlError, Params, TrainView};

#[derive(Debug)]
pub struct KNearest {
    k: usize,
    distance_weighted: bool,
    x: Array2<f64>,
    y: Vec<usize>,
    n_classes: usize,
}

impl KNearest {
    pub fn fit(p: &Params, d: &TrainView) -> Result<Self, MlError> {
        let k = (p.int("n_neighbors", 5)?.max(1) as usize).min(d.y.len());
        let distance_weighted = p.cat("weights", &["uniform", "distance"])? == "distance";
        Ok(Self {
            k,
            distance_weighted,
            x: d.x.clone(),
            y: d.y.to_vec(),
            n_classes: d.n_classes,
        })
    }
}

impl Classifier for KNearest {
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(self.y.len());
        x.outer_iter()
            .map(|q| {
                dist.clear();
                for (i, r) in self.x.outer_iter().enumerate() {
                    let sq: f64 = r.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    dist.push((sq, i));
                }
                // Ties in distance keep training order.
                dist.select_nth_unstable_by(self.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let nearest = &mut dist[..self.k];
                nearest.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut votes = vec![0.0; self.n_classes];
                let exact = nearest.iter().any(|(d, _)| *d == 0.0);
                for &(sq, i) in nearest.iter() {
                    let w = if !self.distance_weighted {
                        1.0
                    } else if exact {
                        // Exact matches take all the weight.
                        if sq == 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        1.0 / sq.sqrt()
                    };
                    votes[self.y[i]] += w;
                }
                argmax(votes)
            })
            .collect()
    }
}
