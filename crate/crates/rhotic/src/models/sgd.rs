//! Logistic-loss linear classifier trained by per-sample stochastic
//! gradient descent with a seeded shuffle each epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::sigmoid;
use crate::util::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for SgdParams {
    fn default() -> Self {
        SgdParams {
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdLinear {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub epochs_trained: usize,
}

impl SgdLinear {
    pub fn new(n_features: usize) -> SgdLinear {
        SgdLinear {
            weights: vec![0.0; n_features],
            bias: 0.0,
            epochs_trained: 0,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let z = self.bias
            + self
                .weights
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>();
        sigmoid(z)
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Run `epochs` additional passes of per-sample SGD.
    pub fn fit(&mut self, features: &[Vec<f64>], labels: &[bool], params: &SgdParams, seed: u64) {
        let mut order: Vec<usize> = (0..features.len()).collect();
        for epoch in 0..params.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[self.epochs_trained as u64 + epoch as u64],
            ));
            order.shuffle(&mut rng);
            for &i in &order {
                let x = &features[i];
                let err = self.score(x) - if labels[i] { 1.0 } else { 0.0 };
                for (w, &v) in self.weights.iter_mut().zip(x) {
                    *w -= params.learning_rate * (err * v + params.weight_decay * *w);
                }
                self.bias -= params.learning_rate * err;
            }
        }
        self.epochs_trained += params.epochs;
    }
}

/// Train from zero-initialized weights.
pub fn train_sgd_linear(
    features: &[Vec<f64>],
    labels: &[bool],
    params: &SgdParams,
    seed: u64,
) -> SgdLinear {
    let mut model = SgdLinear::new(features[0].len());
    model.fit(features, labels, params, seed);
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let pos = i % 2 == 0;
            let c = if pos { 1.0 } else { -1.0 };
            xs.push(vec![
                c + rng.gen_range(-0.4..0.4),
                -c + rng.gen_range(-0.4..0.4),
            ]);
            ys.push(pos);
        }
        (xs, ys)
    }

    #[test]
    fn separates_linear_blobs_exactly() {
        let (xs, ys) = blobs(100, 1);
        let model = train_sgd_linear(&xs, &ys, &SgdParams::default(), 4);
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(model.score(x) >= 0.5, y);
        }
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let (xs, ys) = blobs(20, 2);
        let model = train_sgd_linear(
            &xs,
            &ys,
            &SgdParams {
                epochs: 0,
                ..SgdParams::default()
            },
            1,
        );
        assert!(model.weights.iter().all(|&w| w == 0.0));
        assert_eq!(model.bias, 0.0);
        assert_eq!(model.epochs_trained, 0);
    }

    #[test]
    fn heavy_weight_decay_shrinks_norm() {
        let (xs, ys) = blobs(100, 3);
        let light = train_sgd_linear(
            &xs,
            &ys,
            &SgdParams {
                weight_decay: 1e-5,
                ..SgdParams::default()
            },
            9,
        );
        let heavy = train_sgd_linear(
            &xs,
            &ys,
            &SgdParams {
                weight_decay: 1e-1,
                ..SgdParams::default()
            },
            9,
        );
        assert!(heavy.weight_norm() < light.weight_norm());
    }

    #[test]
    fn additional_epochs_increment_counter() {
        let (xs, ys) = blobs(40, 4);
        let mut model = train_sgd_linear(&xs, &ys, &SgdParams::default(), 2);
        assert_eq!(model.epochs_trained, 20);
        model.fit(
            &xs,
            &ys,
            &SgdParams {
                epochs: 10,
                ..SgdParams::default()
            },
            2,
        );
        assert_eq!(model.epochs_trained, 30);
    }
}
