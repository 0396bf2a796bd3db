//! Random forest: bagged CART trees with Gini impurity and sqrt(d) feature
//! subsampling per split. Prediction is the positive-vote fraction.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::util::derive_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 24,
            min_samples_split: 2,
        }
    }
}

/// Flat node storage; `left`/`right` index into the tree's node vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        positive: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> bool {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { positive } => return *positive,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub n_features: usize,
}

impl RandomForest {
    /// Fraction of trees voting positive.
    pub fn score(&self, x: &[f64]) -> f64 {
        let votes = self.trees.iter().filter(|t| t.predict(x)).count();
        votes as f64 / self.trees.len() as f64
    }
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [bool],
    params: &'a ForestParams,
    n_sub_features: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, indices: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let pos = indices.iter().filter(|&&i| self.labels[i]).count();
        let make_leaf = pos == 0
            || pos == indices.len()
            || depth >= self.params.max_depth
            || indices.len() < self.params.min_samples_split;
        if make_leaf {
            self.nodes.push(TreeNode::Leaf {
                positive: 2 * pos >= indices.len(),
            });
            return self.nodes.len() - 1;
        }

        let n_features = self.features[0].len();
        let mut candidates: Vec<usize> = (0..n_features).collect();
        candidates.shuffle(rng);
        candidates.truncate(self.n_sub_features);

        let parent_gini = gini(pos, indices.len());
        let mut best: Option<(f64, usize, f64)> = None; // (impurity decrease, feature, threshold)
        for &feature in &candidates {
            let mut values: Vec<(f64, bool)> = indices
                .iter()
                .map(|&i| (self.features[i][feature], self.labels[i]))
                .collect();
            values.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let total = values.len();
            let mut left_pos = 0usize;
            for split_at in 1..total {
                if values[split_at - 1].1 {
                    left_pos += 1;
                }
                if values[split_at].0 == values[split_at - 1].0 {
                    continue; // identical value, not a valid cut point
                }
                let right_pos = pos - left_pos;
                let w_left = split_at as f64 / total as f64;
                let w_right = 1.0 - w_left;
                let decrease = parent_gini
                    - w_left * gini(left_pos, split_at)
                    - w_right * gini(right_pos, total - split_at);
                if best.map_or(true, |(d, _, _)| decrease > d) {
                    let threshold = 0.5 * (values[split_at - 1].0 + values[split_at].0);
                    best = Some((decrease, feature, threshold));
                }
            }
        }

        let Some((decrease, feature, threshold)) = best else {
            self.nodes.push(TreeNode::Leaf {
                positive: 2 * pos >= indices.len(),
            });
            return self.nodes.len() - 1;
        };
        if decrease <= 0.0 {
            self.nodes.push(TreeNode::Leaf {
                positive: 2 * pos >= indices.len(),
            });
            return self.nodes.len() - 1;
        }

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
            .into_iter()
            .partition(|&i| self.features[i][feature] <= threshold);
        let placeholder = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { positive: false });
        let left = self.build(left_idx, depth + 1, rng);
        let right = self.build(right_idx, depth + 1, rng);
        self.nodes[placeholder] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        placeholder
    }
}

/// Fit one tree on a bootstrap sample drawn from the tree's own seeded RNG.
pub fn grow_tree(
    features: &[Vec<f64>],
    labels: &[bool],
    params: &ForestParams,
    seed: u64,
) -> DecisionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = features.len();
    let bootstrap: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let n_sub = (features[0].len() as f64).sqrt().round().max(1.0) as usize;
    let mut builder = TreeBuilder {
        features,
        labels,
        params,
        n_sub_features: n_sub,
        nodes: Vec::new(),
    };
    builder.build(bootstrap, 0, &mut rng);
    DecisionTree {
        nodes: builder.nodes,
    }
}

/// Train a forest. Trees grow in parallel with per-tree derived seeds, so
/// the result is identical regardless of scheduling.
pub fn train_random_forest(
    features: &[Vec<f64>],
    labels: &[bool],
    params: &ForestParams,
    seed: u64,
) -> RandomForest {
    assert!(!features.is_empty());
    let trees: Vec<DecisionTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|i| grow_tree(features, labels, params, derive_seed(seed, &[i as u64])))
        .collect();
    RandomForest {
        trees,
        n_features: features[0].len(),
    }
}

/// Append `extra` freshly grown trees (used by personalization); existing
/// trees are untouched.
pub fn extend_forest(
    forest: &RandomForest,
    features: &[Vec<f64>],
    labels: &[bool],
    params: &ForestParams,
    extra: usize,
    seed: u64,
) -> RandomForest {
    let mut out = forest.clone();
    let new_trees: Vec<DecisionTree> = (0..extra)
        .into_par_iter()
        .map(|i| {
            grow_tree(
                features,
                labels,
                params,
                derive_seed(seed, &[0xadd, i as u64]),
            )
        })
        .collect();
    out.trees.extend(new_trees);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn threshold_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let v: f64 = rng.gen_range(-1.0..1.0);
            let noise1: f64 = rng.gen_range(-1.0..1.0);
            xs.push(vec![v, noise1]);
            ys.push(v > 0.15);
        }
        (xs, ys)
    }

    #[test]
    fn separable_data_classified_perfectly() {
        let (xs, ys) = threshold_data(200, 1);
        let forest = train_random_forest(
            &xs,
            &ys,
            &ForestParams {
                n_trees: 15,
                ..ForestParams::default()
            },
            7,
        );
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| (forest.score(x) >= 0.5) == y)
            .count();
        assert_eq!(correct, xs.len());
    }

    #[test]
    fn scores_are_vote_fractions() {
        let (xs, ys) = threshold_data(100, 2);
        let forest = train_random_forest(
            &xs,
            &ys,
            &ForestParams {
                n_trees: 8,
                ..ForestParams::default()
            },
            3,
        );
        for x in &xs {
            let s = forest.score(x);
            let eighth = (s * 8.0).round() / 8.0;
            assert!((s - eighth).abs() < 1e-12, "{s} is not k/8");
        }
    }

    #[test]
    fn same_seed_identical_forest() {
        let (xs, ys) = threshold_data(80, 3);
        let a = train_random_forest(&xs, &ys, &ForestParams::default(), 11);
        let b = train_random_forest(&xs, &ys, &ForestParams::default(), 11);
        assert_eq!(a, b);
    }

    #[test]
    fn extension_preserves_existing_trees() {
        let (xs, ys) = threshold_data(80, 4);
        let params = ForestParams {
            n_trees: 10,
            ..ForestParams::default()
        };
        let base = train_random_forest(&xs, &ys, &params, 5);
        let extended = extend_forest(&base, &xs, &ys, &params, 100, 6);
        assert_eq!(extended.trees.len(), 110);
        assert_eq!(&extended.trees[..10], &base.trees[..]);
    }
}
