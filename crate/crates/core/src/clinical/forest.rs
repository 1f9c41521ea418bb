//! Random forest: bagged Gini trees with sqrt(p) feature subsampling.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fx;
use crate::linalg::Matrix;
use crate::rng::{stream, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 200, max_depth: 8, min_leaf: 5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { p: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { p } => return *p,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<Tree>,
    constant: Option<f64>,
    /// Set when the training labels were single-class.
    pub warning: Option<String>,
}

impl RandomForest {
    /// Mean leaf positive frequency across trees.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [bool],
    cfg: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    /// Grow a node over `idx` (indices into bootstrap rows); returns node id.
    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let leaf_p = pos as f64 / idx.len() as f64;
        let impurity = gini(pos, idx.len());
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf || impurity == 0.0 {
            self.nodes.push(Node::Leaf { p: leaf_p });
            return self.nodes.len() - 1;
        }
        // Feature subsample without replacement.
        let p_features = self.x.cols();
        let mut features: Vec<usize> = (0..p_features).collect();
        for i in 0..self.mtry.min(p_features) {
            let j = rng.gen_range(i..p_features);
            features.swap(i, j);
        }
        features.truncate(self.mtry.min(p_features));
        features.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None; // (weighted child gini, feature, threshold)
        for &f in &features {
            let mut vals: Vec<(f64, bool)> =
                idx.iter().map(|&i| (self.x.get(i, f), self.y[i])).collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total_pos = pos;
            let mut left_n = 0;
            let mut left_pos = 0;
            for w in 0..vals.len() - 1 {
                left_n += 1;
                if vals[w].1 {
                    left_pos += 1;
                }
                if vals[w].0 == vals[w + 1].0 {
                    continue;
                }
                let right_n = vals.len() - left_n;
                if left_n < self.cfg.min_leaf || right_n < self.cfg.min_leaf {
                    continue;
                }
                let right_pos = total_pos - left_pos;
                let score = (left_n as f64 * gini(left_pos, left_n)
                    + right_n as f64 * gini(right_pos, right_n))
                    / vals.len() as f64;
                let threshold = 0.5 * (vals[w].0 + vals[w + 1].0);
                let better = match best {
                    None => score < impurity - 1e-12,
                    Some((s, _, _)) => score < s - 1e-12,
                };
                if better {
                    best = Some((score, f, threshold));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            self.nodes.push(Node::Leaf { p: leaf_p });
            return self.nodes.len() - 1;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x.get(i, feature) <= threshold);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { p: leaf_p }); // placeholder
        let left = self.grow(&left_idx, depth + 1, rng);
        let right = self.grow(&right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Split { feature, threshold, left, right };
        slot
    }
}

/// Fit bagged Gini trees; deterministic under the config seed. Single-class
/// labels yield a constant predictor with a warning attached.
pub fn fit_random_forest(x: &Matrix, y: &[bool], cfg: &ForestConfig) -> Result<RandomForest> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Empty("fit_random_forest: empty design matrix".to_string()));
    }
    if y.len() != n {
        return Err(Error::Shape("fit_random_forest: label length mismatch".to_string()));
    }
    if cfg.n_trees == 0 || cfg.min_leaf == 0 {
        return Err(Error::Config("n_trees and min_leaf must be positive".to_string()));
    }
    let pos = y.iter().filter(|&&b| b).count();
    if pos == 0 || pos == n {
        let p = if pos == 0 { 0.0 } else { 1.0 };
        return Ok(RandomForest {
            trees: Vec::new(),
            constant: Some(p),
            warning: Some("single-class labels: constant predictor".to_string()),
        });
    }
    let mtry = (fx::ceil(fx::sqrt(x.cols() as f64)) as usize).max(1);
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        let mut rng = stream(cfg.seed, &[tags::FOREST, t as u64]);
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let mut builder = Builder { x, y, cfg, mtry, nodes: Vec::new() };
        builder.grow(&idx, 0, &mut rng);
        trees.push(Tree { nodes: builder.nodes });
    }
    Ok(RandomForest { trees, constant: None, warning: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn constant_labels_give_constant_predictor() {
        let x = Matrix::from_fn(10, 3, |r, c| (r * 3 + c) as f64);
        let y = vec![true; 10];
        let model = fit_random_forest(&x, &y, &ForestConfig::default()).unwrap();
        assert!(model.warning.is_some());
        assert_eq!(model.predict_proba(&[0.0, 0.0, 0.0]), 1.0);
    }

    #[test]
    fn forests_fit_xor() {
        let mut rng = crate::rng::stream(5, &[1]);
        let n = 200;
        let mut x = Matrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            x.set(i, 0, a);
            x.set(i, 1, b);
            y.push((a > 0.0) != (b > 0.0));
        }
        let cfg = ForestConfig { n_trees: 100, max_depth: 8, min_leaf: 2, seed: 7 };
        let model = fit_random_forest(&x, &y, &cfg).unwrap();
        let scores: Vec<f64> = (0..n).map(|i| model.predict_proba(x.row(i))).collect();
        assert!(brute_auc(&scores, &y) > 0.95);
    }

    #[test]
    fn seeded_fits_are_identical() {
        let x = Matrix::from_fn(60, 4, |r, c| ((r * 13 + c * 7) % 17) as f64 * 0.3);
        let y: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let cfg = ForestConfig { n_trees: 25, ..ForestConfig::default() };
        let a = fit_random_forest(&x, &y, &cfg).unwrap();
        let b = fit_random_forest(&x, &y, &cfg).unwrap();
        for i in 0..60 {
            assert_eq!(a.predict_proba(x.row(i)), b.predict_proba(x.row(i)));
        }
    }
}
