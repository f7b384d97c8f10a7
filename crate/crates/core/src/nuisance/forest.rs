//! Bagged CART regression trees.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until the leaf-size limits stop splitting.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub min_split: usize,
    /// Features examined per split; `None` examines all of them.
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, max_depth: None, min_leaf: 4, min_split: 10, max_features: None }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::Config("min_leaf must be at least 1".into()));
        }
        if self.max_features == Some(0) {
            return Err(Error::Config("max_features must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

struct Builder<'a, R: Rng> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng> Builder<'_, R> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let n = idx.len();
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n as f64;
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
        if !depth_ok || pure || n < self.params.min_split.max(2 * self.params.min_leaf) {
            return slot;
        }
        let Some((feature, threshold)) = self.best_split(idx) else {
            return slot;
        };
        let split_at = partition(idx, |i| self.x[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(split_at);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[slot] = Node::Split { feature, threshold, left, right };
        slot
    }

    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64)> {
        let p = self.x[idx[0]].len();
        let mut features: Vec<usize> = (0..p).collect();
        let m = self.params.max_features.unwrap_or(p).min(p);
        if m < p {
            features.shuffle(self.rng);
            features.truncate(m);
        }
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let base = total * total / n as f64;
        let min_leaf = self.params.min_leaf;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for &f in &features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for pos in 0..n - 1 {
                left_sum += self.y[order[pos]];
                let n_left = pos + 1;
                if n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let (a, b) = (self.x[order[pos]][f], self.x[order[pos + 1]][f]);
                if a == b {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - base;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn partition<F: Fn(usize) -> bool>(idx: &mut [usize], left: F) -> usize {
    let mut store = 0;
    for i in 0..idx.len() {
        if left(idx[i]) {
            idx.swap(store, i);
            store += 1;
        }
    }
    store
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    trees: Vec<Tree>,
}

impl ForestModel {
    pub fn fit(features: &[Vec<f64>], targets: &[f64], params: &ForestParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let n = features.len();
        if n == 0 {
            return Err(Error::Data("empty training set".into()));
        }
        let trees = (0..params.n_trees)
            .map(|t| {
                let mut rng = rng::stream(seed, "forest-tree", t as u64);
                let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut b = Builder { x: features, y: targets, params, rng: &mut rng, nodes: Vec::new() };
                b.grow(&mut idx, 0);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(ForestModel { trees })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}
