//! Random forest of Gini-split CART trees.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{plurality, Classifier, Label, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    pub seed: u64,
    /// Sample each tree's training set with replacement.
    pub bootstrap: bool,
    /// Dimensions tried per node; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    pub min_leaf: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            seed: 0,
            bootstrap: true,
            max_features: None,
            min_leaf: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        /// Taken when `x[feature] <= threshold`.
        left: usize,
        right: usize,
    },
    Leaf {
        counts: [u32; Label::COUNT],
    },
}

/// Arena-allocated tree; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_counts(&self, x: &[f64]) -> &[u32; Label::COUNT] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        let c = self.leaf_counts(x);
        plurality(&c.map(|v| v as usize))
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
}

impl ForestModel {
    /// Trees are grown in parallel; each tree draws from its own stream
    /// derived from `seed`, so the result does not depend on scheduling.
    pub fn train(ds: &LabeledDataset, cfg: &ForestConfig) -> Result<Self> {
        if cfg.trees == 0 {
            return Err(Error::invalid("a forest needs at least one tree"));
        }
        let dim = ds.dim();
        let max_features = cfg
            .max_features
            .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
            .clamp(1, dim);
        let trees = (0..cfg.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(t as u64);
                let n = ds.len();
                let rows: Vec<usize> = if cfg.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut builder = Builder {
                    ds,
                    max_features,
                    min_leaf: cfg.min_leaf.max(1),
                    rng,
                    nodes: Vec::new(),
                };
                builder.grow(rows);
                Tree { nodes: builder.nodes }
            })
            .collect();
        Ok(Self { trees })
    }
}

impl Classifier for ForestModel {
    fn predict(&self, x: &[f64]) -> Label {
        let mut votes = [0usize; Label::COUNT];
        for t in &self.trees {
            votes[t.predict(x).index()] += 1;
        }
        plurality(&votes)
    }
}

fn gini(counts: &[u32; Label::COUNT], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    ds: &'a LabeledDataset,
    max_features: usize,
    min_leaf: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct Split {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl Builder<'_> {
    fn counts(&self, rows: &[usize]) -> [u32; Label::COUNT] {
        let mut c = [0u32; Label::COUNT];
        for &r in rows {
            c[self.ds.labels()[r].index()] += 1;
        }
        c
    }

    /// Grows the subtree for `rows` and returns its node index.
    fn grow(&mut self, rows: Vec<usize>) -> usize {
        let counts = self.counts(&rows);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { counts });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || rows.len() < 2 * self.min_leaf {
            return id;
        }
        let Some(split) = self.best_split(&rows) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.ds.features()[i][split.feature] <= split.threshold);
        let left = self.grow(l);
        let right = self.grow(r);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Best Gini split among `max_features` random dimensions. A split with
    /// zero gain is still taken (trees grow until pure); when none of the
    /// sampled dimensions can separate the rows the rest are tried too.
    fn best_split(&mut self, rows: &[usize]) -> Option<Split> {
        let mut dims: Vec<usize> = (0..self.ds.dim()).collect();
        dims.shuffle(&mut self.rng);
        let mut best: Option<Split> = None;
        for (tried, &f) in dims.iter().enumerate() {
            if tried >= self.max_features && best.is_some() {
                break;
            }
            if let Some(s) = self.best_split_on(rows, f) {
                if best.as_ref().is_none_or(|b| s.impurity < b.impurity) {
                    best = Some(s);
                }
            }
        }
        best
    }

    fn best_split_on(&self, rows: &[usize], feature: usize) -> Option<Split> {
        let x = self.ds.features();
        let labels = self.ds.labels();
        let mut order: Vec<usize> = rows.to_vec();
        order.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]));

        let total = self.counts(rows);
        let n = rows.len() as u32;
        let mut left = [0u32; Label::COUNT];
        let mut best: Option<Split> = None;
        for i in 0..order.len() - 1 {
            left[labels[order[i]].index()] += 1;
            let (a, b) = (x[order[i]][feature], x[order[i + 1]][feature]);
            if a == b {
                continue;
            }
            let nl = i as u32 + 1;
            let nr = n - nl;
            if (nl as usize) < self.min_leaf || (nr as usize) < self.min_leaf {
                continue;
            }
            let right: [u32; Label::COUNT] = std::array::from_fn(|c| total[c] - left[c]);
            let impurity = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
            if best.as_ref().is_none_or(|s| impurity < s.impurity) {
                let mid = a + (b - a) / 2.0;
                // Guard against the midpoint rounding onto `b`.
                let threshold = if mid < b { mid } else { a };
                best = Some(Split {
                    feature,
                    threshold,
                    impurity,
                });
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Variant;

    fn accuracy(m: &ForestModel, ds: &LabeledDataset) -> f64 {
        let ok = ds.iter().filter(|(x, l)| m.predict(x) == *l).count();
        ok as f64 / ds.len() as f64
    }

    #[test]
    fn separable_dimension() {
        let feats: Vec<Vec<f64>> = (0..30).map(|i| vec![(i * 7 % 5) as f64, i as f64]).collect();
        let labels = (0..30).map(|i| if i < 15 { Label::Ripened } else { Label::Overripened }).collect();
        let ds = LabeledDataset::from_rows(Variant::B, feats, labels).unwrap();
        let exact = ForestConfig { trees: 10, seed: 3, bootstrap: false, ..Default::default() };
        assert_eq!(accuracy(&ForestModel::train(&ds, &exact).unwrap(), &ds), 1.0);
        // Bootstrap trees may place the cut anywhere in their sample's gap.
        let bagged = ForestConfig { trees: 25, seed: 3, ..Default::default() };
        assert!(accuracy(&ForestModel::train(&ds, &bagged).unwrap(), &ds) >= 0.9);
    }

    #[test]
    fn single_tree_fits_xor() {
        let ds = LabeledDataset::from_rows(
            Variant::B,
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![Label::Unripened, Label::Unripened, Label::Overripened, Label::Overripened],
        )
        .unwrap();
        let cfg = ForestConfig {
            trees: 1,
            bootstrap: false,
            ..Default::default()
        };
        let m = ForestModel::train(&ds, &cfg).unwrap();
        assert_eq!(accuracy(&m, &ds), 1.0);
        // Root split has zero gain, then each side splits once more.
        assert_eq!(m.trees[0].depth(), 2);
        assert_eq!(m.trees[0].nodes.len(), 7);
    }

    #[test]
    fn same_seed_same_forest() {
        let feats: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64 * 0.3, (i % 11) as f64]).collect();
        let labels = (0..40).map(|i| Label::ALL[i % 3]).collect();
        let ds = LabeledDataset::from_rows(Variant::B, feats, labels).unwrap();
        let cfg = ForestConfig { trees: 8, seed: 11, ..Default::default() };
        assert_eq!(ForestModel::train(&ds, &cfg).unwrap(), ForestModel::train(&ds, &cfg).unwrap());
    }

    #[test]
    fn identical_points_make_a_leaf() {
        let ds = LabeledDataset::from_rows(
            Variant::B,
            vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![Label::Ripened, Label::Overripened, Label::Overripened],
        )
        .unwrap();
        let cfg = ForestConfig { trees: 1, bootstrap: false, ..Default::default() };
        let m = ForestModel::train(&ds, &cfg).unwrap();
        assert_eq!(m.trees[0].nodes.len(), 1);
        assert_eq!(m.predict(&[1.0, 1.0]), Label::Overripened);
    }

    #[test]
    fn tree_structure_is_well_formed() {
        let feats: Vec<Vec<f64>> = (0..60).map(|i| vec![((i * 13) % 17) as f64, ((i * 5) % 9) as f64]).collect();
        let labels = (0..60).map(|i| Label::ALL[(i * 7 / 3) % 3]).collect();
        let ds = LabeledDataset::from_rows(Variant::B, feats, labels).unwrap();
        let m = ForestModel::train(&ds, &ForestConfig { trees: 5, seed: 2, ..Default::default() }).unwrap();
        for tree in &m.trees {
            let mut reached = vec![false; tree.nodes.len()];
            let mut stack = vec![0];
            while let Some(i) = stack.pop() {
                assert!(!reached[i], "node {i} reached twice");
                reached[i] = true;
                if let Node::Split { left, right, .. } = tree.nodes[i] {
                    assert!(left < tree.nodes.len() && right < tree.nodes.len());
                    stack.push(left);
                    stack.push(right);
                }
            }
            assert!(reached.iter().all(|&r| r), "unreachable node");
        }
    }
}
