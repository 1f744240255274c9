//! CART random forest with Gini impurity and bootstrap resampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AqiClass, N_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub min_samples_split: u32,
    /// Features examined per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_estimators: 100,
            max_depth: 20,
            min_samples_split: 2,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn mtry(&self, d: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        counts: [u32; N_CLASSES],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_counts(&self, x: &[f64]) -> &[u32; N_CLASSES] {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_features: usize,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
}

/// Column-major training matrix.
struct Columns {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Columns {
    fn new(x: &[Vec<f64>]) -> Result<Self> {
        let n = x.len();
        let d = x.first().map_or(0, |r| r.len());
        if d == 0 {
            return Err(Error::invalid("feature vectors are empty"));
        }
        let mut data = vec![0.0; n * d];
        for (i, row) in x.iter().enumerate() {
            if row.len() != d {
                return Err(Error::ShapeMismatch {
                    expected: format!("{d} features"),
                    got: format!("{} in row {i}", row.len()),
                });
            }
            for (f, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::invalid(format!("non-finite feature {f} in row {i}")));
                }
                data[f * n + i] = *v;
            }
        }
        Ok(Columns { n, d, data })
    }

    #[inline]
    fn get(&self, i: usize, f: usize) -> f64 {
        self.data[f * self.n + i]
    }
}

/// Best split found for a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    /// Size-weighted Gini impurity of the two children.
    pub impurity: f64,
}

pub fn gini(counts: &[f64; N_CLASSES]) -> f64 {
    let n: f64 = counts.iter().sum();
    if n == 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / n) * (c / n)).sum::<f64>()
}

// Sum over children of n_child - sum(c^2)/n_child; divide by n for the
// weighted impurity.
#[inline]
fn child_score(counts: &[f64; N_CLASSES], n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    n - counts.iter().map(|c| c * c).sum::<f64>() / n
}

struct Scratch {
    keyed: Vec<(f64, u32, u8)>,
}

/// Samples in a node: row index and bootstrap multiplicity.
type Weighted = (u32, u32);

fn split_on_feature(
    cols: &Columns,
    y: &[u8],
    node: &[Weighted],
    f: usize,
    total: &[f64; N_CLASSES],
    n_total: f64,
    scratch: &mut Scratch,
) -> Option<(f64, f64)> {
    scratch.keyed.clear();
    scratch
        .keyed
        .extend(node.iter().map(|&(i, w)| (cols.get(i as usize, f), w, y[i as usize])));
    scratch.keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let keyed = &scratch.keyed;
    if keyed.first()?.0 == keyed.last()?.0 {
        return None;
    }
    let mut left = [0.0; N_CLASSES];
    let mut n_left = 0.0;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..keyed.len() - 1 {
        let (v, w, c) = keyed[k];
        left[c as usize] += w as f64;
        n_left += w as f64;
        let next = keyed[k + 1].0;
        if next == v {
            continue;
        }
        let mut right = [0.0; N_CLASSES];
        for c in 0..N_CLASSES {
            right[c] = total[c] - left[c];
        }
        let score = (child_score(&left, n_left) + child_score(&right, n_total - n_left)) / n_total;
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, v + (next - v) / 2.0));
        }
    }
    best
}

fn class_totals(y: &[u8], node: &[Weighted]) -> [f64; N_CLASSES] {
    let mut t = [0.0; N_CLASSES];
    for &(i, w) in node {
        t[y[i as usize] as usize] += w as f64;
    }
    t
}

fn to_weighted(indices: &[usize]) -> Vec<Weighted> {
    let mut sorted: Vec<usize> = indices.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<Weighted> = Vec::new();
    for i in sorted {
        match out.last_mut() {
            Some((j, w)) if *j as usize == i => *w += 1,
            _ => out.push((i as u32, 1)),
        }
    }
    out
}

fn labels(y: &[AqiClass]) -> Vec<u8> {
    y.iter().map(|c| c.index() as u8).collect()
}

/// Lowest-impurity split over `features` for the rows in `indices`
/// (repeats count as bootstrap multiplicity). Ties keep the earlier feature
/// in `features` order, then the lower threshold.
pub fn best_split(x: &[Vec<f64>], y: &[AqiClass], indices: &[usize], features: &[usize]) -> Result<Option<SplitCandidate>> {
    let cols = Columns::new(x)?;
    if y.len() != cols.n {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", cols.n),
            got: y.len().to_string(),
        });
    }
    let yy = labels(y);
    let node = to_weighted(indices);
    let total = class_totals(&yy, &node);
    let n_total: f64 = total.iter().sum();
    let mut scratch = Scratch { keyed: Vec::new() };
    let mut best: Option<SplitCandidate> = None;
    for &f in features {
        if let Some((impurity, threshold)) = split_on_feature(&cols, &yy, &node, f, &total, n_total, &mut scratch) {
            if best.is_none_or(|b| impurity < b.impurity) {
                best = Some(SplitCandidate {
                    feature: f,
                    threshold,
                    impurity,
                });
            }
        }
    }
    Ok(best)
}

struct Builder<'a> {
    cols: &'a Columns,
    y: &'a [u8],
    cfg: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
    scratch: Scratch,
    features: Vec<usize>,
}

impl Builder<'_> {
    fn leaf(total: &[f64; N_CLASSES]) -> Node {
        let mut counts = [0u32; N_CLASSES];
        for c in 0..N_CLASSES {
            counts[c] = total[c] as u32;
        }
        Node::Leaf { counts }
    }

    fn grow(&mut self, node: &mut [Weighted], depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let id = self.nodes.len() as u32;
        let total = class_totals(self.y, node);
        let n_total: f64 = total.iter().sum();
        let pure = total.iter().filter(|&&c| c > 0.0).count() <= 1;
        if depth >= self.cfg.max_depth || pure || n_total < self.cfg.min_samples_split as f64 {
            self.nodes.push(Self::leaf(&total));
            return id;
        }

        // Draw features without replacement; keep drawing past mtry only
        // while no valid split has been found.
        self.features.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..self.features.len() {
            if k >= self.mtry && best.is_some() {
                break;
            }
            let f = self.features[k];
            if let Some((score, thr)) =
                split_on_feature(self.cols, self.y, node, f, &total, n_total, &mut self.scratch)
            {
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            self.nodes.push(Self::leaf(&total));
            return id;
        };

        let mut lo = 0;
        for k in 0..node.len() {
            if self.cols.get(node[k].0 as usize, feature) <= threshold {
                node.swap(lo, k);
                lo += 1;
            }
        }
        self.nodes.push(Node::Split {
            feature: feature as u32,
            threshold,
            left: 0,
            right: 0,
        });
        let (l, r) = node.split_at_mut(lo);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        if let Node::Split { left: a, right: b, .. } = &mut self.nodes[id as usize] {
            *a = left;
            *b = right;
        }
        id
    }
}

fn fit_tree(cols: &Columns, y: &[u8], cfg: &ForestConfig, tree_index: u64) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(tree_index);
    let mut node: Vec<Weighted> = if cfg.bootstrap {
        let mut w = vec![0u32; cols.n];
        for _ in 0..cols.n {
            w[rng.random_range(0..cols.n)] += 1;
        }
        w.iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i as u32, c))
            .collect()
    } else {
        (0..cols.n as u32).map(|i| (i, 1)).collect()
    };
    let mut b = Builder {
        cols,
        y,
        cfg,
        mtry: cfg.mtry(cols.d),
        nodes: Vec::new(),
        scratch: Scratch {
            keyed: Vec::with_capacity(node.len()),
        },
        features: (0..cols.d).collect(),
    };
    b.grow(&mut node, 0, &mut rng);
    Tree { nodes: b.nodes }
}

/// Trains a forest; tree `k` draws from stream `k` of the configured seed.
pub fn train_forest(x: &[Vec<f64>], y: &[AqiClass], cfg: &ForestConfig) -> Result<ForestModel> {
    if x.is_empty() {
        return Err(Error::Empty("training rows"));
    }
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", x.len()),
            got: y.len().to_string(),
        });
    }
    if cfg.n_estimators == 0 {
        return Err(Error::invalid("n_estimators must be >= 1"));
    }
    let cols = Columns::new(x)?;
    let yy = labels(y);
    let trees = (0..cfg.n_estimators as u64)
        .into_par_iter()
        .map(|k| fit_tree(&cols, &yy, cfg, k))
        .collect();
    Ok(ForestModel {
        n_features: cols.d,
        config: *cfg,
        trees,
    })
}

pub fn argmax(p: &[f64; N_CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if p[c] > p[best] {
            best = c;
        }
    }
    best
}

impl ForestModel {
    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; N_CLASSES]> {
        if x.len() != self.n_features {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", self.n_features),
                got: x.len().to_string(),
            });
        }
        let mut p = [0.0; N_CLASSES];
        for t in &self.trees {
            let counts = t.leaf_counts(x);
            let n: u32 = counts.iter().sum();
            for c in 0..N_CLASSES {
                p[c] += counts[c] as f64 / n as f64;
            }
        }
        let k = self.trees.len() as f64;
        for v in &mut p {
            *v /= k;
        }
        Ok(p)
    }

    pub fn predict(&self, x: &[f64]) -> Result<AqiClass> {
        AqiClass::from_index(argmax(&self.predict_proba(x)?))
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn cls(v: u8) -> AqiClass {
        AqiClass::new(v).unwrap()
    }

    #[test]
    fn separable_toy_set() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let y = vec![cls(1), cls(1), cls(2), cls(2)];
        let m = train_forest(&x, &y, &ForestConfig::default()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(m.predict(xi).unwrap(), *yi);
        }
    }

    #[test]
    fn single_class_input() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 2.0], vec![5.0, 0.0]];
        let y = vec![cls(4); 3];
        let m = train_forest(&x, &y, &ForestConfig::default()).unwrap();
        assert_eq!(m.predict(&[9.0, 9.0]).unwrap(), cls(4));
        assert_eq!(m.predict_proba(&[9.0, 9.0]).unwrap(), [0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn same_seed_same_serialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<AqiClass> = x.iter().map(|r| cls(1 + ((r[0] * 5.0) as u8).min(4))).collect();
        let cfg = ForestConfig {
            n_estimators: 10,
            seed: 9,
            ..Default::default()
        };
        let a = serde_json::to_string(&train_forest(&x, &y, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&train_forest(&x, &y, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = serde_json::to_string(&train_forest(&x, &y, &ForestConfig { seed: 10, ..cfg }).unwrap()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn probabilities_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<AqiClass> = (0..300).map(|_| cls(rng.random_range(1..=5))).collect();
        let m = train_forest(
            &x,
            &y,
            &ForestConfig {
                n_estimators: 15,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
            let p = m.predict_proba(&q).unwrap();
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
        assert!(m.predict_proba(&[0.0; 3]).is_err());
        assert!(m.max_depth() <= 20);
    }

    fn leaf(c: usize) -> Tree {
        let mut counts = [0; N_CLASSES];
        counts[c] = 7;
        Tree {
            nodes: vec![Node::Leaf { counts }],
        }
    }

    #[test]
    fn vote_fractions() {
        let one = ForestModel {
            n_features: 1,
            config: ForestConfig::default(),
            trees: vec![leaf(2)],
        };
        assert_eq!(one.predict_proba(&[0.0]).unwrap(), [0.0, 0.0, 1.0, 0.0, 0.0]);

        let mut trees: Vec<Tree> = (0..6).map(|_| leaf(1)).collect();
        trees.extend((0..4).map(|_| leaf(4)));
        let m = ForestModel {
            n_features: 1,
            config: ForestConfig::default(),
            trees,
        };
        let p = m.predict_proba(&[0.0]).unwrap();
        assert_abs_diff_eq!(p[1], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(p[4], 0.4, epsilon = 1e-12);
        assert_eq!(m.predict(&[0.0]).unwrap(), cls(2));
    }

    #[test]
    fn argmax_ties_take_lowest_class() {
        assert_eq!(argmax(&[0.0, 0.5, 0.0, 0.5, 0.0]), 1);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let cfg = ForestConfig::default();
        assert!(train_forest(&[], &[], &cfg).is_err());
        assert!(train_forest(&[vec![1.0]], &[cls(1), cls(2)], &cfg).is_err());
        assert!(train_forest(&[vec![1.0], vec![1.0, 2.0]], &[cls(1), cls(2)], &cfg).is_err());
    }

    #[test]
    fn mtry_defaults_to_ceil_sqrt() {
        let cfg = ForestConfig::default();
        assert_eq!(cfg.mtry(30), 6);
        assert_eq!(cfg.mtry(48), 7);
        assert_eq!(cfg.mtry(1), 1);
    }
}
