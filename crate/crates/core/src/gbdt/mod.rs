//! Histogram gradient-boosted trees with categorical splits and logistic loss.

mod binning;
mod split;

pub use binning::{BinMapper, FeatureBins, PAD_BIN};
pub use split::{best_split, build_histogram, split_gain, BinSet, BinStat, FeatureHistogram, SplitCandidate};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{sigmoid, Predictor};
use crate::container::{ModelKind, NamedTensor, WeightsContainer};
use crate::encoding::{EncodedTable, QueryTable, RowFeatures};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub lambda_l2: f64,
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 20,
            lambda_l2: 1.0,
            max_bins: 255,
            seed: 0,
        }
    }
}

impl GbdtParams {
    fn validate(&self) -> Result<()> {
        if self.max_depth == 0
            || self.learning_rate <= 0.0
            || self.min_samples_leaf == 0
            || self.lambda_l2 <= 0.0
            || !(2..=255).contains(&self.max_bins)
        {
            return Err(Error::InvalidArgument(format!("invalid GBDT parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        left_bins: BinSet,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Nodes in breadth-first order; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_binned(&self, bins: &[u8]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, left_bins, left, right } => {
                    i = if left_bins.contains(bins[*feature]) { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// Log-odds of the train positive rate.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub bins: BinMapper,
    pub params: GbdtParams,
}

const RATE_CLAMP: f64 = 1e-7;

pub fn base_log_odds(labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let p = (pos / labels.len() as f64).clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Per-row gradient and hessian of the logistic loss at raw score `f`.
pub fn logistic_grad(f: f64, y: u8) -> (f64, f64) {
    let p = sigmoid(f);
    (p - f64::from(y), (p * (1.0 - p)).max(1e-16))
}

struct Frontier {
    node: usize,
    rows: Vec<u32>,
}

/// Fit with a per-tree callback receiving the raw train scores after each tree.
pub fn gbdt_fit_with<F: FnMut(usize, &[f64])>(
    train: &EncodedTable,
    params: GbdtParams,
    mut on_tree: F,
) -> Result<Ensemble> {
    params.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTable { side: "train" });
    }
    let labels = train.labels();
    let bins = BinMapper::fit(train.rows.iter().map(|r| &r.features), train.width(), params.max_bins);
    let mut ensemble = Ensemble {
        base_score: base_log_odds(&labels),
        trees: Vec::new(),
        bins,
        params,
    };
    let single_class = labels.iter().all(|&y| y == labels[0]);
    if single_class {
        return Ok(ensemble);
    }
    let columns = ensemble.bins.bin_columns(train.rows.iter().map(|r| &r.features));
    let n_bins: Vec<usize> = ensemble.bins.features.iter().map(FeatureBins::n_bins).collect();
    let n = labels.len();
    let mut raw = vec![ensemble.base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    for t in 0..params.n_trees {
        for i in 0..n {
            (grad[i], hess[i]) = logistic_grad(raw[i], labels[i]);
        }
        let mut tree = Tree::default();
        tree.nodes.push(TreeNode::Leaf { value: 0.0 });
        let mut frontier = vec![Frontier { node: 0, rows: (0..n as u32).collect() }];
        let mut leaves: Vec<Frontier> = Vec::new();
        for _depth in 0..params.max_depth {
            let mut next = Vec::new();
            for f in frontier {
                let pure = f.rows.iter().all(|&r| labels[r as usize] == labels[f.rows[0] as usize]);
                if f.rows.len() < 2 * params.min_samples_leaf || pure {
                    leaves.push(f);
                    continue;
                }
                // features are independent, so the result does not depend on the pool size
                let hists: Vec<FeatureHistogram> = columns
                    .par_iter()
                    .zip(&n_bins)
                    .map(|(col, &nb)| build_histogram(col, &f.rows, &grad, &hess, nb))
                    .collect();
                match best_split(&hists, params.lambda_l2, params.min_samples_leaf) {
                    None => leaves.push(f),
                    Some(s) => {
                        let col = &columns[s.feature];
                        let (l_rows, r_rows): (Vec<u32>, Vec<u32>) =
                            f.rows.iter().partition(|&&r| s.left_bins.contains(col[r as usize]));
                        let left = tree.nodes.len();
                        tree.nodes.push(TreeNode::Leaf { value: 0.0 });
                        tree.nodes.push(TreeNode::Leaf { value: 0.0 });
                        tree.nodes[f.node] = TreeNode::Split {
                            feature: s.feature,
                            left_bins: s.left_bins,
                            left,
                            right: left + 1,
                        };
                        next.push(Frontier { node: left, rows: l_rows });
                        next.push(Frontier { node: left + 1, rows: r_rows });
                    }
                }
            }
            frontier = next;
            if frontier.is_empty() {
                break;
            }
        }
        leaves.extend(frontier);
        for leaf in leaves {
            let (g, h) = leaf.rows.iter().fold((0.0, 0.0), |(g, h), &r| {
                (g + grad[r as usize], h + hess[r as usize])
            });
            let value = -g / (h + params.lambda_l2) * params.learning_rate;
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite leaf value in tree {t}")));
            }
            tree.nodes[leaf.node] = TreeNode::Leaf { value };
            for &r in &leaf.rows {
                raw[r as usize] += value;
            }
        }
        ensemble.trees.push(tree);
        on_tree(t, &raw);
    }
    Ok(ensemble)
}

pub fn gbdt_fit(train: &EncodedTable, params: GbdtParams) -> Result<Ensemble> {
    gbdt_fit_with(train, params, |_, _| {})
}

impl Ensemble {
    pub fn raw_score(&self, row: &RowFeatures) -> f64 {
        let bins = self.bins.bin_row(row);
        self.base_score + self.trees.iter().map(|t| t.predict_binned(&bins)).sum::<f64>()
    }

    pub fn to_container(&self) -> WeightsContainer {
        #[derive(Serialize)]
        struct Meta {
            params: GbdtParams,
            base_score: f64,
            n_trees: usize,
            width: usize,
        }
        let mut tensors = Vec::new();
        for (j, f) in self.bins.features.iter().enumerate() {
            tensors.push(NamedTensor::vector(
                format!("bins.{j}"),
                f.codes.iter().map(|&c| c as f32).collect(),
            ));
        }
        for (t, tree) in self.trees.iter().enumerate() {
            let n = tree.nodes.len();
            let mut feature = Vec::with_capacity(n);
            let mut children = Vec::with_capacity(2 * n);
            let mut value = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n * 256);
            for node in &tree.nodes {
                match node {
                    TreeNode::Split { feature: f, left_bins, left, right } => {
                        feature.push(*f as f32);
                        children.extend([*left as f32, *right as f32]);
                        value.push(0.0);
                        mask.extend((0..=255u8).map(|b| f32::from(u8::from(left_bins.contains(b)))));
                    }
                    TreeNode::Leaf { value: v } => {
                        feature.push(-1.0);
                        children.extend([0.0, 0.0]);
                        value.push(*v as f32);
                        mask.extend(std::iter::repeat(0.0).take(256));
                    }
                }
            }
            tensors.push(NamedTensor::vector(format!("tree.{t}.feature"), feature));
            tensors.push(NamedTensor::new(format!("tree.{t}.children"), vec![n, 2], children));
            tensors.push(NamedTensor::vector(format!("tree.{t}.value"), value));
            tensors.push(NamedTensor::new(format!("tree.{t}.left_bins"), vec![n, 256], mask));
        }
        WeightsContainer::new(
            ModelKind::Gbdt,
            &Meta {
                params: self.params,
                base_score: self.base_score,
                n_trees: self.trees.len(),
                width: self.bins.width(),
            },
            tensors,
        )
    }

    /// Leaf values are stored as f32, so a reloaded ensemble matches the
    /// original to single precision.
    pub fn from_container(c: &WeightsContainer) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            params: GbdtParams,
            base_score: f64,
            n_trees: usize,
            width: usize,
        }
        c.expect_kind(ModelKind::Gbdt)?;
        let meta: Meta = c.metadata()?;
        let features = (0..meta.width)
            .map(|j| {
                let t = c.tensor(&format!("bins.{j}"))?;
                Ok(FeatureBins::from_codes(t.data.iter().map(|&x| x as u32).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut trees = Vec::with_capacity(meta.n_trees);
        for t in 0..meta.n_trees {
            let feature = &c.tensor(&format!("tree.{t}.feature"))?.data;
            let children = &c.tensor(&format!("tree.{t}.children"))?.data;
            let value = &c.tensor(&format!("tree.{t}.value"))?.data;
            let mask = &c.tensor(&format!("tree.{t}.left_bins"))?.data;
            let n = feature.len();
            if children.len() != 2 * n || value.len() != n || mask.len() != 256 * n {
                return Err(Error::Format(format!("tree {t} tensors disagree in size")));
            }
            let mut nodes = Vec::with_capacity(n);
            for i in 0..n {
                if feature[i] < 0.0 {
                    nodes.push(TreeNode::Leaf { value: f64::from(value[i]) });
                } else {
                    let (left, right) = (children[2 * i] as usize, children[2 * i + 1] as usize);
                    let f = feature[i] as usize;
                    if left >= n || right >= n || left <= i || right <= i || f >= meta.width {
                        return Err(Error::Format(format!("tree {t} node {i} out of range")));
                    }
                    let left_bins = (0..=255u8).filter(|&b| mask[256 * i + b as usize] != 0.0).collect();
                    nodes.push(TreeNode::Split { feature: f, left_bins, left, right });
                }
            }
            trees.push(Tree { nodes });
        }
        Ok(Self {
            base_score: meta.base_score,
            trees,
            bins: BinMapper { features },
            params: meta.params,
        })
    }
}

pub fn gbdt_predict(ensemble: &Ensemble, test: &QueryTable) -> Vec<f64> {
    test.rows.iter().map(|r| sigmoid(ensemble.raw_score(r))).collect()
}

/// The GBDT baseline as a harness predictor.
#[derive(Debug, Clone)]
pub struct Gbdt {
    pub params: GbdtParams,
    ensemble: Option<Ensemble>,
}

impl Gbdt {
    pub fn new(params: GbdtParams) -> Self {
        Self { params, ensemble: None }
    }

    pub fn ensemble(&self) -> Option<&Ensemble> {
        self.ensemble.as_ref()
    }
}

impl Predictor for Gbdt {
    fn name(&self) -> &str {
        "gbdt"
    }

    fn prepare(&mut self, train: &EncodedTable) -> Result<()> {
        self.ensemble = Some(gbdt_fit(train, self.params)?);
        Ok(())
    }

    fn predict(&self, _train: &EncodedTable, test: &QueryTable) -> Result<Vec<f64>> {
        let e = self
            .ensemble
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("gbdt: predict called before prepare".into()))?;
        Ok(gbdt_predict(e, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Step;
    use crate::encoding::build_row;
    use crate::metrics::auc;

    /// 40 rows; the label repeats the correctness of the previous answer.
    fn separable(n: usize) -> EncodedTable {
        let rows = (0..n)
            .map(|i| {
                let y = (i % 2) as u8;
                let seq = [
                    Step { question: (i % 7) as u32 + 1, skill: 1, correct: (i % 3 == 0) as u8 },
                    Step { question: (i % 5) as u32 + 1, skill: 2, correct: y },
                    Step { question: (i % 4) as u32 + 1, skill: 1, correct: y },
                ];
                build_row(&seq, i as u32 + 1, 3, 3).unwrap().unwrap()
            })
            .collect();
        EncodedTable { horizon: 3, rows }
    }

    fn small_params() -> GbdtParams {
        GbdtParams { min_samples_leaf: 2, ..Default::default() }
    }

    fn logloss(raw: &[f64], labels: &[u8]) -> f64 {
        raw.iter()
            .zip(labels)
            .map(|(&f, &y)| {
                let p = sigmoid(f);
                if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
            })
            .sum::<f64>()
            / raw.len() as f64
    }

    #[test]
    fn zero_trees_predict_base_rate() {
        let t = separable(40);
        let e = gbdt_fit(&t, GbdtParams { n_trees: 0, ..Default::default() }).unwrap();
        for p in gbdt_predict(&e, &t.to_query()) {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn one_class_gives_base_only() {
        let mut t = separable(10);
        for r in &mut t.rows {
            r.label = 1;
        }
        let e = gbdt_fit(&t, small_params()).unwrap();
        assert!(e.trees.is_empty());
    }

    #[test]
    fn separable_fixture_full_auc() {
        let t = separable(40);
        let e = gbdt_fit(&t, small_params()).unwrap();
        let p = gbdt_predict(&e, &t.to_query());
        assert_eq!(auc(&p, &t.labels()).unwrap(), 1.0);
    }

    #[test]
    fn train_loss_decreases_over_first_trees() {
        let t = separable(40);
        let labels = t.labels();
        let mut losses = vec![logloss(&vec![0.0; 40], &labels)];
        gbdt_fit_with(&t, GbdtParams { n_trees: 20, ..small_params() }, |_, raw| {
            losses.push(logloss(raw, &labels))
        })
        .unwrap();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn depth_one_tree_has_two_outputs() {
        let t = separable(40);
        let e = gbdt_fit(&t, GbdtParams { n_trees: 1, max_depth: 1, ..small_params() }).unwrap();
        let mut outs: Vec<f64> = gbdt_predict(&e, &t.to_query());
        outs.sort_by(f64::total_cmp);
        outs.dedup();
        assert_eq!(outs.len(), 2);
    }

    #[test]
    fn container_roundtrip_preserves_structure() {
        let t = separable(40);
        let e = gbdt_fit(&t, GbdtParams { n_trees: 5, ..small_params() }).unwrap();
        let back = Ensemble::from_container(&WeightsContainer::from_bytes(&e.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.bins, e.bins);
        assert_eq!(back.trees.len(), e.trees.len());
        let (a, b) = (gbdt_predict(&e, &t.to_query()), gbdt_predict(&back, &t.to_query()));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
        assert_eq!(back.to_container().to_bytes(), e.to_container().to_bytes());
    }

    #[test]
    fn accepted_splits_have_positive_gain() {
        let t = separable(40);
        let labels = t.labels();
        let params = GbdtParams { n_trees: 10, ..small_params() };
        let mut raws = vec![vec![base_log_odds(&labels); labels.len()]];
        let e = gbdt_fit_with(&t, params, |_, raw| raws.push(raw.to_vec())).unwrap();
        let binned: Vec<Vec<u8>> = t.rows.iter().map(|r| e.bins.bin_row(&r.features)).collect();
        let mut n_splits = 0;
        for (tree, raw) in e.trees.iter().zip(&raws) {
            let mut stats = vec![BinStat::default(); tree.nodes.len()];
            for (i, bins) in binned.iter().enumerate() {
                let (g, h) = logistic_grad(raw[i], labels[i]);
                let mut node = 0;
                loop {
                    stats[node].add(&BinStat { g, h, count: 1 });
                    match &tree.nodes[node] {
                        TreeNode::Leaf { .. } => break,
                        TreeNode::Split { feature, left_bins, left, right } => {
                            node = if left_bins.contains(bins[*feature]) { *left } else { *right };
                        }
                    }
                }
            }
            for node in &tree.nodes {
                if let TreeNode::Split { left, right, .. } = node {
                    n_splits += 1;
                    assert!(split_gain(&stats[*left], &stats[*right], params.lambda_l2) > 0.0);
                    assert!(stats[*left].count as usize >= params.min_samples_leaf);
                    assert!(stats[*right].count as usize >= params.min_samples_leaf);
                }
            }
        }
        assert!(n_splits > 0);
    }
}
