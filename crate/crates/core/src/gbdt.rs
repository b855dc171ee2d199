//! Multiclass softmax gradient boosting with exact second-order split search
//! and leaf-wise (best-first) tree growth.
//!
//! Trees are fitted one class at a time: for iteration `m` and class `k` the
//! gradients are recomputed from the running scores, which already include
//! every tree grown before `(m, k)`. The in-place updater replays exactly this
//! order, so the ensemble exposes its tree internals and the per-tree feature
//! subsets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ceil_fraction, Dataset, Matrix};
use crate::error::{Error, Result};

/// Lower clamp for probabilities inside the log of the loss.
pub const LOG_CLAMP: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub shrinkage: f64,
    pub max_leaves: usize,
    pub feature_sampling: f64,
    pub lambda: f64,
    pub min_child_hessian: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            shrinkage: 0.1,
            max_leaves: 20,
            feature_sampling: 0.1,
            lambda: 1.0,
            min_child_hessian: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.max_leaves < 2 {
            return Err(Error::invalid("max_leaves must be at least 2"));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage.is_finite()) {
            return Err(Error::invalid("shrinkage must be positive"));
        }
        if !(self.feature_sampling > 0.0 && self.feature_sampling <= 1.0) {
            return Err(Error::invalid("feature_sampling must be in (0, 1]"));
        }
        if !(0.0..).contains(&self.lambda) || !(0.0..).contains(&self.min_child_hessian) {
            return Err(Error::invalid("lambda and min_child_hessian must be >= 0"));
        }
        Ok(())
    }

    pub(crate) fn grow_params(&self, max_leaves: usize) -> GrowParams {
        GrowParams {
            max_leaves,
            lambda: self.lambda,
            min_child_hessian: self.min_child_hessian,
            shrinkage: self.shrinkage,
        }
    }
}

/// A binary regression tree node. Samples go left iff `x[feature] <= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
    },
}

impl TreeNode {
    pub fn leaf(value: f64) -> Self {
        TreeNode::Leaf { value }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if x[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    pub fn split_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.split_count() + right.split_count(),
        }
    }

    /// Every split feature index in the subtree, pre-order.
    pub fn split_features(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit_splits(&mut |f, _| out.push(f));
        out
    }

    /// Calls `f(feature, threshold)` for each split in pre-order.
    pub fn visit_splits(&self, f: &mut impl FnMut(usize, f64)) {
        if let TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } = self
        {
            f(*feature, *threshold);
            left.visit_splits(f);
            right.visit_splits(f);
        }
    }
}

/// One boosting tree together with its `(iteration, class)` slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub iteration: usize,
    pub class: usize,
    /// Sorted feature indices the tree was allowed to split on.
    pub feature_subset: Vec<usize>,
    pub root: TreeNode,
}

/// Additive multiclass model: `raw(x) = base_score + sum of tree outputs`.
/// Leaf values already include the shrinkage factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    base_score: Vec<f64>,
    trees: Vec<Tree>,
    config: TrainConfig,
    class_count: usize,
    n_features: usize,
}

impl Ensemble {
    /// Assembles a model, checking that trees fill the `(m, k)` grid densely
    /// in iteration-major order and only split on their own feature subset.
    pub fn from_parts(
        base_score: Vec<f64>,
        trees: Vec<Tree>,
        config: TrainConfig,
        class_count: usize,
        n_features: usize,
    ) -> Result<Self> {
        if class_count == 0 || n_features == 0 {
            return Err(Error::Malformed(
                "class and feature counts must be positive".into(),
            ));
        }
        if base_score.len() != class_count {
            return Err(Error::Malformed(format!(
                "base_score has {} entries for {class_count} classes",
                base_score.len()
            )));
        }
        if !trees.len().is_multiple_of(class_count) {
            return Err(Error::Malformed(format!(
                "{} trees do not fill a grid of {class_count} classes",
                trees.len()
            )));
        }
        for (i, t) in trees.iter().enumerate() {
            if t.iteration != i / class_count || t.class != i % class_count {
                return Err(Error::Malformed(format!(
                    "tree {i} sits at ({}, {}), expected ({}, {})",
                    t.iteration,
                    t.class,
                    i / class_count,
                    i % class_count
                )));
            }
            if t.feature_subset.is_empty()
                || t.feature_subset.windows(2).any(|w| w[0] >= w[1])
                || t.feature_subset.iter().any(|&f| f >= n_features)
            {
                return Err(Error::Malformed(format!(
                    "tree {i} has an invalid feature subset"
                )));
            }
            let mut bad = None;
            t.root.visit_splits(&mut |f, thr| {
                if t.feature_subset.binary_search(&f).is_err() || !thr.is_finite() {
                    bad = Some(f);
                }
            });
            if let Some(f) = bad {
                return Err(Error::Malformed(format!(
                    "tree {i} splits on feature {f} outside its subset"
                )));
            }
        }
        if base_score.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("non-finite base score".into()));
        }
        Ok(Self {
            base_score,
            trees,
            config,
            class_count,
            n_features,
        })
    }

    pub fn base_score(&self) -> &[f64] {
        &self.base_score
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub(crate) fn trees_mut(&mut self) -> &mut [Tree] {
        &mut self.trees
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn iterations(&self) -> usize {
        self.trees.len() / self.class_count
    }

    pub fn tree(&self, iteration: usize, class: usize) -> &Tree {
        &self.trees[iteration * self.class_count + class]
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                actual: len,
            });
        }
        Ok(())
    }

    pub(crate) fn raw_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.base_score);
        for t in &self.trees {
            out[t.class] += t.root.predict(x);
        }
    }

    pub fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let mut out = vec![0.0; self.class_count];
        self.raw_into(x, &mut out);
        Ok(out)
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_raw(x)?))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.predict_raw(x)?))
    }

    /// Raw scores for every row, `rows x class_count`.
    pub fn raw_scores(&self, features: &Matrix) -> Result<Matrix> {
        self.check_dim(features.cols())?;
        let mut out = Matrix::zeros(features.rows(), self.class_count);
        for i in 0..features.rows() {
            self.raw_into(features.row(i), out.row_mut(i));
        }
        Ok(out)
    }

    pub fn predict_labels(&self, features: &Matrix) -> Result<Vec<usize>> {
        let raw = self.raw_scores(features)?;
        Ok(raw.iter_rows().map(argmax).collect())
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    out
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-sample, per-class gradient, hessian and probability of the softmax NLL.
#[derive(Clone, Debug, PartialEq)]
pub struct GradHessTable {
    pub grad: Matrix,
    pub hess: Matrix,
    pub prob: Matrix,
}

/// `g = p - 1[y = k]`, `h = p (1 - p)`; the pseudo-residual is `-g`.
pub fn grad_hess(labels: &[usize], raw_scores: &Matrix) -> Result<GradHessTable> {
    let k = raw_scores.cols();
    check_labels(labels, raw_scores)?;
    let n = labels.len();
    let mut grad = Matrix::zeros(n, k);
    let mut hess = Matrix::zeros(n, k);
    let mut prob = Matrix::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        softmax_into(raw_scores.row(i), prob.row_mut(i));
        for c in 0..k {
            let p = prob.get(i, c);
            grad.row_mut(i)[c] = p - if c == y { 1.0 } else { 0.0 };
            hess.row_mut(i)[c] = p * (1.0 - p);
        }
    }
    Ok(GradHessTable { grad, hess, prob })
}

fn check_labels(labels: &[usize], raw_scores: &Matrix) -> Result<()> {
    if labels.len() != raw_scores.rows() {
        return Err(Error::DimensionMismatch {
            expected: raw_scores.rows(),
            actual: labels.len(),
        });
    }
    let k = raw_scores.cols();
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            class_count: k,
        });
    }
    Ok(())
}

/// Gradient and hessian of one class column, written into `g` and `h`.
/// Shared by training and in-place updating so both see identical bits.
pub(crate) fn class_grad_hess(
    labels: &[usize],
    scores: &Matrix,
    class: usize,
    g: &mut Vec<f64>,
    h: &mut Vec<f64>,
) {
    let n = labels.len();
    g.resize(n, 0.0);
    h.resize(n, 0.0);
    let mut p = vec![0.0; scores.cols()];
    for i in 0..n {
        softmax_into(scores.row(i), &mut p);
        let pk = p[class];
        g[i] = pk - if labels[i] == class { 1.0 } else { 0.0 };
        h[i] = pk * (1.0 - pk);
    }
}

/// `-sum_i log p_{i, y_i}`, with each probability clamped to at least [`LOG_CLAMP`].
pub fn nll_loss(labels: &[usize], raw_scores: &Matrix) -> Result<f64> {
    check_labels(labels, raw_scores)?;
    let mut p = vec![0.0; raw_scores.cols()];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        softmax_into(raw_scores.row(i), &mut p);
        loss -= p[y].max(LOG_CLAMP).ln();
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

#[inline]
fn score_term(g: f64, h: f64, lambda: f64) -> f64 {
    let denom = h + lambda;
    if denom > 0.0 {
        g * g / denom
    } else {
        0.0
    }
}

/// Threshold strictly separating two adjacent distinct values `lo < hi`.
#[inline]
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let t = lo + (hi - lo) * 0.5;
    if t >= hi {
        lo
    } else {
        t
    }
}

/// `-shrinkage * G / (H + lambda)`, or zero for a degenerate denominator.
#[inline]
pub fn leaf_value(g_sum: f64, h_sum: f64, lambda: f64, shrinkage: f64) -> f64 {
    let denom = h_sum + lambda;
    if denom > 0.0 {
        -shrinkage * g_sum / denom
    } else {
        0.0
    }
}

pub(crate) fn sum_gh(ids: &[usize], g: &[f64], h: &[f64]) -> (f64, f64) {
    ids.iter()
        .fold((0.0, 0.0), |(gs, hs), &i| (gs + g[i], hs + h[i]))
}

/// Exact greedy search over the sorted distinct values of each feature in
/// `feature_subset`.
///
/// `g` and `h` are indexed by sample id. Gain is
/// `0.5 * (G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l))`; candidates with a
/// child hessian below `min_child_hessian` are skipped and only strictly
/// positive gains qualify. Ties keep the earlier candidate, i.e. the lower
/// feature index and then the lower threshold.
pub fn best_split(
    sample_ids: &[usize],
    g: &[f64],
    h: &[f64],
    features: &Matrix,
    feature_subset: &[usize],
    lambda: f64,
    min_child_hessian: f64,
) -> Option<SplitSpec> {
    let mut buf = Vec::with_capacity(sample_ids.len());
    best_split_with(
        sample_ids,
        g,
        h,
        features,
        feature_subset,
        lambda,
        min_child_hessian,
        &mut buf,
    )
}

#[allow(clippy::too_many_arguments)]
fn best_split_with(
    sample_ids: &[usize],
    g: &[f64],
    h: &[f64],
    features: &Matrix,
    feature_subset: &[usize],
    lambda: f64,
    min_child_hessian: f64,
    buf: &mut Vec<(f64, usize)>,
) -> Option<SplitSpec> {
    if sample_ids.len() < 2 {
        return None;
    }
    let (g_sum, h_sum) = sum_gh(sample_ids, g, h);
    let parent = score_term(g_sum, h_sum, lambda);
    let mut best: Option<SplitSpec> = None;
    let mut best_gain = 0.0;

    for &f in feature_subset {
        buf.clear();
        buf.extend(sample_ids.iter().map(|&i| (features.get(i, f), i)));
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut gl, mut hl) = (0.0, 0.0);
        for w in 0..buf.len() - 1 {
            let (v, id) = buf[w];
            gl += g[id];
            hl += h[id];
            let next = buf[w + 1].0;
            if v == next {
                continue;
            }
            let (gr, hr) = (g_sum - gl, h_sum - hl);
            if hl < min_child_hessian || hr < min_child_hessian {
                continue;
            }
            let gain = 0.5 * (score_term(gl, hl, lambda) + score_term(gr, hr, lambda) - parent);
            if gain > best_gain {
                best_gain = gain;
                best = Some(SplitSpec {
                    feature: f,
                    threshold: midpoint(v, next),
                    gain,
                });
            }
        }
    }
    best
}

/// Knobs for growing one tree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowParams {
    pub max_leaves: usize,
    pub lambda: f64,
    pub min_child_hessian: f64,
    pub shrinkage: f64,
}

enum Grown {
    Leaf(Vec<usize>),
    Split {
        spec: SplitSpec,
        left: usize,
        right: usize,
    },
}

/// Splits `ids` (kept in their incoming order) by `x[feature] <= threshold`.
pub(crate) fn partition(
    ids: &[usize],
    features: &Matrix,
    feature: usize,
    threshold: f64,
) -> (Vec<usize>, Vec<usize>) {
    ids.iter()
        .copied()
        .partition(|&i| features.get(i, feature) <= threshold)
}

/// Leaf-wise growth: keep splitting the frontier leaf with the largest gain
/// until `max_leaves` leaves exist or no leaf has a positive-gain split.
/// Equal gains go to the leaf created first.
///
/// `sample_ids` should be ascending; children inherit that order, which fixes
/// the summation order of every leaf.
pub fn grow_tree(
    sample_ids: &[usize],
    g: &[f64],
    h: &[f64],
    features: &Matrix,
    feature_subset: &[usize],
    params: &GrowParams,
) -> TreeNode {
    let mut buf = Vec::with_capacity(sample_ids.len());
    let find = |ids: &[usize], buf: &mut Vec<(f64, usize)>| {
        best_split_with(
            ids,
            g,
            h,
            features,
            feature_subset,
            params.lambda,
            params.min_child_hessian,
            buf,
        )
    };

    let mut arena: Vec<Grown> = vec![Grown::Leaf(sample_ids.to_vec())];
    let mut frontier: Vec<(usize, SplitSpec)> = Vec::new();
    if let Some(s) = find(sample_ids, &mut buf) {
        frontier.push((0, s));
    }
    let mut leaves = 1;

    while leaves < params.max_leaves && !frontier.is_empty() {
        let mut pick = 0;
        for (j, (node, spec)) in frontier.iter().enumerate() {
            let (best_node, best_spec) = frontier[pick];
            if spec.gain > best_spec.gain || (spec.gain == best_spec.gain && *node < best_node) {
                pick = j;
            }
        }
        let (node, spec) = frontier.swap_remove(pick);
        let Grown::Leaf(ids) = std::mem::replace(&mut arena[node], Grown::Leaf(Vec::new())) else {
            unreachable!("frontier entries are leaves");
        };
        let (l_ids, r_ids) = partition(&ids, features, spec.feature, spec.threshold);
        let (li, ri) = (arena.len(), arena.len() + 1);
        let l_split = find(&l_ids, &mut buf);
        let r_split = find(&r_ids, &mut buf);
        arena.push(Grown::Leaf(l_ids));
        arena.push(Grown::Leaf(r_ids));
        arena[node] = Grown::Split {
            spec,
            left: li,
            right: ri,
        };
        if let Some(s) = l_split {
            frontier.push((li, s));
        }
        if let Some(s) = r_split {
            frontier.push((ri, s));
        }
        leaves += 1;
    }

    fn build(arena: &[Grown], at: usize, g: &[f64], h: &[f64], p: &GrowParams) -> TreeNode {
        match &arena[at] {
            Grown::Leaf(ids) => {
                let (gs, hs) = sum_gh(ids, g, h);
                TreeNode::leaf(leaf_value(gs, hs, p.lambda, p.shrinkage))
            }
            Grown::Split { spec, left, right } => TreeNode::Split {
                feature: spec.feature,
                threshold: spec.threshold,
                gain: spec.gain,
                left: Box::new(build(arena, *left, g, h, p)),
                right: Box::new(build(arena, *right, g, h, p)),
            },
        }
    }
    build(&arena, 0, g, h, params)
}

/// Feature subset of tree `(iteration, class)`: `ceil(fraction * d)` indices
/// drawn without replacement from a ChaCha stream keyed by
/// `(seed, iteration, class)`, returned sorted. Any tree's subset can be
/// re-derived from the training seed alone.
pub fn feature_subset(
    seed: u64,
    iteration: usize,
    class: usize,
    n_features: usize,
    fraction: f64,
) -> Vec<usize> {
    let count = ceil_fraction(fraction, n_features).clamp(1, n_features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 32) | class as u64);
    let mut idx = rand::seq::index::sample(&mut rng, n_features, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Trains a model with `base_score = 0` for every class.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<Ensemble> {
    train_with_callback(dataset, config, |_, _| {})
}

/// Like [`train`], calling `on_iteration(m, scores)` after all `K` trees of
/// iteration `m` have been added to the running training scores.
pub fn train_with_callback(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(usize, &Matrix),
) -> Result<Ensemble> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientSamples("training set is empty".into()));
    }
    let n = dataset.len();
    let k_count = dataset.class_count();
    let d = dataset.n_features();
    let features = dataset.features();
    let labels = dataset.labels();
    let params = config.grow_params(config.max_leaves);

    let base_score = vec![0.0; k_count];
    let mut scores = Matrix::zeros(n, k_count);
    for i in 0..n {
        scores.row_mut(i).copy_from_slice(&base_score);
    }
    let ids: Vec<usize> = (0..n).collect();
    let (mut g, mut h) = (Vec::new(), Vec::new());
    let mut trees = Vec::with_capacity(config.iterations * k_count);

    for m in 0..config.iterations {
        for k in 0..k_count {
            class_grad_hess(labels, &scores, k, &mut g, &mut h);
            let subset = feature_subset(config.seed, m, k, d, config.feature_sampling);
            let root = grow_tree(&ids, &g, &h, features, &subset, &params);
            for i in 0..n {
                scores.row_mut(i)[k] += root.predict(features.row(i));
            }
            trees.push(Tree {
                iteration: m,
                class: k,
                feature_subset: subset,
                root,
            });
        }
        on_iteration(m, &scores);
    }
    Ensemble::from_parts(base_score, trees, config.clone(), k_count, d)
}
