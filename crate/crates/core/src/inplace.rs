//! In-place fine-tuning of a trained ensemble.
//!
//! Trees are revisited in training order. For each tree the gradients are
//! recomputed against the partially updated model, every internal node is
//! re-searched top-down over the samples routed to it, subtrees whose best
//! split moved are regrown under the same leaf budget, and finally every leaf
//! with routed samples is refit. No tree is ever added or removed.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::gbdt::{
    best_split, class_grad_hess, grow_tree, leaf_value, partition, sum_gh, Ensemble, GrowParams,
    SplitSpec, TreeNode,
};

/// Two thresholds closer than this are the same split.
pub const THRESHOLD_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Gains and leaves are recomputed over context rows (true labels) plus fine rows.
    #[default]
    Union,
    /// Only the fine-tuning rows participate.
    FineOnly,
}

string_enum!(UpdateMode {
    Union => "union",
    FineOnly => "fine_only",
});

/// Which nodes an update may touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Every node and every leaf with routed rows.
    #[default]
    All,
    /// Only nodes and leaves reached by at least one fine-tuning row.
    Touched,
}

string_enum!(UpdateScope {
    All => "all",
    Touched => "touched",
});

/// Data an update is computed against.
#[derive(Clone, Copy, Debug)]
pub struct UpdateContext<'a> {
    pub context: &'a Dataset,
    pub fine: &'a Dataset,
    pub mode: UpdateMode,
    pub scope: UpdateScope,
}

impl<'a> UpdateContext<'a> {
    pub fn union(context: &'a Dataset, fine: &'a Dataset) -> Self {
        Self {
            context,
            fine,
            mode: UpdateMode::Union,
            scope: UpdateScope::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeUpdateStats {
    pub iteration: usize,
    pub class: usize,
    pub rechecked: usize,
    pub retrained: usize,
    pub leaves_refit: usize,
}

/// One regrown subtree: where it was and what the stored vs recomputed split were.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainEvent {
    pub iteration: usize,
    pub class: usize,
    /// Root-to-node path, `false` = left.
    pub path: Vec<bool>,
    pub stored_feature: usize,
    pub stored_threshold: f64,
    /// `None` when no positive-gain split exists any more.
    pub new_feature: Option<usize>,
    pub new_threshold: Option<f64>,
    pub leaf_budget: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub trees: Vec<TreeUpdateStats>,
    pub retrain_events: Vec<RetrainEvent>,
}

impl UpdateReport {
    pub fn total_rechecked(&self) -> usize {
        self.trees.iter().map(|t| t.rechecked).sum()
    }

    pub fn total_retrained(&self) -> usize {
        self.trees.iter().map(|t| t.retrained).sum()
    }

    pub fn total_leaves_refit(&self) -> usize {
        self.trees.iter().map(|t| t.leaves_refit).sum()
    }
}

/// Outcome of re-searching one internal node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Recheck {
    /// Stored split is still optimal; carries the recomputed gain when samples were routed.
    Unchanged { gain: Option<f64> },
    /// Best split differs (or vanished); the subtree must be regrown.
    Retrain { found: Option<SplitSpec> },
}

/// Re-runs the split search at an internal node over `routed` samples and
/// compares it to the stored `(feature, threshold)`.
///
/// Empty sample sets and leaves are reported unchanged.
#[allow(clippy::too_many_arguments)]
pub fn recheck_node(
    node: &TreeNode,
    routed: &[usize],
    g: &[f64],
    h: &[f64],
    features: &Matrix,
    feature_subset: &[usize],
    lambda: f64,
    min_child_hessian: f64,
) -> Recheck {
    let TreeNode::Split {
        feature, threshold, ..
    } = node
    else {
        return Recheck::Unchanged { gain: None };
    };
    if routed.is_empty() {
        return Recheck::Unchanged { gain: None };
    }
    match best_split(
        routed,
        g,
        h,
        features,
        feature_subset,
        lambda,
        min_child_hessian,
    ) {
        Some(s)
            if s.feature == *feature && (s.threshold - threshold).abs() <= THRESHOLD_TOLERANCE =>
        {
            Recheck::Unchanged { gain: Some(s.gain) }
        }
        found => Recheck::Retrain { found },
    }
}

struct Walk<'a> {
    g: &'a [f64],
    h: &'a [f64],
    features: &'a Matrix,
    subset: &'a [usize],
    params: GrowParams,
    iteration: usize,
    class: usize,
    scope: UpdateScope,
    /// Active rows at or past this index are fine-tuning rows.
    first_fine: usize,
}

impl Walk<'_> {
    /// Whether the node owning `ids` (ascending) is in scope.
    fn in_scope(&self, ids: &[usize]) -> bool {
        match self.scope {
            UpdateScope::All => !ids.is_empty(),
            UpdateScope::Touched => ids.last().is_some_and(|&i| i >= self.first_fine),
        }
    }

    fn structural(
        &self,
        node: &mut TreeNode,
        ids: &[usize],
        path: &mut Vec<bool>,
        stats: &mut TreeUpdateStats,
        events: &mut Vec<RetrainEvent>,
    ) {
        if node.is_leaf() || !self.in_scope(ids) {
            return;
        }
        stats.rechecked += 1;
        let recheck = recheck_node(
            node,
            ids,
            self.g,
            self.h,
            self.features,
            self.subset,
            self.params.lambda,
            self.params.min_child_hessian,
        );
        let TreeNode::Split {
            feature,
            threshold,
            gain,
            left,
            right,
        } = node
        else {
            unreachable!()
        };
        match recheck {
            Recheck::Unchanged { gain: new_gain } => {
                if let Some(ng) = new_gain {
                    *gain = ng;
                }
                let (l_ids, r_ids) = partition(ids, self.features, *feature, *threshold);
                path.push(false);
                self.structural(left, &l_ids, path, stats, events);
                path.pop();
                path.push(true);
                self.structural(right, &r_ids, path, stats, events);
                path.pop();
            }
            Recheck::Retrain { found } => {
                let budget = node.leaf_count();
                let TreeNode::Split {
                    feature, threshold, ..
                } = *node
                else {
                    unreachable!()
                };
                let params = GrowParams {
                    max_leaves: budget,
                    ..self.params
                };
                tracing::debug!(
                    iteration = self.iteration,
                    class = self.class,
                    depth = path.len(),
                    stored_feature = feature,
                    stored_threshold = threshold,
                    new_feature = ?found.map(|s| s.feature),
                    "retraining subtree"
                );
                events.push(RetrainEvent {
                    iteration: self.iteration,
                    class: self.class,
                    path: path.clone(),
                    stored_feature: feature,
                    stored_threshold: threshold,
                    new_feature: found.map(|s| s.feature),
                    new_threshold: found.map(|s| s.threshold),
                    leaf_budget: budget,
                });
                *node = grow_tree(ids, self.g, self.h, self.features, self.subset, &params);
                stats.retrained += 1;
            }
        }
    }

    fn refit(&self, node: &mut TreeNode, ids: &[usize], stats: &mut TreeUpdateStats) {
        if !self.in_scope(ids) {
            return;
        }
        match node {
            TreeNode::Leaf { value } => {
                let (gs, hs) = sum_gh(ids, self.g, self.h);
                *value = leaf_value(gs, hs, self.params.lambda, self.params.shrinkage);
                stats.leaves_refit += 1;
            }
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let (l_ids, r_ids) = partition(ids, self.features, *feature, *threshold);
                self.refit(left, &l_ids, stats);
                self.refit(right, &r_ids, stats);
            }
        }
    }
}

/// Fine-tunes `ensemble` in place (on a copy) and reports what changed.
pub fn inplace_update(
    ensemble: &Ensemble,
    ctx: &UpdateContext<'_>,
) -> Result<(Ensemble, UpdateReport)> {
    let d = ensemble.n_features();
    let k_count = ensemble.class_count();
    let check = |ds: &Dataset| -> Result<()> {
        if ds.n_features() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: ds.n_features(),
            });
        }
        if let Some(&label) = ds.labels().iter().find(|&&y| y >= k_count) {
            return Err(Error::LabelOutOfRange {
                label,
                class_count: k_count,
            });
        }
        Ok(())
    };
    check(ctx.fine)?;
    let active = match ctx.mode {
        UpdateMode::Union => {
            check(ctx.context)?;
            concat_rows(ctx.context, ctx.fine)
        }
        UpdateMode::FineOnly => {
            if ctx.fine.is_empty() {
                return Err(Error::InsufficientSamples(
                    "fine-only update needs fine-tuning rows".into(),
                ));
            }
            (ctx.fine.features().clone(), ctx.fine.labels().to_vec())
        }
    };
    let (features, labels) = active;
    let n = labels.len();
    let first_fine = n - ctx.fine.len();

    let mut model = ensemble.clone();
    let config = model.config().clone();
    let base_params = config.grow_params(config.max_leaves);
    let mut scores = Matrix::zeros(n, k_count);
    for i in 0..n {
        scores.row_mut(i).copy_from_slice(ensemble.base_score());
    }
    let ids: Vec<usize> = (0..n).collect();
    let (mut g, mut h) = (Vec::new(), Vec::new());
    let mut report = UpdateReport::default();

    for tree in model.trees_mut() {
        let k = tree.class;
        class_grad_hess(&labels, &scores, k, &mut g, &mut h);
        let walk = Walk {
            g: &g,
            h: &h,
            features: &features,
            subset: &tree.feature_subset,
            params: base_params,
            iteration: tree.iteration,
            class: k,
            scope: ctx.scope,
            first_fine,
        };
        let mut stats = TreeUpdateStats {
            iteration: tree.iteration,
            class: k,
            ..Default::default()
        };
        walk.structural(
            &mut tree.root,
            &ids,
            &mut Vec::new(),
            &mut stats,
            &mut report.retrain_events,
        );
        walk.refit(&mut tree.root, &ids, &mut stats);
        for i in 0..n {
            scores.row_mut(i)[k] += tree.root.predict(features.row(i));
        }
        report.trees.push(stats);
    }
    Ok((model, report))
}

fn concat_rows(a: &Dataset, b: &Dataset) -> (Matrix, Vec<usize>) {
    let d = a.n_features();
    let mut data = Vec::with_capacity((a.len() + b.len()) * d);
    data.extend_from_slice(a.features().as_slice());
    data.extend_from_slice(b.features().as_slice());
    let mut labels = a.labels().to_vec();
    labels.extend_from_slice(b.labels());
    let m = Matrix::new(a.len() + b.len(), d, data).expect("row-major concatenation");
    (m, labels)
}

/// Union-mode update returning the model together with its report.
pub fn finetune_with_report(
    ensemble: &Ensemble,
    fine: &Dataset,
    context: &Dataset,
) -> Result<(Ensemble, UpdateReport)> {
    inplace_update(ensemble, &UpdateContext::union(context, fine))
}

/// Union-mode update: the standard fine-tuning call.
pub fn finetune(ensemble: &Ensemble, fine: &Dataset, context: &Dataset) -> Result<Ensemble> {
    Ok(finetune_with_report(ensemble, fine, context)?.0)
}
