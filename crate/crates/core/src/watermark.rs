//! Watermark candidates, subset selection and embedding.
//!
//! A watermark is a set of samples whose predicted label is flipped to the
//! most confident incorrect class and then burned into the model with an
//! in-place update. Candidates are nominated by a [`Strategy`], a subset is
//! picked by a [`Selection`], and [`build_embedding_plan`] turns that subset
//! into fine-tuning rows.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    self, default_k_range, kmeans, nearest_neighbors, select_k, DEFAULT_MAX_ITERS,
};
use crate::data::{Dataset, Matrix, StandardizationStats};
use crate::error::{Error, Result};
use crate::gbdt::{argmax, Ensemble};
use crate::inplace::{inplace_update, UpdateContext, UpdateScope};

pub const KEY_FORMAT: &str = "gbdtwm-key/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Samples the model already gets wrong.
    Wrong,
    /// Correct samples farthest from every k-means centroid.
    Outlier,
    /// Correct samples nearest each of `n` centroids, anchored by neighbours.
    Cluster,
    /// Correct samples with the lowest true-class score.
    Confidence,
    /// Uniformly drawn correct samples (baseline).
    Random,
}

string_enum!(Strategy {
    Wrong => "wrong",
    Outlier => "outlier",
    Cluster => "cluster",
    Confidence => "confidence",
    Random => "random",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest predicted-class score first.
    Conf,
    /// Greedy farthest-point dispersion.
    Dist,
}

string_enum!(Selection {
    Conf => "conf",
    Dist => "dist",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Candidates come from the training data; embedding rows are duplicated.
    CandEqTrain,
    /// Candidates come from a held-out slice of the training file.
    CandSeparate,
}

string_enum!(Scenario {
    CandEqTrain => "cand_eq_train",
    CandSeparate => "cand_separate",
});

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Center,
    Neighbor,
    #[default]
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Row index into the candidate dataset.
    pub index: usize,
    pub x: Vec<f64>,
    /// Standardized copy of `x`.
    pub z: Vec<f64>,
    /// Raw scores of the initial model.
    pub scores: Vec<f64>,
    pub y_true: usize,
    pub y_pred: usize,
    pub conf_pred: f64,
    pub conf_true: f64,
    pub role: Role,
}

/// Initial-model view of a candidate dataset: predictions, scores and
/// standardized coordinates for every row.
#[derive(Clone, Debug)]
pub struct CandidatePool<'a> {
    data: &'a Dataset,
    stats: StandardizationStats,
    z: Matrix,
    scores: Matrix,
    preds: Vec<usize>,
}

impl<'a> CandidatePool<'a> {
    pub fn build(model: &Ensemble, data: &'a Dataset) -> Result<Self> {
        if data.n_features() != model.n_features() {
            return Err(Error::DimensionMismatch {
                expected: model.n_features(),
                actual: data.n_features(),
            });
        }
        if data.class_count() > model.class_count() {
            return Err(Error::invalid(
                "candidate data has more classes than the model",
            ));
        }
        if data.is_empty() {
            return Err(Error::InsufficientSamples("candidate data is empty".into()));
        }
        let stats = StandardizationStats::fit(data.features())?;
        let z = stats.apply_matrix(data.features())?;
        let scores = model.raw_scores(data.features())?;
        let preds = scores.iter_rows().map(argmax).collect();
        Ok(Self {
            data,
            stats,
            z,
            scores,
            preds,
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn stats(&self) -> &StandardizationStats {
        &self.stats
    }

    pub fn standardized(&self) -> &Matrix {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn predictions(&self) -> &[usize] {
        &self.preds
    }

    pub fn correct_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.preds[i] == self.data.label(i))
            .collect()
    }

    pub fn wrong_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.preds[i] != self.data.label(i))
            .collect()
    }

    pub fn candidate(&self, i: usize, role: Role) -> Candidate {
        let scores = self.scores.row(i).to_vec();
        let y_true = self.data.label(i);
        let y_pred = self.preds[i];
        Candidate {
            index: i,
            x: self.data.row(i).to_vec(),
            z: self.z.row(i).to_vec(),
            conf_pred: scores[y_pred],
            conf_true: scores[y_true],
            scores,
            y_true,
            y_pred,
            role,
        }
    }

    fn rows_of(&self, idx: &[usize]) -> Matrix {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.z.row(i)).collect();
        Matrix::from_rows(&rows, self.z.cols()).expect("rows share a width")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub strategy: Strategy,
    pub candidates: Vec<Candidate>,
    /// Cluster strategy only: anchor neighbours keyed by the centre's row index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub neighbors: BTreeMap<usize, Vec<Candidate>>,
    pub requested: usize,
    pub shortfall: bool,
    /// Standardization fitted on the candidate data.
    pub standardization: StandardizationStats,
}

impl CandidateSet {
    pub fn new(
        strategy: Strategy,
        candidates: Vec<Candidate>,
        requested: usize,
        standardization: StandardizationStats,
    ) -> Self {
        Self {
            strategy,
            shortfall: candidates.len() < requested,
            candidates,
            neighbors: BTreeMap::new(),
            requested,
            standardization,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Most confident class that is neither the true nor the predicted label.
/// Ties go to the lower class index.
pub fn wm_label(raw_scores: &[f64], y_true: usize, y_pred: usize) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (c, &s) in raw_scores.iter().enumerate() {
        if c == y_true || c == y_pred {
            continue;
        }
        if best.is_none_or(|b| s > raw_scores[b]) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| {
        Error::NoEligibleLabel(format!(
            "{} classes leave no label besides {y_true} and {y_pred}",
            raw_scores.len()
        ))
    })
}

fn ascending_by(idx: &mut [usize], key: impl Fn(usize) -> f64) {
    idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
}

fn need_correct(pool: &CandidatePool<'_>, n: usize) -> Result<Vec<usize>> {
    let correct = pool.correct_indices();
    if n == 0 {
        return Err(Error::invalid("candidate count must be positive"));
    }
    if correct.len() < n {
        return Err(Error::InsufficientSamples(format!(
            "{n} candidates requested, {} correctly predicted samples available",
            correct.len()
        )));
    }
    Ok(correct)
}

/// Misclassified samples with the lowest predicted-class score. Returns fewer
/// than `n` (with `shortfall` set) when not enough samples are misclassified.
pub fn candidates_wrong(pool: &CandidatePool<'_>, n: usize) -> CandidateSet {
    let mut idx = pool.wrong_indices();
    ascending_by(&mut idx, |i| pool.scores.get(i, pool.preds[i]));
    idx.truncate(n);
    let c = idx
        .iter()
        .map(|&i| pool.candidate(i, Role::Plain))
        .collect();
    CandidateSet::new(Strategy::Wrong, c, n, pool.stats.clone())
}

/// Correct samples ranked by distance to the nearest centroid, farthest first.
/// The cluster count maximises the silhouette over [`default_k_range`]; tiny
/// sets use a single cluster.
pub fn candidates_outlier(pool: &CandidatePool<'_>, n: usize, seed: u64) -> Result<CandidateSet> {
    let correct = need_correct(pool, n)?;
    let points = pool.rows_of(&correct);
    let m = match default_k_range(correct.len()) {
        Some((lo, hi)) => select_k(&points, lo, hi, seed)?,
        None => 1,
    };
    let model = kmeans(&points, m, seed, DEFAULT_MAX_ITERS)?;
    let dist: Vec<f64> = points
        .iter_rows()
        .map(|p| {
            model
                .centroids
                .iter_rows()
                .map(|c| clustering::squared_distance(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut order: Vec<usize> = (0..correct.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let c = order[..n]
        .iter()
        .map(|&j| pool.candidate(correct[j], Role::Plain))
        .collect();
    Ok(CandidateSet::new(
        Strategy::Outlier,
        c,
        n,
        pool.stats.clone(),
    ))
}

/// `n` clusters over the correct samples; each centre is the member nearest
/// its centroid and carries its `l` nearest correct samples (never another
/// centre) as anchors.
pub fn candidates_cluster_center(
    pool: &CandidatePool<'_>,
    n: usize,
    l: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let correct = need_correct(pool, n)?;
    let points = pool.rows_of(&correct);
    let model = kmeans(&points, n, seed, DEFAULT_MAX_ITERS)?;
    let mut centers = Vec::with_capacity(n);
    for j in 0..n {
        let members = model.members(j);
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                clustering::squared_distance(points.row(a), model.centroids.row(j))
                    .total_cmp(&clustering::squared_distance(
                        points.row(b),
                        model.centroids.row(j),
                    ))
                    .then(a.cmp(&b))
            })
            .ok_or_else(|| Error::InsufficientSamples(format!("cluster {j} is empty")))?;
        centers.push(best);
    }
    let take = l.min(correct.len() - n);
    let mut set = CandidateSet::new(
        Strategy::Cluster,
        centers
            .iter()
            .map(|&j| pool.candidate(correct[j], Role::Center))
            .collect(),
        n,
        pool.stats.clone(),
    );
    for &j in &centers {
        let near = nearest_neighbors(points.row(j), &points, take, &centers)?;
        set.neighbors.insert(
            correct[j],
            near.iter()
                .map(|&q| pool.candidate(correct[q], Role::Neighbor))
                .collect(),
        );
    }
    Ok(set)
}

/// Correct samples with the lowest true-class score.
pub fn candidates_confidence(pool: &CandidatePool<'_>, n: usize) -> Result<CandidateSet> {
    let mut idx = need_correct(pool, n)?;
    ascending_by(&mut idx, |i| pool.scores.get(i, pool.data.label(i)));
    idx.truncate(n);
    let c = idx
        .iter()
        .map(|&i| pool.candidate(i, Role::Plain))
        .collect();
    Ok(CandidateSet::new(
        Strategy::Confidence,
        c,
        n,
        pool.stats.clone(),
    ))
}

/// Uniform draw without replacement from the correct samples.
pub fn candidates_random(pool: &CandidatePool<'_>, n: usize, seed: u64) -> Result<CandidateSet> {
    let correct = need_correct(pool, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, correct.len(), n);
    let c = picks
        .iter()
        .map(|j| pool.candidate(correct[j], Role::Plain))
        .collect();
    Ok(CandidateSet::new(
        Strategy::Random,
        c,
        n,
        pool.stats.clone(),
    ))
}

/// Dispatches to the strategy's candidate function. `l` is only used by
/// [`Strategy::Cluster`].
pub fn candidates(
    strategy: Strategy,
    pool: &CandidatePool<'_>,
    n: usize,
    l: usize,
    seed: u64,
) -> Result<CandidateSet> {
    match strategy {
        Strategy::Wrong => Ok(candidates_wrong(pool, n)),
        Strategy::Outlier => candidates_outlier(pool, n, seed),
        Strategy::Cluster => candidates_cluster_center(pool, n, l, seed),
        Strategy::Confidence => candidates_confidence(pool, n),
        Strategy::Random => candidates_random(pool, n, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkEntry {
    pub candidate: Candidate,
    pub bit: u8,
    pub y_wm: usize,
}

/// The ownership key: which samples were flipped and to what.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSet {
    pub format: String,
    pub strategy: Strategy,
    pub selection: Selection,
    pub seed: u64,
    pub entries: Vec<WatermarkEntry>,
    /// Candidates left unselected, used for resilience.
    pub non_selected: Vec<Candidate>,
    /// Anchor neighbours of the selected centres (Cluster strategy).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub neighbors: BTreeMap<usize, Vec<Candidate>>,
    /// Standardization fitted on the candidate data, for reproducing distances.
    pub standardization: StandardizationStats,
}

impl WatermarkSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries with bit 1, i.e. those actually embedded.
    pub fn flipped(&self) -> impl Iterator<Item = &WatermarkEntry> {
        self.entries.iter().filter(|e| e.bit == 1)
    }
}

fn finish_selection(
    set: &CandidateSet,
    chosen: Vec<usize>,
    selection: Selection,
    seed: u64,
) -> Result<WatermarkSet> {
    let mut taken = vec![false; set.len()];
    let mut entries = Vec::with_capacity(chosen.len());
    let mut neighbors = BTreeMap::new();
    for &p in &chosen {
        taken[p] = true;
        let c = &set.candidates[p];
        let y_wm = wm_label(&c.scores, c.y_true, c.y_pred)?;
        if let Some(nb) = set.neighbors.get(&c.index) {
            neighbors.insert(c.index, nb.clone());
        }
        entries.push(WatermarkEntry {
            candidate: c.clone(),
            bit: 1,
            y_wm,
        });
    }
    let non_selected = set
        .candidates
        .iter()
        .zip(&taken)
        .filter(|(_, &t)| !t)
        .map(|(c, _)| c.clone())
        .collect();
    Ok(WatermarkSet {
        format: KEY_FORMAT.to_string(),
        strategy: set.strategy,
        selection,
        seed,
        entries,
        non_selected,
        neighbors,
        standardization: set.standardization.clone(),
    })
}

fn check_k(set: &CandidateSet, k: usize) -> Result<()> {
    if k > set.len() {
        return Err(Error::InsufficientSamples(format!(
            "{k} watermarks requested from {} candidates",
            set.len()
        )));
    }
    Ok(())
}

/// The `k` candidates with the lowest predicted-class score; this is also
/// the `k`-subset with the lowest total score. Every bit is set to 1.
pub fn select_lowest_confidence(set: &CandidateSet, k: usize) -> Result<WatermarkSet> {
    check_k(set, k)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.candidates[a]
            .conf_pred
            .total_cmp(&set.candidates[b].conf_pred)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    finish_selection(set, order, Selection::Conf, 0)
}

/// Greedy farthest-point order over candidate positions starting from
/// `start`. Ties go to the lower position.
pub fn farthest_point_order(points: &[&[f64]], k: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    if k == 0 || n == 0 {
        return Vec::new();
    }
    let mut chosen = vec![start];
    let mut gap: Vec<f64> = points
        .iter()
        .map(|p| clustering::squared_distance(p, points[start]))
        .collect();
    let mut used = vec![false; n];
    used[start] = true;
    while chosen.len() < k.min(n) {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !used[i] && best.is_none_or(|b| gap[i] > gap[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k <= n leaves a free point");
        used[b] = true;
        chosen.push(b);
        for i in 0..n {
            gap[i] = gap[i].min(clustering::squared_distance(points[i], points[b]));
        }
    }
    chosen
}

/// Greedy max-min dispersion in standardized space from a seeded random start.
pub fn select_max_distance(set: &CandidateSet, k: usize, seed: u64) -> Result<WatermarkSet> {
    check_k(set, k)?;
    if k == 0 {
        return finish_selection(set, Vec::new(), Selection::Dist, seed);
    }
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..set.len());
    select_max_distance_from(set, k, start, seed)
}

/// [`select_max_distance`] with an explicit starting position.
pub fn select_max_distance_from(
    set: &CandidateSet,
    k: usize,
    start: usize,
    seed: u64,
) -> Result<WatermarkSet> {
    check_k(set, k)?;
    if k > 0 && start >= set.len() {
        return Err(Error::invalid(format!(
            "start {start} outside {} candidates",
            set.len()
        )));
    }
    let points: Vec<&[f64]> = set.candidates.iter().map(|c| c.z.as_slice()).collect();
    let chosen = farthest_point_order(&points, k, start);
    finish_selection(set, chosen, Selection::Dist, seed)
}

pub fn select(
    selection: Selection,
    set: &CandidateSet,
    k: usize,
    seed: u64,
) -> Result<WatermarkSet> {
    match selection {
        Selection::Conf => select_lowest_confidence(set, k),
        Selection::Dist => select_max_distance(set, k, seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPlan {
    pub fine: Dataset,
    pub scenario: Scenario,
    pub dup_factor: usize,
    /// Extra copies of each cluster centre before duplication.
    pub center_extra: usize,
}

/// Fine-tuning rows for a watermark set.
///
/// Each bit-1 entry contributes `(x, y_wm)`; a cluster centre contributes it
/// twice plus its neighbours under their true labels. Bit-0 entries add
/// nothing. Under [`Scenario::CandEqTrain`] every row is repeated
/// `dup_factor` times.
pub fn build_embedding_plan(
    wset: &WatermarkSet,
    scenario: Scenario,
    dup_factor: usize,
    n_features: usize,
    class_count: usize,
) -> Result<EmbeddingPlan> {
    if dup_factor == 0 {
        return Err(Error::invalid("duplication factor must be positive"));
    }
    let center_extra = 1;
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut labels = Vec::new();
    for e in wset.flipped() {
        let c = &e.candidate;
        let copies = if c.role == Role::Center {
            1 + center_extra
        } else {
            1
        };
        for _ in 0..copies {
            rows.push(&c.x);
            labels.push(e.y_wm);
        }
        if let Some(nb) = wset.neighbors.get(&c.index) {
            for q in nb {
                rows.push(&q.x);
                labels.push(q.y_true);
            }
        }
    }
    let mut fine = if rows.is_empty() {
        Dataset::empty(n_features, class_count)?
    } else {
        Dataset::new(Matrix::from_rows(&rows, n_features)?, labels, class_count)?
    };
    if scenario == Scenario::CandEqTrain {
        fine = fine.repeat_rows(dup_factor);
    }
    Ok(EmbeddingPlan {
        fine,
        scenario,
        dup_factor,
        center_extra,
    })
}

/// Burns the plan into the model with a union-mode in-place update.
pub fn embed(
    model: &Ensemble,
    plan: &EmbeddingPlan,
    context: &Dataset,
    scope: UpdateScope,
) -> Result<Ensemble> {
    let ctx = UpdateContext {
        scope,
        ..UpdateContext::union(context, &plan.fine)
    };
    Ok(inplace_update(model, &ctx)?.0)
}
