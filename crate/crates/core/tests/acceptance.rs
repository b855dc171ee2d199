//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.
//!
//! Run with `cargo test -p gbdtwm --test acceptance`. The data-driven
//! criteria read CSVs from `data/` (override with `GBDTWM_DATA_DIR`).

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use gbdtwm::data::{CsvOptions, Dataset, Matrix};
use gbdtwm::gbdt::*;
use gbdtwm::harness::*;
use gbdtwm::inplace::{inplace_update, UpdateContext, UpdateMode, UpdateScope};
use gbdtwm::metrics::{effectiveness, general_accuracy, robustness};
use gbdtwm::model_io::{model_from_str, model_to_string};
use gbdtwm::watermark::{
    build_embedding_plan, candidates, embed, farthest_point_order, select, CandidatePool, Scenario,
    Selection, Strategy,
};
use rand::Rng;

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let r = f();
        let el = t.elapsed();
        let (tag, detail) = match r {
            Ok(d) if el <= limit => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over time budget {limit:?}")),
            Err(d) => ("FAIL", d),
        };
        if tag == "FAIL" {
            self.failed += 1;
        }
        println!("{tag} [{id}] {name}: {detail} ({:.1}s)", el.as_secs_f64());
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spec(name: &str, file: &str) -> DatasetSpec {
    DatasetSpec {
        name: name.into(),
        path: data_dir().join(file),
        test_path: None,
        csv: CsvOptions::default(),
    }
}

fn specs() -> Vec<DatasetSpec> {
    let mut opt = spec("optdigits", "optdigits.tra.csv");
    opt.test_path = Some(data_dir().join("optdigits.tes.csv"));
    opt.csv.class_count = Some(10);
    vec![
        spec("imgseg", "segment.csv"),
        spec("wine", "winequality-red.csv"),
        opt,
        spec("pendigits", "pendigits.csv"),
    ]
}

/// Lazily trained groups, shared between criteria.
struct Groups {
    cfg: ExperimentConfig,
    data: BTreeMap<String, LoadedDataset>,
    cache: BTreeMap<(String, Scenario, u64), Group>,
}

impl Groups {
    fn new() -> Self {
        let mut cfg = ExperimentConfig::new(specs());
        cfg.dup_factor = 5;
        Self {
            cfg,
            data: BTreeMap::new(),
            cache: BTreeMap::new(),
        }
    }

    fn get(&mut self, name: &str, scenario: Scenario, seed: u64) -> Result<&Group, String> {
        let key = (name.to_string(), scenario, seed);
        if !self.cache.contains_key(&key) {
            if !self.data.contains_key(name) {
                let s = self.cfg.datasets.iter().find(|d| d.name == name).unwrap();
                let d = load_dataset(s).map_err(|e| format!("{name}: {e}"))?;
                self.data.insert(name.to_string(), d);
            }
            let g = prepare_group(&self.data[name], scenario, seed, &self.cfg)
                .map_err(|e| e.to_string())?;
            self.cache.insert(key.clone(), g);
        }
        Ok(&self.cache[&key])
    }
}

/// Candidates, selection and embedding only; returns A_wm (None on shortfall).
fn a_wm(
    group: &Group,
    strategy: Strategy,
    selection: Selection,
    ratio: f64,
    cfg: &ExperimentConfig,
) -> Result<Option<f64>, String> {
    let (k, n) = cfg.ratio_base.counts(ratio, group.d_train.len());
    let pool = CandidatePool::build(&group.model, &group.d_cand).map_err(|e| e.to_string())?;
    let set =
        candidates(strategy, &pool, n, cfg.neighbors, group.seed).map_err(|e| e.to_string())?;
    if set.shortfall {
        return Ok(None);
    }
    let key = select(selection, &set, k, group.seed).map_err(|e| e.to_string())?;
    let plan = build_embedding_plan(
        &key,
        group.scenario,
        cfg.dup_factor,
        group.d_train.n_features(),
        group.model.class_count(),
    )
    .map_err(|e| e.to_string())?;
    let wm =
        embed(&group.model, &plan, &group.d_train, cfg.update_scope).map_err(|e| e.to_string())?;
    effectiveness(&wm, &key.entries)
        .map(Some)
        .map_err(|e| e.to_string())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_math() -> Outcome {
    let mut r = rng(100);
    let mut worst_fd = 0.0f64;
    for inst in 0..100 {
        let k = [2, 5, 10][inst % 3];
        let n = r.gen_range(1..5);
        let scores = random_matrix(n, k, -4.0, 4.0, 1000 + inst as u64);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let t = grad_hess(&labels, &scores).map_err(|e| e.to_string())?;
        for i in 0..n {
            for c in 0..k {
                worst_fd = worst_fd
                    .max((t.grad.get(i, c) - fd_gradient(&labels, &scores, i, c, 1e-5)).abs());
                worst_fd = worst_fd
                    .max((t.hess.get(i, c) - fd_hessian(&labels, &scores, i, c, 1e-4)).abs());
            }
            let p = softmax(scores.row(i));
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(format!("softmax row sums to {}", p.iter().sum::<f64>()));
            }
        }
    }
    let mut worst_split = 0.0f64;
    for inst in 0..200u64 {
        let n = r.gen_range(2..=50);
        let d = r.gen_range(1..=5);
        let data = (0..n * d)
            .map(|_| r.gen_range(0..8) as f64 * 0.25)
            .collect();
        let x = Matrix::new(n, d, data).unwrap();
        let g: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..0.25)).collect();
        let ids: Vec<usize> = (0..n).collect();
        let subset: Vec<usize> = (0..d).collect();
        let best = exhaustive_best_gain(&ids, &g, &h, &x, &subset, 1.0, 1e-3);
        match best_split(&ids, &g, &h, &x, &subset, 1.0, 1e-3) {
            None if best <= 1e-12 => {}
            None => return Err(format!("instance {inst}: no split, exhaustive gain {best}")),
            Some(s) => worst_split = worst_split.max((s.gain - best).abs()),
        }
    }
    check(
        worst_fd < 1e-5 && worst_split < 1e-9,
        format!("max FD error {worst_fd:.2e}, max split gain error {worst_split:.2e}"),
    )
}

fn criterion_fixed_point(groups: &mut Groups) -> Outcome {
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for name in ["imgseg", "wine", "optdigits"] {
        let g = groups.get(name, Scenario::CandEqTrain, 0)?;
        let empty = Dataset::empty(g.d_train.n_features(), g.d_train.class_count()).unwrap();
        let ctx = UpdateContext {
            scope: UpdateScope::All,
            ..UpdateContext::union(&g.d_train, &empty)
        };
        let (out, report) = inplace_update(&g.model, &ctx).map_err(|e| e.to_string())?;
        let all = g.d_train.concat(&g.d_test).unwrap();
        let a = g.model.raw_scores(all.features()).unwrap();
        let b = out.raw_scores(all.features()).unwrap();
        let diff = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        names.push(format!("{name}: {} retrains", report.total_retrained()));
    }
    check(
        worst <= 1e-9,
        format!("max |Δscore| {worst:.1e} ({})", names.join(", ")),
    )
}

fn criterion_baseline(groups: &mut Groups) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, floor) in [("pendigits", 0.95), ("optdigits", 0.94)] {
        let g = groups.get(name, Scenario::CandEqTrain, 0)?;
        let held_out = g.d_test.concat(&g.d_fine).unwrap();
        let acc = general_accuracy(&g.model, &held_out).map_err(|e| e.to_string())?;
        ok &= acc >= floor;
        parts.push(format!("{name} {acc:.4} (≥ {floor})"));
    }
    check(ok, parts.join(", "))
}

fn criterion_aggregation() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for rr in [1usize, 2, 5] {
        let rf = rr as f64;
        for _ in 0..50 {
            let k = r.gen_range(3..7);
            let scores: Vec<f64> = (0..k).map(|_| r.gen_range(-4.0..4.0)).collect();
            let rows: Vec<&[f64]> = (0..=rr).map(|_| scores.as_slice()).collect();
            let m = Matrix::from_rows(&rows, k).unwrap();
            let mut labels = vec![0];
            labels.extend(std::iter::repeat_n(1, rr));
            let t = grad_hess(&labels, &m).map_err(|e| e.to_string())?;
            let p = softmax(&scores);
            let sum = |c: usize| (0..=rr).map(|i| t.grad.get(i, c)).sum::<f64>();
            worst = worst.max((sum(0) - (-1.0 + (1.0 + rf) * p[0])).abs());
            worst = worst.max((sum(1) - (-rf + (1.0 + rf) * p[1])).abs());
        }
        // Sign change of the closed forms exactly at their roots.
        let (py, pw) = (1.0 / (1.0 + rf), rf / (1.0 + rf));
        let gy = |p: f64| -1.0 + (1.0 + rf) * p;
        let gw = |p: f64| -rf + (1.0 + rf) * p;
        if !(gy(py - 1e-9) < 0.0
            && gy(py + 1e-9) > 0.0
            && gw(pw - 1e-9) < 0.0
            && gw(pw + 1e-9) > 0.0)
        {
            return Err(format!("sign change misplaced for r = {rr}"));
        }
    }
    check(
        worst <= 1e-12,
        format!("max identity error {worst:.1e} over r ∈ {{1, 2, 5}}"),
    )
}

fn criterion_effectiveness_eq(groups: &mut Groups) -> Outcome {
    let cfg = groups.cfg.clone();
    let mut cells: BTreeMap<(Strategy, Selection), Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        let g = groups.get("wine", Scenario::CandEqTrain, seed)?;
        for strategy in [Strategy::Cluster, Strategy::Outlier, Strategy::Confidence] {
            for selection in Selection::ALL.iter().copied() {
                let v = a_wm(g, strategy, selection, 0.01, &cfg)?.ok_or("unexpected shortfall")?;
                cells.entry((strategy, selection)).or_default().push(v);
            }
        }
    }
    let mut ok = true;
    let parts: Vec<String> = cells
        .iter()
        .map(|((s, sel), v)| {
            let m = mean(v);
            ok &= m >= 0.9;
            format!("{s}/{sel} {m:.3}")
        })
        .collect();
    check(ok, format!("wine, 3 seeds: {}", parts.join(", ")))
}

fn criterion_effectiveness_sep(groups: &mut Groups) -> Outcome {
    let cfg = groups.cfg.clone();
    let mut vals = Vec::new();
    let mut parts = Vec::new();
    for name in ["imgseg", "wine", "optdigits", "pendigits"] {
        let g = groups.get(name, Scenario::CandSeparate, 0)?;
        let v = a_wm(g, Strategy::Confidence, Selection::Conf, 0.001, &cfg)?
            .ok_or("unexpected shortfall")?;
        parts.push(format!("{name} {v:.3}"));
        vals.push(v);
    }
    let m = mean(&vals);
    check(
        m >= 0.9,
        format!(
            "average {m:.3} over subset {{imgseg, wine, optdigits, pendigits}}, seed 0 ({})",
            parts.join(", ")
        ),
    )
}

fn criterion_robustness(groups: &mut Groups) -> Outcome {
    let cfg = groups.cfg.clone();
    let mut union: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    let mut fine_only: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        let g = groups.get("wine", Scenario::CandEqTrain, seed)?;
        for &strategy in Strategy::ALL {
            for &selection in Selection::ALL {
                let out = run_cell(g, strategy, selection, 0.1, &cfg).map_err(|e| e.to_string())?;
                let (Some(rob), Some(wm), Some(key)) =
                    (out.report.robustness, &out.watermarked, &out.key)
                else {
                    continue;
                };
                union.entry(strategy).or_default().push(rob);
                let ctx = UpdateContext {
                    mode: UpdateMode::FineOnly,
                    ..UpdateContext::union(&g.d_train, &g.d_fine)
                };
                let (attacked, _) = inplace_update(wm, &ctx).map_err(|e| e.to_string())?;
                if let Some(v) =
                    robustness(wm, &attacked, &key.entries).map_err(|e| e.to_string())?
                {
                    fine_only.entry(strategy).or_default().push(v);
                }
            }
        }
    }
    let summary = |m: &BTreeMap<Strategy, Vec<f64>>| -> (f64, f64, String) {
        let proposed: Vec<f64> = m
            .iter()
            .filter(|(s, _)| **s != Strategy::Random)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let random = m.get(&Strategy::Random).map_or(f64::NAN, |v| mean(v));
        let per: Vec<String> = m
            .iter()
            .map(|(s, v)| format!("{s} {:.3}", mean(v)))
            .collect();
        (mean(&proposed), random, per.join(", "))
    };
    let (p, rnd, per) = summary(&union);
    let (fp, frnd, fper) = summary(&fine_only);
    check(
        p >= rnd - 0.05,
        format!(
            "union attack: proposed {p:.3} vs random {rnd:.3} [{per}]; fine-only attack (info): proposed {fp:.3} vs random {frnd:.3} [{fper}]"
        ),
    )
}

fn criterion_dispersion() -> Outcome {
    let mut r = rng(8);
    let mut worst_ratio = f64::INFINITY;
    for _ in 0..100 {
        let n = r.gen_range(2..=10);
        let k = r.gen_range(2..=4usize).min(n);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![r.gen_range(0.0..10.0), r.gen_range(0.0..10.0)])
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let start = r.gen_range(0..n);
        let chosen = farthest_point_order(&refs, k, start);
        let ratio = min_pairwise_distance(&refs, &chosen) / optimal_dispersion(&refs, k);
        worst_ratio = worst_ratio.min(ratio);
    }
    check(
        worst_ratio >= 0.5,
        format!("worst greedy/optimal ratio {worst_ratio:.3}"),
    )
}

fn criterion_clustering() -> Outcome {
    use gbdtwm::clustering::{select_k, silhouette};
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for inst in 0..50u64 {
        let n = r.gen_range(4..40);
        let c = r.gen_range(2..5);
        let pts = random_matrix(n, 3, -5.0, 5.0, 900 + inst);
        let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let s = silhouette(&pts, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((s - brute_silhouette(&pts, &labels)).abs());
    }
    let mut picked = Vec::new();
    for seed in 0..10 {
        let (pts, _) = blobs(
            &[vec![0.0, 0.0], vec![20.0, 0.0], vec![0.0, 20.0]],
            12,
            1.5,
            seed,
        );
        picked.push(select_k(&pts, 2, 6, seed).map_err(|e| e.to_string())?);
    }
    check(
        worst <= 1e-9 && picked.iter().all(|&k| k == 3),
        format!("max silhouette error {worst:.1e}, select_k over 10 seeds {picked:?}"),
    )
}

fn criterion_serialization() -> Outcome {
    let ds = synthetic_dataset(200, 5, 2, 2.0, 3);
    let cfg = TrainConfig {
        iterations: 50,
        max_leaves: 6,
        feature_sampling: 0.6,
        ..Default::default()
    };
    let model = train(&ds, &cfg).map_err(|e| e.to_string())?;
    let text = model_to_string(&model).map_err(|e| e.to_string())?;
    let back = model_from_str(&text).map_err(|e| e.to_string())?;
    let mut r = rng(10);
    for _ in 0..100 {
        let x: Vec<f64> = (0..5).map(|_| r.gen_range(-4.0..4.0)).collect();
        let a = model.predict_raw(&x).unwrap();
        let b = back.predict_raw(&x).unwrap();
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Err(format!("prediction differs at {x:?}"));
        }
    }
    let again = model_to_string(&back).map_err(|e| e.to_string())?;
    check(
        again == text && model.trees().len() == 100,
        format!(
            "{} trees, {} bytes, re-save identical: {}",
            model.trees().len(),
            text.len(),
            again == text
        ),
    )
}

fn main() {
    let mut suite = Suite { failed: 0 };
    let mut groups = Groups::new();
    let min = |m: u64| Duration::from_secs(60 * m);

    suite.run(1, "math oracles", Duration::from_secs(10), criterion_math);
    suite.run(2, "no-op fixed point", min(5), || {
        criterion_fixed_point(&mut groups)
    });
    suite.run(3, "baseline accuracy", min(30), || {
        criterion_baseline(&mut groups)
    });
    suite.run(
        4,
        "gradient aggregation",
        Duration::from_secs(1),
        criterion_aggregation,
    );
    suite.run(5, "effectiveness, cand = train", min(20), || {
        criterion_effectiveness_eq(&mut groups)
    });
    suite.run(6, "effectiveness, separate", min(45), || {
        criterion_effectiveness_sep(&mut groups)
    });
    suite.run(7, "robustness ordering", min(30), || {
        criterion_robustness(&mut groups)
    });
    suite.run(
        8,
        "greedy dispersion bound",
        Duration::from_secs(10),
        criterion_dispersion,
    );
    suite.run(
        9,
        "clustering oracles",
        Duration::from_secs(30),
        criterion_clustering,
    );
    suite.run(
        10,
        "serialization",
        Duration::from_secs(10),
        criterion_serialization,
    );

    println!("{} of 10 criteria passed", 10 - suite.failed);
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
