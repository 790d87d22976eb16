use super::*;
use crate::benchgen::{gen_dataset, SynthConfig, SynthTask};
use crate::dataset::{Episode, IrregularSeries, Observation};
use crate::encoding::EncoderConfig;
use crate::matrix::Matrix;
use crate::models::{Family, TeMode};

fn small_data(task: SynthTask, n: usize, seed: u64) -> Vec<Episode> {
    let cfg = SynthConfig {
        n_channels: 2,
        rate_per_hour: 0.8,
        window_hours: 12.0,
        task,
        gap_threshold_hours: 3.0,
        seed,
        ..SynthConfig::default()
    };
    gen_dataset(&cfg, n).unwrap().episodes
}

fn quick_cfg(seed: u64) -> CvConfig {
    CvConfig {
        k: 3,
        runs: 2,
        base_seed: seed,
        hyper: Hyper {
            lr: 1e-2,
            epochs: 2,
            batch_size: 16,
            weight_decay: 1e-2,
        },
        features: FeatureConfig {
            window_hours: 12.0,
            bin_hours: 2.0,
            ..FeatureConfig::default()
        },
    }
}

fn small_lstm() -> ModelSpec {
    let mut s = ModelSpec::new(Family::Lstm, Task::Classification, 4);
    s.head_widths = vec![4];
    s.with_te(TeMode::CatTe, Some(EncoderConfig::temporal(4, 12.0).unwrap()))
}

fn toy_separable() -> LabeledSet {
    // Two features, label = [x0 + x1 > 0], with a margin.
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for i in 0..40 {
        let a = (i as f64 * 0.37).sin() * 2.0;
        let b = (i as f64 * 0.91).cos() * 2.0;
        let s = a + b;
        if s.abs() < 0.3 {
            continue;
        }
        inputs.push(Prepared {
            x: Matrix::from_vec(1, 2, vec![a, b]),
            times: vec![],
        });
        targets.push(if s > 0.0 { 1.0 } else { 0.0 });
    }
    LabeledSet::new(inputs, targets).unwrap()
}

#[test]
fn zero_epochs_returns_initial_params() {
    let spec = ModelSpec::new(Family::Logreg, Task::Classification, 0);
    let set = toy_separable();
    let hyper = Hyper {
        epochs: 0,
        ..Hyper::default()
    };
    let t = train_one(&spec, &set, &set, &hyper, 3).unwrap();
    assert!(t.history.is_empty());
    assert_eq!(t.best_epoch, None);
    let init = crate::models::init_params(&spec, 2, crate::benchgen::derive_seed(&[3, 0])).unwrap();
    assert_eq!(t.params, init);
}

#[test]
fn logreg_separates_a_separable_set() {
    let spec = ModelSpec::new(Family::Logreg, Task::Classification, 0);
    let set = toy_separable();
    let hyper = Hyper {
        lr: 0.05,
        epochs: 200,
        batch_size: 100,
        weight_decay: 0.0,
    };
    let t = train_one(&spec, &set, &set, &hyper, 1).unwrap();
    let scores = predict(&spec, &t.params, &set.inputs).unwrap();
    let correct = scores
        .iter()
        .zip(&set.targets)
        .filter(|(p, y)| (**p > 0.5) == (**y == 1.0))
        .count();
    assert_eq!(correct, set.len());
}

#[test]
fn training_is_deterministic() {
    let eps = small_data(SynthTask::TimingClassification, 60, 4);
    let spec = small_lstm();
    let cfg = quick_cfg(1);
    let refs: Vec<&Episode> = eps.iter().collect();
    let p = Pipeline::fit(&spec, cfg.features, eps.iter().map(|e| &e.series)).unwrap();
    let set = LabeledSet::new(
        p.prepare_all(eps.iter().map(|e| &e.series)).unwrap(),
        features::targets(spec.task, &refs).unwrap(),
    )
    .unwrap();
    let a = train_one(&spec, &set, &set, &cfg.hyper, 9).unwrap();
    let b = train_one(&spec, &set, &set, &cfg.hyper, 9).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let c = train_one(&spec, &set, &set, &cfg.hyper, 10).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn aggregate_uses_population_std() {
    let s = aggregate(crate::metrics::Metric::Mae, &[1.0, 2.0, 3.0]);
    assert_eq!(s.mean, 2.0);
    assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert!((s.stderr - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    assert_eq!(aggregate(crate::metrics::Metric::Mae, &[4.0]).stderr, 0.0);
}

#[test]
fn cv_protocol_counts_and_is_reproducible() {
    let eps = small_data(SynthTask::TimingClassification, 90, 5);
    let (pool, test) = eps.split_at(60);
    let test = TestSet::new(test.to_vec());
    let spec = small_lstm();
    let cfg = quick_cfg(11);
    let a = run_cv(&spec, pool, &test, &cfg).unwrap();
    assert_eq!(a.report.trainings(), cfg.k * cfg.runs);
    assert_eq!(a.selected.len(), cfg.k);
    assert_eq!(a.report.rows.iter().filter(|r| r.selected).count(), cfg.k);
    // Each episode validates exactly once per run index.
    for run in 0..cfg.runs {
        let mut seen = vec![0; pool.len()];
        for row in a.report.rows.iter().filter(|r| r.run == run) {
            for i in a.folds.members(row.fold) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
    let b = run_cv(&spec, pool, &test, &cfg).unwrap();
    assert_eq!(a.report.to_jsonl(), b.report.to_jsonl());
    assert_eq!(a.report.summary_csv(), b.report.summary_csv());
    assert_eq!(
        RunReport::recompute_summary(&a.report.rows, metrics_for(spec.task)),
        a.report.summary
    );
    assert_eq!(RunReport::from_jsonl(&a.report.to_jsonl()).unwrap(), a.report.rows);

    // Fold contents follow ids, not input order.
    let mut reversed = pool.to_vec();
    reversed.reverse();
    let c = run_cv(&spec, &reversed, &test, &cfg).unwrap();
    for f in 0..cfg.k {
        let ids = |o: &CvOutcome, p: &[Episode]| {
            let mut v: Vec<String> = o.folds.members(f).iter().map(|&i| p[i].id.clone()).collect();
            v.sort();
            v
        };
        assert_eq!(ids(&a, pool), ids(&c, &reversed));
    }
}

#[test]
fn test_split_cannot_influence_training() {
    let eps = small_data(SynthTask::TimingClassification, 80, 6);
    let (pool, test) = eps.split_at(60);
    let spec = small_lstm();
    let cfg = quick_cfg(2);
    let a = run_cv(&spec, pool, &TestSet::new(test.to_vec()), &cfg).unwrap();

    let schema = std::sync::Arc::clone(test[0].series.schema());
    let perturbed: Vec<Episode> = test
        .iter()
        .map(|e| Episode {
            id: e.id.clone(),
            label: 1.0 - e.label,
            series: IrregularSeries::new(
                std::sync::Arc::clone(&schema),
                e.series
                    .observations()
                    .iter()
                    .map(|o| Observation {
                        value: o.value * 100.0 + 7.0,
                        ..*o
                    })
                    .collect(),
            )
            .unwrap(),
        })
        .collect();
    let b = run_cv(&spec, pool, &TestSet::new(perturbed), &cfg).unwrap();
    for (x, y) in a.selected.iter().zip(&b.selected) {
        assert_eq!(x.pipeline.norm, y.pipeline.norm);
        assert_eq!(x.params, y.params);
        assert_eq!((x.fold, x.run), (y.fold, y.run));
    }
    let vals = |o: &CvOutcome| o.report.rows.iter().map(|r| r.val_metric).collect::<Vec<_>>();
    assert_eq!(vals(&a), vals(&b));
}

#[test]
fn overlapping_splits_are_rejected() {
    let eps = small_data(SynthTask::TimingClassification, 40, 7);
    let test = TestSet::new(eps[..5].to_vec());
    assert!(run_cv(&small_lstm(), &eps, &test, &quick_cfg(0)).is_err());
}

#[test]
fn all_failed_runs_are_reported() {
    let eps = small_data(SynthTask::ElapsedRegression, 40, 8);
    let (pool, test) = eps.split_at(30);
    let spec = ModelSpec::new(Family::Linreg, Task::Regression, 0);
    let mut cfg = quick_cfg(0);
    cfg.hyper.lr = 1e300;
    cfg.hyper.weight_decay = 0.0;
    match run_cv(&spec, pool, &TestSet::new(test.to_vec()), &cfg) {
        Err(Error::Diverged(m)) => assert!(m.contains("Lin.R"), "{m}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report)),
    }
}

#[test]
fn regression_metrics_are_in_hours() {
    let eps = small_data(SynthTask::ElapsedRegression, 60, 9);
    let (pool, test) = eps.split_at(45);
    let mut spec = ModelSpec::new(Family::Mlp, Task::Regression, 0);
    spec.head_widths = vec![8];
    let out = run_cv(&spec, pool, &TestSet::new(test.to_vec()), &quick_cfg(3)).unwrap();
    let names: Vec<_> = out.report.summary.iter().map(|s| s.metric.name()).collect();
    assert_eq!(names, ["MAE", "RMSE", "EV"]);
    let mae = out.report.summary[0].mean;
    let labels: Vec<f64> = test.iter().map(|e| e.label).collect();
    let mean_label = labels.iter().sum::<f64>() / labels.len() as f64;
    // An untrained-ish model is off by hours, not by fractions of a day.
    assert!(mae > 0.1 && mae < 10.0 * mean_label.max(1.0), "{mae}");
    assert!(out.report.summary[0].mean <= out.report.summary[1].mean);
}

#[test]
fn sweep_shape_and_full_fraction_consistency() {
    let eps = small_data(SynthTask::TimingClassification, 90, 12);
    let (pool, test) = eps.split_at(60);
    let test = TestSet::new(test.to_vec());
    let spec = small_lstm();
    let out = run_cv(&spec, pool, &test, &quick_cfg(4)).unwrap();
    let fractions = default_fractions();
    let rows = sweep_dropout(&spec, &out.selected, &test, &fractions, 3, 1).unwrap();
    assert_eq!(rows.len(), fractions.len() * 2);
    let auc: Vec<&SweepRow> = rows.iter().filter(|r| r.metric == crate::metrics::Metric::AucRoc).collect();
    assert!(auc.windows(2).all(|w| w[0].fraction > w[1].fraction));
    let base = out.report.summary.iter().find(|s| s.metric == crate::metrics::Metric::AucRoc).unwrap();
    assert!((auc[0].value - base.mean).abs() < 1e-12);
    assert!((auc[0].std - base.std).abs() < 1e-12);
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), rows.len() + 1);
    assert!(csv.starts_with("fraction,metric,value,std\n1,AUC-ROC,"));
    assert!(sweep_dropout(&spec, &out.selected, &test, &[0.0], 1, 1).is_err());
    assert!(sweep_dropout(&spec, &[], &test, &fractions, 1, 1).is_err());
}
