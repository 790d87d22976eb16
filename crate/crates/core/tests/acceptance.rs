//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stdout, so the lines show up even when output is captured.
//!
//! Tests take a shared lock so the runtime limits are measured without
//! competing for the CPU.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timeembed::benchgen::{derive_seed, gen_dataset, SynthConfig, SynthTask, DEFAULT_CHANNELS};
use timeembed::dataset::Episode;
use timeembed::encoding::{estimate_delta, shift_map, te, te_batch, EncoderConfig};
use timeembed::matrix::Matrix;
use timeembed::metrics::{auc_roc, avg_precision, explained_variance, mae, rmse, EvalBatch, Metric};
use timeembed::models::{
    backward, count_params, forward, init_params, loss, solve_hidden_for_budget, Family, ModelSpec, ParamSet,
    ParamSlot, Task, TeMode,
};
use timeembed::training::{
    default_fractions, evaluate, opt_step, predict, run_cv, sweep_csv, sweep_dropout, train_one, AdamConfig, CvConfig,
    FeatureConfig, Hyper, LabeledSet, OptState, Pipeline, Prepared, TestSet,
};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[{n:>2}] {verdict} {name}: {detail}").unwrap();
    out.flush().unwrap();
    assert!(pass, "{name}: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn even_dim(rng: &mut ChaCha8Rng) -> usize {
    2 * rng.random_range(2..=32)
}

#[test]
fn c01_te_norm_is_constant() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let dim = even_dim(&mut rng);
        let max_time = rng.random_range(1.0..=1e4);
        let cfg = EncoderConfig::temporal(dim, max_time).unwrap();
        let t = rng.random_range(-1e4..1e4);
        let v = te(t, &cfg).unwrap();
        let n2: f64 = v.as_slice().iter().map(|x| x * x).sum();
        worst = worst.max((n2 - dim as f64 / 2.0).abs());
    }
    let took = start.elapsed();
    report(
        1,
        "te norm invariance",
        worst < 1e-9 && took < Duration::from_secs(1),
        &format!("max |norm^2 - dim/2| = {worst:.2e} over 10^4 draws, {:.3}s", secs(took)),
    );
}

#[test]
fn c02_shift_map_is_linear() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1_000 {
        let dim = even_dim(&mut rng);
        let max_time = rng.random_range(1.0..=1e4);
        let cfg = EncoderConfig::temporal(dim, max_time).unwrap();
        let t = rng.random_range(0.0..1e3);
        let k = rng.random_range(-1e3..1e3);
        let shifted = shift_map(k, &cfg).unwrap().apply(&te(t, &cfg).unwrap()).unwrap();
        let direct = te(t + k, &cfg).unwrap();
        for (a, b) in shifted.as_slice().iter().zip(direct.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    let took = start.elapsed();
    report(
        2,
        "linear shift law",
        worst < 1e-9 && took < Duration::from_secs(1),
        &format!("max inf-norm error {worst:.2e} over 10^3 draws, {:.3}s", secs(took)),
    );
}

#[test]
fn c03_delta_round_trips() {
    let _g = serial();
    let cfg = EncoderConfig::temporal(32, 48.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let limit = 0.9 * 48.0;
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut deltas: Vec<f64> = (0..2_000).map(|_| rng.random_range(-limit..=limit)).collect();
    deltas.extend([limit, -limit, 0.0]);
    for d in deltas {
        let t = rng.random_range(0.0..48.0);
        match estimate_delta(&te(t, &cfg).unwrap(), &te(t + d, &cfg).unwrap(), &cfg) {
            Ok(est) => worst = worst.max((est - d).abs()),
            Err(_) => failures += 1,
        }
    }
    report(
        3,
        "delta recovery",
        failures == 0 && worst < 1e-5,
        &format!("dim 32, max_time 48, |delta| <= {limit}: max error {worst:.2e}, {failures} failures"),
    );
}

fn fd_spec(family: Family, mode: TeMode, task: Task, h: usize) -> ModelSpec {
    let mut s = ModelSpec::new(family, task, h);
    if !matches!(family, Family::Linreg | Family::Logreg) {
        s.head_widths = vec![6, 4];
    }
    if let Some(a) = s.attention.as_mut() {
        a.d_a = 5;
        a.r = 3;
        a.penalty_c = 0.3;
    }
    let cfg = match mode {
        TeMode::CatTe => Some(EncoderConfig::temporal(4, 48.0).unwrap()),
        TeMode::AddTe => Some(EncoderConfig::temporal(h, 48.0).unwrap()),
        _ => None,
    };
    s.with_te(mode, cfg)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Largest relative gradient error over every parameter.
fn fd_worst(spec: &ModelSpec, steps: usize, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..steps).map(|j| 0.5 + 9.0 * j as f64 + rng.random_range(0.0..3.0)).collect();
    let values = random_matrix(steps, 2, &mut rng);
    let x = match spec.te_mode {
        TeMode::Mask => values.hcat(&random_matrix(steps, 4, &mut rng)),
        TeMode::CatTe => values.hcat(&te_batch(&times, spec.te_cfg.as_ref().unwrap()).unwrap()),
        _ => values,
    };
    let mut p = init_params(spec, spec.input_dim(steps, x.cols()), seed).unwrap();
    let y = match spec.task {
        Task::Classification => (seed % 2) as f64,
        Task::Regression => {
            // Stay clear of the non-negativity clamp.
            p.get_mut("out.bias").unwrap().data[0] = 2.0;
            0.5
        }
    };
    let objective = |p: &ParamSet| loss(spec, &forward(spec, p, &x, &times).unwrap(), y).unwrap();
    let grads = backward(spec, &p, &forward(spec, &p, &x, &times).unwrap(), y).unwrap();
    let eps = 1e-5;
    let mut worst = (0.0, String::new());
    for i in 0..p.len() {
        for j in 0..p.tensor(i).len() {
            let orig = p.tensor(i).data[j];
            p.tensor_mut(i).data[j] = orig + eps;
            let up = objective(&p);
            p.tensor_mut(i).data[j] = orig - eps;
            let down = objective(&p);
            p.tensor_mut(i).data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.tensor(i).data[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
            if rel > worst.0 {
                worst = (rel, format!("{} {}[{j}]", spec.alias(), p.names()[i]));
            }
        }
    }
    worst
}

#[test]
fn c04_gradients_match_finite_differences() {
    let _g = serial();
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    let mut cases = 0;
    for family in [Family::Linreg, Family::Logreg, Family::Mlp, Family::Lstm, Family::SaLstm] {
        let modes: &[TeMode] = if family.is_recurrent() {
            &[TeMode::None, TeMode::Mask, TeMode::CatTe, TeMode::AddTe]
        } else {
            &[TeMode::None, TeMode::Mask, TeMode::CatTe]
        };
        let tasks: &[Task] = match family {
            Family::Linreg => &[Task::Regression],
            Family::Logreg => &[Task::Classification],
            _ => &[Task::Classification, Task::Regression],
        };
        for &mode in modes {
            for &task in tasks {
                for (steps, h) in [(1, 8), (5, 8), (3, 2)] {
                    let spec = fd_spec(family, mode, task, h);
                    let w = fd_worst(&spec, steps, 40 + cases);
                    if w.0 > worst.0 {
                        worst = w;
                    }
                    cases += 1;
                }
            }
        }
    }
    let took = start.elapsed();
    report(
        4,
        "gradient check",
        worst.0 < 1e-4 && took < Duration::from_secs(30),
        &format!(
            "{cases} instances, worst relative error {:.2e} ({}), {:.1}s",
            worst.0,
            worst.1,
            secs(took)
        ),
    );
}

/// Fraction of positive-negative pairs ranked correctly, ties counting half.
fn brute_auc(p: &[f64], y: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if y[i] == 1.0 && y[j] == 0.0 {
                pairs += 1.0;
                wins += if p[i] > p[j] {
                    1.0
                } else if p[i] == p[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Step-wise AP by scanning every distinct score as a threshold.
fn brute_ap(p: &[f64], y: &[f64]) -> f64 {
    let mut thresholds = p.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = y.iter().filter(|&&v| v == 1.0).count() as f64;
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for t in thresholds {
        let flagged: Vec<usize> = (0..p.len()).filter(|&i| p[i] >= t).collect();
        let tp = flagged.iter().filter(|&&i| y[i] == 1.0).count() as f64;
        let recall = tp / positives;
        ap += (recall - last_recall) * tp / flagged.len() as f64;
        last_recall = recall;
    }
    ap
}

#[test]
fn c05_metrics_match_brute_force() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut auc_err = 0.0f64;
    let mut ap_err = 0.0f64;
    let mut order_ok = true;
    for b in 0..100 {
        let n = rng.random_range(2..=200);
        // Every other batch is coarse so that tied scores are common.
        let coarse = b % 2 == 0;
        let mut p: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random();
                if coarse {
                    (v * 8.0).floor() / 8.0
                } else {
                    v
                }
            })
            .collect();
        let mut y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.3))).collect();
        y[0] = 1.0;
        y[1] = 0.0;
        let batch = EvalBatch::binary(p.clone(), y.clone()).unwrap();
        auc_err = auc_err.max((auc_roc(&batch).unwrap() - brute_auc(&p, &y)).abs());
        ap_err = ap_err.max((avg_precision(&batch).unwrap() - brute_ap(&p, &y)).abs());

        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        p.iter_mut().for_each(|v| *v = *v * 10.0 - 5.0);
        let reg = EvalBatch::new(p, targets).unwrap();
        order_ok &= mae(&reg) <= rmse(&reg);
    }

    let y = vec![1.0, 4.0, 2.0, 8.0];
    let ev = |p: Vec<f64>| explained_variance(&EvalBatch::new(p, y.clone()).unwrap()).unwrap();
    let exact = ev(y.clone());
    let mean = ev(vec![3.75; 4]);
    let offset = ev(y.iter().map(|v| v + 2.5).collect());
    let constant = explained_variance(&EvalBatch::new(vec![1.0, 2.0], vec![3.0, 3.0]).unwrap()).is_err();
    let ev_ok = exact == 1.0 && mean.abs() < 1e-15 && (offset - 1.0).abs() < 1e-15 && constant;

    report(
        5,
        "metric oracles",
        auc_err < 1e-12 && ap_err < 1e-12 && order_ok && ev_ok,
        &format!(
            "100 batches: auc err {auc_err:.1e}, ap err {ap_err:.1e}, mae <= rmse {order_ok}, ev cases {ev_ok}"
        ),
    );
}

fn labeled(pipeline: &Pipeline, episodes: &[Episode]) -> LabeledSet {
    LabeledSet::new(
        pipeline.prepare_all(episodes.iter().map(|e| &e.series)).unwrap(),
        episodes.iter().map(|e| e.label).collect(),
    )
    .unwrap()
}

/// Trains on the first 1,600 pool episodes, selects on the other 400 and
/// returns the test AUC with the CPU-bound training time.
fn timing_auc(spec: &ModelSpec, data: &[Episode], hyper: &Hyper, seed: u64) -> (f64, Duration) {
    let (pool, test) = data.split_at(2_000);
    let (train, val) = pool.split_at(1_600);
    let features = FeatureConfig::default();
    let pipeline = Pipeline::fit(spec, features, train.iter().map(|e| &e.series)).unwrap();
    let start = Instant::now();
    let trained = train_one(spec, &labeled(&pipeline, train), &labeled(&pipeline, val), hyper, seed).unwrap();
    let took = start.elapsed();
    let auc = evaluate(spec, &trained.params, &labeled(&pipeline, test)).unwrap()[&Metric::AucRoc];
    (auc, took)
}

#[test]
fn c06_time_embedding_separates_timing_classes() {
    let _g = serial();
    // One channel keeps the last-observation time unambiguous.
    let hyper = Hyper {
        lr: 5e-3,
        epochs: 60,
        batch_size: 100,
        weight_decay: 1e-2,
    };
    let plain = ModelSpec::new(Family::Lstm, Task::Classification, 16);
    let cat = plain
        .clone()
        .with_te(TeMode::CatTe, Some(EncoderConfig::temporal(32, 48.0).unwrap()));
    let mut passed = 0;
    let mut cpu = Duration::ZERO;
    let mut lines = Vec::new();
    for seed in 101..=105u64 {
        let cfg = SynthConfig {
            n_channels: 1,
            rate_per_hour: 0.5,
            window_hours: 48.0,
            task: SynthTask::TimingClassification,
            gap_threshold_hours: 6.0,
            seed,
            ..SynthConfig::default()
        };
        let data = gen_dataset(&cfg, 2_500).unwrap().episodes;
        let (a_plain, t_plain) = timing_auc(&plain, &data, &hyper, seed);
        let (a_cat, t_cat) = timing_auc(&cat, &data, &hyper, seed);
        cpu += t_plain + t_cat;
        let ok = (0.45..=0.65).contains(&a_plain) && a_cat >= 0.85;
        passed += usize::from(ok);
        lines.push(format!(
            "seed {seed}: plain {a_plain:.3} catTE {a_cat:.3} {}",
            if ok { "ok" } else { "miss" }
        ));
    }
    let detail = format!(
        "{passed}/5 seeds ({}), training {:.0}s",
        lines.join("; "),
        secs(cpu)
    );
    report(6, "timing separation", passed >= 3 && cpu < Duration::from_secs(600), &detail);
}

fn small_timing(n: usize, seed: u64) -> Vec<Episode> {
    let cfg = SynthConfig {
        n_channels: 1,
        rate_per_hour: 0.8,
        window_hours: 24.0,
        task: SynthTask::TimingClassification,
        gap_threshold_hours: 4.0,
        seed,
        ..SynthConfig::default()
    };
    gen_dataset(&cfg, n).unwrap().episodes
}

fn small_features() -> FeatureConfig {
    FeatureConfig {
        window_hours: 24.0,
        bin_hours: 1.0,
        ..FeatureConfig::default()
    }
}

#[test]
fn c07_dropout_sweep_shape() {
    let _g = serial();
    let eps = small_timing(450, 7);
    let (pool, test) = eps.split_at(300);
    let test = TestSet::new(test.to_vec());
    let mut spec = ModelSpec::new(Family::Lstm, Task::Classification, 8);
    spec.head_widths = vec![8];
    let spec = spec.with_te(TeMode::CatTe, Some(EncoderConfig::temporal(16, 24.0).unwrap()));
    let cfg = CvConfig {
        k: 3,
        runs: 1,
        base_seed: 7,
        hyper: Hyper {
            lr: 1e-2,
            epochs: 15,
            batch_size: 50,
            weight_decay: 1e-2,
        },
        features: small_features(),
    };
    let trained = run_cv(&spec, pool, &test, &cfg).unwrap();
    let fractions = default_fractions();
    let rows = sweep_dropout(&spec, &trained.selected, &test, &fractions, 10, 7).unwrap();
    let csv = sweep_csv(&rows);
    let complete = csv.lines().count() == 1 + 2 * fractions.len() && rows.iter().all(|r| r.value.is_finite());
    let auc = |f: f64| {
        rows.iter()
            .find(|r| r.metric == Metric::AucRoc && (r.fraction - f).abs() < 1e-12)
            .unwrap()
    };
    let (full, tenth) = (auc(1.0), auc(0.1));
    let bounded = tenth.value <= full.value + 3.0 * tenth.std;
    report(
        7,
        "dropout sweep",
        complete && bounded,
        &format!(
            "{} rows, AUC at 1.0 = {:.3}, at 0.1 = {:.3} (std {:.3})",
            rows.len(),
            full.value,
            tenth.value,
            tenth.std
        ),
    );
}

#[test]
fn c08_cross_validation_protocol() {
    let _g = serial();
    let eps = small_timing(120, 8);
    let (pool, test) = eps.split_at(100);
    let test = TestSet::new(test.to_vec());
    let mut spec = ModelSpec::new(Family::Lstm, Task::Classification, 4);
    spec.head_widths = vec![4];
    let spec = spec.with_te(TeMode::CatTe, Some(EncoderConfig::temporal(4, 24.0).unwrap()));
    let cfg = CvConfig {
        hyper: Hyper {
            lr: 1e-2,
            epochs: 1,
            batch_size: 20,
            weight_decay: 1e-2,
        },
        features: small_features(),
        ..CvConfig::new(8)
    };
    let a = run_cv(&spec, pool, &test, &cfg).unwrap();
    let b = run_cv(&spec, pool, &test, &cfg).unwrap();
    let trainings = a.report.trainings();
    let mut once = true;
    for run in 0..cfg.runs {
        let mut seen = vec![0; pool.len()];
        for row in a.report.rows.iter().filter(|r| r.run == run) {
            for i in a.folds.members(row.fold) {
                seen[i] += 1;
            }
        }
        once &= seen.iter().all(|&c| c == 1);
    }
    let identical = a.report.to_jsonl() == b.report.to_jsonl() && a.report.summary_csv() == b.report.summary_csv();
    report(
        8,
        "protocol fidelity",
        trainings == 50 && once && identical,
        &format!("{trainings} trainings, validation once per run {once}, identical reports {identical}"),
    );
}

#[test]
fn c09_budget_solver_orders_widths() {
    let _g = serial();
    let synth = SynthConfig::default();
    assert_eq!(synth.n_channels, DEFAULT_CHANNELS);
    let schema = synth.schema();
    let steps = FeatureConfig::default().steps();
    let plain = ModelSpec::new(Family::Lstm, Task::Classification, 34);
    let cat = plain
        .clone()
        .with_te(TeMode::CatTe, Some(EncoderConfig::temporal(32, 48.0).unwrap()));
    let mask = plain.clone().with_te(TeMode::Mask, None);
    let width = |s: &ModelSpec| s.input_dim(steps, s.step_width(schema.value_width(), schema.len()));
    // The budget a plain LSTM with 34 units needs.
    let budget = count_params(&plain, width(&plain));
    let h: Vec<usize> = [&plain, &cat, &mask]
        .iter()
        .map(|s| solve_hidden_for_budget(s, width(s), budget).unwrap())
        .collect();
    let widths: Vec<usize> = [&plain, &cat, &mask].iter().map(|s| width(s)).collect();
    report(
        9,
        "budget ordering",
        h[0] == 34 && h[0] > h[1] && h[1] > h[2],
        &format!("budget {budget}, input widths {widths:?} -> hidden {h:?}"),
    );
}

#[test]
fn c10_optimizer_sanity() {
    let _g = serial();
    let layout = [ParamSlot::new("w", &[4], 1)];
    let mut params = ParamSet::zeros(&layout);
    params.tensor_mut(0).data = vec![0.5, -1.0, 2.0, 0.0];
    let mut grads = params.zeros_like();
    grads.tensor_mut(0).data = vec![0.1, -0.2, 0.0, 3.0];
    let cfg = AdamConfig::new(0.01, 0.1);
    let mut state = OptState::new(&params, cfg);
    let before = params.tensor(0).data.clone();
    opt_step(&mut params, &grads, &mut state).unwrap();
    // After one step m/(1-b1) = g and sqrt(v/(1-b2)) = |g|.
    let mut closed_err = 0.0f64;
    for ((p, g), after) in before.iter().zip(&grads.tensor(0).data).zip(&params.tensor(0).data) {
        let want = p * (1.0 - 0.01 * 0.1) - 0.01 * g / (g.abs() + cfg.eps);
        closed_err = closed_err.max((want - after).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut monotone = true;
    let mut prev = state.v_max.tensor(0).data.clone();
    for _ in 0..1_000 {
        for g in grads.values_mut() {
            *g = rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-3..3));
        }
        opt_step(&mut params, &grads, &mut state).unwrap();
        let now = &state.v_max.tensor(0).data;
        monotone &= now.iter().zip(&prev).all(|(n, p)| n >= p);
        prev = now.clone();
    }

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for i in 0..60 {
        let a = (i as f64 * 0.37).sin() * 2.0;
        let b = (i as f64 * 0.91).cos() * 2.0;
        if (a - 0.5 * b).abs() < 0.2 {
            continue;
        }
        inputs.push(Prepared {
            x: Matrix::from_vec(1, 2, vec![a, b]),
            times: vec![],
        });
        targets.push(f64::from(a - 0.5 * b > 0.0));
    }
    let set = LabeledSet::new(inputs, targets).unwrap();
    let spec = ModelSpec::new(Family::Logreg, Task::Classification, 0);
    let hyper = Hyper {
        lr: 0.05,
        epochs: 200,
        batch_size: 100,
        weight_decay: 0.0,
    };
    let trained = train_one(&spec, &set, &set, &hyper, derive_seed(&[10])).unwrap();
    let scores = predict(&spec, &trained.params, &set.inputs).unwrap();
    let correct = scores
        .iter()
        .zip(&set.targets)
        .filter(|(s, y)| (**s > 0.5) == (**y == 1.0))
        .count();
    let accuracy = correct as f64 / set.len() as f64;
    report(
        10,
        "optimizer sanity",
        closed_err < 1e-12 && monotone && accuracy == 1.0,
        &format!("first step error {closed_err:.1e}, v_max monotone {monotone}, logreg accuracy {accuracy}"),
    );
}
