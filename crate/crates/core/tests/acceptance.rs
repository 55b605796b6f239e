//! Acceptance criteria 1 to 10. Each test prints one PASS/FAIL line to
//! stderr (bypassing output capture) and then asserts. Tests take a shared
//! lock so the timed criteria are measured one at a time.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use merba::checkpoint::{Checkpoint, OptimizerState};
use merba::config::Config;
use merba::dgcm::{alpha, combine, dgcm_batch_loss, LabelSpace};
use merba::gradsuite::gradient_suite;
use merba::lgfi::{merge, partition};
use merba::model::{count_params, param_breakdown, Merba};
use merba::scan::{
    apply_scan, are_neighbors, build_permutation, classify_relation, invert_scan, Permutation, Relation, ScanDirection,
};
use merba::train::metrics::{evaluate_predictions, report_from_confusion, EvalReport};
use merba::train::{evaluate, synth_dataset, train, SyntheticSpec};
use merba::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {n:02} {name}: {} ({:.2}s) {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn criterion_01_scan_suite() {
    let _g = serial();
    let t = Instant::now();
    let (h, w) = (7, 7);
    let perms: Vec<Permutation> = ScanDirection::PRODUCTION
        .iter()
        .map(|d| build_permutation(d, h, w).unwrap())
        .collect();
    let mut failures = Vec::new();
    for (d, p) in ScanDirection::PRODUCTION.iter().zip(&perms) {
        if Permutation::from_order(p.order().to_vec(), h, w).is_err() {
            failures.push(format!("{d} not bijective"));
        }
    }
    for p in &perms[2..] {
        if !p.order().windows(2).all(|s| are_neighbors(s[0], s[1], w)) {
            failures.push("zigzag step leaves the 4-neighbourhood".into());
        }
    }
    for (i, p) in perms[..2].iter().enumerate() {
        let n = p.non_adjacent_transitions();
        if n != 6 {
            failures.push(format!("raster {i} has {n} non-adjacent transitions"));
        }
    }
    for i in 0..4 {
        for j in i + 1..4 {
            let r = classify_relation(&perms[i], &perms[j]).unwrap();
            if r != Relation::Unrelated {
                failures.push(format!("pair ({i},{j}) is {r:?}"));
            }
        }
    }
    let a = &perms[0];
    let a_bi = build_permutation(&"a_bi".parse().unwrap(), h, w).unwrap();
    let a_sy = build_permutation(&"a_sy".parse().unwrap(), h, w).unwrap();
    if classify_relation(a, &a_bi).unwrap() != Relation::Reversal {
        failures.push("a_bi not detected as reversal".into());
    }
    if classify_relation(a, &a_sy).unwrap() != Relation::ColumnMirror {
        failures.push("a_sy not detected as column mirror".into());
    }
    let el = t.elapsed();
    let pass = failures.is_empty() && el < Duration::from_secs(1);
    verdict(1, "scan suite", pass, el, &failures.join("; "));
}

#[test]
fn criterion_02_stage_table() {
    let _g = serial();
    let t = Instant::now();
    let trace = Merba::new(&Config::default()).unwrap().shape_trace().unwrap();
    let rows: Vec<String> = trace.iter().map(|r| r.to_string()).collect();
    let want = [
        "patch_embed: 224x224x3 -> 56x56x128",
        "stage1: 56x56x128 -> 28x28x256",
        "stage2: 28x28x256 -> 14x14x512",
        "stage3: 14x14x512 -> 7x7x1024",
        "stage4: 7x7x1024 -> 1x1x1024",
    ];
    let windows: Vec<Option<usize>> = trace.iter().map(|r| r.windows).collect();
    let el = t.elapsed();
    let pass = rows == want && windows == [None, None, Some(16), Some(4), Some(1)] && el < Duration::from_secs(1);
    verdict(2, "stage table", pass, el, &format!("{rows:?} windows {windows:?}"));
}

#[test]
fn criterion_03_dual_granularity_arithmetic() {
    let _g = serial();
    let t = Instant::now();
    let mut failures = Vec::new();
    for total in [4usize, 100, 1000] {
        if alpha(0, total).unwrap() != 0.5 {
            failures.push(format!("alpha(0) at T={total}"));
        }
        if alpha(3 * total / 4, total).unwrap() != 2.0 {
            failures.push(format!("alpha(0.75T) at T={total}"));
        }
        if (3 * total / 4..=total).any(|e| alpha(e, total).unwrap() != 2.0) {
            failures.push(format!("no clamp after 0.75T at T={total}"));
        }
    }
    if combine(1.0, Some(2.0), 0.5).total != 1.0 {
        failures.push("total loss for (1.0, 2.0, 0.5)".into());
    }

    let space = LabelSpace::from_config(&merba::config::LabelsSection::dfme()).unwrap();
    let mut r = rng(3);
    let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| r.random_range(-1.0..1.0));
    let (feat, wc, wf) = (rand(&[4, 6]), rand(&[6, 4]), rand(&[6, 4]));
    let names = ["contempt", "happiness", "surprise", "fear"];
    let labels: Vec<usize> = names.iter().map(|n| space.full_index(n).unwrap()).collect();
    let mut g = Graph::new();
    let (f, c, w) = (g.input(&feat), g.input(&wc), g.input(&wf));
    let coarse = g.matmul(f, c).unwrap();
    let fine = g.matmul(f, w).unwrap();
    let loss = dgcm_batch_loss(&mut g, coarse, fine, &labels, &space, 1.5, true).unwrap();
    let grads = g.backward(loss.total).unwrap();
    let gf = grads.get(fine).unwrap();
    for (row, name) in gf.data().chunks(4).zip(names) {
        let negative = space.is_negative(space.full_index(name).unwrap()).unwrap();
        if row.iter().any(|&v| v != 0.0) != negative {
            failures.push(format!("fine-logit gradient for {name}"));
        }
    }
    let el = t.elapsed();
    verdict(
        3,
        "dual-granularity arithmetic",
        failures.is_empty(),
        el,
        &failures.join("; "),
    );
}

#[test]
fn criterion_04_gradient_suite() {
    let _g = serial();
    let t = Instant::now();
    let results = gradient_suite(0).unwrap();
    let el = t.elapsed();
    let lines: Vec<String> = results.iter().map(|r| r.line()).collect();
    let pass = results.iter().all(|r| r.report.passed && r.report.tolerance == 1e-4) && el < Duration::from_secs(300);
    verdict(4, "gradient suite", pass, el, &lines.join("; "));
}

/// Step-by-step unrolling of the selective-scan recurrence.
fn unrolled(
    (b, t, e, n): (usize, usize, usize, usize),
    u: &[f64],
    dt: &[f64],
    a: &[f64],
    bm: &[f64],
    c: &[f64],
    d: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; b * t * e];
    for bi in 0..b {
        for ei in 0..e {
            let mut h = vec![0.0; n];
            for ti in 0..t {
                let row = bi * t + ti;
                let (uv, dv) = (u[row * e + ei], dt[row * e + ei]);
                let mut acc = d[ei] * uv;
                for ni in 0..n {
                    h[ni] = (dv * a[ei * n + ni]).exp() * h[ni] + dv * bm[row * n + ni] * uv;
                    acc += c[row * n + ni] * h[ni];
                }
                y[row * e + ei] = acc;
            }
        }
    }
    y
}

#[test]
fn criterion_05_selective_scan_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (b, t, e, n) = (
            r.random_range(1..=2),
            r.random_range(1..=8),
            r.random_range(1..=4),
            r.random_range(1..=4),
        );
        let mut fill =
            |len: usize, lo: f64, hi: f64| -> Vec<f64> { (0..len).map(|_| r.random_range(lo..hi)).collect() };
        let u = fill(b * t * e, -1.0, 1.0);
        let dt = fill(b * t * e, 0.01, 1.0);
        let a = fill(e * n, -3.0, -0.1);
        let bm = fill(b * t * n, -1.0, 1.0);
        let c = fill(b * t * n, -1.0, 1.0);
        let d = fill(e, -1.0, 1.0);
        let want = unrolled((b, t, e, n), &u, &dt, &a, &bm, &c, &d);
        let mut g = Graph::<f64>::new();
        let t3 = |v: &Vec<f64>, s: &[usize]| Tensor::new(s.to_vec(), v.clone()).unwrap();
        let ins = [
            g.input(&t3(&u, &[b, t, e])),
            g.input(&t3(&dt, &[b, t, e])),
            g.input(&t3(&a, &[e, n])),
            g.input(&t3(&bm, &[b, t, n])),
            g.input(&t3(&c, &[b, t, n])),
            g.input(&t3(&d, &[e])),
        ];
        let y = g.selective_scan(ins, false).unwrap();
        for (x, w) in g.value(y).unwrap().data().iter().zip(&want) {
            worst = worst.max((x - w).abs());
        }
    }
    let el = t0.elapsed();
    let pass = worst <= 1e-12 && el < Duration::from_secs(1);
    verdict(
        5,
        "selective-scan oracle",
        pass,
        el,
        &format!("max abs err {worst:.2e} over 500 instances"),
    );
}

fn brute_force(truth: &[usize], pred: &[usize], k: usize) -> (f64, f64, f64) {
    let (mut f1s, mut recalls) = (Vec::new(), Vec::new());
    for cls in 0..k {
        let count = |f: &dyn Fn(usize, usize) -> bool| truth.iter().zip(pred).filter(|(&t, &p)| f(t, p)).count() as f64;
        let tp = count(&|t, p| t == cls && p == cls);
        let fp = count(&|t, p| t != cls && p == cls);
        let fneg = count(&|t, p| t == cls && p != cls);
        if tp + fp + fneg == 0.0 {
            continue;
        }
        f1s.push(if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        });
        recalls.push(if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let acc = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
    (mean(&f1s), mean(&recalls), acc)
}

#[test]
fn criterion_06_metric_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 1000 {
        let k = r.random_range(2..=7);
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for t in 0..k {
            for p in 0..k {
                for _ in 0..r.random_range(0..8) {
                    truth.push(t);
                    pred.push(p);
                }
            }
        }
        if truth.is_empty() {
            continue;
        }
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let rep: EvalReport = evaluate_predictions(&truth, &pred, &names).unwrap();
        let (uf1, uar, acc) = brute_force(&truth, &pred, k);
        worst = worst
            .max((rep.uf1 - uf1).abs())
            .max((rep.uar - uar).abs())
            .max((rep.acc - acc).abs());
        checked += 1;
    }
    let hand = report_from_confusion(vec![vec![5, 5], vec![0, 10]], vec!["x".into(), "y".into()]).unwrap();
    let el = t0.elapsed();
    let pass = worst <= 1e-12
        && (hand.uar - 0.75).abs() <= 1e-12
        && (hand.uf1 - 0.7333).abs() <= 1e-4
        && el < Duration::from_secs(10);
    verdict(
        6,
        "metric oracle",
        pass,
        el,
        &format!("max err {worst:.2e}; hand case UAR {:.4} UF1 {:.4}", hand.uar, hand.uf1),
    );
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

#[test]
fn criterion_07_synthetic_learning() {
    let _g = serial();
    let t0 = Instant::now();
    let (spec, labels) = SyntheticSpec::three_class(64);
    let mut cfg = Config::miniature();
    cfg.labels = labels;
    cfg.train.batch_size = 8;
    let model = Merba::new(&cfg).unwrap();
    let data = synth_dataset(&spec, 8, &mut rng(70)).unwrap();
    let mut curves = Vec::new();
    let mut accs = Vec::new();
    for seed in 0..3u64 {
        let out = train(&model, model.init_params::<f32>(&mut rng(seed)), &data, &[], seed).unwrap();
        curves.push(out.log.iter().take(10).map(|l| l.loss_total).collect::<Vec<f64>>());
        accs.push(evaluate(&model, &out.params, &data).unwrap().acc);
    }
    let median: Vec<f64> = (0..10)
        .map(|e| {
            let mut v = [curves[0][e], curves[1][e], curves[2][e]];
            v.sort_by(f64::total_cmp);
            v[1]
        })
        .collect();
    let el = t0.elapsed();
    let pass = accs.iter().all(|&a| a >= 0.95) && strictly_decreasing(&median) && el < Duration::from_secs(600);
    let curve: Vec<String> = median.iter().map(|v| format!("{v:.4}")).collect();
    verdict(
        7,
        "synthetic learning",
        pass,
        el,
        &format!(
            "train acc per seed {accs:?}; median loss epochs 0-9 [{}]",
            curve.join(", ")
        ),
    );
}

fn negative_recall(r: &EvalReport, space: &LabelSpace) -> f64 {
    let negatives: Vec<usize> = (0..r.labels.len()).filter(|&i| space.is_negative(i).unwrap()).collect();
    negatives.iter().map(|&i| r.recall[i]).sum::<f64>() / negatives.len() as f64
}

/// Seven-class confusable data: 8 training and 20 held-out samples per
/// class, 60 epochs, identical data, initial backbone and seed for both
/// heads.
#[test]
fn criterion_08_dual_granularity_direction() {
    let _g = serial();
    let t0 = Instant::now();
    let (spec, labels) = SyntheticSpec::confusable_negatives(64, 15.0, 0.2);
    let mut recalls = [Vec::new(), Vec::new()];
    for seed in 0..5u64 {
        let train_set = synth_dataset(&spec, 8, &mut rng(1000 + seed)).unwrap();
        let test_set = synth_dataset(&spec, 20, &mut rng(2000 + seed)).unwrap();
        for (slot, dgcm) in [(0, true), (1, false)] {
            let mut cfg = Config::miniature();
            cfg.labels = labels.clone();
            cfg.dgcm.enabled = dgcm;
            cfg.train.epochs = 60;
            cfg.train.batch_size = 8;
            let model = Merba::new(&cfg).unwrap();
            let out = train(&model, model.init_params::<f32>(&mut rng(seed)), &train_set, &[], seed).unwrap();
            let report = evaluate(&model, &out.params, &test_set).unwrap();
            recalls[slot].push(negative_recall(&report, &model.space));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (dgcm, single) = (mean(&recalls[0]), mean(&recalls[1]));
    let el = t0.elapsed();
    let pass = dgcm >= single && el < Duration::from_secs(1800);
    verdict(
        8,
        "dual-granularity direction",
        pass,
        el,
        &format!(
            "mean fine-negative recall dual {dgcm:.4} vs single {single:.4}; per seed dual {:?} single {:?}",
            recalls[0], recalls[1]
        ),
    );
}

#[test]
fn criterion_09_parameter_accounting() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = Config::default();
    let total = count_params(&cfg).unwrap();
    let parts = param_breakdown(&cfg).unwrap();
    let reference = 101_210_000i64;
    let detail: Vec<String> = parts.iter().map(|(n, c)| format!("{n}={c}")).collect();
    let el = t0.elapsed();
    let pass = (90_000_000..=115_000_000).contains(&total) && parts.iter().map(|p| p.1).sum::<usize>() == total;
    verdict(
        9,
        "parameter accounting",
        pass,
        el,
        &format!(
            "total {total}, deviation from reference {:+} ({:+.2}%); {}",
            total as i64 - reference,
            100.0 * (total as i64 - reference) as f64 / reference as f64,
            detail.join(" ")
        ),
    );
}

#[test]
fn criterion_10_round_trips() {
    let _g = serial();
    let t0 = Instant::now();
    let mut r = rng(10);
    let mut failures = Vec::new();
    let x = Tensor::<f32>::from_fn(&[14, 21, 5], |_| r.random_range(-1.0..1.0));
    for (wh, ww) in [(7, 7), (2, 3), (14, 21), (1, 1)] {
        let back = merge(&partition(&x, wh, ww).unwrap()).unwrap();
        if back != x {
            failures.push(format!("partition/merge {wh}x{ww}"));
        }
    }
    let window = Tensor::<f64>::from_fn(&[7, 7, 3], |_| r.random_range(-1.0..1.0));
    for d in ["a", "b", "c", "d", "a_bi", "a_sy", "b_bi", "b_sy"] {
        let p = build_permutation(&d.parse().unwrap(), 7, 7).unwrap();
        if invert_scan(&apply_scan(&window, &p).unwrap(), &p).unwrap() != window {
            failures.push(format!("scan {d}"));
        }
    }
    let cfg = Config::miniature();
    let model = Merba::new(&cfg).unwrap();
    let params = model.init_params::<f32>(&mut r);
    let moments = |r: &mut ChaCha8Rng| -> Vec<Tensor<f32>> {
        params
            .values()
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |_| r.random::<f32>()))
            .collect()
    };
    let (m, v) = (moments(&mut r), moments(&mut r));
    let ck = Checkpoint {
        config: cfg,
        params,
        epoch: Some(3),
        optimizer: Some(OptimizerState { step: 9, m, v }),
    };
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    if Checkpoint::<f32>::load(dir.path()).unwrap() != ck {
        failures.push("checkpoint".into());
    }
    let el = t0.elapsed();
    verdict(10, "round trips", failures.is_empty(), el, &failures.join("; "));
}
