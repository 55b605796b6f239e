use std::fs;
use std::path::{Path, PathBuf};

use merba::checkpoint::Checkpoint;
use merba::config::Config;
use merba::gradsuite::gradient_suite;
use merba::model::{count_params, param_breakdown, Merba};
use merba::scan::build_permutation;
use merba::train::dataset::{read_dataset, write_dataset};
use merba::train::gradcam::{grad_cam, upsample_nearest, write_pgm};
use merba::train::metrics::{evaluate_predictions, EvalReport};
use merba::train::splits::validation_split;
use merba::train::trainer::log_csv;
use merba::train::{evaluate, synth_dataset, Sample, SyntheticSpec};
use merba::Element;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map};

use crate::{Common, Dtype, Failure, Preset};

/// Trainable parameters reported for the reference configuration.
const REFERENCE_PARAMS: usize = 101_210_000;

type Outcome = Result<(), Failure>;

fn echo(cfg: &Config) {
    eprintln!("resolved config:\n{}", cfg.to_flat_json());
}

fn resolve(common: &Common) -> Result<Config, Failure> {
    let cfg = Config::resolve(&common.config)?;
    echo(&cfg);
    Ok(cfg)
}

/// Creates `<out>/<timestamp>-seed<N>`, adding a counter on collision.
fn run_dir(common: &Common) -> Result<PathBuf, Failure> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    fs::create_dir_all(&common.out)?;
    let base = common.out.join(format!("{stamp}-seed{}", common.seed));
    let mut dir = base.clone();
    let mut n = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn write_config(dir: &Path, cfg: &Config) -> Outcome {
    fs::write(dir.join("config.json"), cfg.to_flat_json())?;
    Ok(())
}

fn write_report(dir: &Path, name: &str, report: &EvalReport) -> Outcome {
    let json = serde_json::to_string_pretty(report).map_err(|e| Failure::Invalid(e.to_string()))?;
    fs::write(dir.join(format!("{name}.json")), json)?;
    fs::write(dir.join(format!("{name}_confusion.csv")), report.confusion_csv())?;
    Ok(())
}

pub fn scan(common: &Common, direction: &str, height: usize, width: usize, grid: bool) -> Outcome {
    resolve(common)?;
    let perm = build_permutation(&direction.parse()?, height, width)?;
    if grid {
        let steps = perm.inverse();
        let w = (steps.len().max(1) - 1).to_string().len();
        for row in steps.chunks(width) {
            let cells: Vec<String> = row.iter().map(|s| format!("{s:>w$}")).collect();
            println!("{}", cells.join(" "));
        }
    } else {
        let order: Vec<String> = perm.order().iter().map(|i| i.to_string()).collect();
        println!("{}", order.join(","));
    }
    Ok(())
}

pub fn paramcount(common: &Common) -> Outcome {
    let cfg = resolve(common)?;
    for (name, n) in param_breakdown(&cfg)? {
        println!("{name}: {n}");
    }
    let total = count_params(&cfg)?;
    println!("total: {total}");
    if cfg == Config::default() {
        let diff = total as i64 - REFERENCE_PARAMS as i64;
        println!(
            "reference: {REFERENCE_PARAMS} (deviation {diff:+}, {:+.2}%)",
            100.0 * diff as f64 / REFERENCE_PARAMS as f64
        );
    }
    Ok(())
}

pub fn shapes(common: &Common) -> Outcome {
    let cfg = resolve(common)?;
    let trace = Merba::new(&cfg)?.shape_trace()?;
    for row in &trace {
        println!("{row}");
    }
    for row in &trace {
        if let Some(n) = row.windows {
            println!("{} windows: {n}", row.name);
        }
    }
    Ok(())
}

pub fn synth(common: &Common, preset: Preset, per_class: usize, size: Option<usize>, noise: f64, gap: f64) -> Outcome {
    let mut cfg = resolve(common)?;
    let size = size.unwrap_or(cfg.model.input_size);
    let (mut spec, labels) = match preset {
        Preset::ThreeClass => SyntheticSpec::three_class(size),
        Preset::Confusable => SyntheticSpec::confusable_negatives(size, gap, noise),
    };
    spec.noise = noise;
    let samples = synth_dataset(&spec, per_class, &mut ChaCha8Rng::seed_from_u64(common.seed))?;
    let dir = run_dir(common)?;
    let data = dir.join("data");
    write_dataset(&data, &samples, &spec.labels())?;
    cfg.labels = labels;
    cfg.model.input_size = size;
    cfg.validate()?;
    write_config(&dir, &cfg)?;
    println!("{} samples in {}", samples.len(), data.display());
    println!("matching config: {}", dir.join("config.json").display());
    Ok(())
}

pub fn train(common: &Common, data: &Path, epochs: Option<usize>) -> Outcome {
    let mut cfg = Config::resolve(&common.config)?;
    if let Some(e) = epochs {
        let mut o = Map::new();
        o.insert("train.epochs".into(), json!(e));
        cfg = cfg.with_overrides(&o)?;
    }
    echo(&cfg);
    match common.dtype {
        Dtype::F32 => train_as::<f32>(common, cfg, data),
        Dtype::F64 => train_as::<f64>(common, cfg, data),
    }
}

fn train_as<T: Element>(common: &Common, cfg: Config, data: &Path) -> Outcome {
    let model = Merba::new(&cfg)?;
    let samples = read_dataset(data, &model.space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let ids: Vec<&str> = samples.iter().map(|s| s.subject.as_str()).collect();
    let all: Vec<usize> = (0..samples.len()).collect();
    let (tr, va) = validation_split(&ids, &all, cfg.train.val_fraction, &mut rng);
    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| samples[i].clone()).collect() };
    let (train_set, val_set) = (pick(&tr), pick(&va));
    let params = model.init_params::<T>(&mut rng);
    let dir = run_dir(common)?;
    write_config(&dir, &cfg)?;
    eprintln!(
        "training on {} samples, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let out = merba::train::train(&model, params, &train_set, &val_set, common.seed)?;
    fs::write(dir.join("log.csv"), log_csv(&out.log))?;
    let train_report = evaluate(&model, &out.params, &train_set)?;
    write_report(&dir, "train_report", &train_report)?;
    if !val_set.is_empty() {
        write_report(&dir, "val_report", &evaluate(&model, &out.params, &val_set)?)?;
    }
    Checkpoint {
        config: cfg,
        params: out.params,
        epoch: Some(out.best_epoch),
        optimizer: Some(out.optimizer),
    }
    .save(dir.join("checkpoint"))?;
    println!("run directory: {}", dir.display());
    println!(
        "epochs run: {}, best epoch: {}{}",
        out.log.len(),
        out.best_epoch,
        if out.stopped_early { " (stopped early)" } else { "" }
    );
    print!("train {}", train_report.summary());
    Ok(())
}

/// Reads `truth,pred` rows of label names.
fn read_predictions(path: &Path, labels: &[String]) -> Result<(Vec<usize>, Vec<usize>), Failure> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("truth,pred") {
        return Err(Failure::Invalid(format!(
            "{}: expected header `truth,pred`",
            path.display()
        )));
    }
    let index = |name: &str, line: usize| {
        labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Failure::Invalid(format!("{}:{line}: unknown label `{name}`", path.display())))
    };
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [t, p] = fields[..] else {
            return Err(Failure::Invalid(format!(
                "{}:{}: expected two fields",
                path.display(),
                i + 2
            )));
        };
        truth.push(index(t, i + 2)?);
        pred.push(index(p, i + 2)?);
    }
    Ok((truth, pred))
}

pub fn eval(common: &Common, checkpoint: Option<&Path>, data: Option<&Path>, predictions: Option<&Path>) -> Outcome {
    let report = match (predictions, checkpoint, data) {
        (Some(path), _, _) => {
            let cfg = resolve(common)?;
            let (truth, pred) = read_predictions(path, &cfg.labels.full)?;
            evaluate_predictions(&truth, &pred, &cfg.labels.full)?
        }
        (None, Some(ck), Some(data)) => match common.dtype {
            Dtype::F32 => eval_checkpoint::<f32>(ck, data)?,
            Dtype::F64 => eval_checkpoint::<f64>(ck, data)?,
        },
        _ => {
            return Err(Failure::Invalid(
                "eval needs --predictions, or --checkpoint with --data".into(),
            ))
        }
    };
    let dir = run_dir(common)?;
    write_report(&dir, "report", &report)?;
    println!("run directory: {}", dir.display());
    print!("{}", report.summary());
    Ok(())
}

fn eval_checkpoint<T: Element>(dir: &Path, data: &Path) -> Result<EvalReport, Failure> {
    let ck = Checkpoint::<T>::load(dir)?;
    echo(&ck.config);
    let model = Merba::new(&ck.config)?;
    let samples = read_dataset(data, &model.space)?;
    Ok(evaluate(&model, &ck.params, &samples)?)
}

pub fn saliency(
    common: &Common,
    checkpoint: Option<&Path>,
    data: &Path,
    index: usize,
    target: Option<&str>,
) -> Outcome {
    match common.dtype {
        Dtype::F32 => saliency_as::<f32>(common, checkpoint, data, index, target),
        Dtype::F64 => saliency_as::<f64>(common, checkpoint, data, index, target),
    }
}

fn saliency_as<T: Element>(
    common: &Common,
    checkpoint: Option<&Path>,
    data: &Path,
    index: usize,
    target: Option<&str>,
) -> Outcome {
    let (cfg, params) = match checkpoint {
        Some(dir) => {
            let ck = Checkpoint::<T>::load(dir)?;
            echo(&ck.config);
            (ck.config, Some(ck.params))
        }
        None => (resolve(common)?, None),
    };
    let model = Merba::new(&cfg)?;
    let params = params.unwrap_or_else(|| model.init_params(&mut ChaCha8Rng::seed_from_u64(common.seed)));
    let samples = read_dataset(data, &model.space)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| Failure::Invalid(format!("index {index} out of range for {} samples", samples.len())))?;
    let target = match target {
        Some(name) => model.space.full_index(name)?,
        None => sample.label,
    };
    let cam = grad_cam(&model, &params, &sample.flow, target)?;
    if cam.degenerate {
        eprintln!(
            "warning: saliency map is all zero for target `{}`",
            model.space.full()[target]
        );
    }
    let dir = run_dir(common)?;
    write_config(&dir, &cfg)?;
    write_pgm(dir.join("cam.pgm"), &cam)?;
    let up = upsample_nearest(&cam, sample.flow.height(), sample.flow.width());
    write_pgm(dir.join("cam_input_size.pgm"), &up)?;
    let rows: Vec<String> = cam
        .values
        .chunks(cam.width)
        .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","))
        .collect();
    fs::write(dir.join("cam.csv"), rows.join("\n") + "\n")?;
    println!("run directory: {}", dir.display());
    println!(
        "target {} on sample {index} (label {}): {}x{} map",
        model.space.full()[target],
        model.space.full()[sample.label],
        cam.height,
        cam.width
    );
    Ok(())
}

pub fn gradcheck(common: &Common) -> Outcome {
    resolve(common)?;
    let results = gradient_suite(common.seed)?;
    let lines: Vec<String> = results.iter().map(|r| r.line()).collect();
    let dir = run_dir(common)?;
    fs::write(dir.join("gradcheck.txt"), lines.join("\n") + "\n")?;
    for l in &lines {
        println!("{l}");
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.report.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
