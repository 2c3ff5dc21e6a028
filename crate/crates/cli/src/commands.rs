use std::path::Path;

use anyhow::{bail, Context, Result};
use paka_core::config::{ExperimentConfig, Weights};
use paka_core::encoder::checkpoint::{Checkpoint, ScalarWidth};
use paka_core::encoder::FeatureSource;
use paka_core::eval::{run_linear, run_nn, run_overcluster, EvalMetrics};
use paka_core::gradcheck::{self, GradReport, END_TO_END_TOLERANCE, KERNEL_TOLERANCE};
use paka_core::kernel::LossKind;
use paka_core::synth::Dataset;
use paka_core::trainer::{read_steps_csv, run_training, stability_report, write_steps_csv, StabilityReport};
use paka_core::Model;
use serde::Serialize;

use crate::{Cli, Command, CompareArgs, EvalCommon, EvalProtocol, GenDataArgs, GradcheckArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::GenData(args) => gen_data(&mut config, args),
        Command::Train(args) => train(&mut config, args),
        Command::Eval { protocol } => eval(&mut config, protocol),
        Command::CompareLosses(args) => compare_losses(args),
        Command::Gradcheck(args) => gradcheck(args),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn gen_data(config: &mut ExperimentConfig, args: GenDataArgs) -> Result<()> {
    let scene = &mut config.scene;
    set(&mut scene.size, args.size);
    set(&mut scene.classes, args.classes);
    set(&mut scene.seed, args.seed);
    set(&mut scene.patch_size, args.patch_size);
    set(&mut scene.min_shapes, args.min_shapes);
    set(&mut scene.max_shapes, args.max_shapes);
    set(&mut scene.nuisance, args.nuisance);
    set(&mut config.count, args.count);
    set(&mut config.paths.data_dir, args.out);
    if config.count == 0 {
        bail!("--count must be positive");
    }
    let dataset = Dataset::generate(&config.scene, config.count)?;
    dataset.write(&config.paths.data_dir).with_context(|| format!("writing {}", config.paths.data_dir.display()))?;
    log::info!("wrote {} scenes to {}", config.count, config.paths.data_dir.display());
    Ok(())
}

fn train(config: &mut ExperimentConfig, args: TrainArgs) -> Result<()> {
    let t = &mut config.train;
    set(&mut t.loss, args.loss.map(Into::into));
    set(&mut t.steps, args.steps);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.n_local, args.n_local);
    set(&mut t.min_overlap, args.min_overlap);
    set(&mut t.teacher_aug, args.teacher_aug);
    set(&mut t.student_aug, args.student_aug);
    set(&mut t.learning_rate, args.lr);
    set(&mut t.weight_decay, args.weight_decay);
    set(&mut t.seed, args.seed);
    set(&mut t.feature_source, args.feature_source.map(Into::into));
    set(&mut config.eval.eval_fraction, args.eval_fraction);
    set(&mut config.paths.data_dir, args.data);
    set(&mut config.paths.run_dir, args.out);
    config.validate()?;

    let dataset = load_dataset(&config.paths.data_dir)?;
    let (train_idx, _) = dataset.split_indices(config.eval.eval_fraction);
    if train_idx.is_empty() {
        bail!("the training split of {} is empty", config.paths.data_dir.display());
    }
    let run_dir = &config.paths.run_dir;
    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let total = config.train.steps;
    let every = (total / 20).max(1);
    let outcome = run_training(&config.train, &dataset, &train_idx, |r| {
        if r.step % every == 0 || r.step + 1 == total {
            log::info!("step {}/{total} loss {:.5} pairs {} momentum {:.5}", r.step + 1, r.mean_loss, r.n_pairs, r.ema_momentum);
        }
    })
    .context("training aborted")?;
    let width = if args.f32 { ScalarWidth::F32 } else { ScalarWidth::F64 };
    outcome.state.checkpoint().save(&config.paths.checkpoint(), width)?;
    write_steps_csv(&outcome.log, &config.paths.steps_csv(), !args.no_timing)?;
    config.save(&run_dir.join("config.json"))?;
    log::info!("wrote {}", run_dir.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn apply_common(config: &mut ExperimentConfig, common: &EvalCommon) {
    let e = &mut config.eval;
    set(&mut e.seeds, common.seeds.clone());
    set(&mut e.weights, common.weights.map(Into::into));
    set(&mut e.feature_source, common.feature_source.map(Into::into));
    set(&mut e.eval_fraction, common.eval_fraction);
    set(&mut config.paths.data_dir, common.data.clone());
}

fn eval(config: &mut ExperimentConfig, protocol: EvalProtocol) -> Result<()> {
    let common = match &protocol {
        EvalProtocol::Overcluster { common, .. } | EvalProtocol::Nn { common, .. } | EvalProtocol::Linear { common, .. } => common,
    };
    apply_common(config, common);
    let checkpoint_path = common.checkpoint.clone().unwrap_or_else(|| config.paths.checkpoint());
    let out = common.out.clone().unwrap_or_else(|| config.paths.metrics_json());
    match &protocol {
        EvalProtocol::Overcluster { k, iters, .. } => {
            if k.is_some() {
                config.eval.overcluster_k = *k;
            }
            set(&mut config.eval.kmeans_iters, *iters);
        }
        EvalProtocol::Nn { k, fractions, bank, no_exclude_self, .. } => {
            set(&mut config.eval.nn_k, *k);
            set(&mut config.eval.fractions, fractions.clone());
            set(&mut config.eval.bank, bank.map(Into::into));
            if *no_exclude_self {
                config.eval.exclude_self = false;
            }
        }
        EvalProtocol::Linear { epochs, lr, .. } => {
            set(&mut config.eval.probe.epochs, *epochs);
            set(&mut config.eval.probe.lr, *lr);
        }
    }
    config.eval.validate()?;

    let checkpoint = Checkpoint::load(&checkpoint_path).with_context(|| format!("loading {}", checkpoint_path.display()))?;
    let model: Model = match config.eval.weights {
        Weights::Teacher => checkpoint.teacher,
        Weights::Student => checkpoint.student,
    };
    let dataset = load_dataset(&config.paths.data_dir)?;
    let (train_idx, eval_idx) = dataset.split_indices(config.eval.eval_fraction);
    let cfg = &config.eval;
    let metrics: EvalMetrics = match protocol {
        EvalProtocol::Overcluster { .. } => run_overcluster(&model, &dataset, &eval_idx, cfg).context("overclustering failed")?,
        EvalProtocol::Nn { .. } => run_nn(&model, &dataset, &train_idx, &eval_idx, cfg).context("retrieval failed")?,
        EvalProtocol::Linear { .. } => run_linear(&model, &dataset, &train_idx, &eval_idx, cfg).context("linear probe failed")?,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, metrics.to_json()).with_context(|| format!("writing {}", out.display()))?;
    println!("{}: mIoU {:.4} accuracy {:.4}", metrics.protocol, metrics.miou, metrics.accuracy);
    Ok(())
}

#[derive(Debug, Serialize)]
struct StabilityFile<'a> {
    csv_a: &'a Path,
    csv_b: &'a Path,
    steps: usize,
    #[serde(flatten)]
    report: StabilityReport,
}

fn compare_losses(args: CompareArgs) -> Result<()> {
    let a = read_steps_csv(&args.a).with_context(|| format!("reading {}", args.a.display()))?;
    let b = read_steps_csv(&args.b).with_context(|| format!("reading {}", args.b.display()))?;
    let la: Vec<f64> = a.iter().map(|r| r.mean_loss).collect();
    let lb: Vec<f64> = b.iter().map(|r| r.mean_loss).collect();
    let window = args.window.unwrap_or(la.len());
    let report = stability_report(&la, &lb, window)?;
    println!("CV a {:.6} | CV b {:.6} | {:?}", report.a.mean, report.b.mean, report.verdict);
    let file = StabilityFile { csv_a: &args.a, csv_b: &args.b, steps: la.len(), report };
    std::fs::write(&args.out, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let kinds: Vec<LossKind> = match args.loss {
        Some(l) => vec![l.into()],
        None => LossKind::ALL.to_vec(),
    };
    let mut failures: Vec<String> = Vec::new();
    let mut report = |group: &str, r: &GradReport, tol: f64| {
        let ok = r.max_rel_error <= tol && r.max_rel_error.is_finite();
        println!("{:<8} {group:<10} {:<28} {:.3e}", if ok { "ok" } else { "FAIL" }, r.name, r.max_rel_error);
        if !ok {
            failures.push(format!("{group}/{}", r.name));
        }
    };
    for &kind in &kinds {
        let worst = (0..args.instances)
            .map(|i| gradcheck::check_kernel_loss(kind, args.seed.wrapping_add(i)))
            .collect::<paka_core::Result<Vec<_>>>()?
            .into_iter()
            .fold(GradReport { name: kind.to_string(), max_rel_error: 0.0 }, |w, r| {
                if r.max_rel_error > w.max_rel_error || r.max_rel_error.is_nan() { r } else { w }
            });
        report("kernel", &worst, KERNEL_TOLERANCE);
    }
    for source in [FeatureSource::Backbone, FeatureSource::Head] {
        for r in gradcheck::check_model_backward(args.seed, source)? {
            report("model", &r, END_TO_END_TOLERANCE);
        }
    }
    for &kind in &kinds {
        if kind == LossKind::Mmd {
            // the median bandwidth is re-estimated per pair but treated as a constant
            println!("{:<8} {:<10} bandwidth is a stop-gradient, finite differences do not apply", "skip", format!("train-{kind}"));
            continue;
        }
        for r in gradcheck::check_training_objective(kind, args.seed)? {
            let group = format!("train-{kind}");
            report(&group, &r, END_TO_END_TOLERANCE);
        }
    }
    if failures.is_empty() {
        println!("all gradients within tolerance");
        Ok(())
    } else {
        bail!("gradient check failed for: {}", failures.join(", "))
    }
}
