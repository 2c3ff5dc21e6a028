//! Acceptance suite. Runs every criterion at its stated tolerance and
//! prints one `PASS`/`FAIL` line per criterion; exits non-zero if any fail.
//!
//! `cargo test --release --test acceptance -- A3 A9` runs a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, Array3};
use paka_core::config::{BankSplit, EvalConfig};
use paka_core::encoder::FeatureSource;
use paka_core::eval::{
    hungarian, linear_probe, nn_retrieval_predict, overcluster_miou, run_nn, run_overcluster, MemoryBank, PatchRef,
    ProbeConfig,
};
use paka_core::geometry::{overlap_ratio, roi_align, sample_global_crop, sample_local_crop_minoverlap, CropBox, FeatureGrid};
use paka_core::gradcheck::{
    check_kernel_loss, check_model_backward, check_training_objective, END_TO_END_TOLERANCE, KERNEL_TOLERANCE,
};
use paka_core::kernel::{self, Bandwidth, FeatureMatrix, LossKind};
use paka_core::rng::{rng_for, Rng};
use paka_core::synth::{Dataset, SceneSpec};
use paka_core::trainer::{run_training, TrainConfig, TrainState};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn randn(rng: &mut Rng, n: usize, d: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_simple_fn((n, d), || normal.sample(rng))
}

fn fm(a: Array2<f64>) -> FeatureMatrix {
    FeatureMatrix::new(a).unwrap()
}

// ---------------------------------------------------------------- A1

fn a1_gradients() -> Verdict {
    let mut worst_kernel = BTreeMap::new();
    for kind in [LossKind::Paka, LossKind::Gram] {
        let w = (0..20).map(|s| check_kernel_loss(kind, s).unwrap().max_rel_error).fold(0.0, f64::max);
        worst_kernel.insert(kind.to_string(), w);
    }
    let mut worst_e2e: f64 = 0.0;
    for seed in 0..20 {
        for source in [FeatureSource::Backbone, FeatureSource::Head] {
            for r in check_model_backward(seed, source).unwrap() {
                worst_e2e = worst_e2e.max(r.max_rel_error);
            }
        }
    }
    // the full training objective (views, ROI align, pair averaging, head, encoder)
    for seed in 0..5 {
        for kind in [LossKind::Paka, LossKind::Gram] {
            for r in check_training_objective(kind, seed).unwrap() {
                worst_e2e = worst_e2e.max(r.max_rel_error);
            }
        }
    }
    let kernel_ok = worst_kernel.values().all(|&w| w <= KERNEL_TOLERANCE);
    verdict(
        kernel_ok && worst_e2e <= END_TO_END_TOLERANCE,
        format!(
            "kernel paka {:.1e}, gram {:.1e} (<= {KERNEL_TOLERANCE:.0e}); encoder end-to-end {worst_e2e:.1e} (<= {END_TO_END_TOLERANCE:.0e}); 20 seeds per kernel loss and encoder path, 5 per training objective",
            worst_kernel["paka"], worst_kernel["gram"]
        ),
    )
}

// ---------------------------------------------------------------- A2

fn random_orthogonal(rng: &mut Rng, d: usize) -> Array2<f64> {
    let mut q = Array2::eye(d);
    for _ in 0..d {
        let v = randn(rng, d, 1);
        let h = Array2::eye(d) - v.dot(&v.t()) * (2.0 / v.iter().map(|x| x * x).sum::<f64>());
        q = q.dot(&h);
    }
    q
}

fn a2_cka_invariants() -> Verdict {
    let cka = |s: &Array2<f64>, t: &Array2<f64>| kernel::cka(&fm(s.clone()), &fm(t.clone())).unwrap().value;
    let mut worst = BTreeMap::from([
        ("bounds", 0.0f64),
        ("symmetry", 0.0),
        ("scale", 0.0),
        ("orthogonal", 0.0),
        ("translation", 0.0),
        ("hsic identity", 0.0),
    ]);
    let mut bump = |key: &'static str, v: f64| {
        let e = worst.get_mut(key).unwrap();
        *e = e.max(v);
    };
    for i in 0..100u64 {
        let mut rng = rng_for(i, "acceptance-a2", 0);
        let n = rng.random_range(4..=24);
        let (ds, dt) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let s = randn(&mut rng, n, ds);
        let t = randn(&mut rng, n, dt);
        let base = cka(&s, &t);
        bump("bounds", (-base).max(base - 1.0).max(0.0));
        bump("symmetry", (base - cka(&t, &s)).abs());
        for alpha in [0.01, 1.0, 100.0] {
            bump("scale", (cka(&(&s * alpha), &t) - base).abs());
        }
        bump("orthogonal", (cka(&s.dot(&random_orthogonal(&mut rng, ds)), &t) - base).abs());
        let shift = randn(&mut rng, 1, ds) * 10.0;
        bump("translation", (cka(&(&s + &shift), &t) - base).abs());
        let (ks, kt) = (kernel::gram(&fm(s.clone())), kernel::gram(&fm(t.clone())));
        let h = |a, b| kernel::hsic(a, b).unwrap().value;
        bump("hsic identity", (h(&ks, &kt) / (h(&ks, &ks) * h(&kt, &kt)).sqrt() - base).abs());
    }
    let pass = worst["bounds"] <= 1e-12 && worst["symmetry"] <= 1e-12 && worst.values().all(|&v| v <= 1e-10);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(pass, format!("100 instances: {detail}"))
}

// ---------------------------------------------------------------- A3

fn bilinear(grid: &Array3<f64>, b: &CropBox, i: usize, j: usize, oh: usize, ow: usize, c: usize) -> f64 {
    let (h, w, _) = grid.dim();
    let y = ((b.y0 + (i as f64 + 0.5) / oh as f64 * b.height()) * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let x = ((b.x0 + (j as f64 + 0.5) / ow as f64 * b.width()) * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = grid[[y0, x0, c]] * (1.0 - fx) + grid[[y0, x1, c]] * fx;
    let bottom = grid[[y1, x0, c]] * (1.0 - fx) + grid[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    permutations(n - 1)
        .into_iter()
        .flat_map(|p| {
            (0..=p.len()).map(move |pos| {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                q
            })
        })
        .collect()
}

fn naive_hkh(k: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows();
    let h = Array2::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i == j)) - 1.0 / n as f64);
    h.dot(k).dot(&h)
}

fn a3_oracles() -> Verdict {
    // ROI align
    let mut rng = rng_for(0, "acceptance-a3", 0);
    let raw = Array3::from_shape_simple_fn((4, 4, 2), || rng.random_range(-1.0..1.0));
    let bbox = CropBox::new(0.1, 0.2, 0.9, 0.8).unwrap();
    let out = roi_align(&FeatureGrid::new(raw.clone()).unwrap(), &bbox, 3, 3).unwrap();
    let roi_err = out.as_array().indexed_iter().map(|((i, j, c), v)| (v - bilinear(&raw, &bbox, i, j, 3, 3, c)).abs()).fold(0.0, f64::max);

    // Hungarian against all 720 permutations
    let perms = permutations(6);
    let mut hungarian_exact = 0;
    for seed in 0..50 {
        let mut rng = rng_for(seed, "acceptance-a3-hungarian", 0);
        let cost = Array2::from_shape_simple_fn((6, 6), || rng.random_range(-10.0..10.0));
        let total = |p: &[usize]| p.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum::<f64>();
        let best = perms.iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        if total(&hungarian(&cost).unwrap()) == best {
            hungarian_exact += 1;
        }
    }

    // definitional CKA, HSIC and MMD
    let mut def_err: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = rng_for(seed, "acceptance-a3-kernels", 0);
        let s = randn(&mut rng, 8, 3);
        let t = randn(&mut rng, 8, 4);
        let (kc, lc) = (naive_hkh(&s.dot(&s.t())), naive_hkh(&t.dot(&t.t())));
        let frob = |a: &Array2<f64>, b: &Array2<f64>| (a * b).sum();
        let cka = frob(&kc, &lc) / (frob(&kc, &kc) * frob(&lc, &lc)).sqrt();
        def_err = def_err.max((kernel::cka(&fm(s.clone()), &fm(t.clone())).unwrap().value - cka).abs());
        let hsic = kc.dot(&lc).diag().sum() / 49.0;
        let got = kernel::hsic(&kernel::gram(&fm(s.clone())), &kernel::gram(&fm(t.clone()))).unwrap().value;
        def_err = def_err.max((got - hsic).abs() / hsic.abs().max(1.0));

        let t2 = randn(&mut rng, 8, 3);
        let sigma = 1.3;
        let k = |a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize| {
            let d: f64 = (0..3).map(|c| (a[[i, c]] - b[[j, c]]).powi(2)).sum();
            (-d / (2.0 * sigma * sigma)).exp()
        };
        let mean = |a: &Array2<f64>, b: &Array2<f64>| {
            let mut total = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    total += k(a, i, b, j);
                }
            }
            total / 64.0
        };
        let mmd = mean(&s, &s) + mean(&t2, &t2) - 2.0 * mean(&s, &t2);
        let got = kernel::mmd_sq(&fm(s), &fm(t2), Bandwidth::Fixed(sigma)).unwrap().value;
        def_err = def_err.max((got - mmd).abs());
    }
    verdict(
        roi_err <= 1e-12 && hungarian_exact == 50 && def_err <= 1e-12,
        format!("roi_align {roi_err:.1e}; hungarian exact on {hungarian_exact}/50; cka/hsic/mmd {def_err:.1e}"),
    )
}

// ---------------------------------------------------------------- A4

fn a4_sampler() -> Verdict {
    let mut rng = rng_for(0, "acceptance-a4", 0);
    let mut satisfied = 0;
    for _ in 0..10_000 {
        let (a, b) = loop {
            let a = sample_global_crop(&mut rng, (0.4, 1.0)).unwrap();
            let b = sample_global_crop(&mut rng, (0.4, 1.0)).unwrap();
            if a.intersection(&b).is_some() {
                break (a, b);
            }
        };
        let local = sample_local_crop_minoverlap(&mut rng, &[a, b], (0.05, 0.3), 0.9, 100).unwrap();
        if overlap_ratio(&local, &a) >= 0.9 && overlap_ratio(&local, &b) >= 0.9 {
            satisfied += 1;
        }
    }
    verdict(satisfied == 10_000, format!("{satisfied}/10000 draws satisfy overlap >= 0.9 against both globals"))
}

// ---------------------------------------------------------------- A5 to A8

const TRAIN_STEPS: usize = 2000;
/// Chosen on selection seeds 10 to 12, disjoint from the seeds scored here.
const LEARNING_RATE: f64 = 3e-3;

/// Shared synthetic benchmark and the runs of the training experiments.
struct Experiments {
    dataset: Dataset,
    train_idx: Vec<usize>,
    eval_idx: Vec<usize>,
    eval: EvalConfig,
    runs: BTreeMap<(String, u64), Run>,
}

struct Run {
    losses: Vec<f64>,
    miou: f64,
}

fn run_key(loss: LossKind, m: f64, teacher_aug: f64) -> String {
    format!("{loss} m={m} t={teacher_aug}")
}

impl Experiments {
    fn new() -> Self {
        let dataset = Dataset::generate(&SceneSpec::default(), 400).unwrap();
        let eval = EvalConfig::default();
        let (train_idx, eval_idx) = dataset.split_indices(eval.eval_fraction);
        Self { dataset, train_idx, eval_idx, eval, runs: BTreeMap::new() }
    }

    fn config(loss: LossKind, m: f64, teacher_aug: f64, seed: u64) -> TrainConfig {
        TrainConfig { loss, min_overlap: m, teacher_aug, seed, steps: TRAIN_STEPS, learning_rate: LEARNING_RATE, ..TrainConfig::default() }
    }

    fn untrained_miou(&self, seed: u64) -> f64 {
        let state = TrainState::new(&Self::config(LossKind::Paka, 0.9, 0.0, seed)).unwrap();
        run_overcluster(&state.teacher, &self.dataset, &self.eval_idx, &self.eval).unwrap().miou
    }

    fn run(&mut self, loss: LossKind, m: f64, teacher_aug: f64, seed: u64) -> &Run {
        let key = (run_key(loss, m, teacher_aug), seed);
        if !self.runs.contains_key(&key) {
            let started = Instant::now();
            let config = Self::config(loss, m, teacher_aug, seed);
            let outcome = run_training(&config, &self.dataset, &self.train_idx, |_| {}).unwrap();
            let miou = run_overcluster(&outcome.state.teacher, &self.dataset, &self.eval_idx, &self.eval).unwrap().miou;
            let losses = outcome.log.iter().map(|r| r.mean_loss).collect();
            eprintln!("  trained {} seed {seed}: mIoU {miou:.4} ({:.0} s)", key.0, started.elapsed().as_secs_f64());
            self.runs.insert(key.clone(), Run { losses, miou });
        }
        &self.runs[&key]
    }
}

fn a5_stability(x: &mut Experiments) -> Verdict {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let cv_paka = kernel::coefficient_of_variation(&x.run(LossKind::Paka, 0.9, 0.0, seed).losses).unwrap();
        let cv_gram = kernel::coefficient_of_variation(&x.run(LossKind::Gram, 0.9, 0.0, seed).losses).unwrap();
        wins += usize::from(cv_paka < cv_gram);
        rows.push(format!("{cv_paka:.3}/{cv_gram:.3}"));
    }
    verdict(wins >= 4, format!("CV(paka) < CV(gram) in {wins}/5 seeds, {TRAIN_STEPS} steps [paka/gram: {}]", rows.join(" ")))
}

fn a6_efficacy(x: &mut Experiments) -> Verdict {
    let mut untrained = Vec::new();
    let mut trained = Vec::new();
    let mut beats_gram = 0;
    for seed in 0..5 {
        untrained.push(x.untrained_miou(seed));
        let paka = x.run(LossKind::Paka, 0.9, 0.0, seed).miou;
        let gram = x.run(LossKind::Gram, 0.9, 0.0, seed).miou;
        trained.push(paka);
        beats_gram += usize::from(paka >= gram);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gain = 100.0 * (mean(&trained) - mean(&untrained));
    verdict(
        gain >= 10.0 && beats_gram >= 4,
        format!(
            "mIoU {:.4} -> {:.4} ({gain:+.1} points, need >= 10); paka >= gram in {beats_gram}/5 seeds",
            mean(&untrained),
            mean(&trained)
        ),
    )
}

fn a7_overlap_trend(x: &mut Experiments) -> Verdict {
    let means: Vec<f64> =
        [0.0, 0.5, 0.9].iter().map(|&m| (0..3).map(|seed| x.run(LossKind::Paka, m, 0.0, seed).miou).sum::<f64>() / 3.0).collect();
    verdict(
        means[0] <= means[1] && means[1] <= means[2],
        format!("mean mIoU at m = 0 / 0.5 / 0.9: {:.4} / {:.4} / {:.4} (must be non-decreasing)", means[0], means[1], means[2]),
    )
}

fn a8_clean_teacher(x: &mut Experiments) -> Verdict {
    let mean = |x: &mut Experiments, t: f64| (0..3).map(|seed| x.run(LossKind::Paka, 0.9, t, seed).miou).sum::<f64>() / 3.0;
    let clean = mean(x, 0.0);
    let strong = mean(x, 1.0);
    verdict(clean >= strong, format!("mean mIoU teacher strength 0: {clean:.4}, strength 1: {strong:.4}"))
}

// ---------------------------------------------------------------- A9

fn a9_protocols() -> Verdict {
    let mut rng = rng_for(0, "acceptance-a9", 0);

    // self-inclusive bank through the full retrieval pipeline
    let dataset = Dataset::generate(&SceneSpec::default(), 8).unwrap();
    let model = TrainState::new(&TrainConfig::default()).unwrap().teacher;
    let cfg = EvalConfig { bank: BankSplit::Eval, exclude_self: false, nn_k: 1, fractions: vec![1], ..EvalConfig::default() };
    let nn_acc = run_nn(&model, &dataset, &[0, 1, 2, 3, 4, 5], &[6, 7], &cfg).unwrap().accuracy;
    // and on raw random keys
    let keys = randn(&mut rng, 300, 6);
    let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..4)).collect();
    let refs = (0..300).map(|i| PatchRef { image: i, y: 0, x: 0 }).collect();
    let bank = MemoryBank::new(fm(keys.clone()), labels.clone(), refs).unwrap();
    let raw_acc = nn_retrieval_predict(&bank, &fm(keys), 1).unwrap().iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / 300.0;

    // linear probe on separable features: class c sits around 5·e_c
    let separable = |rng: &mut Rng, n: usize| {
        let y: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let mut x = randn(rng, n, 4) * 0.5;
        for (i, &c) in y.iter().enumerate() {
            x[[i, c]] += 5.0;
        }
        (fm(x), y)
    };
    let (tx, ty) = separable(&mut rng, 400);
    let (ex, ey) = separable(&mut rng, 200);
    let probe_acc = linear_probe(&tx, &ty, &ex, &ey, 4, &ProbeConfig::default()).unwrap().accuracy;

    // K = C clustering of well separated classes under permuted ids
    let mut perm: Vec<usize> = (0..4).collect();
    perm.shuffle(&mut rng);
    let centres = randn(&mut rng, 4, 6) * 50.0;
    let mut features = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..5 {
        let ids: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let mut f = randn(&mut rng, 40, 6) * 0.1;
        for (i, &c) in ids.iter().enumerate() {
            let mut row = f.row_mut(i);
            row += &centres.row(c);
        }
        features.push(fm(f));
        truth.push(ids.iter().map(|&c| perm[c]).collect());
    }
    let oc = overcluster_miou(&features, &truth, 4, 4, &[0, 1, 2, 3, 4], 100).unwrap().miou;

    verdict(
        nn_acc == 1.0 && raw_acc == 1.0 && probe_acc >= 0.99 && oc == 1.0,
        format!("self-bank NN accuracy {nn_acc} (pipeline), {raw_acc} (raw); probe accuracy {probe_acc:.4}; K = C overcluster mIoU {oc}"),
    )
}

// ---------------------------------------------------------------- A10

fn paka_bin(args: &[&str], threads: &str) {
    let out = Command::new(env!("CARGO_BIN_EXE_paka"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("PAKA_THREADS", threads)
        .output()
        .expect("paka runs");
    assert!(out.status.success(), "paka {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn a10_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_owned();
    let data = p("data");
    paka_bin(&["gen-data", "--out", &data, "--count", "24"], "1");
    let mut identical = Vec::new();
    let mut differing = Vec::new();
    // the second repetition runs on two threads
    for (run, threads) in [("run-a", "1"), ("run-b", "2")] {
        let dir = p(run);
        paka_bin(&["train", "--data", &data, "--out", &dir, "--steps", "40", "--seed", "7", "--no-timing"], threads);
        for protocol in ["overcluster", "nn", "linear"] {
            let out = format!("{dir}/{protocol}.json");
            let ckpt = format!("{dir}/checkpoint.paka");
            paka_bin(&["eval", protocol, "--checkpoint", &ckpt, "--data", &data, "--out", &out], threads);
        }
    }
    for file in ["steps.csv", "checkpoint.paka", "overcluster.json", "nn.json", "linear.json"] {
        let read = |run: &str| std::fs::read(Path::new(&p(run)).join(file)).unwrap();
        if read("run-a") == read("run-b") {
            identical.push(file);
        } else {
            differing.push(file);
        }
    }
    verdict(differing.is_empty(), format!("bit-identical: {}; differing: [{}]", identical.join(", "), differing.join(", ")))
}

// ----------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f == id);
    let mut experiments: Option<Experiments> = None;
    let mut failed = Vec::new();
    type Criterion = (&'static str, &'static str, fn(&mut Option<Experiments>) -> Verdict);
    let criteria: [Criterion; 10] = [
        ("A1", "gradient correctness", |_| a1_gradients()),
        ("A2", "CKA invariants", |_| a2_cka_invariants()),
        ("A3", "oracle equivalence", |_| a3_oracles()),
        ("A4", "sampler contract", |_| a4_sampler()),
        ("A5", "loss stability", |x| a5_stability(x.get_or_insert_with(Experiments::new))),
        ("A6", "training efficacy", |x| a6_efficacy(x.get_or_insert_with(Experiments::new))),
        ("A7", "overlap trend", |x| a7_overlap_trend(x.get_or_insert_with(Experiments::new))),
        ("A8", "clean teacher", |x| a8_clean_teacher(x.get_or_insert_with(Experiments::new))),
        ("A9", "protocol sanity", |_| a9_protocols()),
        ("A10", "determinism", |_| a10_determinism()),
    ];
    for (id, name, check) in criteria {
        if !wanted(id) {
            continue;
        }
        let started = Instant::now();
        let v = check(&mut experiments);
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("{id:<4} {status} {name} ({:.1} s): {}", started.elapsed().as_secs_f64(), v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
