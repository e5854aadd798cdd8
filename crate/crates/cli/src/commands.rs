use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use protoseg::checkpoint::{decode_checkpoint, decode_params, load_checkpoint, save_checkpoint, save_params};
use protoseg::config::{apply, parse_config};
use protoseg::data::{render_all, Partition, Sample};
use protoseg::format::{save_tensor_file, TensorFile};
use protoseg::gradcheck::{run_suite, SuiteOptions};
use protoseg::metrics::{evaluate, seed_aggregate, MetricsReport};
use protoseg::network::{predict, MappingMatrix, NetworkParams};
use protoseg::tensor::GradCheckOptions;
use protoseg::trainer::{test_samples, training_split, validation_samples, Method, TrainConfig, TrainError, Trainer};

use crate::output::{manifest, metrics_csv, pgm, report_csv, report_pairs, split_text};
use crate::{ConfigArgs, EvalArgs, GenDataArgs, GradcheckArgs, GridArgs, SplitName, TrainArgs};

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NumericalAbort { .. } => EXIT_NUMERICAL,
            TrainError::Config(_) | TrainError::Data(_) | TrainError::Format(_) => EXIT_USAGE,
            TrainError::Network(_) | TrainError::Loss(_) => EXIT_USAGE,
            _ => EXIT_CHECK_FAILED,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Defaults, then the config file, then explicit flags.
pub fn build_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        config = parse_config(&text, config).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    let mut overrides: Vec<(&str, String)> = Vec::new();
    let mut push = |key: &'static str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((key, v));
        }
    };
    push("seed", args.seed.map(|v| v.to_string()));
    push("method", args.method.clone());
    push("num_labeled", args.num_labeled.map(|v| v.to_string()));
    push(
        "net.prototypes_per_class",
        args.prototypes_per_class.map(|v| v.to_string()),
    );
    push("weights.lambda1", args.lambda1.map(|v| v.to_string()));
    push("weights.lambda2", args.lambda2.map(|v| v.to_string()));
    push("epochs", args.epochs.map(|v| v.to_string()));
    push("lr", args.lr.map(|v| v.to_string()));
    push("data.num_images", args.num_images.map(|v| v.to_string()));
    push("data.image_size", args.image_size.map(|v| v.to_string()));
    push("data.num_classes", args.num_classes.map(|v| v.to_string()));
    push("net.num_classes", args.num_classes.map(|v| v.to_string()));
    push("data.modes_per_class", args.modes_per_class.map(|v| v.to_string()));
    push("data.noise_sigma", args.noise_sigma.map(|v| v.to_string()));
    push("data.seed", args.data_seed.map(|v| v.to_string()));
    push("val_images", args.val_images.map(|v| v.to_string()));
    push("test_images", args.test_images.map(|v| v.to_string()));
    for (key, value) in overrides {
        apply(&mut config, key, &value).map_err(|e| CliError::usage(format!("--{}: {e}", flag_name(key))))?;
    }
    Ok(config)
}

fn flag_name(key: &str) -> String {
    match key {
        "data.seed" => "data-seed".into(),
        other => other.rsplit('.').next().unwrap_or(other).replace('_', "-"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn format_err(e: protoseg::format::FormatError) -> CliError {
    CliError::usage(e.to_string())
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let config = build_config(&args.cfg)?;
    let spec = config.data;
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let labeled = config.effective_num_labeled();
    if labeled == 0 || labeled > spec.num_images {
        return Err(CliError::usage(format!(
            "--num-labeled {labeled} must be between 1 and --num-images {}",
            spec.num_images
        )));
    }
    let split = training_split(&config)?;
    let samples = render_all(&spec).map_err(|e| CliError::usage(e.to_string()))?;
    let images = args.out.join("images");
    let masks = args.out.join("masks");
    create_dir(&images)?;
    create_dir(&masks)?;
    let s = spec.image_size;
    for (i, smp) in samples.iter().enumerate() {
        let img = TensorFile::f32(vec![1, s, s], smp.image.clone());
        save_tensor_file(images.join(format!("image_{i:04}.sseg")), &img).map_err(format_err)?;
        let mask = TensorFile::u8(vec![s, s], smp.mask.clone().expect("rendered samples carry masks"));
        save_tensor_file(masks.join(format!("mask_{i:04}.sseg")), &mask).map_err(format_err)?;
    }
    write(&args.out.join("split.txt"), split_text(&split))?;
    println!(
        "wrote {} images, {} masks and split.txt ({} labeled) to {}",
        samples.len(),
        samples.len(),
        split.labeled_ids.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

pub fn train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let config = build_config(&args.cfg)?;
    create_dir(&args.out)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let snap = load_checkpoint(path).map_err(format_err)?;
            Trainer::resume(config.clone(), snap)?
        }
        None => Trainer::new(config.clone())?,
    };
    let c = config.data.num_classes;
    let stop = args.stop_after.unwrap_or(config.epochs).min(config.epochs);
    let metrics_path = args.out.join("metrics.csv");
    let ckpt_path = args.out.join("checkpoint.pseg");
    while trainer.epoch() < stop {
        let outcome = trainer.run_epoch().cloned();
        match outcome {
            Ok(r) => {
                if !args.quiet {
                    eprintln!(
                        "epoch {:>4}  sup {:.4}  mi {:.4}  orth {:.4}  base {:.4}  total {:.4}  val dice {:.4}",
                        r.epoch,
                        r.losses.sup,
                        r.losses.mi,
                        r.losses.orth,
                        r.losses.baseline_term,
                        r.losses.total,
                        r.val_mean_dice
                    );
                }
            }
            Err(e) => {
                // Keep what was learned up to the abort for inspection.
                write(&metrics_path, metrics_csv(c, trainer.history()))?;
                return Err(e.into());
            }
        }
    }
    write(&metrics_path, metrics_csv(c, trainer.history()))?;
    save_checkpoint(&ckpt_path, &trainer.snapshot()).map_err(format_err)?;
    if !trainer.is_finished() {
        eprintln!(
            "stopped after epoch {}; resume with --resume {}",
            trainer.epoch(),
            ckpt_path.display()
        );
        return Ok(());
    }
    let outcome = trainer.finish()?;
    let params_path = args.out.join("params.pseg");
    save_params(&params_path, &outcome.best.params).map_err(format_err)?;
    let mapping = MappingMatrix::for_config(&outcome.best.params.config);
    let report = evaluate(&outcome.best.params, &mapping, &test_samples(&config)?).map_err(|e| CliError {
        code: EXIT_CHECK_FAILED,
        message: e.to_string(),
    })?;
    let mut pairs = vec![("best_epoch".to_string(), outcome.best.epoch.to_string())];
    pairs.extend(report_pairs(&report));
    write(&args.out.join("test_report.csv"), report_csv(&pairs))?;
    let artifacts = [
        ("metrics", "metrics.csv"),
        ("params", "params.pseg"),
        ("checkpoint", "checkpoint.pseg"),
        ("test_report", "test_report.csv"),
    ];
    write(
        &args.out.join("manifest.txt"),
        manifest(&config, &artifacts, started.elapsed().as_secs_f64()),
    )?;
    println!(
        "{}: best epoch {} (val dice {:.4}), test dice {:.4}",
        config.method, outcome.best.epoch, outcome.best.val_mean_dice, report.mean_dice
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

/// Accepts either a plain parameter file or a training checkpoint (whose best
/// parameters are used, falling back to the latest ones).
fn load_any_params(path: &Path, num_classes: usize) -> Result<NetworkParams<f32>> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match decode_params(&bytes, num_classes) {
        Ok(p) => Ok(p),
        Err(plain_err) => match decode_checkpoint(&bytes) {
            Ok(snap) => Ok(snap.best.map(|b| b.params).unwrap_or(snap.state.params)),
            Err(_) => Err(CliError::usage(format!("{}: {plain_err}", path.display()))),
        },
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let config = build_config(&args.cfg)?;
    config.validate()?;
    let params = load_any_params(&args.checkpoint, config.data.num_classes)?;
    let expected = config.effective_net();
    if params.config.num_prototypes() != expected.num_prototypes() {
        return Err(CliError::usage(format!(
            "checkpoint has C' = {} prototypes but the config implies C' = {} ({} classes × {} per class)",
            params.config.num_prototypes(),
            expected.num_prototypes(),
            expected.num_classes,
            expected.prototypes_per_class
        )));
    }
    let mut samples: Vec<Sample> = match args.split {
        SplitName::Train => render_all(&config.data.partition(Partition::Train, config.data.num_images))
            .map_err(|e| CliError::usage(e.to_string()))?,
        SplitName::Val => validation_samples(&config)?,
        SplitName::Test => test_samples(&config)?,
    };
    if let Some(n) = args.limit {
        samples.truncate(n.max(1));
    }
    let mapping = MappingMatrix::for_config(&params.config);
    let report = evaluate(&params, &mapping, &samples).map_err(|e| CliError::usage(e.to_string()))?;
    let pairs = report_pairs(&report);
    for (k, v) in &pairs {
        println!("{k} = {v}");
    }
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    create_dir(&out)?;
    let split_name = match args.split {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    };
    write(&out.join(format!("eval_{split_name}.csv")), report_csv(&pairs))?;
    if args.dump_masks {
        dump_masks(&params, &mapping, &samples, &out.join("masks"))?;
    }
    Ok(())
}

fn dump_masks(params: &NetworkParams<f32>, mapping: &MappingMatrix, samples: &[Sample], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let (c, cp) = (mapping.num_classes(), mapping.num_prototypes());
    for (chunk_idx, chunk) in samples.chunks(16).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pred = predict(params, mapping, &protoseg::data::batch_images(&refs))
            .map_err(|e| CliError::usage(e.to_string()))?;
        for (b, smp) in chunk.iter().enumerate() {
            let i = chunk_idx * 16 + b;
            let s = smp.size;
            let hw = s * s;
            let truth: Vec<usize> = smp
                .mask
                .as_ref()
                .expect("evaluation samples carry masks")
                .iter()
                .map(|&k| k as usize)
                .collect();
            write(&dir.join(format!("img_{i:04}_truth.pgm")), pgm(&truth, s, s, c))?;
            write(
                &dir.join(format!("img_{i:04}_pred.pgm")),
                pgm(&pred.hard_seg[b * hw..(b + 1) * hw], s, s, c),
            )?;
            write(
                &dir.join(format!("img_{i:04}_overseg.pgm")),
                pgm(&pred.hard_over_seg[b * hw..(b + 1) * hw], s, s, cp),
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let defaults = SuiteOptions::default();
    let opts = SuiteOptions {
        check: GradCheckOptions {
            tolerance: args.tolerance,
            step: args.step.unwrap_or(defaults.check.step),
            ..defaults.check
        },
        seed: args.seed,
        include_faulty: args.inject_faulty,
        ..defaults
    };
    let started = Instant::now();
    let reports = run_suite(opts);
    println!("{:<34} {:>6} {:>12}  result", "op", "n", "max rel err");
    for r in &reports {
        println!("{r}");
    }
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op_name.as_str())
        .collect();
    println!(
        "{} of {} checks passed at tolerance {:e} in {:.2}s",
        reports.len() - failing.len(),
        reports.len(),
        args.tolerance,
        started.elapsed().as_secs_f64()
    );
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_CHECK_FAILED,
            message: format!("gradient check failed for: {}", failing.join(", ")),
        })
    }
}

// ---------------------------------------------------------------- grid

/// Methods run by `grid` when `--methods` is not given.
pub const DEFAULT_GRID_METHODS: [Method; 10] = [
    Method::Baseline,
    Method::Variant1,
    Method::Variant2,
    Method::Variant3,
    Method::Variant4,
    Method::Variant5,
    Method::Ours,
    Method::EntropyMin,
    Method::PseudoLabel,
    Method::MeanTeacher,
];

pub const DEFAULT_LABELED_COUNTS: [usize; 2] = [4, 8];
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

struct RunResult {
    method: Method,
    num_labeled: usize,
    seed: u64,
    outcome: std::result::Result<MetricsReport, String>,
}

fn single_run(config: TrainConfig) -> std::result::Result<MetricsReport, String> {
    let out = protoseg::trainer::train(config.clone()).map_err(|e| e.to_string())?;
    let mapping = MappingMatrix::for_config(&out.best.params.config);
    let test = test_samples(&config).map_err(|e| e.to_string())?;
    evaluate(&out.best.params, &mapping, &test).map_err(|e| e.to_string())
}

fn csv_safe(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

pub fn grid(args: GridArgs) -> Result<()> {
    let base = build_config(&args.cfg)?;
    let methods: Vec<Method> = match &args.methods {
        Some(names) => names
            .iter()
            .map(|n| n.trim().parse::<Method>().map_err(|e| CliError::usage(e.to_string())))
            .collect::<Result<_>>()?,
        None => DEFAULT_GRID_METHODS.to_vec(),
    };
    let counts = args
        .labeled_counts
        .clone()
        .unwrap_or_else(|| DEFAULT_LABELED_COUNTS.to_vec());
    let seeds = args.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    if methods.is_empty() || counts.is_empty() || seeds.is_empty() {
        return Err(CliError::usage(
            "grid needs at least one method, labeled count and seed",
        ));
    }
    create_dir(&args.out)?;

    let mut jobs = Vec::new();
    for &m in &methods {
        for &n in &counts {
            for &s in &seeds {
                jobs.push(TrainConfig {
                    method: m,
                    num_labeled: n,
                    seed: s,
                    ..base.clone()
                });
            }
        }
    }
    let results: Mutex<Vec<Option<RunResult>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = args.jobs.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = jobs.get(i) else { break };
                let t = Instant::now();
                let outcome = single_run(cfg.clone());
                match &outcome {
                    Ok(r) => eprintln!(
                        "{} n={} seed={}: test dice {:.4} ({:.1}s)",
                        cfg.method,
                        cfg.num_labeled,
                        cfg.seed,
                        r.mean_dice,
                        t.elapsed().as_secs_f64()
                    ),
                    Err(e) => eprintln!("{} n={} seed={}: failed: {e}", cfg.method, cfg.num_labeled, cfg.seed),
                }
                results.lock().expect("no worker panicked")[i] = Some(RunResult {
                    method: cfg.method,
                    num_labeled: cfg.num_labeled,
                    seed: cfg.seed,
                    outcome,
                });
            });
        }
    });
    let results: Vec<RunResult> = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();

    let mut runs = String::from("method,num_labeled,seed,test_dice,marginal_entropy,gram_max_offdiag,status\n");
    for r in &results {
        match &r.outcome {
            Ok(m) => runs.push_str(&format!(
                "{},{},{},{},{},{},ok\n",
                r.method, r.num_labeled, r.seed, m.mean_dice, m.marginal_entropy, m.gram_max_offdiag
            )),
            Err(e) => runs.push_str(&format!(
                "{},{},{},,,,{}\n",
                r.method,
                r.num_labeled,
                r.seed,
                csv_safe(e)
            )),
        }
    }
    write(&args.out.join("runs.csv"), runs)?;

    let mut summary = String::from(
        "method,num_labeled,seeds,mean_test_dice,std_test_dice,mean_marginal_entropy,mean_gram_max_offdiag\n",
    );
    for &m in &methods {
        for &n in &counts {
            let group: Vec<&RunResult> = results.iter().filter(|r| r.method == m && r.num_labeled == n).collect();
            let ok: Vec<MetricsReport> = group.iter().filter_map(|r| r.outcome.as_ref().ok().cloned()).collect();
            let mut seeds_field = group
                .iter()
                .filter(|r| r.outcome.is_ok())
                .map(|r| r.seed.to_string())
                .collect::<Vec<_>>()
                .join(";");
            for r in group.iter().filter(|r| r.outcome.is_err()) {
                let reason = r.outcome.as_ref().err().map(|e| csv_safe(e)).unwrap_or_default();
                seeds_field.push_str(&format!(" [seed {} failed: {reason}]", r.seed));
            }
            match seed_aggregate(&ok) {
                Ok((mean, std)) => summary.push_str(&format!(
                    "{m},{n},{seeds_field},{},{},{},{}\n",
                    mean.mean_dice, std.mean_dice, mean.marginal_entropy, mean.gram_max_offdiag
                )),
                Err(_) => summary.push_str(&format!("{m},{n},{seeds_field},NaN,NaN,NaN,NaN\n")),
            }
        }
    }
    write(&args.out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}
