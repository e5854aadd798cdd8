use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--num-images",
    "24",
    "--image-size",
    "16",
    "--val-images",
    "6",
    "--test-images",
    "6",
];

fn protoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = protoseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_every_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    run_ok(&with_small(&["gen-data", "--out", p(&out), "--num-labeled", "5"]));
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 24);
    assert_eq!(fs::read_dir(out.join("masks")).unwrap().count(), 24);
    let split = fs::read_to_string(out.join("split.txt")).unwrap();
    let labeled = split.lines().next().unwrap().split_whitespace().count() - 1;
    let unlabeled = split.lines().nth(1).unwrap().split_whitespace().count() - 1;
    assert_eq!((labeled, unlabeled), (5, 19));
    let img = protoseg::format::load_tensor_file(out.join("images/image_0000.sseg")).unwrap();
    assert_eq!(img.dims, vec![1, 16, 16]);
}

#[test]
fn gen_data_rejects_too_many_labeled() {
    let dir = TempDir::new().unwrap();
    let out = protoseg(&with_small(&[
        "gen-data",
        "--out",
        p(dir.path()),
        "--num-labeled",
        "25",
    ]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num-labeled"));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nweights.lambda3 = 1\n").unwrap();
    let out = protoseg(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("weights.lambda3"), "{err}");
    let out = protoseg(&["train", "--method", "nonsense", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs = 9\nmethod = baseline\nlr = 0.02\n").unwrap();
    let out = dir.path().join("run");
    run_ok(&with_small(&[
        "train",
        "--config",
        p(&cfg),
        "--epochs",
        "2",
        "--out",
        p(&out),
        "--quiet",
    ]));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("\nepochs = 2\n"));
    assert!(manifest.contains("\nmethod = baseline\n"));
    assert!(manifest.contains("\nlr = 0.02\n"));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 3);
}

#[test]
fn train_is_reproducible_and_resumable() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let base = with_small(&["train", "--method", "mt_ours", "--epochs", "4", "--quiet"]);
    let mut args = base.clone();
    args.extend(["--out", p(&a)]);
    run_ok(&args);
    let mut args = base.clone();
    args.extend(["--out", p(&b)]);
    run_ok(&args);
    let mut args = base.clone();
    args.extend(["--out", p(&c), "--stop-after", "2"]);
    run_ok(&args);
    assert!(!c.join("params.pseg").exists());
    let ckpt = c.join("checkpoint.pseg");
    let mut args = base.clone();
    args.extend(["--out", p(&c), "--resume", p(&ckpt)]);
    run_ok(&args);

    let header = "epoch,loss_sup,loss_mi,loss_orth,loss_baseline,loss_total,val_mean_dice,val_dice_class_1,marginal_entropy,gram_max_offdiag";
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(header.as_bytes()));
    assert!(!metrics.contains(&b'\r'));
    for other in [&b, &c] {
        assert_eq!(metrics, fs::read(other.join("metrics.csv")).unwrap());
        assert_eq!(
            fs::read(a.join("params.pseg")).unwrap(),
            fs::read(other.join("params.pseg")).unwrap()
        );
        assert_eq!(
            fs::read(a.join("test_report.csv")).unwrap(),
            fs::read(other.join("test_report.csv")).unwrap()
        );
    }
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first");
    run_ok(&with_small(&[
        "train",
        "--method",
        "variant5",
        "--epochs",
        "2",
        "--seed",
        "4",
        "--out",
        p(&first),
        "--quiet",
    ]));
    let second = dir.path().join("second");
    let manifest = first.join("manifest.txt");
    run_ok(&["train", "--config", p(&manifest), "--out", p(&second), "--quiet"]);
    assert_eq!(
        fs::read(first.join("metrics.csv")).unwrap(),
        fs::read(second.join("metrics.csv")).unwrap()
    );
}

#[test]
fn eval_reports_dumps_masks_and_checks_prototype_count() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    run_ok(&with_small(&["train", "--epochs", "2", "--out", p(&run), "--quiet"]));
    let params = run.join("params.pseg");
    let stdout = run_ok(&with_small(&[
        "eval",
        "--checkpoint",
        p(&params),
        "--split",
        "val",
        "--dump-masks",
        "--limit",
        "3",
    ]));
    assert!(stdout.lines().any(|l| l.starts_with("mean_dice = ")));
    assert!(stdout.contains("marginal_prototype_5 = "));
    assert_eq!(fs::read_dir(run.join("masks")).unwrap().count(), 9);
    let csv = fs::read_to_string(run.join("eval_val.csv")).unwrap();
    assert!(csv.starts_with("metric,value\nmean_dice,"));

    // The checkpoint works as a parameter source too.
    run_ok(&with_small(&["eval", "--checkpoint", p(&run.join("checkpoint.pseg"))]));

    let out = protoseg(&with_small(&[
        "eval",
        "--checkpoint",
        p(&params),
        "--prototypes-per-class",
        "2",
    ]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("C' = 6"));
}

#[test]
fn single_prototype_masks_match_class_masks() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    run_ok(&with_small(&[
        "train",
        "--method",
        "baseline",
        "--epochs",
        "1",
        "--out",
        p(&run),
        "--quiet",
    ]));
    run_ok(&with_small(&[
        "eval",
        "--method",
        "baseline",
        "--checkpoint",
        p(&run.join("params.pseg")),
        "--dump-masks",
        "--limit",
        "2",
    ]));
    for i in 0..2 {
        let pred = fs::read(run.join(format!("masks/img_{i:04}_pred.pgm"))).unwrap();
        let over = fs::read(run.join(format!("masks/img_{i:04}_overseg.pgm"))).unwrap();
        assert!(pred.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(pred, over);
    }
}

#[test]
fn converged_full_supervision_fits_training_images() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    run_ok(&with_small(&[
        "train",
        "--method",
        "full_sup",
        "--epochs",
        "15",
        "--out",
        p(&run),
        "--quiet",
    ]));
    let stdout = run_ok(&with_small(&[
        "eval",
        "--method",
        "full_sup",
        "--checkpoint",
        p(&run.join("params.pseg")),
        "--split",
        "train",
    ]));
    let dice: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("mean_dice = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(dice >= 0.95, "train dice {dice}");
}

#[test]
fn gradcheck_passes_and_threshold_is_live() {
    let out = protoseg(&["gradcheck"]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("l_total/head.prototypes"));
    assert!(!table.contains("FAIL"));

    let out = protoseg(&["gradcheck", "--inject-faulty"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("faulty_square"));

    let out = protoseg(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grid_writes_one_summary_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("grid");
    run_ok(&with_small(&[
        "grid",
        "--out",
        p(&out),
        "--epochs",
        "2",
        "--methods",
        "baseline,ours",
        "--labeled-counts",
        "4",
        "--seeds",
        "1,2,3",
        "--jobs",
        "2",
    ]));
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(runs.lines().count(), 7);
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(
        rows[0],
        "method,num_labeled,seeds,mean_test_dice,std_test_dice,mean_marginal_entropy,mean_gram_max_offdiag"
    );
    assert_eq!(rows.len(), 3);

    // Summary mean is the plain average of the per-seed rows.
    let dice_of = |method: &str| -> Vec<f64> {
        runs.lines()
            .filter(|l| l.starts_with(&format!("{method},")))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect()
    };
    for (row, method) in rows[1..].iter().zip(["baseline", "ours"]) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], method);
        assert_eq!(fields[2], "1;2;3");
        let d = dice_of(method);
        let mean: f64 = fields[3].parse().unwrap();
        assert!((mean - d.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
}
