//! Text artifacts: CSV tables, PGM masks, split and manifest files. Numbers
//! are written with Rust's locale-independent shortest round-trip format.

use std::fmt::Write as _;

use protoseg::config::dump_config;
use protoseg::data::SplitIndex;
use protoseg::metrics::MetricsReport;
use protoseg::trainer::{EpochRecord, TrainConfig};

pub fn metrics_header(num_classes: usize) -> String {
    let mut h = String::from("epoch,loss_sup,loss_mi,loss_orth,loss_baseline,loss_total,val_mean_dice");
    for k in 1..num_classes {
        let _ = write!(h, ",val_dice_class_{k}");
    }
    h.push_str(",marginal_entropy,gram_max_offdiag");
    h
}

pub fn metrics_csv(num_classes: usize, history: &[EpochRecord]) -> String {
    let mut out = metrics_header(num_classes);
    out.push('\n');
    for r in history {
        let l = &r.losses;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, l.sup, l.mi, l.orth, l.baseline_term, l.total, r.val_mean_dice
        );
        for d in r.val_dice_per_class.iter().skip(1) {
            let _ = write!(out, ",{d}");
        }
        let _ = writeln!(out, ",{},{}", r.marginal_entropy, r.gram_max_offdiag);
    }
    out
}

/// `(key, value)` pairs of a report, in a fixed order.
pub fn report_pairs(r: &MetricsReport) -> Vec<(String, String)> {
    let mut kv = vec![("mean_dice".to_string(), r.mean_dice.to_string())];
    for (k, d) in r.dice_per_class.iter().enumerate() {
        kv.push((format!("dice_class_{k}"), d.to_string()));
    }
    kv.push(("marginal_entropy".into(), r.marginal_entropy.to_string()));
    for (j, m) in r.marginal_over_prototypes.iter().enumerate() {
        kv.push((format!("marginal_prototype_{j}"), m.to_string()));
    }
    kv.push(("gram_max_offdiag".into(), r.gram_max_offdiag.to_string()));
    kv.push(("gram_diag_deviation".into(), r.gram_diag_deviation.to_string()));
    kv
}

pub fn report_csv(pairs: &[(String, String)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in pairs {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

pub fn split_text(split: &SplitIndex) -> String {
    let join = |ids: &[usize]| ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    format!(
        "labeled: {}\nunlabeled: {}\n",
        join(&split.labeled_ids),
        join(&split.unlabeled_ids)
    )
}

/// Comment header (version, artifacts, duration) over a full config dump, so
/// the manifest itself parses back into the run's config.
pub fn manifest(config: &TrainConfig, artifacts: &[(&str, &str)], seconds: f64) -> String {
    let mut out = String::from("# protoseg run manifest\n");
    let _ = writeln!(out, "# version: {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "# wall_clock_seconds: {seconds:.3}");
    for (name, path) in artifacts {
        let _ = writeln!(out, "# artifact {name}: {path}");
    }
    out.push_str(&dump_config(config));
    out
}

/// Binary PGM (P5) of labels in `0..levels`, spread evenly over 0..=255.
pub fn pgm(labels: &[usize], width: usize, height: usize, levels: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = levels.saturating_sub(1).max(1);
    out.extend(labels.iter().map(|&l| ((l.min(span) * 255 + span / 2) / span) as u8));
    out
}
