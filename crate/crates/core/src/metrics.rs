//! Segmentation quality and prototype diagnostics.

use thiserror::Error;

use crate::data::{batch_images, Sample};
use crate::losses::LOG_EPS;
use crate::network::{predict, MappingMatrix, NetworkError, NetworkParams};
use crate::tensor::Element;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shapes differ: {0} vs {1} pixels")]
    ShapeMismatch(usize, usize),
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("sample {0} has no ground-truth mask")]
    MissingMask(usize),
    #[error("cannot aggregate an empty list of reports")]
    NoReports,
    #[error("reports disagree on {0} length")]
    Incompatible(&'static str),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// `2|P∩T| / (|P|+|T|)` for class `k`; 1 when the class is absent from both.
pub fn dice(pred: &[u8], truth: &[u8], class_k: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch(pred.len(), truth.len()));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (pa, tb) = (a == class_k, b == class_k);
        p += pa as usize;
        t += tb as usize;
        inter += (pa && tb) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dice_per_class: Vec<f64>,
    /// Mean over foreground classes (class 0 excluded).
    pub mean_dice: f64,
    pub marginal_over_prototypes: Vec<f64>,
    pub marginal_entropy: f64,
    pub gram_max_offdiag: f64,
    pub gram_diag_deviation: f64,
}

/// `(max_{j≠k} |G_jk|, max_j |G_jj − 1|)` for the prototype Gram matrix.
pub fn gram_report<T: Element>(params: &NetworkParams<T>) -> (f64, f64) {
    let head = params.head();
    let (n, k) = (head.shape[0], head.shape[1]);
    let w = &head.data;
    let mut off: f64 = 0.0;
    let mut diag: f64 = 0.0;
    for a in 0..k {
        for b in 0..k {
            let g: f64 = (0..n)
                .map(|i| Element::to_f64(w[i * k + a]) * Element::to_f64(w[i * k + b]))
                .sum();
            if a == b {
                diag = diag.max((g - 1.0).abs());
            } else {
                off = off.max(g.abs());
            }
        }
    }
    (off, diag)
}

/// Per-class Dice averaged over image pairs.
pub fn mean_dice_per_class(preds: &[Vec<u8>], truths: &[&[u8]], num_classes: usize) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    if preds.len() != truths.len() {
        return Err(MetricsError::ShapeMismatch(preds.len(), truths.len()));
    }
    let mut sums = vec![0.0; num_classes];
    for (p, t) in preds.iter().zip(truths) {
        for (k, acc) in sums.iter_mut().enumerate() {
            *acc += dice(p, t, k as u8)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / preds.len() as f64).collect())
}

/// Mean over foreground classes.
pub fn foreground_mean(dice_per_class: &[f64]) -> f64 {
    match dice_per_class.len() {
        0 => 0.0,
        1 => dice_per_class[0],
        c => dice_per_class[1..].iter().sum::<f64>() / (c - 1) as f64,
    }
}

pub fn distribution_entropy(q: &[f64]) -> f64 {
    -q.iter().map(|&v| v * v.max(LOG_EPS).ln()).sum::<f64>()
}

const EVAL_BATCH: usize = 16;

/// Per-class Dice averaged over images, prototype marginal over all pixels,
/// and the Gram report of the head.
pub fn evaluate<T: Element>(
    params: &NetworkParams<T>,
    mapping: &MappingMatrix,
    samples: &[Sample],
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let c = mapping.num_classes();
    let cp = mapping.num_prototypes();
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    let mut marginal = vec![0.0; cp];
    let mut pixel_count = 0usize;
    for (chunk_idx, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pred = predict(params, mapping, &batch_images::<T>(&refs))?;
        let hw = chunk[0].size * chunk[0].size;
        let fp = pred.f_prime.data();
        for (b, smp) in chunk.iter().enumerate() {
            let truth = smp
                .mask
                .as_ref()
                .ok_or(MetricsError::MissingMask(chunk_idx * EVAL_BATCH + b))?;
            preds.push(pred.hard_seg[b * hw..(b + 1) * hw].iter().map(|&k| k as u8).collect());
            truths.push(truth.as_slice());
            for (j, m) in marginal.iter_mut().enumerate() {
                *m += fp[(b * cp + j) * hw..][..hw]
                    .iter()
                    .map(|&v| Element::to_f64(v))
                    .sum::<f64>();
            }
            pixel_count += hw;
        }
    }
    let dice_per_class = mean_dice_per_class(&preds, &truths, c)?;
    let mean_dice = foreground_mean(&dice_per_class);
    marginal.iter_mut().for_each(|m| *m /= pixel_count as f64);
    let (gram_max_offdiag, gram_diag_deviation) = gram_report(params);
    Ok(MetricsReport {
        dice_per_class,
        mean_dice,
        marginal_entropy: distribution_entropy(&marginal),
        marginal_over_prototypes: marginal,
        gram_max_offdiag,
        gram_diag_deviation,
    })
}

fn fieldwise(reports: &[MetricsReport], f: impl Fn(&[f64]) -> f64) -> Result<MetricsReport> {
    let first = &reports[0];
    let vec_field = |get: &dyn Fn(&MetricsReport) -> &Vec<f64>, name: &'static str| -> Result<Vec<f64>> {
        let len = get(first).len();
        if reports.iter().any(|r| get(r).len() != len) {
            return Err(MetricsError::Incompatible(name));
        }
        Ok((0..len)
            .map(|i| f(&reports.iter().map(|r| get(r)[i]).collect::<Vec<_>>()))
            .collect())
    };
    let scalar = |get: &dyn Fn(&MetricsReport) -> f64| f(&reports.iter().map(get).collect::<Vec<_>>());
    Ok(MetricsReport {
        dice_per_class: vec_field(&|r| &r.dice_per_class, "dice_per_class")?,
        mean_dice: scalar(&|r| r.mean_dice),
        marginal_over_prototypes: vec_field(&|r| &r.marginal_over_prototypes, "marginal_over_prototypes")?,
        marginal_entropy: scalar(&|r| r.marginal_entropy),
        gram_max_offdiag: scalar(&|r| r.gram_max_offdiag),
        gram_diag_deviation: scalar(&|r| r.gram_diag_deviation),
    })
}

/// Fieldwise mean and population standard deviation.
pub fn seed_aggregate(reports: &[MetricsReport]) -> Result<(MetricsReport, MetricsReport)> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    Ok((fieldwise(reports, mean)?, fieldwise(reports, std)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_all, DatasetSpec};
    use crate::network::NetConfig;

    #[test]
    fn dice_cases() {
        let a = [0, 1, 1, 0];
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&[1, 1, 0, 0], &[0, 0, 1, 1], 1).unwrap(), 0.0);
        // |P| = |T| = 8, overlap 4
        let p: Vec<u8> = (0..16).map(|i| (i < 8) as u8).collect();
        let t: Vec<u8> = (0..16).map(|i| (4..12).contains(&i) as u8).collect();
        assert_eq!(dice(&p, &t, 1).unwrap(), 0.5);
        assert_eq!(dice(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert!(dice(&[0], &[0, 1], 1).is_err());
    }

    fn report(v: f64) -> MetricsReport {
        MetricsReport {
            dice_per_class: vec![1.0, v],
            mean_dice: v,
            marginal_over_prototypes: vec![0.5, 0.5],
            marginal_entropy: v,
            gram_max_offdiag: v,
            gram_diag_deviation: 0.0,
        }
    }

    #[test]
    fn aggregate_cases() {
        let (m, s) = seed_aggregate(&[report(0.3)]).unwrap();
        assert_eq!(m, report(0.3));
        assert_eq!(s.mean_dice, 0.0);
        let (m, s) = seed_aggregate(&[report(0.4), report(0.6)]).unwrap();
        assert!((m.mean_dice - 0.5).abs() < 1e-15 && (s.mean_dice - 0.1).abs() < 1e-15);
        let (_, s) = seed_aggregate(&[report(0.7), report(0.7), report(0.7)]).unwrap();
        assert!(s.mean_dice < 1e-12);
        assert!(s.dice_per_class.iter().all(|&v| v < 1e-12));
        assert!(seed_aggregate(&[]).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let cfg = NetConfig::default();
        let mut p = NetworkParams::<f32>::init(cfg, 0).unwrap();
        p.head_mut().data.fill(0.0);
        let spec = DatasetSpec {
            num_images: 3,
            image_size: 16,
            ..DatasetSpec::default()
        };
        let r = evaluate(&p, &MappingMatrix::for_config(&cfg), &render_all(&spec).unwrap()).unwrap();
        assert!((r.marginal_entropy - 6f64.ln()).abs() < 1e-6);
        assert!((r.marginal_over_prototypes.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(r.dice_per_class.iter().all(|d| (0.0..=1.0).contains(d)));
    }

    #[test]
    fn orthonormal_head_gram() {
        let cfg = NetConfig {
            base_channels: 8,
            num_classes: 2,
            prototypes_per_class: 3,
        };
        let mut p = NetworkParams::<f32>::init(cfg, 0).unwrap();
        let head = p.head_mut();
        head.data.fill(0.0);
        for j in 0..6 {
            head.data[j * 6 + j] = 1.0;
        }
        let (off, diag) = gram_report(&p);
        assert!(off <= 1e-6 && diag <= 1e-6);
    }

    #[test]
    fn oracle_predictor_scores_one() {
        let spec = DatasetSpec {
            num_images: 10,
            noise_sigma: 0.0,
            num_classes: 3,
            ..DatasetSpec::default()
        };
        let samples = render_all(&spec).unwrap();
        let truths: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_deref().unwrap()).collect();
        let preds: Vec<Vec<u8>> = truths.iter().map(|t| t.to_vec()).collect();
        let d = mean_dice_per_class(&preds, &truths, 3).unwrap();
        assert_eq!(d, vec![1.0; 3]);
        assert_eq!(foreground_mean(&d), 1.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = NetConfig::default();
        let p = NetworkParams::<f32>::init(cfg, 0).unwrap();
        assert!(matches!(
            evaluate(&p, &MappingMatrix::for_config(&cfg), &[]),
            Err(MetricsError::EmptyDataset)
        ));
    }
}
