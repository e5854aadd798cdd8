//! Objective terms: supervised cross-entropy, the mutual-information
//! regularizer over prototype predictions, the prototype orthogonality
//! penalty, and the entropy-minimization / pseudo-label / mean-teacher
//! baseline terms.
//!
//! Every term returns a rank-0 tensor so it can be combined and
//! differentiated. Logs are clamped below at [`LOG_EPS`].

use thiserror::Error;

use crate::tensor::{Element, Reduction, Tensor, TensorError};

pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss setting: {0}")]
    Invalid(String),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Fraction of epochs over which regularizer weights ramp from 0 to 1.
    pub ramp_fraction: f64,
    /// Weight of the entropy-min / pseudo-label / consistency term.
    pub baseline_weight: f64,
    pub pseudo_label_threshold: f64,
    pub ema_decay: f64,
    /// Also feed labeled images to the MI term.
    pub mi_includes_labeled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.5,
            ramp_fraction: 0.2,
            baseline_weight: 0.1,
            pseudo_label_threshold: 0.9,
            ema_decay: 0.99,
            mi_includes_labeled: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("baseline_weight", self.baseline_weight),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(LossError::Invalid(format!(
                "ramp_fraction must be in [0,1], got {}",
                self.ramp_fraction
            )));
        }
        check_threshold(self.pseudo_label_threshold)?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(LossError::Invalid(format!(
                "ema_decay must be in [0,1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

fn check_threshold(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(LossError::Invalid(format!(
            "pseudo-label threshold must be in (0,1), got {tau}"
        )));
    }
    Ok(())
}

/// Unweighted terms and the weighted total of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    pub mi: f64,
    pub orth: f64,
    pub baseline_term: f64,
    pub total: f64,
}

fn pixels<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<usize> {
    match *t.shape() {
        [b, _, h, w] => Ok(b * h * w),
        _ => Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected [B,K,H,W], got {:?}", t.shape()),
        }
        .into()),
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }
        .into());
    }
    Ok(())
}

/// `-(1/(B|Ω|)) Σ y log p`, the cross-entropy of class probabilities `f`
/// against one-hot targets `y`, averaged over pixels and images.
pub fn ce_loss<T: Element>(y: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(y, f, "ce_loss")?;
    let n = pixels(f, "ce_loss")?;
    Ok(y.mul(&f.log_clamped(LOG_EPS))?.sum_all().scale(-1.0 / n as f64))
}

/// Mean over images and pixels of the per-pixel Shannon entropy of `p`.
pub fn entropy<T: Element>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let n = pixels(p, "entropy")?;
    Ok(p.mul(&p.log_clamped(LOG_EPS))?.sum_all().scale(-1.0 / n as f64))
}

/// Shannon entropy of a probability vector.
pub fn entropy_of_distribution<T: Element>(q: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(q.mul(&q.log_clamped(LOG_EPS))?.sum_all().neg())
}

/// Negated mutual information between images and prototype labels:
/// `-H(mean f') + mean H(f')`. The marginal is the average of `f'` over
/// every pixel of every image in the batch.
pub fn mi_loss<T: Element>(f_prime: &Tensor<T>) -> Result<Tensor<T>> {
    pixels(f_prime, "mi_loss")?;
    let marginal = f_prime.reduce(Reduction::Mean, &[0, 2, 3])?;
    let marginal_entropy = entropy_of_distribution(&marginal)?;
    Ok(entropy(f_prime)?.sub(&marginal_entropy)?)
}

/// `‖WᵀW − I‖_F²` for prototype matrix `W` of shape `[N, C']`.
pub fn orth_loss<T: Element>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = *w.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "orth_loss",
            detail: format!("expected [N,C'], got {:?}", w.shape()),
        }
        .into());
    };
    let gram = w.transpose2d()?.matmul(w)?;
    let eye = (0..k * k)
        .map(|i| if i % (k + 1) == 0 { T::one() } else { T::zero() })
        .collect();
    let eye = Tensor::constant(&[k, k], eye)?;
    Ok(gram.sub(&eye)?.square().sum_all())
}

/// Mean per-pixel entropy of class probabilities (to be minimized).
pub fn entropy_min_loss<T: Element>(f: &Tensor<T>) -> Result<Tensor<T>> {
    entropy(f)
}

/// Cross-entropy against the argmax class on pixels whose maximum
/// probability reaches `tau`; other pixels contribute zero but still count in
/// the average. The target carries no gradient.
pub fn pseudo_label_loss<T: Element>(f: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_threshold(tau)?;
    let n = pixels(f, "pseudo_label_loss")?;
    let [b, k, h, w] = *f.shape() else { unreachable!() };
    let hw = h * w;
    let d = f.data();
    let tau = T::lit(tau);
    let mut target = vec![T::zero(); d.len()];
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for ki in 1..k {
                if d[(bi * k + ki) * hw + p] > d[(bi * k + best) * hw + p] {
                    best = ki;
                }
            }
            if d[(bi * k + best) * hw + p] >= tau {
                target[(bi * k + best) * hw + p] = T::one();
            }
        }
    }
    let target = Tensor::constant(f.shape(), target)?;
    Ok(target.mul(&f.log_clamped(LOG_EPS))?.sum_all().scale(-1.0 / n as f64))
}

/// Mean squared difference between student and (constant) teacher class
/// probabilities.
pub fn consistency_loss<T: Element>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(student, teacher, "consistency_loss")?;
    Ok(student.sub(&teacher.detach())?.square().mean_all())
}

/// Scalar terms feeding [`total_loss`]; absent terms count as zero.
pub struct LossTerms<T: Element> {
    pub sup: Tensor<T>,
    pub mi: Option<Tensor<T>>,
    pub orth: Option<Tensor<T>>,
    pub baseline_term: Option<Tensor<T>>,
}

/// `sup + ramp·λ1·mi + ramp·λ2·orth + ramp·w_b·baseline`.
pub fn total_loss<T: Element>(
    terms: &LossTerms<T>,
    weights: &LossWeights,
    ramp: f64,
) -> Result<(Tensor<T>, LossBreakdown)> {
    if !(0.0..=1.0).contains(&ramp) {
        return Err(LossError::Invalid(format!("ramp must be in [0,1], got {ramp}")));
    }
    let mut total = terms.sup.clone();
    let value = |t: &Option<Tensor<T>>| t.as_ref().map_or(0.0, |t| t.item().to_f64());
    for (term, w) in [
        (&terms.mi, weights.lambda1),
        (&terms.orth, weights.lambda2),
        (&terms.baseline_term, weights.baseline_weight),
    ] {
        if let Some(t) = term {
            total = total.add(&t.scale(ramp * w))?;
        }
    }
    let breakdown = LossBreakdown {
        sup: terms.sup.item().to_f64(),
        mi: value(&terms.mi),
        orth: value(&terms.orth),
        baseline_term: value(&terms.baseline_term),
        total: total.item().to_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN4: f64 = 1.386_294_361_119_890_6;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::constant(shape, data).unwrap()
    }

    fn random_simplex(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        t(&shape, (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .softmax_channels()
            .unwrap()
    }

    fn one_hot(labels: &[usize], k: usize, [b, h, w]: [usize; 3]) -> Tensor<f64> {
        let hw = h * w;
        let mut d = vec![0.0; b * k * hw];
        for bi in 0..b {
            for p in 0..hw {
                d[(bi * k + labels[bi * hw + p]) * hw + p] = 1.0;
            }
        }
        t(&[b, k, h, w], d)
    }

    #[test]
    fn ce_perfect_and_uniform() {
        let y = one_hot(&[0, 1, 2, 3], 4, [1, 2, 2]);
        assert!(ce_loss(&y, &y).unwrap().item() <= 1e-7);
        let u = t(&[1, 4, 2, 2], vec![0.25; 16]);
        assert!((ce_loss(&y, &u).unwrap().item() - LN4).abs() < 1e-12);
        assert!(ce_loss(&y, &t(&[1, 4, 1, 4], vec![0.25; 16])).is_err());
    }

    #[test]
    fn ce_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_simplex(&mut rng, [2, 3, 2, 3]);
        let labels: Vec<usize> = (0..12).map(|_| rng.gen_range(0..3)).collect();
        let y = one_hot(&labels, 3, [2, 2, 3]);
        let mut s = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let (b, p) = (i / 6, i % 6);
            s -= f.data()[(b * 3 + l) * 6 + p].ln();
        }
        assert!((ce_loss(&y, &f).unwrap().item() - s / 12.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&t(&[1, 4, 1, 1], vec![0.25; 4])).unwrap().item() - LN4).abs() < 1e-12);
        let oh = one_hot(&[0, 1, 1], 2, [1, 1, 3]);
        assert!(entropy(&oh).unwrap().item().abs() <= 1e-7);
        let p = t(&[1, 2, 1, 2], vec![0.9, 0.9, 0.1, 0.1]);
        let expected = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy(&p).unwrap().item() - expected).abs() < 1e-12);
        assert!((expected - 0.325083).abs() < 1e-6);
    }

    #[test]
    fn mi_extremes() {
        let u = t(&[2, 4, 2, 2], vec![0.25; 32]);
        assert!(mi_loss(&u).unwrap().item().abs() < 1e-12);
        // one-hot, 4 pixels per image split evenly over 4 prototypes
        let oh = one_hot(&[0, 1, 2, 3, 3, 2, 1, 0], 4, [2, 2, 2]);
        assert!((mi_loss(&oh).unwrap().item() + LN4).abs() < 1e-6);
    }

    /// Two-pass scalar oracle: marginal first, then entropies.
    fn mi_oracle(f: &Tensor<f64>) -> f64 {
        let [b, k, h, w] = *f.shape() else { unreachable!() };
        let hw = h * w;
        let d = f.data();
        let n = (b * hw) as f64;
        let mut q = vec![0.0; k];
        let mut cond = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                for ki in 0..k {
                    let v = d[(bi * k + ki) * hw + p];
                    q[ki] += v / n;
                    cond -= v * v.max(LOG_EPS).ln() / n;
                }
            }
        }
        let hq: f64 = -q.iter().map(|&v| v * v.max(LOG_EPS).ln()).sum::<f64>();
        cond - hq
    }

    #[test]
    fn mi_matches_oracle_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let f = random_simplex(&mut rng, [3, 6, 2, 2]);
            let v = mi_loss(&f).unwrap().item();
            assert!((v - mi_oracle(&f)).abs() < 1e-12);
            assert!(v <= 1e-12 && v >= -(6f64).ln() - 1e-12);
        }
    }

    #[test]
    fn orth_cases() {
        let eye = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(orth_loss(&eye).unwrap().item(), 0.0);
        assert_eq!(orth_loss(&t(&[4, 6], vec![0.0; 24])).unwrap().item(), 6.0);
        let dup = t(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        assert!((orth_loss(&dup).unwrap().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_min_is_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_simplex(&mut rng, [2, 2, 3, 3]);
        assert_eq!(entropy_min_loss(&f).unwrap().item(), entropy(&f).unwrap().item());
        let u = t(&[1, 2, 1, 1], vec![0.5, 0.5]);
        assert!((entropy_min_loss(&u).unwrap().item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_cases() {
        let conf = t(&[1, 2, 1, 2], vec![0.99, 0.01, 0.01, 0.99]);
        assert!((pseudo_label_loss(&conf, 0.9).unwrap().item() + 0.99f64.ln()).abs() < 1e-12);
        let unsure = t(&[1, 2, 1, 2], vec![0.6, 0.4, 0.4, 0.6]);
        assert_eq!(pseudo_label_loss(&unsure, 0.9).unwrap().item(), 0.0);
        assert!(pseudo_label_loss(&unsure, 1.0).is_err());
        assert!(pseudo_label_loss(&unsure, 0.0).is_err());
    }

    #[test]
    fn pseudo_label_matches_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_simplex(&mut rng, [2, 3, 4, 4]);
        let d = f.data();
        let mut s = 0.0;
        for b in 0..2 {
            for p in 0..16 {
                let m = (0..3).map(|k| d[(b * 3 + k) * 16 + p]).fold(f64::MIN, f64::max);
                if m >= 0.7 {
                    s -= m.ln();
                }
            }
        }
        assert!((pseudo_label_loss(&f, 0.7).unwrap().item() - s / 32.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_cases() {
        let s = t(&[1, 2, 1, 1], vec![0.5, 0.5]);
        assert_eq!(consistency_loss(&s, &s).unwrap().item(), 0.0);
        let teacher = t(&[1, 2, 1, 1], vec![1.0, 0.0]);
        assert!((consistency_loss(&s, &teacher).unwrap().item() - 0.25).abs() < 1e-15);
        assert!(consistency_loss(&s, &t(&[1, 1, 1, 2], vec![0.0; 2])).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let sc = |v: f64| Some(Tensor::<f64>::scalar(v));
        let terms = LossTerms {
            sup: Tensor::scalar(1.0),
            mi: sc(-1.0),
            orth: sc(2.0),
            baseline_term: None,
        };
        let (t1, b) = total_loss(&terms, &LossWeights::default(), 1.0).unwrap();
        assert!((t1.item() - 1.99).abs() < 1e-12);
        assert!((b.total - (b.sup + 0.01 * b.mi + 0.5 * b.orth)).abs() < 1e-12);
        let (t0, _) = total_loss(&terms, &LossWeights::default(), 0.0).unwrap();
        assert_eq!(t0.item(), 1.0);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&terms, &zero, 1.0).unwrap().0.item(), 1.0);
        assert!(total_loss(&terms, &zero, 1.5).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            ema_decay: 1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            lambda1: -0.1,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
