//! Finite-difference suite over every primitive, every loss and the
//! end-to-end objective, all in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{
    ce_loss, consistency_loss, entropy, entropy_min_loss, mi_loss, orth_loss, pseudo_label_loss, total_loss, LossTerms,
    LossWeights,
};
use crate::network::{aggregate_classes, forward_features, over_seg_probs, MappingMatrix, NetConfig, NetworkParams};
use crate::tensor::{finite_diff_gradcheck, Backward, GradCheckOptions, GradCheckReport, Reduction, Result, Tensor};

type F = fn(&Tensor<f64>, &Fixture) -> Result<Tensor<f64>>;

/// Constant inputs shared by the cases; derived from one seed.
pub struct Fixture {
    rng_seed: u64,
}

impl Fixture {
    fn rand(&self, salt: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let n = shape.iter().product();
        Tensor::constant(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
    }

    /// Values bounded away from zero, so ReLU kinks and max-pool ties stay
    /// outside the finite-difference stencil.
    fn away_from_zero(&self, salt: u64, shape: &[usize]) -> Tensor<f64> {
        let t = self.rand(salt, shape, 0.1, 1.0);
        let signs = self.rand(salt + 1, shape, -1.0, 1.0);
        let data = t
            .data()
            .iter()
            .zip(signs.data())
            .map(|(&v, &s)| if s < 0.0 { -v } else { v })
            .collect();
        Tensor::constant(shape, data).expect("shape matches")
    }

    fn one_hot(&self, salt: u64, [b, c, h, w]: [usize; 4]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ salt);
        let hw = h * w;
        let mut data = vec![0.0; b * c * hw];
        for bi in 0..b {
            for p in 0..hw {
                data[(bi * c + rng.gen_range(0..c)) * hw + p] = 1.0;
            }
        }
        Tensor::constant(&[b, c, h, w], data).expect("shape matches")
    }
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element contributes to the scalar under test.
fn probe(out: &Tensor<f64>, fx: &Fixture) -> Result<Tensor<f64>> {
    let w = fx.rand(999, out.shape(), -1.0, 1.0);
    Ok(out.mul(&w)?.sum_all())
}

const IMG: [usize; 4] = [2, 3, 4, 4];

fn primitive_cases() -> Vec<(&'static str, Vec<usize>, F)> {
    vec![
        ("conv2d/input", IMG.to_vec(), |x, fx| {
            probe(
                &x.conv2d(&fx.rand(1, &[2, 3, 3, 3], -1.0, 1.0), &fx.rand(2, &[2], -1.0, 1.0))?,
                fx,
            )
        }),
        ("conv2d/kernel", vec![2, 3, 3, 3], |k, fx| {
            probe(
                &fx.rand(3, &IMG, -1.0, 1.0).conv2d(k, &fx.rand(2, &[2], -1.0, 1.0))?,
                fx,
            )
        }),
        ("conv2d/bias", vec![2], |b, fx| {
            probe(
                &fx.rand(3, &IMG, -1.0, 1.0)
                    .conv2d(&fx.rand(1, &[2, 3, 3, 3], -1.0, 1.0), b)?,
                fx,
            )
        }),
        ("relu", IMG.to_vec(), |x, fx| probe(&x.relu(), fx)),
        ("maxpool2x2", IMG.to_vec(), |x, fx| probe(&x.maxpool2x2()?, fx)),
        ("upsample_nearest2x2", IMG.to_vec(), |x, fx| {
            probe(&x.upsample_nearest2x2()?, fx)
        }),
        ("concat_channels/left", IMG.to_vec(), |x, fx| {
            probe(&x.concat_channels(&fx.rand(4, &[2, 2, 4, 4], -1.0, 1.0))?, fx)
        }),
        ("concat_channels/right", vec![2, 2, 4, 4], |x, fx| {
            probe(&fx.rand(5, &IMG, -1.0, 1.0).concat_channels(x)?, fx)
        }),
        ("channel_linear/input", IMG.to_vec(), |x, fx| {
            probe(&x.channel_linear(&fx.rand(6, &[3, 4], -1.0, 1.0))?, fx)
        }),
        ("channel_linear/weight", vec![3, 4], |wt, fx| {
            probe(&fx.rand(7, &IMG, -1.0, 1.0).channel_linear(wt)?, fx)
        }),
        ("softmax_channels", IMG.to_vec(), |x, fx| {
            probe(&x.softmax_channels()?, fx)
        }),
        ("reduce/sum[0,2,3]", IMG.to_vec(), |x, fx| {
            probe(&x.reduce(Reduction::Sum, &[0, 2, 3])?, fx)
        }),
        ("reduce/mean[1]", IMG.to_vec(), |x, fx| {
            probe(&x.reduce(Reduction::Mean, &[1])?, fx)
        }),
        ("sum_all", IMG.to_vec(), |x, _| Ok(x.sum_all())),
        ("mean_all", IMG.to_vec(), |x, _| Ok(x.mean_all())),
        ("add", IMG.to_vec(), |x, fx| {
            probe(&x.add(&fx.rand(8, &IMG, -1.0, 1.0))?, fx)
        }),
        ("sub", IMG.to_vec(), |x, fx| {
            probe(&fx.rand(9, &IMG, -1.0, 1.0).sub(x)?, fx)
        }),
        ("mul", IMG.to_vec(), |x, fx| {
            probe(&x.mul(&fx.rand(10, &IMG, -1.0, 1.0))?, fx)
        }),
        ("scale", IMG.to_vec(), |x, fx| probe(&x.scale(-2.5), fx)),
        ("neg", IMG.to_vec(), |x, fx| probe(&x.neg(), fx)),
        ("square", IMG.to_vec(), |x, fx| probe(&x.square(), fx)),
        ("log_clamped", IMG.to_vec(), |x, fx| {
            probe(&x.square().log_clamped(1e-8), fx)
        }),
        ("matmul/left", vec![3, 4], |a, fx| {
            probe(&a.matmul(&fx.rand(11, &[4, 5], -1.0, 1.0))?, fx)
        }),
        ("matmul/right", vec![4, 5], |b, fx| {
            probe(&fx.rand(12, &[3, 4], -1.0, 1.0).matmul(b)?, fx)
        }),
        ("transpose2d", vec![3, 4], |a, fx| probe(&a.transpose2d()?, fx)),
        ("reshape", IMG.to_vec(), |x, fx| probe(&x.reshape(&[6, 16])?, fx)),
    ]
}

const PROBS: [usize; 4] = [2, 4, 3, 3];

/// Losses are checked with respect to logits, so every perturbed point is
/// still a valid probability map.
fn loss_cases() -> Vec<(&'static str, Vec<usize>, F)> {
    vec![
        ("ce_loss", PROBS.to_vec(), |z, fx| {
            ce_loss(&fx.one_hot(20, PROBS), &z.softmax_channels()?).map_err(loss_err)
        }),
        ("entropy", PROBS.to_vec(), |z, _| {
            entropy(&z.softmax_channels()?).map_err(loss_err)
        }),
        ("mi_loss", PROBS.to_vec(), |z, _| {
            mi_loss(&z.softmax_channels()?).map_err(loss_err)
        }),
        ("orth_loss", vec![5, 4], |w, _| orth_loss(w).map_err(loss_err)),
        ("entropy_min_loss", PROBS.to_vec(), |z, _| {
            entropy_min_loss(&z.softmax_channels()?).map_err(loss_err)
        }),
        ("pseudo_label_loss", PROBS.to_vec(), |z, _| {
            pseudo_label_loss(&z.scale(3.0).softmax_channels()?, 0.6).map_err(loss_err)
        }),
        ("consistency_loss", PROBS.to_vec(), |z, fx| {
            let teacher = fx.rand(21, &PROBS, -2.0, 2.0).softmax_channels()?;
            consistency_loss(&z.softmax_channels()?, &teacher).map_err(loss_err)
        }),
    ]
}

fn loss_err(e: crate::losses::LossError) -> crate::tensor::TensorError {
    crate::tensor::TensorError::Invalid {
        op: "loss",
        detail: e.to_string(),
    }
}

/// Network used for the end-to-end check.
pub const E2E_NET: NetConfig = NetConfig {
    base_channels: 2,
    num_classes: 2,
    prototypes_per_class: 2,
};

/// `L_total = L_sup + λ1·L_MI + λ2·L_orth` of a tiny network, as a function
/// of parameter array `which` with all other arrays held fixed.
fn end_to_end(params: &NetworkParams<f64>, which: usize, x: &Tensor<f64>, fx: &Fixture) -> Result<Tensor<f64>> {
    let mut bound = params.bind(false);
    bound.tensors[which] = x.clone();
    let mapping = MappingMatrix::for_config(&params.config);
    let labeled = fx.rand(30, &[2, 1, 8, 8], 0.0, 1.0);
    let unlabeled = fx.rand(31, &[2, 1, 8, 8], 0.0, 1.0);
    let y = fx.one_hot(32, [2, 2, 8, 8]);
    let fp_l = over_seg_probs(&bound, &forward_features(&bound, &labeled).map_err(net_err)?).map_err(net_err)?;
    let fp_u = over_seg_probs(&bound, &forward_features(&bound, &unlabeled).map_err(net_err)?).map_err(net_err)?;
    let terms = LossTerms {
        sup: ce_loss(&y, &aggregate_classes(&fp_l, &mapping).map_err(net_err)?).map_err(loss_err)?,
        mi: Some(mi_loss(&fp_u).map_err(loss_err)?),
        orth: Some(orth_loss(bound.head()).map_err(loss_err)?),
        baseline_term: None,
    };
    Ok(total_loss(&terms, &LossWeights::default(), 1.0).map_err(loss_err)?.0)
}

fn net_err(e: crate::network::NetworkError) -> crate::tensor::TensorError {
    match e {
        crate::network::NetworkError::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid {
            op: "network",
            detail: other.to_string(),
        },
    }
}

/// `x²` with a backward pass that forgets the factor 2. Exists only so the
/// suite can demonstrate that it catches a wrong gradient.
struct FaultySquare;

impl Backward<f64> for FaultySquare {
    fn name(&self) -> &'static str {
        "faulty_square"
    }
    fn backward(&self, parents: &[Tensor<f64>], _: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = parents[0].data();
        vec![Some(x.iter().zip(g).map(|(&xi, &gi)| xi * gi).collect())]
    }
}

pub fn faulty_square(x: &Tensor<f64>) -> Tensor<f64> {
    let out = x.data().iter().map(|&v| v * v).collect();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], Box::new(FaultySquare))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    /// Coordinates checked per parameter array in the end-to-end cases.
    pub e2e_elements: usize,
    pub seed: u64,
    pub include_faulty: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            // A narrow stencil keeps ReLU kinks of the end-to-end network out
            // of reach; in f64 its roundoff stays near 1e-10.
            check: GradCheckOptions {
                step: 1e-6,
                ..GradCheckOptions::default()
            },
            e2e_elements: 12,
            seed: 2024,
            include_faulty: false,
        }
    }
}

/// Runs every case and returns one report per case, in a fixed order.
pub fn run_suite(opts: SuiteOptions) -> Vec<GradCheckReport> {
    let fx = Fixture { rng_seed: opts.seed };
    let mut reports = Vec::new();
    let mut salt = 100;
    for (name, shape, f) in primitive_cases().into_iter().chain(loss_cases()) {
        salt += 2;
        let point = if name == "orth_loss" {
            fx.rand(salt, &shape, -0.8, 0.8)
        } else {
            fx.away_from_zero(salt, &shape)
        };
        reports.push(finite_diff_gradcheck(name, |x| f(x, &fx), &point, opts.check));
    }

    let mut params = NetworkParams::<f32>::init(E2E_NET, opts.seed)
        .expect("valid config")
        .cast::<f64>();
    // Zero biases put dead-ReLU pixels exactly on the kink; a generic point
    // keeps every checked coordinate differentiable.
    for (i, a) in params.arrays.iter_mut().enumerate() {
        if a.name.ends_with(".bias") {
            a.data = fx.rand(500 + i as u64, &a.shape, -0.1, 0.1).to_vec();
        }
    }
    let e2e_opts = GradCheckOptions {
        max_elements: Some(opts.e2e_elements),
        ..opts.check
    };
    for (i, a) in params.arrays.iter().enumerate() {
        let point = Tensor::constant(&a.shape, a.data.clone()).expect("shape matches");
        let name = format!("l_total/{}", a.name);
        reports.push(finite_diff_gradcheck(
            &name,
            |x| end_to_end(&params, i, x, &fx),
            &point,
            e2e_opts,
        ));
    }

    if opts.include_faulty {
        let point = fx.away_from_zero(7, &IMG);
        reports.push(finite_diff_gradcheck(
            "faulty_square",
            |x| probe(&faulty_square(x), &fx),
            &point,
            opts.check,
        ));
    }
    reports
}
