//! Micro encoder–decoder feature extractor and the multi-prototype head.
//!
//! The head is a bias-free 1×1 convolution whose `C' = P·C` columns are
//! prototype vectors. Its softmax output `f'` is an over-segmentation; the
//! fixed block mapping [`MappingMatrix`] sums prototype probabilities into
//! class probabilities `f`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error("image size {h}x{w} is not divisible by 4")]
    Indivisible { h: usize, w: usize },
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Channel width `F` of the first encoder level; also the feature
    /// dimension `N` seen by the head.
    pub base_channels: usize,
    pub num_classes: usize,
    pub prototypes_per_class: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            num_classes: 2,
            prototypes_per_class: 3,
        }
    }
}

impl NetConfig {
    pub const INPUT_CHANNELS: usize = 1;
    pub const DEPTH: usize = 2;

    pub fn num_prototypes(&self) -> usize {
        self.prototypes_per_class * self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_classes == 0 || self.prototypes_per_class == 0 {
            return Err(NetworkError::Config(format!("all sizes must be positive: {self:?}")));
        }
        if self.num_prototypes() < 2 {
            return Err(NetworkError::Config("need at least two output channels".into()));
        }
        Ok(())
    }

    /// `(name, out_channels, in_channels)` for every 3×3 convolution, in
    /// forward order.
    pub fn conv_layers(&self) -> Vec<(&'static str, usize, usize)> {
        let f = self.base_channels;
        vec![
            ("enc1.conv1", f, Self::INPUT_CHANNELS),
            ("enc1.conv2", f, f),
            ("enc2.conv1", 2 * f, f),
            ("enc2.conv2", 2 * f, 2 * f),
            ("bottleneck.conv1", 4 * f, 2 * f),
            ("bottleneck.conv2", 4 * f, 4 * f),
            ("dec2.conv1", 2 * f, 4 * f + 2 * f),
            ("dec2.conv2", 2 * f, 2 * f),
            ("dec1.conv1", f, 2 * f + f),
            ("dec1.conv2", f, f),
        ]
    }
}

pub const HEAD_NAME: &str = "head.prototypes";

/// One named learnable array with its pending gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray<T: Element = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Element> ParamArray<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
            grad: None,
        }
    }
}

/// All learnable values: kernel/bias pairs of the ten convolutions followed by
/// the `N×C'` prototype matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T: Element = f32> {
    pub config: NetConfig,
    pub arrays: Vec<ParamArray<T>>,
}

/// Parameters turned into graph leaves for one forward pass.
pub struct BoundParams<T: Element = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Element> BoundParams<T> {
    pub fn head(&self) -> &Tensor<T> {
        self.tensors.last().expect("head is always present")
    }
}

impl<T: Element> NetworkParams<T> {
    /// He-normal kernels, zero biases, prototypes drawn from `N(0, 1/N)`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = Vec::new();
        for (name, cout, cin) in config.conv_layers() {
            let fan_in = cin * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let kernel = (0..cout * fan_in).map(|_| T::lit(normal.sample(&mut rng))).collect();
            arrays.push(ParamArray::new(format!("{name}.weight"), vec![cout, cin, 3, 3], kernel));
            arrays.push(ParamArray::new(
                format!("{name}.bias"),
                vec![cout],
                vec![T::zero(); cout],
            ));
        }
        let n = config.feature_dim();
        let k = config.num_prototypes();
        let normal = Normal::new(0.0, (1.0 / n as f64).sqrt()).expect("positive std");
        let head = (0..n * k).map(|_| T::lit(normal.sample(&mut rng))).collect();
        arrays.push(ParamArray::new(HEAD_NAME, vec![n, k], head));
        Ok(Self { config, arrays })
    }

    /// Rebuilds parameters from named arrays, checking every shape against
    /// the config.
    pub fn from_arrays(config: NetConfig, arrays: Vec<ParamArray<T>>) -> Result<Self> {
        config.validate()?;
        let template = Self::init(config, 0)?;
        if template.arrays.len() != arrays.len() {
            return Err(NetworkError::Params(format!(
                "expected {} arrays, got {}",
                template.arrays.len(),
                arrays.len()
            )));
        }
        for (t, a) in template.arrays.iter().zip(&arrays) {
            if t.name != a.name || t.shape != a.shape {
                return Err(NetworkError::Params(format!(
                    "expected {} {:?}, got {} {:?}",
                    t.name, t.shape, a.name, a.shape
                )));
            }
        }
        let p = Self { config, arrays };
        p.validate()?;
        Ok(p)
    }

    /// Infers the config from array shapes: `F` from the first kernel, `C'`
    /// from the head. `num_classes` must be supplied.
    pub fn infer_config(arrays: &[ParamArray<T>], num_classes: usize) -> Result<NetConfig> {
        let first = arrays.first().ok_or_else(|| NetworkError::Params("no arrays".into()))?;
        let head = arrays
            .iter()
            .find(|a| a.name == HEAD_NAME)
            .ok_or_else(|| NetworkError::Params(format!("missing {HEAD_NAME}")))?;
        let f = first.shape[0];
        let cp = head.shape[1];
        if num_classes == 0 || cp % num_classes != 0 {
            return Err(NetworkError::Params(format!(
                "head has {cp} prototypes, not a multiple of {num_classes} classes"
            )));
        }
        Ok(NetConfig {
            base_channels: f,
            num_classes,
            prototypes_per_class: cp / num_classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.arrays {
            if a.data.iter().any(|v| !v.is_finite()) {
                return Err(NetworkError::Params(format!("{} contains non-finite values", a.name)));
            }
        }
        let head = self.head();
        if head.shape != [self.config.feature_dim(), self.config.num_prototypes()] {
            return Err(NetworkError::Params(format!(
                "head shape {:?} does not match config {:?}",
                head.shape, self.config
            )));
        }
        Ok(())
    }

    pub fn head(&self) -> &ParamArray<T> {
        self.arrays.last().expect("head is always present")
    }

    pub fn head_mut(&mut self) -> &mut ParamArray<T> {
        self.arrays.last_mut().expect("head is always present")
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray<T>> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn bind(&self, requires_grad: bool) -> BoundParams<T> {
        let tensors = self
            .arrays
            .iter()
            .map(|a| {
                if requires_grad {
                    Tensor::param(&a.shape, a.data.clone())
                } else {
                    Tensor::constant(&a.shape, a.data.clone())
                }
                .expect("array shapes are consistent")
            })
            .collect();
        BoundParams { tensors }
    }

    /// Moves gradients accumulated on bound leaves into the arrays.
    pub fn store_grads(&mut self, bound: &BoundParams<T>) {
        for (a, t) in self.arrays.iter_mut().zip(&bound.tensors) {
            a.grad = t.take_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        self.arrays.iter_mut().for_each(|a| a.grad = None);
    }

    pub fn cast<U: Element>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config,
            arrays: self
                .arrays
                .iter()
                .map(|a| {
                    ParamArray::new(
                        a.name.clone(),
                        a.shape.clone(),
                        a.data.iter().map(|&v| U::lit(v.to_f64())).collect(),
                    )
                })
                .collect(),
        }
    }
}

fn conv_relu<T: Element>(x: &Tensor<T>, bound: &BoundParams<T>, layer: usize) -> Result<Tensor<T>> {
    let k = &bound.tensors[2 * layer];
    let b = &bound.tensors[2 * layer + 1];
    Ok(x.conv2d(k, b)?.relu())
}

fn double_conv<T: Element>(x: &Tensor<T>, bound: &BoundParams<T>, first_layer: usize) -> Result<Tensor<T>> {
    let h = conv_relu(x, bound, first_layer)?;
    conv_relu(&h, bound, first_layer + 1)
}

/// Feature map `φ(x)` of shape `[B, F, H, W]` from images `[B, 1, H, W]`.
pub fn forward_features<T: Element>(bound: &BoundParams<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    if let [_, _, h, w] = *images.shape() {
        if h % 4 != 0 || w % 4 != 0 {
            return Err(NetworkError::Indivisible { h, w });
        }
    }
    let skip1 = double_conv(images, bound, 0)?;
    let skip2 = double_conv(&skip1.maxpool2x2()?, bound, 2)?;
    let bottom = double_conv(&skip2.maxpool2x2()?, bound, 4)?;
    let up2 = bottom.upsample_nearest2x2()?.concat_channels(&skip2)?;
    let dec2 = double_conv(&up2, bound, 6)?;
    let up1 = dec2.upsample_nearest2x2()?.concat_channels(&skip1)?;
    double_conv(&up1, bound, 8)
}

/// `f' = softmax(Wᵀ φ)` over the `C'` prototype channels.
pub fn over_seg_probs<T: Element>(bound: &BoundParams<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(features.channel_linear(bound.head())?.softmax_channels()?)
}

/// Fixed binary `C'×C` assignment of prototypes to classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingMatrix {
    num_prototypes: usize,
    num_classes: usize,
    entries: Vec<u8>,
}

impl MappingMatrix {
    /// Contiguous blocks: prototypes `kP..(k+1)P` belong to class `k`.
    pub fn build(num_classes: usize, prototypes_per_class: usize) -> Self {
        let cp = num_classes * prototypes_per_class;
        let mut entries = vec![0u8; cp * num_classes];
        for j in 0..cp {
            entries[j * num_classes + j / prototypes_per_class] = 1;
        }
        Self {
            num_prototypes: cp,
            num_classes,
            entries,
        }
    }

    pub fn for_config(config: &NetConfig) -> Self {
        Self::build(config.num_classes, config.prototypes_per_class)
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_prototypes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, prototype: usize, class: usize) -> u8 {
        self.entries[prototype * self.num_classes + class]
    }

    pub fn class_of(&self, prototype: usize) -> usize {
        (0..self.num_classes)
            .find(|&k| self.get(prototype, k) == 1)
            .expect("every row has exactly one entry")
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.entries.iter().map(|&e| T::lit(e as f64)).collect();
        Tensor::constant(&[self.num_prototypes, self.num_classes], data).expect("consistent shape")
    }
}

/// `f_k = Σ_j m_jk f'_j` per pixel.
pub fn aggregate_classes<T: Element>(f_prime: &Tensor<T>, mapping: &MappingMatrix) -> Result<Tensor<T>> {
    match *f_prime.shape() {
        [_, c, _, _] if c == mapping.num_prototypes() => {}
        _ => {
            return Err(NetworkError::Tensor(TensorError::ShapeMismatch {
                op: "aggregate_classes",
                detail: format!(
                    "expected [B,{},H,W], got {:?}",
                    mapping.num_prototypes(),
                    f_prime.shape()
                ),
            }))
        }
    }
    Ok(f_prime.channel_linear(&mapping.to_tensor())?)
}

/// Per-pixel argmax over the channel axis; ties go to the lowest index.
pub fn argmax_channels<T: Element>(probs: &Tensor<T>) -> Vec<usize> {
    let [b, k, h, w] = *probs.shape() else {
        panic!("argmax_channels expects a rank-4 tensor");
    };
    let hw = h * w;
    let d = probs.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for ki in 1..k {
                if d[(bi * k + ki) * hw + p] > d[(bi * k + best) * hw + p] {
                    best = ki;
                }
            }
            out.push(best);
        }
    }
    out
}

pub struct Prediction<T: Element = f32> {
    pub f_prime: Tensor<T>,
    pub f: Tensor<T>,
    /// Prototype index per pixel, `[B, H, W]` row-major.
    pub hard_over_seg: Vec<usize>,
    /// Class index per pixel, `[B, H, W]` row-major.
    pub hard_seg: Vec<usize>,
}

pub fn predict<T: Element>(
    params: &NetworkParams<T>,
    mapping: &MappingMatrix,
    images: &Tensor<T>,
) -> Result<Prediction<T>> {
    let bound = params.bind(false);
    let features = forward_features(&bound, images)?;
    let f_prime = over_seg_probs(&bound, &features)?;
    let f = aggregate_classes(&f_prime, mapping)?;
    let hard_over_seg = argmax_channels(&f_prime);
    let hard_seg = argmax_channels(&f);
    Ok(Prediction {
        f_prime,
        f,
        hard_over_seg,
        hard_seg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn images(b: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::constant(
            &[b, 1, size, size],
            (0..b * size * size).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let c = NetConfig::default();
        let a = NetworkParams::<f32>::init(c, 4).unwrap();
        let b = NetworkParams::<f32>::init(c, 4).unwrap();
        assert_eq!(a, b);
        let d = NetworkParams::<f32>::init(c, 5).unwrap();
        assert_ne!(a.arrays[0].data, d.arrays[0].data);
    }

    #[test]
    fn he_std_matches() {
        let c = NetConfig::default();
        let p = NetworkParams::<f64>::init(c, 1).unwrap();
        // bottleneck.conv2: 32 x 32 x 9 = 9216 samples
        let k = p.get("bottleneck.conv2.weight").unwrap();
        let n = k.data.len() as f64;
        let mean = k.data.iter().sum::<f64>() / n;
        let var = k.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = (2.0 / (32.0 * 9.0f64)).sqrt();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.1);
        assert!(p.get("bottleneck.conv2.bias").unwrap().data.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn feature_shape() {
        let p = NetworkParams::<f32>::init(NetConfig::default(), 0).unwrap();
        let f = forward_features(&p.bind(false), &images(2, 16, 0)).unwrap();
        assert_eq!(f.shape(), &[2, 8, 16, 16]);
        assert!(forward_features(&p.bind(false), &images(1, 18, 0)).is_err());
    }

    #[test]
    fn zero_params_give_zero_features() {
        let mut p = NetworkParams::<f32>::init(NetConfig::default(), 0).unwrap();
        p.arrays.iter_mut().for_each(|a| a.data.fill(0.0));
        let f = forward_features(&p.bind(false), &images(1, 8, 1)).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let fp = over_seg_probs(&p.bind(false), &f).unwrap();
        assert!(fp.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-7));
    }

    #[test]
    fn prototype_alignment_dominates() {
        // orthonormal W = first 4 columns of I_4, features = 100 e_j
        let n = 4;
        let eye: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let bound = BoundParams {
            tensors: vec![Tensor::constant(&[n, n], eye).unwrap()],
        };
        for j in 0..n {
            let mut feat = vec![0.0; n];
            feat[j] = 100.0;
            let x = Tensor::constant(&[1, n, 1, 1], feat).unwrap();
            let fp = over_seg_probs(&bound, &x).unwrap();
            assert!(fp.data()[j] > 0.99);
        }
    }

    #[test]
    fn mapping_blocks() {
        let m = MappingMatrix::build(2, 1);
        assert_eq!((m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1)), (1, 0, 0, 1));
        let m = MappingMatrix::build(2, 3);
        for j in 0..6 {
            assert_eq!(m.class_of(j), j / 3);
        }
        for (c, p) in [(1, 1), (2, 3), (3, 2), (4, 5)] {
            let m = MappingMatrix::build(c, p);
            for j in 0..c * p {
                assert_eq!((0..c).map(|k| m.get(j, k) as usize).sum::<usize>(), 1);
            }
            for k in 0..c {
                assert_eq!((0..c * p).map(|j| m.get(j, k) as usize).sum::<usize>(), p);
            }
        }
    }

    #[test]
    fn aggregate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = Tensor::<f64>::constant(&[2, 2, 3, 3], (0..36).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .unwrap()
            .softmax_channels()
            .unwrap();
        let same = aggregate_classes(&raw, &MappingMatrix::build(2, 1)).unwrap();
        assert_eq!(same.data(), raw.data());

        let mut onehot = vec![0.0; 6];
        onehot[4] = 1.0;
        let f = aggregate_classes(
            &Tensor::<f64>::constant(&[1, 6, 1, 1], onehot).unwrap(),
            &MappingMatrix::build(2, 3),
        )
        .unwrap();
        assert_eq!(f.data(), &[0.0, 1.0]);

        assert!(aggregate_classes(&raw, &MappingMatrix::build(2, 3)).is_err());
    }

    #[test]
    fn predict_ranges_and_definitions() {
        let cfg = NetConfig {
            base_channels: 4,
            num_classes: 3,
            prototypes_per_class: 2,
        };
        let p = NetworkParams::<f32>::init(cfg, 9).unwrap();
        let m = MappingMatrix::for_config(&cfg);
        let pred = predict(&p, &m, &images(2, 8, 3)).unwrap();
        assert!(pred.hard_over_seg.iter().all(|&j| j < 6));
        assert!(pred.hard_seg.iter().all(|&k| k < 3));
        // hard_seg = argmax_k Σ_j m_jk f'_j
        let fp = pred.f_prime.data();
        for (i, &k) in pred.hard_seg.iter().enumerate() {
            let (b, pix) = (i / 64, i % 64);
            let class_prob = |c: usize| -> f32 {
                (0..6)
                    .filter(|&j| m.get(j, c) == 1)
                    .map(|j| fp[(b * 6 + j) * 64 + pix])
                    .sum()
            };
            for c in 0..3 {
                assert!(class_prob(c) <= class_prob(k) + 1e-6);
            }
        }
    }

    #[test]
    fn single_prototype_maps_match() {
        let cfg = NetConfig {
            base_channels: 4,
            num_classes: 2,
            prototypes_per_class: 1,
        };
        let p = NetworkParams::<f32>::init(cfg, 1).unwrap();
        let pred = predict(&p, &MappingMatrix::for_config(&cfg), &images(1, 8, 4)).unwrap();
        assert_eq!(pred.hard_seg, pred.hard_over_seg);
        assert_eq!(pred.f.data(), pred.f_prime.data());
    }

    #[test]
    fn from_arrays_checks_shapes() {
        let cfg = NetConfig::default();
        let p = NetworkParams::<f32>::init(cfg, 0).unwrap();
        assert_eq!(NetworkParams::from_arrays(cfg, p.arrays.clone()).unwrap(), p);
        let mut bad = p.arrays.clone();
        bad.pop();
        assert!(NetworkParams::from_arrays(cfg, bad).is_err());
        let inferred = NetworkParams::infer_config(&p.arrays, 2).unwrap();
        assert_eq!(inferred, cfg);
    }
}
