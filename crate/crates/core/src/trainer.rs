//! Semi-supervised optimization loop: the prototype method, its ablation
//! variants, and the comparison baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{
    augment, batch_images, batch_one_hot, flip_rows, render_all, split, DataError, DatasetSpec, Partition, Sample,
    SplitIndex,
};
use crate::losses::{
    ce_loss, consistency_loss, entropy_min_loss, mi_loss, orth_loss, pseudo_label_loss, total_loss, LossBreakdown,
    LossError, LossTerms, LossWeights,
};
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::network::{
    aggregate_classes, forward_features, over_seg_probs, predict, MappingMatrix, NetConfig, NetworkError, NetworkParams,
};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter '{0}' has no gradient")]
    MissingGradient(String),
    #[error("shape mismatch on '{name}': {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite total loss at epoch {epoch}, step {step}: {breakdown:?}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        breakdown: LossBreakdown,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Format(#[from] crate::format::FormatError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Network(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    Variant1,
    Variant2,
    Variant3,
    Variant4,
    Variant5,
    Ours,
    EntropyMin,
    PseudoLabel,
    MeanTeacher,
    MtOurs,
    FullSup,
}

/// Which of multiple prototypes, the MI term and the orthogonality term a
/// method switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub mp: bool,
    pub mi: bool,
    pub orth: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineTerm {
    EntropyMin,
    PseudoLabel,
    Consistency,
}

impl Method {
    pub const ALL: [Method; 12] = [
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
        Method::MtOurs,
        Method::FullSup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Variant1 => "variant1",
            Method::Variant2 => "variant2",
            Method::Variant3 => "variant3",
            Method::Variant4 => "variant4",
            Method::Variant5 => "variant5",
            Method::Ours => "ours",
            Method::EntropyMin => "entropy_min",
            Method::PseudoLabel => "pseudo_label",
            Method::MeanTeacher => "mean_teacher",
            Method::MtOurs => "mt_ours",
            Method::FullSup => "full_sup",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let (mp, mi, orth) = match self {
            Method::Variant1 => (true, false, false),
            Method::Variant2 => (false, true, false),
            Method::Variant3 => (false, false, true),
            Method::Variant4 => (true, true, false),
            Method::Variant5 => (true, false, true),
            Method::Ours | Method::MtOurs => (true, true, true),
            _ => (false, false, false),
        };
        AblationFlags { mp, mi, orth }
    }

    pub fn baseline_term(self) -> Option<BaselineTerm> {
        match self {
            Method::EntropyMin => Some(BaselineTerm::EntropyMin),
            Method::PseudoLabel => Some(BaselineTerm::PseudoLabel),
            Method::MeanTeacher | Method::MtOurs => Some(BaselineTerm::Consistency),
            _ => None,
        }
    }

    pub fn uses_teacher(self) -> bool {
        self.baseline_term() == Some(BaselineTerm::Consistency)
    }

    pub fn uses_unlabeled(self) -> bool {
        self.flags().mi || self.baseline_term().is_some()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub net: NetConfig,
    pub data: DatasetSpec,
    /// Ignored by `full_sup`, which labels every training image.
    pub num_labeled: usize,
    pub seed: u64,
    pub val_images: usize,
    pub test_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            epochs: 200,
            labeled_batch: 4,
            unlabeled_batch: 8,
            lr: 0.05,
            momentum: 0.9,
            weights: LossWeights::default(),
            net: NetConfig::default(),
            data: DatasetSpec::default(),
            num_labeled: 4,
            seed: 1,
            val_images: 20,
            test_images: 50,
        }
    }
}

impl TrainConfig {
    pub fn flags(&self) -> AblationFlags {
        self.method.flags()
    }

    /// Network actually trained: one prototype per class unless the method
    /// uses multiple prototypes.
    pub fn effective_net(&self) -> NetConfig {
        NetConfig {
            num_classes: self.data.num_classes,
            prototypes_per_class: if self.flags().mp {
                self.net.prototypes_per_class
            } else {
                1
            },
            ..self.net
        }
    }

    pub fn effective_num_labeled(&self) -> usize {
        if self.method == Method::FullSup {
            self.data.num_images
        } else {
            self.num_labeled
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.weights.validate()?;
        self.effective_net().validate()?;
        if self.net.num_classes != self.data.num_classes {
            return Err(TrainError::Config(format!(
                "net.num_classes ({}) differs from data.num_classes ({})",
                self.net.num_classes, self.data.num_classes
            )));
        }
        let checks = [
            (self.epochs == 0, "epochs must be at least 1"),
            (self.labeled_batch == 0, "labeled_batch must be at least 1"),
            (self.unlabeled_batch == 0, "unlabeled_batch must be at least 1"),
            (
                !(self.lr > 0.0 && self.lr.is_finite()),
                "lr must be positive and finite",
            ),
            (!(0.0..1.0).contains(&self.momentum), "momentum must be in [0,1)"),
            (self.val_images == 0, "val_images must be at least 1"),
            (self.test_images == 0, "test_images must be at least 1"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(bad, _)| *bad) {
            return Err(TrainError::Config((*msg).into()));
        }
        let labeled = self.effective_num_labeled();
        if labeled == 0 || labeled > self.data.num_images {
            return Err(TrainError::Config(format!(
                "num_labeled must be in 1..={}, got {labeled}",
                self.data.num_images
            )));
        }
        if self.method.uses_unlabeled() && labeled == self.data.num_images {
            return Err(TrainError::Config(format!(
                "method {} needs unlabeled images but all {} are labeled",
                self.method, labeled
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- optimizer

/// Momentum buffers, one per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element = f32> {
    pub buffers: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        Self {
            buffers: params.arrays.iter().map(|a| vec![T::zero(); a.data.len()]).collect(),
        }
    }
}

/// `v ← m·v + g; p ← p − lr·v` for every array, then clears gradients.
pub fn sgd_step<T: Element>(
    params: &mut NetworkParams<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if state.buffers.len() != params.arrays.len() {
        return Err(TrainError::Config(format!(
            "optimizer holds {} buffers for {} arrays",
            state.buffers.len(),
            params.arrays.len()
        )));
    }
    for (a, v) in params.arrays.iter().zip(&state.buffers) {
        match &a.grad {
            None => return Err(TrainError::MissingGradient(a.name.clone())),
            Some(g) if g.len() != a.data.len() || v.len() != a.data.len() => {
                return Err(TrainError::ShapeMismatch {
                    name: a.name.clone(),
                    left: vec![a.data.len()],
                    right: vec![g.len(), v.len()],
                })
            }
            Some(_) => {}
        }
    }
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    for (a, v) in params.arrays.iter_mut().zip(state.buffers.iter_mut()) {
        let g = a.grad.take().expect("checked above");
        for ((p, v), g) in a.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = m * *v + g;
            *p = *p - lr * *v;
        }
    }
    Ok(())
}

/// Exponential moving average of the student weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTeacher<T: Element = f32> {
    pub params: NetworkParams<T>,
    pub decay: f64,
}

impl<T: Element> EmaTeacher<T> {
    pub fn new(student: &NetworkParams<T>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(TrainError::Config(format!("ema decay must be in [0,1), got {decay}")));
        }
        let mut params = student.clone();
        params.clear_grads();
        Ok(Self { params, decay })
    }
}

/// `t ← α·t + (1−α)·s` elementwise.
pub fn ema_update<T: Element>(teacher: &mut EmaTeacher<T>, student: &NetworkParams<T>) -> Result<()> {
    if teacher.params.arrays.len() != student.arrays.len() {
        return Err(TrainError::Config(format!(
            "teacher has {} arrays, student {}",
            teacher.params.arrays.len(),
            student.arrays.len()
        )));
    }
    for (t, s) in teacher.params.arrays.iter().zip(&student.arrays) {
        if t.shape != s.shape {
            return Err(TrainError::ShapeMismatch {
                name: s.name.clone(),
                left: t.shape.clone(),
                right: s.shape.clone(),
            });
        }
    }
    let a = T::lit(teacher.decay);
    let b = T::lit(1.0 - teacher.decay);
    for (t, s) in teacher.params.arrays.iter_mut().zip(&student.arrays) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

/// Linear warm-up from 0 to 1 over the first `ramp_fraction` of training.
pub fn ramp_weight(epoch: usize, total_epochs: usize, ramp_fraction: f64) -> f64 {
    let ramp_len = ramp_fraction * total_epochs as f64;
    if ramp_len <= 0.0 {
        return 1.0;
    }
    (epoch as f64 / ramp_len).min(1.0)
}

// ---------------------------------------------------------------- one step

/// Mutable state advanced by every optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: NetworkParams<f32>,
    pub optimizer: OptimizerState<f32>,
    pub teacher: Option<EmaTeacher<f32>>,
}

/// Already augmented inputs of one step. `teacher_view` holds a second,
/// independently augmented copy of each unlabeled image and `flip_mismatch`
/// marks the images whose two views differ by a horizontal flip.
#[derive(Debug, Clone, Default)]
pub struct StepBatch {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub teacher_view: Vec<Sample>,
    pub flip_mismatch: Vec<bool>,
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

/// Teacher class probabilities on its own view, flipped back where needed so
/// that they align pixelwise with the student view.
fn teacher_targets(teacher: &EmaTeacher<f32>, mapping: &MappingMatrix, batch: &StepBatch) -> Result<Tensor<f32>> {
    let pred = predict(&teacher.params, mapping, &batch_images(&refs(&batch.teacher_view)))?;
    let shape = pred.f.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let per_image = c * h * w;
    let mut data = pred.f.to_vec();
    for (b, &flip) in batch.flip_mismatch.iter().enumerate() {
        if flip {
            let slot = &mut data[b * per_image..(b + 1) * per_image];
            let flipped = flip_rows(slot, w);
            slot.copy_from_slice(&flipped);
        }
    }
    Ok(Tensor::constant(&shape, data)?)
}

/// Forward, single backward pass, one SGD step, then the EMA update if a
/// teacher exists.
pub fn train_step(
    state: &mut ModelState,
    mapping: &MappingMatrix,
    batch: &StepBatch,
    config: &TrainConfig,
    ramp: f64,
) -> Result<LossBreakdown> {
    let flags = config.flags();
    let method = config.method;
    let c = mapping.num_classes();
    if batch.labeled.is_empty() {
        return Err(TrainError::Config("labeled batch is empty".into()));
    }
    if method.uses_unlabeled() && batch.unlabeled.is_empty() {
        return Err(TrainError::Config(format!(
            "method {method} needs a nonempty unlabeled batch"
        )));
    }
    let bound = state.params.bind(true);
    let y = batch_one_hot::<f32>(&refs(&batch.labeled), c);
    let feats = forward_features(&bound, &batch_images(&refs(&batch.labeled)))?;
    let fp_l = over_seg_probs(&bound, &feats)?;
    let sup = ce_loss(&y, &aggregate_classes(&fp_l, mapping)?)?;

    let mut mi = None;
    let mut baseline_term = None;
    if method.uses_unlabeled() {
        let feats_u = forward_features(&bound, &batch_images(&refs(&batch.unlabeled)))?;
        let fp_u = over_seg_probs(&bound, &feats_u)?;
        if flags.mi {
            let mi_input = if config.weights.mi_includes_labeled {
                concat_batch(&fp_l, &fp_u)?
            } else {
                fp_u.clone()
            };
            mi = Some(mi_loss(&mi_input)?);
        }
        if let Some(kind) = method.baseline_term() {
            let f_u = aggregate_classes(&fp_u, mapping)?;
            baseline_term = Some(match kind {
                BaselineTerm::EntropyMin => entropy_min_loss(&f_u)?,
                BaselineTerm::PseudoLabel => pseudo_label_loss(&f_u, config.weights.pseudo_label_threshold)?,
                BaselineTerm::Consistency => {
                    let teacher = state
                        .teacher
                        .as_ref()
                        .ok_or_else(|| TrainError::Config(format!("method {method} requires a teacher")))?;
                    consistency_loss(&f_u, &teacher_targets(teacher, mapping, batch)?)?
                }
            });
        }
    }
    let orth = if flags.orth {
        Some(orth_loss(bound.head())?)
    } else {
        None
    };
    let terms = LossTerms {
        sup,
        mi,
        orth,
        baseline_term,
    };
    let (total, breakdown) = total_loss(&terms, &config.weights, ramp)?;
    if !breakdown.total.is_finite() {
        return Err(TrainError::NumericalAbort {
            epoch: 0,
            step: 0,
            breakdown,
        });
    }
    total.backward()?;
    state.params.store_grads(&bound);
    sgd_step(&mut state.params, &mut state.optimizer, config.lr, config.momentum)?;
    if let Some(teacher) = state.teacher.as_mut() {
        ema_update(teacher, &state.params)?;
    }
    Ok(breakdown)
}

/// Stacks two `[B, K, H, W]` tensors along the batch axis.
fn concat_batch<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    // Batch concat expressed through channel concat on a [1, B·K, H, W] view.
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    if sa[1..] != sb[1..] {
        return Err(TrainError::ShapeMismatch {
            name: "batch concat".into(),
            left: sa,
            right: sb,
        });
    }
    let va = a.reshape(&[1, sa[0] * sa[1], sa[2], sa[3]])?;
    let vb = b.reshape(&[1, sb[0] * sb[1], sb[2], sb[3]])?;
    Ok(va
        .concat_channels(&vb)?
        .reshape(&[sa[0] + sb[0], sa[1], sa[2], sa[3]])?)
}

// ---------------------------------------------------------------- RNG streams

/// Independent generator streams keyed by purpose. Each epoch reseeds its
/// streams from `(seed, purpose, epoch)`, so resuming at an epoch boundary
/// needs nothing beyond the epoch counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    Split = 1,
    Init = 2,
    LabeledOrder = 3,
    UnlabeledOrder = 4,
    LabeledAug = 5,
    UnlabeledAug = 6,
    TeacherAug = 7,
}

fn stream(seed: u64, purpose: Stream, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 40) | epoch as u64);
    rng
}

fn derived_seed(seed: u64, purpose: Stream) -> u64 {
    stream(seed, purpose, 0).next_u64()
}

// ---------------------------------------------------------------- loop

/// Per-epoch mean losses and validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_dice_per_class: Vec<f64>,
    pub val_mean_dice: f64,
    pub marginal_entropy: f64,
    pub gram_max_offdiag: f64,
}

impl EpochRecord {
    fn from_parts(epoch: usize, losses: LossBreakdown, report: &MetricsReport) -> Self {
        Self {
            epoch,
            losses,
            val_dice_per_class: report.dice_per_class.clone(),
            val_mean_dice: report.mean_dice,
            marginal_entropy: report.marginal_entropy,
            gram_max_offdiag: report.gram_max_offdiag,
        }
    }
}

/// Snapshot of the best validation epoch so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_mean_dice: f64,
    pub params: NetworkParams<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: BestSnapshot,
    pub final_params: NetworkParams<f32>,
    pub history: Vec<EpochRecord>,
}

/// Resumable training run. All randomness is a function of the config, so two
/// trainers built from the same config step through identical states.
pub struct Trainer {
    config: TrainConfig,
    mapping: MappingMatrix,
    train: Vec<Sample>,
    split: SplitIndex,
    val: Vec<Sample>,
    state: ModelState,
    epoch: usize,
    best: Option<BestSnapshot>,
    history: Vec<EpochRecord>,
}

/// Everything needed to continue a run at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerSnapshot {
    pub seed: u64,
    pub epoch: usize,
    pub state: ModelState,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = config.effective_net();
        let train = render_all(&config.data)?;
        let split = training_split(&config)?;
        let val = validation_samples(&config)?;
        let params = NetworkParams::init(net, derived_seed(config.seed, Stream::Init))?;
        let teacher = if config.method.uses_teacher() {
            Some(EmaTeacher::new(&params, config.weights.ema_decay)?)
        } else {
            None
        };
        Ok(Self {
            mapping: MappingMatrix::for_config(&net),
            state: ModelState {
                optimizer: OptimizerState::new(&params),
                params,
                teacher,
            },
            config,
            train,
            split,
            val,
            epoch: 0,
            best: None,
            history: Vec::new(),
        })
    }
}

impl Trainer {
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn mapping(&self) -> &MappingMatrix {
        &self.mapping
    }

    pub fn split(&self) -> &SplitIndex {
        &self.split
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn steps_per_epoch(&self) -> usize {
        let (l, u) = (self.split.labeled_ids.len(), self.split.unlabeled_ids.len());
        if self.config.method == Method::FullSup || u == 0 {
            l.div_ceil(self.config.labeled_batch.min(l))
        } else {
            u.div_ceil(self.config.unlabeled_batch)
        }
    }

    /// Runs one epoch of steps followed by validation.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(TrainError::Config(format!(
                "all {} epochs already ran",
                self.config.epochs
            )));
        }
        let (cfg, e) = (&self.config, self.epoch);
        let seed = cfg.seed;
        let ramp = ramp_weight(e, cfg.epochs, cfg.weights.ramp_fraction);
        let sigma = cfg.data.noise_sigma;
        let mut lab_order = self.split.labeled_ids.clone();
        lab_order.shuffle(&mut stream(seed, Stream::LabeledOrder, e));
        let mut unl_order = self.split.unlabeled_ids.clone();
        unl_order.shuffle(&mut stream(seed, Stream::UnlabeledOrder, e));
        let mut lab_aug = stream(seed, Stream::LabeledAug, e);
        let mut unl_aug = stream(seed, Stream::UnlabeledAug, e);
        let mut teacher_aug = stream(seed, Stream::TeacherAug, e);
        let lb = cfg.labeled_batch.min(lab_order.len());
        let ub = cfg.unlabeled_batch;
        let steps = self.steps_per_epoch();

        let mut sum = LossBreakdown::default();
        for step in 0..steps {
            let mut batch = StepBatch::default();
            for j in 0..lb {
                let id = lab_order[(step * lb + j) % lab_order.len()];
                batch.labeled.push(augment(&self.train[id], sigma, &mut lab_aug).0);
            }
            if cfg.method.uses_unlabeled() {
                let lo = (step * ub) % unl_order.len();
                let hi = (lo + ub).min(unl_order.len());
                for &id in &unl_order[lo..hi] {
                    let (student_view, f_s) = augment(&self.train[id], sigma, &mut unl_aug);
                    batch.unlabeled.push(student_view);
                    if cfg.method.uses_teacher() {
                        let (teacher_view, f_t) = augment(&self.train[id], sigma, &mut teacher_aug);
                        batch.teacher_view.push(teacher_view);
                        batch.flip_mismatch.push(f_s != f_t);
                    }
                }
            }
            let b = train_step(&mut self.state, &self.mapping, &batch, cfg, ramp).map_err(|err| match err {
                TrainError::NumericalAbort { breakdown, .. } => TrainError::NumericalAbort {
                    epoch: e,
                    step,
                    breakdown,
                },
                other => other,
            })?;
            sum.sup += b.sup;
            sum.mi += b.mi;
            sum.orth += b.orth;
            sum.baseline_term += b.baseline_term;
            sum.total += b.total;
        }
        let n = steps as f64;
        let losses = LossBreakdown {
            sup: sum.sup / n,
            mi: sum.mi / n,
            orth: sum.orth / n,
            baseline_term: sum.baseline_term / n,
            total: sum.total / n,
        };
        let report = evaluate(&self.state.params, &self.mapping, &self.val)?;
        let improved = self.best.as_ref().is_none_or(|b| report.mean_dice > b.val_mean_dice);
        if improved {
            self.best = Some(BestSnapshot {
                epoch: e,
                val_mean_dice: report.mean_dice,
                params: self.state.params.clone(),
            });
        }
        self.history.push(EpochRecord::from_parts(e, losses, &report));
        self.epoch += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run_to_end(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while !self.is_finished() {
            on_epoch(self.run_epoch()?);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            seed: self.config.seed,
            epoch: self.epoch,
            state: self.state.clone(),
            best: self.best.clone(),
            history: self.history.clone(),
        }
    }

    /// Rebuilds the run from `config` and continues from `snapshot`.
    pub fn resume(config: TrainConfig, snapshot: TrainerSnapshot) -> Result<Self> {
        let mut trainer = Trainer::new(config)?;
        let cfg = &trainer.config;
        if snapshot.seed != cfg.seed {
            return Err(TrainError::Config(format!(
                "checkpoint seed {} differs from config seed {}",
                snapshot.seed, cfg.seed
            )));
        }
        if snapshot.epoch > cfg.epochs || snapshot.history.len() != snapshot.epoch {
            return Err(TrainError::Config(format!(
                "checkpoint at epoch {} with {} history rows does not fit a {}-epoch run",
                snapshot.epoch,
                snapshot.history.len(),
                cfg.epochs
            )));
        }
        let fresh = &trainer.state;
        check_like(&fresh.params, &snapshot.state.params)?;
        if let Some(b) = &snapshot.best {
            check_like(&fresh.params, &b.params)?;
        }
        match (&fresh.teacher, &snapshot.state.teacher) {
            (Some(t), Some(s)) => check_like(&t.params, &s.params)?,
            (None, None) => {}
            _ => {
                return Err(TrainError::Config(format!(
                    "checkpoint teacher presence does not match method {}",
                    cfg.method
                )))
            }
        }
        let buffers_ok = snapshot.state.optimizer.buffers.len() == fresh.params.arrays.len()
            && snapshot
                .state
                .optimizer
                .buffers
                .iter()
                .zip(&fresh.params.arrays)
                .all(|(b, a)| b.len() == a.data.len());
        if !buffers_ok {
            return Err(TrainError::Config(
                "checkpoint momentum buffers do not match the network".into(),
            ));
        }
        trainer.state = snapshot.state;
        trainer.epoch = snapshot.epoch;
        trainer.best = snapshot.best;
        trainer.history = snapshot.history;
        Ok(trainer)
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let best = self
            .best
            .ok_or_else(|| TrainError::Config("no epoch has run yet".into()))?;
        Ok(TrainOutcome {
            best,
            final_params: self.state.params,
            history: self.history,
        })
    }
}

fn check_like(expected: &NetworkParams<f32>, got: &NetworkParams<f32>) -> Result<()> {
    if expected.config != got.config || expected.arrays.len() != got.arrays.len() {
        return Err(TrainError::Config(format!(
            "checkpoint network {:?} does not match config network {:?}",
            got.config, expected.config
        )));
    }
    for (e, g) in expected.arrays.iter().zip(&got.arrays) {
        if e.name != g.name || e.shape != g.shape {
            return Err(TrainError::ShapeMismatch {
                name: g.name.clone(),
                left: e.shape.clone(),
                right: g.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Trains for the configured number of epochs and returns the parameters of
/// the best validation epoch (earliest on ties).
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    trainer.run_to_end(|_| {})?;
    trainer.finish()
}

/// Labeled/unlabeled split a run with this config trains on.
pub fn training_split(config: &TrainConfig) -> Result<SplitIndex> {
    Ok(split(
        &config.data,
        config.effective_num_labeled(),
        derived_seed(config.seed, Stream::Split),
    )?)
}

/// Validation images for a config.
pub fn validation_samples(config: &TrainConfig) -> Result<Vec<Sample>> {
    Ok(render_all(
        &config.data.partition(Partition::Validation, config.val_images),
    )?)
}

/// Held-out test images for a config.
pub fn test_samples(config: &TrainConfig) -> Result<Vec<Sample>> {
    Ok(render_all(&config.data.partition(Partition::Test, config.test_images))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ParamArray;

    fn toy_params(values: &[f64]) -> NetworkParams<f64> {
        NetworkParams {
            config: NetConfig::default(),
            arrays: vec![ParamArray::new("w", vec![values.len()], values.to_vec())],
        }
    }

    fn with_grad(mut p: NetworkParams<f64>, g: f64) -> NetworkParams<f64> {
        for a in p.arrays.iter_mut() {
            a.grad = Some(vec![g; a.data.len()]);
        }
        p
    }

    #[test]
    fn table_flags() {
        let f = |m: Method| {
            let x = m.flags();
            (x.mp, x.mi, x.orth)
        };
        assert_eq!(f(Method::Baseline), (false, false, false));
        assert_eq!(f(Method::Variant1), (true, false, false));
        assert_eq!(f(Method::Variant2), (false, true, false));
        assert_eq!(f(Method::Variant3), (false, false, true));
        assert_eq!(f(Method::Variant4), (true, true, false));
        assert_eq!(f(Method::Variant5), (true, false, true));
        assert_eq!(f(Method::Ours), (true, true, true));
        assert_eq!(f(Method::MtOurs), (true, true, true));
        for m in [
            Method::EntropyMin,
            Method::PseudoLabel,
            Method::MeanTeacher,
            Method::FullSup,
        ] {
            assert_eq!(f(m), (false, false, false));
        }
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("variant6".parse::<Method>().is_err());
    }

    #[test]
    fn prototypes_forced_to_one_without_mp() {
        let cfg = TrainConfig {
            method: Method::Variant2,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_net().prototypes_per_class, 1);
        let cfg = TrainConfig {
            method: Method::Variant1,
            ..cfg
        };
        assert_eq!(cfg.effective_net().prototypes_per_class, 3);
    }

    #[test]
    fn sgd_plain_descent() {
        let mut p = toy_params(&[1.0, 2.0]);
        let mut st = OptimizerState::new(&p);
        for k in 1..=3 {
            p = with_grad(p, 0.5);
            sgd_step(&mut p, &mut st, 0.1, 0.0).unwrap();
            assert!((p.arrays[0].data[0] - (1.0 - 0.05 * k as f64)).abs() < 1e-12);
            assert!(p.arrays[0].grad.is_none());
        }
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = with_grad(toy_params(&[1.0, -3.0]), 0.0);
        let mut st = OptimizerState::new(&p);
        sgd_step(&mut p, &mut st, 0.1, 0.9).unwrap();
        assert_eq!(p.arrays[0].data, vec![1.0, -3.0]);
    }

    #[test]
    fn sgd_two_momentum_steps() {
        let (lr, g) = (0.1, 2.0);
        let mut p = toy_params(&[0.0]);
        let mut st = OptimizerState::new(&p);
        for _ in 0..2 {
            p = with_grad(p, g);
            sgd_step(&mut p, &mut st, lr, 0.9).unwrap();
        }
        // v1 = g, v2 = 0.9 g + g
        assert!((p.arrays[0].data[0] + lr * g * (1.0 + 1.9)).abs() < 1e-12);
    }

    #[test]
    fn sgd_requires_gradients() {
        let mut p = toy_params(&[1.0]);
        let mut st = OptimizerState::new(&p);
        assert!(matches!(
            sgd_step(&mut p, &mut st, 0.1, 0.0),
            Err(TrainError::MissingGradient(name)) if name == "w"
        ));
    }

    #[test]
    fn ema_examples() {
        let student = toy_params(&[1.0, 1.0]);
        let mut t = EmaTeacher::new(&toy_params(&[0.0, 0.0]), 0.0).unwrap();
        ema_update(&mut t, &student).unwrap();
        assert_eq!(t.params.arrays[0].data, student.arrays[0].data);

        let mut t = EmaTeacher::new(&toy_params(&[0.0, 0.0]), 0.99).unwrap();
        ema_update(&mut t, &student).unwrap();
        assert!((t.params.arrays[0].data[0] - 0.01).abs() < 1e-15);
        for k in 2..=50 {
            ema_update(&mut t, &student).unwrap();
            let gap = (t.params.arrays[0].data[0] - 1.0).abs();
            assert!((gap - 0.99f64.powi(k)).abs() < 1e-12);
        }
        assert!(EmaTeacher::new(&student, 1.0).is_err());
        let mut t = EmaTeacher::new(&toy_params(&[0.0]), 0.5).unwrap();
        assert!(matches!(
            ema_update(&mut t, &student),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ramp_examples() {
        assert_eq!(ramp_weight(0, 100, 0.2), 0.0);
        assert_eq!(ramp_weight(20, 100, 0.2), 1.0);
        assert_eq!(ramp_weight(99, 100, 0.2), 1.0);
        assert!((ramp_weight(10, 100, 0.2) - 0.5).abs() <= 1.0 / 20.0);
        assert_eq!(ramp_weight(0, 100, 0.0), 1.0);
    }

    fn small_config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 2,
            net: NetConfig {
                base_channels: 2,
                ..NetConfig::default()
            },
            data: DatasetSpec {
                image_size: 8,
                num_images: 12,
                ..DatasetSpec::default()
            },
            num_labeled: 4,
            unlabeled_batch: 4,
            val_images: 4,
            test_images: 4,
            ..TrainConfig::default()
        }
    }

    fn step_once(method: Method) -> LossBreakdown {
        let mut trainer = Trainer::new(small_config(method)).unwrap();
        trainer.run_epoch().unwrap().losses
    }

    #[test]
    fn baseline_breakdown_has_only_sup() {
        let b = step_once(Method::Baseline);
        assert_eq!((b.mi, b.orth, b.baseline_term), (0.0, 0.0, 0.0));
        assert_eq!(b.total, b.sup);
    }

    #[test]
    fn ours_populates_every_term() {
        let b = step_once(Method::Ours);
        assert!(b.sup > 0.0 && b.orth > 0.0);
        assert!(b.mi < 0.0 && b.mi >= -(6f64).ln());
    }

    #[test]
    fn steps_are_deterministic() {
        for m in [Method::Ours, Method::MeanTeacher, Method::PseudoLabel] {
            assert_eq!(step_once(m), step_once(m));
        }
    }

    #[test]
    fn steps_per_epoch_rules() {
        let t = Trainer::new(small_config(Method::Ours)).unwrap();
        assert_eq!(t.steps_per_epoch(), 2);
        let t = Trainer::new(TrainConfig {
            labeled_batch: 5,
            ..small_config(Method::FullSup)
        })
        .unwrap();
        assert_eq!(t.split().labeled_ids.len(), 12);
        assert_eq!(t.steps_per_epoch(), 3);
    }

    #[test]
    fn teacher_only_for_consistency_methods() {
        for m in Method::ALL {
            let t = Trainer::new(small_config(m)).unwrap();
            assert_eq!(t.state().teacher.is_some(), m.uses_teacher(), "{m}");
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                epochs: 0,
                ..small_config(Method::Ours)
            },
            TrainConfig {
                num_labeled: 13,
                ..small_config(Method::Ours)
            },
            TrainConfig {
                num_labeled: 12,
                ..small_config(Method::Ours)
            },
            TrainConfig {
                momentum: 1.0,
                ..small_config(Method::Ours)
            },
        ];
        for cfg in bad {
            assert!(matches!(Trainer::new(cfg), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn finished_run_rejects_more_epochs() {
        let mut t = Trainer::new(TrainConfig {
            epochs: 1,
            ..small_config(Method::Baseline)
        })
        .unwrap();
        t.run_epoch().unwrap();
        assert!(t.run_epoch().is_err());
        let out = t.finish().unwrap();
        assert_eq!(out.best.epoch, 0);
        assert_eq!(out.history.len(), 1);
    }
}
