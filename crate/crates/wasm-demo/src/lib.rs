//! Browser bindings for three interactive views: the synthetic data, the two
//! regularizers on hand-built inputs, and a small training run that shows
//! how prototypes split each class.

use wasm_bindgen::prelude::*;

use protoseg::data::{render_sample, DatasetSpec, Sample};
use protoseg::losses::{entropy, entropy_of_distribution, mi_loss, orth_loss};
use protoseg::network::{predict, MappingMatrix};
use protoseg::tensor::Tensor;
use protoseg::trainer::{validation_samples, Method, TrainConfig, Trainer};

/// Distinct hues for prototypes; class `k` owns a contiguous block of them.
const PALETTE: [[u8; 3]; 12] = [
    [40, 40, 48],
    [90, 90, 110],
    [140, 140, 160],
    [230, 85, 60],
    [250, 170, 50],
    [200, 60, 140],
    [60, 160, 230],
    [70, 200, 120],
    [150, 110, 240],
    [240, 220, 90],
    [110, 220, 220],
    [200, 200, 200],
];

const CLASS_COLORS: [[u8; 3]; 3] = [[30, 30, 36], [230, 85, 60], [60, 160, 230]];

fn gray_rgba(image: &[f32]) -> Vec<u8> {
    image
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn labels_rgba(labels: impl Iterator<Item = usize>, colors: &[[u8; 3]]) -> Vec<u8> {
    labels
        .flat_map(|l| {
            let [r, g, b] = colors[l % colors.len()];
            [r, g, b, 255]
        })
        .collect()
}

/// Prototype colors grouped by class: background prototypes in grays, each
/// foreground class in its own run of hues.
fn prototype_colors(num_classes: usize, per_class: usize) -> Vec<[u8; 3]> {
    let mut out = Vec::new();
    for c in 0..num_classes {
        for j in 0..per_class {
            out.push(match c {
                0 => PALETTE[j % 3],
                _ => PALETTE[3 + ((c - 1) * per_class + j) % 9],
            });
        }
    }
    out
}

/// Image and mask of one synthetic sample as RGBA buffers.
pub fn sample_views(spec: &DatasetSpec, index: usize) -> Result<(Vec<u8>, Vec<u8>), String> {
    let s = render_sample(spec, index).map_err(|e| e.to_string())?;
    let mask = s.mask.as_ref().expect("rendered samples carry masks");
    Ok((
        gray_rgba(&s.image),
        labels_rgba(mask.iter().map(|&k| k as usize), &CLASS_COLORS),
    ))
}

/// `[mi, mean pixel entropy, marginal entropy, -ln C']` for `8·C'` pixels
/// spread over `C' = prototypes` prototypes. `balance` moves the pixel assignment from
/// all-on-prototype-0 (0) to even (1); `sharpness` moves each pixel's
/// prediction from uniform (0) to one-hot (1).
pub fn mi_terms(prototypes: usize, balance: f64, sharpness: f64) -> Result<Vec<f64>, String> {
    if prototypes < 2 {
        return Err("need at least two prototypes".into());
    }
    let (balance, sharpness) = (balance.clamp(0.0, 1.0), sharpness.clamp(0.0, 1.0));
    let k = prototypes;
    let n = 8 * k;
    let mut data = vec![0.0; k * n];
    for p in 0..n {
        // Fraction `balance` of the pixels is dealt round-robin, the rest go to 0.
        let target = if (p as f64) < balance * n as f64 { p % k } else { 0 };
        for j in 0..k {
            let one_hot = if j == target { 1.0 } else { 0.0 };
            data[j * n + p] = sharpness * one_hot + (1.0 - sharpness) / k as f64;
        }
    }
    let f = Tensor::constant(&[1, k, k, 8], data).map_err(|e| e.to_string())?;
    let marginal = f
        .reduce(protoseg::tensor::Reduction::Mean, &[0, 2, 3])
        .map_err(|e| e.to_string())?;
    let value = |r: Result<Tensor<f64>, protoseg::losses::LossError>| r.map(|t| t.item()).map_err(|e| e.to_string());
    Ok(vec![
        value(mi_loss(&f))?,
        value(entropy(&f))?,
        value(entropy_of_distribution(&marginal))?,
        -(k as f64).ln(),
    ])
}

/// Orthogonality penalty of two 2-d prototypes at `angle_deg` apart.
pub fn orth_value(angle_deg: f64, norm_a: f64, norm_b: f64) -> Result<f64, String> {
    let th = angle_deg.to_radians();
    // Columns are the prototypes: a = (|a|, 0), b = |b|(cos θ, sin θ).
    let w = vec![norm_a, norm_b * th.cos(), 0.0, norm_b * th.sin()];
    let w = Tensor::constant(&[2, 2], w).map_err(|e| e.to_string())?;
    orth_loss(&w).map(|t| t.item()).map_err(|e| e.to_string())
}

/// Small in-browser training run on 16×16 images.
pub struct Session {
    trainer: Trainer,
    val: Vec<Sample>,
    colors: Vec<[u8; 3]>,
}

impl Session {
    pub fn new(method: &str, prototypes_per_class: usize, seed: u64, epochs: usize) -> Result<Self, String> {
        let method: Method = method
            .parse()
            .map_err(|e: protoseg::trainer::TrainError| e.to_string())?;
        let mut config = TrainConfig {
            method,
            epochs: epochs.max(1),
            seed,
            val_images: 6,
            test_images: 1,
            ..TrainConfig::default()
        };
        config.net.prototypes_per_class = prototypes_per_class;
        config.data.image_size = 16;
        config.data.num_images = 48;
        let val = validation_samples(&config).map_err(|e| e.to_string())?;
        let trainer = Trainer::new(config).map_err(|e| e.to_string())?;
        let net = trainer.config().effective_net();
        Ok(Self {
            colors: prototype_colors(net.num_classes, net.prototypes_per_class),
            trainer,
            val,
        })
    }

    /// Runs one epoch; returns `[epoch, sup, mi, orth, total, val dice,
    /// marginal entropy, gram max off-diagonal]`, or `None` once finished.
    pub fn step(&mut self) -> Result<Option<Vec<f64>>, String> {
        if self.trainer.is_finished() {
            return Ok(None);
        }
        let r = self.trainer.run_epoch().map_err(|e| e.to_string())?;
        let l = r.losses;
        Ok(Some(vec![
            r.epoch as f64,
            l.sup,
            l.mi,
            l.orth,
            l.total,
            r.val_mean_dice,
            r.marginal_entropy,
            r.gram_max_offdiag,
        ]))
    }

    pub fn image_size(&self) -> usize {
        self.trainer.config().data.image_size
    }

    pub fn num_val(&self) -> usize {
        self.val.len()
    }

    /// `[image, truth, class prediction, prototype prediction]` RGBA panels
    /// for validation image `index`, concatenated.
    pub fn panels(&self, index: usize) -> Result<Vec<u8>, String> {
        let smp = self
            .val
            .get(index)
            .ok_or_else(|| format!("no validation image {index}"))?;
        let params = &self.trainer.state().params;
        let mapping = MappingMatrix::for_config(&params.config);
        let images = protoseg::data::batch_images::<f32>(&[smp]);
        let pred = predict(params, &mapping, &images).map_err(|e| e.to_string())?;
        let mut out = gray_rgba(&smp.image);
        let truth = smp.mask.as_ref().expect("validation samples carry masks");
        out.extend(labels_rgba(truth.iter().map(|&k| k as usize), &CLASS_COLORS));
        out.extend(labels_rgba(pred.hard_seg.iter().copied(), &CLASS_COLORS));
        out.extend(labels_rgba(pred.hard_over_seg.iter().copied(), &self.colors));
        Ok(out)
    }

    /// Flat RGB triples of the prototype legend.
    pub fn legend(&self) -> Vec<u8> {
        self.colors.iter().flatten().copied().collect()
    }
}

// ---------------------------------------------------------------- bindings

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// `[image RGBA, mask RGBA]` of sample `index`, concatenated.
#[wasm_bindgen(js_name = renderSample)]
pub fn render_sample_js(
    index: usize,
    data_seed: u32,
    image_size: usize,
    modes_per_class: usize,
    num_classes: usize,
    noise_sigma: f64,
) -> Result<Vec<u8>, JsError> {
    let spec = DatasetSpec {
        image_size,
        num_images: index + 1,
        num_classes,
        modes_per_class,
        noise_sigma,
        seed: data_seed as u64,
    };
    let (mut img, mask) = sample_views(&spec, index).map_err(js)?;
    img.extend(mask);
    Ok(img)
}

#[wasm_bindgen(js_name = miTerms)]
pub fn mi_terms_js(prototypes: usize, balance: f64, sharpness: f64) -> Result<Vec<f64>, JsError> {
    mi_terms(prototypes, balance, sharpness).map_err(js)
}

#[wasm_bindgen(js_name = orthValue)]
pub fn orth_value_js(angle_deg: f64, norm_a: f64, norm_b: f64) -> Result<f64, JsError> {
    orth_value(angle_deg, norm_a, norm_b).map_err(js)
}

#[wasm_bindgen(js_name = TrainingSession)]
pub struct TrainingSession(Session);

#[wasm_bindgen(js_class = TrainingSession)]
impl TrainingSession {
    #[wasm_bindgen(constructor)]
    pub fn new(
        method: &str,
        prototypes_per_class: usize,
        seed: u32,
        epochs: usize,
    ) -> Result<TrainingSession, JsError> {
        Session::new(method, prototypes_per_class, seed as u64, epochs)
            .map(Self)
            .map_err(js)
    }

    /// Empty once the run is finished.
    pub fn step(&mut self) -> Result<Vec<f64>, JsError> {
        Ok(self.0.step().map_err(js)?.unwrap_or_default())
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> usize {
        self.0.image_size()
    }

    #[wasm_bindgen(js_name = numVal)]
    pub fn num_val(&self) -> usize {
        self.0.num_val()
    }

    pub fn panels(&self, index: usize) -> Result<Vec<u8>, JsError> {
        self.0.panels(index).map_err(js)
    }

    pub fn legend(&self) -> Vec<u8> {
        self.0.legend()
    }
}
