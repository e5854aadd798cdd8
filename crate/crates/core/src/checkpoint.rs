//! Parameter files and resumable training checkpoints.
//!
//! A parameter file is a plain PSEG container. A checkpoint is a PSEG
//! container whose arrays carry a section prefix (`param.`, `momentum.`,
//! `teacher.`, `best.`), closed by a zero-length name and followed by a
//! little-endian trailer:
//!
//! ```text
//! "CKPT" u32 version
//! u32 base_channels, u32 num_classes, u32 prototypes_per_class
//! u64 seed, u64 epoch
//! u8 has_teacher [f64 decay]
//! u8 has_best [u64 best_epoch, f64 best_val_mean_dice]
//! u32 history_len, then per epoch:
//!   u64 epoch, 5 × f64 losses, u32 C, C × f64 dice, f64 mean dice,
//!   f64 marginal entropy, f64 gram max off-diagonal
//! ```
//!
//! Generator streams are re-derived from `(seed, epoch)` at every epoch
//! boundary, so the seed and epoch counter are the serialized RNG state.

use std::path::Path;

use crate::format::{
    read_file, read_pseg_arrays, write_file, write_pseg_array, write_pseg_header, Cursor, FormatError, NamedArray,
    Result,
};
use crate::losses::LossBreakdown;
use crate::network::{NetConfig, NetworkParams, ParamArray, HEAD_NAME};
use crate::trainer::{BestSnapshot, EmaTeacher, EpochRecord, ModelState, OptimizerState, TrainerSnapshot};

const TRAILER_MAGIC: &[u8; 4] = b"CKPT";
const TRAILER_VERSION: u32 = 1;

pub fn params_to_arrays(params: &NetworkParams<f32>, prefix: &str) -> Vec<NamedArray> {
    params
        .arrays
        .iter()
        .map(|a| NamedArray {
            name: format!("{prefix}{}", a.name),
            dims: a.shape.clone(),
            data: a.data.clone(),
        })
        .collect()
}

fn params_from_named(config: NetConfig, arrays: Vec<NamedArray>, what: &str) -> Result<NetworkParams<f32>> {
    let arrays = arrays
        .into_iter()
        .map(|a| ParamArray::new(a.name, a.dims, a.data))
        .collect();
    NetworkParams::from_arrays(config, arrays).map_err(|e| FormatError::Invalid {
        field: what.to_string(),
        detail: e.to_string(),
    })
}

pub fn encode_params(params: &NetworkParams<f32>) -> Result<Vec<u8>> {
    crate::format::encode_pseg(&params_to_arrays(params, ""))
}

/// Decodes a parameter file; the network shape is inferred from the arrays
/// given the number of real classes.
pub fn decode_params(bytes: &[u8], num_classes: usize) -> Result<NetworkParams<f32>> {
    let named = crate::format::decode_pseg(bytes)?;
    let arrays: Vec<ParamArray<f32>> = named
        .into_iter()
        .map(|a| ParamArray::new(a.name, a.dims, a.data))
        .collect();
    let config = NetworkParams::infer_config(&arrays, num_classes).map_err(|e| FormatError::Invalid {
        field: "parameters".into(),
        detail: e.to_string(),
    })?;
    NetworkParams::from_arrays(config, arrays).map_err(|e| FormatError::Invalid {
        field: "parameters".into(),
        detail: e.to_string(),
    })
}

pub fn save_params(path: impl AsRef<Path>, params: &NetworkParams<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode_params(params)?)
}

pub fn load_params(path: impl AsRef<Path>, num_classes: usize) -> Result<NetworkParams<f32>> {
    decode_params(&read_file(path.as_ref())?, num_classes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(snap: &TrainerSnapshot) -> Result<Vec<u8>> {
    let state = &snap.state;
    let mut arrays = params_to_arrays(&state.params, "param.");
    arrays.extend(
        state
            .params
            .arrays
            .iter()
            .zip(&state.optimizer.buffers)
            .map(|(a, v)| NamedArray {
                name: format!("momentum.{}", a.name),
                dims: a.shape.clone(),
                data: v.clone(),
            }),
    );
    if let Some(t) = &state.teacher {
        arrays.extend(params_to_arrays(&t.params, "teacher."));
    }
    if let Some(b) = &snap.best {
        arrays.extend(params_to_arrays(&b.params, "best."));
    }

    let mut out = Vec::new();
    write_pseg_header(&mut out);
    for a in &arrays {
        write_pseg_array(&mut out, a)?;
    }
    out.extend_from_slice(&0u16.to_le_bytes());

    out.extend_from_slice(TRAILER_MAGIC);
    put_u32(&mut out, TRAILER_VERSION);
    let net = state.params.config;
    for v in [net.base_channels, net.num_classes, net.prototypes_per_class] {
        put_u32(&mut out, v as u32);
    }
    put_u64(&mut out, snap.seed);
    put_u64(&mut out, snap.epoch as u64);
    match &state.teacher {
        Some(t) => {
            out.push(1);
            put_f64(&mut out, t.decay);
        }
        None => out.push(0),
    }
    match &snap.best {
        Some(b) => {
            out.push(1);
            put_u64(&mut out, b.epoch as u64);
            put_f64(&mut out, b.val_mean_dice);
        }
        None => out.push(0),
    }
    put_u32(&mut out, snap.history.len() as u32);
    for r in &snap.history {
        put_u64(&mut out, r.epoch as u64);
        let l = &r.losses;
        for v in [l.sup, l.mi, l.orth, l.baseline_term, l.total] {
            put_f64(&mut out, v);
        }
        put_u32(&mut out, r.val_dice_per_class.len() as u32);
        r.val_dice_per_class.iter().for_each(|&d| put_f64(&mut out, d));
        for v in [r.val_mean_dice, r.marginal_entropy, r.gram_max_offdiag] {
            put_f64(&mut out, v);
        }
    }
    Ok(out)
}

/// Moves the arrays named `<prefix><param name>` out of `pool`, in network
/// order.
fn take_section(pool: &mut Vec<NamedArray>, prefix: &str, names: &[String]) -> Result<Vec<NamedArray>> {
    names
        .iter()
        .map(|n| {
            let full = format!("{prefix}{n}");
            let idx = pool
                .iter()
                .position(|a| a.name == full)
                .ok_or_else(|| FormatError::Invalid {
                    field: format!("array '{full}'"),
                    detail: "missing from checkpoint".into(),
                })?;
            let mut a = pool.remove(idx);
            a.name = n.clone();
            Ok(a)
        })
        .collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainerSnapshot> {
    let mut c = Cursor::new(bytes);
    let mut pool = read_pseg_arrays(&mut c)?;
    if c.bytes(4, "checkpoint trailer magic")? != TRAILER_MAGIC {
        return Err(FormatError::Invalid {
            field: "checkpoint trailer".into(),
            detail: "missing CKPT marker after the array section".into(),
        });
    }
    let version = c.u32("checkpoint trailer version")?;
    if version != TRAILER_VERSION {
        return Err(FormatError::Version {
            expected: TRAILER_VERSION,
            found: version,
        });
    }
    let net = NetConfig {
        base_channels: c.u32("checkpoint base_channels")? as usize,
        num_classes: c.u32("checkpoint num_classes")? as usize,
        prototypes_per_class: c.u32("checkpoint prototypes_per_class")? as usize,
    };
    let seed = c.u64("checkpoint seed")?;
    let epoch = c.u64("checkpoint epoch")? as usize;
    let decay = match c.u8("checkpoint teacher flag")? {
        0 => None,
        _ => Some(c.f64("checkpoint teacher decay")?),
    };
    let best_meta = match c.u8("checkpoint best flag")? {
        0 => None,
        _ => Some((c.u64("checkpoint best epoch")? as usize, c.f64("checkpoint best dice")?)),
    };
    let n_hist = c.u32("checkpoint history length")? as usize;
    let mut history = Vec::with_capacity(n_hist.min(1 << 16));
    for i in 0..n_hist {
        let field = |name: &str| format!("history row {i} {name}");
        let epoch = c.u64(&field("epoch"))? as usize;
        let mut l = [0.0; 5];
        for v in l.iter_mut() {
            *v = c.f64(&field("losses"))?;
        }
        let n = c.u32(&field("class count"))? as usize;
        if n > 16 {
            return Err(FormatError::Invalid {
                field: field("class count"),
                detail: format!("{n} is implausible"),
            });
        }
        let dice = (0..n).map(|_| c.f64(&field("dice"))).collect::<Result<Vec<_>>>()?;
        history.push(EpochRecord {
            epoch,
            losses: LossBreakdown {
                sup: l[0],
                mi: l[1],
                orth: l[2],
                baseline_term: l[3],
                total: l[4],
            },
            val_dice_per_class: dice,
            val_mean_dice: c.f64(&field("mean dice"))?,
            marginal_entropy: c.f64(&field("marginal entropy"))?,
            gram_max_offdiag: c.f64(&field("gram"))?,
        });
    }
    if !c.is_empty() {
        return Err(FormatError::Invalid {
            field: "checkpoint trailer".into(),
            detail: "trailing bytes after history".into(),
        });
    }

    let mut names: Vec<String> = net
        .conv_layers()
        .iter()
        .flat_map(|(layer, _, _)| [format!("{layer}.weight"), format!("{layer}.bias")])
        .collect();
    names.push(HEAD_NAME.to_string());
    let params = params_from_named(net, take_section(&mut pool, "param.", &names)?, "param section")?;
    let buffers = take_section(&mut pool, "momentum.", &names)?
        .into_iter()
        .map(|a| a.data)
        .collect();
    let teacher = match decay {
        Some(decay) => Some(EmaTeacher {
            params: params_from_named(net, take_section(&mut pool, "teacher.", &names)?, "teacher section")?,
            decay,
        }),
        None => None,
    };
    let best = match best_meta {
        Some((epoch, val_mean_dice)) => Some(BestSnapshot {
            epoch,
            val_mean_dice,
            params: params_from_named(net, take_section(&mut pool, "best.", &names)?, "best section")?,
        }),
        None => None,
    };
    if let Some(extra) = pool.first() {
        return Err(FormatError::Invalid {
            field: format!("array '{}'", extra.name),
            detail: "not part of any checkpoint section".into(),
        });
    }
    Ok(TrainerSnapshot {
        seed,
        epoch,
        state: ModelState {
            params,
            optimizer: OptimizerState { buffers },
            teacher,
        },
        best,
        history,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, snap: &TrainerSnapshot) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(snap)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainerSnapshot> {
    decode_checkpoint(&read_file(path.as_ref())?)
}
