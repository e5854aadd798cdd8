//! Forward values checked against naive reference loops written here, and
//! serialization round trips over generated inputs.

use proptest::prelude::*;

use protoseg::config::{dump_config, parse_config};
use protoseg::format::TensorFile;
use protoseg::losses::{ce_loss, mi_loss, orth_loss};
use protoseg::metrics::dice;
use protoseg::network::{aggregate_classes, MappingMatrix};
use protoseg::tensor::Tensor;
use protoseg::trainer::{Method, TrainConfig};

fn naive_conv(x: &[f64], k: &[f64], bias: &[f64], [b, cin, cout, h, w]: [usize; 5]) -> Vec<f64> {
    let mut out = vec![0.0; b * cout * h * w];
    for bi in 0..b {
        for co in 0..cout {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for di in -1..=1isize {
                            for dj in -1..=1isize {
                                let (y, xx) = (i + di, j + dj);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let kv = k[((co * cin + ci) * 3 + (di + 1) as usize) * 3 + (dj + 1) as usize];
                                s += kv * x[((bi * cin + ci) * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[((bi * cout + co) * h + i as usize) * w + j as usize] = s;
                }
            }
        }
    }
    out
}

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

type ConvCase = (usize, usize, usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>);

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..7, 1usize..7).prop_flat_map(|(b, cin, cout, h, w)| {
        (
            Just(b),
            Just(cin),
            Just(cout),
            Just(h),
            Just(w),
            vec_of(b * cin * h * w),
            vec_of(cout * cin * 9),
            vec_of(cout),
        )
    })
}

fn probs(k: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), n).prop_map(move |cols| {
        // cols[p][c] normalised per pixel, laid out channel-major.
        let mut out = vec![0.0; k * n];
        for (p, col) in cols.iter().enumerate() {
            let z: f64 = col.iter().sum();
            for (c, v) in col.iter().enumerate() {
                out[c * n + p] = v / z;
            }
        }
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_loops((b, cin, cout, h, w, x, k, bias) in conv_case()) {
        let xt = Tensor::constant(&[b, cin, h, w], x.clone()).unwrap();
        let kt = Tensor::constant(&[cout, cin, 3, 3], k.clone()).unwrap();
        let bt = Tensor::constant(&[cout], bias.clone()).unwrap();
        let got = xt.conv2d(&kt, &bt).unwrap();
        let want = naive_conv(&x, &k, &bias, [b, cin, cout, h, w]);
        prop_assert_eq!(got.shape(), &[b, cout, h, w]);
        for (g, e) in got.data().iter().zip(&want) {
            prop_assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()), "{} vs {}", g, e);
        }
    }

    #[test]
    fn softmax_matches_direct_formula(logits in vec_of(3 * 5)) {
        let t = Tensor::constant(&[1, 3, 1, 5], logits.clone()).unwrap();
        let s = t.softmax_channels().unwrap();
        for p in 0..5 {
            let z: f64 = (0..3).map(|c| logits[c * 5 + p].exp()).sum();
            for c in 0..3 {
                let want = logits[c * 5 + p].exp() / z;
                prop_assert!((s.data()[c * 5 + p] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mi_loss_matches_direct_formula(f in probs(4, 6)) {
        let n = 6.0;
        let cond: f64 = f.iter().map(|p| -p * p.ln()).sum::<f64>() / n;
        let marg: f64 = (0..4)
            .map(|c| {
                let q = f[c * 6..(c + 1) * 6].iter().sum::<f64>() / n;
                -q * q.ln()
            })
            .sum();
        let got = mi_loss(&Tensor::constant(&[1, 4, 2, 3], f).unwrap()).unwrap().item();
        prop_assert!((got - (cond - marg)).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_matches_direct_formula(f in probs(3, 4), labels in prop::collection::vec(0usize..3, 4)) {
        let mut y = vec![0.0; 12];
        for (p, &l) in labels.iter().enumerate() {
            y[l * 4 + p] = 1.0;
        }
        let want = -labels.iter().enumerate().map(|(p, &l)| f[l * 4 + p].ln()).sum::<f64>() / 4.0;
        let got = ce_loss(
            &Tensor::constant(&[1, 3, 2, 2], y).unwrap(),
            &Tensor::constant(&[1, 3, 2, 2], f).unwrap(),
        )
        .unwrap()
        .item();
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn orth_loss_matches_gram_loops(w in vec_of(4 * 3)) {
        let mut want = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let g: f64 = (0..4).map(|n| w[n * 3 + a] * w[n * 3 + b]).sum();
                let d = g - if a == b { 1.0 } else { 0.0 };
                want += d * d;
            }
        }
        let got = orth_loss(&Tensor::constant(&[4, 3], w).unwrap()).unwrap().item();
        prop_assert!((got - want).abs() < 1e-10 * (1.0 + want));
    }

    #[test]
    fn aggregation_sums_owned_prototypes(f in probs(6, 3)) {
        let m = MappingMatrix::build(2, 3);
        let out = aggregate_classes(&Tensor::constant(&[1, 6, 1, 3], f.clone()).unwrap(), &m).unwrap();
        for p in 0..3 {
            for c in 0..2 {
                let want: f64 = (0..6).filter(|&j| m.class_of(j) == c).map(|j| f[j * 3 + p]).sum();
                prop_assert!((out.data()[c * 3 + p] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dice_matches_set_definition(pred in prop::collection::vec(0u8..3, 1..50), seed in any::<u64>()) {
        let truth: Vec<u8> = pred.iter().enumerate().map(|(i, &p)| ((p as u64 + seed.rotate_left(i as u32)) % 3) as u8).collect();
        for k in 0..3u8 {
            let ps: std::collections::HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == k).collect();
            let ts: std::collections::HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
            let want = if ps.is_empty() && ts.is_empty() {
                1.0
            } else {
                2.0 * ps.intersection(&ts).count() as f64 / (ps.len() + ts.len()) as f64
            };
            prop_assert_eq!(dice(&pred, &truth, k).unwrap(), want);
        }
    }

    #[test]
    fn sseg_round_trip(dims in prop::collection::vec(1usize..5, 0..=4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n as u32).map(|i| f32::from_bits(i.wrapping_mul(2_654_435_761).wrapping_add(seed))).collect();
        let f = TensorFile::f32(dims.clone(), data.clone());
        let back = TensorFile::decode(&f.encode().unwrap()).unwrap();
        prop_assert_eq!(back.dims, dims);
        match back.data {
            protoseg::format::ArrayData::F32(v) => {
                prop_assert!(v.iter().map(|x| x.to_bits()).eq(data.iter().map(|x| x.to_bits())));
            }
            _ => prop_assert!(false, "dtype changed"),
        }
    }

    #[test]
    fn config_dump_round_trip(
        method in 0usize..Method::ALL.len(),
        lr in 1e-4f64..1.0,
        lambda1 in 0.0f64..1.0,
        seed in any::<u64>(),
        p in 1usize..5,
    ) {
        let mut c = TrainConfig { method: Method::ALL[method], lr, seed, ..TrainConfig::default() };
        c.weights.lambda1 = lambda1;
        c.net.prototypes_per_class = p;
        prop_assert_eq!(parse_config(&dump_config(&c), TrainConfig::default()).unwrap(), c);
    }
}

#[test]
fn pooling_and_upsampling_against_loops() {
    let x: Vec<f64> = (0..2 * 4 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
    let t = Tensor::constant(&[1, 2, 4, 6], x.clone()).unwrap();
    let pooled = t.maxpool2x2().unwrap();
    assert_eq!(pooled.shape(), &[1, 2, 2, 3]);
    for c in 0..2 {
        for i in 0..2 {
            for j in 0..3 {
                let want = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| x[(c * 4 + 2 * i + a) * 6 + 2 * j + b])
                    .fold(f64::MIN, f64::max);
                assert_eq!(pooled.data()[(c * 2 + i) * 3 + j], want);
            }
        }
    }
    let up = pooled.upsample_nearest2x2().unwrap();
    assert_eq!(up.shape(), &[1, 2, 4, 6]);
    for c in 0..2 {
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(
                    up.data()[(c * 4 + i) * 6 + j],
                    pooled.data()[(c * 2 + i / 2) * 3 + j / 2]
                );
            }
        }
    }
}
