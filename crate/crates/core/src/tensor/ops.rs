//! Differentiable primitives.
//!
//! Image tensors use the `[B, C, H, W]` layout. Binary elementwise ops require
//! identical shapes; there is no broadcasting.

use super::{strides, Backward, Element, Result, Tensor, TensorError};
use crate::parallel::{for_each_chunk, map_indices};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

fn dims4<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected rank-4 [B,C,H,W], got {:?}", t.shape()),
        }),
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub(crate) struct Identity;

impl<T: Element> Backward<T> for Identity {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

// ---------------------------------------------------------------- conv2d

struct Conv2d {
    dims: [usize; 4],
    cout: usize,
}

/// Copies `planes` row-major `h×w` planes into zero-bordered planes of
/// `(h+2)×(w+2)`, so every 3×3 tap becomes a constant offset.
fn pad_planes<T: Element>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let pw = w + 2;
    let mut out = vec![T::zero(); planes * (h + 2) * pw];
    for (dst, plane) in out.chunks_exact_mut((h + 2) * pw).zip(src.chunks_exact(h * w)) {
        for (y, row) in plane.chunks_exact(w).enumerate() {
            dst[(y + 1) * pw + 1..][..w].copy_from_slice(row);
        }
    }
    out
}

/// Copies planes into rows of width `w+2` whose two extra columns are zero.
fn widen_planes<T: Element>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let pw = w + 2;
    let mut out = vec![T::zero(); planes * h * pw];
    for (dst, plane) in out.chunks_exact_mut(h * pw).zip(src.chunks_exact(h * w)) {
        for (y, row) in plane.chunks_exact(w).enumerate() {
            dst[y * pw..][..w].copy_from_slice(row);
        }
    }
    out
}

#[inline]
fn axpy<T: Element>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// Dot product with eight interleaved partial sums (vectorizable, and still
/// a fixed summation order).
#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ar.iter().zip(br) {
        s = s + x * y;
    }
    s
}

/// Drops the two padding columns of an `h×(w+2)` accumulator into `dst`.
fn narrow_into<T: Element>(dst: &mut [T], acc: &[T], w: usize) {
    for (d, a) in dst.chunks_exact_mut(w).zip(acc.chunks_exact(w + 2)) {
        d.copy_from_slice(&a[..w]);
    }
}

impl<T: Element> Backward<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, parents: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, cin, h, w] = self.dims;
        let cout = self.cout;
        let pw = w + 2;
        // Accumulators run over `h×(w+2)`; the last two cells would read past
        // the padded plane and belong to a padding column anyway.
        let span = h * pw - 2;
        let (input, kernel, bias) = (&parents[0], &parents[1], &parents[2]);
        let k = kernel.data();

        let grad_input = input.requires_grad().then(|| {
            let gp = pad_planes(g, b * cout, h, w);
            let mut gi = vec![T::zero(); b * cin * h * w];
            for_each_chunk(&mut gi, h * w, |plane, dst| {
                let (bi, ci) = (plane / cin, plane % cin);
                let mut acc = vec![T::zero(); h * pw];
                for co in 0..cout {
                    let gplane = &gp[(bi * cout + co) * (h + 2) * pw..][..(h + 2) * pw];
                    let kbase = (co * cin + ci) * 9;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let off = (2 - ky) * pw + (2 - kx);
                            axpy(&mut acc[..span], k[kbase + ky * 3 + kx], &gplane[off..off + span]);
                        }
                    }
                }
                narrow_into(dst, &acc, w);
            });
            gi
        });

        let grad_kernel = kernel.requires_grad().then(|| {
            let xp = pad_planes(input.data(), b * cin, h, w);
            let gw = widen_planes(g, b * cout, h, w);
            let per_pair = map_indices(cout * cin, |pair| {
                let (co, ci) = (pair / cin, pair % cin);
                let mut acc = [T::zero(); 9];
                for bi in 0..b {
                    let gplane = &gw[(bi * cout + co) * h * pw..][..span];
                    let xplane = &xp[(bi * cin + ci) * (h + 2) * pw..][..(h + 2) * pw];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let off = ky * pw + kx;
                            acc[ky * 3 + kx] = acc[ky * 3 + kx] + dot(gplane, &xplane[off..off + span]);
                        }
                    }
                }
                acc
            });
            per_pair.into_iter().flatten().collect()
        });

        let grad_bias = bias.requires_grad().then(|| {
            let hw = h * w;
            (0..cout)
                .map(|co| {
                    (0..b).fold(T::zero(), |s, bi| {
                        s + g[(bi * cout + co) * hw..][..hw].iter().copied().sum::<T>()
                    })
                })
                .collect()
        });

        vec![grad_input, grad_kernel, grad_bias]
    }
}

impl<T: Element> Tensor<T> {
    /// 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&self, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, cin, h, w] = dims4(self, "conv2d")?;
        let [cout, kcin, kh, kw] = dims4(kernel, "conv2d").map_err(|_| TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel must be [Cout,Cin,3,3], got {:?}", kernel.shape()),
        })?;
        if kh != 3 || kw != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel spatial size must be 3x3, got {kh}x{kw}"),
            });
        }
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {cin} channels, kernel expects {kcin}"),
            });
        }
        if bias.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias must be [{cout}], got {:?}", bias.shape()),
            });
        }
        let pw = w + 2;
        let span = h * pw - 2;
        let xp = pad_planes(self.data(), b * cin, h, w);
        let k = kernel.data();
        let bv = bias.data();
        let mut out = vec![T::zero(); b * cout * h * w];
        for_each_chunk(&mut out, h * w, |plane, dst| {
            let (bi, co) = (plane / cout, plane % cout);
            let mut acc = vec![bv[co]; h * pw];
            for ci in 0..cin {
                let xplane = &xp[(bi * cin + ci) * (h + 2) * pw..][..(h + 2) * pw];
                let kbase = (co * cin + ci) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let off = ky * pw + kx;
                        axpy(&mut acc[..span], k[kbase + ky * 3 + kx], &xplane[off..off + span]);
                    }
                }
            }
            narrow_into(dst, &acc, w);
        });
        Ok(Tensor::from_op(
            vec![b, cout, h, w],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(Conv2d {
                dims: [b, cin, h, w],
                cout,
            }),
        ))
    }
}

// ---------------------------------------------------------------- relu

struct Relu;

impl<T: Element> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = parents[0].data();
        vec![Some(
            x.iter()
                .zip(g)
                .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                .collect(),
        )]
    }
}

impl<T: Element> Tensor<T> {
    pub fn relu(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x.max(T::zero())).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], Box::new(Relu))
    }
}

// ---------------------------------------------------------------- pooling / upsampling

struct MaxPool {
    argmax: Vec<usize>,
}

impl<T: Element> Backward<T> for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool2x2"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gi = vec![T::zero(); parents[0].numel()];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            gi[src] = gi[src] + gv;
        }
        vec![Some(gi)]
    }
}

struct Upsample {
    dims: [usize; 4],
}

impl<T: Element> Backward<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample_nearest2x2"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, c, h, w] = self.dims;
        let ow = 2 * w;
        let mut gi = vec![T::zero(); b * c * h * w];
        for plane in 0..b * c {
            let src = &g[plane * 4 * h * w..][..4 * h * w];
            let dst = &mut gi[plane * h * w..][..h * w];
            for y in 0..2 * h {
                for x in 0..ow {
                    let d = &mut dst[(y / 2) * w + x / 2];
                    *d = *d + src[y * ow + x];
                }
            }
        }
        vec![Some(gi)]
    }
}

impl<T: Element> Tensor<T> {
    /// Non-overlapping 2×2 max. Ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2x2(&self) -> Result<Tensor<T>> {
        let [b, c, h, w] = dims4(self, "maxpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "maxpool2x2",
                detail: format!("spatial size {h}x{w} is not even"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(MaxPool { argmax }),
        ))
    }

    pub fn upsample_nearest2x2(&self) -> Result<Tensor<T>> {
        let [b, c, h, w] = dims4(self, "upsample_nearest2x2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let src = &x[plane * h * w..][..h * w];
            for y in 0..oh {
                for xo in 0..ow {
                    out.push(src[(y / 2) * w + xo / 2]);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![b, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(Upsample { dims: [b, c, h, w] }),
        ))
    }
}

// ---------------------------------------------------------------- concat

struct Concat {
    b: usize,
    c1: usize,
    c2: usize,
    hw: usize,
}

impl<T: Element> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let Concat { b, c1, c2, hw } = *self;
        let mut ga = Vec::with_capacity(b * c1 * hw);
        let mut gb = Vec::with_capacity(b * c2 * hw);
        for bi in 0..b {
            let row = &g[bi * (c1 + c2) * hw..][..(c1 + c2) * hw];
            ga.extend_from_slice(&row[..c1 * hw]);
            gb.extend_from_slice(&row[c1 * hw..]);
        }
        vec![Some(ga), Some(gb)]
    }
}

impl<T: Element> Tensor<T> {
    /// Channel-axis concatenation, `self` first.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, c1, h, w] = dims4(self, "concat_channels")?;
        let [b2, c2, h2, w2] = dims4(other, "concat_channels")?;
        if (b, h, w) != (b2, h2, w2) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * (c1 + c2) * hw);
        for bi in 0..b {
            out.extend_from_slice(&self.data()[bi * c1 * hw..][..c1 * hw]);
            out.extend_from_slice(&other.data()[bi * c2 * hw..][..c2 * hw]);
        }
        Ok(Tensor::from_op(
            vec![b, c1 + c2, h, w],
            out,
            vec![self.clone(), other.clone()],
            Box::new(Concat { b, c1, c2, hw }),
        ))
    }
}

// ---------------------------------------------------------------- channel_linear

struct ChannelLinear {
    dims: [usize; 4],
    k: usize,
}

impl<T: Element> Backward<T> for ChannelLinear {
    fn name(&self) -> &'static str {
        "channel_linear"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, n, h, w] = self.dims;
        let (k, hw) = (self.k, h * w);
        let (feat, weight) = (&parents[0], &parents[1]);
        let x = feat.data();
        let wm = weight.data();
        let gx = feat.requires_grad().then(|| {
            let mut gx = vec![T::zero(); b * n * hw];
            for_each_chunk(&mut gx, hw, |plane, dst| {
                let (bi, ni) = (plane / n, plane % n);
                for ki in 0..k {
                    let wv = wm[ni * k + ki];
                    let src = &g[(bi * k + ki) * hw..][..hw];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o = *o + wv * s;
                    }
                }
            });
            gx
        });
        let gw = weight.requires_grad().then(|| {
            map_indices(n * k, |idx| {
                let (ni, ki) = (idx / k, idx % k);
                (0..b).fold(T::zero(), |s, bi| {
                    s + dot(&x[(bi * n + ni) * hw..][..hw], &g[(bi * k + ki) * hw..][..hw])
                })
            })
        });
        vec![gx, gw]
    }
}

impl<T: Element> Tensor<T> {
    /// Per-pixel linear map over channels without bias:
    /// `out[b,k,h,w] = Σ_n weight[n,k] · self[b,n,h,w]` (a 1×1 convolution).
    pub fn channel_linear(&self, weight: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, n, h, w] = dims4(self, "channel_linear")?;
        let k = match *weight.shape() {
            [wn, k] if wn == n => k,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_linear",
                    detail: format!("features have {n} channels, weight is {:?}", weight.shape()),
                })
            }
        };
        let hw = h * w;
        let x = self.data();
        let wm = weight.data();
        let mut out = vec![T::zero(); b * k * hw];
        for_each_chunk(&mut out, hw, |plane, dst| {
            let (bi, ki) = (plane / k, plane % k);
            for ni in 0..n {
                let wv = wm[ni * k + ki];
                let src = &x[(bi * n + ni) * hw..][..hw];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o = *o + wv * s;
                }
            }
        });
        Ok(Tensor::from_op(
            vec![b, k, h, w],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(ChannelLinear { dims: [b, n, h, w], k }),
        ))
    }
}

// ---------------------------------------------------------------- softmax

struct Softmax {
    dims: [usize; 4],
}

impl<T: Element> Backward<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }
    fn backward(&self, _: &[Tensor<T>], y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let [b, k, h, w] = self.dims;
        let hw = h * w;
        let mut gz = vec![T::zero(); y.len()];
        for bi in 0..b {
            let base = bi * k * hw;
            for p in 0..hw {
                let inner = (0..k).fold(T::zero(), |s, ki| {
                    let i = base + ki * hw + p;
                    s + g[i] * y[i]
                });
                for ki in 0..k {
                    let i = base + ki * hw + p;
                    gz[i] = y[i] * (g[i] - inner);
                }
            }
        }
        vec![Some(gz)]
    }
}

impl<T: Element> Tensor<T> {
    /// Numerically stable softmax over the channel axis of a `[B,K,H,W]` tensor.
    pub fn softmax_channels(&self) -> Result<Tensor<T>> {
        let [b, k, h, w] = dims4(self, "softmax_channels")?;
        if k < 2 {
            return Err(TensorError::Invalid {
                op: "softmax_channels",
                detail: format!("need at least 2 channels, got {k}"),
            });
        }
        let z = self.data();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax_channels"));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); z.len()];
        for bi in 0..b {
            let base = bi * k * hw;
            for p in 0..hw {
                let m = (0..k).fold(T::neg_infinity(), |m, ki| m.max(z[base + ki * hw + p]));
                let mut s = T::zero();
                for ki in 0..k {
                    let e = (z[base + ki * hw + p] - m).exp();
                    out[base + ki * hw + p] = e;
                    s = s + e;
                }
                for ki in 0..k {
                    let o = &mut out[base + ki * hw + p];
                    *o = *o / s;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(Softmax { dims: [b, k, h, w] }),
        ))
    }
}

// ---------------------------------------------------------------- reduce

struct Reduce {
    map: Vec<usize>,
    scale: f64,
}

impl<T: Element> Backward<T> for Reduce {
    fn name(&self) -> &'static str {
        "reduce"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let s = T::lit(self.scale);
        vec![Some(self.map.iter().map(|&o| g[o] * s).collect())]
    }
}

impl<T: Element> Tensor<T> {
    /// Sum or mean over the given axes. Reduced axes are dropped from the
    /// output shape; reducing every axis yields a rank-0 scalar.
    pub fn reduce(&self, kind: Reduction, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::InvalidAxis {
                    op: "reduce",
                    axis: a,
                    rank,
                });
            }
            reduced[a] = true;
        }
        let shape = self.shape();
        let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect();
        let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| shape[i]).product();
        let out_strides = strides(&out_shape);
        // stride of each input axis inside the output (0 for reduced axes)
        let mut axis_stride = vec![0usize; rank];
        let mut j = 0;
        for i in 0..rank {
            if !reduced[i] {
                axis_stride[i] = out_strides[j];
                j += 1;
            }
        }
        let n = self.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut o = 0usize;
        for _ in 0..n {
            map.push(o);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                o += axis_stride[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                o -= axis_stride[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); out_len];
        for (&v, &o) in self.data().iter().zip(&map) {
            out[o] = out[o] + v;
        }
        let scale = match kind {
            Reduction::Sum => 1.0,
            Reduction::Mean => {
                let c = T::lit(count as f64);
                out.iter_mut().for_each(|v| *v = *v / c);
                1.0 / count as f64
            }
        };
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(Reduce { map, scale }),
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(Reduction::Sum, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(Reduction::Mean, &axes).expect("all axes are valid")
    }
}

// ---------------------------------------------------------------- elementwise

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Element> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&parents[0], &parents[1]);
        match self {
            Binary::Add => vec![
                a.requires_grad().then(|| g.to_vec()),
                b.requires_grad().then(|| g.to_vec()),
            ],
            Binary::Sub => vec![
                a.requires_grad().then(|| g.to_vec()),
                b.requires_grad().then(|| g.iter().map(|&v| -v).collect()),
            ],
            Binary::Mul => vec![
                a.requires_grad()
                    .then(|| g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect()),
                b.requires_grad()
                    .then(|| g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect()),
            ],
        }
    }
}

struct Scale(f64);

impl<T: Element> Backward<T> for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let c = T::lit(self.0);
        vec![Some(g.iter().map(|&v| v * c).collect())]
    }
}

struct Square;

impl<T: Element> Backward<T> for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let two = T::lit(2.0);
        vec![Some(
            parents[0].data().iter().zip(g).map(|(&x, &gv)| two * x * gv).collect(),
        )]
    }
}

struct LogClamped(f64);

impl<T: Element> Backward<T> for LogClamped {
    fn name(&self) -> &'static str {
        "log_clamped"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let eps = T::lit(self.0);
        vec![Some(
            parents[0]
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > eps { gv / x } else { T::zero() })
                .collect(),
        )]
    }
}

impl<T: Element> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
        same_shape(self, other, <Binary as Backward<T>>::name(&op))?;
        let f = |a: T, b: T| match op {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        };
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(op),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor<T> {
        let cv = T::lit(c);
        let out = self.data().iter().map(|&x| x * cv).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], Box::new(Scale(c)))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x * x).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], Box::new(Square))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&self, eps: f64) -> Tensor<T> {
        let e = T::lit(eps);
        let out = self.data().iter().map(|&x| x.max(e).ln()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(LogClamped(eps)),
        )
    }
}

// ---------------------------------------------------------------- matrices

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_raw<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..][..n];
            for (o, &bv) in out[i * n..][..n].iter_mut().zip(row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl<T: Element> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, parents: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let MatMul { m, k, n } = *self;
        let (a, b) = (&parents[0], &parents[1]);
        let ga = a
            .requires_grad()
            .then(|| matmul_raw(g, &transpose_raw(b.data(), k, n), m, n, k));
        let gb = b
            .requires_grad()
            .then(|| matmul_raw(&transpose_raw(a.data(), m, k), g, k, m, n));
        vec![ga, gb]
    }
}

struct Transpose {
    rows: usize,
    cols: usize,
}

impl<T: Element> Backward<T> for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[Tensor<T>], _: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(transpose_raw(g, self.cols, self.rows))]
    }
}

impl<T: Element> Tensor<T> {
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{:?} x {:?}", self.shape(), other.shape()),
                })
            }
        };
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(MatMul { m, k, n }),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        let [rows, cols] = *self.shape() else {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("expected a matrix, got {:?}", self.shape()),
            });
        };
        Ok(Tensor::from_op(
            vec![cols, rows],
            transpose_raw(self.data(), rows, cols),
            vec![self.clone()],
            Box::new(Transpose { rows, cols }),
        ))
    }
}
