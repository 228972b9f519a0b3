use serde::{Deserialize, Serialize};

use super::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that the output extent is `ceil(input / stride)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    groups: usize,
    stride: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn cig(&self) -> usize {
        self.cin / self.groups
    }

    fn coutg(&self) -> usize {
        self.cout / self.groups
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn kcols(&self) -> usize {
        self.k * self.k * self.cig()
    }

    /// Gathers group `g` receptive fields into a `[rows, k*k*cig]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], g: usize, col: &mut [T]) {
        let (cig, kcols) = (self.cig(), self.kcols());
        col.iter_mut().for_each(|v| *v = T::zero());
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin + g * cig;
                            let dst = row * kcols + (ky * self.k + kx) * cig;
                            col[dst..dst + cig].copy_from_slice(&x[src..src + cig]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a `[rows, k*k*cig]` matrix back onto the input layout.
    fn col2im<T: Scalar>(&self, col: &[T], g: usize, gx: &mut [T]) {
        let (cig, kcols) = (self.cig(), self.kcols());
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin + g * cig;
                            let src = row * kcols + (ky * self.k + kx) * cig;
                            for (d, &s) in gx[dst..dst + cig].iter_mut().zip(&col[src..src + cig]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn out_extent(input: usize, span: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + span).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if span > input {
                return Err(Error::dim(format!("valid convolution: kernel span {span} exceeds extent {input}")));
            }
            Ok(((input - span) / stride + 1, 0))
        }
    }
}

fn dims4(t: &Tensor<impl Scalar>, op: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::dim(format!("{op}: expected a 4-d NHWC tensor, got {s:?}"))),
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-d convolution on `[N,H,W,Cin]` with weights `[K,K,Cin/groups,Cout]`.
    ///
    /// `groups == Cin` gives a depthwise convolution; `dilation` spaces the taps.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: Padding,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, h, w, cin] = dims4(self, "conv2d")?;
        let [k, k2, cig, cout] = dims4(weight, "conv2d weight")?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::dim(format!("conv2d: kernel must be square and odd, got {k}x{k2}")));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups {
            return Err(Error::dim(format!(
                "conv2d: {cin} input channels, {groups} groups, weight {:?}",
                weight.shape()
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::arg("conv2d: stride and dilation must be >= 1"));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim(format!("conv2d: bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let span = dilation * (k - 1) + 1;
        let (ho, pad_top) = out_extent(h, span, stride, padding)?;
        let (wo, pad_left) = out_extent(w, span, stride, padding)?;
        let geom = ConvGeom { n, h, w, cin, k, cout, groups, stride, dilation, ho, wo, pad_top, pad_left };

        let (rows, kcols, coutg) = (geom.rows(), geom.kcols(), geom.coutg());
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = bias {
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(b.data());
            }
        }
        let mut col = vec![T::zero(); rows * kcols];
        for g in 0..groups {
            geom.im2col(self.data(), g, &mut col);
            gemm(
                T::one(),
                MatRef::new(&col, rows, kcols),
                MatRef::at(weight.data(), g * coutg, kcols, coutg, cout, 1),
                T::one(),
                MatMut::at(&mut out, g * coutg, rows, coutg, cout, 1),
            );
        }
        drop(col);

        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Tensor::from_op("conv2d", out, vec![n, ho, wo, cout], &inputs, move |ctx| {
            let (x, wt) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let want_x = ctx.inputs[0].requires_grad();
            let want_w = ctx.inputs[1].requires_grad();
            let mut gx = vec![T::zero(); if want_x { x.len() } else { 0 }];
            let mut gw = vec![T::zero(); if want_w { wt.len() } else { 0 }];
            let mut col = vec![T::zero(); rows * kcols];
            for g in 0..geom.groups {
                let gy = MatRef::at(ctx.grad, g * coutg, rows, coutg, cout, 1);
                if want_w {
                    geom.im2col(x, g, &mut col);
                    gemm(
                        T::one(),
                        MatRef::new(&col, rows, kcols).t(),
                        gy,
                        T::zero(),
                        MatMut::at(&mut gw, g * coutg, kcols, coutg, cout, 1),
                    );
                }
                if want_x {
                    gemm(
                        T::one(),
                        gy,
                        MatRef::at(wt, g * coutg, kcols, coutg, cout, 1).t(),
                        T::zero(),
                        MatMut::new(&mut col, rows, kcols),
                    );
                    geom.col2im(&col, g, &mut gx);
                }
            }
            let mut grads = vec![want_x.then_some(gx), want_w.then_some(gw)];
            if has_bias {
                let mut gb = vec![T::zero(); cout];
                for row in ctx.grad.chunks(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                grads.push(Some(gb));
            }
            grads
        })
    }

    /// Stride-2, 2x2 transposed convolution: `[N,H,W,C]` to `[N,2H,2W,Cout]`
    /// with weights `[2,2,Cout,C]`.
    pub fn conv_transpose2x2(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Self> {
        let [n, h, w, c] = dims4(self, "conv_transpose2x2")?;
        let [k1, k2, cout, c2] = dims4(weight, "conv_transpose2x2 weight")?;
        if k1 != 2 || k2 != 2 || c2 != c {
            return Err(Error::dim(format!(
                "conv_transpose2x2: weight {:?} for {c} input channels",
                weight.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim(format!("conv_transpose2x2: bias {:?}", b.shape())));
            }
        }
        let rows = n * h * w;
        let zc = 4 * cout;
        // Z[pos, tap * cout + co] = sum_c X[pos, c] * w[tap, co, c]
        let mut z = vec![T::zero(); rows * zc];
        gemm(
            T::one(),
            MatRef::new(self.data(), rows, c),
            MatRef::at(weight.data(), 0, c, zc, 1, c),
            T::zero(),
            MatMut::new(&mut z, rows, zc),
        );
        let (ho, wo) = (2 * h, 2 * w);
        let target = move |b: usize, i: usize, j: usize, tap: usize| {
            let (a, bb) = (tap / 2, tap % 2);
            ((b * ho + 2 * i + a) * wo + 2 * j + bb) * cout
        };
        let mut out = vec![T::zero(); n * ho * wo * cout];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let zrow = &z[((b * h + i) * w + j) * zc..][..zc];
                    for tap in 0..4 {
                        let dst = &mut out[target(b, i, j, tap)..][..cout];
                        dst.copy_from_slice(&zrow[tap * cout..][..cout]);
                        if let Some(bias) = bias {
                            dst.iter_mut().zip(bias.data()).for_each(|(v, &bv)| *v += bv);
                        }
                    }
                }
            }
        }
        drop(z);

        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Tensor::from_op("conv_transpose2x2", out, vec![n, ho, wo, cout], &inputs, move |ctx| {
            let (x, wt) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gz = vec![T::zero(); rows * zc];
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let zrow = &mut gz[((b * h + i) * w + j) * zc..][..zc];
                        for tap in 0..4 {
                            zrow[tap * cout..][..cout].copy_from_slice(&ctx.grad[target(b, i, j, tap)..][..cout]);
                        }
                    }
                }
            }
            let mut gx = vec![T::zero(); x.len()];
            gemm(
                T::one(),
                MatRef::new(&gz, rows, zc),
                MatRef::at(wt, 0, c, zc, 1, c).t(),
                T::zero(),
                MatMut::new(&mut gx, rows, c),
            );
            let mut gw = vec![T::zero(); wt.len()];
            gemm(
                T::one(),
                MatRef::new(x, rows, c).t(),
                MatRef::new(&gz, rows, zc),
                T::zero(),
                MatMut::at(&mut gw, 0, c, zc, 1, c),
            );
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                let mut gb = vec![T::zero(); cout];
                for row in ctx.grad.chunks(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                grads.push(Some(gb));
            }
            grads
        })
    }

    /// 2x2 max pooling with stride 2. The gradient goes to the first maximal
    /// element of each window in row-major order.
    pub fn max_pool2x2(&self) -> Result<Self> {
        let [n, h, w, c] = dims4(self, "max_pool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("max_pool2x2: odd spatial extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut out = Vec::with_capacity(n * ho * wo * c);
        let mut argmax = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    for ch in 0..c {
                        let mut best_idx = ((b * h + 2 * i) * w + 2 * j) * c + ch;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * i + dy) * w + 2 * j + dx) * c + ch;
                            if x[idx] > x[best_idx] {
                                best_idx = idx;
                            }
                        }
                        out.push(x[best_idx]);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let len = x.len();
        Tensor::from_op("max_pool2x2", out, vec![n, ho, wo, c], &[self], move |ctx| {
            let mut gx = vec![T::zero(); len];
            for (&idx, &g) in argmax.iter().zip(ctx.grad) {
                gx[idx] += g;
            }
            vec![Some(gx)]
        })
    }

    /// Per-channel mean over H and W: `[N,H,W,C]` to `[N,C]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let [n, h, w, c] = dims4(self, "global_avg_pool")?;
        self.reshape(&[n, h * w, c])?.mean_axis(1)
    }

    /// Depthwise 1-d convolution along the token axis with a per-sample kernel.
    ///
    /// `self` is `[B, tokens, d]`, `kernel` is `[B, K, d]` with odd `K`; zero
    /// padding keeps the token count.
    pub fn token_conv1d(&self, kernel: &Tensor<T>) -> Result<Self> {
        let (b, n, d) = match self.shape() {
            &[b, n, d] => (b, n, d),
            s => return Err(Error::dim(format!("token_conv1d: expected [B,tokens,d], got {s:?}"))),
        };
        let k = match kernel.shape() {
            &[kb, k, kd] if kb == b && kd == d && k % 2 == 1 => k,
            s => return Err(Error::dim(format!("token_conv1d: kernel {s:?} for input {:?}", self.shape()))),
        };
        let r = k / 2;
        let (x, kw) = (self.data(), kernel.data());
        let mut out = vec![T::zero(); b * n * d];
        for s in 0..b {
            for t in 0..n {
                let dst = &mut out[(s * n + t) * d..][..d];
                for j in 0..k {
                    let src_t = t as isize + j as isize - r as isize;
                    if src_t < 0 || src_t >= n as isize {
                        continue;
                    }
                    let src = &x[(s * n + src_t as usize) * d..][..d];
                    let tap = &kw[(s * k + j) * d..][..d];
                    for ((o, &xv), &kv) in dst.iter_mut().zip(src).zip(tap) {
                        *o += xv * kv;
                    }
                }
            }
        }
        Tensor::from_op("token_conv1d", out, vec![b, n, d], &[self, kernel], move |ctx| {
            let (x, kw) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gx = vec![T::zero(); x.len()];
            let mut gk = vec![T::zero(); kw.len()];
            for s in 0..b {
                for t in 0..n {
                    let g = &ctx.grad[(s * n + t) * d..][..d];
                    for j in 0..k {
                        let src_t = t as isize + j as isize - r as isize;
                        if src_t < 0 || src_t >= n as isize {
                            continue;
                        }
                        let xo = (s * n + src_t as usize) * d;
                        let ko = (s * k + j) * d;
                        for c in 0..d {
                            gx[xo + c] += g[c] * kw[ko + c];
                            gk[ko + c] += g[c] * x[xo + c];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gk)]
        })
    }
}
