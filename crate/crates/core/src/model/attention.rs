use super::Forward;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Candidate token-axis kernels `[M, K, d]` and the gate mapping `d -> M`
/// that mixes them per input.
pub struct DynamicKernelBank<'a, T: Scalar> {
    pub kernels: &'a Tensor<T>,
    pub gate_w: &'a Tensor<T>,
    pub gate_b: &'a Tensor<T>,
}

impl<'a, T: Scalar> DynamicKernelBank<'a, T> {
    fn from_store(fw: &Forward<'a, T>, prefix: &str) -> Result<Self> {
        Ok(DynamicKernelBank {
            kernels: fw.param(&format!("{prefix}.kernels"))?,
            gate_w: fw.param(&format!("{prefix}.gate.w"))?,
            gate_b: fw.param(&format!("{prefix}.gate.b"))?,
        })
    }
}

/// Input-conditioned depthwise convolution along the token axis of
/// `[B, n, d]`. Returns the output and the `[B, M]` mixing gate.
pub fn dynamic_conv<T: Scalar>(tokens: &Tensor<T>, bank: &DynamicKernelBank<'_, T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, d) = match tokens.shape() {
        &[b, _, d] => (b, d),
        s => return Err(Error::dim(format!("dynamic_conv: expected [B,n,d] tokens, got {s:?}"))),
    };
    let (m, k) = match bank.kernels.shape() {
        &[m, k, kd] if kd == d && k % 2 == 1 => (m, k),
        s => return Err(Error::dim(format!("dynamic_conv: kernel bank {s:?} for width {d}"))),
    };
    let gate = tokens.mean_axis(1)?.linear(bank.gate_w, Some(bank.gate_b))?.softmax(1)?;
    if gate.shape() != [b, m] {
        return Err(Error::dim(format!("dynamic_conv: gate {:?} for {m} kernels", gate.shape())));
    }
    let kernel = gate.matmul(&bank.kernels.reshape(&[m, k * d])?)?.reshape(&[b, k, d])?;
    Ok((tokens.token_conv1d(&kernel)?, gate))
}

/// `softmax(q k^T / sqrt(width)) v` over `[B, n, width]` operands. Returns the
/// output and the `[B, n, n]` attention weights.
pub fn scaled_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::dim(format!(
            "attention operands {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let width = q.shape()[2] as f64;
    let scores = q.matmul(&k.transpose_last2()?)?.scale(T::from_f64_lossy(1.0 / width.sqrt()))?;
    let weights = scores.softmax(2)?;
    Ok((weights.matmul(v)?, weights))
}

pub struct MhdcaOutput<T: Scalar> {
    /// `[B, n, d]`, heads concatenated in order.
    pub output: Tensor<T>,
    /// One `[B, n, n]` weight matrix per head.
    pub attention: Vec<Tensor<T>>,
}

/// Multi-head attention whose queries, keys and values come from three
/// separate dynamic convolutions of the same tokens.
pub fn mhdca<T: Scalar>(tokens: &Tensor<T>, heads: usize, banks: [&DynamicKernelBank<'_, T>; 3]) -> Result<MhdcaOutput<T>> {
    let d = *tokens.shape().last().ok_or_else(|| Error::dim("mhdca on a scalar"))?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(format!("width {d} does not split into {heads} heads")));
    }
    let q = dynamic_conv(tokens, banks[0])?.0;
    let k = dynamic_conv(tokens, banks[1])?.0;
    let v = dynamic_conv(tokens, banks[2])?.0;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let (o, w) = scaled_attention(&q.narrow(2, h * dh, dh)?, &k.narrow(2, h * dh, dh)?, &v.narrow(2, h * dh, dh)?)?;
        outs.push(o);
        attention.push(w);
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    Ok(MhdcaOutput { output: Tensor::concat(&refs, 2)?, attention })
}

/// Attention bottleneck on `[B, h, w, d]`: token projection, dynamic
/// multi-head attention, two-layer feed-forward and dropout.
pub fn dca_forward<T: Scalar>(fw: &Forward<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = fw.cfg;
    let d = cfg.bottleneck_channels();
    let (bh, bw) = cfg.bottleneck_size();
    if x.rank() != 4 || x.shape()[1..] != [bh, bw, d] {
        return Err(Error::dim(format!("attention block expects [N,{bh},{bw},{d}], got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let tokens = fw.linear(&x.reshape(&[n, bh * bw, d])?, "dca.fc1")?;
    let q = DynamicKernelBank::from_store(fw, "dca.q")?;
    let k = DynamicKernelBank::from_store(fw, "dca.k")?;
    let v = DynamicKernelBank::from_store(fw, "dca.v")?;
    let attended = mhdca(&tokens, cfg.heads, [&q, &k, &v])?.output;
    let hidden = fw.linear(&attended, "dca.fc3")?.relu()?;
    let out = fw.linear(&hidden, "dca.fc4")?;
    let out = fw.dropout(&out, cfg.dropout.dca)?.reshape(&[n, bh, bw, d])?;
    fw.record("dca", x.shape(), out.shape());
    Ok(out)
}

/// `l1 * sum|w| + l2 * sum w^2` over the first feed-forward weights.
pub fn dca_penalty<T: Scalar>(fw: &Forward<'_, T>, l1: f64, l2: f64) -> Result<Tensor<T>> {
    let w = fw.param("dca.fc3.w")?;
    let a = w.abs()?.sum()?.scale(T::from_f64_lossy(l1))?;
    let b = w.square()?.sum()?.scale(T::from_f64_lossy(l2))?;
    a.add(&b)
}
