use std::collections::BTreeSet;
use std::sync::Mutex;

use super::Forward;
use crate::error::{Error, Result};
use crate::tensor::{batch_norm, Padding, Scalar, Tensor};

/// Extent covered by a `k`-tap kernel with spacing `dilation`.
pub fn receptive_span(dilation: usize, k: usize) -> usize {
    dilation * (k - 1) + 1
}

fn first_sighting(dilation: usize, h: usize, w: usize) -> bool {
    static SEEN: Mutex<BTreeSet<(usize, usize, usize)>> = Mutex::new(BTreeSet::new());
    SEEN.lock().map(|mut s| s.insert((dilation, h, w))).unwrap_or(true)
}

/// Per-channel dilated 3x3 convolution with zero-filled same padding.
/// `weight` is `[3, 3, 1, C]`.
pub fn atrous_depthwise<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dilation: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::dim(format!("atrous_depthwise: expected NHWC input, got {:?}", x.shape())));
    }
    let (h, w, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = weight.shape()[0];
    if dilation == 0 {
        return Err(Error::arg("dilation must be at least 1"));
    }
    if dilation * (k - 1) >= 2 * h.min(w) && first_sighting(dilation, h, w) {
        log::warn!("dilation {dilation} spans {} taps over a {h}x{w} map", receptive_span(dilation, k));
    }
    x.conv2d(weight, bias, 1, Padding::Same, dilation, c)
}

/// One branch: dilated depthwise conv, then pointwise conv and ReLU.
pub fn msas_branch<T: Scalar>(fw: &Forward<'_, T>, x: &Tensor<T>, branch: usize) -> Result<Tensor<T>> {
    let dilation = *fw
        .cfg
        .dilations
        .get(branch)
        .ok_or_else(|| Error::arg(format!("no atrous branch {branch}")))?;
    let p = format!("msas.branch{branch}");
    let dw = atrous_depthwise(
        x,
        fw.param(&format!("{p}.depthwise.w"))?,
        Some(fw.param(&format!("{p}.depthwise.b"))?),
        dilation,
    )?;
    fw.conv(&dw, &format!("{p}.pointwise"))?.relu()
}

/// Parallel atrous branches in ascending-rate order, concatenated on the
/// channel axis, then batch norm and dropout.
pub fn msas_forward<T: Scalar>(fw: &Forward<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = fw.cfg;
    let d = cfg.bottleneck_channels();
    let (bh, bw) = cfg.bottleneck_size();
    if x.rank() != 4 || x.shape()[1..] != [bh, bw, d] {
        return Err(Error::dim(format!("atrous block expects [N,{bh},{bw},{d}], got {:?}", x.shape())));
    }
    let branches = (0..cfg.dilations.len()).map(|j| msas_branch(fw, x, j)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = branches.iter().collect();
    let cat = Tensor::concat(&refs, 3)?;

    let rm = fw.param("msas.bn.running_mean")?;
    let rv = fw.param("msas.bn.running_var")?;
    let bn = batch_norm(
        &cat,
        fw.param("msas.bn.gamma")?,
        fw.param("msas.bn.beta")?,
        rm.data(),
        rv.data(),
        fw.is_training(),
        cfg.batch_norm_momentum,
        cfg.batch_norm_eps,
    )?;
    if let Some((mean, var)) = bn.running {
        fw.push_buffer_update("msas.bn.running_mean".into(), mean);
        fw.push_buffer_update("msas.bn.running_var".into(), var);
    }
    let out = fw.dropout(&bn.output, cfg.dropout.msas)?;
    fw.record("msas", x.shape(), out.shape());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_formula() {
        assert_eq!(receptive_span(12, 3), 25);
        assert_eq!(receptive_span(1, 3), 3);
    }

    #[test]
    fn impulse_lands_on_dilated_taps() {
        let mut x = vec![0.0f64; 81];
        x[4 * 9 + 4] = 1.0;
        let x = Tensor::from_vec(x, &[1, 9, 9, 1]).unwrap();
        let w = Tensor::from_vec((1..=9).map(f64::from).collect(), &[3, 3, 1, 1]).unwrap();
        let out = atrous_depthwise(&x, &w, None, 3).unwrap();
        let nonzero: Vec<(usize, f64)> =
            out.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i, v)).collect();
        assert_eq!(nonzero.len(), 9);
        // output(y, x) = sum w[a][b] * in(y + 3(a-1), x + 3(b-1)); impulse at (4,4)
        assert_eq!(out.data()[9 + 1], 9.0);
        assert_eq!(out.data()[7 * 9 + 7], 1.0);
    }
}
