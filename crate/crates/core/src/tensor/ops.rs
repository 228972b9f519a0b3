use super::{gemm, numel, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Self> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(op, data, self.shape().to_vec(), &[self], move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(x)
                .zip(ctx.output)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op("add", data, self.shape().to_vec(), &[self, other], |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op("sub", data, self.shape().to_vec(), &[self, other], |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.iter().map(|&g| -g).collect())]
        })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Tensor::from_op("mul", data, self.shape().to_vec(), &[self, other], |ctx| {
            let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.grad.iter().zip(b).map(|(&g, &b)| g * b).collect();
            let gb = ctx.grad.iter().zip(a).map(|(&g, &a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.unary("scale", |v| v * s, move |_, _| s)
    }

    pub fn square(&self) -> Result<Self> {
        let two = T::one() + T::one();
        self.unary("square", |v| v * v, move |x, _| two * x)
    }

    /// `|x|`; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Result<Self> {
        self.unary(
            "abs",
            |v| v.abs(),
            |x, _| if x > T::zero() { T::one() } else if x < T::zero() { -T::one() } else { T::zero() },
        )
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(
            "sigmoid",
            |v| {
                // Split on sign so exp never overflows.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn sum(&self) -> Result<Self> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![total], vec![1], &[self], move |ctx| vec![Some(vec![ctx.grad[0]; n])])
    }

    pub fn mean(&self) -> Result<Self> {
        let n = T::from_usize(self.numel()).unwrap();
        self.sum()?.scale(T::one() / n)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim(format!("mean_axis: axis {axis} for rank {}", self.rank())));
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let inv = T::one() / T::from_usize(extent).unwrap();
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &x[(o * extent + e) * inner..][..inner];
                for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_op("mean_axis", out, shape, &[self], move |ctx| {
            let mut g = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                let src = &ctx.grad[o * inner..][..inner];
                for e in 0..extent {
                    for (d, &s) in g[(o * extent + e) * inner..][..inner].iter_mut().zip(src) {
                        *d = s * inv;
                    }
                }
            }
            vec![Some(g)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::dim(format!(
                "reshape: {:?} ({} values) into {shape:?}",
                self.shape(),
                self.numel()
            )));
        }
        Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), &[self], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::dim(format!("concat: axis {axis} for rank {}", first.rank())));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat: shape {:?} incompatible with {:?} on axis {axis}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..][..e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op("concat", data, shape, parts, move |ctx| {
            let mut grads: Vec<Vec<T>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (g, &e) in grads.iter_mut().zip(&extents) {
                    g.extend_from_slice(&ctx.grad[pos..pos + e * inner]);
                    pos += e * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow: axis {axis} range {start}..{} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data()[(o * extent + start) * inner..][..len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op("narrow", data, shape, &[self], move |ctx| {
            let mut g = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                g[(o * extent + start) * inner..][..len * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..][..len * inner]);
            }
            vec![Some(g)]
        })
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("transpose_last2 needs rank >= 2"));
        }
        let (m, n) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = self.numel() / (m * n);
        let transpose = move |src: &[T]| {
            let mut out = vec![T::zero(); src.len()];
            for b in 0..batch {
                let (s, d) = (&src[b * m * n..][..m * n], &mut out[b * m * n..][..m * n]);
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = s[i * n + j];
                    }
                }
            }
            out
        };
        let data = transpose(self.data());
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Tensor::from_op("transpose", data, shape, &[self], move |ctx| {
            // Transposing the [n, m] gradient back.
            let mut out = vec![T::zero(); ctx.grad.len()];
            for b in 0..batch {
                let (s, d) = (&ctx.grad[b * m * n..][..m * n], &mut out[b * m * n..][..m * n]);
                for j in 0..n {
                    for i in 0..m {
                        d[i * n + j] = s[j * m + i];
                    }
                }
            }
            vec![Some(out)]
        })
    }

    /// Batched product `[.., m, k] x [.., k, n]` with identical leading extents.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || ra != rb || self.shape()[..ra - 2] != other.shape()[..rb - 2] {
            return Err(Error::dim(format!("matmul: {:?} x {:?}", self.shape(), other.shape())));
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul: {:?} x {:?}", self.shape(), other.shape())));
        }
        let batch = self.numel() / (m * k);
        let mut out = vec![T::zero(); batch * m * n];
        for b in 0..batch {
            gemm(
                T::one(),
                MatRef::at(self.data(), b * m * k, m, k, k, 1),
                MatRef::at(other.data(), b * k * n, k, n, n, 1),
                T::zero(),
                MatMut::at(&mut out, b * m * n, m, n, n, 1),
            );
        }
        let mut shape = self.shape().to_vec();
        shape[ra - 1] = n;
        Tensor::from_op("matmul", out, shape, &[self, other], move |ctx| {
            let (a, bm) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut ga = vec![T::zero(); batch * m * k];
            let mut gb = vec![T::zero(); batch * k * n];
            for b in 0..batch {
                let g = MatRef::at(ctx.grad, b * m * n, m, n, n, 1);
                // dA = G Bᵀ, dB = Aᵀ G
                gemm(T::one(), g, MatRef::at(bm, b * k * n, k, n, n, 1).t(), T::zero(), MatMut::at(&mut ga, b * m * k, m, k, k, 1));
                gemm(T::one(), MatRef::at(a, b * m * k, m, k, k, 1).t(), g, T::zero(), MatMut::at(&mut gb, b * k * n, k, n, n, 1));
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim(format!("softmax: axis {axis} for rank {}", self.rank())));
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let max = (0..extent).map(|e| x[idx(e)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for e in 0..extent {
                    let v = (x[idx(e)] - max).exp();
                    out[idx(e)] = v;
                    total += v;
                }
                for e in 0..extent {
                    out[idx(e)] /= total;
                }
            }
        }
        Tensor::from_op("softmax", out, self.shape().to_vec(), &[self], move |ctx| {
            let (y, g) = (ctx.output, ctx.grad);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |e: usize| (o * extent + e) * inner + i;
                    let dot: T = (0..extent).map(|e| g[idx(e)] * y[idx(e)]).sum();
                    for e in 0..extent {
                        gx[idx(e)] = y[idx(e)] * (g[idx(e)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Multiplies every channel of an `[N,H,W,C]` map by a per-sample gate `[N,C]`.
    pub fn scale_channels(&self, gate: &Self) -> Result<Self> {
        if self.rank() != 4 || gate.shape() != [self.shape()[0], self.shape()[3]] {
            return Err(Error::dim(format!(
                "scale_channels: map {:?} with gate {:?}",
                self.shape(),
                gate.shape()
            )));
        }
        let (n, c) = (self.shape()[0], self.shape()[3]);
        let hw = self.shape()[1] * self.shape()[2];
        let a = gate.data();
        let mut out = self.to_vec();
        for b in 0..n {
            for p in 0..hw {
                let row = &mut out[(b * hw + p) * c..][..c];
                row.iter_mut().zip(&a[b * c..][..c]).for_each(|(v, &s)| *v *= s);
            }
        }
        Tensor::from_op("scale_channels", out, self.shape().to_vec(), &[self, gate], move |ctx| {
            let (x, a) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gx = vec![T::zero(); x.len()];
            let mut ga = vec![T::zero(); a.len()];
            for b in 0..n {
                for p in 0..hw {
                    let base = (b * hw + p) * c;
                    for k in 0..c {
                        let g = ctx.grad[base + k];
                        gx[base + k] = g * a[b * c + k];
                        ga[b * c + k] += g * x[base + k];
                    }
                }
            }
            vec![Some(gx), Some(ga)]
        })
    }

    /// Index of the maximum along the last axis; ties resolve to the first.
    pub fn argmax_last(&self) -> Vec<usize> {
        let c = *self.shape().last().unwrap();
        self.data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
