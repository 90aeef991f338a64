use super::{axis_split, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

fn sigmoid<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

impl<E: Scalar> Tape<'_, E> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        self.node(a)?;
        self.node(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    /// Value of `v`, or `None` on a shape-only tape.
    pub(crate) fn val(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].value.as_ref()
    }

    fn unary(&mut self, x: Var, op: Op<E>, f: impl Fn(E) -> E) -> Result<Var> {
        self.node(x)?;
        let shape = self.shape(x).to_vec();
        let value = self.val(x).map(|t| t.map(f));
        self.push_op(shape, value, op)
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<E>, f: impl Fn(E, E) -> E) -> Result<Var> {
        let shape = self.same_shape(op_name, a, b)?;
        let value = match (self.val(a), self.val(b)) {
            (Some(x), Some(y)) => Some(x.zip_map(y, f)?),
            _ => None,
        };
        self.push_op(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Invalid("add_all of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = E::from_f64(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Addition of a constant.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = E::from_f64(c);
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `x · s` for a one-element node `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        self.node(x)?;
        self.node(s)?;
        if numel(self.shape(s)) != 1 {
            return Err(Error::shape(
                "mul_scalar_var",
                format!("scale must have one element, got {:?}", self.shape(s)),
            ));
        }
        let shape = self.shape(x).to_vec();
        let value = match (self.val(x), self.val(s)) {
            (Some(t), Some(sv)) => {
                let k = sv.data()[0];
                Some(t.map(|v| v * k))
            }
            _ => None,
        };
        self.push_op(shape, value, Op::MulScalarVar { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > E::zero() { v } else { E::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = E::from_f64(slope);
        self.unary(x, Op::LeakyRelu(x, s), move |v| if v >= E::zero() { v } else { v * s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    /// Natural logarithm; checked mode rejects non-positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        if self.checked {
            if let Some(t) = self.val(x) {
                if let Some(bad) = t.data().iter().find(|v| !(**v > E::zero())) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
            }
        }
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        let value = self.val(x).map(|t| Tensor::scalar(t.sum()));
        self.push_op(Vec::new(), value, Op::Sum(x))
    }

    /// Mean of all elements, as a rank-0 node.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        let value = self.val(x).map(|t| Tensor::scalar(t.mean()));
        self.push_op(Vec::new(), value, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.node(x)?;
        if shape.iter().any(|&d| d == 0) || numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = match self.val(x) {
            Some(t) => Some(t.clone().reshape(shape)?),
            None => None,
        };
        self.push_op(shape.to_vec(), value, Op::Reshape(x))
    }

    /// Flattens everything after axis 0.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        let shape = self.shape(x).to_vec();
        let n = *shape.first().ok_or_else(|| Error::shape("flatten", "rank 0"))?;
        self.reshape(x, &[n, numel(&shape[1..])])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        for &x in xs {
            self.node(x)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = if self.shape_only {
            None
        } else {
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for &x in xs {
                    let len = self.shape(x)[axis] * inner;
                    data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
                }
            }
            Some(Tensor::from_parts(shape.clone(), data))
        };
        self.push_op(
            shape,
            value,
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.node(x)?;
        let in_shape = self.shape(x).to_vec();
        let (outer, extent, inner) = axis_split(&in_shape, axis)?;
        if len == 0 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of extent {extent}", start + len),
            ));
        }
        let mut shape = in_shape;
        shape[axis] = len;
        let value = self.val(x).map(|t| {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            Tensor::from_parts(shape.clone(), data)
        });
        self.push_op(shape, value, Op::Slice { x, axis, start })
    }

    /// Mean over axis 0, keeping a leading extent of one.
    pub fn batch_mean(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        let in_shape = self.shape(x).to_vec();
        let n = *in_shape
            .first()
            .ok_or_else(|| Error::shape("batch_mean", "rank 0"))?;
        let mut shape = in_shape;
        shape[0] = 1;
        let value = self.val(x).map(|t| {
            let stride = t.len() / n;
            let mut acc = vec![E::zero(); stride];
            for chunk in t.data().chunks_exact(stride) {
                for (a, &v) in acc.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            let inv = E::one() / E::from_f64(n as f64);
            acc.iter_mut().for_each(|a| *a *= inv);
            Tensor::from_parts(shape.clone(), acc)
        });
        self.push_op(shape, value, Op::BatchMean(x))
    }

    /// Repeats a leading-extent-one node `n` times along axis 0.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        self.node(x)?;
        let in_shape = self.shape(x).to_vec();
        if in_shape.first() != Some(&1) || n == 0 {
            return Err(Error::shape(
                "repeat_batch",
                format!("need leading extent 1 and n > 0, got {in_shape:?} x {n}"),
            ));
        }
        let mut shape = in_shape;
        shape[0] = n;
        let value = self.val(x).map(|t| {
            let mut data = Vec::with_capacity(t.len() * n);
            for _ in 0..n {
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(shape.clone(), data)
        });
        self.push_op(shape, value, Op::RepeatBatch(x))
    }

    /// Adds a per-channel bias `b` (shape `[C]`) to `x` (shape `[N, C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.node(x)?;
        self.node(b)?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("{shape:?} with bias {:?}", self.shape(b)),
            ));
        }
        let value = match (self.val(x), self.val(b)) {
            (Some(t), Some(bv)) => {
                let c = shape[1];
                let inner = numel(&shape[2..]);
                let mut out = t.clone();
                for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
                    let bias = bv.data()[i % c];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
                Some(out)
            }
            _ => None,
        };
        self.push_op(shape, value, Op::AddChannelBias { x, b })
    }

    /// Scales each `(n, c)` plane of `x` (shape `[N, C, ...]`) by `a[n, c]`.
    pub fn mul_channel(&mut self, x: Var, a: Var) -> Result<Var> {
        self.node(x)?;
        self.node(a)?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(a) != &shape[..2] {
            return Err(Error::shape(
                "mul_channel",
                format!("{shape:?} with weights {:?}", self.shape(a)),
            ));
        }
        let value = match (self.val(x), self.val(a)) {
            (Some(t), Some(av)) => {
                let inner = numel(&shape[2..]);
                let mut out = t.clone();
                for (chunk, &w) in out.data_mut().chunks_exact_mut(inner).zip(av.data()) {
                    chunk.iter_mut().for_each(|v| *v *= w);
                }
                Some(out)
            }
            _ => None,
        };
        self.push_op(shape, value, Op::MulChannel { x, a })
    }
}

pub(super) fn concat_backward<E: Scalar>(
    tape: &Tape<'_, E>,
    inputs: &[Var],
    axis: usize,
    g: &Tensor<E>,
    grads: &mut [Option<Tensor<E>>],
) -> Result<()> {
    let out_shape = g.shape();
    let (outer, total, inner) = axis_split(out_shape, axis)?;
    let mut offset = 0;
    for &x in inputs {
        let len = tape.shape(x)[axis];
        if tape.wants(x) {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                data.extend_from_slice(&g.data()[base..base + len * inner]);
            }
            tape.accumulate(grads, x, Tensor::from_parts(tape.shape(x).to_vec(), data));
        }
        offset += len;
    }
    Ok(())
}

pub(super) fn slice_backward<E: Scalar>(
    in_shape: &[usize],
    axis: usize,
    start: usize,
    g: &Tensor<E>,
) -> Tensor<E> {
    let len = g.shape()[axis];
    let (outer, extent, inner) = axis_split(in_shape, axis).expect("validated in forward");
    let mut gx = Tensor::zeros(in_shape);
    for o in 0..outer {
        let dst = (o * extent + start) * inner;
        let src = o * len * inner;
        gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    gx
}

pub(super) fn batch_mean_backward<E: Scalar>(in_shape: &[usize], g: &Tensor<E>) -> Tensor<E> {
    let n = in_shape[0];
    let inv = E::one() / E::from_f64(n as f64);
    let scaled: Vec<E> = g.data().iter().map(|&v| v * inv).collect();
    let mut data = Vec::with_capacity(scaled.len() * n);
    for _ in 0..n {
        data.extend_from_slice(&scaled);
    }
    Tensor::from_parts(in_shape.to_vec(), data)
}

pub(super) fn repeat_batch_backward<E: Scalar>(in_shape: &[usize], g: &Tensor<E>) -> Tensor<E> {
    let stride = numel(in_shape);
    let mut acc = vec![E::zero(); stride];
    for chunk in g.data().chunks_exact(stride) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Tensor::from_parts(in_shape.to_vec(), acc)
}

/// Sums `g` (shape `[N, C, ...]`) into a `[C]` vector.
pub(super) fn channel_sum<E: Scalar>(g: &Tensor<E>, c: usize) -> Tensor<E> {
    let inner = numel(&g.shape()[2..]);
    let mut acc = vec![E::zero(); c];
    for (i, chunk) in g.data().chunks_exact(inner).enumerate() {
        acc[i % c] += chunk.iter().copied().sum::<E>();
    }
    Tensor::from_parts(vec![c], acc)
}

pub(super) fn mul_channel_backward<E: Scalar>(
    x: &Tensor<E>,
    a: &Tensor<E>,
    g: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let inner = numel(&x.shape()[2..]);
    let mut gx = g.clone();
    let mut ga = vec![E::zero(); a.len()];
    for (idx, ((gchunk, xchunk), &w)) in gx
        .data_mut()
        .chunks_exact_mut(inner)
        .zip(x.data().chunks_exact(inner))
        .zip(a.data())
        .enumerate()
    {
        let mut dot = E::zero();
        for (gv, &xv) in gchunk.iter_mut().zip(xchunk) {
            dot += *gv * xv;
            *gv *= w;
        }
        ga[idx] = dot;
    }
    (gx, Tensor::from_parts(a.shape().to_vec(), ga))
}
