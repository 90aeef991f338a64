use super::{axis_split, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::{numel, Tensor};

/// Per-channel statistics of one training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<E> {
    pub mean: Tensor<E>,
    /// Unbiased variance (biased when only one element per channel).
    pub var: Tensor<E>,
}

/// Momentum of running statistics: `running = (1 - m)·running + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], numel(&shape[2..])))
}

impl<E: Scalar> Tape<'_, E> {
    /// `x · wᵀ + b` for `x` `[N, I]`, `w` `[O, I]` and optional `b` `[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.node(x)?;
        self.node(w)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, i], &[o, wi]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("dense", format!("input {xs:?}, weight {ws:?}")));
        };
        if i != wi {
            return Err(Error::shape("dense", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            self.node(b)?;
            if self.shape(b) != [o] {
                return Err(Error::shape("dense", format!("bias {:?} for {o} outputs", self.shape(b))));
            }
        }
        let value = match (self.val(x), self.val(w)) {
            (Some(xv), Some(wv)) => {
                let mut out = vec![E::zero(); n * o];
                if let Some(bv) = b.and_then(|b| self.val(b)) {
                    for row in out.chunks_exact_mut(o) {
                        row.copy_from_slice(bv.data());
                    }
                }
                gemm(n, i, o, xv.data(), Layout::Normal, wv.data(), Layout::Transposed, E::one(), &mut out);
                Some(Tensor::from_parts(vec![n, o], out))
            }
            _ => None,
        };
        self.push_op(vec![n, o], value, Op::Dense { x, w, b })
    }

    /// Training-mode batch normalization over every axis except 1. Returns
    /// the normalized node and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Option<BatchStats<E>>)> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        let shape = self.shape(x).to_vec();
        let Some(xv) = self.val(x) else {
            let var = self.push_op(
                shape,
                None,
                Op::BatchNorm { x, gamma, beta, xhat: Vec::new(), inv_std: Vec::new(), train: true },
            )?;
            return Ok((var, None));
        };
        let m = n * inner;
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        for (p, plane) in xv.data().chunks_exact(inner).enumerate() {
            mean[p % c] += plane.iter().copied().sum::<E>();
        }
        let inv_m = E::one() / E::from_f64(m as f64);
        mean.iter_mut().for_each(|v| *v *= inv_m);
        for (p, plane) in xv.data().chunks_exact(inner).enumerate() {
            let mu = mean[p % c];
            var[p % c] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>();
        }
        let eps = E::from_f64(BN_EPS);
        let inv_std: Vec<E> = var.iter().map(|&s| E::one() / (s * inv_m + eps).sqrt()).collect();
        let unbiased = E::one() / E::from_f64(if m > 1 { (m - 1) as f64 } else { 1.0 });
        let stats = BatchStats {
            mean: Tensor::from_parts(vec![c], mean.clone()),
            var: Tensor::from_parts(vec![c], var.iter().map(|&s| s * unbiased).collect()),
        };
        let (value, xhat) = self.bn_apply(xv, gamma, beta, &mean, &inv_std, c, inner);
        let var = self.push_op(
            shape,
            Some(value),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true },
        )?;
        Ok((var, Some(stats)))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<E>,
        var: &Tensor<E>,
    ) -> Result<Var> {
        let (_, c, inner) = self.bn_check(x, gamma, beta)?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("statistics {:?}/{:?} for {c} channels", mean.shape(), var.shape()),
            ));
        }
        let shape = self.shape(x).to_vec();
        let eps = E::from_f64(BN_EPS);
        let inv_std: Vec<E> = var.data().iter().map(|&s| E::one() / (s + eps).sqrt()).collect();
        let (value, xhat) = match self.val(x) {
            Some(xv) => {
                let (v, xh) = self.bn_apply(xv, gamma, beta, mean.data(), &inv_std, c, inner);
                (Some(v), xh)
            }
            None => (None, Vec::new()),
        };
        self.push_op(shape, value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false })
    }

    /// Batch normalization with parameters `{prefix}.gamma`, `{prefix}.beta`
    /// and buffers `{prefix}.running_mean`, `{prefix}.running_var`. In
    /// training mode the running-statistic updates are queued on the tape.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let running_mean = self.stored(&mean_name)?;
        let running_var = self.stored(&var_name)?;
        if !self.is_training() {
            return self.batch_norm_eval(x, gamma, beta, running_mean, running_var);
        }
        let (y, stats) = self.batch_norm_train(x, gamma, beta)?;
        if let Some(stats) = stats {
            let m = E::from_f64(BN_MOMENTUM);
            let keep = E::one() - m;
            let blend = |old: &Tensor<E>, new: &Tensor<E>| old.zip_map(new, |o, b| keep * o + m * b);
            let new_mean = blend(running_mean, &stats.mean)?;
            let new_var = blend(running_var, &stats.var)?;
            self.queue_buffer_update(mean_name, new_mean);
            self.queue_buffer_update(var_name, new_var);
        }
        Ok(y)
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        self.node(x)?;
        self.node(gamma)?;
        self.node(beta)?;
        let (n, c, inner) = channel_layout("batch_norm", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((n, c, inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        xv: &Tensor<E>,
        gamma: Var,
        beta: Var,
        mean: &[E],
        inv_std: &[E],
        c: usize,
        inner: usize,
    ) -> (Tensor<E>, Vec<E>) {
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xv.clone();
        let mut xhat = Vec::with_capacity(xv.len());
        for (p, plane) in out.data_mut().chunks_exact_mut(inner).enumerate() {
            let ch = p % c;
            for v in plane.iter_mut() {
                let h = (*v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                *v = gv[ch] * h + bv[ch];
            }
        }
        (out, xhat)
    }

    /// Parametric ReLU with one shared slope (`[1]`) or one per channel
    /// (`[C]`).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.node(x)?;
        self.node(slope)?;
        let shape = self.shape(x).to_vec();
        let (_, c, inner) = channel_layout("prelu", &shape)?;
        let k = match *self.shape(slope) {
            [1] => 1,
            [s] if s == c => c,
            ref other => {
                return Err(Error::shape("prelu", format!("slope {other:?} for {c} channels")));
            }
        };
        let value = match (self.val(x), self.val(slope)) {
            (Some(xv), Some(sv)) => {
                let mut out = xv.clone();
                for (p, plane) in out.data_mut().chunks_exact_mut(inner).enumerate() {
                    let a = sv.data()[if k == 1 { 0 } else { p % c }];
                    plane.iter_mut().filter(|v| **v < E::zero()).for_each(|v| *v *= a);
                }
                Some(out)
            }
            _ => None,
        };
        self.push_op(shape, value, Op::Prelu { x, slope })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.node(x)?;
        let shape = self.shape(x).to_vec();
        axis_split(&shape, axis)?;
        let value = self.val(x).map(|t| softmax_along(t, axis, false));
        self.push_op(shape, value, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.node(x)?;
        let shape = self.shape(x).to_vec();
        axis_split(&shape, axis)?;
        let value = self.val(x).map(|t| softmax_along(t, axis, true));
        self.push_op(shape, value, Op::LogSoftmax { x, axis })
    }

    /// Mean over samples and pixels of the negative log-likelihood of
    /// `labels` under a softmax over axis 1 of `logits` (`[N, K, ...]`).
    /// Labels are indexed in `N × spatial` row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.node(logits)?;
        let shape = self.shape(logits).to_vec();
        let (n, k, inner) = channel_layout("cross_entropy", &shape)?;
        if labels.len() != n * inner {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} positions", labels.len(), n * inner),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} with {k} classes")));
        }
        let (value, probs) = match self.val(logits) {
            Some(t) => {
                let logp = softmax_along(t, 1, true);
                let mut total = 0.0f64;
                for (pos, &l) in labels.iter().enumerate() {
                    let (s, i) = (pos / inner, pos % inner);
                    total -= logp.data()[(s * k + l) * inner + i].as_f64();
                }
                let loss = E::from_f64(total / labels.len() as f64);
                let probs = logp.data().iter().map(|v| v.exp()).collect();
                (Some(Tensor::scalar(loss)), probs)
            }
            None => (None, Vec::new()),
        };
        self.push_op(
            Vec::new(),
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }
}

/// Softmax (or log-softmax) of `t` along `axis` with max subtraction.
pub(crate) fn softmax_along<E: Scalar>(t: &Tensor<E>, axis: usize, log: bool) -> Tensor<E> {
    let (outer, len, inner) = axis_split(t.shape(), axis).expect("axis validated");
    let mut out = t.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| data[idx(j)]).fold(E::neg_infinity(), E::max);
            let mut total = E::zero();
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                total += e;
                if !log {
                    data[idx(j)] = e;
                }
            }
            if log {
                let lse = max + total.ln();
                for j in 0..len {
                    data[idx(j)] -= lse;
                }
            } else {
                for j in 0..len {
                    data[idx(j)] /= total;
                }
            }
        }
    }
    out
}

pub(super) fn dense_backward<E: Scalar>(
    tape: &Tape<'_, E>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &Tensor<E>,
    grads: &mut [Option<Tensor<E>>],
) -> Result<()> {
    let (xv, wv) = (tape.value(x), tape.value(w));
    let (n, i) = (xv.shape()[0], xv.shape()[1]);
    let o = wv.shape()[0];
    if tape.wants(x) {
        let mut gx = vec![E::zero(); n * i];
        gemm(n, o, i, g.data(), Layout::Normal, wv.data(), Layout::Normal, E::zero(), &mut gx);
        tape.accumulate(grads, x, Tensor::from_parts(vec![n, i], gx));
    }
    if tape.wants(w) {
        let mut gw = vec![E::zero(); o * i];
        gemm(o, n, i, g.data(), Layout::Transposed, xv.data(), Layout::Normal, E::zero(), &mut gw);
        tape.accumulate(grads, w, Tensor::from_parts(vec![o, i], gw));
    }
    if let Some(b) = b.filter(|&b| tape.wants(b)) {
        let mut gb = vec![E::zero(); o];
        for row in g.data().chunks_exact(o) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        tape.accumulate(grads, b, Tensor::from_parts(vec![o], gb));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward<E: Scalar>(
    tape: &Tape<'_, E>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[E],
    inv_std: &[E],
    train: bool,
    g: &Tensor<E>,
    grads: &mut [Option<Tensor<E>>],
) -> Result<()> {
    let (n, c, inner) = channel_layout("batch_norm", tape.shape(x))?;
    let mut sum_g = vec![E::zero(); c];
    let mut sum_gx = vec![E::zero(); c];
    for (p, (gp, hp)) in g.data().chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
        for (&gv, &hv) in gp.iter().zip(hp) {
            sum_g[p % c] += gv;
            sum_gx[p % c] += gv * hv;
        }
    }
    if tape.wants(gamma) {
        tape.accumulate(grads, gamma, Tensor::from_parts(vec![c], sum_gx.clone()));
    }
    if tape.wants(beta) {
        tape.accumulate(grads, beta, Tensor::from_parts(vec![c], sum_g.clone()));
    }
    if tape.wants(x) {
        let gv = tape.value(gamma).data();
        let m = E::from_f64((n * inner) as f64);
        let mut gx = g.clone();
        for (p, (gp, hp)) in gx.data_mut().chunks_exact_mut(inner).zip(xhat.chunks_exact(inner)).enumerate() {
            let ch = p % c;
            let k = gv[ch] * inv_std[ch];
            for (v, &h) in gp.iter_mut().zip(hp) {
                *v = if train {
                    k * (*v - sum_g[ch] / m - h * sum_gx[ch] / m)
                } else {
                    k * *v
                };
            }
        }
        tape.accumulate(grads, x, gx);
    }
    Ok(())
}

pub(super) fn prelu_backward<E: Scalar>(
    tape: &Tape<'_, E>,
    x: Var,
    slope: Var,
    g: &Tensor<E>,
    grads: &mut [Option<Tensor<E>>],
) -> Result<()> {
    let xv = tape.value(x);
    let sv = tape.value(slope);
    let (_, c, inner) = channel_layout("prelu", xv.shape())?;
    let shared = sv.len() == 1;
    let mut gx = g.clone();
    let mut gs = vec![E::zero(); sv.len()];
    for (p, (gp, xp)) in gx.data_mut().chunks_exact_mut(inner).zip(xv.data().chunks_exact(inner)).enumerate() {
        let k = if shared { 0 } else { p % c };
        let a = sv.data()[k];
        for (gval, &xval) in gp.iter_mut().zip(xp) {
            if xval < E::zero() {
                gs[k] += *gval * xval;
                *gval *= a;
            }
        }
    }
    if tape.wants(x) {
        tape.accumulate(grads, x, gx);
    }
    if tape.wants(slope) {
        tape.accumulate(grads, slope, Tensor::from_parts(sv.shape().to_vec(), gs));
    }
    Ok(())
}

pub(super) fn softmax_backward<E: Scalar>(y: &Tensor<E>, axis: usize, g: &Tensor<E>) -> Tensor<E> {
    let (outer, len, inner) = axis_split(y.shape(), axis).expect("axis validated");
    let mut gx = g.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: E = (0..len).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
            for j in 0..len {
                gx.data_mut()[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
            }
        }
    }
    gx
}

pub(super) fn log_softmax_backward<E: Scalar>(y: &Tensor<E>, axis: usize, g: &Tensor<E>) -> Tensor<E> {
    let (outer, len, inner) = axis_split(y.shape(), axis).expect("axis validated");
    let mut gx = g.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let total: E = (0..len).map(|j| g.data()[idx(j)]).sum();
            for j in 0..len {
                gx.data_mut()[idx(j)] = g.data()[idx(j)] - y.data()[idx(j)].exp() * total;
            }
        }
    }
    gx
}

pub(super) fn cross_entropy_backward<E: Scalar>(
    shape: &[usize],
    labels: &[usize],
    probs: &[E],
    upstream: E,
) -> Tensor<E> {
    let (k, inner) = (shape[1], numel(&shape[2..]));
    let scale = upstream / E::from_f64(labels.len() as f64);
    let mut gx: Vec<E> = probs.iter().map(|&p| p * scale).collect();
    for (pos, &l) in labels.iter().enumerate() {
        let (s, i) = (pos / inner, pos % inner);
        gx[(s * k + l) * inner + i] -= scale;
    }
    Tensor::from_parts(shape.to_vec(), gx)
}
