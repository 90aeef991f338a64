use super::{Op, Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Output extent of a convolution or pooling window, if at least one.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<E: Scalar>(x: &[E], g: &Geometry, cols: &mut [E]) {
    let n_out = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(E::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, d) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            E::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<E: Scalar>(cols: &[E], g: &Geometry, x: &mut [E]) {
    let n_out = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    let (&[_, c, h, w], &[_, kc, kh, kw]) = (x, k) else {
        return Err(Error::shape("conv2d", format!("input {x:?}, kernel {k:?}")));
    };
    if c != kc {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {kc}"),
        ));
    }
    let (Some(ho), Some(wo)) = (
        conv_output_extent(h, kh, stride, pad),
        conv_output_extent(w, kw, stride, pad),
    ) else {
        return Err(Error::shape(
            "conv2d",
            format!("{kh}x{kw} kernel, stride {stride}, pad {pad} on {h}x{w}"),
        ));
    };
    Ok(Geometry {
        c,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        stride,
        pad,
    })
}

fn conv2d_forward<E: Scalar>(x: &Tensor<E>, k: &Tensor<E>, g: &Geometry) -> Tensor<E> {
    let n = x.shape()[0];
    let cout = k.shape()[0];
    let in_stride = g.c * g.h * g.w;
    let out_stride = cout * g.cols();
    let mut out = vec![E::zero(); n * out_stride];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); g.rows() * g.cols()]
    };
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let rhs = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(
            cout,
            g.rows(),
            g.cols(),
            k.data(),
            Layout::Normal,
            rhs,
            Layout::Normal,
            E::zero(),
            &mut out[b * out_stride..(b + 1) * out_stride],
        );
    }
    Tensor::from_parts(vec![n, cout, g.ho, g.wo], out)
}

pub(super) fn conv2d_backward<E: Scalar>(
    x: &Tensor<E>,
    k: &Tensor<E>,
    stride: usize,
    pad: usize,
    gy: &Tensor<E>,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let g = geometry(x.shape(), k.shape(), stride, pad).expect("validated in forward");
    let n = x.shape()[0];
    let cout = k.shape()[0];
    let in_stride = g.c * g.h * g.w;
    let out_stride = cout * g.cols();
    let mut gx = want_x.then(|| vec![E::zero(); x.len()]);
    let mut gk = want_k.then(|| vec![E::zero(); k.len()]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise || !want_k {
        Vec::new()
    } else {
        vec![E::zero(); g.rows() * g.cols()]
    };
    let mut dcols = if pointwise || !want_x {
        Vec::new()
    } else {
        vec![E::zero(); g.rows() * g.cols()]
    };
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let gyb = &gy.data()[b * out_stride..(b + 1) * out_stride];
        if let Some(gk) = gk.as_mut() {
            let rhs = if pointwise {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            gemm(
                cout,
                g.cols(),
                g.rows(),
                gyb,
                Layout::Normal,
                rhs,
                Layout::Transposed,
                E::one(),
                gk,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                gemm(
                    g.rows(),
                    cout,
                    g.cols(),
                    k.data(),
                    Layout::Transposed,
                    gyb,
                    Layout::Normal,
                    E::zero(),
                    gxb,
                );
            } else {
                gemm(
                    g.rows(),
                    cout,
                    g.cols(),
                    k.data(),
                    Layout::Transposed,
                    gyb,
                    Layout::Normal,
                    E::zero(),
                    &mut dcols,
                );
                col2im(&dcols, &g, gxb);
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
    )
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected NCHW, got {shape:?}"))),
    }
}

fn pool_extents(op: &'static str, h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    match (
        conv_output_extent(h, window, stride, 0),
        conv_output_extent(w, window, stride, 0),
    ) {
        (Some(ho), Some(wo)) if window > 0 => Ok((ho, wo)),
        _ => Err(Error::shape(op, format!("window {window}, stride {stride} on {h}x{w}"))),
    }
}

impl<E: Scalar> Tape<'_, E> {
    /// Cross-correlation of `x` (`[N, C, H, W]`) with kernel `k`
    /// (`[O, C, kh, kw]`) using zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        self.node(x)?;
        self.node(k)?;
        let g = geometry(self.shape(x), self.shape(k), stride, pad)?;
        let shape = vec![self.shape(x)[0], self.shape(k)[0], g.ho, g.wo];
        let value = match (self.val(x), self.val(k)) {
            (Some(xv), Some(kv)) => Some(conv2d_forward(xv, kv, &g)),
            _ => None,
        };
        self.push_op(shape, value, Op::Conv2d { x, k, stride, pad })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.node(x)?;
        let (n, c, h, w) = nchw("upsample_nearest", self.shape(x))?;
        if factor == 0 {
            return Err(Error::Invalid("upsample factor 0".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let shape = vec![n, c, ho, wo];
        let value = self.val(x).map(|t| {
            let mut out = Vec::with_capacity(n * c * ho * wo);
            for plane in t.data().chunks_exact(h * w) {
                for i in 0..ho {
                    let row = &plane[(i / factor) * w..][..w];
                    for j in 0..wo {
                        out.push(row[j / factor]);
                    }
                }
            }
            Tensor::from_parts(shape.clone(), out)
        });
        self.push_op(shape, value, Op::Upsample { x, factor })
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.node(x)?;
        let (n, c, h, w) = nchw("avg_pool", self.shape(x))?;
        let (ho, wo) = pool_extents("avg_pool", h, w, window, stride)?;
        let shape = vec![n, c, ho, wo];
        let value = self.val(x).map(|t| {
            let inv = E::one() / E::from_f64((window * window) as f64);
            let mut out = Vec::with_capacity(n * c * ho * wo);
            for plane in t.data().chunks_exact(h * w) {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = E::zero();
                        for di in 0..window {
                            let row = &plane[(oi * stride + di) * w + oj * stride..][..window];
                            acc += row.iter().copied().sum::<E>();
                        }
                        out.push(acc * inv);
                    }
                }
            }
            Tensor::from_parts(shape.clone(), out)
        });
        self.push_op(shape, value, Op::AvgPool { x, window, stride })
    }

    /// Max pooling; ties resolve to the first element in row-major order.
    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.node(x)?;
        let (n, c, h, w) = nchw("max_pool", self.shape(x))?;
        let (ho, wo) = pool_extents("max_pool", h, w, window, stride)?;
        let shape = vec![n, c, ho, wo];
        let (value, argmax) = match self.val(x) {
            Some(t) => {
                let mut out = Vec::with_capacity(n * c * ho * wo);
                let mut arg = Vec::with_capacity(n * c * ho * wo);
                for (p, plane) in t.data().chunks_exact(h * w).enumerate() {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let mut best = (E::neg_infinity(), usize::MAX);
                            for di in 0..window {
                                for dj in 0..window {
                                    let idx = (oi * stride + di) * w + oj * stride + dj;
                                    if plane[idx] > best.0 || best.1 == usize::MAX {
                                        best = (plane[idx], idx);
                                    }
                                }
                            }
                            out.push(best.0);
                            arg.push(p * h * w + best.1);
                        }
                    }
                }
                (Some(Tensor::from_parts(shape.clone(), out)), arg)
            }
            None => (None, Vec::new()),
        };
        self.push_op(shape, value, Op::MaxPool { x, argmax })
    }

    /// Reduces each spatial plane of `x` (`[N, C, ...]`) to one value, giving
    /// `[N, C]`. Min and max pick the first extremal element.
    pub fn global_pool(&mut self, x: Var, reduce: Reduce) -> Result<Var> {
        self.node(x)?;
        let shape_in = self.shape(x).to_vec();
        if shape_in.len() < 3 {
            return Err(Error::shape("global_pool", format!("rank {} input", shape_in.len())));
        }
        let shape = shape_in[..2].to_vec();
        let plane: usize = shape_in[2..].iter().product();
        let (value, argidx) = match self.val(x) {
            Some(t) => {
                let mut out = Vec::with_capacity(shape[0] * shape[1]);
                let mut arg = Vec::new();
                for (p, chunk) in t.data().chunks_exact(plane).enumerate() {
                    match reduce {
                        Reduce::Mean => {
                            out.push(chunk.iter().copied().sum::<E>() / E::from_f64(plane as f64))
                        }
                        Reduce::Min | Reduce::Max => {
                            let mut best = 0;
                            for (i, &v) in chunk.iter().enumerate() {
                                let better = match reduce {
                                    Reduce::Min => v < chunk[best],
                                    _ => v > chunk[best],
                                };
                                if better {
                                    best = i;
                                }
                            }
                            out.push(chunk[best]);
                            arg.push(p * plane + best);
                        }
                    }
                }
                (Some(Tensor::from_parts(shape.clone(), out)), arg)
            }
            None => (None, Vec::new()),
        };
        self.push_op(shape, value, Op::GlobalPool { x, reduce, argidx })
    }

    /// Resamples `x` to `target` spatial extents by integer average pooling
    /// or nearest upsampling.
    pub fn resize_to(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        self.node(x)?;
        let (_, _, h, w) = nchw("resize_to", self.shape(x))?;
        let (th, tw) = target;
        if (h, w) == (th, tw) {
            Ok(x)
        } else if h > th && h % th == 0 && w % tw == 0 && h / th == w / tw {
            let f = h / th;
            self.avg_pool(x, f, f)
        } else if th > h && th % h == 0 && tw % w == 0 && th / h == tw / w {
            self.upsample_nearest(x, th / h)
        } else {
            Err(Error::shape(
                "resize_to",
                format!("{h}x{w} -> {th}x{tw} is not an integer rescale"),
            ))
        }
    }
}

pub(super) fn upsample_backward<E: Scalar>(in_shape: &[usize], factor: usize, g: &Tensor<E>) -> Tensor<E> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let wo = w * factor;
    let mut gx = Tensor::zeros(in_shape);
    for (dst, src) in gx
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(g.data().chunks_exact(h * w * factor * factor))
    {
        for (i, line) in src.chunks_exact(wo).enumerate() {
            let row = &mut dst[(i / factor) * w..][..w];
            for (j, &v) in line.iter().enumerate() {
                row[j / factor] += v;
            }
        }
    }
    gx
}

pub(super) fn avg_pool_backward<E: Scalar>(
    in_shape: &[usize],
    window: usize,
    stride: usize,
    g: &Tensor<E>,
) -> Tensor<E> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let inv = E::one() / E::from_f64((window * window) as f64);
    let mut gx = Tensor::zeros(in_shape);
    for (dst, src) in gx
        .data_mut()
        .chunks_exact_mut(h * w)
        .zip(g.data().chunks_exact(ho * wo))
    {
        for oi in 0..ho {
            for oj in 0..wo {
                let v = src[oi * wo + oj] * inv;
                for di in 0..window {
                    let row = &mut dst[(oi * stride + di) * w + oj * stride..][..window];
                    row.iter_mut().for_each(|r| *r += v);
                }
            }
        }
    }
    gx
}

pub(super) fn global_mean_backward<E: Scalar>(in_shape: &[usize], g: &Tensor<E>) -> Tensor<E> {
    let plane: usize = in_shape[2..].iter().product();
    let inv = E::one() / E::from_f64(plane as f64);
    let mut data = Vec::with_capacity(plane * g.len());
    for &v in g.data() {
        data.extend(std::iter::repeat(v * inv).take(plane));
    }
    Tensor::from_parts(in_shape.to_vec(), data)
}
