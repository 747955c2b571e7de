use super::{lit, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::quant::{self, QuantParams};

/// The closed set of differentiable primitives. Everything else is composed.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[n, k] x [k, m] -> [n, m]`
    MatMul,
    /// Swap the two axes of a matrix.
    Transpose,
    /// Elementwise sum; the right operand may broadcast into the left shape.
    Add,
    /// Elementwise product with the same broadcasting rule as `Add`.
    Mul,
    Scale(f64),
    Concat {
        axis: usize,
    },
    /// Row lookup into a `[n, d]` table.
    Gather {
        indices: Vec<usize>,
    },
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    /// Affine-free normalization over the last axis.
    LayerNorm {
        eps: f64,
    },
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    /// Valid cross-correlation of `[n, h, w]` inputs with `[c, kh, kw]` filters.
    Conv2d,
    /// Max over the last axis.
    MaxOverTime,
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    StopGradient,
    Reshape {
        shape: Vec<usize>,
    },
    /// Per-channel (axis 0) or per-tensor fake quantization with a straight-through gradient.
    FakeQuant {
        params: Vec<QuantParams>,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Concat { .. } => "concat",
            Primitive::Gather { .. } => "embedding-gather",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log-softmax",
            Primitive::LayerNorm { .. } => "layer-norm",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Abs => "abs",
            Primitive::Conv2d => "conv2d",
            Primitive::MaxOverTime => "max-over-time",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::StopGradient => "stop-gradient",
            Primitive::Reshape { .. } => "reshape",
            Primitive::FakeQuant { .. } => "fake-quant",
        }
    }

    /// Resolve a primitive by name with default attributes.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "scale" => Primitive::Scale(1.0),
            "concat" => Primitive::Concat { axis: 0 },
            "embedding-gather" => Primitive::Gather {
                indices: Vec::new(),
            },
            "softmax" => Primitive::Softmax,
            "log-softmax" => Primitive::LogSoftmax,
            "layer-norm" => Primitive::LayerNorm { eps: 1e-5 },
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "tanh" => Primitive::Tanh,
            "abs" => Primitive::Abs,
            "conv2d" => Primitive::Conv2d,
            "max-over-time" => Primitive::MaxOverTime,
            "sum" => Primitive::Sum { axis: None },
            "mean" => Primitive::Mean { axis: None },
            "stop-gradient" => Primitive::StopGradient,
            other => return Err(Error::UnsupportedPrimitive(other.to_string())),
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Mul | Primitive::Conv2d => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Evaluate one primitive on concrete tensors.
pub fn eval_primitive<T: Scalar>(p: &Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let name = p.name();
    match p.arity() {
        Some(n) if inputs.len() != n => {
            return Err(shape_err(
                name,
                format!("expected {} inputs, got {}", n, inputs.len()),
            ))
        }
        None if inputs.is_empty() => return Err(shape_err(name, "no inputs")),
        _ => {}
    }
    let x = inputs[0];
    match p {
        Primitive::MatMul => {
            let (n, k) = as_matrix(name, x)?;
            let (k2, m) = as_matrix(name, inputs[1])?;
            if k != k2 {
                return Err(shape_err(
                    name,
                    format!(
                        "inner dims differ: {:?} x {:?}",
                        x.shape(),
                        inputs[1].shape()
                    ),
                ));
            }
            let mut out = vec![T::zero(); n * m];
            matmul_into(x.data(), inputs[1].data(), &mut out, n, k, m);
            Tensor::new(vec![n, m], out)
        }
        Primitive::Transpose => {
            let (n, m) = as_matrix(name, x)?;
            let d = x.data();
            let mut out = vec![T::zero(); n * m];
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = d[i * m + j];
                }
            }
            Tensor::new(vec![m, n], out)
        }
        Primitive::Add | Primitive::Mul => {
            let y = inputs[1];
            let add = matches!(p, Primitive::Add);
            let op = |a: T, b: T| if add { a + b } else { a * b };
            let out = match broadcast_map(name, x.shape(), y.shape())? {
                None => x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &b)| op(a, b))
                    .collect(),
                Some(map) => x
                    .data()
                    .iter()
                    .zip(&map)
                    .map(|(&a, &j)| op(a, y.data()[j]))
                    .collect(),
            };
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::Scale(c) => {
            let c: T = lit(*c);
            Ok(x.map(|v| v * c))
        }
        Primitive::Concat { axis } => concat(name, inputs, *axis),
        Primitive::Gather { indices } => {
            let (n, d) = as_matrix(name, x)?;
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= n {
                    return Err(shape_err(name, format!("index {} out of range {}", i, n)));
                }
                out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![indices.len(), d], out)
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            let cols = last_dim(name, x)?;
            let log = matches!(p, Primitive::LogSoftmax);
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                if log {
                    let lz = z.ln();
                    row.iter_mut().for_each(|v| *v = *v - mx - lz);
                } else {
                    row.iter_mut().for_each(|v| *v = (*v - mx).exp() / z);
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::LayerNorm { eps } => {
            let cols = last_dim(name, x)?;
            let eps: T = lit(*eps);
            let n: T = lit(cols as f64);
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                let mean = row.iter().cloned().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Primitive::Relu => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
        Primitive::Sigmoid => Ok(x.map(sigmoid)),
        Primitive::Tanh => Ok(x.map(|v| v.tanh())),
        Primitive::Abs => Ok(x.map(|v| v.abs())),
        Primitive::Conv2d => {
            let (n, h, w) = as_rank3(name, x)?;
            let (c, kh, kw) = as_rank3(name, inputs[1])?;
            if kh > h || kw > w || kh == 0 || kw == 0 {
                return Err(shape_err(
                    name,
                    format!("kernel {}x{} does not fit input {}x{}", kh, kw, h, w),
                ));
            }
            let (ho, wo) = (h - kh + 1, w - kw + 1);
            let xd = x.data();
            let wd = inputs[1].data();
            let mut out = vec![T::zero(); n * c * ho * wo];
            for b in 0..n {
                let xb = &xd[b * h * w..(b + 1) * h * w];
                for f in 0..c {
                    let wf = &wd[f * kh * kw..(f + 1) * kh * kw];
                    let ob = &mut out[(b * c + f) * ho * wo..(b * c + f + 1) * ho * wo];
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = T::zero();
                            for a in 0..kh {
                                let xr = &xb[(i + a) * w + j..(i + a) * w + j + kw];
                                let wr = &wf[a * kw..(a + 1) * kw];
                                for (&xv, &wv) in xr.iter().zip(wr) {
                                    acc = acc + xv * wv;
                                }
                            }
                            ob[i * wo + j] = acc;
                        }
                    }
                }
            }
            Tensor::new(vec![n, c, ho, wo], out)
        }
        Primitive::MaxOverTime => {
            let cols = last_dim(name, x)?;
            if cols == 0 {
                return Err(shape_err(name, "empty time axis"));
            }
            let out = x
                .data()
                .chunks(cols)
                .map(|r| r.iter().cloned().fold(T::neg_infinity(), T::max))
                .collect();
            Tensor::new(x.shape()[..x.rank() - 1].to_vec(), out)
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let mean = matches!(p, Primitive::Mean { .. });
            match axis {
                None => {
                    let s = x.data().iter().cloned().sum::<T>();
                    let v = if mean {
                        s / lit(x.len().max(1) as f64)
                    } else {
                        s
                    };
                    Ok(Tensor::scalar(v))
                }
                Some(a) => {
                    let (outer, len, inner) = split_axis(name, x.shape(), *a)?;
                    let mut out = vec![T::zero(); outer * inner];
                    let d = x.data();
                    for o in 0..outer {
                        for l in 0..len {
                            let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *dst = *dst + v;
                            }
                        }
                    }
                    if mean && len > 0 {
                        let inv = T::one() / lit(len as f64);
                        out.iter_mut().for_each(|v| *v = *v * inv);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*a);
                    Tensor::new(shape, out)
                }
            }
        }
        Primitive::StopGradient => Ok(x.clone()),
        Primitive::Reshape { shape } => x.reshape(shape),
        Primitive::FakeQuant { params } => {
            let per = channel_len(name, x, params.len())?;
            let mut out = x.data().to_vec();
            for (ch, chunk) in out.chunks_mut(per.max(1)).enumerate() {
                let qp = &params[if params.len() == 1 { 0 } else { ch }];
                for v in chunk.iter_mut() {
                    *v = quant::fake_quant_value(*v, qp);
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
    }
}

/// Vector-Jacobian products: one optional gradient per input.
pub(crate) fn backward_primitive<T: Scalar>(
    p: &Primitive,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    let name = p.name();
    let x = inputs[0];
    Ok(match p {
        Primitive::MatMul => {
            let (n, k) = as_matrix(name, x)?;
            let (_, m) = as_matrix(name, inputs[1])?;
            let mut da = vec![T::zero(); n * k];
            // dA = G B^T
            let b = inputs[1].data();
            let gd = g.data();
            for i in 0..n {
                let gr = &gd[i * m..(i + 1) * m];
                for t in 0..k {
                    let br = &b[t * m..(t + 1) * m];
                    da[i * k + t] = gr.iter().zip(br).map(|(&u, &v)| u * v).sum();
                }
            }
            // dB = A^T G
            let a = x.data();
            let mut db = vec![T::zero(); k * m];
            for i in 0..n {
                let gr = &gd[i * m..(i + 1) * m];
                for t in 0..k {
                    let av = a[i * k + t];
                    if av == T::zero() {
                        continue;
                    }
                    let row = &mut db[t * m..(t + 1) * m];
                    for (d, &gv) in row.iter_mut().zip(gr) {
                        *d = *d + av * gv;
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![n, k], da)?),
                Some(Tensor::new(vec![k, m], db)?),
            ]
        }
        Primitive::Transpose => vec![Some(eval_primitive(&Primitive::Transpose, &[g])?)],
        Primitive::Add => {
            let y = inputs[1];
            let dy = match broadcast_map(name, x.shape(), y.shape())? {
                None => g.clone(),
                Some(map) => {
                    let mut acc = vec![T::zero(); y.len()];
                    for (&gv, &j) in g.data().iter().zip(&map) {
                        acc[j] = acc[j] + gv;
                    }
                    Tensor::new(y.shape().to_vec(), acc)?
                }
            };
            vec![Some(g.clone()), Some(dy)]
        }
        Primitive::Mul => {
            let y = inputs[1];
            match broadcast_map(name, x.shape(), y.shape())? {
                None => {
                    let dx = zip_map(g, y, |a, b| a * b);
                    let dy = zip_map(g, x, |a, b| a * b);
                    vec![Some(dx), Some(dy)]
                }
                Some(map) => {
                    let yd = y.data();
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(&map)
                        .map(|(&gv, &j)| gv * yd[j])
                        .collect();
                    let mut dy = vec![T::zero(); y.len()];
                    for ((&gv, &xv), &j) in g.data().iter().zip(x.data()).zip(&map) {
                        dy[j] = dy[j] + gv * xv;
                    }
                    vec![
                        Some(Tensor::new(x.shape().to_vec(), dx)?),
                        Some(Tensor::new(y.shape().to_vec(), dy)?),
                    ]
                }
            }
        }
        Primitive::Scale(c) => {
            let c: T = lit(*c);
            vec![Some(g.map(|v| v * c))]
        }
        Primitive::Concat { axis } => {
            let (outer, _, inner) = split_axis(name, out.shape(), *axis)?;
            let total = out.shape()[*axis];
            let mut grads = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for inp in inputs {
                let len = inp.shape()[*axis];
                let mut d = Vec::with_capacity(inp.len());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    d.extend_from_slice(&g.data()[start..start + len * inner]);
                }
                grads.push(Some(Tensor::new(inp.shape().to_vec(), d)?));
                offset += len;
            }
            grads
        }
        Primitive::Gather { indices } => {
            let (_, d) = as_matrix(name, x)?;
            let mut dt = Tensor::zeros(x.shape());
            let dd = dt.data_mut();
            for (r, &i) in indices.iter().enumerate() {
                let src = &g.data()[r * d..(r + 1) * d];
                for (dst, &v) in dd[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *dst = *dst + v;
                }
            }
            vec![Some(dt)]
        }
        Primitive::Softmax => {
            let cols = last_dim(name, x)?;
            let mut dx = vec![T::zero(); x.len()];
            for ((dr, yr), gr) in dx
                .chunks_mut(cols)
                .zip(out.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (gv - dot);
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
        }
        Primitive::LogSoftmax => {
            let cols = last_dim(name, x)?;
            let mut dx = vec![T::zero(); x.len()];
            for ((dr, yr), gr) in dx
                .chunks_mut(cols)
                .zip(out.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let gs: T = gr.iter().cloned().sum();
                for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = gv - y.exp() * gs;
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
        }
        Primitive::LayerNorm { eps } => {
            let cols = last_dim(name, x)?;
            let eps: T = lit(*eps);
            let n: T = lit(cols as f64);
            let mut dx = vec![T::zero(); x.len()];
            for (((dr, xr), yr), gr) in dx
                .chunks_mut(cols)
                .zip(x.data().chunks(cols))
                .zip(out.data().chunks(cols))
                .zip(g.data().chunks(cols))
            {
                let mean = xr.iter().cloned().sum::<T>() / n;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                let gm = gr.iter().cloned().sum::<T>() / n;
                let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = inv * (gv - gm - y * gym);
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
        }
        Primitive::Relu => vec![Some(zip_map(g, x, |gv, xv| {
            if xv > T::zero() {
                gv
            } else {
                T::zero()
            }
        }))],
        Primitive::Sigmoid => vec![Some(zip_map(g, out, |gv, y| gv * y * (T::one() - y)))],
        Primitive::Tanh => vec![Some(zip_map(g, out, |gv, y| gv * (T::one() - y * y)))],
        Primitive::Abs => vec![Some(zip_map(g, x, |gv, xv| {
            if xv > T::zero() {
                gv
            } else if xv < T::zero() {
                -gv
            } else {
                T::zero()
            }
        }))],
        Primitive::Conv2d => {
            let (n, h, w) = as_rank3(name, x)?;
            let (c, kh, kw) = as_rank3(name, inputs[1])?;
            let (ho, wo) = (h - kh + 1, w - kw + 1);
            let xd = x.data();
            let wd = inputs[1].data();
            let gd = g.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); inputs[1].len()];
            for b in 0..n {
                for f in 0..c {
                    let gb = &gd[(b * c + f) * ho * wo..(b * c + f + 1) * ho * wo];
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = gb[i * wo + j];
                            if gv == T::zero() {
                                continue;
                            }
                            for a in 0..kh {
                                for e in 0..kw {
                                    let xi = b * h * w + (i + a) * w + j + e;
                                    let wi = f * kh * kw + a * kw + e;
                                    dx[xi] = dx[xi] + gv * wd[wi];
                                    dw[wi] = dw[wi] + gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(x.shape().to_vec(), dx)?),
                Some(Tensor::new(inputs[1].shape().to_vec(), dw)?),
            ]
        }
        Primitive::MaxOverTime => {
            let cols = last_dim(name, x)?;
            let mut dx = vec![T::zero(); x.len()];
            for (r, (row, dr)) in x.data().chunks(cols).zip(dx.chunks_mut(cols)).enumerate() {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                dr[best] = g.data()[r];
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let mean = matches!(p, Primitive::Mean { .. });
            match axis {
                None => {
                    let mut v = g.item();
                    if mean {
                        v = v / lit(x.len().max(1) as f64);
                    }
                    vec![Some(Tensor::full(x.shape(), v))]
                }
                Some(a) => {
                    let (outer, len, inner) = split_axis(name, x.shape(), *a)?;
                    let scale = if mean && len > 0 {
                        T::one() / lit(len as f64)
                    } else {
                        T::one()
                    };
                    let mut dx = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = v * scale;
                            }
                        }
                    }
                    vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
                }
            }
        }
        Primitive::StopGradient => vec![None],
        Primitive::Reshape { .. } => vec![Some(g.reshape(x.shape())?)],
        Primitive::FakeQuant { params } => {
            let per = channel_len(name, x, params.len())?;
            let mut dx = g.data().to_vec();
            for (ch, (dchunk, xchunk)) in dx
                .chunks_mut(per.max(1))
                .zip(x.data().chunks(per.max(1)))
                .enumerate()
            {
                let qp = &params[if params.len() == 1 { 0 } else { ch }];
                for (d, &v) in dchunk.iter_mut().zip(xchunk) {
                    if !quant::in_clamp_range(v, qp) {
                        *d = T::zero();
                    }
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
        }
    })
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&u, &v)| f(u, v))
            .collect(),
    )
    .expect("same shape")
}

/// `out[n, m] = a[n, k] * b[k, m]`
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn as_matrix<T: Scalar>(name: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        s => Err(shape_err(
            name,
            format!("expected a matrix, got shape {:?}", s),
        )),
    }
}

fn as_rank3<T: Scalar>(name: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(shape_err(
            name,
            format!("expected rank 3, got shape {:?}", s),
        )),
    }
}

fn last_dim<T: Scalar>(name: &'static str, t: &Tensor<T>) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| shape_err(name, "scalar input has no last axis"))
}

fn channel_len<T: Scalar>(name: &'static str, t: &Tensor<T>, n_params: usize) -> Result<usize> {
    if n_params == 0 {
        return Err(shape_err(name, "no quantization parameters"));
    }
    if n_params == 1 {
        return Ok(t.len());
    }
    let c = t.shape().first().copied().unwrap_or(1);
    if c != n_params {
        return Err(shape_err(
            name,
            format!("{} channels but {} parameter sets", c, n_params),
        ));
    }
    Ok(t.len() / c.max(1))
}

fn split_axis(name: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(
            name,
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn concat<T: Scalar>(name: &'static str, inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs[0].shape();
    if axis >= first.len() {
        return Err(shape_err(name, format!("axis {} out of range", axis)));
    }
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.len()
            || s.iter()
                .zip(first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err(
                name,
                format!("shapes {:?} and {:?} differ off axis {}", first, s, axis),
            ));
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(name, first, axis)?;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Index map for broadcasting `rhs` into `lhs`; `None` when shapes are equal.
fn broadcast_map(name: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Option<Vec<usize>>> {
    if lhs == rhs {
        return Ok(None);
    }
    if rhs.len() > lhs.len() {
        return Err(shape_err(
            name,
            format!("cannot broadcast {:?} into {:?}", rhs, lhs),
        ));
    }
    let off = lhs.len() - rhs.len();
    let mut strides = vec![0usize; lhs.len()];
    let mut s = 1;
    for i in (0..rhs.len()).rev() {
        let (r, l) = (rhs[i], lhs[off + i]);
        if r == l {
            strides[off + i] = s;
        } else if r != 1 {
            return Err(shape_err(
                name,
                format!("cannot broadcast {:?} into {:?}", rhs, lhs),
            ));
        }
        s *= r;
    }
    let n: usize = lhs.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; lhs.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..lhs.len()).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < lhs[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}
