use super::{numel, shape_err, BackwardFn, Result, Tensor, TensorError};

/// Differentiable primitives. Attribute-carrying variants hold the static
/// part of the op (axis, indices, bounds); tensors are passed separately.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Neg,
    Reciprocal,
    Relu,
    Sigmoid,
    Softplus,
    Silu,
    Clamp { min: f64, max: f64 },
    Softmax { axis: usize },
    Concat { axis: usize },
    Gather { indices: Vec<usize> },
    Scatter { indices: Vec<usize>, rows: usize },
    Mean { axis: usize },
    Sum { axis: usize },
    Max { axis: usize },
    SumAll,
    LayerNorm { eps: f64 },
    Conv1d,
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    Transpose,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Neg => "neg",
            Op::Reciprocal => "reciprocal",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Silu => "silu",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::Max { .. } => "max",
            Op::SumAll => "sum_all",
            Op::LayerNorm { .. } => "layernorm",
            Op::Conv1d => "conv1d",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Transpose => "transpose",
        }
    }

    /// Looks up an op by name with default attributes (axis 0, eps 1e-5,
    /// empty index lists). Attributes can be adjusted on the returned value.
    pub fn by_name(name: &str) -> Result<Op> {
        Ok(match name {
            "matmul" => Op::MatMul,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "exp" => Op::Exp,
            "log" => Op::Log,
            "neg" => Op::Neg,
            "reciprocal" => Op::Reciprocal,
            "relu" => Op::Relu,
            "sigmoid" => Op::Sigmoid,
            "softplus" => Op::Softplus,
            "silu" => Op::Silu,
            "clamp" => Op::Clamp { min: f64::NEG_INFINITY, max: f64::INFINITY },
            "softmax" => Op::Softmax { axis: 0 },
            "concat" => Op::Concat { axis: 0 },
            "gather" => Op::Gather { indices: Vec::new() },
            "scatter" => Op::Scatter { indices: Vec::new(), rows: 0 },
            "mean" => Op::Mean { axis: 0 },
            "sum" => Op::Sum { axis: 0 },
            "max" => Op::Max { axis: 0 },
            "sum_all" => Op::SumAll,
            "layernorm" => Op::LayerNorm { eps: 1e-5 },
            "conv1d" => Op::Conv1d,
            "slice" => Op::Slice { axis: 0, start: 0, end: 0 },
            "reshape" => Op::Reshape { shape: Vec::new() },
            "transpose" => Op::Transpose,
            other => return Err(TensorError::UnsupportedPrimitive(other.to_string())),
        })
    }
}

fn arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return shape_err(op.name(), format!("expected {n} inputs, got {}", inputs.len()));
    }
    Ok(())
}

/// Applies `op` to `inputs`, recording a tape node when any input requires
/// gradients.
pub fn apply_primitive(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return shape_err("concat", "no inputs");
            }
            return concat(inputs, *axis);
        }
        Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Conv1d => arity(op, inputs, 2)?,
        _ => arity(op, inputs, 1)?,
    }
    let x = inputs[0];
    match op {
        Op::MatMul => matmul(x, inputs[1]),
        Op::Add => binary(x, inputs[1], Binary::Add),
        Op::Sub => binary(x, inputs[1], Binary::Sub),
        Op::Mul => binary(x, inputs[1], Binary::Mul),
        Op::Exp => Ok(x.exp()),
        Op::Log => Ok(x.log()),
        Op::Neg => Ok(x.neg()),
        Op::Reciprocal => Ok(x.reciprocal()),
        Op::Relu => Ok(x.relu()),
        Op::Sigmoid => Ok(x.sigmoid()),
        Op::Softplus => Ok(x.softplus()),
        Op::Silu => Ok(unary(
            "silu",
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )),
        Op::Clamp { min, max } => {
            let (lo, hi) = (*min, *max);
            Ok(unary(
                "clamp",
                x,
                move |v| v.clamp(lo, hi),
                move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
            ))
        }
        Op::Softmax { axis } => softmax(x, *axis),
        Op::Gather { indices } => gather(x, indices),
        Op::Scatter { indices, rows } => scatter(x, indices, *rows),
        Op::Mean { axis } => reduce_axis(x, *axis, true),
        Op::Sum { axis } => reduce_axis(x, *axis, false),
        Op::Max { axis } => max_axis(x, *axis),
        Op::SumAll => Ok(sum_all(x)),
        Op::LayerNorm { eps } => layernorm(x, *eps),
        Op::Conv1d => conv1d(x, inputs[1]),
        Op::Slice { axis, start, end } => slice(x, *axis, *start, *end),
        Op::Reshape { shape } => reshape(x, shape),
        Op::Transpose => transpose(x),
        Op::Concat { .. } => unreachable!(),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn unary(
    name: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let backward: BackwardFn = Box::new(move |g, inputs, out| {
        let xs = inputs[0].data();
        vec![Some(
            g.iter()
                .zip(xs)
                .zip(out)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect(),
        )]
    });
    Tensor::from_op(name, x.shape().to_vec(), data, &[x], backward)
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    Scalar,
    /// rhs indexes the last axis of lhs.
    Row(usize),
    /// rhs has one value per row of a rank-2 lhs.
    Col(usize),
}

impl Bcast {
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row(n) => i % n,
            Bcast::Col(n) => i / n,
        }
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if numel(b) == 1 {
        return Ok(Bcast::Scalar);
    }
    let last = a.last().copied().unwrap_or(1);
    let row_shape = b.len() == 1 || (b.len() == 2 && b[0] == 1);
    if row_shape && *b.last().unwrap() == last && !a.is_empty() {
        return Ok(Bcast::Row(last));
    }
    if a.len() == 2 && b.len() == 2 && b[1] == 1 && b[0] == a[0] {
        return Ok(Bcast::Col(a[1]));
    }
    shape_err(op, format!("cannot broadcast rhs {b:?} onto lhs {a:?}"))
}

fn binary(a: &Tensor, b: &Tensor, kind: Binary) -> Result<Tensor> {
    let name = match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    };
    let bc = broadcast_kind(name, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = ad
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = bd[bc.index(i)];
            match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            }
        })
        .collect();
    let backward: BackwardFn = Box::new(move |g, inputs, _| {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a.requires_grad().then(|| match kind {
            Binary::Add | Binary::Sub => g.to_vec(),
            Binary::Mul => {
                let bd = b.data();
                g.iter().enumerate().map(|(i, g)| g * bd[bc.index(i)]).collect()
            }
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![0.0; b.numel()];
            let ad = a.data();
            for (i, &gi) in g.iter().enumerate() {
                let j = bc.index(i);
                gb[j] += match kind {
                    Binary::Add => gi,
                    Binary::Sub => -gi,
                    Binary::Mul => gi * ad[i],
                };
            }
            gb
        });
        vec![ga, gb]
    });
    Ok(Tensor::from_op(name, a.shape().to_vec(), data, &[a, b], backward))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return shape_err(
            "matmul",
            format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        );
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return shape_err(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        );
    }
    let data = matmul_kernel(a.data(), b.data(), m, k, n);
    let backward: BackwardFn = Box::new(move |g, inputs, _| {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a.requires_grad().then(|| {
            // dA = G · Bᵀ
            let bd = b.data();
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bd[p * n..(p + 1) * n];
                    ga[i * k + p] = dot(grow, brow);
                }
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            // dB = Aᵀ · G
            let ad = a.data();
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let out = &mut gb[p * n..(p + 1) * n];
                    for (o, &gv) in out.iter_mut().zip(grow) {
                        *o += aip * gv;
                    }
                }
            }
            gb
        });
        vec![ga, gb]
    });
    Ok(Tensor::from_op("matmul", vec![m, n], data, &[a, b], backward))
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// (outer, axis length, inner) for a row-major shape split at `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(op, format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis("softmax", x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| o * n * inner + k * inner + i;
            let mx = (0..n).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..n {
                let e = (xd[idx(k)] - mx).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..n {
                out[idx(k)] /= s;
            }
        }
    }
    let backward: BackwardFn = Box::new(move |g, _, y| {
        let mut gx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let s: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                for k in 0..n {
                    gx[idx(k)] = y[idx(k)] * (g[idx(k)] - s);
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("softmax", x.shape().to_vec(), out, &[x], backward))
}

fn reduce_axis(x: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    let name = if mean { "mean" } else { "sum" };
    let (outer, n, inner) = split_axis(name, x.shape(), axis)?;
    if n == 0 {
        return shape_err(name, "cannot reduce an empty axis");
    }
    let scale = if mean { 1.0 / n as f64 } else { 1.0 };
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = o * n * inner + k * inner;
            for i in 0..inner {
                out[o * inner + i] += xd[base + i];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    let backward: BackwardFn = Box::new(move |g, _, _| {
        let mut gx = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = o * n * inner + k * inner;
                for i in 0..inner {
                    gx[base + i] = g[o * inner + i] * scale;
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op(name, without_axis(x.shape(), axis), out, &[x], backward))
}

fn max_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis("max", x.shape(), axis)?;
    if n == 0 {
        return shape_err("max", "cannot reduce an empty axis");
    }
    let xd = x.data();
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = o * n * inner + k * inner;
            for i in 0..inner {
                let v = xd[base + i];
                if v > out[o * inner + i] {
                    out[o * inner + i] = v;
                    arg[o * inner + i] = base + i;
                }
            }
        }
    }
    let total = xd.len();
    let backward: BackwardFn = Box::new(move |g, _, _| {
        let mut gx = vec![0.0; total];
        for (j, &src) in arg.iter().enumerate() {
            gx[src] += g[j];
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("max", without_axis(x.shape(), axis), out, &[x], backward))
}

fn sum_all(x: &Tensor) -> Tensor {
    let s = x.data().iter().sum();
    let n = x.numel();
    let backward: BackwardFn = Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]);
    Tensor::from_op("sum_all", Vec::new(), vec![s], &[x], backward)
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0].shape();
    let (outer, _, inner) = split_axis("concat", first, axis)?;
    let mut lens = Vec::with_capacity(inputs.len());
    for t in inputs {
        let s = t.shape();
        let same_rank = s.len() == first.len();
        let compatible = same_rank
            && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return shape_err(
                "concat",
                format!("shape {s:?} incompatible with {first:?} along axis {axis}"),
            );
        }
        lens.push(s[axis]);
    }
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (t, &len) in inputs.iter().zip(&lens) {
            let chunk = len * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    let lens_bw = lens.clone();
    let backward: BackwardFn = Box::new(move |g, inputs, _| {
        let mut grads: Vec<Vec<f64>> =
            lens_bw.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (gi, &len) in grads.iter_mut().zip(&lens_bw) {
                let chunk = len * inner;
                gi.extend_from_slice(&g[pos..pos + chunk]);
                pos += chunk;
            }
        }
        grads
            .into_iter()
            .zip(inputs)
            .map(|(g, t)| t.requires_grad().then_some(g))
            .collect()
    });
    Ok(Tensor::from_op("concat", shape, out, inputs, backward))
}

fn row_size(shape: &[usize]) -> usize {
    numel(&shape[1..])
}

fn gather(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if x.rank() == 0 {
        return shape_err("gather", "cannot gather from a scalar");
    }
    let n = x.shape()[0];
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return shape_err("gather", format!("index {bad} out of range for {n} rows"));
    }
    let rs = row_size(x.shape());
    let xd = x.data();
    let mut out = Vec::with_capacity(indices.len() * rs);
    for &i in indices {
        out.extend_from_slice(&xd[i * rs..(i + 1) * rs]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    let idx = indices.to_vec();
    let total = x.numel();
    let backward: BackwardFn = Box::new(move |g, _, _| {
        let mut gx = vec![0.0; total];
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..rs {
                gx[i * rs + c] += g[k * rs + c];
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("gather", shape, out, &[x], backward))
}

fn scatter(x: &Tensor, indices: &[usize], rows: usize) -> Result<Tensor> {
    if x.rank() == 0 || x.shape()[0] != indices.len() {
        return shape_err(
            "scatter",
            format!("{} indices for input shape {:?}", indices.len(), x.shape()),
        );
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return shape_err("scatter", format!("index {bad} out of range for {rows} rows"));
    }
    let rs = row_size(x.shape());
    let xd = x.data();
    let mut out = vec![0.0; rows * rs];
    for (k, &i) in indices.iter().enumerate() {
        for c in 0..rs {
            out[i * rs + c] += xd[k * rs + c];
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows;
    let idx = indices.to_vec();
    let backward: BackwardFn = Box::new(move |g, _, _| {
        let mut gx = Vec::with_capacity(idx.len() * rs);
        for &i in &idx {
            gx.extend_from_slice(&g[i * rs..(i + 1) * rs]);
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("scatter", shape, out, &[x], backward))
}

fn layernorm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let Some(&d) = x.shape().last() else {
        return shape_err("layernorm", "scalar input");
    };
    if d == 0 {
        return shape_err("layernorm", "empty last axis");
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    let backward: BackwardFn = Box::new(move |g, _, y| {
        let mut gx = vec![0.0; y.len()];
        for r in 0..rows {
            let gr = &g[r * d..(r + 1) * d];
            let yr = &y[r * d..(r + 1) * d];
            let mg = gr.iter().sum::<f64>() / d as f64;
            let mgy = dot(gr, yr) / d as f64;
            for c in 0..d {
                gx[r * d + c] = rstd[r] * (gr[c] - mg - yr[c] * mgy);
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("layernorm", x.shape().to_vec(), out, &[x], backward))
}

/// Same-padded 1D convolution over the token axis.
/// `x`: [L, C_in], `w`: [k, C_in, C_out] with odd k.
fn conv1d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 3 {
        return shape_err(
            "conv1d",
            format!("expected [L, C_in] and [k, C_in, C_out], got {:?} and {:?}", x.shape(), w.shape()),
        );
    }
    let (l, cin) = (x.shape()[0], x.shape()[1]);
    let (k, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wcin != cin {
        return shape_err("conv1d", format!("input channels {cin} vs kernel {wcin}"));
    }
    if k % 2 == 0 {
        return shape_err("conv1d", format!("same padding needs an odd kernel, got {k}"));
    }
    let half = k / 2;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; l * cout];
    for t in 0..l {
        let orow = &mut out[t * cout..(t + 1) * cout];
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(half).filter(|&s| s < l) else {
                continue;
            };
            let xrow = &xd[src * cin..(src + 1) * cin];
            for (c, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[(j * cin + c) * cout..(j * cin + c + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    let backward: BackwardFn = Box::new(move |g, inputs, _| {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (xd, wd) = (x.data(), w.data());
        let mut gx = x.requires_grad().then(|| vec![0.0; l * cin]);
        let mut gw = w.requires_grad().then(|| vec![0.0; k * cin * cout]);
        for t in 0..l {
            let grow = &g[t * cout..(t + 1) * cout];
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(half).filter(|&s| s < l) else {
                    continue;
                };
                for c in 0..cin {
                    let woff = (j * cin + c) * cout;
                    if let Some(gx) = gx.as_mut() {
                        gx[src * cin + c] += dot(grow, &wd[woff..woff + cout]);
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xv = xd[src * cin + c];
                        for (o, &gv) in gw[woff..woff + cout].iter_mut().zip(grow) {
                            *o += xv * gv;
                        }
                    }
                }
            }
        }
        vec![gx, gw]
    });
    Ok(Tensor::from_op("conv1d", vec![l, cout], out, &[x, w], backward))
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis("slice", x.shape(), axis)?;
    if start > end || end > n {
        return shape_err("slice", format!("range {start}..{end} invalid for axis length {n}"));
    }
    let len = end - start;
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner;
        out.extend_from_slice(&xd[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let total = x.numel();
    let backward: BackwardFn = Box::new(move |g, _, _| {
        let mut gx = vec![0.0; total];
        for o in 0..outer {
            let base = o * n * inner;
            gx[base + start * inner..base + end * inner]
                .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("slice", shape, out, &[x], backward))
}

fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != x.numel() {
        return shape_err("reshape", format!("{:?} -> {shape:?} changes element count", x.shape()));
    }
    let backward: BackwardFn = Box::new(|g, _, _| vec![Some(g.to_vec())]);
    Ok(Tensor::from_op("reshape", shape.to_vec(), x.data().to_vec(), &[x], backward))
}

fn transpose(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return shape_err("transpose", format!("expected rank 2, got {:?}", x.shape()));
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    let backward: BackwardFn = Box::new(move |g, _, _| {
        let mut gx = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                gx[i * n + j] = g[j * m + i];
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op("transpose", vec![n, m], out, &[x], backward))
}

// Method sugar. Unary ops cannot fail on shape, so they return Tensor directly.
impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul(self, rhs)
    }
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, Binary::Add)
    }
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, Binary::Sub)
    }
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, Binary::Mul)
    }
    pub fn scale(&self, k: f64) -> Tensor {
        binary(self, &Tensor::scalar(k), Binary::Mul).expect("scalar broadcast")
    }
    pub fn exp(&self) -> Tensor {
        unary("exp", self, f64::exp, |_, y| y)
    }
    pub fn log(&self) -> Tensor {
        unary("log", self, f64::ln, |x, _| 1.0 / x)
    }
    pub fn neg(&self) -> Tensor {
        unary("neg", self, |v| -v, |_, _| -1.0)
    }
    pub fn reciprocal(&self) -> Tensor {
        unary("reciprocal", self, |v| 1.0 / v, |_, y| -y * y)
    }
    pub fn relu(&self) -> Tensor {
        unary("relu", self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }
    pub fn sigmoid(&self) -> Tensor {
        unary("sigmoid", self, sigmoid, |_, y| y * (1.0 - y))
    }
    pub fn softplus(&self) -> Tensor {
        unary("softplus", self, softplus, |x, _| sigmoid(x))
    }
    pub fn silu(&self) -> Tensor {
        apply_primitive(&Op::Silu, &[self]).expect("unary")
    }
    pub fn clamp(&self, min: f64, max: f64) -> Tensor {
        apply_primitive(&Op::Clamp { min, max }, &[self]).expect("unary")
    }
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        softmax(self, axis)
    }
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        apply_primitive(&Op::Concat { axis }, parts)
    }
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        gather(self, indices)
    }
    pub fn scatter(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        scatter(self, indices, rows)
    }
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        reduce_axis(self, axis, true)
    }
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        reduce_axis(self, axis, false)
    }
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        max_axis(self, axis)
    }
    pub fn sum_all(&self) -> Tensor {
        sum_all(self)
    }
    pub fn layernorm(&self, eps: f64) -> Result<Tensor> {
        layernorm(self, eps)
    }
    pub fn conv1d(&self, kernel: &Tensor) -> Result<Tensor> {
        conv1d(self, kernel)
    }
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        slice(self, axis, start, end)
    }
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        reshape(self, shape)
    }
    pub fn transpose(&self) -> Result<Tensor> {
        transpose(self)
    }
}
