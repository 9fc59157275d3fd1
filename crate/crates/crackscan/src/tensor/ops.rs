//! Elementwise, normalization, resampling, and loss ops with backward rules.

use super::{make_output, Backward, Tensor};
use crate::error::{Error, Result};

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    let data: Vec<f64> = input.data().iter().map(|&v| v.max(0.0)).collect();
    make_output(
        input.shape().to_vec(),
        data,
        vec![input.clone()],
        Box::new(ReluBackward),
    )
}

struct ReluBackward;

impl Backward for ReluBackward {
    fn op_name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let dx = inputs[0]
            .data()
            .iter()
            .zip(grad_out)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(dx)]
    }
}

/// Per-channel batch normalization over a BxCxHxW tensor.
///
/// Inference mode normalizes with the supplied running statistics. Training
/// mode normalizes with the biased batch statistics and returns updated
/// running statistics, `new = (1 - momentum) * old + momentum * batch`
/// (the running variance update uses the unbiased batch variance). The
/// caller owns swapping the updated stats into its parameter store; tensors
/// themselves stay immutable.
///
/// `eps` may be zero as long as every variance stays positive; a negative
/// `eps` is rejected.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
    training: bool,
    momentum: f64,
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    if input.ndim() != 4 {
        return Err(Error::Shape(format!(
            "batch_norm expects 4-d input, got {:?}",
            input.shape()
        )));
    }
    if eps < 0.0 {
        return Err(Error::InvalidArgument(format!("negative eps {eps}")));
    }
    let c = input.shape()[1];
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.numel() != c {
            return Err(Error::Shape(format!(
                "{name} length {} does not match {c} channels",
                t.numel()
            )));
        }
    }

    let (b, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let plane = h * w;
    let m = (b * plane) as f64;
    let x = input.data();

    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    acc += x[base + i];
                }
            }
            mean[ci] = acc / m;
            let mut acc2 = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    let d = x[base + i] - mean[ci];
                    acc2 += d * d;
                }
            }
            var[ci] = acc2 / m;
        }
        (mean, var)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };

    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let denom = v + eps;
            if denom <= 0.0 {
                f64::NAN
            } else {
                1.0 / denom.sqrt()
            }
        })
        .collect();
    if inv_std.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "variance + eps must be positive in every channel".into(),
        ));
    }

    let g = gamma.data();
    let bt = beta.data();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], g[ci], bt[ci]);
            for i in 0..plane {
                let xh = (x[base + i] - mu) * is;
                xhat[base + i] = xh;
                out[base + i] = xh * ga + be;
            }
        }
    }

    let updated = if training {
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let new_mean: Vec<f64> = running_mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(&o, &bm)| (1.0 - momentum) * o + momentum * bm)
            .collect();
        let new_var: Vec<f64> = running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(&o, &bv)| (1.0 - momentum) * o + momentum * bv * unbias)
            .collect();
        Some((
            Tensor::new(&[c], new_mean)?,
            Tensor::new(&[c], new_var)?,
        ))
    } else {
        None
    };

    let output = make_output(
        input.shape().to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(BatchNormBackward {
            xhat,
            inv_std,
            training,
        }),
    );
    Ok((output, updated))
}

struct BatchNormBackward {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    training: bool,
}

impl Backward for BatchNormBackward {
    fn op_name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = &inputs[0];
        let gamma = inputs[1].data();
        let (b, c, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let plane = h * w;
        let m = (b * plane) as f64;

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    dgamma[ci] += grad_out[base + i] * self.xhat[base + i];
                    dbeta[ci] += grad_out[base + i];
                }
            }
        }

        let mut dx = vec![0.0; input.numel()];
        if self.training {
            // dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
            for ci in 0..c {
                let sum_g = dbeta[ci] / m;
                let sum_gx = dgamma[ci] / m;
                let scale = gamma[ci] * self.inv_std[ci];
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        dx[base + i] = scale
                            * (grad_out[base + i] - sum_g - self.xhat[base + i] * sum_gx);
                    }
                }
            }
        } else {
            // Running statistics are constants: a per-channel affine map.
            for ci in 0..c {
                let scale = gamma[ci] * self.inv_std[ci];
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        dx[base + i] = grad_out[base + i] * scale;
                    }
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

/// Spatial mean per channel: BxCxHxW -> BxCx1x1.
pub fn avg_pool_global(input: &Tensor) -> Result<Tensor> {
    if input.ndim() != 4 {
        return Err(Error::Shape(format!(
            "avg_pool_global expects 4-d input, got {:?}",
            input.shape()
        )));
    }
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0; b * c];
    for (o, chunk) in x.chunks_exact(plane).enumerate() {
        out[o] = chunk.iter().sum::<f64>() / plane as f64;
    }
    Ok(make_output(
        vec![b, c, 1, 1],
        out,
        vec![input.clone()],
        Box::new(GlobalAvgBackward),
    ))
}

struct GlobalAvgBackward;

impl Backward for GlobalAvgBackward {
    fn op_name(&self) -> &'static str {
        "avg_pool_global"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = &inputs[0];
        let plane = input.shape()[2] * input.shape()[3];
        let mut dx = vec![0.0; input.numel()];
        for (o, chunk) in dx.chunks_exact_mut(plane).enumerate() {
            let g = grad_out[o] / plane as f64;
            chunk.fill(g);
        }
        vec![Some(dx)]
    }
}

/// Source coordinate and blend weights for one output position under the
/// half-pixel-center convention, with edges clamped.
#[inline]
fn resample_coords(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize of a BxCxHxW tensor with half-pixel centers and clamped
/// edges. Resizing to the input size reproduces the input exactly.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if input.ndim() != 4 {
        return Err(Error::Shape(format!(
            "bilinear_resize expects 4-d input, got {:?}",
            input.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    let (b, c, in_h, in_w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let x = input.data();
    let mut out = vec![0.0; b * c * out_h * out_w];

    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|i| resample_coords(i, in_h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|i| resample_coords(i, in_w, out_w)).collect();

    let mut o = 0;
    for bc in 0..b * c {
        let base = bc * in_h * in_w;
        for &(y0, y1, fy) in &rows {
            let r0 = base + y0 * in_w;
            let r1 = base + y1 * in_w;
            for &(x0, x1, fx) in &cols {
                let top = x[r0 + x0] * (1.0 - fx) + x[r0 + x1] * fx;
                let bot = x[r1 + x0] * (1.0 - fx) + x[r1 + x1] * fx;
                out[o] = top * (1.0 - fy) + bot * fy;
                o += 1;
            }
        }
    }

    Ok(make_output(
        vec![b, c, out_h, out_w],
        out,
        vec![input.clone()],
        Box::new(BilinearBackward { out_h, out_w }),
    ))
}

struct BilinearBackward {
    out_h: usize,
    out_w: usize,
}

impl Backward for BilinearBackward {
    fn op_name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = &inputs[0];
        let (b, c, in_h, in_w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let rows: Vec<(usize, usize, f64)> =
            (0..self.out_h).map(|i| resample_coords(i, in_h, self.out_h)).collect();
        let cols: Vec<(usize, usize, f64)> =
            (0..self.out_w).map(|i| resample_coords(i, in_w, self.out_w)).collect();
        let mut dx = vec![0.0; input.numel()];
        let mut o = 0;
        for bc in 0..b * c {
            let base = bc * in_h * in_w;
            for &(y0, y1, fy) in &rows {
                let r0 = base + y0 * in_w;
                let r1 = base + y1 * in_w;
                for &(x0, x1, fx) in &cols {
                    let g = grad_out[o];
                    o += 1;
                    dx[r0 + x0] += g * (1.0 - fx) * (1.0 - fy);
                    dx[r0 + x1] += g * fx * (1.0 - fy);
                    dx[r1 + x0] += g * (1.0 - fx) * fy;
                    dx[r1 + x1] += g * fx * fy;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Concatenate tensors along `axis`; all other extents must agree.
pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
    if axis >= first.ndim() {
        return Err(Error::Shape(format!(
            "concat axis {axis} out of range for {:?}",
            first.shape()
        )));
    }
    let mut axis_total = 0;
    for t in inputs {
        if t.ndim() != first.ndim() {
            return Err(Error::Shape("concat rank mismatch".into()));
        }
        for (d, (&a, &b)) in first.shape().iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::Shape(format!(
                    "concat extent mismatch off axis: {:?} vs {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
        }
        axis_total += t.shape()[axis];
    }

    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();

    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis] * inner;
            let base = o * len;
            out.extend_from_slice(&t.data()[base..base + len]);
        }
    }

    let sizes: Vec<usize> = inputs.iter().map(|t| t.shape()[axis]).collect();
    Ok(make_output(
        out_shape,
        out,
        inputs.to_vec(),
        Box::new(ConcatBackward { axis, sizes, inner, outer }),
    ))
}

struct ConcatBackward {
    axis: usize,
    sizes: Vec<usize>,
    inner: usize,
    outer: usize,
}

impl Backward for ConcatBackward {
    fn op_name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let _ = self.axis;
        let total: usize = self.sizes.iter().sum::<usize>() * self.inner;
        let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.numel()]).collect();
        for o in 0..self.outer {
            let mut offset = 0;
            for (gi, &sz) in self.sizes.iter().enumerate() {
                let len = sz * self.inner;
                let src = o * total + offset;
                let dst = o * len;
                grads[gi][dst..dst + len].copy_from_slice(&grad_out[src..src + len]);
                offset += len;
            }
        }
        grads.into_iter().map(Some).collect()
    }
}

/// Fully connected layer: input BxF, weight OxF, out = x W^T + b.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if input.ndim() != 2 || weight.ndim() != 2 || input.shape()[1] != weight.shape()[1] {
        return Err(Error::Shape(format!(
            "linear expects BxF input and OxF weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let (b, f) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    if let Some(bs) = bias {
        if bs.numel() != o {
            return Err(Error::Shape(format!(
                "bias length {} does not match {o} outputs",
                bs.numel()
            )));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; b * o];
    for bi in 0..b {
        for oi in 0..o {
            let mut acc = bias.map_or(0.0, |t| t.data()[oi]);
            let xr = bi * f;
            let wr = oi * f;
            for k in 0..f {
                acc += x[xr + k] * w[wr + k];
            }
            out[bi * o + oi] = acc;
        }
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(t) = bias {
        inputs.push(t.clone());
    }
    Ok(make_output(
        vec![b, o],
        out,
        inputs,
        Box::new(LinearBackward { has_bias: bias.is_some() }),
    ))
}

struct LinearBackward {
    has_bias: bool,
}

impl Backward for LinearBackward {
    fn op_name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let w = inputs[1].data();
        let (b, f) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let o = inputs[1].shape()[0];
        let mut dx = vec![0.0; b * f];
        let mut dw = vec![0.0; o * f];
        for bi in 0..b {
            for oi in 0..o {
                let g = grad_out[bi * o + oi];
                if g == 0.0 {
                    continue;
                }
                for k in 0..f {
                    dx[bi * f + k] += g * w[oi * f + k];
                    dw[oi * f + k] += g * x[bi * f + k];
                }
            }
        }
        let mut grads = vec![Some(dx), Some(dw)];
        if self.has_bias {
            let mut db = vec![0.0; o];
            for bi in 0..b {
                for oi in 0..o {
                    db[oi] += grad_out[bi * o + oi];
                }
            }
            grads.push(Some(db));
        }
        grads
    }
}

fn axis_spans(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Exp-normalization along `axis`, computed with max subtraction.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_spans(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    Ok(make_output(
        input.shape().to_vec(),
        out.clone(),
        vec![input.clone()],
        Box::new(SoftmaxBackward { axis, probs: out }),
    ))
}

struct SoftmaxBackward {
    axis: usize,
    probs: Vec<f64>,
}

impl Backward for SoftmaxBackward {
    fn op_name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (outer, len, inner) = axis_spans(inputs[0].shape(), self.axis).unwrap();
        let mut dx = vec![0.0; grad_out.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut dot = 0.0;
                for j in 0..len {
                    dot += grad_out[idx(j)] * self.probs[idx(j)];
                }
                for j in 0..len {
                    dx[idx(j)] = self.probs[idx(j)] * (grad_out[idx(j)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Mean negative log softmax probability of the target class.
///
/// Accepts BxK logits with B targets, or BxKxHxW logits with B*H*W targets
/// in row-major (b, h, w) order.
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (items, k, strided) = match logits.ndim() {
        2 => (logits.shape()[0], logits.shape()[1], None),
        4 => {
            let (b, k, h, w) = (
                logits.shape()[0],
                logits.shape()[1],
                logits.shape()[2],
                logits.shape()[3],
            );
            (b * h * w, k, Some((h * w, k)))
        }
        _ => {
            return Err(Error::Shape(format!(
                "cross_entropy_loss expects 2-d or 4-d logits, got {:?}",
                logits.shape()
            )))
        }
    };
    if targets.len() != items {
        return Err(Error::Shape(format!(
            "{} targets for {items} scored items",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!(
            "target class {bad} out of range for {k} classes"
        )));
    }

    let x = logits.data();
    // Flat index of (item, class) under either layout.
    let class_idx = move |item: usize, j: usize| -> usize {
        match strided {
            None => item * k + j,
            Some((plane, kk)) => {
                let b = item / plane;
                let p = item % plane;
                (b * kk + j) * plane + p
            }
        }
    };

    let mut probs = vec![0.0; x.len()];
    let mut loss = 0.0;
    for item in 0..items {
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            max = max.max(x[class_idx(item, j)]);
        }
        let mut sum = 0.0;
        for j in 0..k {
            let e = (x[class_idx(item, j)] - max).exp();
            probs[class_idx(item, j)] = e;
            sum += e;
        }
        for j in 0..k {
            probs[class_idx(item, j)] /= sum;
        }
        loss -= probs[class_idx(item, targets[item])].ln();
    }
    loss /= items as f64;

    Ok(make_output(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(CrossEntropyBackward {
            probs,
            targets: targets.to_vec(),
            strided,
            k,
        }),
    ))
}

struct CrossEntropyBackward {
    probs: Vec<f64>,
    targets: Vec<usize>,
    strided: Option<(usize, usize)>,
    k: usize,
}

impl Backward for CrossEntropyBackward {
    fn op_name(&self) -> &'static str {
        "cross_entropy_loss"
    }

    fn backward(&self, _inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let items = self.targets.len();
        let scale = grad_out[0] / items as f64;
        let k = self.k;
        let class_idx = |item: usize, j: usize| -> usize {
            match self.strided {
                None => item * k + j,
                Some((plane, kk)) => {
                    let b = item / plane;
                    let p = item % plane;
                    (b * kk + j) * plane + p
                }
            }
        };
        let mut dx = vec![0.0; self.probs.len()];
        for item in 0..items {
            for j in 0..k {
                let idx = class_idx(item, j);
                let onehot = if j == self.targets[item] { 1.0 } else { 0.0 };
                dx[idx] = (self.probs[idx] - onehot) * scale;
            }
        }
        vec![Some(dx)]
    }
}

/// Elementwise product with limited broadcasting: equal rank, and each
/// extent either matches or is 1 on one side.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != b.ndim() {
        return Err(Error::Shape(format!(
            "mul rank mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out_shape = Vec::with_capacity(a.ndim());
    for (&da, &db) in a.shape().iter().zip(b.shape()) {
        if da == db || da == 1 || db == 1 {
            out_shape.push(da.max(db));
        } else {
            return Err(Error::Shape(format!(
                "mul extent mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    let out = broadcast_apply(a, b, &out_shape, |x, y| x * y);
    Ok(make_output(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(MulBackward),
    ))
}

fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out_shape[i] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn broadcast_apply(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let xa = a.data();
    let xb = b.data();
    let ndim = out_shape.len();
    let mut idx = vec![0usize; ndim];
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..ndim {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        out.push(f(xa[ia], xb[ib]));
        for d in (0..ndim).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

struct MulBackward;

impl Backward for MulBackward {
    fn op_name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let a = &inputs[0];
        let b = &inputs[1];
        let out_shape: Vec<usize> = a
            .shape()
            .iter()
            .zip(b.shape())
            .map(|(&x, &y)| x.max(y))
            .collect();
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut da = vec![0.0; a.numel()];
        let mut db = vec![0.0; b.numel()];
        let ndim = out_shape.len();
        let mut idx = vec![0usize; ndim];
        for &g in grad_out {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..ndim {
                ia += idx[d] * sa[d];
                ib += idx[d] * sb[d];
            }
            da[ia] += g * b.data()[ib];
            db[ib] += g * a.data()[ia];
            for d in (0..ndim).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        vec![Some(da), Some(db)]
    }
}

/// View with a new shape holding the same number of elements.
pub fn reshape(input: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != input.numel() {
        return Err(Error::Shape(format!(
            "reshape {:?} -> {shape:?} changes element count",
            input.shape()
        )));
    }
    Ok(make_output(
        shape.to_vec(),
        input.data().to_vec(),
        vec![input.clone()],
        Box::new(ReshapeBackward),
    ))
}

struct ReshapeBackward;

impl Backward for ReshapeBackward {
    fn op_name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.to_vec())]
    }
}

/// Sum of all elements into a scalar (test and loss plumbing).
pub fn sum_all(input: &Tensor) -> Tensor {
    let s = input.data().iter().sum();
    make_output(
        vec![1],
        vec![s],
        vec![input.clone()],
        Box::new(SumBackward),
    )
}

struct SumBackward;

impl Backward for SumBackward {
    fn op_name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad_out[0]; inputs[0].numel()])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_is_idempotent() {
        let x = Tensor::new(&[4], vec![-2.0, -0.5, 0.7, 3.0]).unwrap();
        let once = relu(&x);
        let twice = relu(&once);
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn relu_gradient_masks_negative_inputs() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![-1.0, 2.0])
            .unwrap()
            .requiring_grad();
        let y = relu(&x);
        sum_all(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn batch_norm_identity_params_pass_through() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.5]).unwrap();
        let one = Tensor::new(&[1], vec![1.0]).unwrap();
        let zero = Tensor::new(&[1], vec![0.0]).unwrap();
        let (y, upd) =
            batch_norm(&x, &one, &zero, &zero, &one, 0.0, false, 0.1).unwrap();
        assert!(upd.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < TOL);
        }
    }

    #[test]
    fn batch_norm_beta_shifts_output() {
        let x = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let one = Tensor::new(&[1], vec![1.0]).unwrap();
        let zero = Tensor::new(&[1], vec![0.0]).unwrap();
        let five = Tensor::new(&[1], vec![5.0]).unwrap();
        let (y, _) = batch_norm(&x, &one, &five, &zero, &one, 0.0, false, 0.1).unwrap();
        assert_eq!(y.data(), &[6.0, 7.0, 8.0]);
    }

    #[test]
    fn batch_norm_hand_case() {
        // (2 - 1)/sqrt(4) * 3 + 1 = 2.5
        let x = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let gamma = Tensor::new(&[1], vec![3.0]).unwrap();
        let beta = Tensor::new(&[1], vec![1.0]).unwrap();
        let mean = Tensor::new(&[1], vec![1.0]).unwrap();
        let var = Tensor::new(&[1], vec![4.0]).unwrap();
        let (y, _) = batch_norm(&x, &gamma, &beta, &mean, &var, 0.0, false, 0.1).unwrap();
        assert!((y.data()[0] - 2.5).abs() < TOL);
    }

    #[test]
    fn batch_norm_rejects_negative_eps_and_bad_lengths() {
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        let p2 = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let p3 = Tensor::new(&[3], vec![0.0; 3]).unwrap();
        assert!(batch_norm(&x, &p2, &p2, &p2, &p2, -1e-9, false, 0.1).is_err());
        assert!(batch_norm(&x, &p3, &p2, &p2, &p2, 1e-5, false, 0.1).is_err());
    }

    #[test]
    fn global_avg_pool_hand_case() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = avg_pool_global(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - 4.0).abs() < TOL);
    }

    #[test]
    fn bilinear_width_upsample_hand_case() {
        // [0, 2] -> width 4 with half-pixel centers and clamped edges.
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        let expect = [0.0, 0.5, 1.5, 2.0];
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < TOL, "{:?}", y.data());
        }
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = Tensor::new(&[1, 1, 3, 5], (0..15).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let y = bilinear_resize(&x, 3, 5).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < TOL);
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_single_pixel() {
        let x = Tensor::full(&[1, 2, 1, 1], 0.7);
        let y = bilinear_resize(&x, 5, 9).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < TOL));
    }

    #[test]
    fn concat_channel_counts_add() {
        let a = Tensor::zeros(&[1, 3, 2, 2]);
        let b = Tensor::zeros(&[1, 5, 2, 2]);
        let y = concat(&[a, b], 1).unwrap();
        assert_eq!(y.shape(), &[1, 8, 2, 2]);
    }

    #[test]
    fn concat_single_input_is_identity() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = concat(std::slice::from_ref(&a), 0).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[1, 1, 1, 2], vec![9.0, 8.0]).unwrap();
        let y = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(y.slice_axis(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(y.slice_axis(1, 2, 1).unwrap().data(), b.data());
    }

    #[test]
    fn concat_rejects_off_axis_mismatch() {
        let a = Tensor::zeros(&[1, 2, 2, 2]);
        let b = Tensor::zeros(&[1, 2, 3, 2]);
        assert!(concat(&[a, b], 1).is_err());
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let x = Tensor::new(&[1, 2], vec![3.0, -1.0]).unwrap();
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zeros2 = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let y = linear(&x, &eye, Some(&zeros2)).unwrap();
        assert_eq!(y.data(), x.data());

        let zw = Tensor::zeros(&[2, 2]);
        let bias = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
        let y = linear(&x, &zw, Some(&bias)).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn linear_matches_dot_product_oracle() {
        let x = Tensor::new(&[2, 3], vec![0.1, -0.4, 2.0, 1.5, 0.3, -0.2]).unwrap();
        let w = Tensor::new(&[2, 3], vec![0.5, 1.0, -1.0, 2.0, 0.0, 0.25]).unwrap();
        let b = Tensor::new(&[2], vec![0.1, -0.1]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        for bi in 0..2 {
            for oi in 0..2 {
                let mut expect = b.data()[oi];
                for k in 0..3 {
                    expect += x.data()[bi * 3 + k] * w.data()[oi * 3 + k];
                }
                assert!((y.data()[bi * 2 + oi] - expect).abs() < TOL);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_ln3_case() {
        let x = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < TOL);

        let x = Tensor::new(&[2], vec![3f64.ln(), 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.75).abs() < TOL);
        assert!((s.data()[1] - 0.25).abs() < TOL);
    }

    #[test]
    fn softmax_shift_invariance_and_unit_sum() {
        let x = Tensor::new(&[1, 4], vec![0.3, -1.2, 5.0, 2.2]).unwrap();
        let shifted = x.map(|v| v + 123.456);
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        let sum: f64 = a.data().iter().sum();
        assert!((sum - 1.0).abs() < TOL);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < TOL);
        }
    }

    #[test]
    fn cross_entropy_uniform_two_class_is_ln2() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let loss = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!((loss.data()[0] - 2f64.ln()).abs() < TOL);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let logits = Tensor::new(&[1, 2], vec![30.0, -30.0]).unwrap();
        let loss = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(loss.data()[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_batch_order_invariant() {
        let a = Tensor::new(&[2, 2], vec![1.0, -0.5, 0.3, 2.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.3, 2.0, 1.0, -0.5]).unwrap();
        let la = cross_entropy_loss(&a, &[0, 1]).unwrap();
        let lb = cross_entropy_loss(&b, &[1, 0]).unwrap();
        assert!((la.data()[0] - lb.data()[0]).abs() < TOL);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&logits, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap().requiring_grad();
        let loss = cross_entropy_loss(&logits, &[0]).unwrap();
        loss.backward().unwrap();
        let g = logits.grad().unwrap();
        assert!((g[0] + 0.5).abs() < TOL);
        assert!((g[1] - 0.5).abs() < TOL);
    }

    #[test]
    fn backward_twice_errors() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requiring_grad();
        let loss = sum_all(&x);
        loss.backward().unwrap();
        assert!(loss.backward().is_err());
    }

    #[test]
    fn mul_broadcasts_mask_over_channels() {
        let img = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = Tensor::new(&[1, 1, 1, 2], vec![0.5, 0.0]).unwrap();
        let y = mul(&img, &mask).unwrap();
        assert_eq!(y.data(), &[0.5, 0.0, 1.5, 0.0]);
    }
}
