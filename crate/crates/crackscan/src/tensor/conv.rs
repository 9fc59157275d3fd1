//! 2-d convolution and pooling kernels with their backward rules.
//!
//! Convolution uses cross-correlation semantics (no kernel flip). The
//! forward pass parallelizes over (batch, out-channel) planes; every output
//! element is accumulated by a single thread in a fixed order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use super::{make_output, Backward, Tensor};
use crate::error::{Error, Result};

/// Stride, zero-padding, dilation, and channel-group count of a convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvParams {
            stride: (stride, stride),
            padding: (padding, padding),
            ..Default::default()
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = (dilation, dilation);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output extent for one spatial dimension:
    /// floor((in + 2*pad - dilation*(k-1) - 1)/stride) + 1, which must be >= 1.
    pub fn output_extent(input: usize, kernel: usize, pad: usize, dilation: usize, stride: usize) -> Result<usize> {
        if stride == 0 || dilation == 0 || kernel == 0 {
            return Err(Error::InvalidArgument(
                "stride, dilation and kernel extents must be positive".into(),
            ));
        }
        let span = dilation * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if padded < span {
            return Err(Error::Shape(format!(
                "kernel span {span} exceeds padded input {padded}"
            )));
        }
        Ok((padded - span) / stride + 1)
    }
}

struct ConvShapes {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    group_in: usize,
    group_out: usize,
}

fn conv_shapes(input: &Tensor, weight: &Tensor, p: &ConvParams) -> Result<ConvShapes> {
    if input.ndim() != 4 || weight.ndim() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects 4-d input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let [batch, in_c, in_h, in_w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [out_c, w_in, k_h, k_w] = [weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]];
    let g = p.groups;
    if g == 0 || in_c % g != 0 || out_c % g != 0 {
        return Err(Error::Shape(format!(
            "groups {g} must divide in channels {in_c} and out channels {out_c}"
        )));
    }
    if w_in != in_c / g {
        return Err(Error::Shape(format!(
            "weight expects {w_in} input channels per group, input has {} ({} groups)",
            in_c / g,
            g
        )));
    }
    let out_h = ConvParams::output_extent(in_h, k_h, p.padding.0, p.dilation.0, p.stride.0)?;
    let out_w = ConvParams::output_extent(in_w, k_w, p.padding.1, p.dilation.1, p.stride.1)?;
    Ok(ConvShapes {
        batch,
        in_c,
        in_h,
        in_w,
        out_c,
        k_h,
        k_w,
        out_h,
        out_w,
        group_in: in_c / g,
        group_out: out_c / g,
    })
}

/// 2-d cross-correlation of `input` (BxCxHxW) with `weight` (Ox(C/g)xKhxKw).
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    params: &ConvParams,
) -> Result<Tensor> {
    let s = conv_shapes(input, weight, params)?;
    if let Some(b) = bias {
        if b.numel() != s.out_c {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} output channels",
                b.numel(),
                s.out_c
            )));
        }
    }

    let x = input.data();
    let w = weight.data();
    let bias_data: Option<&[f64]> = bias.map(|b| b.data());
    let plane = s.out_h * s.out_w;
    let mut out = vec![0.0; s.batch * s.out_c * plane];

    out.par_chunks_mut(plane).enumerate().for_each(|(bo, chunk)| {
        let b = bo / s.out_c;
        let oc = bo % s.out_c;
        let group = oc / s.group_out;
        let base_bias = bias_data.map_or(0.0, |v| v[oc]);
        let w_base = oc * s.group_in * s.k_h * s.k_w;
        for oh in 0..s.out_h {
            for ow in 0..s.out_w {
                let mut acc = base_bias;
                for icg in 0..s.group_in {
                    let ic = group * s.group_in + icg;
                    let x_base = (b * s.in_c + ic) * s.in_h * s.in_w;
                    let w_ic = w_base + icg * s.k_h * s.k_w;
                    for kh in 0..s.k_h {
                        let ih = (oh * params.stride.0 + kh * params.dilation.0) as isize
                            - params.padding.0 as isize;
                        if ih < 0 || ih >= s.in_h as isize {
                            continue;
                        }
                        let row = x_base + ih as usize * s.in_w;
                        let w_row = w_ic + kh * s.k_w;
                        for kw in 0..s.k_w {
                            let iw = (ow * params.stride.1 + kw * params.dilation.1) as isize
                                - params.padding.1 as isize;
                            if iw < 0 || iw >= s.in_w as isize {
                                continue;
                            }
                            acc += x[row + iw as usize] * w[w_row + kw];
                        }
                    }
                }
                chunk[oh * s.out_w + ow] = acc;
            }
        }
    });

    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(make_output(
        vec![s.batch, s.out_c, s.out_h, s.out_w],
        out,
        inputs,
        Box::new(ConvBackward {
            params: params.clone(),
            has_bias: bias.is_some(),
        }),
    ))
}

struct ConvBackward {
    params: ConvParams,
    has_bias: bool,
}

impl Backward for ConvBackward {
    fn op_name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = &inputs[0];
        let weight = &inputs[1];
        let p = &self.params;
        let s = conv_shapes(input, weight, p).expect("shapes validated in forward");
        let x = input.data();
        let w = weight.data();

        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        // One sweep over output positions drives both adjoints; scatter into
        // dx follows the same fixed iteration order every time.
        for b in 0..s.batch {
            for oc in 0..s.out_c {
                let group = oc / s.group_out;
                let w_base = oc * s.group_in * s.k_h * s.k_w;
                let go_base = (b * s.out_c + oc) * s.out_h * s.out_w;
                for oh in 0..s.out_h {
                    for ow in 0..s.out_w {
                        let g = grad_out[go_base + oh * s.out_w + ow];
                        if g == 0.0 {
                            continue;
                        }
                        for icg in 0..s.group_in {
                            let ic = group * s.group_in + icg;
                            let x_base = (b * s.in_c + ic) * s.in_h * s.in_w;
                            let w_ic = w_base + icg * s.k_h * s.k_w;
                            for kh in 0..s.k_h {
                                let ih = (oh * p.stride.0 + kh * p.dilation.0) as isize
                                    - p.padding.0 as isize;
                                if ih < 0 || ih >= s.in_h as isize {
                                    continue;
                                }
                                let row = x_base + ih as usize * s.in_w;
                                let w_row = w_ic + kh * s.k_w;
                                for kw in 0..s.k_w {
                                    let iw = (ow * p.stride.1 + kw * p.dilation.1) as isize
                                        - p.padding.1 as isize;
                                    if iw < 0 || iw >= s.in_w as isize {
                                        continue;
                                    }
                                    dx[row + iw as usize] += w[w_row + kw] * g;
                                    dw[w_row + kw] += x[row + iw as usize] * g;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut grads = vec![Some(dx), Some(dw)];
        if self.has_bias {
            let mut db = vec![0.0; s.out_c];
            for b in 0..s.batch {
                for oc in 0..s.out_c {
                    let base = (b * s.out_c + oc) * s.out_h * s.out_w;
                    let mut acc = 0.0;
                    for i in 0..s.out_h * s.out_w {
                        acc += grad_out[base + i];
                    }
                    db[oc] += acc;
                }
            }
            grads.push(Some(db));
        }
        grads
    }
}

fn pool_shapes(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if input.ndim() != 4 {
        return Err(Error::Shape(format!(
            "pooling expects 4-d input, got {:?}",
            input.shape()
        )));
    }
    if window.0 == 0 || window.1 == 0 {
        return Err(Error::InvalidArgument("pooling window must be positive".into()));
    }
    // Keep at least one real element under every window position.
    if padding.0 * 2 > window.0 || padding.1 * 2 > window.1 {
        return Err(Error::InvalidArgument(format!(
            "pool padding {padding:?} may not exceed half the window {window:?}"
        )));
    }
    let (b, c) = (input.shape()[0], input.shape()[1]);
    let out_h = ConvParams::output_extent(input.shape()[2], window.0, padding.0, 1, stride.0)?;
    let out_w = ConvParams::output_extent(input.shape()[3], window.1, padding.1, 1, stride.1)?;
    Ok((b, c, input.shape()[2], input.shape()[3], out_h, out_w))
}

/// Windowed maximum; zero-padding contributes negative infinity and can
/// therefore never win.
pub fn max_pool(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let (b, c, in_h, in_w, out_h, out_w) = pool_shapes(input, window, stride, padding)?;
    let x = input.data();
    let mut out = vec![0.0; b * c * out_h * out_w];
    let mut argmax = vec![0usize; out.len()];
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * in_h * in_w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kh in 0..window.0 {
                        let ih = (oh * stride.0 + kh) as isize - padding.0 as isize;
                        if ih < 0 || ih >= in_h as isize {
                            continue;
                        }
                        for kw in 0..window.1 {
                            let iw = (ow * stride.1 + kw) as isize - padding.1 as isize;
                            if iw < 0 || iw >= in_w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * in_w + iw as usize;
                            // Strict > keeps the first maximum on ties.
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
    Ok(make_output(
        vec![b, c, out_h, out_w],
        out,
        vec![input.clone()],
        Box::new(MaxPoolBackward { argmax }),
    ))
}

struct MaxPoolBackward {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolBackward {
    fn op_name(&self) -> &'static str {
        "max_pool"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; inputs[0].numel()];
        for (o, &idx) in self.argmax.iter().enumerate() {
            dx[idx] += grad_out[o];
        }
        vec![Some(dx)]
    }
}

/// Windowed mean over full windows (no padding).
pub fn avg_pool(input: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let (b, c, in_h, in_w, out_h, out_w) = pool_shapes(input, window, stride, (0, 0))?;
    let x = input.data();
    let denom = (window.0 * window.1) as f64;
    let mut out = vec![0.0; b * c * out_h * out_w];
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * in_h * in_w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = 0.0;
                    for kh in 0..window.0 {
                        let row = base + (oh * stride.0 + kh) * in_w + ow * stride.1;
                        for kw in 0..window.1 {
                            acc += x[row + kw];
                        }
                    }
                    out[o] = acc / denom;
                    o += 1;
                }
            }
        }
    }
    Ok(make_output(
        vec![b, c, out_h, out_w],
        out,
        vec![input.clone()],
        Box::new(AvgPoolBackward { window, stride }),
    ))
}

struct AvgPoolBackward {
    window: (usize, usize),
    stride: (usize, usize),
}

impl Backward for AvgPoolBackward {
    fn op_name(&self) -> &'static str {
        "avg_pool"
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = &inputs[0];
        let (b, c, in_h, in_w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let out_h = (in_h - self.window.0) / self.stride.0 + 1;
        let out_w = (in_w - self.window.1) / self.stride.1 + 1;
        let denom = (self.window.0 * self.window.1) as f64;
        let mut dx = vec![0.0; input.numel()];
        let mut o = 0;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * in_h * in_w;
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let g = grad_out[o] / denom;
                        o += 1;
                        for kh in 0..self.window.0 {
                            let row = base + (oh * self.stride.0 + kh) * in_w + ow * self.stride.1;
                            for kw in 0..self.window.1 {
                                dx[row + kw] += g;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor {
        Tensor::new(&shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = t4([1, 1, 3, 3], vec![0.3, -1.2, 4.0, 2.5, 0.0, 7.0, -3.0, 1.1, 9.0]);
        let w = t4([1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, None, &ConvParams::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_full_window_sums_to_nine() {
        let x = t4([1, 1, 3, 3], vec![1.0; 9]);
        let w = t4([1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &w, None, &ConvParams::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = t4([1, 3, 4, 4], vec![0.0; 48]);
        let w = Tensor::zeros(&[2, 1, 1, 1]);
        let p = ConvParams::default().with_groups(2);
        assert!(conv2d(&x, &w, None, &p).is_err());
    }

    #[test]
    fn non_positive_output_extent_is_an_error() {
        let x = t4([1, 1, 2, 2], vec![0.0; 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &w, None, &ConvParams::default()).is_err());
    }

    #[test]
    fn max_pool_two_by_two() {
        let x = t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = max_pool(&x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn max_pool_constant_input_stays_constant() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.5);
        let y = max_pool(&x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn avg_pool_halves_odd_extent_by_floor() {
        let x = Tensor::full(&[1, 1, 5, 5], 2.0);
        let y = avg_pool(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn excessive_pool_padding_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(max_pool(&x, (2, 2), (1, 1), (2, 2)).is_err());
    }
}
