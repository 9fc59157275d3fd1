//! Declarative model graphs: layer specs, parameter stores, and a forward
//! evaluator with activation taps.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerSpec`]s wired by name plus
//! a name -> tensor parameter store. Builders in [`classifier`] and
//! [`segmenter`] assemble the two concrete networks; the evaluator here is
//! architecture-agnostic. A built graph with loaded parameters is immutable
//! and can serve concurrent forward evaluations; training swaps parameters
//! through `&mut self` methods.

pub mod classifier;
pub mod segmenter;

pub use classifier::{
    build_classifier, build_dense_block, build_transition, classify, ClassLabel, DenseNetConfig,
};
pub use segmenter::{build_aspp, build_segmenter, segment, SegmenterConfig};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    avg_pool, avg_pool_global, batch_norm, bilinear_resize, concat, conv2d, linear, max_pool,
    relu, reshape, ConvParams, Tensor,
};

/// Name of the pseudo-layer that feeds the network input.
pub const INPUT: &str = "input";

/// Batch-norm running-statistics momentum used by every builder.
pub const BN_MOMENTUM: f64 = 0.1;

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Spatial target of a resize layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ResizeTarget {
    /// Fixed output extent.
    Exact(usize, usize),
    /// Match the network input's spatial extent.
    ToInput,
    /// Match the spatial extent of the layer's second input.
    LikeSecond,
}

/// One layer of a model graph. Parameter fields hold names into the owning
/// graph's parameter store.
#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv {
        weight: String,
        bias: Option<String>,
        params: ConvParams,
    },
    BatchNorm {
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
        eps: f64,
    },
    Relu,
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    AvgPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    AvgPoolGlobal,
    Resize {
        target: ResizeTarget,
    },
    Concat {
        axis: usize,
    },
    /// Collapse BxCx1x1 (or any trailing extents) to BxF.
    Flatten,
    Linear {
        weight: String,
        bias: String,
    },
}

/// A named layer and the names of the layers it consumes.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// Which network a graph implements; drives class-score reduction and
/// pipeline routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Classifier,
    Segmenter,
}

/// A complete network: ordered layers, parameters, and evaluation metadata.
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
    taps: Vec<String>,
    pub kind: ModelKind,
    pub input_channels: usize,
    /// Expected input spatial extent (height, width).
    pub input_size: (usize, usize),
    pub class_count: usize,
    eval_count: AtomicU64,
}

impl Clone for ModelGraph {
    fn clone(&self) -> Self {
        ModelGraph {
            layers: self.layers.clone(),
            params: self.params.clone(),
            trainable: self.trainable.clone(),
            taps: self.taps.clone(),
            kind: self.kind,
            input_channels: self.input_channels,
            input_size: self.input_size,
            class_count: self.class_count,
            eval_count: AtomicU64::new(0),
        }
    }
}

struct EvalOutcome {
    output: Tensor,
    taps: BTreeMap<String, Tensor>,
    stat_updates: Vec<(String, Tensor)>,
}

impl ModelGraph {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replace one parameter tensor; shape must match the existing entry.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Names of parameters updated by gradient descent (running statistics
    /// excluded), in deterministic sorted order.
    pub fn trainable_params(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(|s| s.as_str())
    }

    /// Registered tap points available to `forward_with_taps`.
    pub fn taps(&self) -> &[String] {
        &self.taps
    }

    /// Number of forward evaluations run against this graph so far.
    pub fn forward_count(&self) -> u64 {
        self.eval_count.load(Ordering::Relaxed)
    }

    /// Set `requires_grad` on every trainable parameter (training sessions).
    pub fn arm_parameters(&mut self) {
        for name in self.trainable.clone() {
            let t = self.params[&name].requiring_grad();
            self.params.insert(name, t);
        }
    }

    /// Drop grad tracking from every parameter.
    pub fn disarm_parameters(&mut self) {
        for (_, t) in self.params.iter_mut() {
            *t = t.detached();
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.ndim() != 4
            || input.shape()[1] != self.input_channels
            || input.shape()[2] != self.input_size.0
            || input.shape()[3] != self.input_size.1
        {
            return Err(Error::Shape(format!(
                "model expects Bx{}x{}x{} input, got {:?}",
                self.input_channels, self.input_size.0, self.input_size.1,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.eval(input, false, &BTreeMap::new(), &[])?.output)
    }

    /// Forward pass that also returns the named intermediate activations.
    pub fn forward_with_taps(
        &self,
        input: &Tensor,
        taps: &[String],
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        let out = self.eval(input, false, &BTreeMap::new(), taps)?;
        Ok((out.output, out.taps))
    }

    /// Forward pass where the named layers produce the supplied tensors
    /// instead of being evaluated (split-evaluation support).
    pub fn forward_with_overrides(
        &self,
        input: &Tensor,
        overrides: &BTreeMap<String, Tensor>,
    ) -> Result<Tensor> {
        for name in overrides.keys() {
            if !self.layers.iter().any(|l| &l.name == name) {
                return Err(Error::Model(format!("unknown layer override {name}")));
            }
        }
        Ok(self.eval(input, false, overrides, &[])?.output)
    }

    /// Training-mode forward: batch-norm layers use batch statistics and
    /// their running statistics in the parameter store are refreshed.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.eval(input, true, &BTreeMap::new(), &[])?;
        for (name, tensor) in out.stat_updates {
            self.params.insert(name, tensor);
        }
        Ok(out.output)
    }

    fn eval(
        &self,
        input: &Tensor,
        training: bool,
        overrides: &BTreeMap<String, Tensor>,
        taps: &[String],
    ) -> Result<EvalOutcome> {
        self.check_input(input)?;
        for t in taps {
            if !self.layers.iter().any(|l| &l.name == t) {
                return Err(Error::Model(format!("unknown tap {t}")));
            }
        }
        self.eval_count.fetch_add(1, Ordering::Relaxed);

        // Free intermediate values after their last consumer.
        let mut remaining: HashMap<&str, usize> = HashMap::new();
        for layer in &self.layers {
            for inp in &layer.inputs {
                *remaining.entry(inp.as_str()).or_insert(0) += 1;
            }
        }
        if let Some(last) = self.layers.last() {
            *remaining.entry(last.name.as_str()).or_insert(0) += 1;
        }
        for t in taps {
            *remaining.entry(t.as_str()).or_insert(0) += 1;
        }

        let mut values: HashMap<&str, Tensor> = HashMap::new();
        values.insert(INPUT, input.clone());
        let mut tapped = BTreeMap::new();
        let mut stat_updates = Vec::new();

        for layer in &self.layers {
            let fetch = |name: &str| -> Result<Tensor> {
                values
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Model(format!("layer {} missing input {name}", layer.name)))
            };
            let out = if let Some(t) = overrides.get(&layer.name) {
                t.clone()
            } else {
                let x = fetch(&layer.inputs[0])?;
                match &layer.kind {
                    LayerKind::Conv { weight, bias, params } => {
                        let w = &self.params[weight];
                        let b = bias.as_ref().map(|n| &self.params[n]);
                        conv2d(&x, w, b, params)?
                    }
                    LayerKind::BatchNorm { gamma, beta, running_mean, running_var, eps } => {
                        let (out, updated) = batch_norm(
                            &x,
                            &self.params[gamma],
                            &self.params[beta],
                            &self.params[running_mean],
                            &self.params[running_var],
                            *eps,
                            training,
                            BN_MOMENTUM,
                        )?;
                        if let Some((m, v)) = updated {
                            stat_updates.push((running_mean.clone(), m));
                            stat_updates.push((running_var.clone(), v));
                        }
                        out
                    }
                    LayerKind::Relu => relu(&x),
                    LayerKind::MaxPool { window, stride, padding } => {
                        max_pool(&x, *window, *stride, *padding)?
                    }
                    LayerKind::AvgPool { window, stride } => avg_pool(&x, *window, *stride)?,
                    LayerKind::AvgPoolGlobal => avg_pool_global(&x)?,
                    LayerKind::Resize { target } => {
                        let (h, w) = match target {
                            ResizeTarget::Exact(h, w) => (*h, *w),
                            ResizeTarget::ToInput => (input.shape()[2], input.shape()[3]),
                            ResizeTarget::LikeSecond => {
                                let like = fetch(&layer.inputs[1])?;
                                (like.shape()[2], like.shape()[3])
                            }
                        };
                        bilinear_resize(&x, h, w)?
                    }
                    LayerKind::Concat { axis } => {
                        let ts: Vec<Tensor> = layer
                            .inputs
                            .iter()
                            .map(|n| fetch(n))
                            .collect::<Result<_>>()?;
                        concat(&ts, *axis)?
                    }
                    LayerKind::Flatten => {
                        let b = x.shape()[0];
                        let f: usize = x.shape()[1..].iter().product();
                        reshape(&x, &[b, f])?
                    }
                    LayerKind::Linear { weight, bias } => {
                        linear(&x, &self.params[weight], Some(&self.params[bias]))?
                    }
                }
            };
            if cfg!(debug_assertions) {
                out.validate_finite(&format!("layer {}", layer.name))?;
            }

            if taps.iter().any(|t| t == &layer.name) {
                tapped.insert(layer.name.clone(), out.clone());
            }
            for inp in &layer.inputs {
                if let Some(count) = remaining.get_mut(inp.as_str()) {
                    *count -= 1;
                    if *count == 0 && inp != INPUT {
                        values.remove(inp.as_str());
                    }
                }
            }
            values.insert(&layer.name, out);
        }

        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Model("empty graph".into()))?;
        let output = values
            .remove(last.name.as_str())
            .ok_or_else(|| Error::Model("output consumed".into()))?;
        Ok(EvalOutcome { output, taps: tapped, stat_updates })
    }

    /// Persist all parameters (including running statistics) as a weight
    /// bundle.
    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        let detached: BTreeMap<String, Tensor> =
            self.params.iter().map(|(k, v)| (k.clone(), v.detached())).collect();
        crate::data::weights::save_bundle(&detached, path)
    }

    /// Load a weight bundle, requiring an exact match of names and shapes
    /// against this graph's parameter store.
    pub fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let bundle = crate::data::weights::load_bundle(path)?;
        for name in bundle.keys() {
            if !self.params.contains_key(name) {
                return Err(Error::Bundle(format!(
                    "bundle tensor {name} has no slot in this model"
                )));
            }
        }
        for (name, current) in &self.params {
            let incoming = bundle
                .get(name)
                .ok_or_else(|| Error::Bundle(format!("bundle is missing tensor {name}")))?;
            if incoming.shape() != current.shape() {
                return Err(Error::Bundle(format!(
                    "tensor {name}: bundle shape {:?} does not match model shape {:?}",
                    incoming.shape(),
                    current.shape()
                )));
            }
        }
        self.params = bundle;
        Ok(())
    }

    /// Analytic per-layer output shapes for a `[b, c, h, w]` input, without
    /// evaluating any data.
    pub fn infer_shapes(&self, input_shape: &[usize]) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut shapes: HashMap<&str, Vec<usize>> = HashMap::new();
        shapes.insert(INPUT, input_shape.to_vec());
        let mut out = BTreeMap::new();
        for layer in &self.layers {
            let get = |name: &str| -> Result<Vec<usize>> {
                shapes
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Model(format!("layer {} missing input {name}", layer.name)))
            };
            let x = get(&layer.inputs[0])?;
            let shape = match &layer.kind {
                LayerKind::Conv { weight, params, .. } => {
                    let w = self.params[weight].shape();
                    let oh = ConvParams::output_extent(x[2], w[2], params.padding.0, params.dilation.0, params.stride.0)?;
                    let ow = ConvParams::output_extent(x[3], w[3], params.padding.1, params.dilation.1, params.stride.1)?;
                    vec![x[0], w[0], oh, ow]
                }
                LayerKind::BatchNorm { .. } | LayerKind::Relu => x,
                LayerKind::MaxPool { window, stride, padding } => {
                    let oh = ConvParams::output_extent(x[2], window.0, padding.0, 1, stride.0)?;
                    let ow = ConvParams::output_extent(x[3], window.1, padding.1, 1, stride.1)?;
                    vec![x[0], x[1], oh, ow]
                }
                LayerKind::AvgPool { window, stride } => {
                    let oh = ConvParams::output_extent(x[2], window.0, 0, 1, stride.0)?;
                    let ow = ConvParams::output_extent(x[3], window.1, 0, 1, stride.1)?;
                    vec![x[0], x[1], oh, ow]
                }
                LayerKind::AvgPoolGlobal => vec![x[0], x[1], 1, 1],
                LayerKind::Resize { target } => {
                    let (h, w) = match target {
                        ResizeTarget::Exact(h, w) => (*h, *w),
                        ResizeTarget::ToInput => (input_shape[2], input_shape[3]),
                        ResizeTarget::LikeSecond => {
                            let like = get(&layer.inputs[1])?;
                            (like[2], like[3])
                        }
                    };
                    vec![x[0], x[1], h, w]
                }
                LayerKind::Concat { axis } => {
                    let mut s = x.clone();
                    s[*axis] = 0;
                    for name in &layer.inputs {
                        s[*axis] += get(name)?[*axis];
                    }
                    s
                }
                LayerKind::Flatten => vec![x[0], x[1..].iter().product()],
                LayerKind::Linear { weight, .. } => vec![x[0], self.params[weight].shape()[0]],
            };
            shapes.insert(&layer.name, shape.clone());
            out.insert(layer.name.clone(), shape);
        }
        Ok(out)
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        let shapes = self.infer_shapes(input_shape)?;
        let last = self.layers.last().ok_or_else(|| Error::Model("empty graph".into()))?;
        Ok(shapes[&last.name].clone())
    }
}

/// Incremental graph assembler used by the model builders. Layer helpers
/// return the new layer's name for wiring.
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
    taps: Vec<String>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            layers: Vec::new(),
            params: BTreeMap::new(),
            trainable: BTreeSet::new(),
            taps: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<String>) -> String {
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            inputs,
        });
        name.to_string()
    }

    fn normal_param(&mut self, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| dist.sample(&mut self.rng)).collect();
        self.params
            .insert(name.to_string(), Tensor::new(shape, data).expect("valid param shape"));
        self.trainable.insert(name.to_string());
    }

    fn const_param(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) {
        self.params.insert(name.to_string(), Tensor::full(shape, value));
        if trainable {
            self.trainable.insert(name.to_string());
        }
    }

    /// Convolution with fan-in-scaled normal weights and, optionally, a zero
    /// bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        input: &str,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        params: ConvParams,
        bias: bool,
    ) -> String {
        let fan_in = (in_c / params.groups) * kernel.0 * kernel.1;
        let std = (2.0 / fan_in as f64).sqrt();
        let w_name = format!("{name}.weight");
        self.normal_param(&w_name, &[out_c, in_c / params.groups, kernel.0, kernel.1], std);
        let b_name = bias.then(|| {
            let n = format!("{name}.bias");
            self.const_param(&n, &[out_c], 0.0, true);
            n
        });
        self.push(
            name,
            LayerKind::Conv { weight: w_name, bias: b_name, params },
            vec![input.to_string()],
        )
    }

    pub fn bn(&mut self, name: &str, input: &str, channels: usize) -> String {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        let mean = format!("{name}.running_mean");
        let var = format!("{name}.running_var");
        self.const_param(&gamma, &[channels], 1.0, true);
        self.const_param(&beta, &[channels], 0.0, true);
        self.const_param(&mean, &[channels], 0.0, false);
        self.const_param(&var, &[channels], 1.0, false);
        self.push(
            name,
            LayerKind::BatchNorm {
                gamma,
                beta,
                running_mean: mean,
                running_var: var,
                eps: BN_EPS,
            },
            vec![input.to_string()],
        )
    }

    pub fn relu(&mut self, name: &str, input: &str) -> String {
        self.push(name, LayerKind::Relu, vec![input.to_string()])
    }

    pub fn max_pool(
        &mut self,
        name: &str,
        input: &str,
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> String {
        self.push(name, LayerKind::MaxPool { window, stride, padding }, vec![input.to_string()])
    }

    pub fn avg_pool(
        &mut self,
        name: &str,
        input: &str,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> String {
        self.push(name, LayerKind::AvgPool { window, stride }, vec![input.to_string()])
    }

    pub fn global_pool(&mut self, name: &str, input: &str) -> String {
        self.push(name, LayerKind::AvgPoolGlobal, vec![input.to_string()])
    }

    pub fn resize(&mut self, name: &str, inputs: Vec<String>, target: ResizeTarget) -> String {
        self.push(name, LayerKind::Resize { target }, inputs)
    }

    pub fn concat(&mut self, name: &str, inputs: Vec<String>, axis: usize) -> String {
        self.push(name, LayerKind::Concat { axis }, inputs)
    }

    pub fn flatten(&mut self, name: &str, input: &str) -> String {
        self.push(name, LayerKind::Flatten, vec![input.to_string()])
    }

    pub fn linear(&mut self, name: &str, input: &str, in_f: usize, out_f: usize) -> String {
        let w_name = format!("{name}.weight");
        let b_name = format!("{name}.bias");
        let std = (1.0 / in_f as f64).sqrt();
        self.normal_param(&w_name, &[out_f, in_f], std);
        self.const_param(&b_name, &[out_f], 0.0, true);
        self.push(
            name,
            LayerKind::Linear { weight: w_name, bias: b_name },
            vec![input.to_string()],
        )
    }

    /// Register a layer as a tap point for activation extraction.
    pub fn tap(&mut self, name: &str) {
        self.taps.push(name.to_string());
    }

    /// Validate wiring and produce the immutable graph.
    pub fn finish(
        self,
        kind: ModelKind,
        input_channels: usize,
        input_size: (usize, usize),
        class_count: usize,
    ) -> Result<ModelGraph> {
        let mut seen = BTreeSet::new();
        seen.insert(INPUT.to_string());
        for layer in &self.layers {
            for inp in &layer.inputs {
                if !seen.contains(inp) {
                    return Err(Error::Model(format!(
                        "layer {} consumes {inp} before it is produced",
                        layer.name
                    )));
                }
            }
            if !seen.insert(layer.name.clone()) {
                return Err(Error::Model(format!("duplicate layer name {}", layer.name)));
            }
            let param_names: Vec<&String> = match &layer.kind {
                LayerKind::Conv { weight, bias, .. } => {
                    let mut v = vec![weight];
                    v.extend(bias.iter());
                    v
                }
                LayerKind::BatchNorm { gamma, beta, running_mean, running_var, .. } => {
                    vec![gamma, beta, running_mean, running_var]
                }
                LayerKind::Linear { weight, bias } => vec![weight, bias],
                _ => vec![],
            };
            for p in param_names {
                if !self.params.contains_key(p) {
                    return Err(Error::Model(format!(
                        "layer {} references missing parameter {p}",
                        layer.name
                    )));
                }
            }
        }
        for tap in &self.taps {
            if !seen.contains(tap) {
                return Err(Error::Model(format!("tap {tap} names no layer")));
            }
        }
        Ok(ModelGraph {
            layers: self.layers,
            params: self.params,
            trainable: self.trainable,
            taps: self.taps,
            kind,
            input_channels,
            input_size,
            class_count,
            eval_count: AtomicU64::new(0),
        })
    }
}
