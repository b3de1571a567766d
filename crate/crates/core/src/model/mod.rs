//! The density-regression network.
//!
//! A VGG-style backbone of 3×3 convolution stages separated by stride-2
//! reductions feeds a fusion block: the output of every tapped stage is
//! max-pooled down to the deepest stage's resolution, zero-padded to the
//! largest tapped map and concatenated along channels. Head convolutions
//! (3×3 first, 1×1 afterwards) mix the fused channels into a single density
//! channel, which is bilinearly upsampled back to the input size.

pub mod checkpoint;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densitymap::DensityMap;
use crate::error::{Error, Result};
use crate::raster::Image;
use ops::{ConvShape, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    MaxPool,
    StridedConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Xavier,
    /// Xavier everywhere, then backbone tensors copied from `pretrained_path`.
    PretrainedBackbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stage_channel_widths: Vec<usize>,
    /// 3×3 convolutions per stage; empty means one per stage.
    pub stage_depths: Vec<usize>,
    pub downsample_factor: usize,
    pub fusion_taps: Vec<usize>,
    /// Post-fusion widths; the first layer is 3×3, the rest 1×1, the last must be 1.
    pub head_channels: Vec<usize>,
    pub reduction: Reduction,
    pub nonneg_output: bool,
    /// Fixed gain applied to the last layer's output.
    pub output_scale: f64,
    pub init_scheme: InitScheme,
    pub pretrained_path: Option<String>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 300,
            input_channels: 3,
            stage_channel_widths: vec![64, 128, 256, 512],
            stage_depths: vec![2, 2, 3, 3],
            downsample_factor: 8,
            fusion_taps: vec![1, 2, 3],
            head_channels: vec![256, 128, 1],
            reduction: Reduction::MaxPool,
            nonneg_output: true,
            output_scale: 1.0,
            init_scheme: InitScheme::Xavier,
            pretrained_path: None,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Full-width configuration: a truncated VGG-16 backbone at 1/8 stride
    /// plus a wide fusion head, about 23.5M parameters.
    pub fn full_scale() -> Self {
        Self {
            stage_depths: vec![2, 2, 3, 6],
            head_channels: vec![1024, 512, 1],
            ..Self::default()
        }
    }

    /// Small network used for desk-scale experiments on synthetic ears.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            stage_channel_widths: vec![16, 32, 32],
            stage_depths: vec![1, 2, 2],
            downsample_factor: 4,
            fusion_taps: vec![0, 1, 2],
            head_channels: vec![32, 1],
            output_scale: 0.01,
            ..Self::default()
        }
    }

    pub fn depth(&self, stage: usize) -> usize {
        self.stage_depths.get(stage).copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_channel_widths.len();
        if stages == 0 || self.stage_channel_widths.contains(&0) {
            return Err(Error::config("network.stage_channel_widths must be non-empty and positive"));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::config("network input size and channels must be positive"));
        }
        if !self.stage_depths.is_empty()
            && (self.stage_depths.len() != stages || self.stage_depths.contains(&0))
        {
            return Err(Error::config(
                "network.stage_depths must list a positive depth for every stage",
            ));
        }
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor != 1 << (stages - 1) {
            return Err(Error::config(format!(
                "network.downsample_factor {} must equal 2^(stages - 1) = {}",
                self.downsample_factor,
                1usize << (stages - 1)
            )));
        }
        if self.fusion_taps.is_empty() {
            return Err(Error::config("network.fusion_taps must be non-empty"));
        }
        if self.fusion_taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("network.fusion_taps must be strictly increasing"));
        }
        if *self.fusion_taps.last().unwrap() != stages - 1 {
            return Err(Error::config("network.fusion_taps must include the deepest stage"));
        }
        if self.head_channels.is_empty() || self.head_channels.contains(&0) {
            return Err(Error::config("network.head_channels must be non-empty and positive"));
        }
        if *self.head_channels.last().unwrap() != 1 {
            return Err(Error::config("network.head_channels must end with a single density channel"));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::config("network.output_scale must be positive"));
        }
        if self.init_scheme == InitScheme::PretrainedBackbone && self.pretrained_path.is_none() {
            return Err(Error::config("pretrained_backbone init needs network.pretrained_path"));
        }
        Ok(())
    }

    fn fused_channels(&self) -> usize {
        self.fusion_taps.iter().map(|&t| self.stage_channel_widths[t]).sum()
    }

    fn layout(&self) -> Layout {
        let mut params = Vec::new();
        let mut push = |name: String, shape: ConvShape| {
            let w = params.len();
            params.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![shape.cout, shape.cin, shape.k, shape.k],
            });
            params.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![shape.cout],
            });
            ConvLayer { shape, weight: w, bias: w + 1 }
        };
        let mut cin = self.input_channels;
        let mut stages = Vec::new();
        for (s, &width) in self.stage_channel_widths.iter().enumerate() {
            let mut convs = Vec::new();
            for j in 0..self.depth(s) {
                let stride = if s > 0 && j == 0 && self.reduction == Reduction::StridedConv { 2 } else { 1 };
                convs.push(push(
                    format!("backbone.s{s}.c{j}"),
                    ConvShape { cin, cout: width, k: 3, stride },
                ));
                cin = width;
            }
            stages.push(convs);
        }
        let mut cin = self.fused_channels();
        let mut head = Vec::new();
        for (i, &width) in self.head_channels.iter().enumerate() {
            let k = if i == 0 { 3 } else { 1 };
            head.push(push(format!("head.{i}"), ConvShape { cin, cout: width, k, stride: 1 }));
            cin = width;
        }
        Layout { stages, head, params }
    }

    /// Named parameter tensors and their shapes.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layout().params
    }

    /// Spatial size of each stage's output for a square input of `size`.
    pub fn stage_dims(&self, size: usize) -> Vec<usize> {
        let mut d = size;
        (0..self.stage_channel_widths.len())
            .map(|s| {
                if s > 0 {
                    d = d.div_ceil(2);
                }
                d
            })
            .collect()
    }
}

/// Total scalar parameter count of `config`.
pub fn param_count(config: &NetworkConfig) -> usize {
    config
        .param_specs()
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    shape: ConvShape,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    stages: Vec<Vec<ConvLayer>>,
    head: Vec<ConvLayer>,
    params: Vec<ParamSpec>,
}

/// Gradient buffers laid out like the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|v| v.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

struct StageTrace<T> {
    pool: Option<(Vec<u32>, usize, usize)>,
    conv_inputs: Vec<Tensor<T>>,
    conv_outputs: Vec<Tensor<T>>,
}

/// Activations kept from a forward pass for backpropagation.
pub struct Trace<T> {
    stages: Vec<StageTrace<T>>,
    tap_pools: Vec<Option<(Vec<u32>, usize, usize)>>,
    tap_shapes: Vec<(usize, usize, usize)>,
    head_inputs: Vec<Tensor<T>>,
    head_outputs: Vec<Tensor<T>>,
    low: Tensor<T>,
}

/// The counting network with parameters of element type `T`.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    layout: Layout,
    params: Vec<Vec<T>>,
}

impl Network<f32> {
    /// Build with Xavier-uniform weights (zero biases), then apply the
    /// configured backbone initialization hook.
    pub fn build(config: NetworkConfig) -> Result<Self> {
        let mut net = Self::build_xavier(config)?;
        if net.config.init_scheme == InitScheme::PretrainedBackbone {
            let path = net.config.pretrained_path.clone().unwrap_or_default();
            let (donor, _) = checkpoint::load(&path)?;
            net.copy_backbone_from(&donor)?;
        }
        Ok(net)
    }

    /// Predict a density map with the input's spatial size.
    pub fn forward(&self, image: &Image) -> Result<DensityMap> {
        let x = self.image_tensor(image)?;
        let out = self.forward_tensor(&x);
        DensityMap::from_values(out.h, out.w, out.data)
    }

    fn copy_backbone_from(&mut self, donor: &Network<f32>) -> Result<()> {
        let specs = self.layout.params.clone();
        let mut copied = 0;
        for (i, spec) in specs.iter().enumerate() {
            if !spec.name.starts_with("backbone.") {
                continue;
            }
            if let Some(j) = donor.layout.params.iter().position(|p| p.name == spec.name) {
                if donor.layout.params[j].shape != spec.shape {
                    return Err(Error::config(format!(
                        "pretrained tensor {} has shape {:?}, expected {:?}",
                        spec.name, donor.layout.params[j].shape, spec.shape
                    )));
                }
                self.params[i].clone_from(&donor.params[j]);
                copied += 1;
            }
        }
        if copied == 0 {
            return Err(Error::config("pretrained checkpoint shares no backbone tensors"));
        }
        Ok(())
    }
}

impl<T: Scalar> Network<T> {
    pub fn build_xavier(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout
            .params
            .iter()
            .map(|p| {
                if p.shape.len() == 4 {
                    let (cout, cin, kk) = (p.shape[0], p.shape[1], p.shape[2] * p.shape[3]);
                    let limit = (6.0 / ((cin * kk + cout * kk) as f64)).sqrt();
                    (0..p.len())
                        .map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit)))
                        .collect()
                } else {
                    vec![T::zero(); p.len()]
                }
            })
            .collect();
        Ok(Self { config, layout, params })
    }

    /// Assemble from explicit tensors, e.g. when loading a checkpoint.
    pub fn from_params(config: NetworkConfig, params: Vec<Vec<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                layout.params.len(),
                params.len()
            )));
        }
        for (spec, p) in layout.params.iter().zip(&params) {
            if spec.len() != p.len() {
                return Err(Error::Format(format!(
                    "tensor {} holds {} values, expected {}",
                    spec.name,
                    p.len(),
                    spec.len()
                )));
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.params
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            tensors: self.params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect())
                .collect(),
        }
    }

    pub fn image_tensor(&self, image: &Image) -> Result<Tensor<T>> {
        if image.channels() != self.config.input_channels {
            return Err(Error::arg(format!(
                "network expects {} channels, image has {}",
                self.config.input_channels,
                image.channels()
            )));
        }
        Ok(Tensor::from_data(
            image.channels(),
            image.height(),
            image.width(),
            image.data().iter().map(|&v| T::from_f32(v).unwrap()).collect(),
        ))
    }

    pub fn forward_tensor(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, false).0
    }

    /// Forward pass that keeps what `backward` needs.
    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, Trace<T>) {
        let (out, trace) = self.run(x, true);
        (out, trace.expect("recorded"))
    }

    fn conv(&self, layer: &ConvLayer, x: &Tensor<T>) -> Tensor<T> {
        ops::conv2d_forward(x, &layer.shape, &self.params[layer.weight], &self.params[layer.bias])
    }

    fn run(&self, x: &Tensor<T>, record: bool) -> (Tensor<T>, Option<Trace<T>>) {
        assert_eq!(x.c, self.config.input_channels, "input channels");
        let n_stages = self.layout.stages.len();
        let mut stage_traces = Vec::new();
        let mut stage_outs: Vec<Tensor<T>> = Vec::with_capacity(n_stages);
        let mut cur = x.clone();
        for (s, convs) in self.layout.stages.iter().enumerate() {
            let mut pool = None;
            if s > 0 && self.config.reduction == Reduction::MaxPool {
                let (p, arg) = ops::maxpool_forward(&cur, 2);
                pool = Some((arg, cur.h, cur.w));
                cur = p;
            }
            let mut conv_inputs = Vec::new();
            let mut conv_outputs = Vec::new();
            for layer in convs {
                let mut y = self.conv(layer, &cur);
                ops::relu_inplace(&mut y);
                if record {
                    conv_inputs.push(std::mem::replace(&mut cur, y.clone()));
                    conv_outputs.push(y);
                } else {
                    cur = y;
                }
            }
            stage_outs.push(cur.clone());
            if record {
                stage_traces.push(StageTrace { pool, conv_inputs, conv_outputs });
            }
        }

        let mut tap_pools = Vec::new();
        let mut tapped = Vec::new();
        for &t in &self.config.fusion_taps {
            let win = 1usize << (n_stages - 1 - t);
            if win > 1 {
                let (p, arg) = ops::maxpool_forward(&stage_outs[t], win);
                tap_pools.push(Some((arg, stage_outs[t].h, stage_outs[t].w)));
                tapped.push(p);
            } else {
                tap_pools.push(None);
                tapped.push(stage_outs[t].clone());
            }
        }
        let tap_shapes = tapped.iter().map(|t| (t.c, t.h, t.w)).collect();
        let mut cur = ops::concat_padded(&tapped.iter().collect::<Vec<_>>());

        let mut head_inputs = Vec::new();
        let mut head_outputs = Vec::new();
        let last = self.layout.head.len() - 1;
        for (i, layer) in self.layout.head.iter().enumerate() {
            let mut y = self.conv(layer, &cur);
            if i < last {
                ops::relu_inplace(&mut y);
            } else {
                let g = T::from_f64_lossy(self.config.output_scale);
                y.data.iter_mut().for_each(|v| *v = *v * g);
                if self.config.nonneg_output {
                    ops::relu_inplace(&mut y);
                }
            }
            if record {
                head_inputs.push(std::mem::replace(&mut cur, y.clone()));
                head_outputs.push(y);
            } else {
                cur = y;
            }
        }
        let out = ops::bilinear_forward(&cur, x.h, x.w);
        let trace = record.then_some(Trace {
            stages: stage_traces,
            tap_pools,
            tap_shapes,
            head_inputs,
            head_outputs,
            low: cur,
        });
        (out, trace)
    }

    /// Accumulate into `grads` the gradient of a scalar loss whose gradient
    /// with respect to the network output is `dout`.
    pub fn backward(&self, trace: &Trace<T>, dout: &Tensor<T>, grads: &mut Gradients<T>) {
        let mut d = ops::bilinear_backward(dout, trace.low.h, trace.low.w);
        let last = self.layout.head.len() - 1;
        for (i, layer) in self.layout.head.iter().enumerate().rev() {
            if i == last {
                if self.config.nonneg_output {
                    ops::relu_backward_inplace(&mut d, &trace.head_outputs[i]);
                }
                let g = T::from_f64_lossy(self.config.output_scale);
                d.data.iter_mut().for_each(|v| *v = *v * g);
            } else {
                ops::relu_backward_inplace(&mut d, &trace.head_outputs[i]);
            }
            d = self.conv_backward(layer, &trace.head_inputs[i], &d, grads, true).unwrap();
        }

        let n_stages = self.layout.stages.len();
        let mut d_stage: Vec<Option<Tensor<T>>> = vec![None; n_stages];
        let parts = ops::concat_padded_backward(&d, &trace.tap_shapes);
        for ((&t, part), pool) in self.config.fusion_taps.iter().zip(parts).zip(&trace.tap_pools) {
            let g = match pool {
                Some((arg, h, w)) => ops::maxpool_backward(&part, arg, *h, *w),
                None => part,
            };
            accumulate(&mut d_stage[t], g);
        }

        for s in (0..n_stages).rev() {
            let Some(mut d) = d_stage[s].take() else { continue };
            let st = &trace.stages[s];
            let convs = &self.layout.stages[s];
            for j in (0..convs.len()).rev() {
                ops::relu_backward_inplace(&mut d, &st.conv_outputs[j]);
                let need_dx = !(s == 0 && j == 0);
                match self.conv_backward(&convs[j], &st.conv_inputs[j], &d, grads, need_dx) {
                    Some(dx) => d = dx,
                    None => break,
                }
            }
            if s > 0 {
                let g = match &st.pool {
                    Some((arg, h, w)) => ops::maxpool_backward(&d, arg, *h, *w),
                    None => d,
                };
                accumulate(&mut d_stage[s - 1], g);
            }
        }
    }

    fn conv_backward(
        &self,
        layer: &ConvLayer,
        input: &Tensor<T>,
        dout: &Tensor<T>,
        grads: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (gw, gb) = two_mut(&mut grads.tensors, layer.weight, layer.bias);
        ops::conv2d_backward(input, &layer.shape, &self.params[layer.weight], dout, gw, gb, need_dx)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
