//! Trainable layers that wire the quantizers, running-σ trackers, and
//! batchnorm around the dense conv/linear kernels, plus the [`Network`]
//! container the trainer and exporter operate on.

use crate::batchnorm::BatchNorm;
use crate::ops::{self, ConvGeom};
use crate::optim::{sgd_scalar, OptimizerCfg, Param};
use crate::quant::{self, QuantError, QuantMode, QuantizerState};
use crate::quant_log2;
use crate::rng::Rng;
use crate::stats::{self, SigmaMode, SigmaTracker};
use crate::tensor::Tensor;

/// Thresholds are projected back above this after each α update so the clip
/// interval can never collapse or flip sign.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    Conv2d { in_ch: usize, out_ch: usize, k: usize, geom: ConvGeom },
    Linear { in_f: usize, out_f: usize },
}

impl LayerOp {
    /// Per-sample output shape given a per-sample input shape.
    pub fn out_shape(&self, in_shape: &[usize]) -> Vec<usize> {
        match *self {
            LayerOp::Conv2d { in_ch, out_ch, k, geom } => {
                assert_eq!(in_shape.len(), 3, "conv input must be [c, h, w]");
                assert_eq!(in_shape[0], in_ch, "channel mismatch");
                vec![
                    out_ch,
                    ops::conv_out_dim(in_shape[1], k, geom),
                    ops::conv_out_dim(in_shape[2], k, geom),
                ]
            }
            LayerOp::Linear { in_f, out_f } => {
                let flat: usize = in_shape.iter().product();
                assert_eq!(flat, in_f, "linear input mismatch");
                vec![out_f]
            }
        }
    }
}

/// What happens to a layer's input before the matmul/conv. The unsigned
/// quantizer clips negatives to zero, so it doubles as the nonlinearity;
/// unquantized interior layers fall back to a plain relu and the very first
/// layer consumes the raw input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputStage {
    Raw,
    Relu,
    Quantizer,
}

/// How much of a layer is quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerQuant {
    /// Full precision end to end.
    Off,
    /// Quantize only the incoming activations; weights stay float. Used for
    /// the classifier head so the integer pipeline still covers its input.
    InputOnly,
    /// Quantize incoming activations and weights.
    Full,
}

/// Per-layer quantization plan consumed by the constructors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub quant: LayerQuant,
    /// Weight quantizer family; activations are always uniform.
    pub mode: QuantMode,
    pub weight_bits: u8,
    pub act_bits: u8,
}

impl LayerPlan {
    pub fn off() -> LayerPlan {
        LayerPlan { quant: LayerQuant::Off, mode: QuantMode::Uniform, weight_bits: 8, act_bits: 8 }
    }

    pub fn full(bits: u8, mode: QuantMode) -> LayerPlan {
        LayerPlan { quant: LayerQuant::Full, mode, weight_bits: bits, act_bits: bits }
    }

    pub fn input_only(act_bits: u8) -> LayerPlan {
        LayerPlan { quant: LayerQuant::InputOnly, mode: QuantMode::Uniform, weight_bits: 8, act_bits }
    }
}

#[derive(Clone, Debug)]
struct Cache {
    /// Input as seen by this layer (flattened for linear), pre input-stage.
    x_raw: Tensor,
    /// Post input-stage tensor fed to the conv/linear kernel.
    x_act: Tensor,
    /// Weights actually used (quantized or master).
    w_used: Tensor,
    /// Shape the incoming gradient must be restored to.
    in_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct QuantizedLayer {
    pub op: LayerOp,
    /// Full-precision master weights; the optimizer updates these.
    pub weights: Param,
    pub bias: Option<Param>,
    pub input: InputStage,
    pub weight_quant: Option<QuantizerState>,
    pub act_quant: Option<QuantizerState>,
    pub act_tracker: Option<SigmaTracker>,
    pub bn: Option<BatchNorm>,
    pub w_alpha_vel: f64,
    pub a_alpha_vel: f64,
    w_alpha_grad: f64,
    a_alpha_grad: f64,
    cache: Option<Cache>,
}

fn input_stage(plan: &LayerPlan, first: bool) -> InputStage {
    match plan.quant {
        LayerQuant::Off => {
            if first {
                InputStage::Raw
            } else {
                InputStage::Relu
            }
        }
        _ => InputStage::Quantizer,
    }
}

fn quantizers_for(plan: &LayerPlan) -> Result<(Option<QuantizerState>, Option<QuantizerState>), QuantError> {
    let act = match plan.quant {
        LayerQuant::Off => None,
        _ => Some(QuantizerState::unsigned(plan.act_bits)?),
    };
    let weight = match plan.quant {
        LayerQuant::Full => Some(QuantizerState::signed(plan.weight_bits, plan.mode)?),
        _ => None,
    };
    Ok((weight, act))
}

impl QuantizedLayer {
    pub fn conv2d(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        geom: ConvGeom,
        plan: &LayerPlan,
        first: bool,
        with_bn: bool,
        rng: &mut Rng,
    ) -> Result<QuantizedLayer, QuantError> {
        let (weight_quant, act_quant) = quantizers_for(plan)?;
        let fan_in = in_ch * k * k;
        let weights = Tensor::init_uniform(&[out_ch, in_ch, k, k], fan_in, rng);
        Ok(QuantizedLayer {
            op: LayerOp::Conv2d { in_ch, out_ch, k, geom },
            weights: Param::new(weights, true),
            bias: None,
            input: input_stage(plan, first),
            act_tracker: act_quant.as_ref().map(|_| SigmaTracker::new(SigmaMode::Activations)),
            weight_quant,
            act_quant,
            bn: if with_bn { Some(BatchNorm::new(out_ch)) } else { None },
            w_alpha_vel: 0.0,
            a_alpha_vel: 0.0,
            w_alpha_grad: 0.0,
            a_alpha_grad: 0.0,
            cache: None,
        })
    }

    pub fn linear(
        in_f: usize,
        out_f: usize,
        plan: &LayerPlan,
        first: bool,
        with_bias: bool,
        with_bn: bool,
        rng: &mut Rng,
    ) -> Result<QuantizedLayer, QuantError> {
        let (weight_quant, act_quant) = quantizers_for(plan)?;
        let weights = Tensor::init_uniform(&[out_f, in_f], in_f, rng);
        let bias = if with_bias {
            Some(Param::new(Tensor::init_uniform(&[out_f], in_f, rng), false))
        } else {
            None
        };
        Ok(QuantizedLayer {
            op: LayerOp::Linear { in_f, out_f },
            weights: Param::new(weights, true),
            bias,
            input: input_stage(plan, first),
            act_tracker: act_quant.as_ref().map(|_| SigmaTracker::new(SigmaMode::Activations)),
            weight_quant,
            act_quant,
            bn: if with_bn { Some(BatchNorm::new(out_f)) } else { None },
            w_alpha_vel: 0.0,
            a_alpha_vel: 0.0,
            w_alpha_grad: 0.0,
            a_alpha_grad: 0.0,
            cache: None,
        })
    }

    /// Reassembles a layer from restored state. Gradient slots and the
    /// forward cache start cleared; only optimizer velocities carry over.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        op: LayerOp,
        weights: Param,
        bias: Option<Param>,
        input: InputStage,
        weight_quant: Option<QuantizerState>,
        act_quant: Option<QuantizerState>,
        act_tracker: Option<SigmaTracker>,
        bn: Option<BatchNorm>,
        w_alpha_vel: f64,
        a_alpha_vel: f64,
    ) -> QuantizedLayer {
        QuantizedLayer {
            op,
            weights,
            bias,
            input,
            weight_quant,
            act_quant,
            act_tracker,
            bn,
            w_alpha_vel,
            a_alpha_vel,
            w_alpha_grad: 0.0,
            a_alpha_grad: 0.0,
            cache: None,
        }
    }

    /// Weights as the conv/linear kernel will see them this step: quantized
    /// from the master copy, with σ re-measured unless the state is frozen.
    pub fn effective_weights(&mut self) -> Tensor {
        match &mut self.weight_quant {
            Some(st) => {
                if !st.frozen {
                    st.sigma = stats::weight_sigma(&self.weights.value)
                        .expect("layer weights are never empty");
                }
                match st.mode {
                    QuantMode::Uniform => quant::quantize_forward(&self.weights.value, st).y_q,
                    QuantMode::Log2 => {
                        quant_log2::quantize_log2_forward(&self.weights.value, st).y_q
                    }
                }
            }
            None => self.weights.value.clone(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Tensor {
        let in_shape = x.shape().to_vec();
        let x_raw = match self.op {
            LayerOp::Linear { .. } if x.shape().len() != 2 => {
                let n = x.shape()[0];
                x.reshape(&[n, x.numel() / n])
            }
            _ => x.clone(),
        };
        let x_act = match self.input {
            InputStage::Raw => x_raw.clone(),
            InputStage::Relu => ops::relu_fwd(&x_raw),
            InputStage::Quantizer => {
                let st = self.act_quant.as_mut().expect("quantizer stage without state");
                if training && !st.frozen {
                    let tracker =
                        self.act_tracker.as_mut().expect("quantizer stage without tracker");
                    let sigma_t = stats::activation_sigma(&x_raw);
                    st.sigma = tracker.observe(sigma_t).expect("batch sigma is nonnegative");
                }
                quant::quantize_forward(&x_raw, st).y_q
            }
        };
        let w_used = self.effective_weights();
        let pre_bn = match self.op {
            LayerOp::Conv2d { geom, .. } => ops::conv2d_fwd(&x_act, &w_used, geom),
            LayerOp::Linear { .. } => {
                ops::linear_fwd(&x_act, &w_used, self.bias.as_ref().map(|p| &p.value))
            }
        };
        let out = match &mut self.bn {
            Some(bn) => bn.forward(&pre_bn, training),
            None => pre_bn,
        };
        if training {
            self.cache = Some(Cache { x_raw, x_act, w_used, in_shape });
        }
        out
    }

    /// Backpropagates through bn -> kernel -> quantizers, accumulating
    /// weight/bias/bn gradients in place and α gradients in the scalar
    /// slots. Returns the gradient w.r.t. this layer's input.
    pub fn backward(&mut self, g_out: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("backward without a training forward");
        let g = match &mut self.bn {
            Some(bn) => bn.backward(g_out),
            None => g_out.clone(),
        };
        let (g_x_act, g_w, g_b) = match self.op {
            LayerOp::Conv2d { geom, .. } => {
                let (gx, gw) = ops::conv2d_bwd(&cache.x_act, &cache.w_used, geom, &g);
                (gx, gw, None)
            }
            LayerOp::Linear { .. } => {
                let (gx, gw, gb) = ops::linear_bwd(&cache.x_act, &cache.w_used, &g);
                (gx, gw, Some(gb))
            }
        };
        if let (Some(bias), Some(gb)) = (&mut self.bias, g_b) {
            bias.value.accumulate_grad(gb.data());
        }
        match &self.weight_quant {
            Some(st) => {
                let (g_master, g_alpha) = match st.mode {
                    QuantMode::Uniform => quant::quantize_backward(&self.weights.value, &g_w, st),
                    QuantMode::Log2 => {
                        quant_log2::log2_backward(&self.weights.value, &g_w, st)
                    }
                }
                .expect("weight/grad shapes match by construction");
                self.weights.value.accumulate_grad(g_master.data());
                self.w_alpha_grad += g_alpha;
            }
            None => self.weights.value.accumulate_grad(g_w.data()),
        }
        let g_in = match self.input {
            InputStage::Raw => g_x_act,
            InputStage::Relu => ops::relu_bwd(&cache.x_raw, &g_x_act),
            InputStage::Quantizer => {
                let st = self.act_quant.as_ref().expect("quantizer stage without state");
                let (g_in, g_alpha) = quant::quantize_backward(&cache.x_raw, &g_x_act, st)
                    .expect("input/grad shapes match by construction");
                self.a_alpha_grad += g_alpha;
                g_in
            }
        };
        g_in.reshape(&cache.in_shape)
    }

    pub fn zero_grads(&mut self) {
        self.weights.zero_grad();
        if let Some(b) = &mut self.bias {
            b.zero_grad();
        }
        if let Some(bn) = &mut self.bn {
            bn.gamma.zero_grad();
            bn.beta.zero_grad();
        }
        self.w_alpha_grad = 0.0;
        self.a_alpha_grad = 0.0;
    }

    pub fn apply_updates(&mut self, lr: f64, cfg: &OptimizerCfg) {
        self.weights.step(lr, cfg.momentum, cfg.weight_decay);
        if let Some(b) = &mut self.bias {
            b.step(lr, cfg.momentum, cfg.weight_decay);
        }
        if let Some(bn) = &mut self.bn {
            bn.gamma.step(lr, cfg.momentum, cfg.weight_decay);
            bn.beta.step(lr, cfg.momentum, cfg.weight_decay);
        }
        if let Some(st) = &mut self.weight_quant {
            if !st.frozen && st.grad_scale != 0.0 {
                sgd_scalar(&mut st.alpha, self.w_alpha_grad, &mut self.w_alpha_vel, lr, cfg.momentum);
                st.alpha = st.alpha.max(ALPHA_FLOOR);
            }
        }
        if let Some(st) = &mut self.act_quant {
            if !st.frozen && st.grad_scale != 0.0 {
                sgd_scalar(&mut st.alpha, self.a_alpha_grad, &mut self.a_alpha_vel, lr, cfg.momentum);
                st.alpha = st.alpha.max(ALPHA_FLOOR);
            }
        }
    }

    /// Fraction of master weights that currently quantize to exactly zero.
    pub fn weight_prune_ratio(&self) -> Option<f64> {
        let st = self.weight_quant.as_ref()?;
        Some(match st.mode {
            QuantMode::Uniform => {
                quant::pruning_ratio(&quant::quantize_forward(&self.weights.value, st).y_d)
            }
            QuantMode::Log2 => {
                let out = quant_log2::quantize_log2_forward(&self.weights.value, st);
                out.y_p2.iter().filter(|&&v| v == 0).count() as f64 / out.y_p2.len() as f64
            }
        })
    }
}

/// A sequential stack of quantized layers ending in class logits.
#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<QuantizedLayer>,
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl Network {
    pub fn new(layers: Vec<QuantizedLayer>, input_shape: Vec<usize>, classes: usize) -> Network {
        assert!(!layers.is_empty(), "network needs at least one layer");
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.op.out_shape(&shape);
        }
        assert_eq!(shape, vec![classes], "final layer must emit one logit per class");
        Network { layers, input_shape, classes }
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Tensor {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, training);
        }
        cur
    }

    /// Backward pass from the loss gradient on the logits; all parameter
    /// gradients accumulate in place.
    pub fn backward(&mut self, g_logits: &Tensor) {
        let mut g = g_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    pub fn apply_updates(&mut self, lr: f64, cfg: &OptimizerCfg) {
        for layer in &mut self.layers {
            layer.apply_updates(lr, cfg);
        }
    }

    pub fn for_each_quantizer_mut(&mut self, mut f: impl FnMut(&mut QuantizerState)) {
        for layer in &mut self.layers {
            if let Some(st) = &mut layer.weight_quant {
                f(st);
            }
            if let Some(st) = &mut layer.act_quant {
                f(st);
            }
        }
    }

    /// Pins every quantizer's α and σ at their current values (or releases
    /// them); used by the retraining phase that removes interval noise.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.for_each_quantizer_mut(|st| st.frozen = frozen);
    }

    pub fn set_grad_scale(&mut self, s: f64) {
        self.for_each_quantizer_mut(|st| st.grad_scale = s);
    }

    pub fn set_alpha_decay(&mut self, lambda: f64) {
        self.for_each_quantizer_mut(|st| st.weight_decay = lambda);
    }

    /// Indices of layers carrying a weight quantizer, in forward order.
    pub fn weight_quant_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weight_quant.is_some())
            .map(|(i, _)| i)
            .collect()
    }
}
