//! Pure-integer inference. A trained network exports to an [`IntegerModel`]:
//! float head layers stay as-is, quantized middle layers carry integer
//! weight codes plus per-channel fixed-point requantization constants, and
//! the float tail consumes the last integer grid through one dequantize.
//!
//! Between quantized layers the float pipeline computes
//! `a' = round(clip(bn(conv(x_q, w_q))) / step')` on reals. Folding the
//! batchnorm affine `g·x + c` and the scales `step_w · step_in / step'`
//! into one real `r` per output channel gives `a' = clamp(round(r·acc + B))`
//! with `acc` the exact integer accumulator. `r` is encoded as `m·2^(-shift)`
//! with a 32-bit `m` (half-away-from-zero rounding), so the integer path
//! needs only adds, shifts, compares, and one fixed-point multiply per
//! output (uniform weight codes also multiply inside the MAC; power-of-two
//! codes turn it into shift-add).
//!
//! File layout (little-endian, floats as IEEE bits):
//!
//! ```text
//! "SDQI" | version u32 | input_shape usize[] | classes usize
//! head count usize | FloatLayer...
//! entry QuantizerState
//! mid count usize | per mid:
//!   op (u8 tag + dims) | codes (u8 tag: 0 uniform i64[], 1 log2 u8[])
//!   requant: m i64[] | shift u8[] | bias i64[] | out_levels i64 | acc64 bool
//! tail_step f64 | tail FloatLayer
//! FloatLayer = op | relu bool | weights f64[] | bias Option<f64[]>
//!              | bn Option<gamma f64[], beta f64[], mean f64[], var f64[], eps f64>
//! ```

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::batchnorm::bn_eval;
use crate::layers::{InputStage, LayerOp, Network};
use crate::ops::{self, ConvGeom};
use crate::quant::{self, QuantMode, QuantizerState};
use crate::quant_log2;
use crate::serial::{get_quantizer, put_quantizer, ReadError, Reader, Writer};
use crate::stats;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SDQI";
pub const VERSION: u32 = 1;

/// Fixed-point multipliers are normalized into `[2^30, 2^31)`.
const M_BITS: u32 = 31;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("model not in eval mode: {0}")]
    NotEvalMode(String),
    #[error("layer {index} is unquantized in the middle of the integer pipeline")]
    UnquantizedMiddle { index: usize },
    #[error("cannot export: {0}")]
    Structure(String),
    #[error("requantization scale out of fixed-point range at layer {layer}, channel {channel}")]
    ScaleOutOfRange { layer: usize, channel: usize },
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error("accumulator overflow in quantized layer {layer}")]
    Overflow { layer: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not an integer-model file (magic {0:02x?})")]
    Magic([u8; 4]),
    #[error("unsupported integer-model version {0}")]
    Version(u32),
    #[error(transparent)]
    Corrupt(#[from] ReadError),
    #[error("malformed integer model: {0}")]
    Malformed(String),
}

/// Frozen batchnorm statistics for float-path evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

/// An unquantized layer executed on floats with the same kernels the
/// training-time network uses, so head outputs are bit-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatLayer {
    pub op: LayerOp,
    pub relu: bool,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BnParams>,
}

/// Per-output-channel fixed-point mapping from an integer accumulator onto
/// the next layer's activation grid: `clamp(rnd((m·acc + bias) >> shift))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Requant {
    pub m: Vec<i64>,
    pub shift: Vec<u8>,
    pub bias: Vec<i64>,
    /// Level count of the destination grid; outputs clamp to `[0, out_levels]`.
    pub out_levels: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightCodes {
    /// Grid indices `y_d`, one per weight.
    Uniform(Vec<i32>),
    /// Packed power-of-two codes: `zero << 7 | sign << 6 | exponent`.
    Log2(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntQuantLayer {
    pub op: LayerOp,
    pub codes: WeightCodes,
    pub requant: Requant,
    /// Whether accumulation needs 64-bit; decided at export from the exact
    /// worst-case `fan_in · L_act · |w|` bound.
    pub acc64: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegerModel {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Leading unquantized layers, run on floats.
    pub head: Vec<FloatLayer>,
    /// Activation quantizer of the first quantized layer; converts the head
    /// output to integer codes exactly like the float path does.
    pub entry: QuantizerState,
    pub mids: Vec<IntQuantLayer>,
    /// Grid spacing of the tail input; dequantizes codes back to floats.
    pub tail_step: f64,
    /// Final unquantized classifier.
    pub tail: FloatLayer,
}

/// Packs a power-of-two level (`0` or `±2^k`) into one byte.
pub fn encode_p2(v: i64) -> u8 {
    if v == 0 {
        return 1 << 7;
    }
    let mag = v.unsigned_abs();
    debug_assert!(mag.is_power_of_two());
    let exp = mag.trailing_zeros() as u8;
    debug_assert!(exp < 64);
    ((v < 0) as u8) << 6 | exp
}

/// Unpacks a code to `None` (pruned weight) or `(negative, exponent)`.
pub fn decode_p2(code: u8) -> Option<(bool, u32)> {
    if code & 0x80 != 0 {
        return None;
    }
    Some((code & 0x40 != 0, (code & 0x3f) as u32))
}

/// Encodes a real scale as `m · 2^(-shift)` with `2^30 <= |m| < 2^31`.
fn fixed_point(r: f64) -> Option<(i64, u8)> {
    if r == 0.0 {
        return Some((0, M_BITS as u8));
    }
    let e = r.abs().log2().floor() as i32;
    let mut shift = (M_BITS as i32 - 1) - e;
    if shift < 1 {
        return None;
    }
    if shift > 62 {
        // Scale so tiny the multiplier underflows: saturate at the widest
        // shift; m may round to 0, mapping every accumulator to the bias.
        shift = 62;
    }
    let mut m = (r * (shift as f64).exp2()).round() as i64;
    if m.unsigned_abs() == 1 << M_BITS {
        m /= 2;
        shift -= 1;
        if shift < 1 {
            return None;
        }
    }
    debug_assert!(m.unsigned_abs() < 1 << M_BITS);
    Some((m, shift as u8))
}

/// `(m·acc + bias) · 2^(-shift)` rounded half away from zero, clamped onto
/// `[0, out_levels]`. Done in 128-bit so the fixed-point arithmetic itself
/// cannot overflow.
fn requant_one(acc: i64, m: i64, shift: u8, bias: i64, out_levels: i64) -> i32 {
    let v = m as i128 * acc as i128 + bias as i128;
    let half = 1i128 << (shift - 1);
    let rounded = if v >= 0 { (v + half) >> shift } else { -((-v + half) >> shift) };
    rounded.clamp(0, out_levels as i128) as i32
}

fn bn_from_layer(bn: &crate::batchnorm::BatchNorm) -> BnParams {
    BnParams {
        gamma: bn.gamma.value.data().to_vec(),
        beta: bn.beta.value.data().to_vec(),
        mean: bn.running_mean.clone(),
        var: bn.running_var.clone(),
        eps: bn.eps,
    }
}

/// Copy without the gradient buffer, so exported tensors compare equal to
/// their file-round-tripped form.
fn detach(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec())
}

fn float_layer_from(net: &Network, index: usize) -> FloatLayer {
    let layer = &net.layers[index];
    FloatLayer {
        op: layer.op,
        relu: layer.input == InputStage::Relu,
        weights: detach(&layer.weights.value),
        bias: layer.bias.as_ref().map(|p| detach(&p.value)),
        bn: layer.bn.as_ref().map(bn_from_layer),
    }
}

/// Eval-mode forward through one float layer; mirrors the quantized layer's
/// eval path operation for operation.
fn float_layer_fwd(fl: &FloatLayer, x: &Tensor) -> Tensor {
    let x = match fl.op {
        LayerOp::Linear { .. } if x.shape().len() != 2 => {
            let n = x.shape()[0];
            x.reshape(&[n, x.numel() / n])
        }
        _ => x.clone(),
    };
    let x = if fl.relu { ops::relu_fwd(&x) } else { x };
    let pre = match fl.op {
        LayerOp::Conv2d { geom, .. } => ops::conv2d_fwd(&x, &fl.weights, geom),
        LayerOp::Linear { .. } => ops::linear_fwd(&x, &fl.weights, fl.bias.as_ref()),
    };
    match &fl.bn {
        Some(bn) => Tensor::new(
            pre.shape(),
            bn_eval(pre.data(), pre.shape(), &bn.gamma, &bn.beta, &bn.mean, &bn.var, bn.eps),
        ),
        None => pre,
    }
}

/// Signed magnitude of one weight code on the integer grid.
fn code_magnitude(codes: &WeightCodes, j: usize) -> i64 {
    match codes {
        WeightCodes::Uniform(v) => v[j].unsigned_abs() as i64,
        WeightCodes::Log2(v) => match decode_p2(v[j]) {
            None => 0,
            Some((_, exp)) => 1i64 << exp,
        },
    }
}

fn codes_len(codes: &WeightCodes) -> usize {
    match codes {
        WeightCodes::Uniform(v) => v.len(),
        WeightCodes::Log2(v) => v.len(),
    }
}

pub fn export_integer_model(net: &mut Network) -> Result<IntegerModel, ExportError> {
    #[derive(PartialEq, Clone, Copy)]
    enum Kind {
        Off,
        Full,
        InputOnly,
    }
    let mut kinds = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        kinds.push(match (layer.weight_quant.is_some(), layer.act_quant.is_some()) {
            (false, false) => Kind::Off,
            (true, true) => Kind::Full,
            (false, true) => Kind::InputOnly,
            (true, false) => {
                return Err(ExportError::Structure(format!(
                    "layer {i} quantizes weights but not its input"
                )))
            }
        });
    }
    // Expected shape: Off* Full+ InputOnly, with the InputOnly layer last.
    let first_full = kinds
        .iter()
        .position(|&k| k == Kind::Full)
        .ok_or_else(|| ExportError::Structure("no quantized layers to export".into()))?;
    let tail_idx = net.layers.len() - 1;
    if kinds[tail_idx] != Kind::InputOnly {
        return Err(ExportError::Structure(
            "last layer must keep float weights behind a quantized input".into(),
        ));
    }
    for (i, &k) in kinds.iter().enumerate() {
        let expected = if i < first_full {
            Kind::Off
        } else if i < tail_idx {
            Kind::Full
        } else {
            Kind::InputOnly
        };
        if k != expected {
            return Err(ExportError::UnquantizedMiddle { index: i });
        }
    }
    // Eval readiness: σ̂ must have been estimated for every activation
    // quantizer; a never-trained model has no meaningful grids.
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.act_quant.is_some() {
            let ready = layer.act_tracker.as_ref().map(|t| t.initialized).unwrap_or(false)
                || layer.act_quant.as_ref().map(|st| st.frozen).unwrap_or(false);
            if !ready {
                return Err(ExportError::NotEvalMode(format!(
                    "activation σ of layer {i} was never estimated"
                )));
            }
        }
    }

    // Refresh weight σ exactly like an eval forward would, then snapshot
    // the quantizer states so scales match the float path bit for bit.
    for layer in &mut net.layers {
        if let Some(st) = &mut layer.weight_quant {
            if !st.frozen {
                st.sigma = stats::weight_sigma(&layer.weights.value)
                    .expect("layer weights are never empty");
            }
        }
    }

    let head: Vec<FloatLayer> = (0..first_full).map(|i| float_layer_from(net, i)).collect();
    let entry = net.layers[first_full].act_quant.clone().expect("full layer has act quantizer");

    let mut mids = Vec::with_capacity(tail_idx - first_full);
    for i in first_full..tail_idx {
        let layer = &net.layers[i];
        let w_st = layer.weight_quant.as_ref().expect("full layer has weight quantizer");
        let act_st = layer.act_quant.as_ref().expect("full layer has act quantizer");
        let next_act = net.layers[i + 1].act_quant.as_ref().expect("next layer is quantized");

        let codes = match w_st.mode {
            QuantMode::Uniform => {
                WeightCodes::Uniform(quant::quantize_forward(&layer.weights.value, w_st).y_d)
            }
            QuantMode::Log2 => {
                let out = quant_log2::quantize_log2_forward(&layer.weights.value, w_st);
                WeightCodes::Log2(out.y_p2.iter().map(|&v| encode_p2(v)).collect())
            }
        };
        let step_w = w_st.step();
        let step_in = act_st.step();
        let step_next = next_act.step();
        let out_levels = next_act.max_level();

        let (out_units, fan_in) = match layer.op {
            LayerOp::Conv2d { in_ch, out_ch, k, .. } => (out_ch, in_ch * k * k),
            LayerOp::Linear { in_f, out_f } => (out_f, in_f),
        };
        let mut m = Vec::with_capacity(out_units);
        let mut shift = Vec::with_capacity(out_units);
        let mut bias_fix = Vec::with_capacity(out_units);
        for ch in 0..out_units {
            let (g, c) = match &layer.bn {
                Some(bn) => {
                    let inv = 1.0 / (bn.running_var[ch] + bn.eps).sqrt();
                    let g = bn.gamma.value.data()[ch] * inv;
                    (g, bn.beta.value.data()[ch] - g * bn.running_mean[ch])
                }
                None => (1.0, 0.0),
            };
            let float_bias = layer.bias.as_ref().map(|b| b.value.data()[ch]).unwrap_or(0.0);
            let r = g * step_w * step_in / step_next;
            let b_real = (g * float_bias + c) / step_next;
            let (mi, si) =
                fixed_point(r).ok_or(ExportError::ScaleOutOfRange { layer: i, channel: ch })?;
            m.push(mi);
            shift.push(si);
            bias_fix.push((b_real * (si as f64).exp2()).round() as i64);
        }

        // Worst-case |accumulator| for this layer: inputs peak at L_act.
        let l_act = act_st.max_level() as i128;
        let mut worst: i128 = 0;
        for ch in 0..out_units {
            let mut sum: i128 = 0;
            for j in 0..fan_in {
                sum += code_magnitude(&codes, ch * fan_in + j) as i128 * l_act;
            }
            worst = worst.max(sum);
        }
        let acc64 = worst > i32::MAX as i128;

        mids.push(IntQuantLayer {
            op: layer.op,
            codes,
            requant: Requant { m, shift, bias: bias_fix, out_levels },
            acc64,
        });
    }

    let tail_step = net.layers[tail_idx].act_quant.as_ref().unwrap().step();
    let tail = float_layer_from(net, tail_idx);
    Ok(IntegerModel {
        input_shape: net.input_shape.clone(),
        classes: net.classes,
        head,
        entry,
        mids,
        tail_step,
        tail,
    })
}

/// Per-sample shape entering the first quantized layer.
fn mid_input_shape(im: &IntegerModel) -> Vec<usize> {
    let mut shape = im.input_shape.clone();
    for fl in &im.head {
        shape = fl.op.out_shape(&shape);
    }
    shape
}

struct Acc {
    value: i64,
    limit: i64,
}

impl Acc {
    fn new(acc64: bool) -> Acc {
        Acc { value: 0, limit: if acc64 { i64::MAX } else { i32::MAX as i64 } }
    }

    #[inline]
    fn add(&mut self, term: i64, layer: usize) -> Result<(), InferError> {
        let v = self.value.checked_add(term).ok_or(InferError::Overflow { layer })?;
        if v > self.limit || v < -self.limit {
            return Err(InferError::Overflow { layer });
        }
        self.value = v;
        Ok(())
    }
}

/// One MAC term: integer multiply for uniform codes, shift for log2 codes.
#[inline]
fn mac_term(codes: &WeightCodes, j: usize, a: i64, layer: usize) -> Result<i64, InferError> {
    match codes {
        WeightCodes::Uniform(v) => Ok(v[j] as i64 * a),
        WeightCodes::Log2(v) => match decode_p2(v[j]) {
            None => Ok(0),
            Some((neg, exp)) => {
                let shifted =
                    a.checked_shl(exp).filter(|s| s >> exp == a).ok_or(InferError::Overflow { layer })?;
                Ok(if neg { -shifted } else { shifted })
            }
        },
    }
}

/// Integer forward through one quantized layer: exact MAC/shift-add
/// accumulation followed by the fixed-point requantization.
fn int_layer_fwd(
    layer_index: usize,
    il: &IntQuantLayer,
    codes_in: &[i32],
    in_shape: &[usize],
    batch: usize,
) -> Result<(Vec<i32>, Vec<usize>), InferError> {
    let rq = &il.requant;
    match il.op {
        LayerOp::Conv2d { in_ch, out_ch, k, geom } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            debug_assert_eq!(in_shape[0], in_ch);
            let oh = ops::conv_out_dim(h, k, geom);
            let ow = ops::conv_out_dim(w, k, geom);
            let mut out = vec![0i32; batch * out_ch * oh * ow];
            for n in 0..batch {
                for oc in 0..out_ch {
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = Acc::new(il.acc64);
                            for ic in 0..in_ch {
                                for ky in 0..k {
                                    let iy = (y * geom.stride + ky) as isize - geom.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (x * geom.stride + kx) as isize - geom.pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let a = codes_in
                                            [((n * in_ch + ic) * h + iy as usize) * w + ix as usize]
                                            as i64;
                                        if a == 0 {
                                            continue;
                                        }
                                        let j = ((oc * in_ch + ic) * k + ky) * k + kx;
                                        acc.add(mac_term(&il.codes, j, a, layer_index)?, layer_index)?;
                                    }
                                }
                            }
                            out[((n * out_ch + oc) * oh + y) * ow + x] =
                                requant_one(acc.value, rq.m[oc], rq.shift[oc], rq.bias[oc], rq.out_levels);
                        }
                    }
                }
            }
            Ok((out, vec![out_ch, oh, ow]))
        }
        LayerOp::Linear { in_f, out_f } => {
            debug_assert_eq!(in_shape.iter().product::<usize>(), in_f);
            let mut out = vec![0i32; batch * out_f];
            for n in 0..batch {
                for of in 0..out_f {
                    let mut acc = Acc::new(il.acc64);
                    for j in 0..in_f {
                        let a = codes_in[n * in_f + j] as i64;
                        if a == 0 {
                            continue;
                        }
                        acc.add(mac_term(&il.codes, of * in_f + j, a, layer_index)?, layer_index)?;
                    }
                    out[n * out_f + of] =
                        requant_one(acc.value, rq.m[of], rq.shift[of], rq.bias[of], rq.out_levels);
                }
            }
            Ok((out, vec![out_f]))
        }
    }
}

/// Runs the integer pipeline from entry codes to real logits. `codes` holds
/// `batch` samples on the first quantized layer's activation grid.
pub fn shiftadd_forward(
    im: &IntegerModel,
    codes: &[i32],
    batch: usize,
) -> Result<Tensor, InferError> {
    let mut shape = mid_input_shape(im);
    if codes.len() != batch * shape.iter().product::<usize>() {
        return Err(InferError::Shape(format!(
            "expected {} codes for batch {batch} of {:?}, got {}",
            batch * shape.iter().product::<usize>(),
            shape,
            codes.len()
        )));
    }
    let mut cur = codes.to_vec();
    for (i, il) in im.mids.iter().enumerate() {
        let (next, next_shape) = int_layer_fwd(i, il, &cur, &shape, batch)?;
        cur = next;
        shape = next_shape;
    }
    // Dequantize onto the tail's grid and finish on floats.
    let mut full_shape = vec![batch];
    full_shape.extend_from_slice(&shape);
    let x = Tensor::new(&full_shape, cur.iter().map(|&a| a as f64 * im.tail_step).collect());
    Ok(float_layer_fwd(&im.tail, &x))
}

/// Full integer-path inference from raw inputs: float head, entry
/// quantization, shift-add middle, float tail.
pub fn forward(im: &IntegerModel, x: &Tensor) -> Result<Tensor, InferError> {
    let batch = x.shape()[0];
    let mut cur = x.clone();
    for fl in &im.head {
        cur = float_layer_fwd(fl, &cur);
    }
    let q = quant::quantize_forward(&cur, &im.entry);
    shiftadd_forward(im, &q.y_d, batch)
}

/// Maximum elementwise logit deviation between the float model and the
/// integer model, normalized by the largest float-path logit magnitude.
pub fn verify_equivalence(
    net: &mut Network,
    im: &IntegerModel,
    inputs: &Tensor,
) -> Result<f64, InferError> {
    let f = net.forward(inputs, false);
    let i = forward(im, inputs)?;
    debug_assert_eq!(f.shape(), i.shape());
    let mut dev = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &b) in f.data().iter().zip(i.data()) {
        dev = dev.max((a - b).abs());
        scale = scale.max(a.abs());
    }
    Ok(if scale > 0.0 { dev / scale } else { dev })
}

/// Fraction of inputs whose predicted class agrees between the two paths.
pub fn argmax_agreement(
    net: &mut Network,
    im: &IntegerModel,
    inputs: &Tensor,
) -> Result<f64, InferError> {
    let f = net.forward(inputs, false);
    let i = forward(im, inputs)?;
    let n = f.shape()[0];
    let c = f.numel() / n;
    let argmax = |row: &[f64]| {
        row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
    };
    let mut agree = 0usize;
    for s in 0..n {
        if argmax(&f.data()[s * c..(s + 1) * c]) == argmax(&i.data()[s * c..(s + 1) * c]) {
            agree += 1;
        }
    }
    Ok(agree as f64 / n as f64)
}

fn put_op(w: &mut Writer, op: &LayerOp) {
    match *op {
        LayerOp::Conv2d { in_ch, out_ch, k, geom } => {
            w.u8(0);
            w.usize(in_ch);
            w.usize(out_ch);
            w.usize(k);
            w.usize(geom.stride);
            w.usize(geom.pad);
        }
        LayerOp::Linear { in_f, out_f } => {
            w.u8(1);
            w.usize(in_f);
            w.usize(out_f);
        }
    }
}

fn get_op(r: &mut Reader) -> Result<LayerOp, InferError> {
    Ok(match r.u8()? {
        0 => LayerOp::Conv2d {
            in_ch: r.usize()?,
            out_ch: r.usize()?,
            k: r.usize()?,
            geom: ConvGeom { stride: r.usize()?, pad: r.usize()? },
        },
        1 => LayerOp::Linear { in_f: r.usize()?, out_f: r.usize()? },
        v => return Err(InferError::Malformed(format!("unknown layer op {v}"))),
    })
}

fn weight_shape(op: &LayerOp) -> Vec<usize> {
    match *op {
        LayerOp::Conv2d { in_ch, out_ch, k, .. } => vec![out_ch, in_ch, k, k],
        LayerOp::Linear { in_f, out_f } => vec![out_f, in_f],
    }
}

fn put_float_layer(w: &mut Writer, fl: &FloatLayer) {
    put_op(w, &fl.op);
    w.bool(fl.relu);
    w.f64_slice(fl.weights.data());
    w.bool(fl.bias.is_some());
    if let Some(b) = &fl.bias {
        w.f64_slice(b.data());
    }
    w.bool(fl.bn.is_some());
    if let Some(bn) = &fl.bn {
        w.f64_slice(&bn.gamma);
        w.f64_slice(&bn.beta);
        w.f64_slice(&bn.mean);
        w.f64_slice(&bn.var);
        w.f64(bn.eps);
    }
}

fn get_float_layer(r: &mut Reader) -> Result<FloatLayer, InferError> {
    let op = get_op(r)?;
    let relu = r.bool()?;
    let wshape = weight_shape(&op);
    let wdata = r.f64_vec()?;
    if wdata.len() != wshape.iter().product::<usize>() {
        return Err(InferError::Malformed(format!(
            "weight count {} does not fit {:?}",
            wdata.len(),
            wshape
        )));
    }
    let weights = Tensor::new(&wshape, wdata);
    let out_units = wshape[0];
    let bias = if r.bool()? {
        let b = r.f64_vec()?;
        if b.len() != out_units {
            return Err(InferError::Malformed("bias length mismatch".into()));
        }
        Some(Tensor::new(&[out_units], b))
    } else {
        None
    };
    let bn = if r.bool()? {
        let gamma = r.f64_vec()?;
        let beta = r.f64_vec()?;
        let mean = r.f64_vec()?;
        let var = r.f64_vec()?;
        let eps = r.f64()?;
        if gamma.len() != out_units || beta.len() != out_units || mean.len() != out_units || var.len() != out_units
        {
            return Err(InferError::Malformed("batchnorm length mismatch".into()));
        }
        Some(BnParams { gamma, beta, mean, var, eps })
    } else {
        None
    };
    Ok(FloatLayer { op, relu, weights, bias, bn })
}

pub fn to_bytes(im: &IntegerModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u32(VERSION);
    w.usize_slice(&im.input_shape);
    w.usize(im.classes);
    w.usize(im.head.len());
    for fl in &im.head {
        put_float_layer(&mut w, fl);
    }
    put_quantizer(&mut w, &im.entry);
    w.usize(im.mids.len());
    for il in &im.mids {
        put_op(&mut w, &il.op);
        match &il.codes {
            WeightCodes::Uniform(v) => {
                w.u8(0);
                w.usize(v.len());
                for &c in v {
                    w.i64(c as i64);
                }
            }
            WeightCodes::Log2(v) => {
                w.u8(1);
                w.usize(v.len());
                w.bytes(v);
            }
        }
        w.usize(il.requant.m.len());
        for &m in &il.requant.m {
            w.i64(m);
        }
        w.usize(il.requant.shift.len());
        w.bytes(&il.requant.shift);
        w.usize(il.requant.bias.len());
        for &b in &il.requant.bias {
            w.i64(b);
        }
        w.i64(il.requant.out_levels);
        w.bool(il.acc64);
    }
    w.f64(im.tail_step);
    put_float_layer(&mut w, &im.tail);
    w.into_bytes()
}

pub fn from_bytes(buf: &[u8]) -> Result<IntegerModel, InferError> {
    let mut r = Reader::new(buf);
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(InferError::Magic(magic.try_into().unwrap()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(InferError::Version(version));
    }
    let input_shape = r.usize_vec()?;
    let classes = r.usize()?;
    let n_head = r.usize()?;
    let mut head = Vec::with_capacity(n_head);
    for _ in 0..n_head {
        head.push(get_float_layer(&mut r)?);
    }
    let entry = get_quantizer(&mut r)?;
    let n_mids = r.usize()?;
    let mut mids = Vec::with_capacity(n_mids);
    for _ in 0..n_mids {
        let op = get_op(&mut r)?;
        let n_weights = weight_shape(&op).iter().product::<usize>();
        let codes = match r.u8()? {
            0 => {
                let n = r.usize()?;
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    let c = r.i64()?;
                    let c32 = i32::try_from(c)
                        .map_err(|_| InferError::Malformed(format!("weight code {c} out of range")))?;
                    v.push(c32);
                }
                WeightCodes::Uniform(v)
            }
            1 => {
                let n = r.usize()?;
                WeightCodes::Log2(r.bytes(n)?.to_vec())
            }
            v => return Err(InferError::Malformed(format!("unknown code tag {v}"))),
        };
        if codes_len(&codes) != n_weights {
            return Err(InferError::Malformed(format!(
                "layer has {} codes, op needs {}",
                codes_len(&codes),
                n_weights
            )));
        }
        let n = r.usize()?;
        let m = (0..n).map(|_| r.i64()).collect::<Result<Vec<_>, _>>()?;
        let n = r.usize()?;
        let shift = r.bytes(n)?.to_vec();
        let n = r.usize()?;
        let bias = (0..n).map(|_| r.i64()).collect::<Result<Vec<_>, _>>()?;
        let out_levels = r.i64()?;
        let acc64 = r.bool()?;
        let out_units = weight_shape(&op)[0];
        if m.len() != out_units || shift.len() != out_units || bias.len() != out_units {
            return Err(InferError::Malformed("requant channel count mismatch".into()));
        }
        if shift.iter().any(|&s| s == 0 || s > 62) {
            return Err(InferError::Malformed("requant shift out of range".into()));
        }
        mids.push(IntQuantLayer { op, codes, requant: Requant { m, shift, bias, out_levels }, acc64 });
    }
    let tail_step = r.f64()?;
    let tail = get_float_layer(&mut r)?;
    r.finish()?;
    Ok(IntegerModel { input_shape, classes, head, entry, mids, tail_step, tail })
}

pub fn save(path: &Path, im: &IntegerModel) -> Result<(), InferError> {
    std::fs::write(path, to_bytes(im))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<IntegerModel, InferError> {
    from_bytes(&std::fs::read(path)?)
}
