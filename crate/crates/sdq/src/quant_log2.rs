//! Base-2 logarithmic weight quantizer.
//!
//! Clipped values are mapped to the nearest power of two on a log2 scale, so
//! every nonzero quantized weight is `±2^k · step`. Inference can then
//! replace multiplies with shifts. Magnitudes whose rounded exponent would be
//! negative are pruned to zero; together with level 0 a `b`-bit quantizer
//! carries `2^b - 1` values, matching the uniform quantizer's count.

use crate::quant::{clip_signed_scalar, quantize_backward, QuantError, QuantMode, QuantizerState};
use crate::tensor::Tensor;

/// Top power-of-two level `L_p2 = 2^(2^(b-1)-2)`.
pub fn log_levels(bits: u8) -> Result<i64, QuantError> {
    if !(2..=7).contains(&bits) {
        return Err(QuantError::InvalidBits(bits, 2..=7));
    }
    Ok(1i64 << ((1u32 << (bits - 1)) - 2))
}

#[derive(Clone, Debug)]
pub struct Log2Output {
    /// Entries in `{0} ∪ {±2^k : 0 ≤ k ≤ log2(L_p2)}`.
    pub y_p2: Vec<i64>,
    /// On-grid real values, `y_p2 * step` elementwise.
    pub y_q: Tensor,
    pub l_p2: i64,
}

/// Rounds on the log2 scale with ties toward the larger exponent.
#[inline]
fn round_exponent(r: f64) -> i64 {
    let t = r.log2();
    // A value already sitting exactly on a power of two keeps its exponent
    // regardless of how log2 rounds its last bit.
    let nearest = t.round();
    if (i32::MIN as f64..=i32::MAX as f64).contains(&nearest) && (nearest as i32 as f64) == nearest
    {
        let k = nearest as i32;
        if r == (k as f64).exp2() {
            return k as i64;
        }
    }
    (t + 0.5).floor() as i64
}

#[inline]
pub(crate) fn log2_quantize_scalar(x: f64, thr: f64, step: f64, l_p2: i64) -> (i64, f64) {
    let y = clip_signed_scalar(x, thr);
    if y == 0.0 {
        return (0, 0.0);
    }
    let k = round_exponent(y.abs() / step);
    if k < 0 {
        return (0, 0.0);
    }
    let mag = if k >= 63 { l_p2 } else { (1i64 << k).min(l_p2) };
    let p2 = if y < 0.0 { -mag } else { mag };
    (p2, p2 as f64 * step)
}

/// Clip to `±ασ`, then round `log2(|y| / step)` to an integer exponent.
pub fn quantize_log2_forward(x: &Tensor, st: &QuantizerState) -> Log2Output {
    assert!(st.signed, "log2 quantization is defined for signed tensors");
    debug_assert_eq!(st.mode, QuantMode::Log2);
    let l_p2 = st.max_level();
    let thr = st.threshold();
    let step = st.step();
    let mut y_p2 = Vec::with_capacity(x.numel());
    let mut y_q = Vec::with_capacity(x.numel());
    for &v in x.data() {
        let (p2, q) = log2_quantize_scalar(v, thr, step, l_p2);
        y_p2.push(p2);
        y_q.push(q);
    }
    Log2Output { y_p2, y_q: Tensor::new(x.shape(), y_q), l_p2 }
}

/// Same straight-through contract as the uniform signed backward: the grid
/// stage is transparent to gradients, only the clip boundaries matter.
pub fn log2_backward(
    x: &Tensor,
    g_y: &Tensor,
    st: &QuantizerState,
) -> Result<(Tensor, f64), QuantError> {
    assert!(st.signed, "log2 quantization is defined for signed tensors");
    quantize_backward(x, g_y, st)
}
