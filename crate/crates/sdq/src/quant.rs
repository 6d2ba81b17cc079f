//! Uniform quantizer with a σ-scaled clipping threshold.
//!
//! The clip threshold is `alpha * sigma`: `sigma` comes from the stats module
//! and `alpha` is a learnable scalar trained through the straight-through
//! estimator. Values are clipped, scaled onto `[-L_N, L_P]`, rounded to the
//! nearest integer level (ties away from zero), and scaled back. Everything
//! inside `|x| < step/2` rounds to level 0, which is what prunes small
//! weights.

use thiserror::Error;

use crate::stats::SIGMA_FLOOR;
use crate::tensor::Tensor;

/// Default initial threshold scale; 3σ covers nearly all of a centered
/// distribution, so training starts with almost nothing clipped.
pub const ALPHA_INIT: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("bit width {0} out of supported range {1:?}")]
    InvalidBits(u8, std::ops::RangeInclusive<u8>),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Uniform,
    Log2,
}

/// Integer level bounds of the uniform quantizer: `(L_N, L_P)`.
pub fn levels(bits: u8, signed: bool) -> Result<(i64, i64), QuantError> {
    if !(2..=16).contains(&bits) {
        return Err(QuantError::InvalidBits(bits, 2..=16));
    }
    Ok(if signed {
        let l = (1i64 << (bits - 1)) - 1;
        (l, l)
    } else {
        (0, (1i64 << bits) - 1)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerState {
    /// Learnable threshold scale, > 0.
    pub alpha: f64,
    /// Current σ estimate for the tensor being quantized.
    pub sigma: f64,
    pub bits: u8,
    pub signed: bool,
    pub mode: QuantMode,
    /// Gradient scale `s` applied to the summed α-gradient. Zero freezes α
    /// for the stage while still training everything else.
    pub grad_scale: f64,
    /// Weight decay applied directly to α inside the α-gradient.
    pub weight_decay: f64,
    /// Set during retraining phases that pin α and σ.
    pub frozen: bool,
    /// Pass upstream gradients through the clipped region instead of zeroing
    /// them (only meaningful for signed/weight quantizers).
    pub grad_passthrough: bool,
}

impl QuantizerState {
    pub fn signed(bits: u8, mode: QuantMode) -> Result<QuantizerState, QuantError> {
        match mode {
            QuantMode::Uniform => levels(bits, true).map(|_| ())?,
            QuantMode::Log2 => crate::quant_log2::log_levels(bits).map(|_| ())?,
        }
        Ok(QuantizerState {
            alpha: ALPHA_INIT,
            sigma: 0.0,
            bits,
            signed: true,
            mode,
            grad_scale: 1.0,
            weight_decay: 0.0,
            frozen: false,
            grad_passthrough: false,
        })
    }

    pub fn unsigned(bits: u8) -> Result<QuantizerState, QuantError> {
        levels(bits, false)?;
        Ok(QuantizerState {
            alpha: ALPHA_INIT,
            sigma: 0.0,
            bits,
            signed: false,
            mode: QuantMode::Uniform,
            grad_scale: 1.0,
            weight_decay: 0.0,
            frozen: false,
            grad_passthrough: false,
        })
    }

    pub fn levels(&self) -> (i64, i64) {
        levels(self.bits, self.signed).expect("state constructed with valid bits")
    }

    /// Largest representable magnitude on the integer grid (`L_P` for
    /// uniform, `L_p2` for log2).
    pub fn max_level(&self) -> i64 {
        match self.mode {
            QuantMode::Uniform => self.levels().1,
            QuantMode::Log2 => {
                crate::quant_log2::log_levels(self.bits).expect("state constructed with valid bits")
            }
        }
    }

    /// Clipping threshold `alpha * sigma`, with σ floored so a dead tensor
    /// cannot collapse the quantizer.
    pub fn threshold(&self) -> f64 {
        self.alpha * self.sigma.max(SIGMA_FLOOR)
    }

    /// Grid spacing used by both quantizer families.
    pub fn step(&self) -> f64 {
        self.threshold() / self.max_level() as f64
    }

    /// Half the grid spacing: the clipped magnitude below which a value
    /// quantizes to zero. Computed from the raw (unfloored) σ so a
    /// degenerate threshold reports 0. For log2 mode the pruning boundary
    /// sits at `2^(-1/2)` of the unit level instead of one half.
    pub fn pruning_threshold(&self) -> f64 {
        let l = self.max_level() as f64;
        match self.mode {
            QuantMode::Uniform => self.alpha * self.sigma / (2.0 * l),
            QuantMode::Log2 => self.alpha * self.sigma * std::f64::consts::FRAC_1_SQRT_2 / l,
        }
    }
}

#[inline]
pub(crate) fn clip_signed_scalar(x: f64, thr: f64) -> f64 {
    if x.abs() < thr {
        x
    } else if x < 0.0 {
        -thr
    } else {
        thr
    }
}

#[inline]
pub(crate) fn clip_unsigned_scalar(x: f64, thr: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < thr {
        x
    } else {
        thr
    }
}

/// Elementwise `x if |x| < ασ else sign(x)·ασ`.
pub fn clip_signed(x: &Tensor, st: &QuantizerState) -> Tensor {
    let thr = st.threshold();
    x.map(|v| clip_signed_scalar(v, thr))
}

/// Elementwise `0 if x ≤ 0; x if 0 < x < ασ; ασ otherwise`.
pub fn clip_unsigned(x: &Tensor, st: &QuantizerState) -> Tensor {
    let thr = st.threshold();
    x.map(|v| clip_unsigned_scalar(v, thr))
}

#[derive(Clone, Debug)]
pub struct QuantOutput {
    /// On-grid real values, `y_d * step` elementwise.
    pub y_q: Tensor,
    /// Integer levels in `[-L_N, L_P]`.
    pub y_d: Vec<i32>,
    /// Grid spacing `ασ / L_P`.
    pub step: f64,
}

#[inline]
pub(crate) fn uniform_quantize_scalar(
    x: f64,
    thr: f64,
    step: f64,
    l_n: i64,
    l_p: i64,
    signed: bool,
) -> (i32, f64) {
    let y = if signed { clip_signed_scalar(x, thr) } else { clip_unsigned_scalar(x, thr) };
    let d = (y / step).round();
    let d = d.clamp(-(l_n as f64), l_p as f64) as i32;
    (d, d as f64 * step)
}

/// Clip, scale, round to the integer grid, scale back.
pub fn quantize_forward(x: &Tensor, st: &QuantizerState) -> QuantOutput {
    debug_assert_eq!(st.mode, QuantMode::Uniform);
    let (l_n, l_p) = st.levels();
    let thr = st.threshold();
    let step = st.step();
    let mut y_d = Vec::with_capacity(x.numel());
    let mut y_q = Vec::with_capacity(x.numel());
    for &v in x.data() {
        let (d, q) = uniform_quantize_scalar(v, thr, step, l_n, l_p, st.signed);
        y_d.push(d);
        y_q.push(q);
    }
    QuantOutput { y_q: Tensor::new(x.shape(), y_q), y_d, step }
}

/// Fraction of entries pruned to level zero.
pub fn pruning_ratio(y_d: &[i32]) -> f64 {
    if y_d.is_empty() {
        return 0.0;
    }
    y_d.iter().filter(|&&d| d == 0).count() as f64 / y_d.len() as f64
}

/// Straight-through gradients of the quantizer.
///
/// The rounding stage passes gradients through unchanged; what remains is
/// the clip function. Inputs inside the clip interval route `g_y` to `g_x`;
/// clipped inputs route `±σ·g_y` into the threshold-scale gradient instead.
/// The returned `g_alpha` is `s · Σ(per-element contributions) + λ·α`, with
/// the decay term added once per call.
pub fn quantize_backward(
    x: &Tensor,
    g_y: &Tensor,
    st: &QuantizerState,
) -> Result<(Tensor, f64), QuantError> {
    if x.shape() != g_y.shape() {
        return Err(QuantError::ShapeMismatch(x.shape().to_vec(), g_y.shape().to_vec()));
    }
    let thr = st.threshold();
    let sigma = st.sigma.max(SIGMA_FLOOR);
    let mut g_x = Vec::with_capacity(x.numel());
    let mut base = 0.0;
    if st.signed {
        for (&xv, &gv) in x.data().iter().zip(g_y.data()) {
            if xv.abs() < thr {
                g_x.push(gv);
            } else {
                g_x.push(if st.grad_passthrough { gv } else { 0.0 });
                base += if xv < 0.0 { -sigma * gv } else { sigma * gv };
            }
        }
    } else {
        for (&xv, &gv) in x.data().iter().zip(g_y.data()) {
            if xv >= thr {
                g_x.push(0.0);
                base += sigma * gv;
            } else if xv > 0.0 {
                g_x.push(gv);
            } else {
                g_x.push(0.0);
            }
        }
    }
    let g_alpha = st.grad_scale * base + st.weight_decay * st.alpha;
    Ok((Tensor::new(x.shape(), g_x), g_alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn state(bits: u8, signed: bool, alpha: f64, sigma: f64) -> QuantizerState {
        let mut st = if signed {
            QuantizerState::signed(bits, QuantMode::Uniform).unwrap()
        } else {
            QuantizerState::unsigned(bits).unwrap()
        };
        st.alpha = alpha;
        st.sigma = sigma;
        st
    }

    #[test]
    fn level_table() {
        assert_eq!(levels(3, true).unwrap(), (3, 3));
        assert_eq!(levels(2, true).unwrap(), (1, 1));
        assert_eq!(levels(3, false).unwrap(), (0, 7));
        assert_eq!(levels(5, true).unwrap(), (15, 15));
        assert!(levels(1, true).is_err());
        assert!(levels(17, false).is_err());
    }

    #[test]
    fn clip_examples() {
        let st = state(3, true, 2.0, 0.5); // threshold 1.0
        let x = Tensor::new(&[2], vec![0.4, -3.0]);
        assert_eq!(clip_signed(&x, &st).data(), &[0.4, -1.0]);

        let narrow = state(3, true, 2.0, 0.25); // threshold 0.5
        assert_eq!(clip_signed(&x, &narrow).data(), &[0.4, -0.5]);

        let stu = state(3, false, 2.0, 0.5);
        let x = Tensor::new(&[3], vec![-1.0, 0.3, 5.0]);
        assert_eq!(clip_unsigned(&x, &stu).data(), &[0.0, 0.3, 1.0]);
    }

    #[test]
    fn forward_examples() {
        let st = state(3, true, 2.0, 0.5); // ασ = 1, L_P = 3, step = 1/3
        let out = quantize_forward(&Tensor::new(&[3], vec![0.4, 0.0, 0.15]), &st);
        assert_eq!(out.y_d, vec![1, 0, 0]);
        assert_abs_diff_eq!(out.y_q.data()[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(out.y_q.data()[1], 0.0);
        assert_eq!(out.y_q.data()[2], 0.0);
        assert_abs_diff_eq!(out.step, 1.0 / 3.0, epsilon = 1e-16);
    }

    #[test]
    fn pruning_threshold_examples() {
        let st = state(3, true, 2.0, 0.5);
        assert_abs_diff_eq!(st.pruning_threshold(), 1.0 / 6.0, epsilon = 1e-16);
        let st2 = state(2, true, 2.0, 0.5); // L_P = 1
        assert_abs_diff_eq!(st2.pruning_threshold(), 0.5, epsilon = 1e-16);
        // 2-bit pruning area is 3x the 3-bit area at the same threshold.
        assert_abs_diff_eq!(st2.pruning_threshold() / st.pruning_threshold(), 3.0, epsilon = 1e-12);
        let degenerate = state(3, true, 2.0, 0.0);
        assert_eq!(degenerate.pruning_threshold(), 0.0);
    }

    #[test]
    fn pruning_ratio_counts_zeros() {
        assert_eq!(pruning_ratio(&[0, 0, 0]), 1.0);
        assert_eq!(pruning_ratio(&[1, -1, 2]), 0.0);
        assert_eq!(pruning_ratio(&[0, 1, 0, -2]), 0.5);
        assert_eq!(pruning_ratio(&[]), 0.0);
    }

    #[test]
    fn backward_examples() {
        // Interior point passes the gradient, contributes nothing to alpha.
        let mut st = state(3, false, 2.0, 0.5);
        st.grad_scale = 1.0;
        st.weight_decay = 0.0;
        let (gx, ga) = quantize_backward(
            &Tensor::new(&[1], vec![0.5]),
            &Tensor::new(&[1], vec![1.0]),
            &st,
        )
        .unwrap();
        assert_eq!(gx.data(), &[1.0]);
        assert_eq!(ga, 0.0);

        // Clipped point: gradient rerouted to alpha with weight sigma.
        let (gx, ga) = quantize_backward(
            &Tensor::new(&[1], vec![2.0]),
            &Tensor::new(&[1], vec![1.0]),
            &st,
        )
        .unwrap();
        assert_eq!(gx.data(), &[0.0]);
        assert_abs_diff_eq!(ga, 0.5, epsilon = 0.0);

        // Zero upstream gradient, no decay: zero alpha gradient.
        let (_, ga) =
            quantize_backward(&Tensor::new(&[1], vec![2.0]), &Tensor::zeros(&[1]), &st).unwrap();
        assert_eq!(ga, 0.0);

        let err = quantize_backward(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), &st);
        assert!(matches!(err, Err(QuantError::ShapeMismatch(_, _))));
    }

    #[test]
    fn backward_signed_uses_sign_of_clipped_input() {
        let mut st = state(3, true, 2.0, 0.5);
        st.grad_scale = 1.0;
        let x = Tensor::new(&[2], vec![2.0, -2.0]);
        let g = Tensor::new(&[2], vec![1.0, 1.0]);
        let (gx, ga) = quantize_backward(&x, &g, &st).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0]);
        // +σ from the positive side, -σ from the negative side.
        assert_abs_diff_eq!(ga, 0.0, epsilon = 0.0);
        let gpos = Tensor::new(&[2], vec![1.0, 0.0]);
        let (_, ga) = quantize_backward(&x, &gpos, &st).unwrap();
        assert_abs_diff_eq!(ga, 0.5, epsilon = 0.0);
        let gneg = Tensor::new(&[2], vec![0.0, 1.0]);
        let (_, ga) = quantize_backward(&x, &gneg, &st).unwrap();
        assert_abs_diff_eq!(ga, -0.5, epsilon = 0.0);
    }

    #[test]
    fn grad_passthrough_switch() {
        let mut st = state(3, true, 2.0, 0.5);
        st.grad_passthrough = true;
        let (gx, ga) = quantize_backward(
            &Tensor::new(&[1], vec![5.0]),
            &Tensor::new(&[1], vec![2.0]),
            &st,
        )
        .unwrap();
        assert_eq!(gx.data(), &[2.0]);
        assert_abs_diff_eq!(ga, 1.0, epsilon = 0.0); // alpha grad unaffected
    }

    #[test]
    fn alpha_grad_decomposition_is_exact() {
        let mut st = state(4, true, 1.5, 0.8);
        let x = Tensor::new(&[4], vec![2.0, -3.0, 0.1, 1.4]);
        let g = Tensor::new(&[4], vec![0.3, -0.2, 0.7, 0.5]);
        st.grad_scale = 1.0;
        st.weight_decay = 0.0;
        let (_, base) = quantize_backward(&x, &g, &st).unwrap();
        for &(s, lam) in &[(0.1, 0.0), (1.0, 5e-4), (0.01, 1e-2), (0.0, 1e-3)] {
            st.grad_scale = s;
            st.weight_decay = lam;
            let (_, ga) = quantize_backward(&x, &g, &st).unwrap();
            assert_eq!(ga, s * base + lam * st.alpha);
        }
    }

    #[test]
    fn sigma_floor_guards_division() {
        let st = state(3, false, 3.0, 0.0);
        let out = quantize_forward(&Tensor::new(&[1], vec![0.5]), &st);
        assert!(out.step > 0.0);
        assert_eq!(out.y_d, vec![7]); // everything beyond the tiny threshold saturates
    }

    proptest! {
        #[test]
        fn grid_membership_and_idempotence(
            bits in 2u8..=6,
            signed in proptest::bool::ANY,
            alpha in 0.5f64..4.0,
            sigma in 0.05f64..2.0,
            xs in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let st = state(bits, signed, alpha, sigma);
            let (l_n, l_p) = st.levels();
            let x = Tensor::new(&[xs.len()], xs);
            let out = quantize_forward(&x, &st);
            for (i, &d) in out.y_d.iter().enumerate() {
                prop_assert!((-(l_n as i64) <= d as i64) && (d as i64) <= l_p);
                prop_assert_eq!(out.y_q.data()[i], d as f64 * out.step);
            }
            let again = quantize_forward(&out.y_q, &st);
            prop_assert_eq!(again.y_d, out.y_d.clone());
            prop_assert_eq!(again.y_q.data(), out.y_q.data());
        }

        #[test]
        fn signed_symmetry(
            bits in 2u8..=6,
            alpha in 0.5f64..4.0,
            sigma in 0.05f64..2.0,
            xs in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let st = state(bits, true, alpha, sigma);
            let x = Tensor::new(&[xs.len()], xs);
            let neg = x.map(|v| -v);
            let a = quantize_forward(&x, &st);
            let b = quantize_forward(&neg, &st);
            for i in 0..a.y_d.len() {
                prop_assert_eq!(a.y_d[i], -b.y_d[i]);
                prop_assert_eq!(a.y_q.data()[i], -b.y_q.data()[i]);
            }
        }

        #[test]
        fn monotone_in_x(
            bits in 2u8..=6,
            signed in proptest::bool::ANY,
            alpha in 0.5f64..4.0,
            sigma in 0.05f64..2.0,
            mut xs in proptest::collection::vec(-5.0f64..5.0, 2..40),
        ) {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let st = state(bits, signed, alpha, sigma);
            let out = quantize_forward(&Tensor::new(&[xs.len()], xs), &st);
            for w in out.y_q.data().windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }

        #[test]
        fn pruning_iff_below_half_step(
            bits in 2u8..=6,
            signed in proptest::bool::ANY,
            alpha in 0.5f64..4.0,
            sigma in 0.05f64..2.0,
            xs in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let st = state(bits, signed, alpha, sigma);
            let thr = st.threshold();
            let x = Tensor::new(&[xs.len()], xs);
            let out = quantize_forward(&x, &st);
            for (i, &v) in x.data().iter().enumerate() {
                let clipped = if signed {
                    clip_signed_scalar(v, thr)
                } else {
                    clip_unsigned_scalar(v, thr)
                };
                prop_assert_eq!(out.y_d[i] == 0, clipped.abs() < st.pruning_threshold());
            }
        }
    }
}
