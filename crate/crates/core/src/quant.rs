//! Asymmetric uniform fake quantization with learnable channel-wise
//! smoothing and learnable clipping.
//!
//! The smoothing transform rewrites a linear layer `Y = XW + B` as
//! `Y = [(X - shift) / s] [s * W] + [B + shift W]`, which leaves the output
//! unchanged in exact arithmetic while reshaping the operand distributions
//! that the quantizers see. Weight quantization clamps integer levels to
//! `[ceil(alpha*Q_P), floor(beta*Q_P)]` where `alpha < beta` are squashed
//! from unconstrained pre-activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::sigmoid;
use crate::tensor::{round_half_away, Tensor};

/// Step-size floor used when a tensor has zero dynamic range.
pub const DEGENERATE_STEP: f64 = 1e-8;

/// Pre-activation value whose sigmoid is close enough to 0/1 to leave the
/// initial clip range effectively open while keeping a usable gradient
/// (sigmoid'(4) is about 0.018; at larger magnitudes the clipping
/// coefficients never move).
pub const CLIP_PRE_INIT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Weight bit-width; 16 disables weight quantization.
    pub weight_bits: u8,
    /// Activation bit-width; 16 disables activation quantization.
    pub activation_bits: u8,
    /// Per-output-channel step/zero-point for weights (per-tensor otherwise).
    pub per_channel_weights: bool,
}

impl QuantConfig {
    pub fn new(weight_bits: u8, activation_bits: u8) -> Result<Self> {
        let cfg = Self { weight_bits, activation_bits, per_channel_weights: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (label, bits) in [("weight", self.weight_bits), ("activation", self.activation_bits)]
        {
            if !(2..=16).contains(&bits) {
                return Err(Error::Param(format!("{label} bits {bits} outside 2..=16")));
            }
        }
        Ok(())
    }

    /// Parse `"W8A8"`-style tags.
    pub fn from_tag(tag: &str) -> Result<Self> {
        let upper = tag.to_ascii_uppercase();
        let rest = upper
            .strip_prefix('W')
            .ok_or_else(|| Error::Param(format!("bad bit-width tag `{tag}`")))?;
        let (w, a) = rest
            .split_once('A')
            .ok_or_else(|| Error::Param(format!("bad bit-width tag `{tag}`")))?;
        let weight_bits: u8 =
            w.parse().map_err(|_| Error::Param(format!("bad weight bits in `{tag}`")))?;
        let activation_bits: u8 =
            a.parse().map_err(|_| Error::Param(format!("bad activation bits in `{tag}`")))?;
        Self::new(weight_bits, activation_bits)
    }

    pub fn weight_q_p(&self) -> f64 {
        q_p(self.weight_bits)
    }

    pub fn activation_q_p(&self) -> f64 {
        q_p(self.activation_bits)
    }

    pub fn weights_enabled(&self) -> bool {
        self.weight_bits < 16
    }

    pub fn activations_enabled(&self) -> bool {
        self.activation_bits < 16
    }
}

/// Maximum positive quantization level `2^bits - 1`.
pub fn q_p(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64
}

/// Learnable quantization state for one linear layer.
///
/// `s`/`shift` are the channel-wise smoothing parameters over the input
/// dimension; `step`/`zero` are the quantizer grid (per output channel or
/// per tensor); `alpha_pre`/`beta_pre` squash onto the clipping coefficients.
/// The zero-point is frozen after initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub s: Tensor,
    pub shift: Tensor,
    pub step: Tensor,
    pub zero: Tensor,
    pub alpha_pre: f64,
    pub beta_pre: f64,
    pub degenerate: bool,
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if self.s.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Param("smoothing scale must be positive elementwise".into()));
        }
        if self.step.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Param("quantization step must be positive".into()));
        }
        Ok(())
    }

    /// Squashed clipping coefficients; `beta = alpha + (1-alpha)*sig(beta_pre)`
    /// keeps the ordering by construction.
    pub fn alpha_beta(&self) -> (f64, f64) {
        alpha_beta(self.alpha_pre, self.beta_pre)
    }
}

pub fn alpha_beta(alpha_pre: f64, beta_pre: f64) -> (f64, f64) {
    let alpha = sigmoid(alpha_pre);
    let beta = alpha + (1.0 - alpha) * sigmoid(beta_pre);
    (alpha, beta)
}

/// Integer level bounds `[ceil(alpha*qp), floor(beta*qp)]`.
pub fn clip_levels(alpha: f64, beta: f64, qp: f64) -> Result<(f64, f64)> {
    let lo = (alpha * qp).ceil();
    let hi = (beta * qp).floor();
    if lo > hi {
        return Err(Error::Param(format!(
            "empty clip range: ceil({alpha}*{qp})={lo} > floor({beta}*{qp})={hi}"
        )));
    }
    Ok((lo, hi))
}

/// The equivalent transformation `(X - shift) / s`, `s * W`, `B + shift W`.
///
/// `x` is `[T x d1]`, `w` is `[d1 x d2]`, `b` has length `d2`; `s` and
/// `shift` have length `d1`. The transformed triple computes the same linear
/// output in exact arithmetic.
pub fn smooth_transform(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    s: &Tensor,
    shift: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d1 = w.rows();
    let d2 = w.cols();
    if x.cols() != d1 || s.len() != d1 || shift.len() != d1 || b.len() != d2 {
        return Err(Error::Shape(format!(
            "smooth_transform: x {:?}, w {:?}, b {}, s {}, shift {}",
            x.shape(),
            w.shape(),
            b.len(),
            s.len(),
            shift.len()
        )));
    }
    if s.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Param("smoothing scale must be positive elementwise".into()));
    }
    let mut xbar = x.clone();
    for i in 0..x.rows() {
        for j in 0..d1 {
            let v = &mut xbar.data_mut()[i * d1 + j];
            *v = (*v - shift.data()[j]) / s.data()[j];
        }
    }
    let mut wbar = w.clone();
    for i in 0..d1 {
        for j in 0..d2 {
            wbar.data_mut()[i * d2 + j] *= s.data()[i];
        }
    }
    let shift_row = Tensor::new(vec![1, d1], shift.data().to_vec())?;
    let shift_w = shift_row.matmul(w)?;
    let mut bbar = b.clone();
    for j in 0..d2 {
        bbar.data_mut()[j] += shift_w.data()[j];
    }
    Ok((xbar, wbar, bbar))
}

/// Min-max initialization: `step = (max - min) / Q_P`, `zero =
/// round(-min/step)` clamped to `[0, Q_P]`; smoothing starts at identity and
/// the clip range effectively open. Constant tensors get the step floor and
/// the degenerate flag.
pub fn init_quant_params(w: &Tensor, cfg: &QuantConfig) -> Result<QuantParams> {
    if w.is_empty() {
        return Err(Error::Data("init_quant_params: empty tensor".into()));
    }
    let d1 = w.rows();
    let d2 = w.cols();
    let qp = cfg.weight_q_p();
    let channels = if cfg.per_channel_weights { d2 } else { 1 };
    let mut step = vec![0.0; channels];
    let mut zero = vec![0.0; channels];
    let mut degenerate = false;
    for c in 0..channels {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..d1 {
            for j in 0..d2 {
                if cfg.per_channel_weights && j != c {
                    continue;
                }
                lo = lo.min(w.at(i, j));
                hi = hi.max(w.at(i, j));
            }
        }
        let range = hi - lo;
        let st = if range > 0.0 {
            range / qp
        } else {
            degenerate = true;
            DEGENERATE_STEP
        };
        step[c] = st;
        zero[c] = round_half_away(-lo / st).clamp(0.0, qp);
    }
    Ok(QuantParams {
        s: Tensor::filled(vec![d1], 1.0),
        shift: Tensor::zeros(vec![d1]),
        step: Tensor::new(vec![channels], step)?,
        zero: Tensor::new(vec![channels], zero)?,
        alpha_pre: -CLIP_PRE_INIT,
        beta_pre: CLIP_PRE_INIT,
        degenerate,
    })
}

/// Fake-quantize a weight tensor: `level = clamp(round(W/step) + zero,
/// ceil(alpha*Q_P), floor(beta*Q_P))`, dequantized as `(level - zero) *
/// step`. A 16-bit config passes the tensor through unchanged.
pub fn fake_quant_weight(w: &Tensor, params: &QuantParams, cfg: &QuantConfig) -> Result<Tensor> {
    if !cfg.weights_enabled() {
        return Ok(w.clone());
    }
    params.validate()?;
    let qp = cfg.weight_q_p();
    let (alpha, beta) = params.alpha_beta();
    let (lo, hi) = clip_levels(alpha, beta, qp)?;
    let d2 = w.cols();
    let channels = params.step.len();
    if channels != 1 && channels != d2 {
        return Err(Error::Shape(format!(
            "fake_quant_weight: {channels} channels for {d2} output columns"
        )));
    }
    let mut out = w.clone();
    for i in 0..w.rows() {
        for j in 0..d2 {
            let c = if channels == 1 { 0 } else { j };
            let st = params.step.data()[c];
            let z = params.zero.data()[c];
            let mut level = round_half_away(w.at(i, j) / st) + z;
            if level < lo {
                level = lo;
            } else if level > hi {
                level = hi;
            }
            out.data_mut()[i * d2 + j] = (level - z) * st;
        }
    }
    Ok(out)
}

/// Per-tensor asymmetric quantize-dequantize over a frozen calibration
/// range; values outside the range saturate. 16-bit passes through.
pub fn fake_quant_activation(
    x: &Tensor,
    cfg: &QuantConfig,
    calib_range: (f64, f64),
) -> Tensor {
    if !cfg.activations_enabled() {
        return x.clone();
    }
    let grid = ActivationGrid::from_range(cfg, calib_range);
    grid.apply(x)
}

/// Frozen activation quantization grid derived from a calibration range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationGrid {
    pub step: f64,
    pub zero: f64,
    pub q_p: f64,
    pub degenerate: bool,
}

impl ActivationGrid {
    pub fn from_range(cfg: &QuantConfig, (min, max): (f64, f64)) -> Self {
        let qp = cfg.activation_q_p();
        let range = max - min;
        let (step, degenerate) =
            if range > 0.0 { (range / qp, false) } else { (DEGENERATE_STEP, true) };
        let zero = round_half_away(-min / step).clamp(0.0, qp);
        Self { step, zero, q_p: qp, degenerate }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.map(|v| {
            let mut level = round_half_away(v / self.step) + self.zero;
            if level < 0.0 {
                level = 0.0;
            } else if level > self.q_p {
                level = self.q_p;
            }
            (level - self.zero) * self.step
        })
    }
}
