//! Quantized execution of the toy transformer: every linear layer inside a
//! block runs through smoothing, activation fake-quantization against its
//! frozen calibration grid, and weight fake-quantization with learnable
//! clipping. The final norm and unembedding stay in full precision, and the
//! underlying checkpoint weights are never overwritten.

use crate::corpus::Tokenizer;
use crate::error::Result;
use crate::model::{block_forward, BlockWeights, LayerModel, LinearSlot, ModelCheckpoint};
use crate::quant::{
    clip_levels, fake_quant_activation, fake_quant_weight, smooth_transform, ActivationGrid,
    QuantConfig, QuantParams,
};
use crate::tape::{Bcast, QuantMode, Tape, Var};
use crate::tensor::Tensor;

/// Learnable quantization state plus the frozen activation range for one
/// linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQuant {
    pub params: QuantParams,
    pub act_range: (f64, f64),
}

/// Quantizer state for the six linears of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockQuant {
    pub linears: Vec<LinearQuant>,
}

/// A checkpoint paired with per-block quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: ModelCheckpoint,
    pub cfg: QuantConfig,
    pub blocks: Vec<BlockQuant>,
}

/// Fake-quantized linear layer in plain tensor math.
pub fn quant_linear(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    lq: &LinearQuant,
    cfg: &QuantConfig,
) -> Result<Tensor> {
    let (xb, wb, bb) = smooth_transform(x, w, b, &lq.params.s, &lq.params.shift)?;
    let xq = fake_quant_activation(&xb, cfg, lq.act_range);
    let wq = fake_quant_weight(&wb, &lq.params, cfg)?;
    let mut y = xq.matmul(&wq)?;
    let n = y.cols();
    for i in 0..y.rows() {
        for j in 0..n {
            y.data_mut()[i * n + j] += bb.data()[j];
        }
    }
    Ok(y)
}

/// One quantized block in plain tensor math.
pub fn quant_block_forward(
    x: &Tensor,
    blk: &BlockWeights,
    bq: &BlockQuant,
    n_heads: usize,
    cfg: &QuantConfig,
) -> Result<Tensor> {
    let mut lin = |input: &Tensor, slot: LinearSlot| -> Result<Tensor> {
        let (w, b) = blk.linear(slot);
        quant_linear(input, w, b, &bq.linears[slot.index()], cfg)
    };
    block_forward(x, blk, n_heads, &mut lin)
}

impl LayerModel for QuantizedModel {
    fn n_layers(&self) -> usize {
        self.model.config.n_layers
    }

    fn max_seq_len(&self) -> usize {
        self.model.config.max_seq_len
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.model.tokenizer
    }

    fn block_outputs(&self, tokens: &[u32]) -> Result<Vec<Tensor>> {
        let mut x = self.model.embed(tokens)?;
        let mut outs = Vec::with_capacity(self.model.blocks.len());
        for (blk, bq) in self.model.blocks.iter().zip(&self.blocks) {
            x = quant_block_forward(&x, blk, bq, self.model.config.n_heads, &self.cfg)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    fn unembed_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.model.unembed_row(row)
    }
}

/// Tape handles for one linear layer's learnable quantization parameters.
pub struct LinearQuantVars {
    pub w: Var,
    pub b: Var,
    pub zero: Var,
    pub s: Var,
    pub shift: Var,
    pub step: Var,
    pub alpha_pre: Var,
    pub beta_pre: Var,
    pub grid: ActivationGrid,
    pub per_channel: Bcast,
}

/// Register one linear's quantization learnables on a tape. Parameter names
/// are `{prefix}.s`, `{prefix}.shift`, `{prefix}.step`, `{prefix}.alpha_pre`,
/// `{prefix}.beta_pre`.
pub fn register_linear_quant(
    tape: &mut Tape,
    prefix: &str,
    w: &Tensor,
    b: &Tensor,
    lq: &LinearQuant,
    cfg: &QuantConfig,
) -> Result<LinearQuantVars> {
    let w = tape.leaf(w.clone());
    let b = tape.leaf(b.clone());
    let zero = tape.leaf(lq.params.zero.clone());
    let s = tape.param(&format!("{prefix}.s"), lq.params.s.clone())?;
    let shift = tape.param(&format!("{prefix}.shift"), lq.params.shift.clone())?;
    let step = tape.param(&format!("{prefix}.step"), lq.params.step.clone())?;
    let alpha_pre =
        tape.param(&format!("{prefix}.alpha_pre"), Tensor::scalar(lq.params.alpha_pre))?;
    let beta_pre =
        tape.param(&format!("{prefix}.beta_pre"), Tensor::scalar(lq.params.beta_pre))?;
    let per_channel = if lq.params.step.len() == 1 { Bcast::Scalar } else { Bcast::Row };
    Ok(LinearQuantVars {
        w,
        b,
        zero,
        s,
        shift,
        step,
        alpha_pre,
        beta_pre,
        grid: ActivationGrid::from_range(cfg, lq.act_range),
        per_channel,
    })
}

/// Fake-quantized linear layer on the tape. In `Exact` mode the integer clip
/// range is validated first so an empty range surfaces as a parameter error
/// instead of a silent inversion.
pub fn quant_linear_graph(
    tape: &mut Tape,
    x: Var,
    v: &LinearQuantVars,
    cfg: &QuantConfig,
) -> Result<Var> {
    // Smoothing: (x - shift) / s against s * W with the bias compensation.
    let xs = tape.sub_bc(x, v.shift, Bcast::Row)?;
    let xbar = tape.div_bc(xs, v.s, Bcast::Row)?;
    let wbar = tape.mul_bc(v.w, v.s, Bcast::Col)?;
    let shift_w = tape.matmul(v.shift, v.w)?;
    let bbar = tape.add_bc(shift_w, v.b, Bcast::Row)?;

    let xq = if cfg.activations_enabled() {
        let lv = tape.affine(xbar, 1.0 / v.grid.step, 0.0);
        let lv = tape.round(lv);
        let lv = tape.affine(lv, 1.0, v.grid.zero);
        let lo = tape.scalar(0.0);
        let hi = tape.scalar(v.grid.q_p);
        let lv = tape.clamp(lv, lo, hi, Bcast::Scalar)?;
        tape.affine(lv, v.grid.step, -v.grid.zero * v.grid.step)
    } else {
        xbar
    };

    let wq = if cfg.weights_enabled() {
        let qp = cfg.weight_q_p();
        if tape.mode() == QuantMode::Exact {
            let (alpha, beta) = crate::quant::alpha_beta(
                tape.value(v.alpha_pre).item(),
                tape.value(v.beta_pre).item(),
            );
            clip_levels(alpha, beta, qp)?;
        }
        let alpha = tape.sigmoid(v.alpha_pre);
        let one_minus = tape.affine(alpha, -1.0, 1.0);
        let beta_sig = tape.sigmoid(v.beta_pre);
        let beta_inc = tape.mul(one_minus, beta_sig)?;
        let beta = tape.add(alpha, beta_inc)?;
        let lo_cont = tape.scale(alpha, qp);
        let hi_cont = tape.scale(beta, qp);
        let lo = tape.ceil_ste(lo_cont);
        let hi = tape.floor_ste(hi_cont);

        let wd = tape.div_bc(wbar, v.step, v.per_channel)?;
        let wr = tape.round(wd);
        let lv = tape.add_bc(wr, v.zero, v.per_channel)?;
        let lv = tape.clamp(lv, lo, hi, Bcast::Scalar)?;
        let ls = tape.sub_bc(lv, v.zero, v.per_channel)?;
        tape.mul_bc(ls, v.step, v.per_channel)?
    } else {
        wbar
    };

    let y = tape.matmul(xq, wq)?;
    tape.add_bc(y, bbar, Bcast::Row)
}

/// Initial quantization state for every block of a model: min-max grids for
/// weights and frozen activation ranges recorded per linear input.
pub fn init_block_quant(
    blk: &BlockWeights,
    act_ranges: &[(f64, f64); 6],
    cfg: &QuantConfig,
) -> Result<BlockQuant> {
    let mut linears = Vec::with_capacity(6);
    for slot in crate::model::LINEAR_SLOTS {
        let (w, _) = blk.linear(slot);
        linears.push(LinearQuant {
            params: crate::quant::init_quant_params(w, cfg)?,
            act_range: act_ranges[slot.index()],
        });
    }
    Ok(BlockQuant { linears })
}

/// Run one block in full precision while recording the min/max of every
/// linear layer's input; used by the range pre-pass.
pub fn record_linear_ranges(
    x: &Tensor,
    blk: &BlockWeights,
    n_heads: usize,
    ranges: &mut [(f64, f64); 6],
) -> Result<Tensor> {
    let mut lin = |input: &Tensor, slot: LinearSlot| -> Result<Tensor> {
        let r = &mut ranges[slot.index()];
        for &v in input.data() {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
        let (w, b) = blk.linear(slot);
        let mut y = input.matmul(w)?;
        let n = y.cols();
        for i in 0..y.rows() {
            for j in 0..n {
                y.data_mut()[i * n + j] += b.data()[j];
            }
        }
        Ok(y)
    };
    block_forward(x, blk, n_heads, &mut lin)
}

/// Apply a named gradient update to the right field of a [`BlockQuant`].
///
/// The positive parameters (`s`, `step`) descend in log space: the update is
/// `v <- v * exp(-lr * v * g)`, i.e. plain gradient descent on `log v` by
/// the chain rule. That keeps them strictly positive and makes the learning
/// rate dimensionless, which matters because `step` is orders of magnitude
/// smaller than the clipping learning rate. Unconstrained parameters
/// (`shift`, the clip pre-activations) descend additively.
pub fn apply_quant_gradient(
    bq: &mut BlockQuant,
    slot_index: usize,
    field: &str,
    grad: &Tensor,
    lr: f64,
) {
    // Per-step change in log space capped at one e-fold.
    const MAX_LOG_STEP: f64 = 1.0;
    let log_step = |v: &mut f64, g: f64| {
        let exponent = (-lr * *v * g).clamp(-MAX_LOG_STEP, MAX_LOG_STEP);
        *v = (*v * exponent.exp()).max(f64::MIN_POSITIVE);
    };
    let p = &mut bq.linears[slot_index].params;
    match field {
        "s" => {
            for (v, g) in p.s.data_mut().iter_mut().zip(grad.data()) {
                log_step(v, *g);
            }
        }
        "shift" => {
            for (v, g) in p.shift.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * g;
            }
        }
        "step" => {
            for (v, g) in p.step.data_mut().iter_mut().zip(grad.data()) {
                log_step(v, *g);
            }
        }
        "alpha_pre" => p.alpha_pre -= lr * grad.item(),
        "beta_pre" => p.beta_pre -= lr * grad.item(),
        other => unreachable!("unknown quant field {other}"),
    }
}
