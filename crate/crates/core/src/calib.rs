//! Dual-objective block-wise calibration: reconstruct benign block outputs,
//! push malicious quantized activations across the probe boundary.
//!
//! Blocks are calibrated strictly in order; each block sees as input the
//! quantized outputs of its already-calibrated predecessors. The learnables
//! are the smoothing pair `{s, shift}` (one learning rate) and the clipping
//! bundle `{step, alpha_pre, beta_pre}` (another). The model weights are
//! never modified: fake quantization is applied on the fly.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{block_graph, LayerModel, LinearSlot, ModelCheckpoint, LINEAR_SLOTS};
use crate::probe::{slr_decision, ProbeParams};
use crate::qmodel::{
    apply_quant_gradient, init_block_quant, quant_block_forward, quant_linear_graph,
    record_linear_ranges, register_linear_quant, BlockQuant, QuantizedModel,
};
use crate::quant::QuantConfig;
use crate::rng::SeedRng;
use crate::tape::{QuantMode, Tape};
use crate::tensor::Tensor;

/// One row of a calibration loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub block: usize,
    pub epoch: usize,
    pub recon: f64,
    pub resep: f64,
    pub total: f64,
}

/// Calibration schedule and objective weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    /// Re-separation weight in the dual objective.
    pub lambda: f64,
    pub lr_smoothing: f64,
    pub lr_clipping: f64,
    pub epochs_first_half: usize,
    pub epochs_second_half: usize,
    pub n_malicious: usize,
    pub n_benign: usize,
    pub malicious_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub quant: QuantConfig,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr_smoothing: 1e-3,
            lr_clipping: 1e-2,
            epochs_first_half: 5,
            epochs_second_half: 15,
            n_malicious: 150,
            n_benign: 50,
            malicious_ratio: 0.75,
            batch_size: 10,
            seed: 7,
            quant: QuantConfig { weight_bits: 8, activation_bits: 8, per_channel_weights: true },
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Param(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.lr_smoothing <= 0.0 || self.lr_clipping <= 0.0 {
            return Err(Error::Param("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.malicious_ratio) {
            return Err(Error::Param(format!(
                "malicious_ratio {} outside [0, 1]",
                self.malicious_ratio
            )));
        }
        let total = self.n_malicious + self.n_benign;
        if total == 0 {
            return Err(Error::Param("calibration set is empty".into()));
        }
        let implied = self.n_malicious as f64 / total as f64;
        if (implied - self.malicious_ratio).abs() * total as f64 >= 1.0 {
            return Err(Error::Param(format!(
                "malicious_ratio {} inconsistent with counts {}/{}",
                self.malicious_ratio, self.n_malicious, self.n_benign
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be positive".into()));
        }
        self.quant.validate()
    }

    /// Derive the class counts from a total size and malicious ratio.
    pub fn with_ratio(mut self, total: usize, ratio: f64) -> Self {
        self.n_malicious = (ratio * total as f64).floor() as usize;
        self.n_benign = total - self.n_malicious;
        self.malicious_ratio = ratio;
        self
    }
}

/// Per-sample calibration data for the block currently being calibrated:
/// the full-precision input and target output, and the quantized input
/// propagated through the already-calibrated prefix.
#[derive(Debug, Clone)]
pub struct CalibSample {
    pub fp_input: Tensor,
    pub fp_output: Tensor,
    pub q_input: Tensor,
    pub label: u8,
}

/// Softplus re-separation loss `log(1 + exp(-(w'h + b)))`.
pub fn softplus_margin_loss(probe: &ProbeParams, h: &[f64]) -> Result<f64> {
    Ok(crate::tape::softplus_neg(slr_decision(probe, h)?))
}

/// The evaluated dual objective with its class components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub recon: f64,
    pub resep: f64,
    pub benign_count: usize,
    pub malicious_count: usize,
}

fn block_recon_error(fp_out: &Tensor, q_out: &Tensor) -> f64 {
    let t = fp_out.rows() as f64;
    fp_out
        .data()
        .iter()
        .zip(q_out.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / t
}

/// Evaluate the dual objective for one block over a calibration batch:
/// `recon` is the mean over benign rows of the per-position squared
/// reconstruction error of the block output, `resep` the mean over malicious
/// rows of the softplus margin loss on the token-averaged quantized output,
/// and `total = recon + lambda * resep`. A missing class contributes zero to
/// its term (visible through the counts).
pub fn qrealign_objective(
    blk: &crate::model::BlockWeights,
    n_heads: usize,
    bq: &BlockQuant,
    cfg: &QuantConfig,
    probe: Option<&ProbeParams>,
    samples: &[&CalibSample],
    lambda: f64,
) -> Result<ObjectiveValue> {
    if samples.is_empty() {
        return Err(Error::Data("qrealign_objective: empty batch".into()));
    }
    let mut recon_sum = 0.0;
    let mut resep_sum = 0.0;
    let mut benign = 0usize;
    let mut malicious = 0usize;
    for sample in samples {
        let q_out = quant_block_forward(&sample.q_input, blk, bq, n_heads, cfg)?;
        if sample.label == 0 {
            recon_sum += block_recon_error(&sample.fp_output, &q_out);
            benign += 1;
        } else {
            malicious += 1;
            if lambda != 0.0 {
                let probe = probe.ok_or_else(|| {
                    Error::Param("re-separation requires a probe when lambda > 0".into())
                })?;
                resep_sum += softplus_margin_loss(probe, q_out.mean_rows().data())?;
            }
        }
    }
    let recon = if benign > 0 { recon_sum / benign as f64 } else { 0.0 };
    let resep = if malicious > 0 { resep_sum / malicious as f64 } else { 0.0 };
    Ok(ObjectiveValue {
        total: recon + lambda * resep,
        recon,
        resep,
        benign_count: benign,
        malicious_count: malicious,
    })
}

/// Names of the learnable fields per linear, paired with which learning rate
/// they use.
const SMOOTHING_FIELDS: [&str; 2] = ["s", "shift"];
const CLIPPING_FIELDS: [&str; 3] = ["step", "alpha_pre", "beta_pre"];

struct EpochOutcome {
    bq: BlockQuant,
    trace: Vec<TraceRow>,
    final_objective: f64,
}

/// One mini-batch gradient step on the block's quantization parameters.
/// The batch loss uses full-set class counts so an epoch of batches sums to
/// the full objective.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    blk: &crate::model::BlockWeights,
    n_heads: usize,
    bq: &mut BlockQuant,
    cfg: &CalibConfig,
    probe: Option<&ProbeParams>,
    samples: &[&CalibSample],
    batch: &[usize],
    class_counts: (usize, usize),
) -> Result<()> {
    let (n_benign, n_malicious) = class_counts;
    let mut tape = Tape::new(QuantMode::Exact);
    let mut vars = Vec::with_capacity(6);
    for slot in LINEAR_SLOTS {
        let (w, b) = blk.linear(slot);
        vars.push(register_linear_quant(
            &mut tape,
            &format!("lin{}", slot.index()),
            w,
            b,
            &bq.linears[slot.index()],
            &cfg.quant,
        )?);
    }
    let ln1 = (tape.leaf(blk.ln1_gain.clone()), tape.leaf(blk.ln1_bias.clone()));
    let ln2 = (tape.leaf(blk.ln2_gain.clone()), tape.leaf(blk.ln2_bias.clone()));

    let mut loss_terms = Vec::new();
    for &si in batch {
        let sample = samples[si];
        let x = tape.leaf(sample.q_input.clone());
        let mut lin = |tape: &mut Tape, input, slot: LinearSlot| {
            quant_linear_graph(tape, input, &vars[slot.index()], &cfg.quant)
        };
        let out = block_graph(&mut tape, x, ln1, ln2, n_heads, &mut lin)?;
        if sample.label == 0 {
            let target = tape.leaf(sample.fp_output.clone());
            let diff = tape.sub(out, target)?;
            let sq = tape.mul(diff, diff)?;
            let sum = tape.sum_all(sq);
            let t = sample.fp_output.rows() as f64;
            loss_terms.push(tape.scale(sum, 1.0 / (t * n_benign as f64)));
        } else if cfg.lambda != 0.0 {
            let probe = probe.expect("probe checked by caller");
            let avg = tape.mean_rows(out);
            let w = tape.leaf(Tensor::new(vec![probe.w.len()], probe.w.clone())?);
            let sprod = tape.mul(avg, w)?;
            let dot = tape.sum_all(sprod);
            let margin = tape.affine(dot, 1.0, probe.b);
            let sp = tape.softplus_neg(margin);
            loss_terms.push(tape.scale(sp, cfg.lambda / n_malicious as f64));
        }
    }
    if loss_terms.is_empty() {
        return Ok(());
    }
    let mut loss = loss_terms[0];
    for &t in &loss_terms[1..] {
        loss = tape.add(loss, t)?;
    }
    let grads = tape.backward(loss)?;
    for slot in LINEAR_SLOTS {
        let idx = slot.index();
        for field in SMOOTHING_FIELDS {
            let g = grads.get(&format!("lin{idx}.{field}")).expect("registered");
            apply_quant_gradient(bq, idx, field, g, cfg.lr_smoothing);
        }
        for field in CLIPPING_FIELDS {
            let g = grads.get(&format!("lin{idx}.{field}")).expect("registered");
            apply_quant_gradient(bq, idx, field, g, cfg.lr_clipping);
        }
    }
    Ok(())
}

/// Calibrate one block: `epochs` of mini-batch steps at the two learning
/// rates, with the whole run retried at halved steps (up to 5 halvings) if
/// the full-set objective fails to be non-increasing.
pub fn calibrate_block(
    blk: &crate::model::BlockWeights,
    n_heads: usize,
    probe: Option<&ProbeParams>,
    samples: &[&CalibSample],
    init: BlockQuant,
    cfg: &CalibConfig,
    epochs: usize,
    block_idx: usize,
) -> Result<(BlockQuant, Vec<TraceRow>)> {
    cfg.validate()?;
    if cfg.lambda != 0.0 && probe.is_none() && samples.iter().any(|s| s.label == 1) {
        return Err(Error::Param(
            "calibrate_block: lambda > 0 with malicious samples requires a probe".into(),
        ));
    }
    if epochs == 0 {
        return Ok((init, Vec::new()));
    }
    let initial = qrealign_objective(blk, n_heads, &init, &cfg.quant, probe, samples, cfg.lambda)?;
    let n_benign = samples.iter().filter(|s| s.label == 0).count();
    let n_malicious = samples.len() - n_benign;

    let mut last_err: Option<Error> = None;
    let mut best_failure: Vec<TraceRow> = Vec::new();
    for attempt in 0..=5u32 {
        let scale = f64::powi(0.5, attempt as i32);
        let attempt_cfg = CalibConfig {
            lr_smoothing: cfg.lr_smoothing * scale,
            lr_clipping: cfg.lr_clipping * scale,
            ..cfg.clone()
        };
        match run_epochs(
            blk,
            n_heads,
            probe,
            samples,
            init.clone(),
            &attempt_cfg,
            epochs,
            block_idx,
            attempt,
            (n_benign, n_malicious),
        ) {
            Ok(outcome) => {
                if outcome.final_objective <= initial.total {
                    return Ok((outcome.bq, outcome.trace));
                }
                best_failure = outcome.trace;
                last_err = Some(Error::Calibration {
                    msg: format!(
                        "block {block_idx}: objective rose from {:.6e} to {:.6e} after {} halvings",
                        initial.total, outcome.final_objective, attempt
                    ),
                    trace: Vec::new(),
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    match last_err {
        Some(Error::Calibration { msg, .. }) => {
            Err(Error::Calibration { msg, trace: best_failure })
        }
        Some(e) => Err(e),
        None => unreachable!("at least one attempt ran"),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    blk: &crate::model::BlockWeights,
    n_heads: usize,
    probe: Option<&ProbeParams>,
    samples: &[&CalibSample],
    mut bq: BlockQuant,
    cfg: &CalibConfig,
    epochs: usize,
    block_idx: usize,
    attempt: u32,
    class_counts: (usize, usize),
) -> Result<EpochOutcome> {
    let mut trace = Vec::with_capacity(epochs);
    let mut final_objective = f64::INFINITY;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = SeedRng::substream(
            cfg.seed,
            &format!("calib-block{block_idx}-attempt{attempt}-epoch{epoch}"),
        );
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            batch_step(blk, n_heads, &mut bq, cfg, probe, samples, batch, class_counts)?;
        }
        let obj =
            qrealign_objective(blk, n_heads, &bq, &cfg.quant, probe, samples, cfg.lambda)?;
        trace.push(TraceRow {
            block: block_idx,
            epoch,
            recon: obj.recon,
            resep: obj.resep,
            total: obj.total,
        });
        final_objective = obj.total;
    }
    Ok(EpochOutcome { bq, trace, final_objective })
}

/// Calibrate every block of `model` in order against labeled calibration
/// prompts, propagating quantized inputs between blocks. The first
/// `ceil(n_layers / 2)` blocks run `epochs_first_half` epochs, the rest
/// `epochs_second_half`.
pub fn calibrate_model(
    model: &ModelCheckpoint,
    probes: &[ProbeParams],
    calib_corpus: &Corpus,
    cfg: &CalibConfig,
) -> Result<(QuantizedModel, Vec<TraceRow>)> {
    cfg.validate()?;
    if calib_corpus.is_empty() {
        return Err(Error::Data("calibrate_model: empty calibration corpus".into()));
    }
    let n_layers = model.config.n_layers;
    if cfg.lambda != 0.0 {
        if probes.len() != n_layers {
            return Err(Error::Param(format!(
                "need one probe per layer ({} layers, {} probes)",
                n_layers,
                probes.len()
            )));
        }
        for (l, p) in probes.iter().enumerate() {
            if p.layer != l {
                return Err(Error::Param(format!(
                    "probe at position {l} is for layer {}",
                    p.layer
                )));
            }
            if p.dim() != model.config.d_model {
                return Err(Error::Param(format!(
                    "probe dim {} does not match d_model {}",
                    p.dim(),
                    model.config.d_model
                )));
            }
        }
    }

    // Full-precision forward cache: per sample, the embedding and every
    // block output. Benign rows run the full prompt+response sequence (the
    // distribution inference sees); malicious rows run the prompt alone,
    // which is all the margin term reads.
    let tok = &model.tokenizer;
    let mut fp_embed = Vec::with_capacity(calib_corpus.len());
    let mut fp_blocks = Vec::with_capacity(calib_corpus.len());
    let mut labels = Vec::with_capacity(calib_corpus.len());
    for e in &calib_corpus.examples {
        let ids = if e.label == 0 {
            let mut seq = tok.encode(&e.prompt);
            seq.extend(tok.encode(&e.response));
            seq
        } else {
            tok.encode(&e.prompt)
        };
        fp_embed.push(model.embed(&ids)?);
        fp_blocks.push(model.block_outputs(&ids)?);
        labels.push(e.label);
    }

    // Propagated quantized inputs start at the (unquantized) embeddings.
    let mut q_inputs: Vec<Tensor> = fp_embed.clone();
    let first_half = n_layers.div_ceil(2);
    let mut blocks_out: Vec<BlockQuant> = Vec::with_capacity(n_layers);
    let mut trace = Vec::new();

    for l in 0..n_layers {
        let blk = &model.blocks[l];
        // Freeze activation grids from a pre-pass over benign calibration
        // inputs (all inputs when the benign class is absent).
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 6];
        let benign_exists = labels.iter().any(|&l| l == 0);
        for (i, q_in) in q_inputs.iter().enumerate() {
            if benign_exists && labels[i] != 0 {
                continue;
            }
            record_linear_ranges(q_in, blk, model.config.n_heads, &mut ranges)?;
        }
        let init = init_block_quant(blk, &ranges, &cfg.quant)?;

        let samples: Vec<CalibSample> = (0..calib_corpus.len())
            .map(|i| CalibSample {
                fp_input: if l == 0 { fp_embed[i].clone() } else { fp_blocks[i][l - 1].clone() },
                fp_output: fp_blocks[i][l].clone(),
                q_input: q_inputs[i].clone(),
                label: labels[i],
            })
            .collect();
        let sample_refs: Vec<&CalibSample> = samples.iter().collect();

        let epochs =
            if l < first_half { cfg.epochs_first_half } else { cfg.epochs_second_half };
        let probe = if cfg.lambda != 0.0 { Some(&probes[l]) } else { None };
        let (bq, block_trace) = calibrate_block(
            blk,
            model.config.n_heads,
            probe,
            &sample_refs,
            init,
            cfg,
            epochs,
            l,
        )?;
        trace.extend(block_trace);

        for q_in in q_inputs.iter_mut() {
            *q_in = quant_block_forward(q_in, blk, &bq, model.config.n_heads, &cfg.quant)?;
        }
        blocks_out.push(bq);
    }

    Ok((
        QuantizedModel { model: model.clone(), cfg: cfg.quant, blocks: blocks_out },
        trace,
    ))
}

/// Draw the calibration corpus from labeled pools: `n_malicious` prompts
/// from the malicious pool and `n_benign` from the benign pool,
/// deterministically.
pub fn select_calibration_corpus(
    benign_pool: &Corpus,
    malicious_pool: &Corpus,
    cfg: &CalibConfig,
) -> Result<Corpus> {
    if cfg.n_benign > benign_pool.len() || cfg.n_malicious > malicious_pool.len() {
        return Err(Error::Data(format!(
            "calibration needs {}/{} prompts but pools have {}/{}",
            cfg.n_benign,
            cfg.n_malicious,
            benign_pool.len(),
            malicious_pool.len()
        )));
    }
    let mut rng = SeedRng::substream(cfg.seed, "calib-selection");
    let mut pick = |pool: &Corpus, n: usize, label: u8| -> Vec<crate::corpus::CorpusExample> {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
        idx.iter()
            .map(|&i| {
                let mut e = pool.examples[i].clone();
                e.label = label;
                e
            })
            .collect()
    };
    let mut examples = pick(benign_pool, cfg.n_benign, 0);
    examples.extend(pick(malicious_pool, cfg.n_malicious, 1));
    Ok(Corpus { examples })
}

/// Mean benign block-output reconstruction error of a quantized model over a
/// corpus, averaged across blocks; the headline metric for bit-width sweeps.
pub fn benign_reconstruction_error(
    qm: &QuantizedModel,
    benign: &Corpus,
) -> Result<f64> {
    if benign.is_empty() {
        return Err(Error::Data("benign_reconstruction_error: empty corpus".into()));
    }
    let tok = qm.model.tokenizer.clone();
    let mut total = 0.0;
    let mut count = 0usize;
    for e in &benign.examples {
        let ids = tok.encode(&e.prompt);
        let fp = LayerModel::block_outputs(&qm.model, &ids)?;
        let q = qm.block_outputs(&ids)?;
        for (a, b) in fp.iter().zip(&q) {
            total += block_recon_error(a, b);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, ScenarioConfig, Tokenizer};
    use crate::model::{init_model, ModelConfig};
    use crate::probe::ProbeMeta;
    use crate::rng::SeedRng;
    use approx::assert_relative_eq;

    fn dummy_probe(layer: usize, w: Vec<f64>, b: f64) -> ProbeParams {
        ProbeParams {
            layer,
            w,
            b,
            meta: ProbeMeta {
                l1_strength: 0.0,
                iterations: 0,
                final_objective: 0.0,
                held_out_accuracy: None,
                converged: true,
            },
        }
    }

    #[test]
    fn softplus_pinned_values() {
        let probe = dummy_probe(0, vec![1.0], 0.0);
        assert_relative_eq!(
            softplus_margin_loss(&probe, &[0.0]).unwrap(),
            0.6931471805599453,
            epsilon = 1e-6
        );
        assert_relative_eq!(
            softplus_margin_loss(&probe, &[20.0]).unwrap(),
            2.061153620314381e-9,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            softplus_margin_loss(&probe, &[-10.0]).unwrap(),
            10.000045398899218,
            epsilon = 1e-9
        );
    }

    fn toy_setup() -> (ModelCheckpoint, crate::corpus::ScenarioData) {
        let scenario = ScenarioConfig {
            n_benign_train: 24,
            n_malicious_train: 24,
            n_eval_benign: 8,
            n_eval_malicious: 8,
            ..Default::default()
        };
        let tok = Tokenizer::for_scenario(&scenario).unwrap();
        let mut cfg = ModelConfig::toy_default(tok.vocab_size());
        cfg.n_layers = 2;
        let model = init_model(&cfg, tok).unwrap();
        let data = gen_corpus(&scenario).unwrap();
        (model, data)
    }

    fn make_samples(model: &ModelCheckpoint, corpus: &Corpus) -> Vec<CalibSample> {
        let tok = &model.tokenizer;
        corpus
            .examples
            .iter()
            .map(|e| {
                let ids = tok.encode(&e.prompt);
                let embed = model.embed(&ids).unwrap();
                let outs = model.block_outputs(&ids).unwrap();
                CalibSample {
                    fp_input: embed.clone(),
                    fp_output: outs[0].clone(),
                    q_input: embed,
                    label: e.label,
                }
            })
            .collect()
    }

    #[test]
    fn objective_reductions_are_exact() {
        let (model, data) = toy_setup();
        let cfg = CalibConfig::default();
        let blk = &model.blocks[0];
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 6];
        let mixed = select_mixed(&data, 6, 6);
        let samples = make_samples(&model, &mixed);
        for s in &samples {
            record_linear_ranges(&s.q_input, blk, model.config.n_heads, &mut ranges).unwrap();
        }
        let bq = init_block_quant(blk, &ranges, &cfg.quant).unwrap();
        let d = model.config.d_model;
        let probe = dummy_probe(0, vec![0.1; d], -0.2);

        let benign_only: Vec<&CalibSample> =
            samples.iter().filter(|s| s.label == 0).collect();
        let obj = qrealign_objective(
            blk,
            model.config.n_heads,
            &bq,
            &cfg.quant,
            Some(&probe),
            &benign_only,
            1.0,
        )
        .unwrap();
        assert_eq!(obj.resep, 0.0);
        assert_eq!(obj.total, obj.recon);
        assert_eq!(obj.malicious_count, 0);

        let malicious_only: Vec<&CalibSample> =
            samples.iter().filter(|s| s.label == 1).collect();
        let obj = qrealign_objective(
            blk,
            model.config.n_heads,
            &bq,
            &cfg.quant,
            Some(&probe),
            &malicious_only,
            1.0,
        )
        .unwrap();
        assert_eq!(obj.recon, 0.0);
        assert_eq!(obj.total, obj.resep);
    }

    #[test]
    fn objective_matches_scalar_recomputation() {
        // Mixed batch against an independent re-computation of Eq. 5 with
        // plain scalar loops.
        let (model, data) = toy_setup();
        let cfg = CalibConfig::default();
        let blk = &model.blocks[0];
        let mixed = select_mixed(&data, 4, 4);
        let samples = make_samples(&model, &mixed);
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 6];
        for s in &samples {
            record_linear_ranges(&s.q_input, blk, model.config.n_heads, &mut ranges).unwrap();
        }
        let bq = init_block_quant(blk, &ranges, &cfg.quant).unwrap();
        let d = model.config.d_model;
        let probe = dummy_probe(0, (0..d).map(|i| 0.01 * i as f64).collect(), 0.3);
        let lambda = 2.5;
        let refs: Vec<&CalibSample> = samples.iter().collect();
        let obj = qrealign_objective(
            blk,
            model.config.n_heads,
            &bq,
            &cfg.quant,
            Some(&probe),
            &refs,
            lambda,
        )
        .unwrap();

        let mut recon = 0.0;
        let mut resep = 0.0;
        let mut nb = 0.0;
        let mut nm = 0.0;
        for s in &samples {
            let q_out =
                quant_block_forward(&s.q_input, blk, &bq, model.config.n_heads, &cfg.quant)
                    .unwrap();
            if s.label == 0 {
                let mut sq = 0.0;
                for (a, b) in s.fp_output.data().iter().zip(q_out.data()) {
                    sq += (a - b) * (a - b);
                }
                recon += sq / s.fp_output.rows() as f64;
                nb += 1.0;
            } else {
                let avg = q_out.mean_rows();
                let mut margin = probe.b;
                for (w, h) in probe.w.iter().zip(avg.data()) {
                    margin += w * h;
                }
                resep += crate::tape::softplus_neg(margin);
                nm += 1.0;
            }
        }
        recon /= nb;
        resep /= nm;
        let total = recon + lambda * resep;
        assert!((obj.total - total).abs() <= 1e-10, "{} vs {total}", obj.total);
        assert!((obj.recon - recon).abs() <= 1e-10);
        assert!((obj.resep - resep).abs() <= 1e-10);
    }

    fn select_mixed(data: &crate::corpus::ScenarioData, nb: usize, nm: usize) -> Corpus {
        let mut examples = Vec::new();
        examples.extend(
            data.align.examples.iter().filter(|e| e.label == 0).take(nb).cloned(),
        );
        examples.extend(
            data.align.examples.iter().filter(|e| e.label == 1).take(nm).cloned(),
        );
        Corpus { examples }
    }

    #[test]
    fn zero_epochs_identity() {
        let (model, data) = toy_setup();
        let cfg = CalibConfig::default();
        let blk = &model.blocks[0];
        let mixed = select_mixed(&data, 4, 4);
        let samples = make_samples(&model, &mixed);
        let refs: Vec<&CalibSample> = samples.iter().collect();
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 6];
        for s in &samples {
            record_linear_ranges(&s.q_input, blk, model.config.n_heads, &mut ranges).unwrap();
        }
        let init = init_block_quant(blk, &ranges, &cfg.quant).unwrap();
        let d = model.config.d_model;
        let probe = dummy_probe(0, vec![0.0; d], 0.0);
        let (out, trace) = calibrate_block(
            blk,
            model.config.n_heads,
            Some(&probe),
            &refs,
            init.clone(),
            &cfg,
            0,
            0,
        )
        .unwrap();
        assert_eq!(out, init);
        assert!(trace.is_empty());
    }

    #[test]
    fn reconstruction_only_calibration_improves() {
        // lambda = 0, benign-only data: pure block-wise reconstruction.
        let (model, data) = toy_setup();
        let cfg = CalibConfig {
            lambda: 0.0,
            n_benign: 8,
            n_malicious: 0,
            malicious_ratio: 0.0,
            epochs_first_half: 4,
            epochs_second_half: 4,
            batch_size: 4,
            ..Default::default()
        };
        let blk = &model.blocks[0];
        let mixed = select_mixed(&data, 8, 0);
        let samples = make_samples(&model, &mixed);
        let refs: Vec<&CalibSample> = samples.iter().collect();
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 6];
        for s in &samples {
            record_linear_ranges(&s.q_input, blk, model.config.n_heads, &mut ranges).unwrap();
        }
        let init = init_block_quant(blk, &ranges, &cfg.quant).unwrap();
        let before = qrealign_objective(
            blk,
            model.config.n_heads,
            &init,
            &cfg.quant,
            None,
            &refs,
            0.0,
        )
        .unwrap();
        let (out, trace) =
            calibrate_block(blk, model.config.n_heads, None, &refs, init, &cfg, 4, 0)
                .unwrap();
        let after = qrealign_objective(
            blk,
            model.config.n_heads,
            &out,
            &cfg.quant,
            None,
            &refs,
            0.0,
        )
        .unwrap();
        assert!(
            after.recon <= before.recon,
            "recon {} -> {}",
            before.recon,
            after.recon
        );
        assert!(trace.iter().all(|r| r.resep == 0.0));
    }

    #[test]
    fn lambda_zero_is_probe_independent() {
        let (model, data) = toy_setup();
        let cfg = CalibConfig {
            lambda: 0.0,
            n_benign: 6,
            n_malicious: 6,
            malicious_ratio: 0.5,
            epochs_first_half: 2,
            epochs_second_half: 2,
            batch_size: 4,
            ..Default::default()
        };
        let corpus = select_mixed(&data, 6, 6);
        let d = model.config.d_model;
        let probe_a: Vec<ProbeParams> =
            (0..2).map(|l| dummy_probe(l, vec![1.0; d], 5.0)).collect();
        let probe_b: Vec<ProbeParams> =
            (0..2).map(|l| dummy_probe(l, vec![-3.0; d], -1.0)).collect();
        let (qa, _) = calibrate_model(&model, &probe_a, &corpus, &cfg).unwrap();
        let (qb, _) = calibrate_model(&model, &probe_b, &corpus, &cfg).unwrap();
        assert_eq!(qa.blocks, qb.blocks);
    }

    #[test]
    fn sixteen_bit_calibration_is_exact_passthrough() {
        let (model, data) = toy_setup();
        let cfg = CalibConfig {
            lambda: 0.0,
            n_benign: 4,
            n_malicious: 0,
            malicious_ratio: 0.0,
            epochs_first_half: 1,
            epochs_second_half: 1,
            quant: QuantConfig::from_tag("W16A16").unwrap(),
            ..Default::default()
        };
        let corpus = select_mixed(&data, 4, 0);
        let (qm, trace) = calibrate_model(&model, &[], &corpus, &cfg).unwrap();
        assert!(trace.iter().all(|r| r.total == 0.0));
        let ids = model.tokenizer.encode(&corpus.examples[0].prompt);
        let fp = LayerModel::block_outputs(&model, &ids).unwrap();
        let q = qm.block_outputs(&ids).unwrap();
        for (a, b) in fp.iter().zip(&q) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(benign_reconstruction_error(&qm, &corpus).unwrap(), 0.0);
    }

    #[test]
    fn malicious_margin_increases_with_reseparation() {
        // A fixture block with lambda = 1: the mean malicious margin must
        // strictly increase relative to the uncalibrated quantizer.
        let (model, data) = toy_setup();
        let cfg = CalibConfig {
            lambda: 1.0,
            n_benign: 6,
            n_malicious: 6,
            malicious_ratio: 0.5,
            epochs_first_half: 6,
            epochs_second_half: 6,
            batch_size: 4,
            ..Default::default()
        };
        let blk = &model.blocks[0];
        let mixed = select_mixed(&data, 6, 6);
        let samples = make_samples(&model, &mixed);
        let refs: Vec<&CalibSample> = samples.iter().collect();
        let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 6];
        for s in &samples {
            if s.label == 0 {
                record_linear_ranges(&s.q_input, blk, model.config.n_heads, &mut ranges)
                    .unwrap();
            }
        }
        let init = init_block_quant(blk, &ranges, &cfg.quant).unwrap();
        // Probe direction: separate malicious from benign mean activations.
        let d = model.config.d_model;
        let mut w = vec![0.0; d];
        let mut nb = 0.0;
        let mut nm = 0.0;
        let mut mb = vec![0.0; d];
        let mut mm = vec![0.0; d];
        for s in &samples {
            let avg = s.fp_output.mean_rows();
            if s.label == 0 {
                for (a, v) in mb.iter_mut().zip(avg.data()) {
                    *a += v;
                }
                nb += 1.0;
            } else {
                for (a, v) in mm.iter_mut().zip(avg.data()) {
                    *a += v;
                }
                nm += 1.0;
            }
        }
        for j in 0..d {
            w[j] = mm[j] / nm - mb[j] / nb;
        }
        let probe = dummy_probe(0, w, 0.0);

        let margin_of = |bq: &BlockQuant| -> f64 {
            let mut total = 0.0;
            let mut n = 0.0;
            for s in &samples {
                if s.label == 1 {
                    let out = quant_block_forward(
                        &s.q_input,
                        blk,
                        bq,
                        model.config.n_heads,
                        &cfg.quant,
                    )
                    .unwrap();
                    total += slr_decision(&probe, out.mean_rows().data()).unwrap();
                    n += 1.0;
                }
            }
            total / n
        };
        let before = margin_of(&init);
        let (out, _) = calibrate_block(
            blk,
            model.config.n_heads,
            Some(&probe),
            &refs,
            init,
            &cfg,
            6,
            0,
        )
        .unwrap();
        let after = margin_of(&out);
        assert!(after > before, "mean malicious margin {before} -> {after}");
    }

    #[test]
    fn epoch_split_counts() {
        // 4 layers: blocks 0-1 run epochs_first_half, 2-3 epochs_second_half.
        let scenario = ScenarioConfig {
            n_benign_train: 12,
            n_malicious_train: 12,
            n_eval_benign: 4,
            n_eval_malicious: 4,
            ..Default::default()
        };
        let tok = Tokenizer::for_scenario(&scenario).unwrap();
        let cfg_model = ModelConfig::toy_default(tok.vocab_size());
        let model = init_model(&cfg_model, tok).unwrap();
        let data = gen_corpus(&scenario).unwrap();
        let corpus = select_mixed(&data, 6, 0);
        let cfg = CalibConfig {
            lambda: 0.0,
            n_benign: 6,
            n_malicious: 0,
            malicious_ratio: 0.0,
            epochs_first_half: 2,
            epochs_second_half: 3,
            batch_size: 6,
            ..Default::default()
        };
        let (_, trace) = calibrate_model(&model, &[], &corpus, &cfg).unwrap();
        for l in 0..4 {
            let epochs = trace.iter().filter(|r| r.block == l).count();
            assert_eq!(epochs, if l < 2 { 2 } else { 3 }, "block {l}");
        }
    }

    #[test]
    fn calibration_is_deterministic() {
        let (model, data) = toy_setup();
        let corpus = select_mixed(&data, 6, 6);
        let d = model.config.d_model;
        let mut rng = SeedRng::new(3);
        let probes: Vec<ProbeParams> = (0..2)
            .map(|l| dummy_probe(l, (0..d).map(|_| rng.normal()).collect(), 0.1))
            .collect();
        let cfg = CalibConfig {
            n_benign: 6,
            n_malicious: 6,
            malicious_ratio: 0.5,
            epochs_first_half: 2,
            epochs_second_half: 2,
            batch_size: 4,
            ..Default::default()
        };
        let (qa, ta) = calibrate_model(&model, &probes, &corpus, &cfg).unwrap();
        let (qb, tb) = calibrate_model(&model, &probes, &corpus, &cfg).unwrap();
        assert_eq!(qa.blocks, qb.blocks);
        assert_eq!(ta, tb);
    }

    #[test]
    fn config_validation() {
        let mut cfg = CalibConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let cfg = CalibConfig { malicious_ratio: 0.2, ..Default::default() };
        assert!(cfg.validate().is_err(), "ratio inconsistent with 150/50 counts");
        let cfg = CalibConfig::default().with_ratio(200, 0.75);
        assert_eq!((cfg.n_malicious, cfg.n_benign), (150, 50));
        assert!(cfg.validate().is_ok());
    }
}
