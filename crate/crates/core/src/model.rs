//! Minimal decoder-only transformer: pre-norm blocks, learned positional
//! embeddings, untied unembedding, greedy decoding. Everything is seeded and
//! deterministic; training is plain mini-batch gradient descent on the tape.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Tokenizer};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tape::{Bcast, QuantMode, Tape, Var};
use crate::tensor::{layer_norm, softmax, Tensor};

pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults; `vocab_size` comes from the scenario tokenizer.
    pub fn toy_default(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 32, n_layers: 4, n_heads: 4, d_ff: 64, max_seq_len: 24, seed: 7 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > 256 {
            return Err(Error::Param(format!("vocab_size {} outside 1..=256", self.vocab_size)));
        }
        if !(2..=6).contains(&self.n_layers) {
            return Err(Error::Param(format!("n_layers {} outside 2..=6", self.n_layers)));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Param("all model sizes must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Shape(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

/// The six linear layers inside a block, in calibration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSlot {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

pub const LINEAR_SLOTS: [LinearSlot; 6] =
    [LinearSlot::Q, LinearSlot::K, LinearSlot::V, LinearSlot::O, LinearSlot::Up, LinearSlot::Down];

impl LinearSlot {
    pub fn index(self) -> usize {
        LINEAR_SLOTS.iter().position(|&s| s == self).expect("slot")
    }

    pub fn name(self) -> &'static str {
        match self {
            LinearSlot::Q => "q",
            LinearSlot::K => "k",
            LinearSlot::V => "v",
            LinearSlot::O => "o",
            LinearSlot::Up => "up",
            LinearSlot::Down => "down",
        }
    }
}

impl BlockWeights {
    pub fn linear(&self, slot: LinearSlot) -> (&Tensor, &Tensor) {
        match slot {
            LinearSlot::Q => (&self.w_q, &self.b_q),
            LinearSlot::K => (&self.w_k, &self.b_k),
            LinearSlot::V => (&self.w_v, &self.b_v),
            LinearSlot::O => (&self.w_o, &self.b_o),
            LinearSlot::Up => (&self.w_up, &self.b_up),
            LinearSlot::Down => (&self.w_down, &self.b_down),
        }
    }
}

/// Toy transformer weights plus the tokenizer table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub w_unembed: Tensor,
    pub tokenizer: Tokenizer,
}

/// Seeded deterministic initialization.
pub fn init_model(config: &ModelConfig, tokenizer: Tokenizer) -> Result<ModelCheckpoint> {
    config.validate()?;
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(Error::Param(format!(
            "tokenizer has {} tokens but config declares {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let mut rng = SeedRng::substream(config.seed, "model-init");
    let d = config.d_model;
    let v = config.vocab_size;
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();

    let mut normal = |shape: Vec<usize>, std: f64| -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.normal_scaled(std)).collect()).expect("init")
    };
    let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();

    let tok_emb = normal(vec![v, d], 0.1);
    let pos_emb = normal(vec![config.max_seq_len, d], 0.1);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn_std = xavier(d, d);
        let up_std = xavier(d, config.d_ff);
        let down_std = xavier(config.d_ff, d);
        blocks.push(BlockWeights {
            ln1_gain: Tensor::filled(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            w_q: normal(vec![d, d], attn_std),
            b_q: Tensor::zeros(vec![d]),
            w_k: normal(vec![d, d], attn_std),
            b_k: Tensor::zeros(vec![d]),
            w_v: normal(vec![d, d], attn_std),
            b_v: Tensor::zeros(vec![d]),
            w_o: normal(vec![d, d], attn_std * residual_scale),
            b_o: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::filled(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            w_up: normal(vec![d, config.d_ff], up_std),
            b_up: Tensor::zeros(vec![config.d_ff]),
            w_down: normal(vec![config.d_ff, d], down_std * residual_scale),
            b_down: Tensor::zeros(vec![d]),
        });
    }
    let lnf_gain = Tensor::filled(vec![d], 1.0);
    let lnf_bias = Tensor::zeros(vec![d]);
    let w_unembed = normal(vec![d, v], xavier(d, v));
    Ok(ModelCheckpoint {
        config: config.clone(),
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain,
        lnf_bias,
        w_unembed,
        tokenizer,
    })
}

fn plain_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    let n = y.cols();
    for i in 0..y.rows() {
        for j in 0..n {
            y.data_mut()[i * n + j] += b.data()[j];
        }
    }
    Ok(y)
}

/// One block in plain tensor math. `lin` applies each of the six linear
/// layers; the quantized execution path substitutes its own hook.
pub fn block_forward<F>(x: &Tensor, blk: &BlockWeights, n_heads: usize, lin: &mut F) -> Result<Tensor>
where
    F: FnMut(&Tensor, LinearSlot) -> Result<Tensor>,
{
    let t = x.rows();
    let d = x.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let ln1 = layer_norm(x, &blk.ln1_gain, &blk.ln1_bias, LN_EPS)?;
    let q = lin(&ln1, LinearSlot::Q)?;
    let k = lin(&ln1, LinearSlot::K)?;
    let v = lin(&ln1, LinearSlot::V)?;

    let mut ctx = Tensor::zeros(vec![t, d]);
    for h in 0..n_heads {
        let off = h * dh;
        // scores[i][j] = q_i . k_j * scale, causally masked.
        let mut scores = Tensor::filled(vec![t, t], MASKED);
        for i in 0..t {
            for j in 0..=i {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q.at(i, off + c) * k.at(j, off + c);
                }
                scores.data_mut()[i * t + j] = dot * scale;
            }
        }
        let probs = softmax(&scores);
        for i in 0..t {
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += probs.at(i, j) * v.at(j, off + c);
                }
                ctx.data_mut()[i * d + off + c] = acc;
            }
        }
    }
    let attn_out = lin(&ctx, LinearSlot::O)?;
    let mut h1 = x.clone();
    for (a, b) in h1.data_mut().iter_mut().zip(attn_out.data()) {
        *a += b;
    }

    let ln2 = layer_norm(&h1, &blk.ln2_gain, &blk.ln2_bias, LN_EPS)?;
    let up = lin(&ln2, LinearSlot::Up)?;
    let act = up.map(crate::tensor::gelu);
    let down = lin(&act, LinearSlot::Down)?;
    let mut out = h1;
    for (a, b) in out.data_mut().iter_mut().zip(down.data()) {
        *a += b;
    }
    Ok(out)
}

/// Read access shared by full-precision and quantized models: per-block
/// outputs plus the final norm + unembedding map.
pub trait LayerModel {
    fn n_layers(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn tokenizer(&self) -> &Tokenizer;
    /// Output of every transformer block for this token sequence.
    fn block_outputs(&self, tokens: &[u32]) -> Result<Vec<Tensor>>;
    /// Final norm + unembedding applied to one activation row.
    fn unembed_row(&self, row: &[f64]) -> Result<Vec<f64>>;
}

impl ModelCheckpoint {
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        validate_tokens(tokens, self.config.vocab_size, self.config.max_seq_len)?;
        let d = self.config.d_model;
        let mut x = Tensor::zeros(vec![tokens.len(), d]);
        for (i, &id) in tokens.iter().enumerate() {
            for j in 0..d {
                x.data_mut()[i * d + j] =
                    self.tok_emb.at(id as usize, j) + self.pos_emb.at(i, j);
            }
        }
        Ok(x)
    }
}

pub fn validate_tokens(tokens: &[u32], vocab: usize, max_seq: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if tokens.len() > max_seq {
        return Err(Error::Data(format!(
            "sequence length {} exceeds max_seq_len {max_seq}",
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Data(format!("token id {bad} out of range (vocab {vocab})")));
    }
    Ok(())
}

impl LayerModel for ModelCheckpoint {
    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn block_outputs(&self, tokens: &[u32]) -> Result<Vec<Tensor>> {
        let mut x = self.embed(tokens)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mut lin =
                |input: &Tensor, slot: LinearSlot| -> Result<Tensor> {
                    let (w, b) = blk.linear(slot);
                    plain_linear(input, w, b)
                };
            x = block_forward(&x, blk, self.config.n_heads, &mut lin)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    fn unembed_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        unembed_with(row, &self.lnf_gain, &self.lnf_bias, &self.w_unembed)
    }
}

pub fn unembed_with(
    row: &[f64],
    lnf_gain: &Tensor,
    lnf_bias: &Tensor,
    w_unembed: &Tensor,
) -> Result<Vec<f64>> {
    let x = Tensor::new(vec![1, row.len()], row.to_vec())?;
    let normed = layer_norm(&x, lnf_gain, lnf_bias, LN_EPS)?;
    let logits = normed.matmul(w_unembed)?;
    Ok(logits.data().to_vec())
}

/// Logits for every position, plus the per-block outputs.
pub fn forward_collect(model: &dyn LayerModel, tokens: &[u32]) -> Result<(Tensor, Vec<Tensor>)> {
    let blocks = model.block_outputs(tokens)?;
    let last = blocks.last().expect("at least one block");
    let mut rows = Vec::with_capacity(last.rows());
    for i in 0..last.rows() {
        rows.push(model.unembed_row(last.row(i))?);
    }
    Ok((Tensor::from_rows(&rows)?, blocks))
}

/// Arithmetic mean over the prompt positions of block `layer`'s output.
pub fn token_avg_activation(
    model: &dyn LayerModel,
    prompt_tokens: &[u32],
    layer: usize,
) -> Result<Vec<f64>> {
    if layer >= model.n_layers() {
        return Err(Error::Param(format!(
            "layer {layer} out of range ({} blocks)",
            model.n_layers()
        )));
    }
    let blocks = model.block_outputs(prompt_tokens)?;
    Ok(blocks[layer].mean_rows().data().to_vec())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from an intermediate layer: each step runs the forward
/// pass through block `layer` only, then applies the final norm +
/// unembedding to the last position (the logit-lens reading).
pub fn logit_lens_decode(
    model: &dyn LayerModel,
    prompt_tokens: &[u32],
    layer: usize,
    max_new: usize,
) -> Result<Vec<u32>> {
    if layer >= model.n_layers() {
        return Err(Error::Param(format!(
            "layer {layer} out of range ({} blocks)",
            model.n_layers()
        )));
    }
    if max_new == 0 {
        return Err(Error::Param("max_new must be at least 1".into()));
    }
    let mut seq = prompt_tokens.to_vec();
    let mut generated = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        if seq.len() >= model.max_seq_len() {
            break;
        }
        let blocks = model.block_outputs(&seq)?;
        let out = &blocks[layer];
        let logits = model.unembed_row(out.row(out.rows() - 1))?;
        let next = argmax(&logits) as u32;
        seq.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Full-depth greedy decode, detokenized.
pub fn generate(model: &dyn LayerModel, prompt_tokens: &[u32], max_new: usize) -> Result<String> {
    let ids = logit_lens_decode(model, prompt_tokens, model.n_layers() - 1, max_new)?;
    Ok(model.tokenizer().decode(&ids))
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { lr: 0.5, batch_size: 10, epochs: 30, seed: 7 }
    }
}

struct Sample {
    input: Vec<usize>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

fn prepare_samples(model: &ModelCheckpoint, corpus: &Corpus) -> Result<Vec<Sample>> {
    let tok = &model.tokenizer;
    let mut out = Vec::with_capacity(corpus.len());
    for e in &corpus.examples {
        let prompt = tok.encode(&e.prompt);
        let response = tok.encode(&e.response);
        let mut seq: Vec<u32> = prompt.clone();
        seq.extend_from_slice(&response);
        validate_tokens(&seq, model.config.vocab_size, model.config.max_seq_len)?;
        if seq.len() < 2 {
            return Err(Error::Data(format!("example too short to train on: `{}`", e.prompt)));
        }
        let input: Vec<usize> = seq[..seq.len() - 1].iter().map(|&t| t as usize).collect();
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        // Only response positions contribute to the loss.
        let mask: Vec<bool> = (0..input.len()).map(|i| i + 1 >= prompt.len()).collect();
        out.push(Sample { input, targets, mask });
    }
    Ok(out)
}

struct BlockVars {
    ln1: (Var, Var),
    ln2: (Var, Var),
    linears: Vec<(Var, Var)>,
}

/// One block on the tape with parameterizable linear application; shared by
/// training (weights as parameters) and calibration (quantized weights).
pub fn block_graph<F>(
    tape: &mut Tape,
    x: Var,
    ln1: (Var, Var),
    ln2: (Var, Var),
    n_heads: usize,
    lin: &mut F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, LinearSlot) -> Result<Var>,
{
    let t = tape.value(x).rows();
    let d = tape.value(x).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let ln1_out = tape.layer_norm(x, ln1.0, ln1.1, LN_EPS)?;
    let q = lin(tape, ln1_out, LinearSlot::Q)?;
    let k = lin(tape, ln1_out, LinearSlot::K)?;
    let v = lin(tape, ln1_out, LinearSlot::V)?;

    let mut mask = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            mask.data_mut()[i * t + j] = MASKED;
        }
    }
    let mask = tape.leaf(mask);

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask)?;
        let probs = tape.softmax(scores);
        heads.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    let attn_out = lin(tape, ctx, LinearSlot::O)?;
    let h1 = tape.add(x, attn_out)?;

    let ln2_out = tape.layer_norm(h1, ln2.0, ln2.1, LN_EPS)?;
    let up = lin(tape, ln2_out, LinearSlot::Up)?;
    let act = tape.gelu(up);
    let down = lin(tape, act, LinearSlot::Down)?;
    tape.add(h1, down)
}

fn register_model(tape: &mut Tape, model: &ModelCheckpoint) -> Result<(Var, Var, Vec<BlockVars>, Var, Var, Var)> {
    let tok_emb = tape.param("tok_emb", model.tok_emb.clone())?;
    let pos_emb = tape.param("pos_emb", model.pos_emb.clone())?;
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (i, blk) in model.blocks.iter().enumerate() {
        let ln1 = (
            tape.param(&format!("blk{i}.ln1_gain"), blk.ln1_gain.clone())?,
            tape.param(&format!("blk{i}.ln1_bias"), blk.ln1_bias.clone())?,
        );
        let ln2 = (
            tape.param(&format!("blk{i}.ln2_gain"), blk.ln2_gain.clone())?,
            tape.param(&format!("blk{i}.ln2_bias"), blk.ln2_bias.clone())?,
        );
        let mut linears = Vec::new();
        for slot in LINEAR_SLOTS {
            let (w, b) = blk.linear(slot);
            linears.push((
                tape.param(&format!("blk{i}.w_{}", slot.name()), w.clone())?,
                tape.param(&format!("blk{i}.b_{}", slot.name()), b.clone())?,
            ));
        }
        blocks.push(BlockVars { ln1, ln2, linears });
    }
    let lnf_gain = tape.param("lnf_gain", model.lnf_gain.clone())?;
    let lnf_bias = tape.param("lnf_bias", model.lnf_bias.clone())?;
    let w_unembed = tape.param("w_unembed", model.w_unembed.clone())?;
    Ok((tok_emb, pos_emb, blocks, lnf_gain, lnf_bias, w_unembed))
}

fn sample_loss_graph(
    tape: &mut Tape,
    handles: &(Var, Var, Vec<BlockVars>, Var, Var, Var),
    n_heads: usize,
    sample: &Sample,
) -> Result<Var> {
    let (tok_emb, pos_emb, blocks, lnf_gain, lnf_bias, w_unembed) = handles;
    let tok = tape.gather_rows(*tok_emb, &sample.input)?;
    let positions: Vec<usize> = (0..sample.input.len()).collect();
    let pos = tape.gather_rows(*pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for blk in blocks {
        let mut lin = |tape: &mut Tape, input: Var, slot: LinearSlot| -> Result<Var> {
            let (w, b) = blk.linears[slot.index()];
            let y = tape.matmul(input, w)?;
            tape.add_bc(y, b, Bcast::Row)
        };
        x = block_graph(tape, x, blk.ln1, blk.ln2, n_heads, &mut lin)?;
    }
    let xf = tape.layer_norm(x, *lnf_gain, *lnf_bias, LN_EPS)?;
    let logits = tape.matmul(xf, *w_unembed)?;
    tape.cross_entropy_masked(logits, &sample.targets, &sample.mask)
}

/// Mean response-token cross-entropy of the model over a corpus.
pub fn mean_cross_entropy(model: &dyn LayerModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("mean_cross_entropy: empty corpus".into()));
    }
    let tok = model.tokenizer();
    let mut total = 0.0;
    let mut count = 0usize;
    for e in &corpus.examples {
        let prompt = tok.encode(&e.prompt);
        let mut seq = prompt.clone();
        seq.extend(tok.encode(&e.response));
        let (logits, _) = forward_collect(model, &seq[..seq.len() - 1])?;
        for pos in (prompt.len() - 1)..(seq.len() - 1) {
            let row = logits.row(pos);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[seq[pos + 1] as usize];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Teacher-forced next-token accuracy over response positions.
pub fn next_token_accuracy(model: &dyn LayerModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("next_token_accuracy: empty corpus".into()));
    }
    let tok = model.tokenizer();
    let mut hits = 0usize;
    let mut count = 0usize;
    for e in &corpus.examples {
        let prompt = tok.encode(&e.prompt);
        let mut seq = prompt.clone();
        seq.extend(tok.encode(&e.response));
        let (logits, _) = forward_collect(model, &seq[..seq.len() - 1])?;
        for pos in (prompt.len() - 1)..(seq.len() - 1) {
            if argmax(logits.row(pos)) as u32 == seq[pos + 1] {
                hits += 1;
            }
            count += 1;
        }
    }
    Ok(hits as f64 / count as f64)
}

/// Plain mini-batch gradient descent; returns the trained copy.
pub fn train(model: &ModelCheckpoint, corpus: &Corpus, opts: &TrainOptions) -> Result<ModelCheckpoint> {
    if corpus.is_empty() {
        return Err(Error::Data("train: empty corpus".into()));
    }
    if opts.batch_size == 0 || opts.lr <= 0.0 {
        return Err(Error::Param("train: batch_size and lr must be positive".into()));
    }
    let mut trained = model.clone();
    if opts.epochs == 0 {
        return Ok(trained);
    }
    let samples = prepare_samples(model, corpus)?;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = SeedRng::substream(opts.seed, &format!("train-epoch-{epoch}"));
        rng.shuffle(&mut order);
        for chunk in order.chunks(opts.batch_size) {
            let mut acc: Option<Vec<(String, Tensor)>> = None;
            for &si in chunk {
                let mut tape = Tape::new(QuantMode::Exact);
                let handles = register_model(&mut tape, &trained)?;
                let loss =
                    sample_loss_graph(&mut tape, &handles, trained.config.n_heads, &samples[si])?;
                let grads = tape.backward(loss)?;
                match &mut acc {
                    None => {
                        acc = Some(
                            grads.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
                        )
                    }
                    Some(acc) => {
                        for ((_, total), (_, g)) in acc.iter_mut().zip(grads.iter()) {
                            for (a, b) in total.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            let acc = acc.expect("non-empty batch");
            let scale = opts.lr / chunk.len() as f64;
            apply_gradients(&mut trained, &acc, scale);
        }
    }
    Ok(trained)
}

fn apply_gradients(model: &mut ModelCheckpoint, grads: &[(String, Tensor)], scale: f64) {
    for (name, g) in grads {
        let target: &mut Tensor = match name.as_str() {
            "tok_emb" => &mut model.tok_emb,
            "pos_emb" => &mut model.pos_emb,
            "lnf_gain" => &mut model.lnf_gain,
            "lnf_bias" => &mut model.lnf_bias,
            "w_unembed" => &mut model.w_unembed,
            other => {
                let (blk_part, field) = other.split_once('.').expect("block param name");
                let idx: usize = blk_part.trim_start_matches("blk").parse().expect("block index");
                let blk = &mut model.blocks[idx];
                match field {
                    "ln1_gain" => &mut blk.ln1_gain,
                    "ln1_bias" => &mut blk.ln1_bias,
                    "ln2_gain" => &mut blk.ln2_gain,
                    "ln2_bias" => &mut blk.ln2_bias,
                    "w_q" => &mut blk.w_q,
                    "b_q" => &mut blk.b_q,
                    "w_k" => &mut blk.w_k,
                    "b_k" => &mut blk.b_k,
                    "w_v" => &mut blk.w_v,
                    "b_v" => &mut blk.b_v,
                    "w_o" => &mut blk.w_o,
                    "b_o" => &mut blk.b_o,
                    "w_up" => &mut blk.w_up,
                    "b_up" => &mut blk.b_up,
                    "w_down" => &mut blk.w_down,
                    "b_down" => &mut blk.b_down,
                    _ => unreachable!("unknown field {field}"),
                }
            }
        };
        for (p, gv) in target.data_mut().iter_mut().zip(g.data()) {
            *p -= scale * gv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, ScenarioConfig, Tokenizer};

    fn tiny_setup() -> (ModelConfig, Tokenizer) {
        let scenario = ScenarioConfig::default();
        let tok = Tokenizer::for_scenario(&scenario).unwrap();
        let cfg = ModelConfig::toy_default(tok.vocab_size());
        (cfg, tok)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let (cfg, tok) = tiny_setup();
        let a = init_model(&cfg, tok.clone()).unwrap();
        let b = init_model(&cfg, tok.clone()).unwrap();
        assert_eq!(a, b);

        let other = ModelConfig { seed: 8, ..cfg };
        let c = init_model(&other, tok).unwrap();
        assert_ne!(a.tok_emb, c.tok_emb);
    }

    #[test]
    fn init_rejects_bad_divisibility() {
        let (mut cfg, tok) = tiny_setup();
        cfg.d_model = 8;
        cfg.n_heads = 3;
        assert!(matches!(init_model(&cfg, tok), Err(Error::Shape(_))));
    }

    #[test]
    fn block_outputs_shapes() {
        let (mut cfg, tok) = tiny_setup();
        cfg.n_layers = 3;
        let model = init_model(&cfg, tok).unwrap();
        let outs = model.block_outputs(&[2, 3, 4]).unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(o.shape(), &[3, cfg.d_model]);
        }
        let single = model.block_outputs(&[5]).unwrap();
        assert_eq!(single[0].shape(), &[1, cfg.d_model]);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let (cfg, tok) = tiny_setup();
        let model = init_model(&cfg, tok).unwrap();
        let bad = cfg.vocab_size as u32;
        assert!(matches!(model.block_outputs(&[bad]), Err(Error::Data(_))));
    }

    #[test]
    fn token_avg_matches_recomputation() {
        let (cfg, tok) = tiny_setup();
        let model = init_model(&cfg, tok).unwrap();
        let prompt = [2u32, 5, 9, 4];
        for layer in 0..cfg.n_layers {
            let avg = token_avg_activation(&model, &prompt, layer).unwrap();
            let blocks = model.block_outputs(&prompt).unwrap();
            let out = &blocks[layer];
            for (j, v) in avg.iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..out.rows() {
                    acc += out.at(i, j);
                }
                acc /= out.rows() as f64;
                assert!((v - acc).abs() <= 1e-12);
            }
        }
        // Mean of a single row is that row.
        let avg = token_avg_activation(&model, &[3], 0).unwrap();
        let blocks = model.block_outputs(&[3]).unwrap();
        for (a, b) in avg.iter().zip(blocks[0].row(0)) {
            assert_eq!(a, b);
        }
        assert!(matches!(
            token_avg_activation(&model, &[3], cfg.n_layers),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn lens_at_final_layer_equals_generate() {
        let (cfg, tok) = tiny_setup();
        let model = init_model(&cfg, tok).unwrap();
        let prompt = [2u32, 7, 1, 9];
        let lens = logit_lens_decode(&model, &prompt, cfg.n_layers - 1, 8).unwrap();
        let gen = generate(&model, &prompt, 8).unwrap();
        assert_eq!(model.tokenizer.decode(&lens), gen);

        let one = logit_lens_decode(&model, &prompt, 1, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!(matches!(
            logit_lens_decode(&model, &prompt, cfg.n_layers, 4),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn generate_is_deterministic() {
        let (cfg, tok) = tiny_setup();
        let model = init_model(&cfg, tok).unwrap();
        let prompt = [4u32, 2, 8];
        assert_eq!(
            generate(&model, &prompt, 6).unwrap(),
            generate(&model, &prompt, 6).unwrap()
        );
    }

    #[test]
    fn forward_collect_consistent_with_plain_logits() {
        let (cfg, tok) = tiny_setup();
        let model = init_model(&cfg, tok).unwrap();
        let tokens = [2u32, 4, 6];
        let (logits, blocks) = forward_collect(&model, &tokens).unwrap();
        assert_eq!(blocks.len(), cfg.n_layers);
        assert_eq!(logits.shape(), &[3, cfg.vocab_size]);
        let last = blocks.last().unwrap();
        let direct = model.unembed_row(last.row(2)).unwrap();
        for (a, b) in logits.row(2).iter().zip(&direct) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (cfg, tok) = tiny_setup();
        let model = init_model(&cfg, tok).unwrap();
        let data = gen_corpus(&ScenarioConfig::default()).unwrap();
        let out =
            train(&model, &data.align, &TrainOptions { epochs: 0, ..Default::default() })
                .unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn empty_corpus_rejected() {
        let (cfg, tok) = tiny_setup();
        let model = init_model(&cfg, tok).unwrap();
        let empty = Corpus::default();
        assert!(matches!(
            train(&model, &empty, &TrainOptions::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn training_decreases_cross_entropy() {
        let scenario = ScenarioConfig {
            n_benign_train: 40,
            n_malicious_train: 40,
            n_eval_benign: 10,
            n_eval_malicious: 10,
            ..Default::default()
        };
        let tok = Tokenizer::for_scenario(&scenario).unwrap();
        let cfg = ModelConfig::toy_default(tok.vocab_size());
        let model = init_model(&cfg, tok).unwrap();
        let data = gen_corpus(&scenario).unwrap();
        let before = mean_cross_entropy(&model, &data.eval_benign).unwrap();
        let trained = train(
            &model,
            &data.align,
            &TrainOptions { epochs: 4, ..Default::default() },
        )
        .unwrap();
        let after = mean_cross_entropy(&trained, &data.eval_benign).unwrap();
        assert!(after < before, "CE {before} -> {after}");
    }

    #[test]
    fn training_is_deterministic() {
        let scenario = ScenarioConfig {
            n_benign_train: 20,
            n_malicious_train: 20,
            n_eval_benign: 5,
            n_eval_malicious: 5,
            ..Default::default()
        };
        let tok = Tokenizer::for_scenario(&scenario).unwrap();
        let cfg = ModelConfig::toy_default(tok.vocab_size());
        let model = init_model(&cfg, tok).unwrap();
        let data = gen_corpus(&scenario).unwrap();
        let opts = TrainOptions { epochs: 2, ..Default::default() };
        let a = train(&model, &data.align, &opts).unwrap();
        let b = train(&model, &data.align, &opts).unwrap();
        assert_eq!(a, b);
    }
}
