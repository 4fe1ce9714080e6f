//! Per-layer sparse logistic regression probes.
//!
//! A probe is the linear decision function `w'h + b` over token-averaged
//! activations, with positive margin meaning malicious. Training minimizes
//! mean logistic loss plus an L1 penalty on `w` by proximal gradient (ISTA
//! with soft-thresholding); the bias is unpenalized. Step sizes backtrack
//! whenever a step would increase the objective, so the objective trace is
//! non-increasing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::sigmoid;
use crate::tensor::Tensor;

/// Labeled token-averaged activations for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub layer: usize,
    /// `[n x d]` activation rows.
    pub rows: Tensor,
    /// One label per row; 1 = malicious.
    pub labels: Vec<u8>,
    /// Free-form provenance tag (model id, corpus id).
    pub provenance: String,
}

impl ActivationSet {
    pub fn new(layer: usize, rows: Tensor, labels: Vec<u8>, provenance: String) -> Result<Self> {
        if rows.rows() != labels.len() {
            return Err(Error::Data(format!(
                "activation set: {} rows vs {} labels",
                rows.rows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("activation set: labels must be 0/1".into()));
        }
        Ok(Self { layer, rows, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let malicious = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - malicious, malicious)
    }

    /// Rows with the given label, as a new set.
    pub fn filter_label(&self, label: u8) -> ActivationSet {
        let keep: Vec<usize> =
            (0..self.len()).filter(|&i| self.labels[i] == label).collect();
        self.subset(&keep)
    }

    pub fn subset(&self, indices: &[usize]) -> ActivationSet {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.rows.row(i));
            labels.push(self.labels[i]);
        }
        ActivationSet {
            layer: self.layer,
            rows: Tensor::new(vec![indices.len().max(1), d], if indices.is_empty() {
                vec![0.0; d]
            } else {
                data
            })
            .expect("subset shape"),
            labels,
            provenance: self.provenance.clone(),
        }
    }
}

/// Training hyperparameters and convergence record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeMeta {
    pub l1_strength: f64,
    pub iterations: usize,
    pub final_objective: f64,
    pub held_out_accuracy: Option<f64>,
    pub converged: bool,
}

/// Trained probe for one layer: margin = `w'h + b`, positive = malicious.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeParams {
    pub layer: usize,
    pub w: Vec<f64>,
    pub b: f64,
    pub meta: ProbeMeta,
}

impl ProbeParams {
    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SlrOptions {
    pub l1_strength: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Z-score features before fitting (off by default: the probe must be
    /// evaluated on quantized activations in the same coordinate system).
    pub standardize: bool,
}

impl Default for SlrOptions {
    fn default() -> Self {
        Self { l1_strength: 0.01, max_iters: 5000, tol: 1e-8, standardize: false }
    }
}

/// Decision function `w'h + b`.
pub fn slr_decision(probe: &ProbeParams, h: &[f64]) -> Result<f64> {
    if h.len() != probe.w.len() {
        return Err(Error::Shape(format!(
            "slr_decision: feature dim {} vs probe dim {}",
            h.len(),
            probe.w.len()
        )));
    }
    Ok(probe.w.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + probe.b)
}

/// Fraction of rows whose predicted class matches the label. A margin of
/// exactly zero classifies as benign.
pub fn slr_accuracy(probe: &ProbeParams, data: &ActivationSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("slr_accuracy: empty data".into()));
    }
    let mut hits = 0usize;
    for i in 0..data.len() {
        let margin = slr_decision(probe, data.rows.row(i))?;
        let predicted = u8::from(margin > 0.0);
        if predicted == data.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mean logistic loss plus `l1 * ||w||_1`.
fn objective(w: &[f64], b: f64, data: &ActivationSet, l1: f64) -> f64 {
    let n = data.len() as f64;
    let mut loss = 0.0;
    for i in 0..data.len() {
        let margin: f64 = data.rows.row(i).iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + b;
        let signed = if data.labels[i] == 1 { margin } else { -margin };
        loss += crate::tape::softplus_neg(signed);
    }
    loss / n + l1 * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// Gradient of the mean logistic loss (without the L1 term).
fn logistic_grad(w: &[f64], b: f64, data: &ActivationSet) -> (Vec<f64>, f64) {
    let d = data.dim();
    let n = data.len() as f64;
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    for i in 0..data.len() {
        let row = data.rows.row(i);
        let margin: f64 = row.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + b;
        let y = f64::from(data.labels[i]);
        // d/dmargin of softplus(-t*margin) summed over classes = sigma(margin) - y
        let coeff = sigmoid(margin) - y;
        for j in 0..d {
            gw[j] += coeff * row[j];
        }
        gb += coeff;
    }
    for g in &mut gw {
        *g /= n;
    }
    (gw, gb / n)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Proximal-gradient (ISTA) training with backtracking halving.
///
/// Requires both classes present. The held-out accuracy in the returned
/// metadata comes from a deterministic stratified 80/20 split of `data`.
pub fn train_slr(data: &ActivationSet, opts: &SlrOptions) -> Result<ProbeParams> {
    if opts.l1_strength < 0.0 {
        return Err(Error::Param("l1_strength must be non-negative".into()));
    }
    let (benign, malicious) = data.class_counts();
    if benign == 0 || malicious == 0 {
        return Err(Error::Data(format!(
            "train_slr needs both classes, got {benign} benign / {malicious} malicious"
        )));
    }
    let (train, test) = stratified_split(data, 0.8);
    let mut fit_data = &train;
    if train.class_counts().0 == 0 || train.class_counts().1 == 0 {
        fit_data = data;
    }

    let (mean, std) = feature_stats(fit_data);
    let prepared;
    let fit: &ActivationSet = if opts.standardize {
        prepared = standardize(fit_data, &mean, &std);
        &prepared
    } else {
        fit_data
    };

    let d = fit.dim();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut eta = 1.0;
    let mut obj = objective(&w, b, fit, opts.l1_strength);
    let mut iterations = 0;
    let mut converged = false;

    for it in 0..opts.max_iters {
        iterations = it + 1;
        let (gw, gb) = logistic_grad(&w, b, fit);
        // Backtrack until the proximal step does not increase the objective.
        let mut stepped = false;
        for _ in 0..60 {
            let cand_w: Vec<f64> = w
                .iter()
                .zip(&gw)
                .map(|(wi, gi)| soft_threshold(wi - eta * gi, eta * opts.l1_strength))
                .collect();
            let cand_b = b - eta * gb;
            let cand_obj = objective(&cand_w, cand_b, fit, opts.l1_strength);
            if cand_obj <= obj {
                let decrease = obj - cand_obj;
                w = cand_w;
                b = cand_b;
                obj = cand_obj;
                stepped = true;
                if decrease < opts.tol {
                    converged = true;
                }
                break;
            }
            eta *= 0.5;
        }
        if !stepped {
            converged = true;
        }
        if converged {
            break;
        }
    }

    let (w, b) = if opts.standardize {
        // Fold the z-scoring back into the raw coordinate system.
        let mut raw_w = vec![0.0; d];
        let mut raw_b = b;
        for j in 0..d {
            raw_w[j] = w[j] / std[j];
            raw_b -= w[j] * mean[j] / std[j];
        }
        (raw_w, raw_b)
    } else {
        (w, b)
    };

    let mut probe = ProbeParams {
        layer: data.layer,
        w,
        b,
        meta: ProbeMeta {
            l1_strength: opts.l1_strength,
            iterations,
            final_objective: obj,
            held_out_accuracy: None,
            converged,
        },
    };
    if !test.is_empty() {
        probe.meta.held_out_accuracy = Some(slr_accuracy(&probe, &test)?);
    }
    Ok(probe)
}

/// Deterministic stratified split: the first `frac` of each class (in row
/// order) trains, the rest evaluates.
fn stratified_split(data: &ActivationSet, frac: f64) -> (ActivationSet, ActivationSet) {
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for label in [0u8, 1u8] {
        let idx: Vec<usize> =
            (0..data.len()).filter(|&i| data.labels[i] == label).collect();
        let cut = ((idx.len() as f64) * frac).floor() as usize;
        train_idx.extend_from_slice(&idx[..cut]);
        test_idx.extend_from_slice(&idx[cut..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    (data.subset(&train_idx), data.subset(&test_idx))
}

fn feature_stats(data: &ActivationSet) -> (Vec<f64>, Vec<f64>) {
    let d = data.dim();
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for i in 0..data.len() {
        for (m, x) in mean.iter_mut().zip(data.rows.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; d];
    for i in 0..data.len() {
        for j in 0..d {
            let c = data.rows.row(i)[j] - mean[j];
            std[j] += c * c;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt().max(1e-12);
    }
    (mean, std)
}

fn standardize(data: &ActivationSet, mean: &[f64], std: &[f64]) -> ActivationSet {
    let d = data.dim();
    let mut rows = data.rows.clone();
    for i in 0..data.len() {
        for j in 0..d {
            let v = &mut rows.data_mut()[i * d + j];
            *v = (*v - mean[j]) / std[j];
        }
    }
    ActivationSet { rows, ..data.clone() }
}
