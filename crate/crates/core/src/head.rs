//! The per-domain classification head: a softmax layer over frozen sentence
//! embeddings, trained by full-batch gradient descent from zero.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 200,
            l2: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step size 1.0 for 1000 epochs. Used by the evaluation harness.
    pub fn converged() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            epochs: 1000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig("l2 must be >= 0".into()));
        }
        Ok(())
    }
}

/// Trained head parameters. Row `i` of `weights` scores `labels[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub labels: Vec<String>,
    pub dim: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub provider_fingerprint: String,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Head {
    pub fn zeros(labels: Vec<String>, dim: usize, provider_fingerprint: String) -> Head {
        let n = labels.len();
        Head {
            labels,
            dim,
            weights: vec![vec![0.0; dim]; n],
            bias: vec![0.0; n],
            provider_fingerprint,
        }
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    pub fn proba_embedded(&self, x: &EmbeddingVector) -> Result<Vec<f64>> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.dim(),
            });
        }
        Ok(softmax(&self.logits(x.values())))
    }

    /// `P(label | text)` for every label, in `self.labels` order.
    pub fn predict_proba(&self, text: &str, provider: &dyn Embedder) -> Result<Vec<f64>> {
        self.check_provider(provider)?;
        self.proba_embedded(&provider.embed(text)?)
    }

    pub fn check_provider(&self, provider: &dyn Embedder) -> Result<()> {
        let fp = provider.fingerprint();
        if fp != self.provider_fingerprint {
            return Err(Error::ProviderMismatch {
                expected: self.provider_fingerprint.clone(),
                actual: fp,
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.bias.iter().all(|b| b.is_finite())
            && self.weights.iter().flatten().all(|w| w.is_finite())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("head serializes")
    }

    pub fn from_json(json: &str) -> Result<Head> {
        let head: Head = serde_json::from_str(json)?;
        if head.weights.len() != head.labels.len()
            || head.bias.len() != head.labels.len()
            || head.weights.iter().any(|r| r.len() != head.dim)
        {
            return Err(Error::SchemaError("head shape does not match its labels".into()));
        }
        if !head.is_finite() {
            return Err(Error::SchemaError("head has non-finite parameters".into()));
        }
        Ok(head)
    }
}

/// Gradient of the regularized objective, shaped like the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Mean cross-entropy over `batch` plus `(l2/2)·‖W‖²` (bias unregularized),
/// and its gradient.
pub fn loss_and_grad(head: &Head, batch: &[(EmbeddingVector, usize)], l2: f64) -> (f64, Gradient) {
    let n_labels = head.labels.len();
    let mut gw = vec![vec![0.0; head.dim]; n_labels];
    let mut gb = vec![0.0; n_labels];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (x, y) in batch {
        let p = softmax(&head.logits(x.values()));
        loss -= p[*y].ln();
        for (k, pk) in p.iter().enumerate() {
            let err = (pk - if k == *y { 1.0 } else { 0.0 }) * scale;
            gb[k] += err;
            if err != 0.0 {
                for (g, xi) in gw[k].iter_mut().zip(x.values()) {
                    *g += err * xi;
                }
            }
        }
    }
    loss *= scale;
    let mut sq = 0.0;
    for (grow, wrow) in gw.iter_mut().zip(&head.weights) {
        for (g, w) in grow.iter_mut().zip(wrow) {
            *g += l2 * w;
            sq += w * w;
        }
    }
    loss += 0.5 * l2 * sq;
    (loss, Gradient { weights: gw, bias: gb })
}

fn objective(head: &Head, batch: &[(EmbeddingVector, usize)], l2: f64) -> f64 {
    loss_and_grad(head, batch, l2).0
}

/// Gradient descent on already-embedded data. Returns the head and the loss
/// before every step plus the final loss (`epochs + 1` values).
pub fn fit_embedded(
    labels: Vec<String>,
    batch: &[(EmbeddingVector, usize)],
    dim: usize,
    cfg: &TrainConfig,
    provider_fingerprint: String,
) -> Result<(Head, Vec<f64>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut head = Head::zeros(labels, dim, provider_fingerprint);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (loss, g) = loss_and_grad(&head, batch, cfg.l2);
        trace.push(loss);
        for (wrow, grow) in head.weights.iter_mut().zip(&g.weights) {
            for (w, gv) in wrow.iter_mut().zip(grow) {
                *w -= cfg.learning_rate * gv;
            }
        }
        for (b, gv) in head.bias.iter_mut().zip(&g.bias) {
            *b -= cfg.learning_rate * gv;
        }
    }
    trace.push(objective(&head, batch, cfg.l2));
    if !head.is_finite() {
        return Err(Error::DegenerateData("training diverged".into()));
    }
    Ok((head, trace))
}

/// Sorted examples, the label list, and each example's label index.
fn normalize_examples(examples: &[(String, String)]) -> Result<(Vec<(String, String)>, Vec<String>)> {
    let mut sorted: Vec<(String, String)> = examples
        .iter()
        .map(|(text, label)| (label.clone(), text.clone()))
        .collect();
    sorted.sort();
    if let Some((label, _)) = sorted.iter().find(|(_, t)| t.trim().is_empty()) {
        return Err(Error::DegenerateData(format!("empty example text for {label}")));
    }
    let labels: Vec<String> = sorted
        .iter()
        .map(|(l, _)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "need examples for at least 2 labels, got {}",
            labels.len()
        )));
    }
    Ok((sorted, labels))
}

/// Trains a head on `(text, label)` examples. Examples are sorted by
/// `(label, text)` first so input order never matters.
pub fn train_head(examples: &[(String, String)], cfg: &TrainConfig, provider: &dyn Embedder) -> Result<Head> {
    Ok(train_head_traced(examples, cfg, provider)?.0)
}

pub fn train_head_traced(
    examples: &[(String, String)],
    cfg: &TrainConfig,
    provider: &dyn Embedder,
) -> Result<(Head, Vec<f64>)> {
    cfg.validate()?;
    let (sorted, labels) = normalize_examples(examples)?;
    let texts: Vec<&str> = sorted.iter().map(|(_, t)| t.as_str()).collect();
    let vectors = provider.embed_batch(&texts)?;
    let batch: Vec<(EmbeddingVector, usize)> = vectors
        .into_iter()
        .zip(&sorted)
        .map(|(v, (l, _))| (v, labels.binary_search(l).expect("label collected")))
        .collect();
    fit_embedded(labels, &batch, provider.dim(), cfg, provider.fingerprint())
}

/// Largest relative error between the analytic gradient and central finite
/// differences (step 1e-5) over `n_coords` randomly drawn parameters.
pub fn gradient_check(
    head: &Head,
    batch: &[(EmbeddingVector, usize)],
    l2: f64,
    n_coords: usize,
    seed: u64,
) -> f64 {
    const STEP: f64 = 1e-5;
    let (_, g) = loss_and_grad(head, batch, l2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_labels = head.labels.len();
    let mut worst: f64 = 0.0;
    for _ in 0..n_coords.max(1) {
        let row = rng.random_range(0..n_labels);
        // column `dim` stands for the bias
        let col = rng.random_range(0..=head.dim);
        let mut plus = head.clone();
        let mut minus = head.clone();
        let analytic = if col == head.dim {
            plus.bias[row] += STEP;
            minus.bias[row] -= STEP;
            g.bias[row]
        } else {
            plus.weights[row][col] += STEP;
            minus.weights[row][col] -= STEP;
            g.weights[row][col]
        };
        let numeric = (objective(&plus, batch, l2) - objective(&minus, batch, l2)) / (2.0 * STEP);
        let denom = analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}
