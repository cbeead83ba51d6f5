//! Greedy averaged-perceptron BIO tagger.
//!
//! Trained on agnostic-projected records it acts as the domain-agnostic
//! parser; trained on domain-specific records it is the fully supervised
//! baseline. The label set decides which.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{project_frame, Record};
use crate::error::{Error, Result};
use crate::ontology::{AgnosticLabel, Frame, OntologyMap, Span, Utterance, AGNOSTIC_DOMAIN};

pub const OUTSIDE: usize = 0;
const BOS: &str = "<s>";
const EOS: &str = "</s>";

fn b_tag(label: usize) -> usize {
    1 + 2 * label
}

fn i_tag(label: usize) -> usize {
    2 + 2 * label
}

/// Label index of a B/I tag; `None` for O.
pub fn tag_label(tag: usize) -> Option<usize> {
    (tag != OUTSIDE).then(|| (tag - 1) / 2)
}

pub fn is_begin(tag: usize) -> bool {
    tag != OUTSIDE && tag % 2 == 1
}

/// `O` plus `B-x`/`I-x` for each label, `SL:` prefix dropped.
pub fn tag_names(labels: &[String]) -> Vec<String> {
    let mut names = vec!["O".to_string()];
    for l in labels {
        let short = l.strip_prefix("SL:").unwrap_or(l);
        names.push(format!("B-{short}"));
        names.push(format!("I-{short}"));
    }
    names
}

fn shape(word: &str) -> String {
    let mut out = String::new();
    let mut last = None;
    for c in word.chars() {
        let s = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_ascii_digit() {
            'd'
        } else {
            c
        };
        if last != Some(s) {
            out.push(s);
            last = Some(s);
        }
    }
    out
}

/// Features for token `i` given the previously predicted tag name.
pub fn featurize(tokens: &[String], i: usize, prev_tag: &str) -> Vec<String> {
    let word = &tokens[i];
    let lower = word.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut f = Vec::with_capacity(16);
    f.push("bias".to_string());
    f.push(format!("w={lower}"));
    f.push(format!("shape={}", shape(word)));
    for n in 1..=3.min(chars.len()) {
        f.push(format!("p{n}={}", chars[..n].iter().collect::<String>()));
        f.push(format!("s{n}={}", chars[chars.len() - n..].iter().collect::<String>()));
    }
    let prev = if i == 0 {
        BOS.to_string()
    } else {
        tokens[i - 1].to_lowercase()
    };
    let next = tokens
        .get(i + 1)
        .map(|t| t.to_lowercase())
        .unwrap_or_else(|| EOS.to_string());
    f.push(format!("prev_w={prev}"));
    f.push(format!("next_w={next}"));
    f.push(format!("prev_t={prev_tag}"));
    f.push(format!("prev_t+w={prev_tag}|{lower}"));
    let digit = !chars.is_empty() && chars.iter().all(|c| c.is_ascii_digit());
    f.push(format!("isdigit={digit}"));
    f
}

/// Encodes slot spans as BIO tag indices over `labels`.
pub fn bio_encode(frame: &Frame, labels: &[String]) -> Result<Vec<usize>> {
    let mut tags = vec![OUTSIDE; frame.n_tokens()];
    for s in &frame.slots {
        let l = labels
            .iter()
            .position(|x| *x == s.label)
            .ok_or_else(|| Error::UnknownLabel(s.label.clone()))?;
        tags[s.start] = b_tag(l);
        for t in &mut tags[s.start + 1..s.end] {
            *t = i_tag(l);
        }
    }
    Ok(tags)
}

/// Turns an `I-x` that does not continue an `x` span into `B-x`.
pub fn repair(tags: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev = OUTSIDE;
    for &t in tags {
        let fixed = if t != OUTSIDE && !is_begin(t) && tag_label(prev) != tag_label(t) {
            t - 1
        } else {
            t
        };
        out.push(fixed);
        prev = fixed;
    }
    out
}

/// Repaired BIO tags → `(start, end, label index)` spans.
pub fn bio_decode(tags: &[usize]) -> Vec<(usize, usize, usize)> {
    let tags = repair(tags);
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        if t == OUTSIDE || is_begin(t) {
            if let Some((s, l)) = open.take() {
                spans.push((s, i, l));
            }
        }
        if is_begin(t) {
            open = Some((i, tag_label(t).expect("B tag has a label")));
        }
    }
    if let Some((s, l)) = open {
        spans.push((s, tags.len(), l));
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig { epochs: 5, seed: 0 }
    }
}

/// A trained tagger. `weights` holds the averaged per-tag weights of each
/// feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    pub labels: Vec<String>,
    pub weights: HashMap<String, Vec<f64>>,
    pub config: TaggerConfig,
}

/// One training sentence: tokens and gold tag indices.
pub type TaggedSentence = (Vec<String>, Vec<usize>);

struct Trainer {
    n_tags: usize,
    weights: HashMap<String, Vec<f64>>,
    totals: HashMap<String, Vec<f64>>,
    stamps: HashMap<String, Vec<u64>>,
    step: u64,
}

impl Trainer {
    fn new(n_tags: usize) -> Trainer {
        Trainer {
            n_tags,
            weights: HashMap::new(),
            totals: HashMap::new(),
            stamps: HashMap::new(),
            step: 0,
        }
    }

    fn bump(&mut self, feat: &str, tag: usize, delta: f64) {
        let n = self.n_tags;
        let w = self.weights.entry(feat.to_string()).or_insert_with(|| vec![0.0; n]);
        let tot = self.totals.entry(feat.to_string()).or_insert_with(|| vec![0.0; n]);
        let st = self.stamps.entry(feat.to_string()).or_insert_with(|| vec![0; n]);
        tot[tag] += (self.step - st[tag]) as f64 * w[tag];
        st[tag] = self.step;
        w[tag] += delta;
    }

    fn update(&mut self, feats: &[String], truth: usize, guess: usize) {
        if truth != guess {
            for f in feats {
                self.bump(f, truth, 1.0);
                self.bump(f, guess, -1.0);
            }
        }
        self.step += 1;
    }

    fn averaged(mut self) -> HashMap<String, Vec<f64>> {
        let step = self.step.max(1) as f64;
        let mut out = HashMap::with_capacity(self.weights.len());
        for (feat, w) in self.weights.drain() {
            let tot = &self.totals[&feat];
            let st = &self.stamps[&feat];
            let avg: Vec<f64> = (0..self.n_tags)
                .map(|t| (tot[t] + (self.step - st[t]) as f64 * w[t]) / step)
                .collect();
            if avg.iter().any(|v| *v != 0.0) {
                out.insert(feat, avg);
            }
        }
        out
    }
}

fn best_tag(weights: &HashMap<String, Vec<f64>>, feats: &[String], n_tags: usize) -> usize {
    let mut scores = vec![0.0; n_tags];
    for f in feats {
        if let Some(w) = weights.get(f) {
            for (s, x) in scores.iter_mut().zip(w) {
                *s += x;
            }
        }
    }
    let mut best = 0;
    for t in 1..n_tags {
        if scores[t] > scores[best] {
            best = t;
        }
    }
    best
}

/// Averaged perceptron over `sentences`, shuffled each epoch with a seeded
/// generator. Decoding during training is greedy with predicted history.
pub fn train_tagger(
    sentences: &[TaggedSentence],
    labels: Vec<String>,
    cfg: TaggerConfig,
) -> Result<TaggerModel> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be >= 1".into()));
    }
    if sentences.iter().all(|(toks, _)| toks.is_empty()) {
        return Err(Error::EmptyTrainingSet);
    }
    let names = tag_names(&labels);
    let n_tags = names.len();
    let mut trainer = Trainer::new(n_tags);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &s in &order {
            let (tokens, gold) = &sentences[s];
            let mut prev = OUTSIDE;
            for i in 0..tokens.len() {
                let feats = featurize(tokens, i, &names[prev]);
                let guess = best_tag(&trainer.weights, &feats, n_tags);
                trainer.update(&feats, gold[i], guess);
                prev = guess;
            }
        }
    }
    Ok(TaggerModel {
        labels,
        weights: trainer.averaged(),
        config: cfg,
    })
}

/// Trains the agnostic parser on already-projected records.
pub fn train_agnostic_tagger(projected: &[Record], cfg: TaggerConfig) -> Result<TaggerModel> {
    let labels: Vec<String> = AgnosticLabel::SLOTS
        .iter()
        .map(|l| l.as_str().to_string())
        .collect();
    let sentences = projected
        .iter()
        .map(|r| Ok((r.utterance.tokens.clone(), bio_encode(&r.frame, &labels)?)))
        .collect::<Result<Vec<_>>>()?;
    train_tagger(&sentences, labels, cfg)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    labels: Vec<String>,
    tags: Vec<String>,
    epochs: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct WeightLine {
    feature: String,
    tag: String,
    weight: f64,
}

impl TaggerModel {
    pub fn tags(&self) -> Vec<String> {
        tag_names(&self.labels)
    }

    pub fn predict_tags(&self, tokens: &[String]) -> Vec<usize> {
        let names = self.tags();
        let mut out = Vec::with_capacity(tokens.len());
        let mut prev = OUTSIDE;
        for i in 0..tokens.len() {
            let feats = featurize(tokens, i, &names[prev]);
            prev = best_tag(&self.weights, &feats, names.len());
            out.push(prev);
        }
        out
    }

    /// Greedy decode into a frame with `intent` spanning the utterance.
    pub fn tag_frame(&self, utterance: &Utterance, domain: &str, intent: &str) -> Frame {
        let spans = bio_decode(&self.predict_tags(&utterance.tokens))
            .into_iter()
            .map(|(s, e, l)| Span::new(s, e, self.labels[l].clone()))
            .collect();
        Frame::new(domain, intent, utterance.len(), spans).expect("decoded spans are valid")
    }

    /// The agnostic frame F_A for `utterance`.
    pub fn tag(&self, utterance: &Utterance) -> Frame {
        self.tag_frame(utterance, AGNOSTIC_DOMAIN, AgnosticLabel::Intent.as_str())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let tags = self.tags();
        let header = ModelHeader {
            labels: self.labels.clone(),
            tags: tags.clone(),
            epochs: self.config.epochs,
            seed: self.config.seed,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        let mut feats: Vec<&String> = self.weights.keys().collect();
        feats.sort();
        for f in feats {
            for (t, weight) in self.weights[f].iter().enumerate() {
                if *weight != 0.0 {
                    let line = WeightLine {
                        feature: f.clone(),
                        tag: tags[t].clone(),
                        weight: *weight,
                    };
                    writeln!(w, "{}", serde_json::to_string(&line)?)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<TaggerModel> {
        let mut lines = r.lines();
        let header: ModelHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::SchemaError("empty tagger model".into())),
        };
        let tags = tag_names(&header.labels);
        if tags != header.tags {
            return Err(Error::SchemaError("tag set does not match labels".into()));
        }
        let mut weights: HashMap<String, Vec<f64>> = HashMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let wl: WeightLine = serde_json::from_str(&line)?;
            let t = tags
                .iter()
                .position(|x| *x == wl.tag)
                .ok_or_else(|| Error::SchemaError(format!("unknown tag {}", wl.tag)))?;
            weights
                .entry(wl.feature)
                .or_insert_with(|| vec![0.0; tags.len()])[t] = wl.weight;
        }
        Ok(TaggerModel {
            labels: header.labels,
            weights,
            config: TaggerConfig {
                epochs: header.epochs,
                seed: header.seed,
            },
        })
    }
}

/// The gold agnostic frame: ψ applied to the record's own annotation.
pub fn golden_parse(record: &Record, map: &OntologyMap) -> Result<Frame> {
    project_frame(&record.frame, map)
}
