//! Leave-one-domain-out evaluation: simple-label adaptation to an unseen
//! domain, the baselines, and the ranking metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{project_agnostic, sample_simple_labels, Corpus, Record, Split, TOPV2_DOMAINS};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::head::{train_head, Head, TrainConfig};
use crate::matcher::{rank, CosineScorer, FrameTemplate, HeadScorer, LabelScorer, MatchResult, TypeConstraint};
use crate::ontology::{AgnosticLabel, Frame, OntologyMap, Span, Utterance};
use crate::registry::build_inventory_from_corpus;
use crate::tagger::{bio_encode, golden_parse, train_agnostic_tagger, train_tagger, TaggerConfig, TaggerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Standard,
    GoldenParse,
    RecallAt3,
    IntentAcc,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::Standard,
        Setting::GoldenParse,
        Setting::RecallAt3,
        Setting::IntentAcc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Standard => "standard",
            Setting::GoldenParse => "golden_parse",
            Setting::RecallAt3 => "recall_at_3",
            Setting::IntentAcc => "intent_acc",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Setting::Standard => "Standard",
            Setting::GoldenParse => "Golden Parse",
            Setting::RecallAt3 => "Recall@3",
            Setting::IntentAcc => "Intent Acc.",
        }
    }

    /// The metric this setting reports.
    pub fn headline(self, m: &MetricSet) -> f64 {
        match self {
            Setting::Standard | Setting::GoldenParse => m.frame_accuracy,
            Setting::RecallAt3 => m.recall_at_3,
            Setting::IntentAcc => m.intent_accuracy,
        }
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Setting> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Setting::ALL
            .into_iter()
            .find(|x| x.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown setting {s:?}")))
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Proposed,
    MajorityVote,
    WoHead,
    WoHeadType,
    FullySupervised,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::Proposed,
        Baseline::MajorityVote,
        Baseline::WoHead,
        Baseline::WoHeadType,
        Baseline::FullySupervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Proposed => "proposed",
            Baseline::MajorityVote => "majority_vote",
            Baseline::WoHead => "wo_head",
            Baseline::WoHeadType => "wo_head_type",
            Baseline::FullySupervised => "fully_supervised",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Baseline> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Baseline::ALL
            .into_iter()
            .find(|x| x.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown baseline {s:?}")))
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub examples_per_label: usize,
    pub seeds: Vec<u64>,
    pub setting: Setting,
    pub baseline: Baseline,
    pub domains: Vec<String>,
    pub tagger_epochs: usize,
    pub head: TrainConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            examples_per_label: 50,
            seeds: vec![1, 2, 3],
            setting: Setting::Standard,
            baseline: Baseline::Proposed,
            domains: TOPV2_DOMAINS.iter().map(|d| d.to_string()).collect(),
            tagger_epochs: TaggerConfig::default().epochs,
            head: TrainConfig::converged(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.examples_per_label == 0 {
            return Err(Error::InvalidConfig("examples_per_label must be >= 1".into()));
        }
        if self.domains.len() < 2 {
            return Err(Error::InvalidConfig("leave-one-out needs at least 2 domains".into()));
        }
        if self.tagger_epochs == 0 {
            return Err(Error::InvalidConfig("tagger_epochs must be >= 1".into()));
        }
        self.head.validate()
    }
}

/// Aggregate metrics of one run, or a mean/std over runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub frame_accuracy: f64,
    pub recall_at_1: f64,
    pub recall_at_3: f64,
    pub recall_all: f64,
    pub mrr: f64,
    pub intent_accuracy: f64,
    pub candidate_reduction: f64,
}

impl MetricSet {
    const NAMES: [&'static str; 7] = [
        "frame_accuracy",
        "recall_at_1",
        "recall_at_3",
        "recall_all",
        "mrr",
        "intent_accuracy",
        "candidate_reduction",
    ];

    fn values(&self) -> [f64; 7] {
        [
            self.frame_accuracy,
            self.recall_at_1,
            self.recall_at_3,
            self.recall_all,
            self.mrr,
            self.intent_accuracy,
            self.candidate_reduction,
        ]
    }

    fn from_values(v: [f64; 7]) -> MetricSet {
        MetricSet {
            frame_accuracy: v[0],
            recall_at_1: v[1],
            recall_at_3: v[2],
            recall_all: v[3],
            mrr: v[4],
            intent_accuracy: v[5],
            candidate_reduction: v[6],
        }
    }

    /// The ranking identities every run must satisfy.
    pub fn check_identities(&self) -> std::result::Result<(), String> {
        let eps = 1e-12;
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.recall_at_3 + eps < self.recall_at_1 {
            return Err(format!("recall@3 {} < recall@1 {}", self.recall_at_3, self.recall_at_1));
        }
        if self.recall_all + eps < self.recall_at_3 {
            return Err(format!("recall@all {} < recall@3 {}", self.recall_all, self.recall_at_3));
        }
        if self.mrr + eps < self.recall_at_1 {
            return Err(format!("mrr {} < recall@1 {}", self.mrr, self.recall_at_1));
        }
        if self.mrr > self.recall_all + eps {
            return Err(format!("mrr {} > recall@all {}", self.mrr, self.recall_all));
        }
        Ok(())
    }
}

/// Why a prediction missed, checked in this order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    /// Nothing in the inventory passed the filter.
    pub no_parse: usize,
    /// The agnostic parse found a different number of slots.
    pub wrong_slot_count: usize,
    /// Right number of slots, but spans or agnostic types differ.
    pub wrong_agnostic_label: usize,
    pub wrong_intent: usize,
    pub wrong_slot_label: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.no_parse
            + self.wrong_slot_count
            + self.wrong_agnostic_label
            + self.wrong_intent
            + self.wrong_slot_label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: MetricSet,
    pub n_test: usize,
    /// Returned templates whose agnostic-type multiset differs from the query.
    pub type_violations: usize,
    pub errors: ErrorCounts,
    pub underpopulated_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub inventory_size: usize,
    pub runs: Vec<SeedRun>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: MetricSet,
    pub std: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub domains: Vec<DomainReport>,
    /// Per-seed means across domains, then mean/std over seeds.
    pub average: Summary,
    pub mean_inventory_size: f64,
}

fn mean_std(xs: &[MetricSet]) -> Summary {
    let n = xs.len() as f64;
    let mut mean = [0.0; 7];
    for m in xs {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n;
    }
    let mut std = [0.0; 7];
    if xs.len() > 1 {
        for m in xs {
            for ((acc, v), mu) in std.iter_mut().zip(m.values()).zip(mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        for v in &mut std {
            *v = (*v / (n - 1.0)).sqrt();
        }
    }
    Summary {
        mean: MetricSet::from_values(mean),
        std: MetricSet::from_values(std),
    }
}

fn check_aligned(predictions: usize, golds: usize) -> Result<()> {
    if predictions != golds || golds == 0 {
        return Err(Error::LengthMismatch { predictions, golds });
    }
    Ok(())
}

/// Exact match on intent and on every slot's span and label.
pub fn frame_matches(pred: &Frame, gold: &Frame) -> bool {
    pred.intent.label == gold.intent.label && pred.slots == gold.slots
}

/// Fraction of predictions that equal their gold frame; `None` is a miss.
pub fn metric_frame_accuracy(predictions: &[Option<Frame>], golds: &[Frame]) -> Result<f64> {
    check_aligned(predictions.len(), golds.len())?;
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref().is_some_and(|p| frame_matches(p, g)))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

fn gold_ranks(results: &[Option<MatchResult>], golds: &[FrameTemplate]) -> Result<Vec<Option<usize>>> {
    check_aligned(results.len(), golds.len())?;
    Ok(results
        .iter()
        .zip(golds)
        .map(|(r, g)| r.as_ref().and_then(|r| r.rank_of(g)))
        .collect())
}

fn recall_from_ranks(ranks: &[Option<usize>], k: usize) -> f64 {
    ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / ranks.len() as f64
}

fn mrr_from_ranks(ranks: &[Option<usize>]) -> f64 {
    ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / ranks.len() as f64
}

/// Fraction of queries whose gold template is among the first `k` ranked.
pub fn metric_recall_at_k(results: &[Option<MatchResult>], golds: &[FrameTemplate], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    Ok(recall_from_ranks(&gold_ranks(results, golds)?, k))
}

/// Mean reciprocal rank of the gold template; 0 when it is not ranked.
pub fn metric_mrr(results: &[Option<MatchResult>], golds: &[FrameTemplate]) -> Result<f64> {
    Ok(mrr_from_ranks(&gold_ranks(results, golds)?))
}

/// Template frequencies in a domain's full train split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MajorityStats {
    pub counts: BTreeMap<FrameTemplate, usize>,
}

impl MajorityStats {
    pub fn from_records<'a>(domain: &str, records: impl IntoIterator<Item = &'a Record>) -> MajorityStats {
        let mut counts = BTreeMap::new();
        for r in records {
            if r.domain == domain && r.split == Split::Train {
                *counts.entry(FrameTemplate::of_frame(&r.frame)).or_insert(0) += 1;
            }
        }
        MajorityStats { counts }
    }

    /// Templates of the given arity, most frequent first.
    pub fn ranked(&self, arity: usize) -> Vec<FrameTemplate> {
        let mut v: Vec<(&FrameTemplate, usize)> = self
            .counts
            .iter()
            .filter(|(t, _)| t.arity() == arity)
            .map(|(t, c)| (t, *c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.tie_break(b.0)));
        v.into_iter().map(|(t, _)| t.clone()).collect()
    }
}

/// The most frequent template with as many slots as the query.
pub fn baseline_majority_vote(query: &Frame, stats: &MajorityStats) -> Result<FrameTemplate> {
    stats
        .ranked(query.slots.len())
        .into_iter()
        .next()
        .ok_or(Error::NoEligibleFrame)
}

/// Ranking with nearest-example cosine scores instead of a trained head.
pub fn baseline_wo_head(
    query: &Frame,
    utterance: &Utterance,
    inventory: &[FrameTemplate],
    scorer: &CosineScorer<'_>,
    map: &OntologyMap,
) -> Result<MatchResult> {
    rank(query, inventory, scorer, utterance, map, TypeConstraint::Typed, None)
}

/// As [`baseline_wo_head`] with only slot counts checked.
pub fn baseline_wo_head_type(
    query: &Frame,
    utterance: &Utterance,
    inventory: &[FrameTemplate],
    scorer: &CosineScorer<'_>,
    map: &OntologyMap,
) -> Result<MatchResult> {
    rank(query, inventory, scorer, utterance, map, TypeConstraint::ArityOnly, None)
}

/// A tagger over the domain's own slot labels plus an utterance-level
/// intent head, both trained on the domain's full train split.
#[derive(Debug, Clone)]
pub struct FullySupervised {
    pub domain: String,
    pub tagger: TaggerModel,
    pub intent_head: Head,
}

impl FullySupervised {
    pub fn train(
        corpus: &Corpus,
        domain: &str,
        tagger_cfg: TaggerConfig,
        head_cfg: &TrainConfig,
        provider: &dyn Embedder,
    ) -> Result<FullySupervised> {
        let train: Vec<&Record> = corpus.select(domain, Split::Train).collect();
        if train.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let labels: Vec<String> = train
            .iter()
            .flat_map(|r| r.frame.slots.iter().map(|s| s.label.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let sentences = train
            .iter()
            .map(|r| Ok((r.utterance.tokens.clone(), bio_encode(&r.frame, &labels)?)))
            .collect::<Result<Vec<_>>>()?;
        let tagger = train_tagger(&sentences, labels, tagger_cfg)?;
        let pairs: Vec<(String, String)> = train
            .iter()
            .map(|r| (r.text(), r.frame.intent.label.clone()))
            .collect();
        let intent_head = train_head(&pairs, head_cfg, provider)?;
        Ok(FullySupervised {
            domain: domain.to_string(),
            tagger,
            intent_head,
        })
    }

    /// Intents by descending probability, each paired with the tagged slots.
    pub fn predict(&self, utterance: &Utterance, provider: &dyn Embedder) -> Result<Vec<(Frame, f64)>> {
        let p = self.intent_head.predict_proba(&utterance.text(), provider)?;
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| {
            p[b].total_cmp(&p[a])
                .then_with(|| self.intent_head.labels[a].cmp(&self.intent_head.labels[b]))
        });
        let tagged = self.tagger.tag_frame(utterance, &self.domain, "");
        Ok(order
            .into_iter()
            .map(|i| {
                let f = Frame {
                    intent: Span::new(0, utterance.len(), self.intent_head.labels[i].clone()),
                    ..tagged.clone()
                };
                (f, p[i])
            })
            .collect())
    }
}

/// Everything a run needs that does not depend on the seed.
struct DomainData<'a> {
    domain: &'a str,
    test: Vec<&'a Record>,
    inventory: Vec<FrameTemplate>,
    majority: MajorityStats,
    /// Agnostic projection of the other domains' train splits.
    transfer: Vec<Record>,
}

struct Outcome {
    prediction: Option<Frame>,
    /// 1-based rank of the gold template, if ranked.
    gold_rank: Option<usize>,
    top_intent: Option<String>,
    eligible: usize,
    type_violations: usize,
    query: Frame,
}

fn classify(outcome: &Outcome, gold: &Frame, gold_agnostic: &Frame, errors: &mut ErrorCounts) {
    let Some(pred) = &outcome.prediction else {
        errors.no_parse += 1;
        return;
    };
    if frame_matches(pred, gold) {
        return;
    }
    if outcome.query.slots.len() != gold.slots.len() {
        errors.wrong_slot_count += 1;
    } else if outcome.query.slots != gold_agnostic.slots {
        errors.wrong_agnostic_label += 1;
    } else if pred.intent.label != gold.intent.label {
        errors.wrong_intent += 1;
    } else {
        errors.wrong_slot_label += 1;
    }
}

fn type_violations(result: &MatchResult, map: &OntologyMap) -> Result<usize> {
    let mut q = result
        .query
        .slots
        .iter()
        .map(|s| s.label.parse())
        .collect::<Result<Vec<AgnosticLabel>>>()?;
    q.sort();
    let mut n = 0;
    for r in &result.ranked {
        if map.signature(r.template.slots.iter().map(String::as_str))? != q {
            n += 1;
        }
    }
    Ok(n)
}

fn run_one(
    data: &DomainData<'_>,
    corpus: &Corpus,
    cfg: &EvalConfig,
    seed: u64,
    map: &OntologyMap,
    provider: &dyn Embedder,
) -> Result<SeedRun> {
    let tagger_cfg = TaggerConfig {
        epochs: cfg.tagger_epochs,
        seed,
    };
    let golden = cfg.setting == Setting::GoldenParse;
    let mut underpopulated = 0;
    let inventory_size = data.inventory.len();

    enum Scoring<'s> {
        Ranked(Box<dyn LabelScorer + 's>, TypeConstraint),
        Majority,
        Supervised(FullySupervised),
    }
    let scoring = match cfg.baseline {
        Baseline::Proposed | Baseline::WoHead | Baseline::WoHeadType => {
            let labels = sample_simple_labels(corpus, data.domain, cfg.examples_per_label, seed);
            underpopulated = labels.warnings.len();
            match cfg.baseline {
                Baseline::Proposed => {
                    let head = train_head(&labels.pairs(), &cfg.head, provider)?;
                    Scoring::Ranked(Box::new(OwnedHeadScorer { head, provider }), TypeConstraint::Typed)
                }
                Baseline::WoHead => {
                    Scoring::Ranked(Box::new(CosineScorer::new(&labels, provider)?), TypeConstraint::Typed)
                }
                _ => Scoring::Ranked(
                    Box::new(CosineScorer::new(&labels, provider)?),
                    TypeConstraint::ArityOnly,
                ),
            }
        }
        Baseline::MajorityVote => Scoring::Majority,
        Baseline::FullySupervised => Scoring::Supervised(FullySupervised::train(
            corpus,
            data.domain,
            tagger_cfg,
            &cfg.head,
            provider,
        )?),
    };
    let dap = match (&scoring, golden) {
        (Scoring::Supervised(_), _) | (_, true) => None,
        _ => Some(train_agnostic_tagger(&data.transfer, tagger_cfg)?),
    };

    let mut errors = ErrorCounts::default();
    let mut violations = 0;
    let mut preds = Vec::with_capacity(data.test.len());
    let mut golds = Vec::with_capacity(data.test.len());
    let mut ranks = Vec::with_capacity(data.test.len());
    let mut intent_hits = 0usize;
    let mut reduction = 0.0;
    for r in &data.test {
        let gold_agnostic = golden_parse(r, map)?;
        let query = match &dap {
            Some(t) => t.tag(&r.utterance),
            None => gold_agnostic.clone(),
        };
        let gold_t = FrameTemplate::of_frame(&r.frame);
        let outcome = match &scoring {
            Scoring::Ranked(scorer, constraint) => {
                match rank(&query, &data.inventory, scorer.as_ref(), &r.utterance, map, *constraint, None) {
                    Ok(res) => Outcome {
                        prediction: Some(res.best().to_frame(&query)),
                        gold_rank: res.rank_of(&gold_t),
                        top_intent: Some(res.best().template.intent.clone()),
                        eligible: res.eligible,
                        type_violations: type_violations(&res, map)?,
                        query,
                    },
                    Err(Error::NoEligibleFrame) => Outcome {
                        prediction: None,
                        gold_rank: None,
                        top_intent: None,
                        eligible: 0,
                        type_violations: 0,
                        query,
                    },
                    Err(e) => return Err(e),
                }
            }
            Scoring::Majority => {
                let eligible = data
                    .inventory
                    .iter()
                    .filter(|t| t.arity() == query.slots.len())
                    .count();
                match baseline_majority_vote(&query, &data.majority) {
                    Ok(t) => {
                        let hit = t == gold_t;
                        // scored at template level: no span assignment
                        let prediction = if hit { r.frame.clone() } else { template_frame(&t, &query) };
                        Outcome {
                            prediction: Some(prediction),
                            gold_rank: hit.then_some(1),
                            top_intent: Some(t.intent.clone()),
                            eligible,
                            type_violations: 0,
                            query,
                        }
                    }
                    Err(Error::NoEligibleFrame) => Outcome {
                        prediction: None,
                        gold_rank: None,
                        top_intent: None,
                        eligible,
                        type_violations: 0,
                        query,
                    },
                    Err(e) => return Err(e),
                }
            }
            Scoring::Supervised(model) => {
                let ranked = model.predict(&r.utterance, provider)?;
                let gold_rank = ranked
                    .iter()
                    .position(|(f, _)| FrameTemplate::of_frame(f) == gold_t)
                    .map(|p| p + 1);
                let tagged = ranked[0].0.clone();
                Outcome {
                    top_intent: Some(tagged.intent.label.clone()),
                    prediction: Some(tagged.clone()),
                    gold_rank,
                    eligible: inventory_size,
                    type_violations: 0,
                    query: project_or_self(&tagged, map),
                }
            }
        };
        classify(&outcome, &r.frame, &gold_agnostic, &mut errors);
        violations += outcome.type_violations;
        if outcome.top_intent.as_deref() == Some(r.frame.intent.label.as_str()) {
            intent_hits += 1;
        }
        if inventory_size > 0 {
            reduction += 1.0 - outcome.eligible as f64 / inventory_size as f64;
        }
        ranks.push(outcome.gold_rank);
        preds.push(outcome.prediction);
        golds.push(r.frame.clone());
    }
    let n = data.test.len() as f64;
    let metrics = MetricSet {
        frame_accuracy: metric_frame_accuracy(&preds, &golds)?,
        recall_at_1: recall_from_ranks(&ranks, 1),
        recall_at_3: recall_from_ranks(&ranks, 3),
        recall_all: recall_from_ranks(&ranks, usize::MAX),
        mrr: mrr_from_ranks(&ranks),
        intent_accuracy: intent_hits as f64 / n,
        candidate_reduction: reduction / n,
    };
    Ok(SeedRun {
        seed,
        metrics,
        n_test: data.test.len(),
        type_violations: violations,
        errors,
        underpopulated_labels: underpopulated,
    })
}

/// The template's labels laid over the query spans by position. Only used
/// for misses, where the slot multiset or intent already differs from gold.
fn template_frame(t: &FrameTemplate, query: &Frame) -> Frame {
    let slots = query
        .slots
        .iter()
        .zip(&t.slots)
        .map(|(s, l)| Span::new(s.start, s.end, l.clone()))
        .collect();
    Frame {
        domain: t.domain.clone(),
        intent: Span::new(0, query.n_tokens(), t.intent.clone()),
        slots,
    }
}

fn project_or_self(frame: &Frame, map: &OntologyMap) -> Frame {
    crate::dataset::project_frame(frame, map).unwrap_or_else(|_| frame.clone())
}

struct OwnedHeadScorer<'p> {
    head: Head,
    provider: &'p dyn Embedder,
}

impl LabelScorer for OwnedHeadScorer<'_> {
    fn scores(&self, text: &str) -> Result<std::collections::HashMap<String, f64>> {
        HeadScorer::new(&self.head, self.provider)?.scores(text)
    }
}

/// Runs every (held-out domain, seed) pair and aggregates.
pub fn run_loo(cfg: &EvalConfig, corpus: &Corpus, map: &OntologyMap, provider: &dyn Embedder) -> Result<EvalReport> {
    cfg.validate()?;
    let present = corpus.domains();
    for d in &cfg.domains {
        if !present.contains(d.as_str()) {
            return Err(Error::MissingDomain(d.clone()));
        }
    }
    let data = cfg
        .domains
        .iter()
        .map(|d| {
            let test: Vec<&Record> = corpus.select(d, Split::Test).collect();
            if test.is_empty() {
                return Err(Error::MissingDomain(format!("{d} has no test split")));
            }
            let transfer = corpus
                .records
                .iter()
                .filter(|r| r.split == Split::Train && r.domain != *d && cfg.domains.contains(&r.domain))
                .map(|r| project_agnostic(r, map))
                .collect::<Result<Vec<_>>>()?;
            Ok(DomainData {
                domain: d,
                test,
                inventory: build_inventory_from_corpus(d, &corpus.records),
                majority: MajorityStats::from_records(d, &corpus.records),
                transfer,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, u64)> = (0..data.len())
        .flat_map(|i| cfg.seeds.iter().map(move |s| (i, *s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|(i, seed)| run_one(&data[*i], corpus, cfg, *seed, map, provider))
        .collect::<Result<Vec<_>>>()?;

    let mut domains = Vec::with_capacity(data.len());
    for (i, d) in data.iter().enumerate() {
        let runs: Vec<SeedRun> = runs[i * cfg.seeds.len()..(i + 1) * cfg.seeds.len()].to_vec();
        let s = mean_std(&runs.iter().map(|r| r.metrics).collect::<Vec<_>>());
        domains.push(DomainReport {
            domain: d.domain.to_string(),
            inventory_size: d.inventory.len(),
            runs,
            mean: s.mean,
            std: s.std,
        });
    }
    let per_seed: Vec<MetricSet> = (0..cfg.seeds.len())
        .map(|j| mean_std(&domains.iter().map(|d| d.runs[j].metrics).collect::<Vec<_>>()).mean)
        .collect();
    let mean_inventory_size =
        domains.iter().map(|d| d.inventory_size as f64).sum::<f64>() / domains.len() as f64;
    Ok(EvalReport {
        config: cfg.clone(),
        domains,
        average: mean_std(&per_seed),
        mean_inventory_size,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(json: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn type_violations(&self) -> usize {
        self.domains
            .iter()
            .flat_map(|d| &d.runs)
            .map(|r| r.type_violations)
            .sum()
    }

    /// One row per metric, one column per domain plus the average, values
    /// as percentages with the standard deviation over seeds.
    pub fn render_table(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "setting={} baseline={} examples_per_label={} seeds={:?}\n",
            c.setting, c.baseline, c.examples_per_label, c.seeds
        );
        let width = self.domains.iter().map(|d| d.domain.len()).max().unwrap_or(0).max(13);
        let _ = write!(out, "{:<16}", "");
        for d in &self.domains {
            let _ = write!(out, " {:>w$}", d.domain, w = width);
        }
        let _ = writeln!(out, " {:>w$}", "avg", w = width);
        let cell = |mean: f64, std: f64| format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * std);
        // indices into MetricSet::values()
        let headline = match c.setting {
            Setting::Standard | Setting::GoldenParse => 0,
            Setting::RecallAt3 => 2,
            Setting::IntentAcc => 5,
        };
        let mut rows = vec![(c.setting.title(), headline)];
        for row in [("Frame Acc.", 0), ("Recall@3", 2), ("Intent Acc.", 5), ("MRR", 4), ("Recall@all", 3), ("Cand. Red.", 6)] {
            if row.1 != headline {
                rows.push(row);
            }
        }
        for (name, i) in rows {
            let _ = write!(out, "{name:<16}");
            for d in &self.domains {
                let _ = write!(out, " {:>w$}", cell(d.mean.values()[i], d.std.values()[i]), w = width);
            }
            let avg = cell(self.average.mean.values()[i], self.average.std.values()[i]);
            let _ = writeln!(out, " {avg:>w$}", w = width);
        }
        out
    }

    pub const CSV_HEADER: &'static str = "baseline,setting,examples_per_label,domain,metric,mean,std";

    /// Long-format rows (no header) for plotting accuracy against the
    /// number of examples.
    pub fn csv_rows(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let mut emit = |domain: &str, s: &Summary| {
            for ((name, mean), std) in MetricSet::NAMES.iter().zip(s.mean.values()).zip(s.std.values()) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    c.baseline, c.setting, c.examples_per_label, domain, name, mean, std
                );
            }
        };
        for d in &self.domains {
            emit(
                &d.domain,
                &Summary {
                    mean: d.mean,
                    std: d.std,
                },
            );
        }
        emit("avg", &self.average);
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;
    use crate::matcher::{Assigned, Ranked};
    use crate::ontology::load_builtin_map;
    use crate::toy::{generate, ToyConfig, TOY_DOMAINS};

    fn tpl(intent: &str, slots: &[&str]) -> FrameTemplate {
        FrameTemplate::new("d", intent, slots.iter().map(|s| s.to_string()).collect())
    }

    fn result_with(order: &[FrameTemplate]) -> MatchResult {
        MatchResult {
            query: Frame::new("agnostic", "IN:INTENT", 1, vec![]).unwrap(),
            ranked: order
                .iter()
                .map(|t| Ranked {
                    template: t.clone(),
                    score: 0.5,
                    assignment: Vec::<Assigned>::new(),
                })
                .collect(),
            eligible: order.len(),
            inventory_size: order.len(),
        }
    }

    #[test]
    fn frame_accuracy_cases() {
        let g = Frame::new("d", "IN:A", 3, vec![Span::new(0, 1, "SL:X"), Span::new(1, 3, "SL:Y")]).unwrap();
        assert_eq!(metric_frame_accuracy(&[Some(g.clone())], &[g.clone()]).unwrap(), 1.0);
        let wrong = Frame::new("d", "IN:A", 3, vec![Span::new(0, 1, "SL:X"), Span::new(1, 3, "SL:Z")]).unwrap();
        assert_eq!(
            metric_frame_accuracy(&[Some(wrong), Some(g.clone())], &[g.clone(), g.clone()]).unwrap(),
            0.5
        );
        assert_eq!(metric_frame_accuracy(&[None], &[g.clone()]).unwrap(), 0.0);
        assert!(matches!(
            metric_frame_accuracy(&[], &[g.clone()]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(metric_frame_accuracy(&[], &[]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn ranking_metrics() {
        let (a, b, c, d) = (tpl("IN:A", &[]), tpl("IN:B", &[]), tpl("IN:C", &[]), tpl("IN:D", &[]));
        let results = vec![
            Some(result_with(&[a.clone(), b.clone()])),
            Some(result_with(&[a.clone(), b.clone(), c.clone()])),
            Some(result_with(&[a.clone(), b.clone(), c.clone(), d.clone()])),
        ];
        let golds = vec![a.clone(), b.clone(), d.clone()];
        let mrr = metric_mrr(&results, &golds).unwrap();
        assert!((mrr - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-15);
        assert!((metric_recall_at_k(&results, &golds, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((metric_recall_at_k(&results, &golds, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let golds3 = vec![a.clone(), c.clone(), c.clone()];
        assert_eq!(metric_recall_at_k(&results[1..], &golds3[1..], 3).unwrap(), 1.0);
        assert!(metric_recall_at_k(&results, &golds, 0).is_err());
        assert!(metric_mrr(&results, &golds[..2]).is_err());
        let none = vec![None];
        assert_eq!(metric_mrr(&none, &[a.clone()]).unwrap(), 0.0);
        let all_first = vec![Some(result_with(&[a.clone()])); 4];
        assert_eq!(metric_mrr(&all_first, &vec![a; 4]).unwrap(), 1.0);
    }

    #[test]
    fn majority_vote() {
        let mut stats = MajorityStats::default();
        let f1 = tpl("IN:A", &["SL:X", "SL:Y"]);
        let f2 = tpl("IN:B", &["SL:X", "SL:Y"]);
        stats.counts.insert(f1.clone(), 3);
        stats.counts.insert(f2.clone(), 1);
        let q2 = Frame::new("agnostic", "IN:INTENT", 2, vec![Span::new(0, 1, "SL:NUMS"), Span::new(1, 2, "SL:NUMS")])
            .unwrap();
        assert_eq!(baseline_majority_vote(&q2, &stats).unwrap(), f1);
        let q1 = Frame::new("agnostic", "IN:INTENT", 1, vec![Span::new(0, 1, "SL:NUMS")]).unwrap();
        assert!(matches!(baseline_majority_vote(&q1, &stats), Err(Error::NoEligibleFrame)));
        stats.counts.insert(f2.clone(), 3);
        assert_eq!(baseline_majority_vote(&q2, &stats).unwrap(), f1);
    }

    #[test]
    fn parse_names() {
        assert_eq!("golden-parse".parse::<Setting>().unwrap(), Setting::GoldenParse);
        assert_eq!("wo_head_type".parse::<Baseline>().unwrap(), Baseline::WoHeadType);
        assert!("nope".parse::<Baseline>().is_err());
    }

    #[test]
    fn std_is_sample_std() {
        let mk = |x| MetricSet {
            frame_accuracy: x,
            ..Default::default()
        };
        let s = mean_std(&[mk(0.2), mk(0.4), mk(0.6)]);
        assert!((s.mean.frame_accuracy - 0.4).abs() < 1e-15);
        assert!((s.std.frame_accuracy - 0.2).abs() < 1e-15);
        assert_eq!(mean_std(&[mk(0.3)]).std.frame_accuracy, 0.0);
    }

    fn small_cfg(baseline: Baseline) -> EvalConfig {
        EvalConfig {
            examples_per_label: 5,
            seeds: vec![1],
            baseline,
            domains: TOY_DOMAINS.iter().map(|d| d.to_string()).collect(),
            head: TrainConfig {
                epochs: 50,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn toy_plumbing_every_baseline() {
        let corpus = generate(ToyConfig { per_domain: 300, seed: 3 });
        let map = load_builtin_map();
        let e = HashedEmbedder::default();
        for b in Baseline::ALL {
            let report = run_loo(&small_cfg(b), &corpus, &map, &e).unwrap();
            assert_eq!(report.domains.len(), 2);
            for d in &report.domains {
                for r in &d.runs {
                    r.metrics.check_identities().unwrap();
                    assert!(r.n_test > 0);
                }
            }
            report.average.mean.check_identities().unwrap();
            if matches!(b, Baseline::Proposed | Baseline::WoHead) {
                assert_eq!(report.type_violations(), 0);
            }
            assert!(report.render_table().contains("avg"));
            assert_eq!(report.to_csv().lines().count(), 1 + 3 * 7);
            assert_eq!(EvalReport::from_json(&report.to_json()).unwrap(), report);
        }
    }

    #[test]
    fn reduction_and_aligned_denominators() {
        let corpus = generate(ToyConfig { per_domain: 300, seed: 3 });
        let map = load_builtin_map();
        let e = HashedEmbedder::default();
        let standard = run_loo(&small_cfg(Baseline::Proposed), &corpus, &map, &e).unwrap();
        let golden = run_loo(
            &EvalConfig {
                setting: Setting::GoldenParse,
                ..small_cfg(Baseline::Proposed)
            },
            &corpus,
            &map,
            &e,
        )
        .unwrap();
        for (a, b) in standard.domains.iter().zip(&golden.domains) {
            for (x, y) in a.runs.iter().zip(&b.runs) {
                assert_eq!(x.n_test, y.n_test);
            }
        }
        let best = standard
            .domains
            .iter()
            .map(|d| d.mean.candidate_reduction)
            .fold(0.0, f64::max);
        assert!(best >= 0.5, "{best}");
    }

    #[test]
    fn missing_domain() {
        let corpus = generate(ToyConfig { per_domain: 50, seed: 3 });
        let mut cfg = small_cfg(Baseline::Proposed);
        cfg.domains.push("weather".into());
        let r = run_loo(&cfg, &corpus, &load_builtin_map(), &HashedEmbedder::default());
        assert!(matches!(r, Err(Error::MissingDomain(d)) if d == "weather"));
        let mut cfg = small_cfg(Baseline::Proposed);
        cfg.seeds.clear();
        assert!(run_loo(&cfg, &corpus, &load_builtin_map(), &HashedEmbedder::default()).is_err());
    }
}
