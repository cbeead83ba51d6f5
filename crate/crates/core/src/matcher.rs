//! Domain-specific matching: scores registered frame templates against an
//! agnostic frame and ranks them.
//!
//! A template's score is the mean of the intent probability on the whole
//! utterance and the slot probabilities on the query spans, maximized over
//! type-preserving bijections between template slots and query spans.
//! Templates whose agnostic-type multiset differs from the query's are not
//! scored at all.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::assignment::solve_max;
use crate::dataset::SimpleLabels;
use crate::embedding::{cosine, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::head::Head;
use crate::ontology::{AgnosticLabel, Frame, OntologyMap, Span, Utterance};
use crate::tagger::TaggerModel;

/// An element of the target space: an intent plus a multiset of slot
/// labels, without span geometry. Slots are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameTemplate {
    pub domain: String,
    pub intent: String,
    pub slots: Vec<String>,
}

impl FrameTemplate {
    pub fn new(domain: impl Into<String>, intent: impl Into<String>, mut slots: Vec<String>) -> Self {
        slots.sort();
        FrameTemplate {
            domain: domain.into(),
            intent: intent.into(),
            slots,
        }
    }

    pub fn of_frame(frame: &Frame) -> FrameTemplate {
        FrameTemplate::new(frame.domain.clone(), frame.intent.label.clone(), frame.slot_multiset())
    }

    pub fn arity(&self) -> usize {
        self.slots.len()
    }

    /// Ranking tie-break: intent name, then slot names, then domain.
    pub fn tie_break(&self, other: &FrameTemplate) -> Ordering {
        self.intent
            .cmp(&other.intent)
            .then_with(|| self.slots.cmp(&other.slots))
            .then_with(|| self.domain.cmp(&other.domain))
    }
}

/// Which templates may be scored against a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TypeConstraint {
    /// Same multiset of agnostic types.
    Typed,
    /// Same number of slots only.
    ArityOnly,
}

/// Per-label scores in `[0, 1]` for a piece of text. Labels the scorer does
/// not know score 0.
pub trait LabelScorer: Sync {
    fn scores(&self, text: &str) -> Result<HashMap<String, f64>>;
}

/// Softmax head probabilities.
pub struct HeadScorer<'a> {
    head: &'a Head,
    provider: &'a dyn Embedder,
}

impl<'a> HeadScorer<'a> {
    pub fn new(head: &'a Head, provider: &'a dyn Embedder) -> Result<HeadScorer<'a>> {
        head.check_provider(provider)?;
        Ok(HeadScorer { head, provider })
    }
}

impl LabelScorer for HeadScorer<'_> {
    fn scores(&self, text: &str) -> Result<HashMap<String, f64>> {
        let p = self.head.predict_proba(text, self.provider)?;
        Ok(self.head.labels.iter().cloned().zip(p).collect())
    }
}

/// Nearest-example cosine similarity per label, rescaled to `[0, 1]` as
/// `(c + 1) / 2`.
pub struct CosineScorer<'a> {
    provider: &'a dyn Embedder,
    examples: BTreeMap<String, Vec<EmbeddingVector>>,
}

impl<'a> CosineScorer<'a> {
    pub fn new(labels: &SimpleLabels, provider: &'a dyn Embedder) -> Result<CosineScorer<'a>> {
        let mut examples = BTreeMap::new();
        for (label, texts) in &labels.examples {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            examples.insert(label.clone(), provider.embed_batch(&refs)?);
        }
        Ok(CosineScorer { provider, examples })
    }
}

impl LabelScorer for CosineScorer<'_> {
    fn scores(&self, text: &str) -> Result<HashMap<String, f64>> {
        let x = self.provider.embed(text)?;
        let mut out = HashMap::with_capacity(self.examples.len());
        for (label, vs) in &self.examples {
            let mut best = f64::NEG_INFINITY;
            for v in vs {
                best = best.max(cosine(&x, v)?);
            }
            if best.is_finite() {
                out.insert(label.clone(), (best + 1.0) / 2.0);
            }
        }
        Ok(out)
    }
}

/// Scores 1 for the label recorded for a text and 0 otherwise; a stand-in
/// for a perfect head when checking the matching path.
#[derive(Debug, Clone, Default)]
pub struct OracleScorer {
    gold: HashMap<String, String>,
}

impl OracleScorer {
    pub fn new() -> OracleScorer {
        OracleScorer::default()
    }

    pub fn insert(&mut self, text: impl Into<String>, label: impl Into<String>) {
        self.gold.insert(text.into(), label.into());
    }

    /// Gold labels of every span of `frame`, plus its intent on the full text.
    pub fn add_frame(&mut self, utterance: &Utterance, frame: &Frame) {
        self.insert(utterance.text(), frame.intent.label.clone());
        for s in &frame.slots {
            self.insert(utterance.span_text(s.start, s.end), s.label.clone());
        }
    }
}

impl LabelScorer for OracleScorer {
    fn scores(&self, text: &str) -> Result<HashMap<String, f64>> {
        Ok(self
            .gold
            .get(text)
            .map(|l| HashMap::from([(l.clone(), 1.0)]))
            .unwrap_or_default())
    }
}

/// Label scores for the utterance and each query span.
#[derive(Debug, Clone)]
pub struct QueryScores {
    pub intent: HashMap<String, f64>,
    pub spans: Vec<HashMap<String, f64>>,
}

impl QueryScores {
    pub fn compute(query: &Frame, utterance: &Utterance, scorer: &dyn LabelScorer) -> Result<Self> {
        let intent = scorer.scores(&utterance.text())?;
        let spans = query
            .slots
            .iter()
            .map(|s| scorer.scores(&utterance.span_text(s.start, s.end)))
            .collect::<Result<Vec<_>>>()?;
        Ok(QueryScores { intent, spans })
    }

    pub fn intent_score(&self, label: &str) -> f64 {
        self.intent.get(label).copied().unwrap_or(0.0)
    }

    pub fn span_score(&self, span: usize, label: &str) -> f64 {
        self.spans[span].get(label).copied().unwrap_or(0.0)
    }

    /// Mean of the intent score and the assigned slot scores, summed in
    /// query-span order.
    pub fn frame_score(&self, intent: &str, assignment: &[String]) -> f64 {
        let mut total = self.intent_score(intent);
        for (i, label) in assignment.iter().enumerate() {
            total += self.span_score(i, label);
        }
        total / (1 + assignment.len()) as f64
    }
}

fn query_types(query: &Frame) -> Result<Vec<AgnosticLabel>> {
    query.slots.iter().map(|s| s.label.parse()).collect()
}

/// Whether `template` passes the type filter for `query`.
pub fn eligible(template: &FrameTemplate, query: &Frame, map: &OntologyMap) -> Result<bool> {
    eligible_with(template, query, map, TypeConstraint::Typed)
}

pub fn eligible_with(
    template: &FrameTemplate,
    query: &Frame,
    map: &OntologyMap,
    constraint: TypeConstraint,
) -> Result<bool> {
    if template.arity() != query.slots.len() {
        return Ok(false);
    }
    match constraint {
        TypeConstraint::ArityOnly => Ok(true),
        TypeConstraint::Typed => {
            let mut q = query_types(query)?;
            q.sort();
            Ok(map.signature(template.slots.iter().map(String::as_str))? == q)
        }
    }
}

/// Best score of `template` and the slot label assigned to each query span.
///
/// Slots are split into blocks (one per agnostic type, or a single block
/// when only arity is enforced) and the best bijection is solved per block.
pub fn sim(
    template: &FrameTemplate,
    query: &Frame,
    scores: &QueryScores,
    map: &OntologyMap,
    constraint: TypeConstraint,
) -> Result<(f64, Vec<String>)> {
    if !eligible_with(template, query, map, constraint)? {
        return Err(Error::Ineligible);
    }
    let q_types = query_types(query)?;
    let mut blocks: BTreeMap<Option<AgnosticLabel>, (Vec<usize>, Vec<&str>)> = BTreeMap::new();
    for (i, t) in q_types.iter().enumerate() {
        let key = (constraint == TypeConstraint::Typed).then_some(*t);
        blocks.entry(key).or_default().0.push(i);
    }
    for slot in &template.slots {
        let key = match constraint {
            TypeConstraint::Typed => Some(map.map_name(slot)?),
            TypeConstraint::ArityOnly => None,
        };
        blocks.entry(key).or_default().1.push(slot);
    }
    let mut assignment = vec![String::new(); query.slots.len()];
    for (spans, slots) in blocks.values() {
        debug_assert_eq!(spans.len(), slots.len());
        let matrix: Vec<Vec<f64>> = spans
            .iter()
            .map(|&i| slots.iter().map(|l| scores.span_score(i, l)).collect())
            .collect();
        for (row, col) in solve_max(&matrix).into_iter().enumerate() {
            assignment[spans[row]] = slots[col].to_string();
        }
    }
    Ok((scores.frame_score(&template.intent, &assignment), assignment))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assigned {
    pub span: usize,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub template: FrameTemplate,
    pub score: f64,
    pub assignment: Vec<Assigned>,
}

impl Ranked {
    /// The domain-specific frame obtained by relabeling the query spans.
    pub fn to_frame(&self, query: &Frame) -> Frame {
        let slots = self
            .assignment
            .iter()
            .map(|a| Span::new(a.start, a.end, a.label.clone()))
            .collect();
        Frame::new(
            self.template.domain.clone(),
            self.template.intent.clone(),
            query.n_tokens(),
            slots,
        )
        .expect("query spans are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub query: Frame,
    pub ranked: Vec<Ranked>,
    /// Templates that passed the filter, before truncation to k.
    pub eligible: usize,
    pub inventory_size: usize,
}

impl MatchResult {
    pub fn best(&self) -> &Ranked {
        &self.ranked[0]
    }

    /// 1-based rank of the first entry whose template equals `gold`.
    pub fn rank_of(&self, gold: &FrameTemplate) -> Option<usize> {
        self.ranked.iter().position(|r| r.template == *gold).map(|p| p + 1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("match result serializes")
    }
}

fn sort_ranked(ranked: &mut [Ranked]) {
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.template.tie_break(&b.template))
    });
}

fn score_inventory(
    query: &Frame,
    inventory: &[FrameTemplate],
    scores: &QueryScores,
    map: &OntologyMap,
    constraint: TypeConstraint,
    out: &mut Vec<Ranked>,
) -> Result<()> {
    for t in inventory {
        if !eligible_with(t, query, map, constraint)? {
            continue;
        }
        let (score, labels) = sim(t, query, scores, map, constraint)?;
        let assignment = labels
            .into_iter()
            .zip(&query.slots)
            .enumerate()
            .map(|(i, (label, s))| Assigned {
                span: i,
                start: s.start,
                end: s.end,
                label,
            })
            .collect();
        out.push(Ranked {
            template: t.clone(),
            score,
            assignment,
        });
    }
    Ok(())
}

fn finish(query: &Frame, mut ranked: Vec<Ranked>, inventory_size: usize, k: Option<usize>) -> Result<MatchResult> {
    if ranked.is_empty() {
        return Err(Error::NoEligibleFrame);
    }
    sort_ranked(&mut ranked);
    let eligible = ranked.len();
    if let Some(k) = k {
        ranked.truncate(k.max(1));
    }
    Ok(MatchResult {
        query: query.clone(),
        ranked,
        eligible,
        inventory_size,
    })
}

/// Filters `inventory`, scores the survivors and returns the top `k`
/// (all when `k` is `None`).
pub fn rank(
    query: &Frame,
    inventory: &[FrameTemplate],
    scorer: &dyn LabelScorer,
    utterance: &Utterance,
    map: &OntologyMap,
    constraint: TypeConstraint,
    k: Option<usize>,
) -> Result<MatchResult> {
    let scores = QueryScores::compute(query, utterance, scorer)?;
    let mut ranked = Vec::new();
    score_inventory(query, inventory, &scores, map, constraint, &mut ranked)?;
    finish(query, ranked, inventory.len(), k)
}

/// A servable domain: its templates and the scorer for its labels.
pub struct DomainMatcher<'a> {
    pub name: String,
    pub inventory: &'a [FrameTemplate],
    pub scorer: &'a dyn LabelScorer,
}

/// Ranks over the union of several domains' inventories. Each domain's
/// templates are scored with that domain's own scorer.
pub fn rank_domains(
    query: &Frame,
    utterance: &Utterance,
    domains: &[DomainMatcher<'_>],
    map: &OntologyMap,
    k: Option<usize>,
) -> Result<MatchResult> {
    let mut ranked = Vec::new();
    let mut size = 0;
    for d in domains {
        size += d.inventory.len();
        if d.inventory.is_empty() {
            continue;
        }
        let scores = QueryScores::compute(query, utterance, d.scorer)?;
        score_inventory(query, d.inventory, &scores, map, TypeConstraint::Typed, &mut ranked)?;
    }
    finish(query, ranked, size, k)
}

/// End to end: tag the utterance (or take the supplied gold agnostic frame)
/// and rank against every registered domain.
pub fn parse(
    utterance: &Utterance,
    tagger: Option<&TaggerModel>,
    domains: &[DomainMatcher<'_>],
    map: &OntologyMap,
    golden: Option<&Frame>,
    k: Option<usize>,
) -> Result<MatchResult> {
    if domains.is_empty() {
        return Err(Error::InvalidConfig("no domain registered".into()));
    }
    let query = match (golden, tagger) {
        (Some(f), _) => f.clone(),
        (None, Some(t)) => t.tag(utterance),
        (None, None) => return Err(Error::InvalidConfig("no agnostic parser trained".into())),
    };
    rank_domains(&query, utterance, domains, map, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{load_builtin_map, AGNOSTIC_DOMAIN};

    fn query(types: &[&str]) -> Frame {
        let spans = types
            .iter()
            .enumerate()
            .map(|(i, t)| Span::new(i, i + 1, *t))
            .collect();
        Frame::new(AGNOSTIC_DOMAIN, "IN:INTENT", types.len(), spans).unwrap()
    }

    fn template(intent: &str, slots: &[&str]) -> FrameTemplate {
        FrameTemplate::new("alarm", intent, slots.iter().map(|s| s.to_string()).collect())
    }

    fn scores(intent: &[(&str, f64)], spans: &[&[(&str, f64)]]) -> QueryScores {
        let conv = |xs: &[(&str, f64)]| xs.iter().map(|(l, p)| (l.to_string(), *p)).collect();
        QueryScores {
            intent: conv(intent),
            spans: spans.iter().map(|s| conv(s)).collect(),
        }
    }

    #[test]
    fn eligibility() {
        let map = load_builtin_map();
        let t = template("IN:CREATE_ALARM", &["SL:DATE_TIME", "SL:ALARM_NAME"]);
        let q = query(&["SL:SCOPE_TEMPORAL", "SL:DELIVERABLE"]);
        assert!(eligible(&t, &q, &map).unwrap());
        let t = template("IN:CREATE_ALARM", &["SL:DATE_TIME"]);
        assert!(!eligible(&t, &query(&["SL:SCOPE_LOC"]), &map).unwrap());
        assert!(eligible_with(&t, &query(&["SL:SCOPE_LOC"]), &map, TypeConstraint::ArityOnly).unwrap());
        assert!(eligible(&template("IN:GET_ALARM", &[]), &query(&[]), &map).unwrap());
        assert!(!eligible(&template("IN:GET_ALARM", &[]), &query(&["SL:NUMS"]), &map).unwrap());
        let unknown = template("IN:X", &["SL:NOPE"]);
        assert!(eligible(&unknown, &query(&["SL:NUMS"]), &map).is_err());
    }

    #[test]
    fn sim_distinct_types() {
        let map = load_builtin_map();
        let t = template("IN:CREATE_ALARM", &["SL:DATE_TIME", "SL:ALARM_NAME"]);
        let q = query(&["SL:SCOPE_TEMPORAL", "SL:DELIVERABLE"]);
        let s = scores(
            &[("IN:CREATE_ALARM", 0.9)],
            &[&[("SL:DATE_TIME", 0.8)], &[("SL:ALARM_NAME", 0.6)]],
        );
        let (score, a) = sim(&t, &q, &s, &map, TypeConstraint::Typed).unwrap();
        assert!((score - (0.9 + 0.8 + 0.6) / 3.0).abs() < 1e-15);
        assert!((score - 0.7667).abs() < 1e-4);
        assert_eq!(a, vec!["SL:DATE_TIME", "SL:ALARM_NAME"]);
    }

    #[test]
    fn sim_same_type_permutation() {
        let map = load_builtin_map();
        let t = template("IN:CREATE_ALARM", &["SL:DATE_TIME", "SL:DURATION"]);
        let q = query(&["SL:SCOPE_TEMPORAL", "SL:SCOPE_TEMPORAL"]);
        let s = scores(
            &[("IN:CREATE_ALARM", 1.0)],
            &[
                &[("SL:DATE_TIME", 0.9), ("SL:DURATION", 0.2)],
                &[("SL:DATE_TIME", 0.1), ("SL:DURATION", 0.8)],
            ],
        );
        let (score, a) = sim(&t, &q, &s, &map, TypeConstraint::Typed).unwrap();
        assert!((score - 0.9).abs() < 1e-15);
        assert_eq!(a, vec!["SL:DATE_TIME", "SL:DURATION"]);
        let bad = query(&["SL:SCOPE_TEMPORAL", "SL:NUMS"]);
        assert!(matches!(
            sim(&t, &bad, &s, &map, TypeConstraint::Typed),
            Err(Error::Ineligible)
        ));
    }

    #[test]
    fn rank_filters_and_breaks_ties() {
        let map = load_builtin_map();
        let inv = vec![
            template("IN:SET_B", &["SL:DATE_TIME"]),
            template("IN:SET_A", &["SL:DATE_TIME"]),
            template("IN:OTHER", &["SL:LOCATION"]),
        ];
        let q = query(&["SL:SCOPE_TEMPORAL"]);
        let u = Utterance::new("x");
        let scorer = OracleScorer::new();
        let r = rank(&q, &inv, &scorer, &u, &map, TypeConstraint::Typed, None).unwrap();
        assert_eq!(r.eligible, 2);
        assert_eq!(r.ranked[0].template.intent, "IN:SET_A");
        assert_eq!(r.ranked[1].template.intent, "IN:SET_B");
        assert_eq!(r.ranked[0].score, 0.0);

        let mut rev = inv.clone();
        rev.reverse();
        let r2 = rank(&q, &rev, &scorer, &u, &map, TypeConstraint::Typed, None).unwrap();
        assert_eq!(r, MatchResult { inventory_size: 3, ..r2 });

        let only = vec![template("IN:OTHER", &["SL:LOCATION"]), template("IN:SET_A", &["SL:DATE_TIME"])];
        let r = rank(&q, &only, &scorer, &u, &map, TypeConstraint::Typed, Some(1)).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.best().template.intent, "IN:SET_A");

        let none = vec![template("IN:OTHER", &["SL:LOCATION"])];
        assert!(matches!(
            rank(&q, &none, &scorer, &u, &map, TypeConstraint::Typed, None),
            Err(Error::NoEligibleFrame)
        ));
        assert!(matches!(
            rank(&q, &[], &scorer, &u, &map, TypeConstraint::Typed, None),
            Err(Error::NoEligibleFrame)
        ));
    }

    #[test]
    fn slotless_query_ranks_by_intent() {
        let map = load_builtin_map();
        let inv = vec![
            template("IN:GET_ALARM", &[]),
            template("IN:SILENCE_ALARM", &[]),
            template("IN:SNOOZE_ALARM", &[]),
        ];
        let q = query(&[]);
        let u = Utterance::new("stop the noise");
        struct Fixed;
        impl LabelScorer for Fixed {
            fn scores(&self, _: &str) -> Result<HashMap<String, f64>> {
                Ok(HashMap::from([
                    ("IN:GET_ALARM".to_string(), 0.2),
                    ("IN:SILENCE_ALARM".to_string(), 0.7),
                    ("IN:SNOOZE_ALARM".to_string(), 0.1),
                ]))
            }
        }
        let r = rank(&q, &inv, &Fixed, &u, &map, TypeConstraint::Typed, None).unwrap();
        let order: Vec<_> = r.ranked.iter().map(|x| x.template.intent.as_str()).collect();
        assert_eq!(order, vec!["IN:SILENCE_ALARM", "IN:GET_ALARM", "IN:SNOOZE_ALARM"]);
        assert_eq!(r.ranked[0].score, 0.7);
    }

    #[test]
    fn cosine_scorer_rescales() {
        let e = crate::embedding::HashedEmbedder::default();
        let mut labels = SimpleLabels::default();
        labels
            .examples
            .insert("SL:DATE_TIME".into(), vec!["at 6 am".into(), "tomorrow".into()]);
        let s = CosineScorer::new(&labels, &e).unwrap();
        let got = s.scores("at 6 am").unwrap();
        assert!((got["SL:DATE_TIME"] - 1.0).abs() < 1e-12);
        let empty = s.scores("").unwrap();
        assert_eq!(empty["SL:DATE_TIME"], 0.5);
    }

    #[test]
    fn to_frame_relabels_query() {
        let map = load_builtin_map();
        let q = query(&["SL:SCOPE_TEMPORAL", "SL:DELIVERABLE"]);
        let u = Utterance::new("six gym");
        let mut oracle = OracleScorer::new();
        oracle.insert("six gym", "IN:CREATE_ALARM");
        oracle.insert("six", "SL:DATE_TIME");
        oracle.insert("gym", "SL:ALARM_NAME");
        let inv = vec![template("IN:CREATE_ALARM", &["SL:ALARM_NAME", "SL:DATE_TIME"])];
        let r = rank(&q, &inv, &oracle, &u, &map, TypeConstraint::Typed, None).unwrap();
        assert_eq!(r.best().score, 1.0);
        let f = r.best().to_frame(&q);
        assert_eq!(
            f.slots,
            vec![Span::new(0, 1, "SL:DATE_TIME"), Span::new(1, 2, "SL:ALARM_NAME")]
        );
        assert_eq!(f.intent.label, "IN:CREATE_ALARM");
        let json = r.to_json();
        let back: MatchResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
