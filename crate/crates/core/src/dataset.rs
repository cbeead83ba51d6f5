//! TOP-format ingestion, filtering, split materialization, agnostic
//! projection and simple-label sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{
    Frame, LabelKind, OntologyMap, Span, Utterance, AGNOSTIC_DOMAIN, INTENT_PREFIX,
};

/// The eight single-intent TopV2 domains used throughout evaluation.
pub const TOPV2_DOMAINS: [&str; 8] = [
    "alarm",
    "event",
    "messaging",
    "music",
    "navigation",
    "reminder",
    "timer",
    "weather",
];

pub const UNSUPPORTED_PREFIX: &str = "IN:UNSUPPORTED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "test" => Ok(Split::Test),
            _ => Err(Error::SchemaError(format!("unknown split {s:?}"))),
        }
    }
}

/// One annotated utterance with its single-intent domain-specific frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub utterance: Utterance,
    pub frame: Frame,
    pub domain: String,
    pub split: Split,
}

impl Record {
    pub fn text(&self) -> String {
        self.utterance.text()
    }

    /// Serializes back to the bracketed TOP form.
    pub fn to_top_string(&self) -> String {
        let mut out = format!("[{}", self.frame.intent.label);
        let mut slots = self.frame.slots.iter().peekable();
        for (i, tok) in self.utterance.tokens.iter().enumerate() {
            if let Some(s) = slots.peek() {
                if s.start == i {
                    out.push_str(" [");
                    out.push_str(&s.label);
                }
            }
            out.push(' ');
            out.push_str(tok);
            if let Some(s) = slots.peek() {
                if s.end == i + 1 {
                    out.push_str(" ]");
                    slots.next();
                }
            }
        }
        out.push_str(" ]");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CanonicalSlot {
    start: usize,
    end: usize,
    label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CanonicalRecord {
    text: String,
    domain: String,
    intent: String,
    slots: Vec<CanonicalSlot>,
}

impl Record {
    pub fn to_jsonl(&self) -> String {
        let c = CanonicalRecord {
            text: self.text(),
            domain: self.domain.clone(),
            intent: self.frame.intent.label.clone(),
            slots: self
                .frame
                .slots
                .iter()
                .map(|s| CanonicalSlot {
                    start: s.start,
                    end: s.end,
                    label: s.label.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&c).expect("record serializes")
    }

    pub fn from_jsonl(line: &str, split: Split) -> Result<Record> {
        let c: CanonicalRecord = serde_json::from_str(line)?;
        let utterance = Utterance::new(&c.text);
        let slots = c
            .slots
            .into_iter()
            .map(|s| Span::new(s.start, s.end, s.label))
            .collect();
        let frame = Frame::new(&c.domain, c.intent, utterance.len(), slots)?;
        Ok(Record {
            utterance,
            frame,
            domain: c.domain,
            split,
        })
    }
}

fn tokenize_tree(tree: &str) -> Vec<String> {
    let spaced = tree.replace('[', " [").replace(']', " ] ");
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Parses a bracketed tree such as
/// `[IN:CREATE_ALARM wake me [SL:DATE_TIME at 6 am ] ]`.
///
/// Only flat frames are accepted: one root intent whose children are words
/// or slot brackets containing words.
pub fn parse_top(tree: &str, domain: &str) -> Result<(Utterance, Frame)> {
    let toks = tokenize_tree(tree);
    let mut words: Vec<String> = Vec::new();
    let mut stack: Vec<(String, usize)> = Vec::new();
    let mut intent: Option<String> = None;
    let mut slots = Vec::new();
    let mut closed_root = false;

    for tok in toks {
        if closed_root {
            return Err(Error::MalformedTree(format!("content after root in {tree:?}")));
        }
        if let Some(label) = tok.strip_prefix('[') {
            let kind = LabelKind::of(label)
                .ok_or_else(|| Error::MalformedTree(format!("bad label {label:?} in {tree:?}")))?;
            match (stack.len(), kind) {
                (0, LabelKind::Intent) if intent.is_none() => {
                    intent = Some(label.to_string());
                }
                (0, _) => {
                    return Err(Error::MalformedTree(format!(
                        "root must be a single intent in {tree:?}"
                    )))
                }
                (_, LabelKind::Intent) => return Err(Error::NestedIntent(tree.to_string())),
                (1, LabelKind::Slot) => {}
                (_, LabelKind::Slot) => return Err(Error::NestedSlot(tree.to_string())),
            }
            stack.push((label.to_string(), words.len()));
        } else if tok == "]" {
            let (label, start) = stack
                .pop()
                .ok_or_else(|| Error::MalformedTree(format!("unbalanced ']' in {tree:?}")))?;
            if stack.is_empty() {
                closed_root = true;
            } else {
                if start == words.len() {
                    return Err(Error::MalformedTree(format!("empty slot {label} in {tree:?}")));
                }
                slots.push(Span::new(start, words.len(), label));
            }
        } else {
            if stack.is_empty() {
                return Err(Error::MalformedTree(format!("text outside brackets in {tree:?}")));
            }
            words.push(tok);
        }
    }
    if !closed_root {
        return Err(Error::MalformedTree(format!("unbalanced '[' in {tree:?}")));
    }
    let intent = intent.expect("root intent set when closed");
    if words.is_empty() {
        return Err(Error::MalformedTree(format!("no tokens in {tree:?}")));
    }
    let utterance = Utterance::from_tokens(words);
    let frame = Frame::new(domain, intent, utterance.len(), slots)?;
    Ok((utterance, frame))
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Parses one input line. Two layouts are accepted: a bare bracketed tree,
/// or the TopV2 TSV row `domain<TAB>utterance<TAB>semantic_parse`. For TSV
/// rows the utterance column must match the tree's tokens up to whitespace
/// and case.
pub fn parse_top_record(line: &str, domain: &str, split: Split) -> Result<Record> {
    let cols: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    let (domain, tree, raw) = match cols.as_slice() {
        [tree] => (domain, *tree, None),
        [d, utt, tree, ..] => (*d, *tree, Some(*utt)),
        _ => return Err(Error::MalformedTree(format!("unexpected column layout {line:?}"))),
    };
    let (utterance, frame) = parse_top(tree, domain)?;
    if let Some(raw) = raw {
        if squash(raw) != squash(&utterance.text()) {
            return Err(Error::Misaligned(format!("{raw:?} vs {:?}", utterance.text())));
        }
    }
    Ok(Record {
        utterance,
        frame,
        domain: domain.to_string(),
        split,
    })
}

/// Per-split counts after filtering, plus what was dropped and why.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: usize,
    pub eval: usize,
    pub test: usize,
    pub dropped_unsupported: usize,
    pub dropped_nested: usize,
    pub dropped_malformed: usize,
    pub dropped_misaligned: usize,
    pub dropped_unmappable: usize,
}

impl SplitStats {
    pub fn kept(&self) -> usize {
        self.train + self.eval + self.test
    }

    pub fn dropped(&self) -> usize {
        self.dropped_unsupported
            + self.dropped_nested
            + self.dropped_malformed
            + self.dropped_misaligned
            + self.dropped_unmappable
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn new(records: Vec<Record>) -> Corpus {
        Corpus { records }
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.domain.as_str()).collect()
    }

    pub fn select<'a>(
        &'a self,
        domain: &'a str,
        split: Split,
    ) -> impl Iterator<Item = &'a Record> + 'a {
        self.records
            .iter()
            .filter(move |r| r.domain == domain && r.split == split)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Writes `train.jsonl`, `eval.jsonl` and `test.jsonl` under `dir`.
    pub fn write_canonical(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            let file = fs::File::create(dir.join(format!("{split}.jsonl")))?;
            let mut w = BufWriter::new(file);
            for r in self.split(split) {
                writeln!(w, "{}", r.to_jsonl())?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn read_canonical(dir: &Path) -> Result<Corpus> {
        let mut records = Vec::new();
        for split in Split::ALL {
            let path = dir.join(format!("{split}.jsonl"));
            let reader = BufReader::new(fs::File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                records.push(Record::from_jsonl(&line, split)?);
            }
        }
        Ok(Corpus { records })
    }

    pub fn is_canonical_dir(dir: &Path) -> bool {
        Split::ALL
            .iter()
            .all(|s| dir.join(format!("{s}.jsonl")).is_file())
    }
}

/// Drops multi-intent, unsupported, malformed and misaligned records and,
/// when `map` is given, records carrying slots ψ does not cover.
pub fn filter_and_split<I>(parsed: I, map: Option<&OntologyMap>) -> (Corpus, SplitStats)
where
    I: IntoIterator<Item = Result<Record>>,
{
    let mut stats = SplitStats::default();
    let mut kept = Vec::new();
    for item in parsed {
        let record = match item {
            Ok(r) => r,
            Err(Error::NestedIntent(_) | Error::NestedSlot(_)) => {
                stats.dropped_nested += 1;
                continue;
            }
            Err(Error::Misaligned(_)) => {
                stats.dropped_misaligned += 1;
                continue;
            }
            Err(e) => {
                log::debug!("dropping record: {e}");
                stats.dropped_malformed += 1;
                continue;
            }
        };
        if record.frame.intent.label.starts_with(UNSUPPORTED_PREFIX) {
            stats.dropped_unsupported += 1;
            continue;
        }
        if let Some(map) = map {
            if map.frame_signature(&record.frame).is_err() {
                stats.dropped_unmappable += 1;
                continue;
            }
        }
        match record.split {
            Split::Train => stats.train += 1,
            Split::Eval => stats.eval += 1,
            Split::Test => stats.test += 1,
        }
        kept.push(record);
    }
    (Corpus::new(kept), stats)
}

/// Reads a TopV2-style directory of `<domain>_<split>.tsv` files. Files whose
/// stem does not end in a known split, or whose domain is not in `domains`,
/// are skipped.
pub fn load_topv2_dir(
    dir: &Path,
    domains: &[&str],
    map: Option<&OntologyMap>,
) -> Result<(Corpus, SplitStats)> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some((domain, split)) = stem.rsplit_once('_') else {
            continue;
        };
        let Ok(split) = split.parse::<Split>() else {
            continue;
        };
        if domains.contains(&domain) {
            files.push((domain.to_string(), split, path.clone()));
        }
    }
    files.sort();

    let mut parsed = Vec::new();
    for (domain, split, path) in files {
        let text = fs::read_to_string(&path)?;
        let lines: Vec<&str> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .filter(|l| !l.starts_with("domain\t"))
            .collect();
        log::info!("{}: {} lines", path.display(), lines.len());
        let recs: Vec<Result<Record>> = lines
            .par_iter()
            .map(|l| parse_top_record(l, &domain, split))
            .collect();
        parsed.extend(recs);
    }
    Ok(filter_and_split(parsed, map))
}

/// Replaces every label by its agnostic type; span geometry is untouched.
/// The record keeps its source domain so held-out filtering still works.
pub fn project_agnostic(record: &Record, map: &OntologyMap) -> Result<Record> {
    let frame = project_frame(&record.frame, map)?;
    Ok(Record {
        utterance: record.utterance.clone(),
        frame,
        domain: record.domain.clone(),
        split: record.split,
    })
}

pub fn project_frame(frame: &Frame, map: &OntologyMap) -> Result<Frame> {
    let intent = map.map_name(&frame.intent.label)?;
    let slots = frame
        .slots
        .iter()
        .map(|s| Ok(Span::new(s.start, s.end, map.map_name(&s.label)?.as_str())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Frame {
        domain: AGNOSTIC_DOMAIN.to_string(),
        intent: Span::new(frame.intent.start, frame.intent.end, intent.as_str()),
        slots,
    })
}

/// A label that had fewer distinct texts than requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Underpopulated {
    pub label: String,
    pub available: usize,
    pub requested: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimpleLabels {
    /// label name → example texts
    pub examples: BTreeMap<String, Vec<String>>,
    pub warnings: Vec<Underpopulated>,
}

impl SimpleLabels {
    /// Flattened `(text, label)` pairs, label-major.
    pub fn pairs(&self) -> Vec<(String, String)> {
        self.examples
            .iter()
            .flat_map(|(l, texts)| texts.iter().map(move |t| (t.clone(), l.clone())))
            .collect()
    }
}

/// Distinct span texts per label in the domain's train split, deduplicated
/// case-insensitively, first occurrence's casing kept. Intents contribute
/// whole utterances.
pub fn label_text_pool(corpus: &Corpus, domain: &str) -> BTreeMap<String, Vec<String>> {
    let mut pool: BTreeMap<String, (BTreeSet<String>, Vec<String>)> = BTreeMap::new();
    let mut add = |label: &str, text: String| {
        let (seen, texts) = pool.entry(label.to_string()).or_default();
        if seen.insert(text.to_lowercase()) {
            texts.push(text);
        }
    };
    for r in corpus.select(domain, Split::Train) {
        add(&r.frame.intent.label, r.utterance.text());
        for s in &r.frame.slots {
            add(&s.label, r.utterance.span_text(s.start, s.end));
        }
    }
    pool.into_iter().map(|(k, (_, v))| (k, v)).collect()
}

/// Draws up to `k` distinct texts per intent and slot label of `domain` from
/// its train split, uniformly without replacement.
pub fn sample_simple_labels(corpus: &Corpus, domain: &str, k: usize, seed: u64) -> SimpleLabels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SimpleLabels::default();
    for (label, texts) in label_text_pool(corpus, domain) {
        let chosen = if texts.len() <= k {
            if texts.len() < k {
                log::warn!(
                    "{domain}/{label}: only {} distinct texts for k={k}",
                    texts.len()
                );
                out.warnings.push(Underpopulated {
                    label: label.clone(),
                    available: texts.len(),
                    requested: k,
                });
            }
            texts
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, texts.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| texts[i].clone()).collect()
        };
        out.examples.insert(label, chosen);
    }
    out
}

/// True when `name` is an intent label.
pub fn is_intent(name: &str) -> bool {
    name.starts_with(INTENT_PREFIX)
}
