//! Developer-facing domain onboarding and the on-disk registry.
//!
//! A domain is declared as intents with typed arguments plus a handful of
//! example texts per label. Registration expands the declaration into frame
//! templates and extends the global slot map; finalizing trains the domain's
//! head so the matcher can serve it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Record, Split};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::head::{train_head, Head, TrainConfig};
use crate::matcher::{parse, DomainMatcher, FrameTemplate, HeadScorer, LabelScorer, MatchResult};
use crate::ontology::{load_builtin_map, AgnosticLabel, Frame, OntologyMap, Utterance, INTENT_PREFIX, SLOT_PREFIX};
use crate::tagger::TaggerModel;

pub const SCHEMA_VERSION: u32 = 1;
/// Optional arguments per intent beyond which the subset expansion is refused.
pub const MAX_OPTIONAL_SLOTS: usize = 12;

const MANIFEST: &str = "manifest.json";
const DOMAINS_DIR: &str = "domains";
const DAP_MODEL: &str = "dap_model.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotDecl {
    pub name: String,
    pub agnostic_type: String,
    #[serde(default)]
    pub examples: Vec<String>,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentDecl {
    pub name: String,
    #[serde(default)]
    pub examples: Vec<String>,
    #[serde(default)]
    pub slots: Vec<SlotDecl>,
}

/// The spec file a developer writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub name: String,
    pub intents: Vec<IntentDecl>,
}

impl SpecFile {
    pub fn from_json(json: &str) -> Result<SpecFile> {
        serde_json::from_str(json).map_err(|e| Error::SchemaError(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<SpecFile> {
        SpecFile::from_json(&fs::read_to_string(path)?)
    }
}

/// A validated domain: its templates, slot-map extension, examples and
/// (once finalized) its head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub templates: Vec<FrameTemplate>,
    pub psi_extension: BTreeMap<String, AgnosticLabel>,
    pub simple_labels: BTreeMap<String, Vec<String>>,
    pub head: Option<Head>,
}

fn check_domain_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::SchemaError(format!(
            "domain name {name:?} must be non-empty ASCII letters, digits, '_' or '-'"
        )))
    }
}

fn check_label(name: &str, prefix: &str) -> Result<()> {
    if name.len() > prefix.len() && name.starts_with(prefix) && !name.contains(char::is_whitespace) {
        Ok(())
    } else {
        Err(Error::SchemaError(format!("label {name:?} must look like {prefix}NAME")))
    }
}

fn parse_agnostic(name: &str) -> Result<AgnosticLabel> {
    match name.parse::<AgnosticLabel>() {
        Ok(a) if a.is_slot() => Ok(a),
        _ => Err(Error::UnknownAgnosticType(name.to_string())),
    }
}

fn add_examples(into: &mut Vec<String>, texts: &[String]) {
    for t in texts {
        let t = t.split_whitespace().collect::<Vec<_>>().join(" ");
        if !t.is_empty() && !into.contains(&t) {
            into.push(t);
        }
    }
}

/// Every combination of the optional slots, each joined with all required
/// slots. Combinations that coincide as multisets appear once.
fn expand_templates(domain: &str, intent: &IntentDecl) -> Result<Vec<FrameTemplate>> {
    let required: Vec<String> = intent
        .slots
        .iter()
        .filter(|s| s.required)
        .map(|s| s.name.clone())
        .collect();
    let optional: Vec<&str> = intent
        .slots
        .iter()
        .filter(|s| !s.required)
        .map(|s| s.name.as_str())
        .collect();
    if optional.len() > MAX_OPTIONAL_SLOTS {
        return Err(Error::SchemaError(format!(
            "{} declares {} optional slots; at most {MAX_OPTIONAL_SLOTS} are supported",
            intent.name,
            optional.len()
        )));
    }
    let mut out = BTreeSet::new();
    for mask in 0u32..(1 << optional.len()) {
        let mut slots = required.clone();
        for (i, s) in optional.iter().enumerate() {
            if mask & (1 << i) != 0 {
                slots.push(s.to_string());
            }
        }
        out.insert(FrameTemplate::new(domain, intent.name.clone(), slots));
    }
    Ok(out.into_iter().collect())
}

impl DomainSpec {
    /// Validates a spec file on its own (no global-map checks).
    pub fn from_spec_file(file: &SpecFile) -> Result<DomainSpec> {
        check_domain_name(&file.name)?;
        if file.intents.is_empty() {
            return Err(Error::SchemaError(format!("{} declares no intents", file.name)));
        }
        let mut psi: BTreeMap<String, AgnosticLabel> = BTreeMap::new();
        let mut examples: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut templates: Vec<FrameTemplate> = Vec::new();
        let mut seen = BTreeSet::new();
        for intent in &file.intents {
            check_label(&intent.name, INTENT_PREFIX)?;
            add_examples(examples.entry(intent.name.clone()).or_default(), &intent.examples);
            for slot in &intent.slots {
                check_label(&slot.name, SLOT_PREFIX)?;
                let t = parse_agnostic(&slot.agnostic_type)?;
                match psi.get(&slot.name) {
                    Some(existing) if *existing != t => {
                        return Err(Error::MappingConflict {
                            label: slot.name.clone(),
                            existing: existing.as_str().to_string(),
                            requested: t.as_str().to_string(),
                        })
                    }
                    _ => {
                        psi.insert(slot.name.clone(), t);
                    }
                }
                add_examples(examples.entry(slot.name.clone()).or_default(), &slot.examples);
            }
            for t in expand_templates(&file.name, intent)? {
                if !seen.insert(t.clone()) {
                    return Err(Error::DuplicateTemplate(format!(
                        "{} [{}]",
                        t.intent,
                        t.slots.join(", ")
                    )));
                }
                templates.push(t);
            }
        }
        templates.sort();
        Ok(DomainSpec {
            name: file.name.clone(),
            templates,
            psi_extension: psi,
            simple_labels: examples,
            head: None,
        })
    }

    /// Intent and slot labels used by the templates, sorted.
    pub fn labels(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for t in &self.templates {
            set.insert(t.intent.clone());
            set.extend(t.slots.iter().cloned());
        }
        set.into_iter().collect()
    }

    pub fn is_servable(&self) -> bool {
        self.head.is_some()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("domain spec serializes") + "\n"
    }

    pub fn from_json(json: &str) -> Result<DomainSpec> {
        let spec: DomainSpec = serde_json::from_str(json)?;
        check_domain_name(&spec.name)?;
        if let Some(h) = &spec.head {
            Head::from_json(&h.to_json())?;
        }
        Ok(spec)
    }
}

/// Trains the head on the spec's examples. Every intent and slot used by a
/// template needs at least one example.
pub fn finalize_domain(spec: &DomainSpec, cfg: &TrainConfig, provider: &dyn Embedder) -> Result<DomainSpec> {
    let labels = spec.labels();
    for l in &labels {
        if spec.simple_labels.get(l).is_none_or(|v| v.is_empty()) {
            return Err(Error::MissingExamples(l.clone()));
        }
    }
    let pairs: Vec<(String, String)> = labels
        .iter()
        .flat_map(|l| spec.simple_labels[l].iter().map(move |t| (t.clone(), l.clone())))
        .collect();
    let head = train_head(&pairs, cfg, provider)?;
    Ok(DomainSpec {
        head: Some(head),
        ..spec.clone()
    })
}

/// Unique `(intent, slot multiset)` shapes in the train split of `domain`.
pub fn build_inventory_from_corpus<'a>(
    domain: &str,
    records: impl IntoIterator<Item = &'a Record>,
) -> Vec<FrameTemplate> {
    records
        .into_iter()
        .filter(|r| r.domain == domain && r.split == Split::Train)
        .map(|r| FrameTemplate::new(domain, r.frame.intent.label.clone(), r.frame.slot_multiset()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    domains: Vec<String>,
}

/// Registered domains, the global slot map they induce, and the agnostic
/// parser.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    domains: BTreeMap<String, DomainSpec>,
    map: OntologyMap,
    tagger: Option<TaggerModel>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new()
    }
}

impl Registry {
    pub fn new() -> Registry {
        Registry {
            domains: BTreeMap::new(),
            map: load_builtin_map(),
            tagger: None,
        }
    }

    pub fn map(&self) -> &OntologyMap {
        &self.map
    }

    pub fn tagger(&self) -> Option<&TaggerModel> {
        self.tagger.as_ref()
    }

    pub fn set_tagger(&mut self, tagger: TaggerModel) {
        self.tagger = Some(tagger);
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.values()
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .get(name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    fn merged_map<'a>(specs: impl Iterator<Item = &'a DomainSpec>) -> Result<OntologyMap> {
        let mut map = load_builtin_map();
        for spec in specs {
            for (slot, t) in &spec.psi_extension {
                map.insert(slot, *t)?;
            }
        }
        Ok(map)
    }

    /// Adds `spec`, replacing any domain of the same name. Nothing changes
    /// if its slot map conflicts with the other domains.
    pub fn register(&mut self, spec: DomainSpec) -> Result<()> {
        let others = self.domains.values().filter(|d| d.name != spec.name);
        let map = Registry::merged_map(others.chain(std::iter::once(&spec)))?;
        self.map = map;
        self.domains.insert(spec.name.clone(), spec);
        Ok(())
    }

    pub fn register_file(&mut self, file: &SpecFile) -> Result<&DomainSpec> {
        let spec = DomainSpec::from_spec_file(file)?;
        let name = spec.name.clone();
        self.register(spec)?;
        Ok(&self.domains[&name])
    }

    pub fn finalize(&mut self, name: &str, cfg: &TrainConfig, provider: &dyn Embedder) -> Result<&DomainSpec> {
        let done = finalize_domain(self.domain(name)?, cfg, provider)?;
        self.domains.insert(name.to_string(), done);
        Ok(&self.domains[name])
    }

    /// Tags (or takes the gold agnostic frame) and ranks against every
    /// finalized domain.
    pub fn parse(
        &self,
        utterance: &Utterance,
        provider: &dyn Embedder,
        golden: Option<&Frame>,
        k: Option<usize>,
    ) -> Result<MatchResult> {
        let servable: Vec<&DomainSpec> = self.domains.values().filter(|d| d.is_servable()).collect();
        let scorers = servable
            .iter()
            .map(|d| HeadScorer::new(d.head.as_ref().expect("servable"), provider))
            .collect::<Result<Vec<_>>>()?;
        let matchers: Vec<DomainMatcher<'_>> = servable
            .iter()
            .zip(&scorers)
            .map(|(d, s)| DomainMatcher {
                name: d.name.clone(),
                inventory: &d.templates,
                scorer: s as &dyn LabelScorer,
            })
            .collect();
        parse(utterance, self.tagger.as_ref(), &matchers, &self.map, golden, k)
    }

    /// Writes the registry under `dir`. Each file is written to a temporary
    /// name and renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(DOMAINS_DIR))?;
        for spec in self.domains.values() {
            write_atomic(&domain_path(dir, &spec.name), spec.to_json().as_bytes())?;
        }
        if let Some(t) = &self.tagger {
            let mut buf = Vec::new();
            t.write_jsonl(BufWriter::new(&mut buf))?;
            write_atomic(&dir.join(DAP_MODEL), &buf)?;
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            domains: self.domains.keys().cloned().collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        write_atomic(&dir.join(MANIFEST), json.as_bytes())
    }

    /// Loads a registry directory. A missing directory yields an empty
    /// registry.
    pub fn load(dir: &Path) -> Result<Registry> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            let mut r = Registry::new();
            r.tagger = load_tagger(dir)?;
            return Ok(r);
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaError(format!(
                "registry schema version {} (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let mut domains = BTreeMap::new();
        for name in &manifest.domains {
            check_domain_name(name)?;
            let spec = DomainSpec::from_json(&fs::read_to_string(domain_path(dir, name))?)?;
            if spec.name != *name {
                return Err(Error::SchemaError(format!("{name}.json holds domain {}", spec.name)));
            }
            domains.insert(name.clone(), spec);
        }
        let map = Registry::merged_map(domains.values())?;
        Ok(Registry {
            domains,
            map,
            tagger: load_tagger(dir)?,
        })
    }
}

fn domain_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(DOMAINS_DIR).join(format!("{name}.json"))
}

fn load_tagger(dir: &Path) -> Result<Option<TaggerModel>> {
    let p = dir.join(DAP_MODEL);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(TaggerModel::read_jsonl(BufReader::new(fs::File::open(p)?))?))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;

    pub(crate) fn coffee() -> SpecFile {
        SpecFile::from_json(
            r#"{
              "name": "coffee",
              "intents": [{
                "name": "IN:ORDER_COFFEE",
                "examples": ["get me a latte", "order a coffee", "i want an espresso please",
                             "can i get a flat white", "coffee for pickup at noon"],
                "slots": [
                  {"name": "SL:DRINK_NAME", "agnostic_type": "SL:DELIVERABLE", "required": true,
                   "examples": ["latte", "espresso", "flat white", "cappuccino", "mocha"]},
                  {"name": "SL:PICKUP_TIME", "agnostic_type": "SL:SCOPE_TEMPORAL",
                   "examples": ["at noon", "in ten minutes", "at 8 am", "tomorrow morning", "now"]}
                ]
              }]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn coffee_spec_accepted() {
        let spec = DomainSpec::from_spec_file(&coffee()).unwrap();
        assert_eq!(
            spec.templates,
            vec![
                FrameTemplate::new("coffee", "IN:ORDER_COFFEE", vec!["SL:DRINK_NAME".into()]),
                FrameTemplate::new(
                    "coffee",
                    "IN:ORDER_COFFEE",
                    vec!["SL:DRINK_NAME".into(), "SL:PICKUP_TIME".into()]
                ),
            ]
        );
        assert_eq!(spec.psi_extension["SL:PICKUP_TIME"], AgnosticLabel::ScopeTemporal);
        assert_eq!(spec.labels(), vec!["IN:ORDER_COFFEE", "SL:DRINK_NAME", "SL:PICKUP_TIME"]);
        let mut reg = Registry::new();
        reg.register(spec).unwrap();
        assert_eq!(reg.map().get("SL:DRINK_NAME"), Some(AgnosticLabel::Deliverable));
    }

    #[test]
    fn schema_errors() {
        let mut bad = coffee();
        bad.intents[0].slots[0].agnostic_type = "SL:NOT_A_TYPE".into();
        assert!(matches!(DomainSpec::from_spec_file(&bad), Err(Error::UnknownAgnosticType(_))));
        let mut bad = coffee();
        bad.intents[0].slots[0].agnostic_type = "IN:INTENT".into();
        assert!(matches!(DomainSpec::from_spec_file(&bad), Err(Error::UnknownAgnosticType(_))));
        let mut dup = coffee();
        dup.intents.push(dup.intents[0].clone());
        assert!(matches!(DomainSpec::from_spec_file(&dup), Err(Error::DuplicateTemplate(_))));
        let mut bad = coffee();
        bad.intents[0].name = "ORDER".into();
        assert!(matches!(DomainSpec::from_spec_file(&bad), Err(Error::SchemaError(_))));
        let mut bad = coffee();
        bad.name = "../etc".into();
        assert!(matches!(DomainSpec::from_spec_file(&bad), Err(Error::SchemaError(_))));
        assert!(matches!(
            SpecFile::from_json(r#"{"name":"x","intents":[],"extra":1}"#),
            Err(Error::SchemaError(_))
        ));
    }

    #[test]
    fn conflicting_map_rejected_atomically() {
        let mut reg = Registry::new();
        let mut f = coffee();
        // builtin maps DATE_TIME to SCOPE_TEMPORAL
        f.intents[0].slots[1].name = "SL:DATE_TIME".into();
        f.intents[0].slots[1].agnostic_type = "SL:NUMS".into();
        let before = reg.clone();
        assert!(matches!(reg.register_file(&f), Err(Error::MappingConflict { .. })));
        assert_eq!(reg, before);
    }

    #[test]
    fn finalize_and_missing_examples() {
        let e = HashedEmbedder::default();
        let spec = DomainSpec::from_spec_file(&coffee()).unwrap();
        let cfg = TrainConfig::default();
        let a = finalize_domain(&spec, &cfg, &e).unwrap();
        let b = finalize_domain(&spec, &cfg, &e).unwrap();
        assert_eq!(a.head.as_ref().unwrap().to_json(), b.head.as_ref().unwrap().to_json());
        assert_eq!(a.head.as_ref().unwrap().labels, spec.labels());

        let mut f = coffee();
        f.intents[0].slots[1].examples.clear();
        let spec = DomainSpec::from_spec_file(&f).unwrap();
        match finalize_domain(&spec, &cfg, &e) {
            Err(Error::MissingExamples(l)) => assert_eq!(l, "SL:PICKUP_TIME"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn optional_subsets() {
        let intent = IntentDecl {
            name: "IN:X".into(),
            examples: vec![],
            slots: ["SL:A", "SL:B", "SL:C"]
                .iter()
                .map(|n| SlotDecl {
                    name: n.to_string(),
                    agnostic_type: "SL:NUMS".into(),
                    examples: vec![],
                    required: *n == "SL:A",
                })
                .collect(),
        };
        let t = expand_templates("d", &intent).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|t| t.slots.contains(&"SL:A".to_string())));
    }

    #[test]
    fn empty_inventory() {
        assert!(build_inventory_from_corpus("alarm", &[]).is_empty());
    }

    #[test]
    fn replace_domain() {
        let mut reg = Registry::new();
        reg.register_file(&coffee()).unwrap();
        let mut f = coffee();
        f.intents[0].slots[1].agnostic_type = "SL:NUMS".into();
        reg.register_file(&f).unwrap();
        assert_eq!(reg.map().get("SL:PICKUP_TIME"), Some(AgnosticLabel::Nums));
        assert_eq!(reg.domains().count(), 1);
    }
}
