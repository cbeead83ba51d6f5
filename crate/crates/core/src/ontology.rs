//! Label spaces, the domain-specific → domain-agnostic mapping, and the frame
//! types shared by every other module.
//!
//! Domain-specific labels follow the TopV2 naming convention (`IN:` for
//! intents, `SL:` for slots). Every slot label maps to one of eight coarse
//! agnostic slot types; every intent maps to the single [`AgnosticLabel::Intent`]
//! sentinel.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTENT_PREFIX: &str = "IN:";
pub const SLOT_PREFIX: &str = "SL:";
pub const AGNOSTIC_DOMAIN: &str = "agnostic";
pub const MAP_VERSION: u32 = 1;

/// The shipped mapping resource; kept byte-identical to
/// `load_builtin_map().to_json()`.
pub const BUILTIN_MAP_JSON: &str = include_str!("../resources/psi_v1.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelKind {
    Intent,
    Slot,
}

impl LabelKind {
    /// Classifies a label name by its prefix.
    pub fn of(name: &str) -> Option<LabelKind> {
        if name.starts_with(INTENT_PREFIX) {
            Some(LabelKind::Intent)
        } else if name.starts_with(SLOT_PREFIX) {
            Some(LabelKind::Slot)
        } else {
            None
        }
    }
}

/// A domain-specific label such as `SL:DATE_TIME` in the `alarm` domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub kind: LabelKind,
    pub name: String,
    pub domain: String,
}

impl Label {
    pub fn new(name: impl Into<String>, domain: impl Into<String>) -> Result<Label> {
        let name = name.into();
        let kind = LabelKind::of(&name).ok_or_else(|| {
            Error::SchemaError(format!("label {name:?} must start with IN: or SL:"))
        })?;
        if name.len() <= 3 {
            return Err(Error::SchemaError(format!("label {name:?} has an empty name")));
        }
        Ok(Label {
            kind,
            name,
            domain: domain.into(),
        })
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// The coarse label space shared by all domains: eight slot types plus the
/// intent sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AgnosticLabel {
    Deliverable,
    Recipient,
    ScopeTemporal,
    ScopeLoc,
    ScopeDisam,
    OtherOpenText,
    Nums,
    ProperName,
    Intent,
}

impl AgnosticLabel {
    pub const ALL: [AgnosticLabel; 9] = [
        AgnosticLabel::Deliverable,
        AgnosticLabel::Recipient,
        AgnosticLabel::ScopeTemporal,
        AgnosticLabel::ScopeLoc,
        AgnosticLabel::ScopeDisam,
        AgnosticLabel::OtherOpenText,
        AgnosticLabel::Nums,
        AgnosticLabel::ProperName,
        AgnosticLabel::Intent,
    ];

    pub const SLOTS: [AgnosticLabel; 8] = [
        AgnosticLabel::Deliverable,
        AgnosticLabel::Recipient,
        AgnosticLabel::ScopeTemporal,
        AgnosticLabel::ScopeLoc,
        AgnosticLabel::ScopeDisam,
        AgnosticLabel::OtherOpenText,
        AgnosticLabel::Nums,
        AgnosticLabel::ProperName,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgnosticLabel::Deliverable => "SL:DELIVERABLE",
            AgnosticLabel::Recipient => "SL:RECIPIENT",
            AgnosticLabel::ScopeTemporal => "SL:SCOPE_TEMPORAL",
            AgnosticLabel::ScopeLoc => "SL:SCOPE_LOC",
            AgnosticLabel::ScopeDisam => "SL:SCOPE_DISAM",
            AgnosticLabel::OtherOpenText => "SL:OTHER_OPEN_TEXT",
            AgnosticLabel::Nums => "SL:NUMS",
            AgnosticLabel::ProperName => "SL:PROPER_NAME",
            AgnosticLabel::Intent => "IN:INTENT",
        }
    }

    pub fn is_slot(self) -> bool {
        self != AgnosticLabel::Intent
    }
}

impl fmt::Display for AgnosticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgnosticLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgnosticLabel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::UnknownAgnosticType(s.to_string()))
    }
}

impl TryFrom<String> for AgnosticLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AgnosticLabel> for String {
    fn from(l: AgnosticLabel) -> String {
        l.as_str().to_string()
    }
}

/// Whitespace-tokenized input text. Original casing is preserved; consumers
/// that want case-insensitive features lowercase on their own.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(text: &str) -> Utterance {
        Utterance {
            tokens: text.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Utterance {
        Utterance { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Text covered by `[start, end)`, original casing.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.tokens[start..end].join(" ")
    }
}

/// A labeled half-open token range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Span {
        Span {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// An intent (spanning the whole utterance) plus non-overlapping slot spans.
///
/// The same type carries domain-specific frames and agnostic frames; in the
/// latter `domain` is [`AGNOSTIC_DOMAIN`] and all labels are agnostic names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub domain: String,
    pub intent: Span,
    pub slots: Vec<Span>,
}

impl Frame {
    /// Builds a frame over an utterance of `n` tokens. Slots are sorted by
    /// start offset and checked for bounds and overlap.
    pub fn new(
        domain: impl Into<String>,
        intent: impl Into<String>,
        n: usize,
        mut slots: Vec<Span>,
    ) -> Result<Frame> {
        slots.sort();
        for s in &slots {
            if s.start >= s.end || s.end > n {
                return Err(Error::InvalidFrame(format!(
                    "span [{}, {}) out of bounds for {n} tokens",
                    s.start, s.end
                )));
            }
        }
        for w in slots.windows(2) {
            if w[0].overlaps(&w[1]) {
                return Err(Error::InvalidFrame(format!(
                    "spans [{}, {}) and [{}, {}) overlap",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        Ok(Frame {
            domain: domain.into(),
            intent: Span::new(0, n, intent),
            slots,
        })
    }

    pub fn intent_name(&self) -> &str {
        &self.intent.label
    }

    pub fn n_tokens(&self) -> usize {
        self.intent.end
    }

    /// Slot label names, sorted: the frame's shape without geometry.
    pub fn slot_multiset(&self) -> Vec<String> {
        let mut v: Vec<String> = self.slots.iter().map(|s| s.label.clone()).collect();
        v.sort();
        v
    }
}

/// The many-to-one map from domain-specific slot labels to agnostic types.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OntologyMap {
    entries: BTreeMap<String, AgnosticLabel>,
}

#[derive(Serialize, Deserialize)]
struct MapFile {
    version: u32,
    slots: BTreeMap<String, AgnosticLabel>,
}

impl OntologyMap {
    pub fn new() -> OntologyMap {
        OntologyMap::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, AgnosticLabel)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn get(&self, slot: &str) -> Option<AgnosticLabel> {
        self.entries.get(slot).copied()
    }

    /// Adds `slot → agnostic`. Re-adding an identical entry is a no-op; a
    /// different target is a conflict and leaves the map unchanged.
    pub fn insert(&mut self, slot: &str, agnostic: AgnosticLabel) -> Result<()> {
        if LabelKind::of(slot) != Some(LabelKind::Slot) || !agnostic.is_slot() {
            return Err(Error::SchemaError(format!(
                "cannot map {slot} to {agnostic}: only slot labels map to slot types"
            )));
        }
        match self.entries.get(slot) {
            Some(existing) if *existing != agnostic => Err(Error::MappingConflict {
                label: slot.to_string(),
                existing: existing.to_string(),
                requested: agnostic.to_string(),
            }),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(slot.to_string(), agnostic);
                Ok(())
            }
        }
    }

    /// ψ over bare label names. Intents always map to the sentinel.
    pub fn map_name(&self, name: &str) -> Result<AgnosticLabel> {
        match LabelKind::of(name) {
            Some(LabelKind::Intent) => Ok(AgnosticLabel::Intent),
            Some(LabelKind::Slot) => self
                .entries
                .get(name)
                .copied()
                .ok_or_else(|| Error::UnknownLabel(name.to_string())),
            None => Err(Error::UnknownLabel(name.to_string())),
        }
    }

    pub fn map_label(&self, label: &Label) -> Result<AgnosticLabel> {
        self.map_name(&label.name)
    }

    /// Sorted multiset `{ψ(l)}` over the frame's slots; the intent is left out.
    pub fn frame_signature(&self, frame: &Frame) -> Result<Vec<AgnosticLabel>> {
        self.signature(frame.slots.iter().map(|s| s.label.as_str()))
    }

    /// Sorted multiset of agnostic types for a list of slot names.
    pub fn signature<'a>(
        &self,
        slots: impl IntoIterator<Item = &'a str>,
    ) -> Result<Vec<AgnosticLabel>> {
        let mut sig = slots
            .into_iter()
            .map(|s| self.map_name(s))
            .collect::<Result<Vec<_>>>()?;
        sig.sort();
        Ok(sig)
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            version: MAP_VERSION,
            slots: self.entries.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("map serializes");
        s.push('\n');
        s
    }

    pub fn from_json(json: &str) -> Result<OntologyMap> {
        let file: MapFile = serde_json::from_str(json)?;
        if file.version != MAP_VERSION {
            return Err(Error::SchemaError(format!(
                "unsupported map version {}",
                file.version
            )));
        }
        let mut map = OntologyMap::new();
        for (k, v) in file.slots {
            map.insert(&k, v)?;
        }
        Ok(map)
    }
}

/// The mapping table rows in their published order. Some slots appear under
/// more than one agnostic type; [`load_builtin_map`] keeps the first.
const TABLE: &[(AgnosticLabel, &[&str])] = &[
    (
        AgnosticLabel::Deliverable,
        &[
            "SL:TYPE_REACTION",
            "SL:TODO",
            "SL:TODO_NEW",
            "SL:METHOD_TIMER",
            "SL:TIMER_NAME",
            "SL:ALARM_NAME",
        ],
    ),
    (
        AgnosticLabel::Recipient,
        &[
            "SL:RECIPIENT",
            "SL:PERSON_REMINDED_ADDED",
            "SL:PERSON_REMINDED_REMOVED",
            "SL:PERSON_REMINDED",
            "SL:ATTENDEE_REMOVED",
            "SL:ATTENDEE_ADDED",
        ],
    ),
    (
        AgnosticLabel::ScopeTemporal,
        &[
            "SL:DATE_TIME",
            "SL:DATE_TIME_RECURRING",
            "SL:DURATION",
            "SL:PERIOD",
            "SL:RECURRING_DATE_TIME",
            "SL:TIME_ZONE",
            "SL:DATE_TIME_DEPARTURE",
            "SL:DATE_TIME_ARRIVAL",
            "SL:FREQUENCY",
            "SL:RECURRING_DATE_TIME_NEW",
            "SL:DATE_TIME_NEW",
            "SL:SCOPE_TEMPORAL_RECURRING",
        ],
    ),
    (
        AgnosticLabel::ScopeLoc,
        &[
            "SL:LOCATION",
            "SL:POINT_ON_MAP",
            "SL:LOCATION_HOME",
            "SL:LOCATION_USER",
            "SL:LOCATION_MODIFIER",
            "SL:WAYPOINT_ADDED",
            "SL:LOCATION_WORK",
        ],
    ),
    (
        AgnosticLabel::ScopeDisam,
        &[
            "SL:ORDINAL",
            "SL:TYPE_CONTENT",
            "SL:GROUP",
            "SL:RESOURCE",
            "SL:CONTENT_EMOJI",
            "SL:TYPE_CONTACT",
            "SL:MUTUAL_EMPLOYER",
            "SL:MUTUAL_SCHOOL",
            "SL:TYPE_INFO",
            "SL:MUTUAL_LOCATION",
            "SL:CONTACT_RELATED",
            "SL:MUSIC_GENRE",
            "SL:UNIT_DISTANCE",
            "SL:WEATHER_TEMPERATURE_UNIT",
            "SL:MEASUREMENT_UNIT",
            "SL:METHOD_RETRIEVAL_REMINDER",
        ],
    ),
    (
        AgnosticLabel::OtherOpenText,
        &[
            "SL:CATEGORY_EVENT",
            "SL:SEARCH_RADIUS",
            "SL:ATTRIBUTE_EVENT",
            "SL:CATEGORY_LOCATION",
            "SL:NAME_EVENT",
            "SL:ATTENDEE",
            "SL:ATTENDEE_EVENT",
            "SL:TYPE_RELATION",
            "SL:ORGANIZER_EVENT",
            "SL:TAG_MESSAGE",
            "SL:CONTENT_EXACT",
            "SL:MUSIC_TYPE",
            "SL:MUSIC_TRACK_TITLE",
            "SL:MUSIC_ALBUM_TITLE",
            "SL:MUSIC_PLAYLIST_TITLE",
            "SL:MUSIC_RADIO_ID",
            "SL:METHOD_TRAVEL",
            "SL:JOB",
            "SL:WEATHER_ATTRIBUTE",
            "SL:OBSTRUCTION_AVOID",
            "SL:ROAD_CONDITION_AVOID",
            "SL:ROAD_CONDITION",
        ],
    ),
    (AgnosticLabel::Nums, &["SL:AMOUNT", "SL:AGE"]),
    (
        AgnosticLabel::ProperName,
        &[
            "SL:NAME_EVENT",
            "SL:CONTACT",
            "SL:ORGANIZER_EVENT",
            "SL:SENDER",
            "SL:MUSIC_TRACK_TITLE",
            "SL:MUSIC_PROVIDER_NAME",
            "SL:MUSIC_ALBUM_TITLE",
            "SL:MUSIC_ARTIST_NAME",
            "SL:SOURCE",
            "SL:DESTINATION",
            "SL:PATH",
            "SL:PATH_AVOID",
            "SL:WAYPOINT_AVOID",
            "SL:LOCATION_CURRENT",
            "SL:PATH_AVOID",
            "SL:WAYPOINT_AVOID",
            "SL:LOCATION_CURRENT",
            "SL:WAYPOINT",
            "SL:ATTENDEE",
            "SL:NAME_APP",
        ],
    ),
];

/// Builds the TopV2 mapping. Rows are read top to bottom and the first
/// occurrence of a slot wins; later rows naming a different type are logged.
pub fn load_builtin_map() -> OntologyMap {
    let mut map = OntologyMap::new();
    for (agnostic, slots) in TABLE {
        for slot in slots.iter() {
            if let Err(Error::MappingConflict {
                label, existing, ..
            }) = map.insert(slot, *agnostic)
            {
                log::debug!("{label} listed under {agnostic} as well; keeping {existing}");
            }
        }
    }
    map
}

/// Slot labels listed under more than one agnostic type, with every type
/// they appear under in table order.
pub fn builtin_conflicts() -> BTreeMap<&'static str, Vec<AgnosticLabel>> {
    let mut seen: BTreeMap<&'static str, Vec<AgnosticLabel>> = BTreeMap::new();
    for (agnostic, slots) in TABLE {
        for slot in slots.iter() {
            let types = seen.entry(slot).or_default();
            if !types.contains(agnostic) {
                types.push(*agnostic);
            }
        }
    }
    seen.retain(|_, v| v.len() > 1);
    seen
}
