//! A small grammar-generated two-domain corpus (`alarm`, `reminder`) for
//! smoke-testing the pipeline without the real dataset.
//!
//! Both domains draw temporal, ordinal and duration phrases from the same
//! pools.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Corpus, Record, Split};
use crate::ontology::{Frame, Span, Utterance};

pub const TOY_DOMAINS: [&str; 2] = ["alarm", "reminder"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub per_domain: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            per_domain: 1000,
            seed: 7,
        }
    }
}

const DAYS: [&str; 7] = [
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];
const ORDINALS: [&str; 6] = ["first", "second", "third", "last", "next", "latest"];
// Alarm names come from the front of this pool and to-dos from the back;
// the middle third is shared.
const THINGS: [&str; 24] = [
    "wake up", "medication", "work", "school", "yoga", "nap", "swim class", "morning run",
    "gym", "take my pills", "walk the dog", "pick up the kids", "pack lunch", "laundry",
    "meeting prep", "piano practice",
    "call mom", "buy milk", "pay the rent", "water the plants", "email the landlord",
    "renew my passport", "feed the cat", "send the invoice",
];

const PREFIXES: [&str; 6] = ["", "", "", "hey", "ok", "please"];
const SUFFIXES: [&str; 6] = ["", "", "", "please", "thanks", "thank you"];

/// `(article, noun)` pairs a domain uses to refer to its items.
const ALARM_NOUNS: [(&str, &str); 4] = [("an", "alarm"), ("a", "wake up call"), ("an", "alert"), ("a", "buzzer")];
const REMINDER_NOUNS: [(&str, &str); 4] = [("a", "reminder"), ("a", "note"), ("an", "alert"), ("a", "memo")];

fn hour(rng: &mut ChaCha8Rng) -> String {
    rng.random_range(1..=12).to_string()
}

fn ampm(rng: &mut ChaCha8Rng) -> &'static str {
    if rng.random_bool(0.5) {
        "am"
    } else {
        "pm"
    }
}

fn date_time(rng: &mut ChaCha8Rng) -> String {
    let day = *DAYS.choose(rng).unwrap();
    match rng.random_range(0..10) {
        0 => format!("at {} {}", hour(rng), ampm(rng)),
        1 => format!("at {} {} {}", hour(rng), ["15", "30", "45"].choose(rng).unwrap(), ampm(rng)),
        2 => format!("tomorrow at {} {}", hour(rng), ampm(rng)),
        3 => format!("on {day}"),
        4 => format!("{day} morning"),
        5 => format!("on {day} at {} {}", hour(rng), ampm(rng)),
        6 => ["tonight", "tomorrow", "this evening", "this afternoon", "at noon", "at midnight"]
            .choose(rng)
            .unwrap()
            .to_string(),
        7 => format!("tomorrow {}", ["morning", "night", "evening"].choose(rng).unwrap()),
        8 => format!("{day} at {}", ["noon", "midnight"].choose(rng).unwrap()),
        _ => format!("at {} o'clock", hour(rng)),
    }
}

fn recurring(rng: &mut ChaCha8Rng) -> String {
    let day = *DAYS.choose(rng).unwrap();
    match rng.random_range(0..5) {
        0 => format!("every {day}"),
        1 => format!("every {} hours", rng.random_range(2..=8)),
        2 => format!("on {day}s"),
        _ => ["every day", "every weekday", "every morning", "daily", "on weekends", "every night"]
            .choose(rng)
            .unwrap()
            .to_string(),
    }
}

fn duration(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!("{} minutes", rng.random_range(2..=30)),
        1 => format!("{} more minutes", rng.random_range(2..=15)),
        2 => format!("{} hours", rng.random_range(2..=5)),
        _ => ["an hour", "half an hour", "a minute", "a few minutes"]
            .choose(rng)
            .unwrap()
            .to_string(),
    }
}

fn pick(rng: &mut ChaCha8Rng, pool: &[&str]) -> String {
    pool.choose(rng).unwrap().to_string()
}

fn fill(rng: &mut ChaCha8Rng, label: &str) -> String {
    match label {
        "SL:DATE_TIME" => date_time(rng),
        "SL:RECURRING_DATE_TIME" | "SL:PERIOD" => recurring(rng),
        "SL:DURATION" => duration(rng),
        "SL:ORDINAL" => pick(rng, &ORDINALS),
        "SL:ALARM_NAME" => pick(rng, &THINGS[..16]),
        "SL:TODO" => pick(rng, &THINGS[8..]),
        other => unreachable!("no filler for {other}"),
    }
}

// `{X}` is replaced by a filler for `SL:X`; `<n>`, `<a>` and `<ns>` by the
// domain's noun, the noun with its article, and the plural. `a|b` picks one
// word; `_` joins words inside an alternative.
const ALARM: &[(&str, &[&str])] = &[
    (
        "IN:CREATE_ALARM",
        &[
            "set|create|make|add <a> {DATE_TIME}",
            "wake me up {DATE_TIME}",
            "set|create|make|add <a> {DATE_TIME} called {ALARM_NAME}",
            "set|create|make|add <a> called {ALARM_NAME} {DATE_TIME}",
            "set|create|make|add <a> to {ALARM_NAME} {DATE_TIME}",
            "set|create|make|add <a> {DATE_TIME} {PERIOD}",
            "set|create|make|add <a> {PERIOD} to {ALARM_NAME}",
            "create|schedule <a> for {ALARM_NAME} {DATE_TIME} {PERIOD}",
            "new <n> for {ALARM_NAME}",
            "set|create|make|add <a> in {DURATION}",
        ],
    ),
    (
        "IN:DELETE_ALARM",
        &[
            "delete|cancel|remove|clear my <n> {DATE_TIME}",
            "delete|cancel|remove the <n> called {ALARM_NAME}",
            "remove|delete|cancel the {ORDINAL} <n>",
            "delete|cancel|remove|clear all <ns>",
            "delete|cancel|remove|clear the <n> to {ALARM_NAME}",
            "delete|cancel|remove the <n> {DATE_TIME} called {ALARM_NAME}",
            "remove|delete|cancel my <n> {PERIOD}",
        ],
    ),
    (
        "IN:GET_ALARM",
        &[
            "what <ns> do i have {DATE_TIME}",
            "show|list|display my <ns>",
            "do i have <a> to {ALARM_NAME}",
            "list|show my <ns> {PERIOD}",
            "is there <a> called {ALARM_NAME}",
            "what is the {ORDINAL} <n>",
        ],
    ),
    (
        "IN:SNOOZE_ALARM",
        &[
            "snooze|delay|postpone for {DURATION}",
            "snooze|delay|postpone the <n>",
            "snooze|delay|postpone the <n> for {DURATION}",
            "snooze|delay|postpone it for {DURATION}",
        ],
    ),
    (
        "IN:SILENCE_ALARM",
        &["stop|kill|end the <n>", "turn the <n> off", "silence it", "dismiss the {ORDINAL} <n>"],
    ),
];

const REMINDER: &[(&str, &[&str])] = &[
    (
        "IN:CREATE_REMINDER",
        &[
            "remind me to {TODO} {DATE_TIME}",
            "remind me {DATE_TIME} to {TODO}",
            "set|create|make|add <a> called {TODO} {DATE_TIME}",
            "set|create|make|add <a> for {TODO}",
            "remind me {RECURRING_DATE_TIME} to {TODO}",
            "create|schedule <a> to {TODO} {DATE_TIME} {RECURRING_DATE_TIME}",
            "remind me in {DURATION} to {TODO}",
            "set|create|make|add <a> {DATE_TIME}",
        ],
    ),
    (
        "IN:DELETE_REMINDER",
        &[
            "delete|cancel|remove|clear the <n> to {TODO}",
            "delete|cancel|remove my <ns> {DATE_TIME}",
            "remove|delete|cancel the {ORDINAL} <n>",
            "delete|cancel|remove|clear all <ns>",
            "delete|cancel|remove the <n> called {TODO}",
            "remove|delete|cancel my <n> {RECURRING_DATE_TIME}",
        ],
    ),
    (
        "IN:GET_REMINDER",
        &[
            "what are my <ns> {DATE_TIME}",
            "do i have <a> to {TODO}",
            "list|show my <ns>",
            "what is the {ORDINAL} <n>",
            "show|list|display my <ns> {RECURRING_DATE_TIME}",
            "is there <a> called {TODO} {DATE_TIME}",
        ],
    ),
    (
        "IN:SNOOZE_REMINDER",
        &["snooze|delay|postpone the <n> for {DURATION}", "remind me again in {DURATION}", "snooze|delay|postpone the <n>"],
    ),
];

/// Expands one pattern into tokens and slot spans.
fn realize(domain: &str, intent: &str, pattern: &str, rng: &mut ChaCha8Rng) -> (Utterance, Frame) {
    let nouns = if domain == "alarm" { &ALARM_NOUNS } else { &REMINDER_NOUNS };
    let (article, noun) = *nouns.choose(rng).unwrap();
    let mut tokens: Vec<String> = Vec::new();
    let mut spans = Vec::new();
    let prefix = *PREFIXES.choose(rng).unwrap();
    let suffix = *SUFFIXES.choose(rng).unwrap();
    tokens.extend(prefix.split_whitespace().map(str::to_string));
    for part in pattern.split_whitespace() {
        let words = match part {
            "<n>" => Some(noun.to_string()),
            "<a>" => Some(format!("{article} {noun}")),
            "<ns>" => Some(format!("{noun}s")),
            _ => None,
        };
        if let Some(words) = words {
            tokens.extend(words.split_whitespace().map(str::to_string));
        } else if let Some(name) = part.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            let label = format!("SL:{name}");
            let start = tokens.len();
            tokens.extend(fill(rng, &label).split_whitespace().map(str::to_string));
            // SL:DURATION in reminders is annotated as a plain point in time
            let label = if domain == "reminder" && label == "SL:DURATION" {
                "SL:DATE_TIME".to_string()
            } else {
                label
            };
            spans.push(Span::new(start, tokens.len(), label));
        } else if part.contains('|') {
            let alts: Vec<&str> = part.split('|').collect();
            tokens.extend(alts.choose(rng).unwrap().split('_').map(str::to_string));
        } else {
            tokens.push(part.to_string());
        }
    }
    tokens.extend(suffix.split_whitespace().map(str::to_string));
    let n = tokens.len();
    let frame = Frame::new(domain, intent, n, spans).expect("grammar spans are valid");
    (Utterance::from_tokens(tokens), frame)
}

fn split_for(rng: &mut ChaCha8Rng) -> Split {
    match rng.random_range(0..10) {
        0..=6 => Split::Train,
        7 => Split::Eval,
        _ => Split::Test,
    }
}

/// Generates the corpus. Same config, same records.
pub fn generate(cfg: ToyConfig) -> Corpus {
    let mut records = Vec::with_capacity(cfg.per_domain * TOY_DOMAINS.len());
    for (i, (d, grammar)) in TOY_DOMAINS.iter().zip([ALARM, REMINDER]).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(i as u64));
        for _ in 0..cfg.per_domain {
            let (intent, patterns) = grammar.choose(&mut rng).unwrap();
            let pattern = patterns.choose(&mut rng).unwrap();
            let (utterance, frame) = realize(d, intent, pattern, &mut rng);
            records.push(Record {
                utterance,
                frame,
                domain: d.to_string(),
                split: split_for(&mut rng),
            });
        }
    }
    Corpus::new(records)
}

/// The default toy corpus.
pub fn toy_corpus() -> Corpus {
    generate(ToyConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::load_builtin_map;

    #[test]
    fn deterministic_and_well_formed() {
        let a = toy_corpus();
        assert_eq!(a, toy_corpus());
        assert_eq!(a.records.len(), 2000);
        let map = load_builtin_map();
        for r in &a.records {
            map.frame_signature(&r.frame).unwrap();
            assert_eq!(r.frame.n_tokens(), r.utterance.len());
            let back = crate::dataset::parse_top_record(&r.to_top_string(), &r.domain, r.split).unwrap();
            assert_eq!(&back, r);
        }
        for d in TOY_DOMAINS {
            for s in Split::ALL {
                assert!(a.select(d, s).count() > 50, "{d} {s}");
            }
        }
    }

    #[test]
    fn seed_changes_output() {
        let a = generate(ToyConfig { per_domain: 50, seed: 1 });
        let b = generate(ToyConfig { per_domain: 50, seed: 2 });
        assert_ne!(a, b);
    }
}
