//! Dialog domain types and the bidirectional mapping between structured
//! annotations and delimited token-text spans.
//!
//! A [`DialogState`] is the accumulative slot-value summary carried across
//! turns; it serializes to a flat bracketed span (`[hotel] area south ...`)
//! and parses back with a [`SlotLexicon`] for slot/value boundary lookahead.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("malformed span: {0}")]
    MalformedSpan(String),
}

/// The five span kinds delimited by `<sos_*>`/`<eos_*>` markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpanKind {
    User,
    State,
    Db,
    Act,
    Response,
}

impl SpanKind {
    pub const ALL: [SpanKind; 5] = [
        SpanKind::User,
        SpanKind::State,
        SpanKind::Db,
        SpanKind::Act,
        SpanKind::Response,
    ];

    /// Short key used inside the markers: u, b, db, a, r.
    pub fn key(self) -> &'static str {
        match self {
            SpanKind::User => "u",
            SpanKind::State => "b",
            SpanKind::Db => "db",
            SpanKind::Act => "a",
            SpanKind::Response => "r",
        }
    }

    pub fn sos(self) -> &'static str {
        match self {
            SpanKind::User => "<sos_u>",
            SpanKind::State => "<sos_b>",
            SpanKind::Db => "<sos_db>",
            SpanKind::Act => "<sos_a>",
            SpanKind::Response => "<sos_r>",
        }
    }

    pub fn eos(self) -> &'static str {
        match self {
            SpanKind::User => "<eos_u>",
            SpanKind::State => "<eos_b>",
            SpanKind::Db => "<eos_db>",
            SpanKind::Act => "<eos_a>",
            SpanKind::Response => "<eos_r>",
        }
    }
}

/// Wraps a span body in its start/end markers. An empty body still yields
/// both markers so the span grammar is identical at every turn.
pub fn wrap_span(kind: SpanKind, body: &str) -> String {
    if body.is_empty() {
        format!("{} {}", kind.sos(), kind.eos())
    } else {
        format!("{} {} {}", kind.sos(), body, kind.eos())
    }
}

/// Accumulative dialog state: domain -> slot -> value, all lowercase.
///
/// Later writes to the same (domain, slot) overwrite earlier ones; states
/// grow monotonically otherwise. Serialization order is deterministic
/// (lexicographic domains, then slots) regardless of insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogState {
    entries: BTreeMap<String, BTreeMap<String, String>>,
}

impl DialogState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of (domain, slot) pairs.
    pub fn slot_count(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Last-write-wins insert. Empty strings violate the state invariants.
    pub fn insert(&mut self, domain: &str, slot: &str, value: &str) {
        debug_assert!(
            !domain.is_empty() && !slot.is_empty() && !value.is_empty(),
            "empty domain/slot/value"
        );
        self.entries
            .entry(domain.to_lowercase())
            .or_default()
            .insert(slot.to_lowercase(), value.to_lowercase());
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.entries.get(domain)?.get(slot).map(String::as_str)
    }

    pub fn domain(&self, domain: &str) -> Option<&BTreeMap<String, String>> {
        self.entries.get(domain)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, String>)> {
        self.entries.iter().map(|(d, m)| (d.as_str(), m))
    }

    /// True when every (domain, slot, value) of `other` is present unchanged.
    pub fn contains_all(&self, other: &DialogState) -> bool {
        other.iter().all(|(d, slots)| {
            slots
                .iter()
                .all(|(s, v)| self.get(d, s) == Some(v.as_str()))
        })
    }
}

/// Serializes a state to its span text: `[domain] slot value ...` with
/// lexicographic domain and slot order; the empty state serializes to "".
pub fn serialize_state(state: &DialogState) -> String {
    let mut buf = String::new();
    for (domain, slots) in state.iter() {
        if !buf.is_empty() {
            buf.push(' ');
        }
        buf.push('[');
        buf.push_str(domain);
        buf.push(']');
        for (slot, value) in slots {
            buf.push(' ');
            buf.push_str(slot);
            buf.push(' ');
            buf.push_str(value);
        }
    }
    buf
}

/// Known informable slots per domain; required by the span parser to split
/// slot names from multi-word values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotLexicon {
    slots: BTreeMap<String, BTreeSet<String>>,
}

impl SlotLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, domain: &str, slot: &str) {
        self.slots
            .entry(domain.to_lowercase())
            .or_default()
            .insert(slot.to_lowercase());
    }

    pub fn knows_domain(&self, domain: &str) -> bool {
        self.slots.contains_key(domain)
    }

    pub fn is_slot(&self, domain: &str, token: &str) -> bool {
        self.slots
            .get(domain)
            .map(|s| s.contains(token))
            .unwrap_or(false)
    }

    pub fn slots(&self, domain: &str) -> impl Iterator<Item = &str> {
        self.slots
            .get(domain)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }
}

fn is_domain_marker(token: &str) -> bool {
    token.len() > 2 && token.starts_with('[') && token.ends_with(']')
}

/// Parses span text produced by [`serialize_state`]. Values may span several
/// tokens; a value ends at the next known slot of the current domain or at
/// the next domain marker.
pub fn parse_state(text: &str, lexicon: &SlotLexicon) -> Result<DialogState, StateError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut state = DialogState::new();
    let mut domain: Option<String> = None;
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i];
        if is_domain_marker(tok) {
            let name = &tok[1..tok.len() - 1];
            if !lexicon.knows_domain(name) {
                return Err(StateError::MalformedSpan(format!(
                    "unknown domain marker '{tok}'"
                )));
            }
            domain = Some(name.to_string());
            i += 1;
            continue;
        }
        let Some(dom) = domain.as_deref() else {
            return Err(StateError::MalformedSpan(format!(
                "token '{tok}' before any domain marker"
            )));
        };
        if !lexicon.is_slot(dom, tok) {
            return Err(StateError::MalformedSpan(format!(
                "expected a slot of [{dom}], found '{tok}'"
            )));
        }
        let slot = tok;
        let mut value_tokens: Vec<&str> = Vec::new();
        i += 1;
        while i < tokens.len() && !is_domain_marker(tokens[i]) && !lexicon.is_slot(dom, tokens[i]) {
            value_tokens.push(tokens[i]);
            i += 1;
        }
        if value_tokens.is_empty() {
            return Err(StateError::MalformedSpan(format!(
                "slot '{slot}' of [{dom}] has no value"
            )));
        }
        state.insert(dom, slot, &value_tokens.join(" "));
    }
    Ok(state)
}

/// Database lookup outcome for one turn: the raw match count plus the
/// bucketed single-token form used in sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DbResult {
    pub match_count: usize,
}

impl DbResult {
    pub fn new(match_count: usize) -> Self {
        Self { match_count }
    }

    pub fn bucket(self) -> DbBucket {
        match self.match_count {
            0 => DbBucket::Zero,
            1 => DbBucket::One,
            2 => DbBucket::Two,
            3 => DbBucket::Three,
            _ => DbBucket::More,
        }
    }

    pub fn token(self) -> &'static str {
        self.bucket().token()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbBucket {
    Zero,
    One,
    Two,
    Three,
    More,
}

impl DbBucket {
    pub const TOKENS: [&'static str; 5] = ["db_0", "db_1", "db_2", "db_3", "db_more"];

    pub fn token(self) -> &'static str {
        match self {
            DbBucket::Zero => "db_0",
            DbBucket::One => "db_1",
            DbBucket::Two => "db_2",
            DbBucket::Three => "db_3",
            DbBucket::More => "db_more",
        }
    }
}

/// One dialog exchange. `state` and `act` are `None` for unlabeled turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "t")]
    pub index: usize,
    pub user: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<DialogState>,
    pub db: DbResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act: Option<String>,
    pub response: String,
}

impl Turn {
    pub fn is_labeled(&self) -> bool {
        self.state.is_some() && self.act.is_some()
    }
}

/// A scripted change of one goal constraint at a given turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalChange {
    pub turn: usize,
    pub domain: String,
    pub slot: String,
    pub value: String,
}

/// What the user wants: per-domain constraints, requested attributes, and
/// any mid-dialog constraint changes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserGoal {
    #[serde(default)]
    pub constraints: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub requests: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub changes: Vec<GoalChange>,
}

impl UserGoal {
    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty() && self.requests.is_empty()
    }

    /// Constraints after applying every scripted change (last write wins).
    pub fn final_constraints(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        let mut out = self.constraints.clone();
        for ch in &self.changes {
            out.entry(ch.domain.clone())
                .or_default()
                .insert(ch.slot.clone(), ch.value.clone());
        }
        out
    }
}

/// A full dialog: contiguous 1-based turns plus the driving goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub goal: UserGoal,
    pub turns: Vec<Turn>,
}

impl Dialog {
    /// Number of turns T.
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Turn t (1-based).
    pub fn turn(&self, t: usize) -> Option<&Turn> {
        self.turns.get(t.checked_sub(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> SlotLexicon {
        let mut lex = SlotLexicon::new();
        lex.add("hotel", "area");
        lex.add("hotel", "pricerange");
        lex.add("restaurant", "food");
        lex
    }

    #[test]
    fn serialize_empty_state() {
        assert_eq!(serialize_state(&DialogState::new()), "");
    }

    #[test]
    fn serialize_single_domain() {
        let mut s = DialogState::new();
        s.insert("hotel", "pricerange", "moderate");
        s.insert("hotel", "area", "south");
        assert_eq!(
            serialize_state(&s),
            "[hotel] area south pricerange moderate"
        );
    }

    #[test]
    fn serialize_two_domains_lexicographic() {
        let mut s = DialogState::new();
        s.insert("restaurant", "food", "thai");
        s.insert("hotel", "area", "south");
        assert_eq!(serialize_state(&s), "[hotel] area south [restaurant] food thai");
    }

    #[test]
    fn serialize_is_insertion_order_independent() {
        let mut a = DialogState::new();
        a.insert("hotel", "area", "south");
        a.insert("hotel", "pricerange", "cheap");
        let mut b = DialogState::new();
        b.insert("hotel", "pricerange", "cheap");
        b.insert("hotel", "area", "south");
        assert_eq!(serialize_state(&a), serialize_state(&b));
    }

    #[test]
    fn parse_empty_is_empty_state() {
        assert_eq!(parse_state("", &lexicon()).unwrap(), DialogState::new());
    }

    #[test]
    fn parse_round_trip() {
        let mut s = DialogState::new();
        s.insert("hotel", "area", "south");
        s.insert("hotel", "pricerange", "moderate");
        let parsed = parse_state(&serialize_state(&s), &lexicon()).unwrap();
        assert_eq!(parsed, s);
    }

    #[test]
    fn parse_multi_word_value() {
        let parsed = parse_state("[hotel] area south side pricerange very cheap", &lexicon())
            .unwrap();
        assert_eq!(parsed.get("hotel", "area"), Some("south side"));
        assert_eq!(parsed.get("hotel", "pricerange"), Some("very cheap"));
    }

    #[test]
    fn parse_value_before_domain_is_malformed() {
        let err = parse_state("area south", &lexicon()).unwrap_err();
        assert!(matches!(err, StateError::MalformedSpan(_)));
    }

    #[test]
    fn parse_dangling_slot_is_malformed() {
        let err = parse_state("[hotel] area south pricerange", &lexicon()).unwrap_err();
        assert!(matches!(err, StateError::MalformedSpan(_)));
    }

    #[test]
    fn parse_unknown_domain_is_malformed() {
        assert!(parse_state("[spaceship] area south", &lexicon()).is_err());
    }

    #[test]
    fn wrap_span_empty_body() {
        assert_eq!(wrap_span(SpanKind::State, ""), "<sos_b> <eos_b>");
    }

    #[test]
    fn wrap_span_user() {
        assert_eq!(
            wrap_span(SpanKind::User, "i want a cheap hotel"),
            "<sos_u> i want a cheap hotel <eos_u>"
        );
    }

    #[test]
    fn wrap_span_db() {
        assert_eq!(wrap_span(SpanKind::Db, "db_2"), "<sos_db> db_2 <eos_db>");
    }

    #[test]
    fn db_bucketing() {
        assert_eq!(DbResult::new(0).token(), "db_0");
        assert_eq!(DbResult::new(1).token(), "db_1");
        assert_eq!(DbResult::new(2).token(), "db_2");
        assert_eq!(DbResult::new(3).token(), "db_3");
        assert_eq!(DbResult::new(4).token(), "db_more");
        assert_eq!(DbResult::new(400).token(), "db_more");
    }

    #[test]
    fn goal_final_constraints_apply_changes() {
        let mut goal = UserGoal::default();
        goal.constraints
            .entry("hotel".into())
            .or_default()
            .insert("area".into(), "south".into());
        goal.changes.push(GoalChange {
            turn: 3,
            domain: "hotel".into(),
            slot: "area".into(),
            value: "west".into(),
        });
        assert_eq!(
            goal.final_constraints()["hotel"]["area"],
            "west".to_string()
        );
    }
}
