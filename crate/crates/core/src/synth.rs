//! Goal-driven synthetic dialog environment: a configurable domain schema
//! with an entity table, a templated user simulator, and a deterministic
//! system policy.
//!
//! The policy is a pure function of the current state, its DB result and the
//! parsed user move, so the recorded dialogs satisfy the Markov property
//! exactly; [`markov_gap`] verifies this by oracle replay.

use crate::corpus::Corpus;
use crate::state::{
    DbBucket, DbResult, Dialog, DialogState, GoalChange, SlotLexicon, Turn, UserGoal,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown slot '{slot}' for domain '{domain}'")]
    UnknownSlot { domain: String, slot: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("missing ground truth in dialog '{dialog_id}' turn {turn}: {reason}")]
    MissingGroundTruth {
        dialog_id: String,
        turn: usize,
        reason: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One entity of a domain's table: informable slot values plus requestable
/// attribute values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub slots: BTreeMap<String, String>,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
}

/// A domain: informable slots with finite value sets, requestable
/// attributes, and the entity table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub informable: BTreeMap<String, Vec<String>>,
    pub requestable: Vec<String>,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub domains: Vec<DomainSpec>,
}

impl DomainSchema {
    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn total_entities(&self) -> usize {
        self.domains.iter().map(|d| d.entities.len()).sum()
    }

    pub fn lexicon(&self) -> SlotLexicon {
        let mut lex = SlotLexicon::new();
        for dom in &self.domains {
            for slot in dom.informable.keys() {
                lex.add(&dom.name, slot);
            }
        }
        lex
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for dom in &self.domains {
            if dom.informable.is_empty() {
                return Err(SynthError::Schema(format!(
                    "domain '{}' has no informable slots",
                    dom.name
                )));
            }
            for (slot, values) in &dom.informable {
                if values.is_empty() {
                    return Err(SynthError::Schema(format!(
                        "slot '{}' of domain '{}' has an empty value set",
                        slot, dom.name
                    )));
                }
            }
            for ent in &dom.entities {
                for slot in dom.informable.keys() {
                    if !ent.slots.contains_key(slot) {
                        return Err(SynthError::Schema(format!(
                            "entity '{}' of domain '{}' lacks slot '{}'",
                            ent.id, dom.name, slot
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let schema: DomainSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        std::fs::write(path, text).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Built-in desk-scale schema: two domains, three informable slots each
    /// with four values, two requestables, twenty entities per domain with
    /// distinct slot combinations.
    pub fn default_desk() -> Self {
        Self::desk_sized(4, 20)
    }

    /// Desk schema with a configurable value-set size and entity count per
    /// domain. Entity slot combinations are distinct within a domain.
    pub fn desk_sized(values_per_slot: usize, entities_per_domain: usize) -> Self {
        let hotel_values: BTreeMap<&str, Vec<&str>> = [
            ("area", vec!["north", "south", "east", "west", "centre", "riverside", "hillside", "outskirts"]),
            ("pricerange", vec!["cheap", "moderate", "expensive", "luxury", "budget", "premium", "midrange", "deluxe"]),
            ("stars", vec!["one", "two", "three", "four", "five", "six", "seven", "eight"]),
        ]
        .into_iter()
        .collect();
        let restaurant_values: BTreeMap<&str, Vec<&str>> = [
            ("food", vec!["thai", "chinese", "italian", "british", "indian", "french", "mexican", "korean"]),
            ("pricerange", vec!["cheap", "moderate", "expensive", "luxury", "budget", "premium", "midrange", "deluxe"]),
            ("area", vec!["north", "south", "east", "west", "centre", "riverside", "hillside", "outskirts"]),
        ]
        .into_iter()
        .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0xD0C5EED);
        let hotel = build_domain(
            "hotel",
            &hotel_values,
            &["phone", "address"],
            values_per_slot,
            entities_per_domain,
            &mut rng,
        );
        let restaurant = build_domain(
            "restaurant",
            &restaurant_values,
            &["phone", "postcode"],
            values_per_slot,
            entities_per_domain,
            &mut rng,
        );
        DomainSchema {
            domains: vec![hotel, restaurant],
        }
    }
}

fn build_domain(
    name: &str,
    value_pool: &BTreeMap<&str, Vec<&str>>,
    requestable: &[&str],
    values_per_slot: usize,
    n_entities: usize,
    rng: &mut ChaCha8Rng,
) -> DomainSpec {
    let informable: BTreeMap<String, Vec<String>> = value_pool
        .iter()
        .map(|(slot, values)| {
            let take = values_per_slot.min(values.len());
            (
                slot.to_string(),
                values[..take].iter().map(|v| v.to_string()).collect(),
            )
        })
        .collect();
    let slots: Vec<&String> = informable.keys().collect();
    let mut combos: BTreeSet<Vec<usize>> = BTreeSet::new();
    let sizes: Vec<usize> = slots.iter().map(|s| informable[*s].len()).collect();
    let capacity: usize = sizes.iter().product();
    let n_entities = n_entities.min(capacity);
    while combos.len() < n_entities {
        let combo: Vec<usize> = sizes.iter().map(|&n| rng.gen_range(0..n)).collect();
        combos.insert(combo);
    }
    let entities = combos
        .iter()
        .enumerate()
        .map(|(i, combo)| {
            let slot_values: BTreeMap<String, String> = slots
                .iter()
                .zip(combo)
                .map(|(slot, &vi)| ((*slot).clone(), informable[*slot][vi].clone()))
                .collect();
            let attrs: BTreeMap<String, String> = requestable
                .iter()
                .map(|attr| (attr.to_string(), format!("{name}-{attr}-{i:02}")))
                .collect();
            Entity {
                id: format!("{name}_{i:02}"),
                slots: slot_values,
                attrs,
            }
        })
        .collect();
    DomainSpec {
        name: name.to_string(),
        informable,
        requestable: requestable.iter().map(|r| r.to_string()).collect(),
        entities,
    }
}

/// Deterministic DB query. Domains present in the state are filtered by
/// their constraints and the per-domain match counts are summed; the empty
/// state matches every entity in the schema.
pub fn query_db(schema: &DomainSchema, state: &DialogState) -> Result<DbResult, SynthError> {
    if state.is_empty() {
        return Ok(DbResult::new(schema.total_entities()));
    }
    let mut count = 0;
    for (domain, constraints) in state.iter() {
        let Some(spec) = schema.domain(domain) else {
            return Err(SynthError::UnknownSlot {
                domain: domain.to_string(),
                slot: constraints
                    .keys()
                    .next()
                    .cloned()
                    .unwrap_or_else(|| "?".into()),
            });
        };
        for slot in constraints.keys() {
            if !spec.informable.contains_key(slot) {
                return Err(SynthError::UnknownSlot {
                    domain: domain.to_string(),
                    slot: slot.clone(),
                });
            }
        }
        count += spec
            .entities
            .iter()
            .filter(|e| {
                constraints
                    .iter()
                    .all(|(slot, value)| e.slots.get(slot) == Some(value))
            })
            .count();
    }
    Ok(DbResult::new(count))
}

fn matches_in_domain(spec: &DomainSpec, constraints: &BTreeMap<String, String>) -> usize {
    spec.entities
        .iter()
        .filter(|e| {
            constraints
                .iter()
                .all(|(slot, value)| e.slots.get(slot) == Some(value))
        })
        .count()
}

/// One user move of the scripted agenda.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UserMove {
    /// Inform one or more (slot, value) constraints for a domain.
    Inform {
        domain: String,
        pairs: Vec<(String, String)>,
    },
    /// Overwrite one previously informed constraint.
    Change {
        domain: String,
        slot: String,
        value: String,
    },
    /// Request attribute values for a domain.
    Request { domain: String, attrs: Vec<String> },
    Bye,
}

/// Generator knobs. `n_dialogs`, `seed` and `goal_change_rate` mirror the
/// `gen-data` CLI; the shape knobs control goal size and turn pacing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_dialogs: usize,
    pub seed: u64,
    /// Per-dialog probability of one scripted constraint change.
    pub goal_change_rate: f64,
    pub min_domains: usize,
    pub max_domains: usize,
    pub min_constraints: usize,
    pub max_constraints: usize,
    pub max_requests: usize,
    /// Constraints informed per user turn.
    pub informs_per_turn: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_dialogs: 1,
            seed: 0,
            goal_change_rate: 0.3,
            min_domains: 1,
            max_domains: 2,
            min_constraints: 2,
            max_constraints: 3,
            max_requests: 2,
            informs_per_turn: 2,
        }
    }
}

impl GenConfig {
    pub fn new(n_dialogs: usize, seed: u64, goal_change_rate: f64) -> Self {
        Self {
            n_dialogs,
            seed,
            goal_change_rate,
            ..Self::default()
        }
    }

    /// Fixed-shape config: every dialog has 2 domains x 3 constraints paced
    /// two-then-one, one request turn per domain and a closing turn, i.e.
    /// exactly 7 turns when `goal_change_rate` is 0 (a change adds a turn).
    pub fn seven_turn(n_dialogs: usize, seed: u64, goal_change_rate: f64) -> Self {
        Self {
            n_dialogs,
            seed,
            goal_change_rate,
            min_domains: 2,
            max_domains: 2,
            min_constraints: 3,
            max_constraints: 3,
            max_requests: 1,
            informs_per_turn: 2,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_dialogs == 0 {
            return Err(SynthError::InvalidConfig("n_dialogs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.goal_change_rate) {
            return Err(SynthError::InvalidConfig(
                "goal_change_rate must be in [0, 1]".into(),
            ));
        }
        if self.min_domains == 0 || self.min_domains > self.max_domains {
            return Err(SynthError::InvalidConfig("bad domain range".into()));
        }
        if self.min_constraints == 0 || self.min_constraints > self.max_constraints {
            return Err(SynthError::InvalidConfig("bad constraint range".into()));
        }
        if self.max_requests == 0 || self.informs_per_turn == 0 {
            return Err(SynthError::InvalidConfig(
                "max_requests and informs_per_turn must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Generates a labeled corpus. Deterministic for a given (schema, config):
/// dialog i draws from an independent seeded stream.
pub fn generate_with(schema: &DomainSchema, config: &GenConfig) -> Result<Corpus, SynthError> {
    config.validate()?;
    schema.validate()?;
    let mut dialogs = Vec::with_capacity(config.n_dialogs);
    for i in 0..config.n_dialogs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        dialogs.push(generate_dialog(schema, config, format!("syn{i:05}"), &mut rng));
    }
    Ok(Corpus::new(dialogs, schema.clone()))
}

/// Spec-shaped entry point: `generate_corpus(schema, n, seed, rate)`.
pub fn generate_corpus(
    schema: &DomainSchema,
    n_dialogs: usize,
    seed: u64,
    goal_change_rate: f64,
) -> Result<Corpus, SynthError> {
    generate_with(schema, &GenConfig::new(n_dialogs, seed, goal_change_rate))
}

fn generate_dialog(
    schema: &DomainSchema,
    config: &GenConfig,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Dialog {
    // Goal: per domain, constraints copied from a target entity so the final
    // state always matches at least one row.
    let n_domains = rng.gen_range(config.min_domains..=config.max_domains.min(schema.domains.len()));
    let mut domain_order: Vec<usize> = (0..schema.domains.len()).collect();
    domain_order.shuffle(rng);
    domain_order.truncate(n_domains);

    let mut goal = UserGoal::default();
    let mut agenda: Vec<UserMove> = Vec::new();
    let mut change_request: Option<(String, String, String)> = None;

    for &di in &domain_order {
        let spec = &schema.domains[di];
        let entity = &spec.entities[rng.gen_range(0..spec.entities.len())];
        let k = rng
            .gen_range(config.min_constraints..=config.max_constraints)
            .min(spec.informable.len());
        let mut slots: Vec<&String> = spec.informable.keys().collect();
        slots.shuffle(rng);
        slots.truncate(k);
        let pairs: Vec<(String, String)> = slots
            .iter()
            .map(|s| ((*s).clone(), entity.slots[*s].clone()))
            .collect();
        for (s, v) in &pairs {
            goal.constraints
                .entry(spec.name.clone())
                .or_default()
                .insert(s.clone(), v.clone());
        }
        for chunk in pairs.chunks(config.informs_per_turn) {
            agenda.push(UserMove::Inform {
                domain: spec.name.clone(),
                pairs: chunk.to_vec(),
            });
        }
        let n_req = rng.gen_range(1..=config.max_requests.min(spec.requestable.len()));
        let mut attrs = spec.requestable.clone();
        attrs.shuffle(rng);
        attrs.truncate(n_req);
        attrs.sort();
        goal.requests.insert(spec.name.clone(), attrs.clone());
        agenda.push(UserMove::Request {
            domain: spec.name.clone(),
            attrs,
        });

        // One scripted change per dialog at most; it must keep the final
        // constraint set satisfiable, so search the value pool for a value
        // that still matches some entity.
        if change_request.is_none() && rng.gen_bool(config.goal_change_rate) {
            if let Some((slot, value)) = satisfiable_change(spec, &pairs, rng) {
                change_request = Some((spec.name.clone(), slot, value));
            }
        }
    }
    agenda.push(UserMove::Bye);

    // Insert the change right after the last inform of its domain.
    if let Some((domain, slot, value)) = change_request {
        let pos = agenda
            .iter()
            .rposition(|m| matches!(m, UserMove::Inform { domain: d, .. } if *d == domain))
            .map(|p| p + 1)
            .unwrap_or(agenda.len() - 1);
        agenda.insert(
            pos,
            UserMove::Change {
                domain,
                slot,
                value,
            },
        );
    }

    // Roll the dialog forward: the state folds user moves, the policy reacts.
    let mut state = DialogState::new();
    let mut turns = Vec::with_capacity(agenda.len());
    for (idx, mv) in agenda.iter().enumerate() {
        let t = idx + 1;
        let user = render_user(mv, rng);
        apply_move(&mut state, mv);
        let db = query_db(schema, &state).expect("generated states stay in schema");
        let (act, response) = policy(schema, &state, db, mv);
        if let UserMove::Change {
            domain,
            slot,
            value,
        } = mv
        {
            goal.changes.push(GoalChange {
                turn: t,
                domain: domain.clone(),
                slot: slot.clone(),
                value: value.clone(),
            });
        }
        turns.push(Turn {
            index: t,
            user,
            state: Some(state.clone()),
            db,
            act: Some(act),
            response,
        });
    }
    Dialog { id, goal, turns }
}

fn satisfiable_change(
    spec: &DomainSpec,
    pairs: &[(String, String)],
    rng: &mut ChaCha8Rng,
) -> Option<(String, String)> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    for &pi in &order {
        let (slot, old_value) = &pairs[pi];
        let mut values: Vec<&String> = spec.informable[slot]
            .iter()
            .filter(|v| *v != old_value)
            .collect();
        values.shuffle(rng);
        for value in values {
            let mut constraints: BTreeMap<String, String> =
                pairs.iter().cloned().collect();
            constraints.insert(slot.clone(), value.clone());
            if matches_in_domain(spec, &constraints) >= 1 {
                return Some((slot.clone(), value.clone()));
            }
        }
    }
    None
}

fn apply_move(state: &mut DialogState, mv: &UserMove) {
    match mv {
        UserMove::Inform { domain, pairs } => {
            for (slot, value) in pairs {
                state.insert(domain, slot, value);
            }
        }
        UserMove::Change {
            domain,
            slot,
            value,
        } => state.insert(domain, slot, value),
        UserMove::Request { .. } | UserMove::Bye => {}
    }
}

fn render_user(mv: &UserMove, rng: &mut ChaCha8Rng) -> String {
    match mv {
        UserMove::Inform { domain, pairs } => {
            let body = pairs
                .iter()
                .map(|(s, v)| format!("{s} {v}"))
                .collect::<Vec<_>>()
                .join(" and ");
            match rng.gen_range(0..3u8) {
                0 => format!("i am looking for a {domain} with {body}"),
                1 => format!("i need a {domain} with {body}"),
                _ => format!("please find me a {domain} with {body}"),
            }
        }
        UserMove::Change {
            domain,
            slot,
            value,
        } => match rng.gen_range(0..2u8) {
            0 => format!("actually , i want the {domain} {slot} to be {value} instead"),
            _ => format!("sorry , change the {domain} {slot} to {value} instead"),
        },
        UserMove::Request { domain, attrs } => {
            let body = attrs
                .iter()
                .map(|a| format!("the {a}"))
                .collect::<Vec<_>>()
                .join(" and ");
            match rng.gen_range(0..2u8) {
                0 => format!("what is {body} of the {domain} ?"),
                _ => format!("can you give me {body} of the {domain} ?"),
            }
        }
        UserMove::Bye => match rng.gen_range(0..2u8) {
            0 => "thank you , that is all".to_string(),
            _ => "thanks , goodbye".to_string(),
        },
    }
}

/// Deterministic system policy: a pure function of (state, db result, user
/// move). Returns the normalized act tokens and the delexicalized response.
pub fn policy(
    schema: &DomainSchema,
    state: &DialogState,
    db: DbResult,
    mv: &UserMove,
) -> (String, String) {
    match mv {
        UserMove::Inform { domain, .. } | UserMove::Change { domain, .. } => {
            match db.bucket() {
                DbBucket::Zero => (
                    format!("[{domain}] [nooffer]"),
                    format!("i am sorry , there is no such {domain} available"),
                ),
                DbBucket::More => {
                    let spec = schema.domain(domain).expect("domain in schema");
                    let open_slot = spec
                        .informable
                        .keys()
                        .find(|s| state.get(domain, s).is_none());
                    match open_slot {
                        Some(slot) => (
                            format!("[{domain}] [request] {slot}"),
                            format!(
                                "there are [value_count] such {domain}s . what {slot} do you prefer ?"
                            ),
                        ),
                        None => (
                            format!("[{domain}] [offer] name"),
                            format!("i recommend the [{domain}_name] for you"),
                        ),
                    }
                }
                _ => (
                    format!("[{domain}] [offer] name"),
                    format!("i recommend the [{domain}_name] . it is a great choice"),
                ),
            }
        }
        UserMove::Request { domain, attrs } => {
            let act = format!("[{domain}] [inform] {}", attrs.join(" "));
            let response = attrs
                .iter()
                .map(|a| format!("the {a} is [value_{a}]"))
                .collect::<Vec<_>>()
                .join(" and ");
            (act, format!("{response} ."))
        }
        UserMove::Bye => (
            "[general] [bye]".to_string(),
            "you are welcome . goodbye".to_string(),
        ),
    }
}

/// Rule-based parse of a simulator utterance back into its move. This is the
/// environment's own NLU, used for oracle replay; it fails on text that did
/// not come from the simulator templates.
pub fn parse_user(schema: &DomainSchema, utterance: &str) -> Result<UserMove, String> {
    let tokens: Vec<&str> = utterance.split_whitespace().collect();
    if tokens.is_empty() {
        return Err("empty utterance".into());
    }
    let find_domain = || -> Option<&DomainSpec> {
        tokens
            .iter()
            .find_map(|tok| schema.domains.iter().find(|d| d.name == *tok))
    };
    if tokens.iter().any(|t| *t == "thank" || *t == "thanks") {
        return Ok(UserMove::Bye);
    }
    if tokens.iter().any(|t| *t == "instead") {
        let spec = find_domain().ok_or("change without a domain")?;
        let slot_pos = tokens
            .iter()
            .position(|t| spec.informable.contains_key(*t))
            .ok_or("change without a known slot")?;
        let slot = tokens[slot_pos];
        // Template forms: "... {slot} to be {value} instead" / "... {slot} to {value} instead".
        let value = tokens[slot_pos + 1..]
            .iter()
            .find(|t| **t != "to" && **t != "be" && **t != "instead")
            .ok_or("change without a value")?;
        return Ok(UserMove::Change {
            domain: spec.name.clone(),
            slot: slot.to_string(),
            value: value.to_string(),
        });
    }
    if tokens.last() == Some(&"?") {
        let spec = find_domain().ok_or("request without a domain")?;
        let mut attrs: Vec<String> = tokens
            .iter()
            .filter(|t| spec.requestable.iter().any(|r| r == *t))
            .map(|t| t.to_string())
            .collect();
        attrs.dedup();
        if attrs.is_empty() {
            return Err("request without attributes".into());
        }
        return Ok(UserMove::Request {
            domain: spec.name.clone(),
            attrs,
        });
    }
    let spec = find_domain().ok_or("inform without a domain")?;
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if spec.informable.contains_key(tokens[i]) {
            if i + 1 < tokens.len() {
                pairs.push((tokens[i].to_string(), tokens[i + 1].to_string()));
                i += 2;
                continue;
            }
            return Err(format!("slot '{}' without a value", tokens[i]));
        }
        i += 1;
    }
    if pairs.is_empty() {
        return Err("inform without slot-value pairs".into());
    }
    Ok(UserMove::Inform {
        domain: spec.name.clone(),
        pairs,
    })
}

/// Oracle step: next (state, act, response) from a previous state and the
/// current user utterance.
fn oracle_step(
    schema: &DomainSchema,
    prev_state: &DialogState,
    utterance: &str,
) -> Result<(DialogState, String, String), String> {
    let mv = parse_user(schema, utterance)?;
    let mut state = prev_state.clone();
    apply_move(&mut state, &mv);
    let db = query_db(schema, &state).map_err(|e| e.to_string())?;
    let (act, response) = policy(schema, &state, db, &mv);
    Ok((state, act, response))
}

/// Fraction of turns where the oracle's output conditioned only on the
/// recorded previous state differs from its output conditioned on the full
/// utterance history. Zero by construction on corpora from this environment.
pub fn markov_gap(schema: &DomainSchema, corpus: &Corpus) -> Result<f64, SynthError> {
    let mut total = 0usize;
    let mut diffs = 0usize;
    for dialog in &corpus.dialogs {
        // Full-history replay folds all user moves from scratch.
        let mut full_state = DialogState::new();
        for (idx, turn) in dialog.turns.iter().enumerate() {
            let t = idx + 1;
            let ground = |reason: String| SynthError::MissingGroundTruth {
                dialog_id: dialog.id.clone(),
                turn: t,
                reason,
            };
            let recorded_prev = if idx == 0 {
                DialogState::new()
            } else {
                dialog.turns[idx - 1]
                    .state
                    .clone()
                    .ok_or_else(|| ground("previous turn has no state annotation".into()))?
            };
            let markov = oracle_step(schema, &recorded_prev, &turn.user)
                .map_err(|e| ground(e))?;
            let full = oracle_step(schema, &full_state, &turn.user).map_err(|e| ground(e))?;
            total += 1;
            if markov != full {
                diffs += 1;
            }
            full_state = full.0;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(diffs as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_schema() -> DomainSchema {
        // Ten entities in one domain; slot combos chosen by hand.
        let informable: BTreeMap<String, Vec<String>> = [
            (
                "area".to_string(),
                vec!["north".into(), "south".into(), "east".into(), "west".into()],
            ),
            (
                "pricerange".to_string(),
                vec!["cheap".into(), "moderate".into(), "expensive".into()],
            ),
        ]
        .into_iter()
        .collect();
        let combos = [
            ("north", "cheap"),
            ("north", "moderate"),
            ("south", "cheap"),
            ("south", "cheap"),
            ("south", "expensive"),
            ("east", "moderate"),
            ("east", "expensive"),
            ("west", "cheap"),
            ("west", "moderate"),
            ("west", "expensive"),
        ];
        let entities = combos
            .iter()
            .enumerate()
            .map(|(i, (area, price))| Entity {
                id: format!("hotel_{i}"),
                slots: [
                    ("area".to_string(), area.to_string()),
                    ("pricerange".to_string(), price.to_string()),
                ]
                .into_iter()
                .collect(),
                attrs: [("phone".to_string(), format!("p{i}"))].into_iter().collect(),
            })
            .collect();
        DomainSchema {
            domains: vec![DomainSpec {
                name: "hotel".into(),
                informable,
                requestable: vec!["phone".into()],
                entities,
            }],
        }
    }

    #[test]
    fn query_empty_state_matches_all() {
        let schema = fixture_schema();
        let db = query_db(&schema, &DialogState::new()).unwrap();
        assert_eq!(db.match_count, 10);
        assert_eq!(db.token(), "db_more");
    }

    #[test]
    fn query_no_match_is_db_0() {
        let schema = fixture_schema();
        let mut s = DialogState::new();
        s.insert("hotel", "area", "north");
        s.insert("hotel", "pricerange", "expensive");
        let db = query_db(&schema, &s).unwrap();
        assert_eq!(db.match_count, 0);
        assert_eq!(db.token(), "db_0");
    }

    #[test]
    fn query_two_matches_by_hand() {
        // "south cheap" appears twice in the fixture table.
        let schema = fixture_schema();
        let mut s = DialogState::new();
        s.insert("hotel", "area", "south");
        s.insert("hotel", "pricerange", "cheap");
        let db = query_db(&schema, &s).unwrap();
        assert_eq!(db.match_count, 2);
        assert_eq!(db.token(), "db_2");
    }

    #[test]
    fn query_unknown_slot_errors() {
        let schema = fixture_schema();
        let mut s = DialogState::new();
        s.insert("hotel", "parking", "yes");
        assert!(matches!(
            query_db(&schema, &s),
            Err(SynthError::UnknownSlot { .. })
        ));
    }

    #[test]
    fn generate_zero_dialogs_is_invalid() {
        let schema = DomainSchema::default_desk();
        assert!(matches!(
            generate_corpus(&schema, 0, 0, 0.0),
            Err(SynthError::InvalidConfig(_))
        ));
    }

    #[test]
    fn generated_states_accumulate_monotonically_without_changes() {
        let schema = DomainSchema::default_desk();
        let corpus = generate_corpus(&schema, 5, 0, 0.0).unwrap();
        for dialog in &corpus.dialogs {
            let mut prev = DialogState::new();
            for turn in &dialog.turns {
                let cur = turn.state.clone().unwrap();
                assert!(
                    cur.contains_all(&prev),
                    "state shrank in {} turn {}",
                    dialog.id,
                    turn.index
                );
                prev = cur;
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let schema = DomainSchema::default_desk();
        let a = generate_corpus(&schema, 8, 42, 0.5).unwrap();
        let b = generate_corpus(&schema, 8, 42, 0.5).unwrap();
        assert_eq!(
            serde_json::to_string(&a.dialogs).unwrap(),
            serde_json::to_string(&b.dialogs).unwrap()
        );
    }

    #[test]
    fn goal_change_touches_exactly_one_slot() {
        // Complete entity table so every single-slot change stays satisfiable.
        let mut schema = fixture_schema();
        let all: Vec<Entity> = ["north", "south", "east", "west"]
            .iter()
            .flat_map(|area| {
                ["cheap", "moderate", "expensive"].iter().map(|price| Entity {
                    id: format!("{area}_{price}"),
                    slots: [
                        ("area".to_string(), area.to_string()),
                        ("pricerange".to_string(), price.to_string()),
                    ]
                    .into_iter()
                    .collect(),
                    attrs: BTreeMap::new(),
                })
            })
            .collect();
        schema.domains[0].entities = all;
        let corpus = generate_with(
            &schema,
            &GenConfig {
                n_dialogs: 20,
                seed: 3,
                goal_change_rate: 1.0,
                min_domains: 1,
                max_domains: 1,
                ..GenConfig::default()
            },
        )
        .unwrap();
        let mut saw_change = false;
        for dialog in &corpus.dialogs {
            for ch in &dialog.goal.changes {
                saw_change = true;
                let k = ch.turn;
                let before = dialog.turns[k - 2].state.as_ref().unwrap();
                let after = dialog.turns[k - 1].state.as_ref().unwrap();
                let mut diff = 0;
                for (d, slots) in after.iter() {
                    for (s, v) in slots {
                        if before.get(d, s) != Some(v.as_str()) {
                            diff += 1;
                            assert_eq!(d, ch.domain);
                            assert_eq!(s, &ch.slot);
                            assert_eq!(v, &ch.value);
                        }
                    }
                }
                assert_eq!(diff, 1, "change must rewrite exactly one slot");
            }
        }
        assert!(saw_change, "rate 1.0 on a complete table must script changes");
    }

    #[test]
    fn db_consistency_on_generated_turns() {
        let schema = DomainSchema::default_desk();
        let corpus = generate_corpus(&schema, 10, 9, 0.4).unwrap();
        for dialog in &corpus.dialogs {
            for turn in &dialog.turns {
                let db = query_db(&schema, turn.state.as_ref().unwrap()).unwrap();
                assert_eq!(db, turn.db, "db mismatch in {} t{}", dialog.id, turn.index);
            }
        }
    }

    #[test]
    fn markov_gap_is_zero_on_generated_corpora() {
        let schema = DomainSchema::default_desk();
        for seed in [0, 7, 123] {
            let corpus = generate_corpus(&schema, 12, seed, 0.5).unwrap();
            assert_eq!(markov_gap(&schema, &corpus).unwrap(), 0.0);
        }
    }

    #[test]
    fn markov_gap_zero_on_single_turn_dialogs() {
        let schema = DomainSchema::default_desk();
        let mut corpus = generate_corpus(&schema, 3, 1, 0.0).unwrap();
        for d in &mut corpus.dialogs {
            d.turns.truncate(1);
        }
        assert_eq!(markov_gap(&schema, &corpus).unwrap(), 0.0);
    }

    #[test]
    fn markov_gap_positive_when_states_truncated() {
        // Dropping a slot from a recorded intermediate state makes the
        // Markov-conditioned oracle disagree with full-history replay.
        let schema = DomainSchema::default_desk();
        let corpus = generate_with(
            &schema,
            &GenConfig {
                n_dialogs: 6,
                seed: 11,
                goal_change_rate: 0.0,
                min_domains: 2,
                max_domains: 2,
                min_constraints: 3,
                max_constraints: 3,
                ..GenConfig::default()
            },
        )
        .unwrap();
        let mut broken = corpus.clone();
        for dialog in &mut broken.dialogs {
            // Remove everything from the first turn's state.
            let turn = &mut dialog.turns[0];
            turn.state = Some(DialogState::new());
        }
        let gap = markov_gap(&schema, &broken).unwrap();
        assert!(gap > 0.0, "truncated states must open a gap, got {gap}");
    }

    #[test]
    fn markov_gap_missing_ground_truth_on_external_text() {
        let schema = DomainSchema::default_desk();
        let mut corpus = generate_corpus(&schema, 1, 0, 0.0).unwrap();
        corpus.dialogs[0].turns[0].user = "completely untemplated chatter".into();
        assert!(matches!(
            markov_gap(&schema, &corpus),
            Err(SynthError::MissingGroundTruth { .. })
        ));
    }

    #[test]
    fn parse_user_round_trips_moves() {
        let schema = DomainSchema::default_desk();
        let corpus = generate_corpus(&schema, 6, 5, 0.5).unwrap();
        for dialog in &corpus.dialogs {
            for turn in &dialog.turns {
                parse_user(&schema, &turn.user).expect("simulator text parses");
            }
        }
    }

    #[test]
    fn seven_turn_preset_yields_seven_turns() {
        let schema = DomainSchema::default_desk();
        let corpus = generate_with(&schema, &GenConfig::seven_turn(12, 2, 0.0)).unwrap();
        for dialog in &corpus.dialogs {
            assert_eq!(dialog.len(), 7, "dialog {}", dialog.id);
        }
    }
}
