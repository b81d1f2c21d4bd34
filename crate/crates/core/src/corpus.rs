//! Corpus loading, persistence, deterministic splitting and the low-resource
//! labeled/unlabeled partition.
//!
//! The on-disk format is a JSON array of dialogs:
//! `[{ "id", "goal", "turns": [{ "t", "user", "state", "db", "act", "response" }] }]`
//! where unlabeled turns omit `state` and `act`. The domain schema travels in
//! its own file (see [`crate::synth::DomainSchema`]).

use crate::state::{DbResult, Dialog, DialogState, Turn, UserGoal};
use crate::synth::DomainSchema;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid corpus json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema violation in dialog '{dialog_id}' at {path}: {message}")]
    SchemaViolation {
        dialog_id: String,
        path: String,
        message: String,
    },
    #[error("empty split: label proportion {proportion} of {n_dialogs} dialogs rounds to zero")]
    EmptySplit { proportion: f64, n_dialogs: usize },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
}

/// A set of dialogs plus the schema they are annotated against.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dialogs: Vec<Dialog>,
    pub schema: DomainSchema,
}

/// Loose mirror of the turn JSON; converted with field-path errors.
#[derive(Debug, Deserialize, Serialize)]
struct RawTurn {
    t: Option<usize>,
    user: Option<String>,
    #[serde(default)]
    state: Option<DialogState>,
    db: Option<usize>,
    #[serde(default)]
    act: Option<String>,
    response: Option<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawDialog {
    id: Option<String>,
    #[serde(default)]
    goal: Option<UserGoal>,
    turns: Option<Vec<RawTurn>>,
}

impl Corpus {
    pub fn new(dialogs: Vec<Dialog>, schema: DomainSchema) -> Self {
        Self { dialogs, schema }
    }

    pub fn len(&self) -> usize {
        self.dialogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.is_empty()
    }

    pub fn load(path: impl AsRef<Path>, schema: DomainSchema) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, schema)
    }

    pub fn from_json(text: &str, schema: DomainSchema) -> Result<Self, CorpusError> {
        let raw: Vec<RawDialog> = serde_json::from_str(text)?;
        let mut dialogs = Vec::with_capacity(raw.len());
        for (i, rd) in raw.into_iter().enumerate() {
            dialogs.push(convert_dialog(rd, i)?);
        }
        let corpus = Corpus::new(dialogs, schema);
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let text = self.to_json();
        std::fs::write(path, text).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.dialogs).expect("corpus serializes")
    }

    /// Structural checks: unique ids, contiguous 1-based turns, nonempty
    /// texts, and every state slot present in the schema.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut ids = BTreeSet::new();
        for dialog in &self.dialogs {
            let err = |path: &str, message: String| CorpusError::SchemaViolation {
                dialog_id: dialog.id.clone(),
                path: path.to_string(),
                message,
            };
            if !ids.insert(dialog.id.clone()) {
                return Err(err("id", "duplicate dialog id".into()));
            }
            if dialog.turns.is_empty() {
                return Err(err("turns", "dialog has no turns".into()));
            }
            for (i, turn) in dialog.turns.iter().enumerate() {
                let tp = format!("turns[{i}]");
                if turn.index != i + 1 {
                    return Err(err(
                        &format!("{tp}.t"),
                        format!("expected turn index {}, found {}", i + 1, turn.index),
                    ));
                }
                if turn.user.is_empty() {
                    return Err(err(&format!("{tp}.user"), "empty user utterance".into()));
                }
                if turn.response.is_empty() {
                    return Err(err(&format!("{tp}.response"), "empty response".into()));
                }
                if let Some(state) = &turn.state {
                    for (domain, slots) in state.iter() {
                        let Some(spec) = self.schema.domain(domain) else {
                            return Err(err(
                                &format!("{tp}.state.{domain}"),
                                "domain not in schema".into(),
                            ));
                        };
                        for (slot, value) in slots {
                            if !spec.informable.contains_key(slot) {
                                return Err(err(
                                    &format!("{tp}.state.{domain}.{slot}"),
                                    "slot not in schema".into(),
                                ));
                            }
                            if slot.is_empty() || value.is_empty() {
                                return Err(err(
                                    &format!("{tp}.state.{domain}.{slot}"),
                                    "empty slot or value".into(),
                                ));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn convert_dialog(raw: RawDialog, index: usize) -> Result<Dialog, CorpusError> {
    let id = raw
        .id
        .ok_or_else(|| CorpusError::SchemaViolation {
            dialog_id: format!("#{index}"),
            path: "id".into(),
            message: "missing".into(),
        })?;
    let err = |path: &str| CorpusError::SchemaViolation {
        dialog_id: id.clone(),
        path: path.to_string(),
        message: "missing".into(),
    };
    let turns_raw = raw.turns.ok_or_else(|| err("turns"))?;
    let mut turns = Vec::with_capacity(turns_raw.len());
    for (i, rt) in turns_raw.into_iter().enumerate() {
        let tp = |field: &str| format!("turns[{i}].{field}");
        turns.push(Turn {
            index: rt.t.ok_or_else(|| err(&tp("t")))?,
            user: rt.user.ok_or_else(|| err(&tp("user")))?,
            state: rt.state,
            db: DbResult::new(rt.db.ok_or_else(|| err(&tp("db")))?),
            act: rt.act,
            response: rt.response.ok_or_else(|| err(&tp("response")))?,
        });
    }
    Ok(Dialog {
        id,
        goal: raw.goal.unwrap_or_default(),
        turns,
    })
}

/// Split fractions, label proportion and seed for deterministic sampling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub label_proportion: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
            label_proportion: 1.0,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.train <= 0.0 || self.dev <= 0.0 || self.test <= 0.0 {
            return Err(CorpusError::InvalidSpec(
                "train/dev/test fractions must be positive".into(),
            ));
        }
        if (self.train + self.dev + self.test - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSpec("fractions must sum to 1".into()));
        }
        if !(self.label_proportion > 0.0 && self.label_proportion <= 1.0) {
            return Err(CorpusError::InvalidSpec(
                "label_proportion must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic train/dev/test split: shuffle dialog indices with the seed,
/// then cut by rounded fractions (test takes the remainder).
pub fn split_corpus(
    corpus: &Corpus,
    spec: &SplitSpec,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    spec.validate()?;
    let n = corpus.len();
    let n_train = (spec.train * n as f64).round() as usize;
    let n_dev = (spec.dev * n as f64).round() as usize;
    if n_train == 0 || n_dev == 0 || n_train + n_dev >= n {
        return Err(CorpusError::InvalidSpec(format!(
            "split of {n} dialogs leaves an empty part (train {n_train}, dev {n_dev})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let pick = |idx: &[usize]| {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        Corpus::new(
            sorted.iter().map(|&i| corpus.dialogs[i].clone()).collect(),
            corpus.schema.clone(),
        )
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}

/// Draws `round(p * N)` dialogs uniformly at random as the labeled part; the
/// rest keep user/response/db but lose state and act annotations.
pub fn partition_labels(
    corpus: &Corpus,
    spec: &SplitSpec,
) -> Result<(Corpus, Corpus), CorpusError> {
    spec.validate()?;
    let n = corpus.len();
    let k = (spec.label_proportion * n as f64).round() as usize;
    if k == 0 {
        return Err(CorpusError::EmptySplit {
            proportion: spec.label_proportion,
            n_dialogs: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut labeled_idx = order[..k.min(n)].to_vec();
    labeled_idx.sort_unstable();
    let labeled_set: BTreeSet<usize> = labeled_idx.iter().copied().collect();
    let labeled = Corpus::new(
        labeled_idx
            .iter()
            .map(|&i| corpus.dialogs[i].clone())
            .collect(),
        corpus.schema.clone(),
    );
    let unlabeled = Corpus::new(
        (0..n)
            .filter(|i| !labeled_set.contains(i))
            .map(|i| strip_labels(&corpus.dialogs[i]))
            .collect(),
        corpus.schema.clone(),
    );
    Ok((labeled, unlabeled))
}

/// Drops state and act; keeps user, response and the observed db result.
pub fn strip_labels(dialog: &Dialog) -> Dialog {
    let mut out = dialog.clone();
    for turn in &mut out.turns {
        turn.state = None;
        turn.act = None;
    }
    out
}
