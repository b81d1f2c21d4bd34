//! Per-turn conditioning contexts and training sequences for each
//! architecture.
//!
//! The strategies differ only in which spans of the dialog history enter the
//! conditioning input:
//!
//! - `Mga`: previous state, previous response, current user turn.
//! - `SimpleTod`: every previous user/response pair, current user turn.
//! - `Ubar`: every previous turn's five spans, current user turn.
//! - `MgaInference`: the Markov context plus the current response; its
//!   target is (state, act) instead of (state, db, act, response).
//!
//! The target region of a training sequence is masked so that only state,
//! act and response tokens (with their end markers) carry loss; the db span
//! is generated as input but never trained on.

use crate::lm::Vocab;
use crate::state::{serialize_state, wrap_span, Dialog, SpanKind};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("turn {turn} is missing its {kind:?} annotation")]
    MissingAnnotation { turn: usize, kind: SpanKind },
    #[error("turn {turn} out of range for a dialog of {len} turns")]
    TurnOutOfRange { turn: usize, len: usize },
    #[error("sequence of {len} tokens exceeds the context limit {limit}")]
    SequenceTooLong { len: usize, limit: usize },
}

/// Context construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Mga,
    Simpletod,
    Ubar,
    MgaInference,
}

impl Strategy {
    pub const GENERATIVE: [Strategy; 3] = [Strategy::Mga, Strategy::Simpletod, Strategy::Ubar];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mga => "mga",
            Strategy::Simpletod => "simpletod",
            Strategy::Ubar => "ubar",
            Strategy::MgaInference => "mga-inference",
        }
    }

    pub fn parse(name: &str) -> Option<Strategy> {
        match name {
            "mga" => Some(Strategy::Mga),
            "simpletod" => Some(Strategy::Simpletod),
            "ubar" => Some(Strategy::Ubar),
            "mga-inference" | "mga_inference" => Some(Strategy::MgaInference),
            _ => None,
        }
    }

    /// Markov strategies read a bounded window of the history.
    pub fn is_markov(self) -> bool {
        matches!(self, Strategy::Mga | Strategy::MgaInference)
    }

    /// The inference strategy predicts (state, act) given the response.
    pub fn is_inference(self) -> bool {
        self == Strategy::MgaInference
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One completed turn as seen by the context builder: plain span texts. At
/// generation time these hold the model's own predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistTurn {
    pub user: String,
    pub state_text: String,
    pub db_token: String,
    pub act: String,
    pub response: String,
}

/// A span scheduled into a sequence: kind, owning turn, body text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtxSpan {
    pub kind: SpanKind,
    pub turn: usize,
    pub body: String,
}

impl CtxSpan {
    fn new(kind: SpanKind, turn: usize, body: impl Into<String>) -> Self {
        Self {
            kind,
            turn,
            body: body.into(),
        }
    }

    /// Label used in analysis outputs, e.g. `b3`, `u4`.
    pub fn label(&self) -> String {
        format!("{}{}", self.kind.key(), self.turn)
    }
}

/// Context spans from generation-time history. `response` is the current
/// turn's observed response, used only by the inference strategy.
pub fn context_spans_from_history(
    strategy: Strategy,
    history: &[HistTurn],
    user: &str,
    response: Option<&str>,
) -> Vec<CtxSpan> {
    let t = history.len() + 1;
    let mut spans = Vec::new();
    match strategy {
        Strategy::Mga | Strategy::MgaInference => {
            let (prev_state, prev_resp) = match history.last() {
                Some(h) => (h.state_text.as_str(), h.response.as_str()),
                None => ("", ""),
            };
            spans.push(CtxSpan::new(SpanKind::State, t - 1, prev_state));
            spans.push(CtxSpan::new(SpanKind::Response, t - 1, prev_resp));
            spans.push(CtxSpan::new(SpanKind::User, t, user));
            if strategy == Strategy::MgaInference {
                spans.push(CtxSpan::new(
                    SpanKind::Response,
                    t,
                    response.unwrap_or_default(),
                ));
            }
        }
        Strategy::Simpletod => {
            for (i, h) in history.iter().enumerate() {
                spans.push(CtxSpan::new(SpanKind::User, i + 1, h.user.clone()));
                spans.push(CtxSpan::new(SpanKind::Response, i + 1, h.response.clone()));
            }
            spans.push(CtxSpan::new(SpanKind::User, t, user));
        }
        Strategy::Ubar => {
            for (i, h) in history.iter().enumerate() {
                spans.push(CtxSpan::new(SpanKind::User, i + 1, h.user.clone()));
                spans.push(CtxSpan::new(SpanKind::State, i + 1, h.state_text.clone()));
                spans.push(CtxSpan::new(SpanKind::Db, i + 1, h.db_token.clone()));
                spans.push(CtxSpan::new(SpanKind::Act, i + 1, h.act.clone()));
                spans.push(CtxSpan::new(SpanKind::Response, i + 1, h.response.clone()));
            }
            spans.push(CtxSpan::new(SpanKind::User, t, user));
        }
    }
    spans
}

fn labeled_hist_turn(dialog: &Dialog, i: usize, need: &[SpanKind]) -> Result<HistTurn, ContextError> {
    let turn = &dialog.turns[i];
    let missing = |kind| ContextError::MissingAnnotation {
        turn: turn.index,
        kind,
    };
    let state_text = if need.contains(&SpanKind::State) {
        serialize_state(turn.state.as_ref().ok_or(missing(SpanKind::State))?)
    } else {
        String::new()
    };
    let act = if need.contains(&SpanKind::Act) {
        turn.act.clone().ok_or(missing(SpanKind::Act))?
    } else {
        String::new()
    };
    Ok(HistTurn {
        user: turn.user.clone(),
        state_text,
        db_token: turn.db.token().to_string(),
        act,
        response: turn.response.clone(),
    })
}

fn history_needs(strategy: Strategy) -> &'static [SpanKind] {
    match strategy {
        Strategy::Mga | Strategy::MgaInference => &[SpanKind::State],
        Strategy::Simpletod => &[],
        Strategy::Ubar => &[SpanKind::State, SpanKind::Act],
    }
}

/// Context spans for turn `t` of a labeled dialog.
pub fn context_spans(
    strategy: Strategy,
    dialog: &Dialog,
    t: usize,
) -> Result<Vec<CtxSpan>, ContextError> {
    if t == 0 || t > dialog.len() {
        return Err(ContextError::TurnOutOfRange {
            turn: t,
            len: dialog.len(),
        });
    }
    let need = history_needs(strategy);
    let hist_range = match strategy {
        // Markov strategies only materialize the previous turn.
        Strategy::Mga | Strategy::MgaInference => t.saturating_sub(2)..t - 1,
        _ => 0..t - 1,
    };
    let mut history = Vec::with_capacity(hist_range.len());
    for i in hist_range.clone() {
        history.push(labeled_hist_turn(dialog, i, need)?);
    }
    let user = &dialog.turns[t - 1].user;
    let response = dialog.turns[t - 1].response.as_str();
    let mut spans = context_spans_from_history(
        strategy,
        &history,
        user,
        strategy.is_inference().then_some(response),
    );
    // Re-number turns when the Markov window dropped the early history.
    if strategy.is_markov() {
        for span in &mut spans {
            if span.turn <= history.len() {
                span.turn = t - 1;
            } else {
                span.turn = t;
            }
        }
    }
    Ok(spans)
}

/// Renders spans to the flat context text.
pub fn render_spans(spans: &[CtxSpan]) -> String {
    spans
        .iter()
        .map(|s| wrap_span(s.kind, &s.body))
        .collect::<Vec<_>>()
        .join(" ")
}

/// The conditioning context for turn `t` as text.
pub fn build_context(strategy: Strategy, dialog: &Dialog, t: usize) -> Result<String, ContextError> {
    Ok(render_spans(&context_spans(strategy, dialog, t)?))
}

/// Token range of one span inside a built sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanSeg {
    pub kind: SpanKind,
    pub turn: usize,
    pub range: Range<usize>,
}

impl SpanSeg {
    pub fn label(&self) -> String {
        format!("{}{}", self.kind.key(), self.turn)
    }
}

/// One training example: token ids, per-token loss mask, the index where the
/// target region begins, and the context span layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub boundary: usize,
    pub turn_index: usize,
    pub spans: Vec<SpanSeg>,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

struct TargetSpan {
    kind: SpanKind,
    body: String,
    in_loss: bool,
}

fn target_spans(strategy: Strategy, dialog: &Dialog, t: usize) -> Result<Vec<TargetSpan>, ContextError> {
    let turn = &dialog.turns[t - 1];
    let missing = |kind| ContextError::MissingAnnotation { turn: t, kind };
    let state = turn.state.as_ref().ok_or(missing(SpanKind::State))?;
    let act = turn.act.as_ref().ok_or(missing(SpanKind::Act))?;
    let mut spans = vec![TargetSpan {
        kind: SpanKind::State,
        body: serialize_state(state),
        in_loss: true,
    }];
    if !strategy.is_inference() {
        spans.push(TargetSpan {
            kind: SpanKind::Db,
            body: turn.db.token().to_string(),
            in_loss: false,
        });
    }
    spans.push(TargetSpan {
        kind: SpanKind::Act,
        body: act.clone(),
        in_loss: true,
    });
    if !strategy.is_inference() {
        spans.push(TargetSpan {
            kind: SpanKind::Response,
            body: turn.response.clone(),
            in_loss: true,
        });
    }
    Ok(spans)
}

/// Builds the full training sequence for turn `t`: tokenized context plus
/// tokenized target with the loss mask of the masked conditional likelihood.
pub fn build_training_sequence(
    strategy: Strategy,
    vocab: &Vocab,
    dialog: &Dialog,
    t: usize,
    context_limit: usize,
) -> Result<TrainingSequence, ContextError> {
    let ctx = context_spans(strategy, dialog, t)?;
    let tgt = target_spans(strategy, dialog, t)?;

    let mut tokens: Vec<u32> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    let mut spans: Vec<SpanSeg> = Vec::new();

    for span in &ctx {
        let start = tokens.len();
        let ids = vocab.encode(&wrap_span(span.kind, &span.body));
        mask.extend(std::iter::repeat(false).take(ids.len()));
        tokens.extend(ids);
        spans.push(SpanSeg {
            kind: span.kind,
            turn: span.turn,
            range: start..tokens.len(),
        });
    }
    let boundary = tokens.len();

    for span in &tgt {
        let body_ids = vocab.encode(&span.body);
        tokens.push(vocab.id(SpanKind::sos(span.kind)).expect("sos in vocab"));
        mask.push(false);
        let n_body = body_ids.len();
        tokens.extend(body_ids);
        mask.extend(std::iter::repeat(span.in_loss).take(n_body));
        tokens.push(vocab.id(SpanKind::eos(span.kind)).expect("eos in vocab"));
        mask.push(span.in_loss);
    }

    if tokens.len() > context_limit {
        return Err(ContextError::SequenceTooLong {
            len: tokens.len(),
            limit: context_limit,
        });
    }
    Ok(TrainingSequence {
        tokens,
        loss_mask: mask,
        boundary,
        turn_index: t,
        spans,
    })
}

/// All training sequences of a labeled corpus, dialog by dialog, turn by turn.
pub fn build_corpus_sequences(
    strategy: Strategy,
    vocab: &Vocab,
    dialogs: &[Dialog],
    context_limit: usize,
) -> Result<Vec<TrainingSequence>, ContextError> {
    let mut out = Vec::new();
    for dialog in dialogs {
        for t in 1..=dialog.len() {
            out.push(build_training_sequence(
                strategy,
                vocab,
                dialog,
                t,
                context_limit,
            )?);
        }
    }
    Ok(out)
}
