//! From probe projections to Yes/No tool-use decisions.
//!
//! Three policies share one input, [`ScoredItem`]:
//!
//! * **Naive** trusts the first generated token.
//! * **PYes** thresholds the normalized Yes-score `p_yes / (p_yes + p_no)`:
//!   Yes iff the score is strictly above `l`.
//! * **MeCo** keeps the verbal answer unless the first-token meta-cognition
//!   score says it is unreliable. A `Yes` survives iff `score >= l_yes`; a
//!   `No` survives iff `score <= l_no`. Each token class is only ever compared
//!   with its own threshold, and a score exactly at a threshold keeps the
//!   verbal answer.
//!
//! Thresholds are fitted by exhaustive search over midpoints between
//! consecutive distinct validation scores, plus sentinels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::probe::{ProbeError, ProbeSet};
use crate::store::{self, ActivationRecord, Role, StoreError};

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("item {item_id}: first token {token:?} is neither Yes nor No")]
    UnparseableResponse { item_id: u64, token: String },
    #[error("item {item_id}: Yes-score undefined because p_yes + p_no = 0")]
    UndefinedScore { item_id: u64 },
    #[error("item {item_id}: no meta-cognition score")]
    MissingScore { item_id: u64 },
    #[error("item {item_id}: meta-cognition score {score} is not finite")]
    NonFiniteScore { item_id: u64, score: f64 },
    #[error("item {item_id}: invalid probabilities p_yes={p_yes}, p_no={p_no}")]
    InvalidProbabilities { item_id: u64, p_yes: f64, p_no: f64 },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("layer window {window} is empty or outside a {layers}-layer model")]
    EmptyWindow { window: LayerWindow, layers: u32 },
    #[error("record for query {query_id} has role {found:?}, expected InferenceFirstToken")]
    RoleMismatch { query_id: u64, found: Role },
    #[error("record for query {query_id} is at layer {found}, expected {expected}")]
    LayerMismatch {
        query_id: u64,
        expected: u32,
        found: u32,
    },
    #[error("no first-token activation for item {item_id} at layer {layer}")]
    MissingActivation { item_id: u64, layer: u32 },
    #[error("duplicate first-token activation for query {query_id} at layer {layer}")]
    DuplicateActivation { query_id: u64, layer: u32 },
    #[error("policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = DecisionError> = std::result::Result<T, E>;

/// A binary answer: ground truth, verdict, or the parsed first token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn flip(self) -> Self {
        match self {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
        })
    }
}

/// First generated token, as text on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FirstToken {
    Yes,
    No,
    Other(String),
}

impl FirstToken {
    /// Case-insensitive match of `yes`/`no` after trimming whitespace and
    /// trailing punctuation. Anything else is `Other`.
    pub fn parse(text: &str) -> Self {
        let core = text
            .trim()
            .trim_end_matches(|c: char| c.is_ascii_punctuation())
            .to_ascii_lowercase();
        match core.as_str() {
            "yes" => FirstToken::Yes,
            "no" => FirstToken::No,
            _ => FirstToken::Other(text.to_string()),
        }
    }

    pub fn answer(&self) -> Option<Answer> {
        match self {
            FirstToken::Yes => Some(Answer::Yes),
            FirstToken::No => Some(Answer::No),
            FirstToken::Other(_) => None,
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            FirstToken::Yes => "Yes",
            FirstToken::No => "No",
            FirstToken::Other(t) => t,
        }
    }
}

impl From<Answer> for FirstToken {
    fn from(a: Answer) -> Self {
        match a {
            Answer::Yes => FirstToken::Yes,
            Answer::No => FirstToken::No,
        }
    }
}

impl Serialize for FirstToken {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for FirstToken {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Ok(FirstToken::parse(&text))
    }
}

/// How to treat first tokens that are neither Yes nor No.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenMode {
    #[default]
    Strict,
    /// Coerce to Yes: prefer consulting the tool.
    Lenient,
}

/// Per-item inference evidence, one line of the scored-item JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: u64,
    pub first_token: FirstToken,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_score: Option<f64>,
    pub p_yes: f64,
    pub p_no: f64,
    pub label: Answer,
}

impl ScoredItem {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p_yes >= 0.0
            && self.p_no >= 0.0
            && self.p_yes + self.p_no > 0.0
            && self.p_yes + self.p_no <= 1.0 + 1e-9;
        if !ok {
            return Err(DecisionError::InvalidProbabilities {
                item_id: self.item_id,
                p_yes: self.p_yes,
                p_no: self.p_no,
            });
        }
        Ok(())
    }

    fn token(&self, mode: TokenMode) -> Result<Answer> {
        match (self.first_token.answer(), mode) {
            (Some(a), _) => Ok(a),
            (None, TokenMode::Lenient) => Ok(Answer::Yes),
            (None, TokenMode::Strict) => Err(DecisionError::UnparseableResponse {
                item_id: self.item_id,
                token: self.first_token.as_str().to_string(),
            }),
        }
    }

    fn score(&self) -> Result<f64> {
        match self.meta_score {
            Some(s) if s.is_finite() => Ok(s),
            Some(score) => Err(DecisionError::NonFiniteScore {
                item_id: self.item_id,
                score,
            }),
            None => Err(DecisionError::MissingScore {
                item_id: self.item_id,
            }),
        }
    }
}

/// What a decision was based on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub first_token: FirstToken,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yes_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Answer,
    /// Whether the policy overrode the (possibly coerced) first token.
    pub flipped: bool,
    pub evidence: Evidence,
}

/// Projection of a first-token hidden state onto the probe at `layer_index`.
pub fn score_first_token(
    probes: &ProbeSet,
    layer_index: u32,
    record: &ActivationRecord,
) -> Result<f64> {
    let probe = probes.probe(layer_index)?;
    if record.role != Role::InferenceFirstToken {
        return Err(DecisionError::RoleMismatch {
            query_id: record.query_id,
            found: record.role,
        });
    }
    if record.layer_index != layer_index {
        return Err(DecisionError::LayerMismatch {
            query_id: record.query_id,
            expected: layer_index,
            found: record.layer_index,
        });
    }
    if record.vector.len() != probe.direction.len() {
        return Err(ProbeError::Shape(format!(
            "record for query {} has dimension {}, probe has {}",
            record.query_id,
            record.vector.len(),
            probe.direction.len()
        ))
        .into());
    }
    Ok(probe.project(&record.vector))
}

/// Fills `meta_score` for every item from first-token records at `layer_index`,
/// joining `item_id` to `query_id`. Records at other layers are ignored.
pub fn attach_scores(
    probes: &ProbeSet,
    layer_index: u32,
    records: &[ActivationRecord],
    items: &mut [ScoredItem],
) -> Result<()> {
    let mut by_query = std::collections::HashMap::new();
    for r in records.iter().filter(|r| r.layer_index == layer_index) {
        if by_query.insert(r.query_id, r).is_some() {
            return Err(DecisionError::DuplicateActivation {
                query_id: r.query_id,
                layer: layer_index,
            });
        }
    }
    for item in items.iter_mut() {
        let record = by_query
            .get(&item.item_id)
            .ok_or(DecisionError::MissingActivation {
                item_id: item.item_id,
                layer: layer_index,
            })?;
        item.meta_score = Some(score_first_token(probes, layer_index, record)?);
    }
    Ok(())
}

/// Inclusive range of layers counted from the end (`-1` is the last layer).
/// Non-negative bounds are absolute layer indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerWindow {
    pub start: i64,
    pub end: i64,
}

impl Default for LayerWindow {
    fn default() -> Self {
        Self { start: -5, end: -2 }
    }
}

impl fmt::Display for LayerWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for LayerWindow {
    type Err = String;

    /// Accepts `START..END` or `START:END`, e.g. `-5..-2`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s
            .split_once("..")
            .or_else(|| s.split_once(':'))
            .ok_or_else(|| format!("layer window {s:?} must look like START..END"))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<i64>()
                .map_err(|e| format!("layer window bound {t:?}: {e}"))
        };
        Ok(Self {
            start: parse(a)?,
            end: parse(b)?,
        })
    }
}

impl LayerWindow {
    pub fn resolve(&self, layers: u32) -> Result<std::ops::RangeInclusive<u32>> {
        let empty = || DecisionError::EmptyWindow {
            window: *self,
            layers,
        };
        let lo = store::resolve_layer(self.start, layers).map_err(|_| empty())?;
        let hi = store::resolve_layer(self.end, layers).map_err(|_| empty())?;
        if lo > hi {
            return Err(empty());
        }
        Ok(lo..=hi)
    }
}

/// Layer with the best held-out accuracy inside `window`; ties go to the
/// layer nearer the output.
pub fn select_layer(probes: &ProbeSet, window: LayerWindow) -> Result<u32> {
    let range = window.resolve(probes.layers)?;
    let mut best: Option<(u32, f64)> = None;
    for layer in range {
        let acc = probes.probe(layer)?.heldout_accuracy;
        if best.is_none_or(|(_, b)| acc >= b) {
            best = Some((layer, acc));
        }
    }
    best.map(|(l, _)| l).ok_or(DecisionError::EmptyWindow {
        window,
        layers: probes.layers,
    })
}

pub fn decide_naive(item: &ScoredItem, mode: TokenMode) -> Result<Decision> {
    let token = item.token(mode)?;
    Ok(Decision {
        verdict: token,
        flipped: false,
        evidence: Evidence {
            first_token: item.first_token.clone(),
            meta_score: item.meta_score,
            yes_score: None,
        },
    })
}

/// `p_yes / (p_yes + p_no)`.
pub fn yes_score(p_yes: f64, p_no: f64) -> Option<f64> {
    let total = p_yes + p_no;
    (total > 0.0).then(|| p_yes / total)
}

fn item_yes_score(item: &ScoredItem) -> Result<f64> {
    yes_score(item.p_yes, item.p_no).ok_or(DecisionError::UndefinedScore {
        item_id: item.item_id,
    })
}

/// Yes iff Yes-score `> l`. Never errors on `Other` first tokens, which are
/// reported as not flipped.
pub fn decide_p_yes(item: &ScoredItem, l: f64) -> Result<Decision> {
    let ys = item_yes_score(item)?;
    let verdict = if ys > l { Answer::Yes } else { Answer::No };
    Ok(Decision {
        verdict,
        flipped: item.first_token.answer().is_some_and(|t| t != verdict),
        evidence: Evidence {
            first_token: item.first_token.clone(),
            meta_score: item.meta_score,
            yes_score: Some(ys),
        },
    })
}

/// Dual-threshold thresholds. `NEG_INFINITY`/`INFINITY` encode "never flip"
/// for `l_yes`/`l_no` respectively.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualThresholds {
    pub l_yes: f64,
    pub l_no: f64,
}

impl DualThresholds {
    pub const NEVER_FLIP: Self = Self {
        l_yes: f64::NEG_INFINITY,
        l_no: f64::INFINITY,
    };

    /// Verdict for a Yes-token item with this score.
    pub fn judge_yes(&self, score: f64) -> Answer {
        if score >= self.l_yes {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    /// Verdict for a No-token item with this score.
    pub fn judge_no(&self, score: f64) -> Answer {
        if score <= self.l_no {
            Answer::No
        } else {
            Answer::Yes
        }
    }

    pub fn judge(&self, token: Answer, score: f64) -> Answer {
        match token {
            Answer::Yes => self.judge_yes(score),
            Answer::No => self.judge_no(score),
        }
    }
}

pub fn decide_meco(
    item: &ScoredItem,
    thresholds: DualThresholds,
    mode: TokenMode,
) -> Result<Decision> {
    let token = item.token(mode)?;
    let score = item.score()?;
    let verdict = thresholds.judge(token, score);
    Ok(Decision {
        verdict,
        flipped: verdict != token,
        evidence: Evidence {
            first_token: item.first_token.clone(),
            meta_score: Some(score),
            yes_score: None,
        },
    })
}

pub(crate) mod threshold_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("+inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Wire {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Wire::deserialize(d)? {
            Wire::Num(x) if x.is_finite() => Ok(x),
            Wire::Num(x) => Err(de::Error::custom(format!("non-finite threshold {x}"))),
            Wire::Text(t) => match t.as_str() {
                "+inf" | "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("invalid threshold {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PolicyKind {
    Naive,
    PYes {
        #[serde(with = "threshold_serde")]
        l: f64,
    },
    MeCo {
        layer_index: u32,
        #[serde(with = "threshold_serde")]
        l_yes: f64,
        #[serde(with = "threshold_serde")]
        l_no: f64,
    },
}

/// Mean and spread of first-token scores for one token class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScoreStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl ClassScoreStats {
    pub fn of(scores: &[f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            count: scores.len(),
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub dataset_id: String,
    /// Number of candidate thresholds evaluated.
    pub grid_size: usize,
    /// Items the accuracies below are computed over.
    pub validation_items: usize,
    /// Items left out because their first token was neither Yes nor No.
    pub excluded_other: usize,
    pub naive_accuracy: f64,
    pub fitted_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yes_token_scores: Option<ClassScoreStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_token_scores: Option<ClassScoreStats>,
    /// Seed of the run that produced the fit, when one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    #[serde(flatten)]
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitMetadata>,
}

impl DecisionPolicy {
    pub fn naive() -> Self {
        Self {
            kind: PolicyKind::Naive,
            fit: None,
        }
    }

    pub fn meco(layer_index: u32, thresholds: DualThresholds) -> Self {
        Self {
            kind: PolicyKind::MeCo {
                layer_index,
                l_yes: thresholds.l_yes,
                l_no: thresholds.l_no,
            },
            fit: None,
        }
    }

    pub fn p_yes(l: f64) -> Self {
        Self {
            kind: PolicyKind::PYes { l },
            fit: None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PolicyKind::Naive => "Naive",
            PolicyKind::PYes { .. } => "PYes",
            PolicyKind::MeCo { .. } => "MeCo",
        }
    }

    pub fn decide(&self, item: &ScoredItem, mode: TokenMode) -> Result<Decision> {
        match self.kind {
            PolicyKind::Naive => decide_naive(item, mode),
            PolicyKind::PYes { l } => decide_p_yes(item, l),
            PolicyKind::MeCo { l_yes, l_no, .. } => {
                decide_meco(item, DualThresholds { l_yes, l_no }, mode)
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("policy serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let policy: Self =
            serde_json::from_str(text).map_err(|e| DecisionError::Policy(e.to_string()))?;
        if let PolicyKind::PYes { l } = policy.kind {
            if !(0.0..=1.0).contains(&l) {
                return Err(DecisionError::Policy(format!(
                    "Yes-score threshold {l} outside [0, 1]"
                )));
            }
        }
        Ok(policy)
    }
}

/// Result of a 1-D threshold search.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Search {
    threshold: f64,
    correct: usize,
    candidates: usize,
}

/// Groups of equal scores in ascending order, with label counts.
fn score_groups(items: &[(f64, Answer)]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<(f64, Answer)> = items.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (s, label) in sorted {
        let (yes, no) = match label {
            Answer::Yes => (1, 0),
            Answer::No => (0, 1),
        };
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                g.1 += yes;
                g.2 += no;
            }
            _ => groups.push((s, yes, no)),
        }
    }
    groups
}

/// A value strictly above `lo` and at most `hi`.
fn midpoint_above(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if lo < m && m <= hi {
        m
    } else {
        hi
    }
}

/// A value at least `lo` and strictly below `hi`.
fn midpoint_below(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if lo <= m && m < hi {
        m
    } else {
        lo
    }
}

/// Best `l` for "Yes iff score >= l" over `-inf`, midpoints and `+inf`.
/// Ties keep the smallest threshold (fewest flips).
fn search_yes_threshold(items: &[(f64, Answer)]) -> Search {
    let groups = score_groups(items);
    let mut correct = groups.iter().map(|g| g.1).sum::<usize>();
    let mut best = Search {
        threshold: f64::NEG_INFINITY,
        correct,
        candidates: groups.len() + 1,
    };
    for (i, g) in groups.iter().enumerate() {
        // threshold moves just past group i: it becomes No
        correct = correct + g.2 - g.1;
        if correct > best.correct {
            best.correct = correct;
            best.threshold = match groups.get(i + 1) {
                Some(next) => midpoint_above(g.0, next.0),
                None => f64::INFINITY,
            };
        }
    }
    best
}

/// Best `l` for "No iff score <= l". Ties keep the largest threshold.
fn search_no_threshold(items: &[(f64, Answer)]) -> Search {
    let groups = score_groups(items);
    let mut correct = groups.iter().map(|g| g.2).sum::<usize>();
    let mut best = Search {
        threshold: f64::INFINITY,
        correct,
        candidates: groups.len() + 1,
    };
    for i in (0..groups.len()).rev() {
        let g = groups[i];
        correct = correct + g.1 - g.2;
        if correct > best.correct {
            best.correct = correct;
            best.threshold = match i.checked_sub(1) {
                Some(prev) => midpoint_below(groups[prev].0, g.0),
                None => f64::NEG_INFINITY,
            };
        }
    }
    best
}

/// Fits `(l_yes, l_no)` maximizing validation accuracy of [`decide_meco`].
/// Items whose first token is neither Yes nor No are excluded and counted.
/// Yes-token and No-token items never share a threshold, so the joint search
/// splits into two independent 1-D searches.
pub fn fit_dual_thresholds(
    validation: &[ScoredItem],
    layer_index: u32,
    dataset_id: &str,
) -> Result<DecisionPolicy> {
    if validation.is_empty() {
        return Err(DecisionError::EmptyValidation);
    }
    let mut yes_items = Vec::new();
    let mut no_items = Vec::new();
    let mut excluded = 0usize;
    for item in validation {
        match item.first_token.answer() {
            Some(Answer::Yes) => yes_items.push((item.score()?, item.label)),
            Some(Answer::No) => no_items.push((item.score()?, item.label)),
            None => excluded += 1,
        }
    }
    let total = yes_items.len() + no_items.len();
    if total == 0 {
        return Err(DecisionError::EmptyValidation);
    }
    let yes = search_yes_threshold(&yes_items);
    let no = search_no_threshold(&no_items);
    let naive_correct = yes_items.iter().filter(|i| i.1 == Answer::Yes).count()
        + no_items.iter().filter(|i| i.1 == Answer::No).count();

    let scores = |v: &[(f64, Answer)]| v.iter().map(|i| i.0).collect::<Vec<_>>();
    let mut policy = DecisionPolicy::meco(
        layer_index,
        DualThresholds {
            l_yes: yes.threshold,
            l_no: no.threshold,
        },
    );
    policy.fit = Some(FitMetadata {
        dataset_id: dataset_id.to_string(),
        grid_size: yes.candidates + no.candidates,
        validation_items: total,
        excluded_other: excluded,
        naive_accuracy: naive_correct as f64 / total as f64,
        fitted_accuracy: (yes.correct + no.correct) as f64 / total as f64,
        yes_token_scores: ClassScoreStats::of(&scores(&yes_items)),
        no_token_scores: ClassScoreStats::of(&scores(&no_items)),
        seed: None,
    });
    Ok(policy)
}

/// Fits the single Yes-score threshold `l` over midpoints of distinct
/// Yes-scores and the fixed candidates `{0, 0.5, 1}`. Ties go to the
/// candidate nearest 0.5 (the lower one if equidistant). All items take part;
/// the reported naive accuracy counts `Other` tokens as wrong.
pub fn fit_p_yes_threshold(validation: &[ScoredItem], dataset_id: &str) -> Result<DecisionPolicy> {
    if validation.is_empty() {
        return Err(DecisionError::EmptyValidation);
    }
    let mut scored = Vec::with_capacity(validation.len());
    for item in validation {
        scored.push((item_yes_score(item)?, item.label));
    }
    let groups = score_groups(&scored);

    let mut candidates: Vec<f64> = vec![0.0, 0.5, 1.0];
    candidates.extend(groups.windows(2).map(|w| midpoint_above(w[0].0, w[1].0)));
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    // prefix counts over ascending groups: items with score <= candidate are No
    let values: Vec<f64> = groups.iter().map(|g| g.0).collect();
    let mut yes_below = vec![0usize; groups.len() + 1];
    let mut no_below = vec![0usize; groups.len() + 1];
    for (i, g) in groups.iter().enumerate() {
        yes_below[i + 1] = yes_below[i] + g.1;
        no_below[i + 1] = no_below[i] + g.2;
    }
    let total_yes = yes_below[groups.len()];

    let mut best: Option<(f64, usize)> = None;
    for &l in &candidates {
        let k = values.partition_point(|&v| v <= l);
        let correct = no_below[k] + (total_yes - yes_below[k]);
        let better = match best {
            None => true,
            Some((bl, bc)) => correct > bc || (correct == bc && (l - 0.5).abs() < (bl - 0.5).abs()),
        };
        if better {
            best = Some((l, correct));
        }
    }
    let (l, correct) = best.expect("candidates are non-empty");
    let naive_correct = validation
        .iter()
        .filter(|i| i.first_token.answer() == Some(i.label))
        .count();
    let n = validation.len() as f64;
    let mut policy = DecisionPolicy::p_yes(l);
    policy.fit = Some(FitMetadata {
        dataset_id: dataset_id.to_string(),
        grid_size: candidates.len(),
        validation_items: validation.len(),
        excluded_other: 0,
        naive_accuracy: naive_correct as f64 / n,
        fitted_accuracy: correct as f64 / n,
        yes_token_scores: None,
        no_token_scores: None,
        seed: None,
    });
    Ok(policy)
}

/// Accuracy of `policy` on `items`, counting undecidable items as wrong.
pub fn policy_accuracy(policy: &DecisionPolicy, items: &[ScoredItem], mode: TokenMode) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let correct = items
        .iter()
        .filter(|i| policy.decide(i, mode).is_ok_and(|d| d.verdict == i.label))
        .count();
    correct as f64 / items.len() as f64
}
