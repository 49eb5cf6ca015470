//! Benchmark loading, policy evaluation and score-distribution reports.
//!
//! Yes (tool or retrieval needed) is the positive class throughout.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::decision::{Answer, DecisionError, DecisionPolicy, FirstToken, ScoredItem, TokenMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("benchmark schema violations:\n{}", format_violations(.0))]
    Schema(Vec<Violation>),
    #[error("{} scored item(s) have no benchmark entry: {}", .0.len(), preview(.0))]
    Unjoined(Vec<u64>),
    #[error("item {item_id}: scored label {scored} disagrees with benchmark label {benchmark}")]
    LabelMismatch {
        item_id: u64,
        scored: Answer,
        benchmark: Answer,
    },
    #[error("nothing to evaluate: empty input")]
    Empty,
    #[error("histogram needs at least 2 bins, got {0}")]
    Bins(usize),
    #[error("invalid histogram range [{0}, {1}]")]
    Range(f64, f64),
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error("report output: {0}")]
    Output(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  {x}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn preview(ids: &[u64]) -> String {
    let shown: Vec<String> = ids.iter().take(10).map(u64::to_string).collect();
    if ids.len() > 10 {
        format!("{}, ...", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Suite {
    Metatool,
    MeCaTool,
    MeCaRAG,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Task number 1-6, or the retrieval task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Tool(u8),
    Rag,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Tool(n) => write!(f, "{n}"),
            Task::Rag => f.write_str("RAG"),
        }
    }
}

impl Serialize for Task {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Task::Tool(n) => s.serialize_u8(*n),
            Task::Rag => s.serialize_str("RAG"),
        }
    }
}

impl<'de> Deserialize<'de> for Task {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Num(u8),
            Text(String),
        }
        match Wire::deserialize(d)? {
            Wire::Num(n) => Ok(Task::Tool(n)),
            Wire::Text(t) if t.eq_ignore_ascii_case("rag") => Ok(Task::Rag),
            Wire::Text(t) => Err(serde::de::Error::custom(format!("unknown task {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContextMode {
    WithContext,
    WithoutContext,
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub description: String,
}

/// One labeled query, one line of a benchmark JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: u64,
    pub suite: Suite,
    pub task: Task,
    pub category: Category,
    pub context_mode: ContextMode,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub provided_tools: Vec<Tool>,
    pub label: Answer,
}

impl BenchmarkItem {
    /// Checks the task-structure rules; returns every broken rule.
    pub fn check(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let task_ok = match (self.suite, self.task) {
            (Suite::Metatool, Task::Tool(1)) => true,
            (Suite::MeCaTool, Task::Tool(n)) => (1..=6).contains(&n),
            (Suite::MeCaRAG, Task::Rag) => true,
            _ => false,
        };
        if !task_ok {
            errs.push(format!(
                "unknown task {} for suite {}",
                self.task, self.suite
            ));
            return errs;
        }
        let tools = self.provided_tools.len();
        let users = self
            .turns
            .iter()
            .filter(|t| t.speaker == Speaker::User)
            .count();
        match self.task {
            Task::Tool(n @ (1 | 4)) if tools != 0 => {
                errs.push(format!("task {n} must not provide tools, found {tools}"))
            }
            Task::Tool(n @ (2 | 5)) if tools != 1 => errs.push(format!(
                "task {n} must provide exactly one tool, found {tools}"
            )),
            Task::Tool(n @ (3 | 6)) if !(2..=5).contains(&tools) => {
                errs.push(format!("task {n} must provide 2 to 5 tools, found {tools}"))
            }
            Task::Rag if tools != 0 => {
                errs.push(format!("RAG items must not provide tools, found {tools}"))
            }
            _ => {}
        }
        match self.task {
            Task::Tool(n @ 1..=3) if users != 1 => {
                errs.push(format!("task {n} is single-turn, found {users} user turns"))
            }
            Task::Tool(n @ 4..=6) if users < 2 => errs.push(format!(
                "task {n} is multi-turn, found {users} user turn(s)"
            )),
            Task::Rag if users == 0 => errs.push("RAG item has no user turn".into()),
            _ => {}
        }
        if self
            .turns
            .last()
            .is_some_and(|t| t.speaker != Speaker::User)
        {
            errs.push("last turn must come from the user".into());
        }
        if self.category == Category::Neutral && !matches!(self.task, Task::Tool(2 | 3)) {
            errs.push(format!(
                "Neutral category only exists in tasks 2 and 3, not {}",
                self.task
            ));
        }
        errs
    }

    /// The final user turn.
    pub fn query(&self) -> &str {
        self.turns.last().map_or("", |t| t.text.as_str())
    }
}

/// Parses and validates a benchmark JSONL stream. All violations are
/// collected before failing.
pub fn load_benchmark<R: BufRead>(source: R) -> Result<Vec<BenchmarkItem>> {
    let mut items = Vec::new();
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BenchmarkItem>(&line) {
            Ok(item) => {
                for message in item.check() {
                    violations.push(Violation {
                        line: number,
                        message,
                    });
                }
                if !seen.insert(item.item_id) {
                    violations.push(Violation {
                        line: number,
                        message: format!("duplicate item_id {}", item.item_id),
                    });
                }
                items.push(item);
            }
            Err(e) => violations.push(Violation {
                line: number,
                message: e.to_string(),
            }),
        }
    }
    if violations.is_empty() {
        Ok(items)
    } else {
        Err(EvalError::Schema(violations))
    }
}

/// Item counts per `(suite, task, category)`.
pub fn category_counts(items: &[BenchmarkItem]) -> BTreeMap<(Suite, Task, Category), usize> {
    let mut counts = BTreeMap::new();
    for item in items {
        *counts
            .entry((item.suite, item.task, item.category))
            .or_insert(0) += 1;
    }
    counts
}

/// Published per-category sizes of the MeCa suites.
pub fn meca_expected_counts() -> BTreeMap<(Suite, Task, Category), usize> {
    use Category::*;
    let mut m = BTreeMap::new();
    for task in 1..=6u8 {
        m.insert((Suite::MeCaTool, Task::Tool(task), Positive), 500);
        m.insert((Suite::MeCaTool, Task::Tool(task), Negative), 500);
        if task == 2 || task == 3 {
            m.insert((Suite::MeCaTool, Task::Tool(task), Neutral), 500);
        }
    }
    m.insert((Suite::MeCaRAG, Task::Rag, Positive), 150);
    m.insert((Suite::MeCaRAG, Task::Rag, Negative), 150);
    m
}

/// Differences between the MeCa category counts in `items` and the published
/// sizes, restricted to suites present in `items`.
pub fn check_meca_counts(items: &[BenchmarkItem]) -> Vec<String> {
    let counts = category_counts(items);
    let suites: HashSet<Suite> = items.iter().map(|i| i.suite).collect();
    let expected = meca_expected_counts();
    let mut problems = Vec::new();
    for (key, &want) in &expected {
        if !suites.contains(&key.0) {
            continue;
        }
        let got = counts.get(key).copied().unwrap_or(0);
        if got != want {
            problems.push(format!(
                "{} task {} {:?}: expected {want}, found {got}",
                key.0, key.1, key.2
            ));
        }
    }
    for (key, got) in &counts {
        if matches!(key.0, Suite::MeCaTool | Suite::MeCaRAG) && !expected.contains_key(key) {
            problems.push(format!(
                "{} task {} {:?}: unexpected category ({got} items)",
                key.0, key.1, key.2
            ));
        }
    }
    problems
}

/// Confusion counts with Yes as the positive class. Items whose first token
/// could not be parsed are tallied separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unparsed: usize,
}

impl Confusion {
    pub fn record(&mut self, prediction: Option<Answer>, label: Answer) {
        match (prediction, label) {
            (None, _) => self.unparsed += 1,
            (Some(Answer::Yes), Answer::Yes) => self.tp += 1,
            (Some(Answer::Yes), Answer::No) => self.fp += 1,
            (Some(Answer::No), Answer::No) => self.tn += 1,
            (Some(Answer::No), Answer::Yes) => self.fn_ += 1,
        }
    }

    pub fn support(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.unparsed
    }

    /// Derived metrics. A zero denominator yields 0 and sets the matching
    /// `*_undefined` flag.
    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (0.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (accuracy, _) = ratio(self.tp + self.tn, self.support());
        let (precision, precision_undefined) = ratio(self.tp, self.tp + self.fp);
        let (recall, recall_undefined) = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            accuracy,
            precision,
            recall,
            f1,
            precision_undefined,
            recall_undefined,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

/// Metrics for `(prediction, label)` pairs; `None` marks an unparsed response.
pub fn compute_metrics(outcomes: &[(Option<Answer>, Answer)]) -> Result<(Confusion, Metrics)> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = Confusion::default();
    for &(p, l) in outcomes {
        c.record(p, l);
    }
    Ok((c, c.metrics()))
}

/// Benchmark fields a report can be broken down by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Grouping {
    pub suite: bool,
    pub task: bool,
    pub context_mode: bool,
}

impl Grouping {
    pub const ALL: Self = Self {
        suite: true,
        task: true,
        context_mode: true,
    };
    pub const NONE: Self = Self {
        suite: false,
        task: false,
        context_mode: false,
    };

    fn key(&self, item: &BenchmarkItem) -> GroupKey {
        GroupKey {
            suite: self.suite.then(|| item.suite.to_string()),
            task: self.task.then(|| item.task.to_string()),
            context_mode: self.context_mode.then(|| item.context_mode.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct GroupKey {
    suite: Option<String>,
    task: Option<String>,
    context_mode: Option<String>,
}

const ALL_GROUPS: &str = "*";

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub suite: String,
    pub task: String,
    pub context_mode: String,
    pub policy: String,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unparsed_count: usize,
    pub flip_count: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero, `;`-separated.
    pub zero_division: String,
}

impl EvalRow {
    pub fn confusion(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
            unparsed: self.unparsed_count,
        }
    }

    fn new(key: &GroupKey, policy: &str, c: Confusion, flips: usize) -> Self {
        let m = c.metrics();
        let mut zero = Vec::new();
        if m.precision_undefined {
            zero.push("precision");
        }
        if m.recall_undefined {
            zero.push("recall");
        }
        let field = |v: &Option<String>| v.clone().unwrap_or_else(|| ALL_GROUPS.to_string());
        Self {
            suite: field(&key.suite),
            task: field(&key.task),
            context_mode: field(&key.context_mode),
            policy: policy.to_string(),
            support: c.support(),
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            unparsed_count: c.unparsed,
            flip_count: flips,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            zero_division: zero.join(";"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn rows_for<'a>(&'a self, policy: &'a str) -> impl Iterator<Item = &'a EvalRow> + 'a {
        self.rows.iter().filter(move |r| r.policy == policy)
    }

    pub fn total_support(&self, policy: &str) -> usize {
        self.rows_for(policy).map(|r| r.support).sum()
    }
}

fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| EvalError::Output(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| EvalError::Output(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Output(e.to_string()))
}

fn join<'a>(
    scored: &'a [ScoredItem],
    benchmark: &'a [BenchmarkItem],
) -> Result<Vec<(&'a ScoredItem, &'a BenchmarkItem)>> {
    if scored.is_empty() {
        return Err(EvalError::Empty);
    }
    let index: HashMap<u64, &BenchmarkItem> = benchmark.iter().map(|b| (b.item_id, b)).collect();
    let mut joined = Vec::with_capacity(scored.len());
    let mut missing = Vec::new();
    for s in scored {
        match index.get(&s.item_id) {
            Some(b) if b.label != s.label => {
                return Err(EvalError::LabelMismatch {
                    item_id: s.item_id,
                    scored: s.label,
                    benchmark: b.label,
                })
            }
            Some(b) => joined.push((s, *b)),
            None => missing.push(s.item_id),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::Unjoined(missing));
    }
    Ok(joined)
}

/// Applies `policy` to every scored item and reports metrics per group.
/// Groups are emitted in sorted key order.
pub fn run_policy(
    policy: &DecisionPolicy,
    scored: &[ScoredItem],
    benchmark: &[BenchmarkItem],
    grouping: Grouping,
    mode: TokenMode,
) -> Result<EvalReport> {
    run_policies(
        std::slice::from_ref(policy),
        scored,
        benchmark,
        grouping,
        mode,
    )
}

/// [`run_policy`] for several policies; rows are ordered by group, then by
/// the order of `policies`.
pub fn run_policies(
    policies: &[DecisionPolicy],
    scored: &[ScoredItem],
    benchmark: &[BenchmarkItem],
    grouping: Grouping,
    mode: TokenMode,
) -> Result<EvalReport> {
    let joined = join(scored, benchmark)?;
    let mut groups: BTreeMap<GroupKey, Vec<(Confusion, usize)>> = BTreeMap::new();
    for (item, bench) in joined {
        let slot = groups
            .entry(grouping.key(bench))
            .or_insert_with(|| vec![(Confusion::default(), 0); policies.len()]);
        for (policy, (confusion, flips)) in policies.iter().zip(slot.iter_mut()) {
            match policy.decide(item, mode) {
                Ok(d) => {
                    confusion.record(Some(d.verdict), item.label);
                    if d.flipped {
                        *flips += 1;
                    }
                }
                Err(DecisionError::UnparseableResponse { .. }) => {
                    confusion.record(None, item.label)
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let rows = groups
        .iter()
        .flat_map(|(key, per_policy)| {
            policies
                .iter()
                .zip(per_policy)
                .map(move |(p, (c, flips))| EvalRow::new(key, p.name(), *c, *flips))
        })
        .collect();
    Ok(EvalReport { rows })
}

/// Shift of one token class's score distribution between fit and eval data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreShift {
    pub first_token: Answer,
    pub fit_mean: f64,
    pub fit_std: f64,
    pub eval_mean: f64,
    pub delta: f64,
    /// `|delta| / fit_std` exceeds [`SHIFT_FLAG_EFFECT_SIZE`].
    pub flagged: bool,
}

/// Standardized mean difference above which a transfer is flagged.
pub const SHIFT_FLAG_EFFECT_SIZE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub fit_suite: String,
    pub eval_suite: String,
    pub report: EvalReport,
    pub shifts: Vec<ScoreShift>,
}

impl TransferReport {
    pub fn shift_detected(&self) -> bool {
        self.shifts.iter().any(|s| s.flagged)
    }
}

/// Evaluates a policy fitted on one suite against another suite's items and
/// compares first-token score distributions with those recorded at fit time.
pub fn transfer_eval(
    policy: &DecisionPolicy,
    fit_suite: &str,
    eval_suite: &str,
    scored: &[ScoredItem],
    benchmark: &[BenchmarkItem],
    grouping: Grouping,
    mode: TokenMode,
) -> Result<TransferReport> {
    let report = run_policy(policy, scored, benchmark, grouping, mode)?;
    let mut shifts = Vec::new();
    if let Some(fit) = &policy.fit {
        for (token, stats) in [
            (Answer::Yes, fit.yes_token_scores),
            (Answer::No, fit.no_token_scores),
        ] {
            let Some(stats) = stats else { continue };
            let scores: Vec<f64> = scored
                .iter()
                .filter(|s| s.first_token.answer() == Some(token))
                .filter_map(|s| s.meta_score)
                .collect();
            if scores.is_empty() {
                continue;
            }
            let eval_mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let delta = eval_mean - stats.mean;
            let flagged = if stats.std > 0.0 {
                delta.abs() / stats.std > SHIFT_FLAG_EFFECT_SIZE
            } else {
                delta != 0.0
            };
            shifts.push(ScoreShift {
                first_token: token,
                fit_mean: stats.mean,
                fit_std: stats.std,
                eval_mean,
                delta,
                flagged,
            });
        }
    }
    Ok(TransferReport {
        fit_suite: fit_suite.to_string(),
        eval_suite: eval_suite.to_string(),
        report,
        shifts,
    })
}

/// One histogram bin of one (layer, first token, correctness) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    /// Empty when the report is not per layer.
    pub layer: String,
    pub first_token: String,
    /// `correct`, `incorrect`, or `n/a` for unparsed tokens.
    pub correctness: String,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub rows: Vec<DistributionRow>,
}

impl DistributionReport {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TokenGroup {
    Yes,
    No,
    Other,
}

/// Histograms of first-token meta-cognition scores split by first token and
/// by whether the token matched the label. Bins are equal-width over
/// `range`, or over the observed scores when `range` is `None`; values
/// outside the range fall into the edge bins. Groups without items emit no
/// rows.
pub fn score_distribution_report(
    items: &[ScoredItem],
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<DistributionReport> {
    let mut rows = Vec::new();
    histogram_rows(items, bins, range, "", &mut rows)?;
    Ok(DistributionReport { rows })
}

/// [`score_distribution_report`] for scores taken at several layers; each
/// layer gets its own bin range.
pub fn per_layer_distribution_report(
    layers: &[(u32, Vec<ScoredItem>)],
    bins: usize,
) -> Result<DistributionReport> {
    if layers.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rows = Vec::new();
    for (layer, items) in layers {
        histogram_rows(items, bins, None, &layer.to_string(), &mut rows)?;
    }
    Ok(DistributionReport { rows })
}

fn histogram_rows(
    items: &[ScoredItem],
    bins: usize,
    range: Option<(f64, f64)>,
    layer: &str,
    rows: &mut Vec<DistributionRow>,
) -> Result<()> {
    if bins < 2 {
        return Err(EvalError::Bins(bins));
    }
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut scored = Vec::with_capacity(items.len());
    for item in items {
        let score = item.meta_score.ok_or(DecisionError::MissingScore {
            item_id: item.item_id,
        })?;
        let group = match item.first_token {
            FirstToken::Yes => TokenGroup::Yes,
            FirstToken::No => TokenGroup::No,
            FirstToken::Other(_) => TokenGroup::Other,
        };
        let correct = item.first_token.answer().map(|a| a == item.label);
        scored.push((group, correct, score));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) if lo < hi && lo.is_finite() && hi.is_finite() => (lo, hi),
        Some((lo, hi)) => return Err(EvalError::Range(lo, hi)),
        None => {
            let lo = scored.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
            let hi = scored.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        }
    };
    let width = (hi - lo) / bins as f64;

    let mut counts: BTreeMap<(TokenGroup, Option<bool>), Vec<usize>> = BTreeMap::new();
    for (group, correct, score) in scored {
        let raw = ((score - lo) / width).floor();
        let bin = if raw < 0.0 {
            0
        } else {
            (raw as usize).min(bins - 1)
        };
        counts
            .entry((group, correct))
            .or_insert_with(|| vec![0; bins])[bin] += 1;
    }
    // correct before incorrect within a token group
    let mut keys: Vec<_> = counts.keys().copied().collect();
    keys.sort_by_key(|(g, c)| (*g, c.map(|b| !b)));
    for key in keys {
        let (group, correct) = key;
        for (bin, &count) in counts[&key].iter().enumerate() {
            rows.push(DistributionRow {
                layer: layer.to_string(),
                first_token: format!("{group:?}"),
                correctness: match correct {
                    Some(true) => "correct",
                    Some(false) => "incorrect",
                    None => "n/a",
                }
                .to_string(),
                bin,
                lo: lo + width * bin as f64,
                hi: if bin + 1 == bins {
                    hi
                } else {
                    lo + width * (bin + 1) as f64
                },
                count,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench(id: u64, task: u8, tools: usize, users: usize, category: Category) -> BenchmarkItem {
        let mut turns = Vec::new();
        for i in 0..users {
            if i > 0 {
                turns.push(Turn {
                    speaker: Speaker::Assistant,
                    text: "Sure.".into(),
                });
            }
            turns.push(Turn {
                speaker: Speaker::User,
                text: format!("question {i}"),
            });
        }
        BenchmarkItem {
            item_id: id,
            suite: Suite::MeCaTool,
            task: Task::Tool(task),
            category,
            context_mode: ContextMode::WithoutContext,
            turns,
            provided_tools: (0..tools)
                .map(|i| Tool {
                    name: format!("tool_{i}"),
                    description: "does things".into(),
                })
                .collect(),
            label: Answer::Yes,
        }
    }

    fn to_jsonl(items: &[BenchmarkItem]) -> String {
        items
            .iter()
            .map(|i| serde_json::to_string(i).unwrap() + "\n")
            .collect()
    }

    #[test]
    fn task1_with_tool_is_rejected() {
        let bad = bench(1, 1, 1, 1, Category::Positive);
        match load_benchmark(to_jsonl(&[bad]).as_bytes()) {
            Err(EvalError::Schema(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].line, 1);
                assert!(v[0].message.contains("must not provide tools"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn minimal_task4_loads() {
        let ok = bench(1, 4, 0, 2, Category::Negative);
        let items = load_benchmark(to_jsonl(std::slice::from_ref(&ok)).as_bytes()).unwrap();
        assert_eq!(items, vec![ok]);
    }

    #[test]
    fn structural_rules() {
        assert!(bench(1, 2, 1, 1, Category::Neutral).check().is_empty());
        assert!(!bench(1, 2, 2, 1, Category::Positive).check().is_empty());
        assert!(bench(1, 3, 5, 1, Category::Neutral).check().is_empty());
        assert!(!bench(1, 3, 6, 1, Category::Positive).check().is_empty());
        assert!(!bench(1, 6, 1, 2, Category::Positive).check().is_empty());
        assert!(!bench(1, 5, 1, 2, Category::Neutral).check().is_empty());
        assert!(!bench(1, 2, 1, 2, Category::Positive).check().is_empty());
        assert!(!bench(1, 7, 0, 1, Category::Positive).check().is_empty());
        let mut rag = bench(1, 1, 0, 1, Category::Positive);
        rag.suite = Suite::MeCaRAG;
        assert!(!rag.check().is_empty());
        rag.task = Task::Rag;
        assert!(rag.check().is_empty());
    }

    #[test]
    fn violations_carry_line_numbers() {
        let text = format!(
            "{}\n{{not json}}\n{}",
            serde_json::to_string(&bench(1, 1, 0, 1, Category::Positive)).unwrap(),
            serde_json::to_string(&bench(1, 1, 0, 1, Category::Negative)).unwrap()
        );
        match load_benchmark(text.as_bytes()) {
            Err(EvalError::Schema(v)) => {
                let lines: Vec<usize> = v.iter().map(|x| x.line).collect();
                assert_eq!(lines, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn task_field_accepts_rag_string() {
        assert_eq!(serde_json::from_str::<Task>("\"RAG\"").unwrap(), Task::Rag);
        assert_eq!(serde_json::from_str::<Task>("3").unwrap(), Task::Tool(3));
        assert_eq!(serde_json::to_string(&Task::Rag).unwrap(), "\"RAG\"");
    }

    #[test]
    fn meca_counts_contract() {
        let mut items = Vec::new();
        let mut id = 0;
        for ((_, task, category), n) in meca_expected_counts() {
            let Task::Tool(t) = task else { continue };
            let (tools, users) = match t {
                1 => (0, 1),
                2 => (1, 1),
                3 => (3, 1),
                4 => (0, 2),
                5 => (1, 2),
                _ => (2, 2),
            };
            for _ in 0..n {
                items.push(bench(id, t, tools, users, category));
                id += 1;
            }
        }
        assert_eq!(items.len(), 7000);
        assert!(check_meca_counts(&items).is_empty());
        items.pop();
        assert_eq!(check_meca_counts(&items).len(), 1);
    }

    #[test]
    fn metrics_balanced_all_yes() {
        let outcomes: Vec<_> = (0..100)
            .map(|i| {
                (
                    Some(Answer::Yes),
                    if i % 2 == 0 { Answer::Yes } else { Answer::No },
                )
            })
            .collect();
        let (_, m) = compute_metrics(&outcomes).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(format!("{:.2}", m.f1), "0.67");
    }

    #[test]
    fn metrics_perfect_and_degenerate() {
        let (_, m) = compute_metrics(&[
            (Some(Answer::Yes), Answer::Yes),
            (Some(Answer::No), Answer::No),
        ])
        .unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let (c, m) =
            compute_metrics(&[(Some(Answer::No), Answer::No), (None, Answer::Yes)]).unwrap();
        assert_eq!(c.unparsed, 1);
        assert_eq!(c.support(), 2);
        assert_eq!(m.accuracy, 0.5);
        assert!(m.precision_undefined && m.recall_undefined);
        assert_eq!(m.f1, 0.0);
        assert!(compute_metrics(&[]).is_err());
    }

    fn scored(id: u64, token: FirstToken, score: f64, label: Answer) -> ScoredItem {
        ScoredItem {
            item_id: id,
            first_token: token,
            meta_score: Some(score),
            p_yes: 0.6,
            p_no: 0.4,
            label,
        }
    }

    #[test]
    fn unjoined_items_are_listed() {
        let b = vec![bench(1, 1, 0, 1, Category::Positive)];
        let s = vec![
            scored(1, FirstToken::Yes, 0.0, Answer::Yes),
            scored(9, FirstToken::Yes, 0.0, Answer::Yes),
        ];
        match run_policy(
            &DecisionPolicy::naive(),
            &s,
            &b,
            Grouping::ALL,
            TokenMode::Strict,
        ) {
            Err(EvalError::Unjoined(ids)) => assert_eq!(ids, vec![9]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_mismatch_is_an_error() {
        let b = vec![bench(1, 1, 0, 1, Category::Positive)];
        let s = vec![scored(1, FirstToken::Yes, 0.0, Answer::No)];
        assert!(matches!(
            run_policy(
                &DecisionPolicy::naive(),
                &s,
                &b,
                Grouping::ALL,
                TokenMode::Strict
            ),
            Err(EvalError::LabelMismatch { .. })
        ));
    }

    #[test]
    fn unparsed_tokens_are_counted_not_fatal() {
        let b = vec![
            bench(1, 1, 0, 1, Category::Positive),
            bench(2, 1, 0, 1, Category::Positive),
        ];
        let s = vec![
            scored(1, FirstToken::Other("Hmm".into()), 0.0, Answer::Yes),
            scored(2, FirstToken::Yes, 0.0, Answer::Yes),
        ];
        let r = run_policy(
            &DecisionPolicy::naive(),
            &s,
            &b,
            Grouping::NONE,
            TokenMode::Strict,
        )
        .unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].unparsed_count, 1);
        assert_eq!(r.rows[0].tp, 1);
        assert_eq!(r.rows[0].suite, "*");
    }

    #[test]
    fn single_item_histogram() {
        let r = score_distribution_report(&[scored(1, FirstToken::Yes, 0.3, Answer::Yes)], 4, None)
            .unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows.iter().map(|x| x.count).sum::<usize>(), 1);
        assert_eq!(r.rows.iter().filter(|x| x.count == 1).count(), 1);
        assert!(score_distribution_report(&[], 4, None).is_err());
        assert!(matches!(
            score_distribution_report(&[scored(1, FirstToken::Yes, 0.3, Answer::Yes)], 1, None),
            Err(EvalError::Bins(1))
        ));
    }

    #[test]
    fn histogram_groups_and_edges() {
        let items = vec![
            scored(1, FirstToken::Yes, 0.0, Answer::Yes),
            scored(2, FirstToken::Yes, 1.0, Answer::No),
            scored(3, FirstToken::No, 0.5, Answer::No),
            scored(4, FirstToken::Other("x".into()), 5.0, Answer::No),
        ];
        let r = score_distribution_report(&items, 2, Some((0.0, 1.0))).unwrap();
        let groups: Vec<(String, String)> = r
            .rows
            .iter()
            .filter(|x| x.bin == 0)
            .map(|x| (x.first_token.clone(), x.correctness.clone()))
            .collect();
        assert_eq!(
            groups,
            vec![
                ("Yes".into(), "correct".into()),
                ("Yes".into(), "incorrect".into()),
                ("No".into(), "correct".into()),
                ("Other".into(), "n/a".into())
            ]
        );
        // score 1.0 sits on the upper edge: last bin
        let yes_wrong: Vec<usize> = r
            .rows
            .iter()
            .filter(|x| x.first_token == "Yes" && x.correctness == "incorrect")
            .map(|x| x.count)
            .collect();
        assert_eq!(yes_wrong, vec![0, 1]);
        // out-of-range score clamps into the last bin
        let other: Vec<usize> = r
            .rows
            .iter()
            .filter(|x| x.first_token == "Other")
            .map(|x| x.count)
            .collect();
        assert_eq!(other, vec![0, 1]);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("layer,first_token,correctness,bin,lo,hi,count\n"));
    }
}
