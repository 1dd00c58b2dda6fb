//! Datasets, grading, run reports, latency measurement and run comparison.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::vlmclient::{
    normalize_truth_word, AnswerKind, Completion, ParsedAnswer, TemplateId, Unparseable,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: field `{field}`: {reason}")]
    SchemaViolation {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("option {option} out of range for {count} options")]
    OptionOutOfRange { option: usize, count: usize },
    #[error("records do not match items: {0}")]
    ItemMismatch(String),
    #[error("latency task failed on run {run}: {reason}")]
    TaskFailed { run: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground truth or parsed value. On the wire: an integer, an array of
/// integers, or a string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Choice(usize),
    Choices(BTreeSet<usize>),
    Word(String),
}

impl Answer {
    pub fn kind(&self) -> AnswerKind {
        match self {
            Answer::Choice(_) => AnswerKind::SingleChoice,
            Answer::Choices(_) => AnswerKind::MultiChoice,
            Answer::Word(_) => AnswerKind::Word,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub item_id: String,
    pub video_id: String,
    pub question: String,
    #[serde(default)]
    pub options: Vec<String>,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
}

impl QAItem {
    pub fn qtype_or_default(&self) -> &str {
        self.qtype.as_deref().unwrap_or("all")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SchemaId {
    Egoschema,
    Nextqa,
    Intentqa,
    Anet,
    Clevrer,
    Synth,
}

impl SchemaId {
    /// Frames handed to the answering model when `--frames` is not given.
    pub fn default_frames(self) -> usize {
        match self {
            SchemaId::Clevrer => 5,
            SchemaId::Intentqa => 12,
            _ => 32,
        }
    }

    pub fn template_for(self, item: &QAItem) -> TemplateId {
        match self {
            SchemaId::Egoschema | SchemaId::Synth => TemplateId::Egoschema,
            SchemaId::Nextqa | SchemaId::Intentqa => TemplateId::NextqaNumeric,
            SchemaId::Anet => TemplateId::AnetWord,
            SchemaId::Clevrer => match item.answer {
                Answer::Choices(_) => TemplateId::ClevrerMcq,
                _ => TemplateId::ClevrerBinary,
            },
        }
    }

    fn tag_set(self) -> Option<&'static [&'static str]> {
        match self {
            SchemaId::Nextqa => Some(&["causal", "temporal", "descriptive"]),
            SchemaId::Clevrer => {
                Some(&["descriptive", "explanatory", "predictive", "counterfactual"])
            }
            SchemaId::Synth => Some(&["teleport", "color_flip", "spawn"]),
            _ => None,
        }
    }

    fn validate(self, item: &QAItem, line: usize) -> Result<(), EvalError> {
        let bad = |field: &str, reason: String| EvalError::SchemaViolation {
            line,
            field: field.into(),
            reason,
        };
        let five_choice = matches!(
            self,
            SchemaId::Egoschema | SchemaId::Nextqa | SchemaId::Intentqa | SchemaId::Synth
        );
        if five_choice && item.options.len() != 5 {
            return Err(bad(
                "options",
                format!("expected 5 options, found {}", item.options.len()),
            ));
        }
        match (&item.answer, self) {
            (Answer::Choice(c), _) if five_choice => {
                if *c >= item.options.len() {
                    return Err(bad("answer", format!("choice {c} out of range")));
                }
            }
            (Answer::Word(w), SchemaId::Anet) | (Answer::Word(w), SchemaId::Clevrer) => {
                if w.trim().is_empty() {
                    return Err(bad("answer", "empty word answer".into()));
                }
            }
            (Answer::Choices(set), SchemaId::Clevrer) => {
                if item.options.is_empty() {
                    return Err(bad("options", "multi-select item without options".into()));
                }
                if let Some(c) = set.iter().find(|&&c| c >= item.options.len()) {
                    return Err(bad("answer", format!("choice {c} out of range")));
                }
            }
            (a, s) => {
                return Err(bad(
                    "answer",
                    format!("{:?} answer not allowed for schema {s:?}", a.kind()),
                ))
            }
        }
        if let (Some(tags), Some(q)) = (self.tag_set(), &item.qtype) {
            if !tags.contains(&q.as_str()) {
                return Err(bad("qtype", format!("unknown tag {q:?}")));
            }
        }
        Ok(())
    }
}

/// Reads a JSON-lines dataset. Blank lines are skipped; line numbers are 1-based.
pub fn load_dataset(path: &Path, schema: SchemaId) -> Result<Vec<QAItem>, EvalError> {
    let file = std::fs::File::open(path)?;
    parse_dataset(std::io::BufReader::new(file), schema)
}

pub fn parse_dataset(reader: impl BufRead, schema: SchemaId) -> Result<Vec<QAItem>, EvalError> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |field: &str, reason: String| EvalError::SchemaViolation {
            line: line_no,
            field: field.into(),
            reason,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| bad("<line>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| bad("<line>", "not an object".into()))?;
        for field in ["item_id", "video_id", "question", "answer"] {
            if !obj.contains_key(field) {
                return Err(bad(field, "missing".into()));
            }
        }
        let item: QAItem =
            serde_json::from_value(value).map_err(|e| bad("<line>", e.to_string()))?;
        schema.validate(&item, line_no)?;
        if !seen.insert(item.item_id.clone()) {
            return Err(bad("item_id", format!("duplicate {:?}", item.item_id)));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn write_dataset(path: &Path, items: &[QAItem]) -> Result<(), EvalError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Option-level agreement count and whole-question correctness.
pub fn score_multi_select(
    parsed: &BTreeSet<usize>,
    truth: &BTreeSet<usize>,
    option_count: usize,
) -> Result<(usize, bool), EvalError> {
    if let Some(&o) = parsed.iter().chain(truth).find(|&&o| o >= option_count) {
        return Err(EvalError::OptionOutOfRange {
            option: o,
            count: option_count,
        });
    }
    let agree = (0..option_count)
        .filter(|o| parsed.contains(o) == truth.contains(o))
        .count();
    Ok((agree, parsed == truth))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Blocked,
    Unparseable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Answered { parsed: ParsedAnswer },
    Dropped { reason: DropReason, raw: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub item_id: String,
    pub selection: Vec<usize>,
    pub outcome: Outcome,
    pub correct: Option<bool>,
    pub wall_clock_s: f64,
    pub frames_used: usize,
}

pub fn is_correct(parsed: &Answer, truth: &Answer) -> bool {
    match (parsed, truth) {
        (Answer::Word(p), Answer::Word(t)) => normalize_truth_word(p) == normalize_truth_word(t),
        (p, t) => p == t,
    }
}

impl ResultRecord {
    /// Builds a graded record from a completion and its parse.
    pub fn grade(
        item: &QAItem,
        selection: Vec<usize>,
        completion: &Completion,
        parsed: Option<Result<ParsedAnswer, Unparseable>>,
        wall_clock_s: f64,
    ) -> Self {
        let frames_used = selection.len();
        let (outcome, correct) = match (completion, parsed) {
            (Completion::Blocked { reason }, _) => (
                Outcome::Dropped {
                    reason: DropReason::Blocked,
                    raw: reason.clone(),
                },
                None,
            ),
            (Completion::Text { .. }, Some(Ok(p))) => {
                let ok = is_correct(&p.value, &item.answer);
                (Outcome::Answered { parsed: p }, Some(ok))
            }
            (Completion::Text { text }, _) => (
                Outcome::Dropped {
                    reason: DropReason::Unparseable,
                    raw: text.clone(),
                },
                None,
            ),
        };
        Self {
            item_id: item.item_id.clone(),
            selection,
            outcome,
            correct,
            wall_clock_s,
            frames_used,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub answered: usize,
    pub correct: usize,
    /// `correct / answered`; drops leave the denominator.
    pub accuracy: f64,
    /// `correct / total`; drops count as wrong.
    pub accuracy_strict: f64,
}

impl Tally {
    fn finish(mut self) -> Self {
        self.accuracy = ratio(self.correct, self.answered);
        self.accuracy_strict = ratio(self.correct, self.total);
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiSelectStats {
    pub questions: usize,
    pub questions_correct: usize,
    pub options: usize,
    pub options_correct: usize,
    pub per_option_accuracy: f64,
    pub per_question_accuracy: f64,
    pub no_answer: usize,
    pub no_answer_rate: f64,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub overall: Tally,
    pub accuracy_overall: f64,
    pub accuracy_strict: f64,
    pub accuracy_by_qtype: BTreeMap<String, Tally>,
    pub multi_select: Option<MultiSelectStats>,
    pub dropped_blocked: usize,
    pub dropped_unparseable: usize,
    pub drop_rate: f64,
    pub mean_frames_per_question: f64,
    pub mean_latency_s: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Aggregates graded records. Every item needs exactly one record.
pub fn evaluate_run(
    label: &str,
    records: &[ResultRecord],
    items: &[QAItem],
) -> Result<RunReport, EvalError> {
    let by_id: BTreeMap<&str, &QAItem> = items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut sorted: Vec<&ResultRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    for pair in sorted.windows(2) {
        if pair[0].item_id == pair[1].item_id {
            return Err(EvalError::ItemMismatch(format!(
                "duplicate record {}",
                pair[0].item_id
            )));
        }
    }
    if let Some(r) = sorted
        .iter()
        .find(|r| !by_id.contains_key(r.item_id.as_str()))
    {
        return Err(EvalError::ItemMismatch(format!(
            "record for unknown item {}",
            r.item_id
        )));
    }
    if sorted.len() != by_id.len() {
        return Err(EvalError::ItemMismatch(format!(
            "{} records for {} items",
            sorted.len(),
            by_id.len()
        )));
    }

    let mut report = RunReport {
        label: label.into(),
        ..Default::default()
    };
    let mut overall = Tally::default();
    let mut by_type: BTreeMap<String, Tally> = BTreeMap::new();
    let mut multi = MultiSelectStats::default();
    let mut saw_multi = false;
    let mut frames = 0usize;
    let mut latency = 0.0f64;

    for r in &sorted {
        let item = by_id[r.item_id.as_str()];
        let t = by_type
            .entry(item.qtype_or_default().to_string())
            .or_default();
        overall.total += 1;
        t.total += 1;
        frames += r.frames_used;
        latency += r.wall_clock_s;
        if let Answer::Choices(_) = item.answer {
            saw_multi = true;
        }
        match &r.outcome {
            Outcome::Dropped { reason, .. } => match reason {
                DropReason::Blocked => report.dropped_blocked += 1,
                DropReason::Unparseable => report.dropped_unparseable += 1,
            },
            Outcome::Answered { parsed } => {
                overall.answered += 1;
                t.answered += 1;
                let ok = is_correct(&parsed.value, &item.answer);
                if ok {
                    overall.correct += 1;
                    t.correct += 1;
                }
                if let (Answer::Choices(truth), Answer::Choices(got)) =
                    (&item.answer, &parsed.value)
                {
                    let n = item.options.len();
                    let (agree, q) = score_multi_select(got, truth, n)?;
                    multi.questions += 1;
                    multi.questions_correct += q as usize;
                    multi.options += n;
                    multi.options_correct += agree;
                    multi.no_answer += got.is_empty() as usize;
                    for o in 0..n {
                        match (got.contains(&o), truth.contains(&o)) {
                            (true, true) => multi.confusion.true_positive += 1,
                            (true, false) => multi.confusion.false_positive += 1,
                            (false, true) => multi.confusion.false_negative += 1,
                            (false, false) => multi.confusion.true_negative += 1,
                        }
                    }
                }
            }
        }
    }

    let dropped = report.dropped_blocked + report.dropped_unparseable;
    report.overall = overall.finish();
    report.accuracy_overall = report.overall.accuracy;
    report.accuracy_strict = report.overall.accuracy_strict;
    report.accuracy_by_qtype = by_type.into_iter().map(|(k, v)| (k, v.finish())).collect();
    if saw_multi {
        multi.per_option_accuracy = ratio(multi.options_correct, multi.options);
        multi.per_question_accuracy = ratio(multi.questions_correct, multi.questions);
        multi.no_answer_rate = ratio(multi.no_answer, multi.questions);
        report.multi_select = Some(multi);
    }
    report.drop_rate = ratio(dropped, report.overall.total);
    let n = report.overall.total.max(1) as f64;
    report.mean_frames_per_question = frames as f64 / n;
    report.mean_latency_s = latency / n;
    Ok(report)
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("run: {}\n", self.label);
        s.push_str(&format!(
            "accuracy (answered): {:.4}  [{} / {}]\n",
            self.accuracy_overall, self.overall.correct, self.overall.answered
        ));
        s.push_str(&format!(
            "accuracy (strict): {:.4}  [{} / {}]\n",
            self.accuracy_strict, self.overall.correct, self.overall.total
        ));
        s.push_str(&format!(
            "dropped: {} blocked, {} unparseable (rate {:.4})\n",
            self.dropped_blocked, self.dropped_unparseable, self.drop_rate
        ));
        s.push_str(&format!(
            "mean frames/question: {:.2}\n",
            self.mean_frames_per_question
        ));
        s.push_str(&format!("mean latency: {:.3} s\n", self.mean_latency_s));
        if !self.accuracy_by_qtype.is_empty() {
            s.push_str("by qtype:\n");
            for (k, t) in &self.accuracy_by_qtype {
                s.push_str(&format!(
                    "  {k:<16} {:.4}  [{} / {}]  strict {:.4} [{}]\n",
                    t.accuracy, t.correct, t.answered, t.accuracy_strict, t.total
                ));
            }
        }
        if let Some(m) = &self.multi_select {
            s.push_str(&format!(
                "multi-select: per-option {:.4} [{} / {}], per-question {:.4} [{} / {}], no-answer {:.4} [{}]\n",
                m.per_option_accuracy,
                m.options_correct,
                m.options,
                m.per_question_accuracy,
                m.questions_correct,
                m.questions,
                m.no_answer_rate,
                m.no_answer
            ));
            let c = &m.confusion;
            s.push_str(&format!(
                "  confusion: tp {} fp {} fn {} tn {}\n",
                c.true_positive, c.false_positive, c.false_negative, c.true_negative
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub runs_s: Vec<f64>,
    pub mean_s: f64,
}

/// Runs `task` sequentially `repeats` times, timing each run.
pub fn measure_latency<E: std::fmt::Display>(
    mut task: impl FnMut() -> Result<(), E>,
    repeats: usize,
) -> Result<LatencyReport, EvalError> {
    let mut runs_s = Vec::with_capacity(repeats);
    for run in 0..repeats {
        let start = Instant::now();
        task().map_err(|e| EvalError::TaskFailed {
            run: run + 1,
            reason: e.to_string(),
        })?;
        runs_s.push(start.elapsed().as_secs_f64());
    }
    let mean_s = if runs_s.is_empty() {
        0.0
    } else {
        runs_s.iter().sum::<f64>() / runs_s.len() as f64
    };
    Ok(LatencyReport { runs_s, mean_s })
}

pub const DEFAULT_LATENCY_REPEATS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum CompareMode {
    /// Pair by nearest latency, compare accuracy.
    IsoCompute,
    /// Pair by nearest accuracy, compare latency.
    IsoAccuracy,
}

/// One system configuration. Accuracy is in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub label: String,
    pub frames: Option<f64>,
    pub latency_s: f64,
    pub accuracy: f64,
}

impl OperatingPoint {
    pub fn new(
        label: impl Into<String>,
        frames: Option<f64>,
        latency_s: f64,
        accuracy: f64,
    ) -> Self {
        Self {
            label: label.into(),
            frames,
            latency_s,
            accuracy,
        }
    }

    pub fn from_report(report: &RunReport) -> Self {
        Self::new(
            report.label.clone(),
            Some(report.mean_frames_per_question),
            report.mean_latency_s,
            report.accuracy_overall * 100.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub baseline: OperatingPoint,
    pub candidate: OperatingPoint,
    /// candidate minus baseline, rounded to 1e-6
    pub delta_accuracy: f64,
    pub delta_latency_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mode: CompareMode,
    pub rows: Vec<ComparisonRow>,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Pairs each candidate with the nearest baseline (by latency for iso-compute,
/// by accuracy for iso-accuracy). Ties go to the earlier baseline.
pub fn compare_points(
    baselines: &[OperatingPoint],
    candidates: &[OperatingPoint],
    mode: CompareMode,
) -> Comparison {
    let key = |p: &OperatingPoint| match mode {
        CompareMode::IsoCompute => p.latency_s,
        CompareMode::IsoAccuracy => p.accuracy,
    };
    let rows = candidates
        .iter()
        .filter_map(|c| {
            let b = baselines
                .iter()
                .min_by(|x, y| (key(x) - key(c)).abs().total_cmp(&(key(y) - key(c)).abs()))?;
            Some(ComparisonRow {
                baseline: b.clone(),
                candidate: c.clone(),
                delta_accuracy: round6(c.accuracy - b.accuracy),
                delta_latency_s: round6(c.latency_s - b.latency_s),
            })
        })
        .collect();
    Comparison { mode, rows }
}

pub fn compare_runs(a: &RunReport, b: &RunReport, mode: CompareMode) -> Comparison {
    compare_points(
        &[OperatingPoint::from_report(a)],
        &[OperatingPoint::from_report(b)],
        mode,
    )
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let title = match self.mode {
            CompareMode::IsoCompute => "iso-compute: same latency, compare accuracy",
            CompareMode::IsoAccuracy => "iso-accuracy: same accuracy, compare latency",
        };
        let mut s = format!("{title}\n");
        s.push_str(&format!(
            "{:<28} {:>7} {:>12} {:>9}\n",
            "system", "frames", "latency (s)", "accuracy"
        ));
        let frames = |f: Option<f64>| f.map_or("-".to_string(), |f| format!("{f}"));
        for r in &self.rows {
            for p in [&r.baseline, &r.candidate] {
                s.push_str(&format!(
                    "{:<28} {:>7} {:>12.1} {:>9.1}\n",
                    p.label,
                    frames(p.frames),
                    p.latency_s,
                    p.accuracy
                ));
            }
            s.push_str(&format!(
                "  delta accuracy {:+.1}  delta latency {:+.1} s\n",
                r.delta_accuracy, r.delta_latency_s
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const VALID: &str = r#"{"item_id":"a","video_id":"v","question":"q?","options":["0","1","2","3","4"],"answer":2,"qtype":"causal"}
{"item_id":"b","video_id":"v","question":"q?","options":["0","1","2","3","4"],"answer":0,"qtype":"temporal"}

{"item_id":"c","video_id":"w","question":"q?","options":["0","1","2","3","4"],"answer":4}
"#;

    #[test]
    fn loads_valid_fixture() {
        let items = parse_dataset(VALID.as_bytes(), SchemaId::Nextqa).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[2].answer, Answer::Choice(4));
    }

    #[test]
    fn missing_answer_names_line() {
        let text = VALID.replace(r#","answer":0"#, "");
        match parse_dataset(text.as_bytes(), SchemaId::Nextqa) {
            Err(EvalError::SchemaViolation { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "answer");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_item_rejected() {
        let text = VALID.replace(r#""item_id":"b""#, r#""item_id":"a""#);
        assert!(matches!(
            parse_dataset(text.as_bytes(), SchemaId::Nextqa),
            Err(EvalError::SchemaViolation { line: 2, .. })
        ));
    }

    #[test]
    fn schema_specific_checks() {
        let mcq = r#"{"item_id":"m","video_id":"v","question":"q","options":["a","b","c"],"answer":[0,2],"qtype":"explanatory"}
{"item_id":"w","video_id":"v","question":"q","answer":"yes","qtype":"descriptive"}"#;
        let items = parse_dataset(mcq.as_bytes(), SchemaId::Clevrer).unwrap();
        assert_eq!(
            SchemaId::Clevrer.template_for(&items[0]),
            TemplateId::ClevrerMcq
        );
        assert_eq!(
            SchemaId::Clevrer.template_for(&items[1]),
            TemplateId::ClevrerBinary
        );
        assert!(parse_dataset(mcq.as_bytes(), SchemaId::Egoschema).is_err());
        let bad_tag = r#"{"item_id":"m","video_id":"v","question":"q","options":["a","b","c"],"answer":[0],"qtype":"weird"}"#;
        assert!(parse_dataset(bad_tag.as_bytes(), SchemaId::Clevrer).is_err());
        let word = r#"{"item_id":"x","video_id":"v","question":"where?","answer":"kitchen"}"#;
        assert_eq!(
            parse_dataset(word.as_bytes(), SchemaId::Anet)
                .unwrap()
                .len(),
            1
        );
        assert_eq!(SchemaId::Intentqa.default_frames(), 12);
        assert_eq!(SchemaId::Clevrer.default_frames(), 5);
        assert_eq!(SchemaId::Egoschema.default_frames(), 32);
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn multi_select_examples() {
        assert_eq!(
            score_multi_select(&set(&[0, 2]), &set(&[0, 2]), 4).unwrap(),
            (4, true)
        );
        assert_eq!(
            score_multi_select(&set(&[0]), &set(&[0, 2]), 4).unwrap(),
            (3, false)
        );
        assert_eq!(
            score_multi_select(&set(&[]), &set(&[1]), 4).unwrap(),
            (3, false)
        );
        assert!(matches!(
            score_multi_select(&set(&[5]), &set(&[1]), 4),
            Err(EvalError::OptionOutOfRange {
                option: 5,
                count: 4
            })
        ));
    }

    fn choice_item(id: &str, answer: usize, qtype: &str) -> QAItem {
        QAItem {
            item_id: id.into(),
            video_id: "v".into(),
            question: "q".into(),
            options: (0..5).map(|i| i.to_string()).collect(),
            answer: Answer::Choice(answer),
            qtype: Some(qtype.into()),
        }
    }

    fn answered(item: &QAItem, value: Answer, frames: usize) -> ResultRecord {
        let raw = format!("{value:?}");
        ResultRecord {
            item_id: item.item_id.clone(),
            selection: (0..frames).collect(),
            correct: Some(is_correct(&value, &item.answer)),
            outcome: Outcome::Answered {
                parsed: ParsedAnswer { value, raw },
            },
            wall_clock_s: 1.0,
            frames_used: frames,
        }
    }

    fn dropped(item: &QAItem, reason: DropReason) -> ResultRecord {
        ResultRecord {
            item_id: item.item_id.clone(),
            selection: vec![],
            outcome: Outcome::Dropped {
                reason,
                raw: String::new(),
            },
            correct: None,
            wall_clock_s: 1.0,
            frames_used: 32,
        }
    }

    #[test]
    fn accuracy_three_of_four() {
        let items: Vec<_> = (0..4)
            .map(|i| choice_item(&format!("i{i}"), 1, "causal"))
            .collect();
        let recs: Vec<_> = items
            .iter()
            .enumerate()
            .map(|(i, it)| answered(it, Answer::Choice(if i == 3 { 0 } else { 1 }), 32))
            .collect();
        let r = evaluate_run("t", &recs, &items).unwrap();
        assert_eq!(r.accuracy_overall, 0.75);
        assert_eq!(r.drop_rate, 0.0);
        assert_eq!(r.mean_frames_per_question, 32.0);
    }

    #[test]
    fn blocked_changes_denominators() {
        let items: Vec<_> = (0..10)
            .map(|i| choice_item(&format!("i{i}"), 1, "causal"))
            .collect();
        let mut recs: Vec<_> = items[..9]
            .iter()
            .map(|it| answered(it, Answer::Choice(1), 8))
            .collect();
        recs.push(dropped(&items[9], DropReason::Blocked));
        let r = evaluate_run("t", &recs, &items).unwrap();
        assert_eq!(r.overall.answered, 9);
        assert_eq!(r.overall.total, 10);
        assert_eq!(r.accuracy_overall, 1.0);
        assert_eq!(r.accuracy_strict, 0.9);
        assert_eq!(r.dropped_blocked, 1);
        assert_eq!(r.drop_rate, 0.1);
    }

    #[test]
    fn item_mismatch() {
        let items = vec![choice_item("a", 0, "causal")];
        let other = choice_item("b", 0, "causal");
        assert!(matches!(
            evaluate_run("t", &[answered(&other, Answer::Choice(0), 1)], &items),
            Err(EvalError::ItemMismatch(_))
        ));
        assert!(matches!(
            evaluate_run("t", &[], &items),
            Err(EvalError::ItemMismatch(_))
        ));
    }

    #[test]
    fn grade_maps_outcomes() {
        let it = choice_item("a", 3, "causal");
        let text = Completion::Text {
            text: "Final Answer: (3)".into(),
        };
        let parsed = crate::vlmclient::parse_answer("Final Answer: (3)", TemplateId::Egoschema);
        let r = ResultRecord::grade(&it, vec![1, 2], &text, Some(parsed), 0.5);
        assert_eq!(r.correct, Some(true));
        assert_eq!(r.frames_used, 2);
        let garbage = Completion::Text { text: "hmm".into() };
        let r = ResultRecord::grade(
            &it,
            vec![],
            &garbage,
            Some(Err(Unparseable { raw: "hmm".into() })),
            0.5,
        );
        assert!(matches!(
            r.outcome,
            Outcome::Dropped {
                reason: DropReason::Unparseable,
                ..
            }
        ));
        let blocked = Completion::Blocked {
            reason: "content_filter".into(),
        };
        let r = ResultRecord::grade(&it, vec![], &blocked, None, 0.5);
        assert!(matches!(
            r.outcome,
            Outcome::Dropped {
                reason: DropReason::Blocked,
                ..
            }
        ));
    }

    fn random_run(seed: u64) -> (Vec<QAItem>, Vec<ResultRecord>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tags = ["causal", "temporal", "descriptive"];
        let n = rng.random_range(1..60);
        let items: Vec<_> = (0..n)
            .map(|i| {
                choice_item(
                    &format!("i{i}"),
                    rng.random_range(0..5),
                    tags[rng.random_range(0..3)],
                )
            })
            .collect();
        let recs = items
            .iter()
            .map(|it| match rng.random_range(0..10) {
                0 => dropped(it, DropReason::Blocked),
                1 => dropped(it, DropReason::Unparseable),
                _ => answered(
                    it,
                    Answer::Choice(rng.random_range(0..5)),
                    rng.random_range(1..40),
                ),
            })
            .collect();
        (items, recs)
    }

    proptest! {
        #[test]
        fn overall_is_count_weighted_mean_of_types(seed in any::<u64>()) {
            let (items, recs) = random_run(seed);
            let r = evaluate_run("t", &recs, &items).unwrap();
            let correct: usize = r.accuracy_by_qtype.values().map(|t| t.correct).sum();
            let answered: usize = r.accuracy_by_qtype.values().map(|t| t.answered).sum();
            prop_assert_eq!(correct, r.overall.correct);
            prop_assert_eq!(answered, r.overall.answered);
            let weighted: f64 = r.accuracy_by_qtype.values().map(|t| t.accuracy * t.answered as f64).sum::<f64>() / answered.max(1) as f64;
            prop_assert!((weighted - r.accuracy_overall).abs() < 1e-12);
        }

        #[test]
        fn strict_never_exceeds_answered(seed in any::<u64>()) {
            let (items, recs) = random_run(seed);
            let r = evaluate_run("t", &recs, &items).unwrap();
            prop_assert!(r.accuracy_strict <= r.accuracy_overall);
            prop_assert!((0.0..=1.0).contains(&r.drop_rate));
        }

        #[test]
        fn order_independent(seed in any::<u64>()) {
            let (items, mut recs) = random_run(seed);
            let a = evaluate_run("t", &recs, &items).unwrap();
            recs.reverse();
            let b = evaluate_run("t", &recs, &items).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn latency_stub_and_failure() {
        let r = measure_latency(
            || {
                std::thread::sleep(std::time::Duration::from_millis(50));
                Ok::<_, String>(())
            },
            5,
        )
        .unwrap();
        assert_eq!(r.runs_s.len(), 5);
        assert!((r.mean_s - 0.050).abs() < 0.005, "{}", r.mean_s);
        let mut n = 0;
        let err = measure_latency(
            || {
                n += 1;
                if n == 3 {
                    Err("boom")
                } else {
                    Ok(())
                }
            },
            5,
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::TaskFailed { run: 3, .. }));
    }

    #[test]
    fn self_comparison_is_zero() {
        let p = OperatingPoint::new("x", Some(32.0), 10.0, 50.0);
        for mode in [CompareMode::IsoCompute, CompareMode::IsoAccuracy] {
            let c = compare_points(std::slice::from_ref(&p), std::slice::from_ref(&p), mode);
            assert_eq!(c.rows[0].delta_accuracy, 0.0);
            assert_eq!(c.rows[0].delta_latency_s, 0.0);
        }
    }
}
