//! Prompt rendering, chat-completion transport, answer parsing and the mock oracle.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalharness::{Answer, QAItem};
use crate::ingest::{Frame, IndexSet};
use crate::synthworld::SurpriseAnnotation;
use crate::transport::{self, RetryPolicy, Semaphore};

pub const ENDPOINT_ENV: &str = "VAP_VLM_ENDPOINT";
pub const MODEL_ENV: &str = "VAP_VLM_MODEL";
pub const KEY_ENV: &str = "VAP_VLM_KEY";

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("template {template} expects {expected} options, item has {actual}")]
    TemplateArityMismatch {
        template: TemplateId,
        expected: usize,
        actual: usize,
    },
    #[error("template {template} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder {
        template: TemplateId,
        placeholder: String,
    },
    #[error("unauthorized ({status})")]
    Unauthorized { status: u16 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("no recorded response for request {hash}")]
    FixtureMissing { hash: String },
    #[error("fixture io: {0}")]
    FixtureIo(#[from] std::io::Error),
}

#[derive(
    Clone,
    Copy,
    Debug,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TemplateId {
    Egoschema,
    NextqaNumeric,
    NextqaFrames,
    AnetWord,
    ClevrerMcq,
    ClevrerBinary,
    GenerationConditioning,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::Egoschema,
        TemplateId::NextqaNumeric,
        TemplateId::NextqaFrames,
        TemplateId::AnetWord,
        TemplateId::ClevrerMcq,
        TemplateId::ClevrerBinary,
        TemplateId::GenerationConditioning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Egoschema => "egoschema",
            TemplateId::NextqaNumeric => "nextqa_numeric",
            TemplateId::NextqaFrames => "nextqa_frames",
            TemplateId::AnetWord => "anet_word",
            TemplateId::ClevrerMcq => "clevrer_mcq",
            TemplateId::ClevrerBinary => "clevrer_binary",
            TemplateId::GenerationConditioning => "generation_conditioning",
        }
    }

    pub fn answer_kind(self) -> AnswerKind {
        match self {
            TemplateId::Egoschema | TemplateId::NextqaNumeric | TemplateId::NextqaFrames => {
                AnswerKind::SingleChoice
            }
            TemplateId::ClevrerMcq => AnswerKind::MultiChoice,
            TemplateId::AnetWord
            | TemplateId::ClevrerBinary
            | TemplateId::GenerationConditioning => AnswerKind::Word,
        }
    }
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

const EGOSCHEMA: &str = "You will be given a question about a video and five possible answer options, where C refers to the person wearing the camera. You will be provided frames from the video, sampled evenly across the video.
{video}
Question: {question}
Possible answer choices:
(0) {option0}
(1) {option1}
(2) {option2}
(3) {option3}
(4) {option4}
After explaining your reasoning, output the final answer in the format \"Final Answer: (X)\", where X is the correct digit choice. Never say \"unknown\" or \"unsure\", or \"None\", instead provide your most likely guess.";

const NEXTQA_NUMERIC: &str = "You are provided with a video followed by a question and choices. Answer the questions providing only the number of the correct choice.
{video} {question} 0. {option0} 1. {option1} 2. {option2} 3. {option3} 4. {option4}";

const NEXTQA_FRAMES: &str = "These are frames from a video that I want to upload. Answer the questions providing only the number of the correct choice.
{video} {question} 0. {option0} 1. {option1} 2. {option2} 3. {option3} 4. {option4}";

const ANET_WORD: &str = "{video}
Answer the following question about the video using only a word or two. Never say \"unknown\", \"N/A\" or \"unsure\", instead provide your most likely guess. Note that \"where\" questions refer to locations and not relative positions. Answer binary questions with yes or no.
Question: {question} Answer:";

const CLEVRER_MCQ: &str = "You will be provided frames from a video, sampled evenly across the video. You will also be given a question about the video and an enumerated list of options. Select all options that are correct. After explaining your reasoning, output your final answer in the format \"Final Answer: {comma separated list of correct option numbers}\". At least one option is correct, so always pick the option(s) that are most likely to be correct even if no option seems entirely correct.
{video}
Question: {question}
Options:
{options_list}";

const CLEVRER_BINARY: &str = "You will be provided frames from a video, sampled evenly across the video. Answer the question about the video using only a word or number. Never say \"unknown\", \"N/A\" or \"unsure\", instead provide your most likely guess. Answer binary questions with yes or no.
{video}
Question: {question} Answer:";

const GENERATION_CONDITIONING: &str = "System: You are an advanced video generation model designed to predict plausible future video dynamics based on limited input. Your primary goal is to use your extensive prior knowledge of the world to generate latent representations of how the video is expected to unfold, given:
A few initial frames from the video;
A question about the video;
Possible answers to the question;
These generated dynamics will assist in identifying key frames in the actual video that are most informative for answering the question.
User: Your Task:
1) Analyze the Initial Frames:
1a) Examine the provided initial frames to understand the setting, context, characters, objects, and any ongoing actions or events.
1b) Extract visual cues that indicate the environment (e.g., indoor, outdoor, time of day) and participants (e.g., people, animals, objects).
2) Incorporate the Question and Possible Answers:
2a) Read the question carefully to determine what information is being sought.
2b) Consider each possible answer to understand different potential outcomes or scenarios.
2c) Use this information to guide your expectations of how the video might progress.
3) Generate Expected Video Dynamics:
3a) Using your prior knowledge and the initial frames, predict plausible sequences of events that align with the context and are relevant to the question.
3b) Focus on generating dynamics that would lead to scenarios described in the possible answers.
3c) Create latent representations that capture these expected continuations, including scenes, events, actions, and transitions.
Input Information:
1) Question about the video: {question}
2) Possible Answers: {answers}
3) Initial Frames: {video}";

/// Literal braces that are part of the prompt text rather than placeholders.
const LITERAL_BRACES: &[&str] = &["{comma separated list of correct option numbers}"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

impl PromptTemplate {
    pub fn builtin(id: TemplateId) -> Self {
        let body = match id {
            TemplateId::Egoschema => EGOSCHEMA,
            TemplateId::NextqaNumeric => NEXTQA_NUMERIC,
            TemplateId::NextqaFrames => NEXTQA_FRAMES,
            TemplateId::AnetWord => ANET_WORD,
            TemplateId::ClevrerMcq => CLEVRER_MCQ,
            TemplateId::ClevrerBinary => CLEVRER_BINARY,
            TemplateId::GenerationConditioning => GENERATION_CONDITIONING,
        };
        Self {
            id,
            body: body.into(),
        }
    }

    /// Number of options the body addresses individually, if fixed.
    pub fn arity(&self) -> Option<usize> {
        let slots: Vec<usize> = self
            .pieces()
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => s.strip_prefix("option").and_then(|n| n.parse().ok()),
                _ => None,
            })
            .collect();
        slots.iter().max().map(|m| m + 1)
    }

    pub fn placeholders(&self) -> Vec<String> {
        self.pieces()
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s),
                Piece::Text(_) => None,
            })
            .collect()
    }

    fn pieces(&self) -> Vec<Piece> {
        let mut out = Vec::new();
        let mut text = String::new();
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            if let Some(lit) = LITERAL_BRACES
                .iter()
                .find(|l| rest[open..].starts_with(**l))
            {
                text.push_str(&rest[..open + lit.len()]);
                rest = &rest[open + lit.len()..];
                continue;
            }
            match rest[open..].find('}') {
                Some(close) => {
                    text.push_str(&rest[..open]);
                    if !text.is_empty() {
                        out.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    out.push(Piece::Slot(rest[open + 1..open + close].to_string()));
                    rest = &rest[open + close + 1..];
                }
                None => break,
            }
        }
        text.push_str(rest);
        if !text.is_empty() {
            out.push(Piece::Text(text));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum Segment {
    Text(String),
    Image(Frame),
}

#[derive(Clone, Debug)]
pub struct ChatRequest {
    pub template: TemplateId,
    pub model_id: String,
    pub segments: Vec<Segment>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
}

impl ChatRequest {
    pub fn image_indices(&self) -> Vec<usize> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Image(f) => Some(f.index),
                Segment::Text(_) => None,
            })
            .collect()
    }

    pub fn text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.as_str()),
                Segment::Image(_) => None,
            })
            .collect()
    }

    /// Content hash used to key recorded fixtures. Images hash by pixel content;
    /// sampling parameters are included.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model_id.as_bytes());
        h.update([0]);
        h.update(self.template.as_str().as_bytes());
        for p in [self.temperature, self.top_p] {
            h.update(p.map_or([0xff; 8], f64::to_le_bytes));
        }
        for s in &self.segments {
            match s {
                Segment::Text(t) => {
                    h.update(b"T");
                    h.update((t.len() as u64).to_le_bytes());
                    h.update(t.as_bytes());
                }
                Segment::Image(f) => {
                    h.update(b"I");
                    h.update((f.index as u64).to_le_bytes());
                    h.update(f.width().to_le_bytes());
                    h.update(f.height().to_le_bytes());
                    h.update(f.image.as_raw());
                }
            }
        }
        h.finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// OpenAI-style chat body with interleaved content parts.
    pub fn to_wire(&self) -> Value {
        let content: Vec<Value> = self
            .segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => json!({"type": "text", "text": t}),
                Segment::Image(f) => {
                    let b64 = base64::engine::general_purpose::STANDARD.encode(f.to_png());
                    json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}})
                }
            })
            .collect();
        let mut body = json!({
            "model": self.model_id,
            "messages": [{"role": "user", "content": content}],
        });
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(p) = self.top_p {
            body["top_p"] = json!(p);
        }
        body
    }
}

/// Substitutes the item into the template. Frames are inserted at `{video}` in
/// ascending index order.
pub fn render_prompt(
    template: &PromptTemplate,
    item: &QAItem,
    frames: &[Frame],
) -> Result<ChatRequest, VlmError> {
    let placeholders = template.placeholders();
    for required in ["video", "question"] {
        if !placeholders.iter().any(|p| p == required) {
            return Err(VlmError::MissingPlaceholder {
                template: template.id,
                placeholder: required.into(),
            });
        }
    }
    if let Some(arity) = template.arity() {
        if item.options.len() != arity {
            return Err(VlmError::TemplateArityMismatch {
                template: template.id,
                expected: arity,
                actual: item.options.len(),
            });
        }
    }
    let mut ordered: Vec<&Frame> = frames.iter().collect();
    ordered.sort_by_key(|f| f.index);

    let mut segments: Vec<Segment> = Vec::new();
    let push_text = |segments: &mut Vec<Segment>, t: &str| {
        if let Some(Segment::Text(prev)) = segments.last_mut() {
            prev.push_str(t);
        } else if !t.is_empty() {
            segments.push(Segment::Text(t.to_string()));
        }
    };
    for piece in template.pieces() {
        match piece {
            Piece::Text(t) => push_text(&mut segments, &t),
            Piece::Slot(name) => match name.as_str() {
                "video" => segments.extend(ordered.iter().map(|f| Segment::Image((*f).clone()))),
                "question" => push_text(&mut segments, &item.question),
                "options_list" => {
                    let list: String = item
                        .options
                        .iter()
                        .enumerate()
                        .map(|(i, o)| format!("({i}) {o}\n"))
                        .collect();
                    push_text(&mut segments, list.trim_end());
                }
                "answers" => push_text(&mut segments, &item.options.join("; ")),
                other => {
                    let idx = other
                        .strip_prefix("option")
                        .and_then(|n| n.parse::<usize>().ok());
                    match idx.and_then(|i| item.options.get(i)) {
                        Some(o) => push_text(&mut segments, o),
                        None => {
                            return Err(VlmError::MissingPlaceholder {
                                template: template.id,
                                placeholder: other.into(),
                            })
                        }
                    }
                }
            },
        }
    }
    Ok(ChatRequest {
        template: template.id,
        model_id: String::new(),
        segments,
        temperature: None,
        top_p: None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Completion {
    Text { text: String },
    Blocked { reason: String },
}

/// Chat-completion client for OpenAI-compatible endpoints.
pub struct VlmClient {
    endpoint: String,
    model: String,
    key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
    limiter: Semaphore,
}

impl VlmClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, key: Option<String>) -> Self {
        Self::with_policy(
            endpoint,
            model,
            key,
            RetryPolicy::new(5, Duration::from_secs(1)),
            Duration::from_secs(300),
            8,
        )
    }

    pub fn with_policy(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        key: Option<String>,
        retry: RetryPolicy,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            key,
            agent: transport::agent(timeout),
            retry,
            limiter: Semaphore::new(max_in_flight),
        }
    }

    /// Endpoint, model and key from `VAP_VLM_*`; `None` without an endpoint.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok()?;
        let model = std::env::var(MODEL_ENV).unwrap_or_default();
        Some(Self::new(endpoint, model, std::env::var(KEY_ENV).ok()))
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<Completion, VlmError> {
        let mut req = req.clone();
        if req.model_id.is_empty() {
            req.model_id = self.model.clone();
        }
        let body = req.to_wire();
        let url = transport::join_url(&self.endpoint, "chat/completions");
        let _permit = self.limiter.acquire();
        for attempt in 0..self.retry.max_attempts {
            std::thread::sleep(self.retry.delay_before(attempt));
            let mut call = self
                .agent
                .post(&url)
                .header("content-type", "application/json");
            if let Some(key) = &self.key {
                call = call.header("authorization", format!("Bearer {key}"));
            }
            let mut resp = call
                .send(body.to_string())
                .map_err(|e| VlmError::TransportError(e.to_string()))?;
            let status = resp.status().as_u16();
            let text = transport::read_body(&mut resp)
                .map_err(|e| VlmError::TransportError(e.to_string()))?;
            match status {
                200..=299 => return parse_completion(&text),
                401 | 403 => return Err(VlmError::Unauthorized { status }),
                429 => {
                    tracing::warn!(attempt, "vlm rate limited");
                    continue;
                }
                _ => {
                    return Err(VlmError::TransportError(format!(
                        "HTTP {status}: {}",
                        truncate(&text, 200)
                    )))
                }
            }
        }
        Err(VlmError::RateLimited {
            attempts: self.retry.max_attempts,
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn parse_completion(body: &str) -> Result<Completion, VlmError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| VlmError::TransportError(format!("bad JSON: {e}")))?;
    let Some(choice) = v["choices"].get(0) else {
        // Some providers report filtered prompts with no choices at all.
        let reason = v["prompt_filter_results"]
            .as_array()
            .map(|_| "prompt_filter")
            .unwrap_or("no choices");
        return Ok(Completion::Blocked {
            reason: reason.into(),
        });
    };
    if choice["finish_reason"] == "content_filter" {
        return Ok(Completion::Blocked {
            reason: "content_filter".into(),
        });
    }
    match choice["message"]["content"].as_str() {
        Some(t) if !t.trim().is_empty() => Ok(Completion::Text {
            text: t.to_string(),
        }),
        _ => Ok(Completion::Blocked {
            reason: "empty response".into(),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    SingleChoice,
    MultiChoice,
    Word,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub value: Answer,
    pub raw: String,
}

impl ParsedAnswer {
    pub fn kind(&self) -> AnswerKind {
        self.value.kind()
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("unparseable response: {raw:?}")]
pub struct Unparseable {
    pub raw: String,
}

const MARKER: &str = "final answer:";

/// Position just past the last case-insensitive `Final Answer:`.
fn after_last_marker(text: &str) -> Option<&str> {
    let lower = text.to_ascii_lowercase();
    lower.rfind(MARKER).map(|i| &text[i + MARKER.len()..])
}

fn standalone_choice_digit(text: &str) -> Option<usize> {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len()).find_map(|i| {
        let c = chars[i];
        let isolated = |j: Option<&char>| j.is_none_or(|c| !c.is_alphanumeric());
        if ('0'..='4').contains(&c)
            && isolated(i.checked_sub(1).and_then(|j| chars.get(j)))
            && isolated(chars.get(i + 1))
        {
            c.to_digit(10).map(|d| d as usize)
        } else {
            None
        }
    })
}

const REFUSALS: &[&str] = &[
    "i am not sure",
    "i'm not sure",
    "not sure",
    "i cannot",
    "i can't",
    "i can not",
    "sorry",
    "unable to",
    "unknown",
    "unsure",
    "n/a",
    "none",
];

fn normalize_word(text: &str) -> Option<String> {
    let lower = text.trim().to_lowercase();
    let lower = lower.strip_prefix("answer:").unwrap_or(&lower).trim();
    if lower.is_empty() || REFUSALS.iter().any(|r| lower.starts_with(r)) {
        return None;
    }
    let words: Vec<String> = lower
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .take(2)
        .collect();
    let first = words.first()?;
    let yes_no = match first.as_str() {
        "yes" | "yeah" | "yep" | "true" => Some("yes"),
        "no" | "nope" | "false" => Some("no"),
        _ => None,
    };
    Some(match yes_no {
        Some(y) => y.to_string(),
        None => words.join(" "),
    })
}

/// Extracts the answer for a protocol.
///
/// * egoschema: first digit 0-4 after the last `Final Answer:`
/// * nextqa_*: first standalone digit 0-4
/// * clevrer_mcq: comma list after the last `Final Answer:`, deduplicated and
///   sorted; an empty list is a valid no-answer
/// * anet_word, clevrer_binary: up to two words, lowercased, punctuation
///   stripped, yes/no synonyms folded
///
/// Each of [`GARBAGE_RESPONSES`] is unparseable under every protocol.
pub fn parse_answer(text: &str, protocol: TemplateId) -> Result<ParsedAnswer, Unparseable> {
    let fail = || Unparseable {
        raw: text.to_string(),
    };
    let value = match protocol {
        TemplateId::Egoschema => {
            let tail = after_last_marker(text).ok_or_else(fail)?;
            let d = tail
                .chars()
                .find(|c| ('0'..='4').contains(c))
                .ok_or_else(fail)?;
            Answer::Choice(d.to_digit(10).unwrap() as usize)
        }
        TemplateId::NextqaNumeric | TemplateId::NextqaFrames => {
            Answer::Choice(standalone_choice_digit(text).ok_or_else(fail)?)
        }
        TemplateId::ClevrerMcq => {
            let tail = after_last_marker(text).ok_or_else(fail)?;
            let line = tail.lines().next().unwrap_or("");
            let inner: String = line.chars().filter(|c| !"{}[]()".contains(*c)).collect();
            let inner = inner.trim().trim_end_matches('.');
            let mut set = BTreeSet::new();
            if !inner.eq_ignore_ascii_case("none") {
                for tok in inner.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                    set.insert(tok.parse::<usize>().map_err(|_| fail())?);
                }
            }
            Answer::Choices(set)
        }
        TemplateId::AnetWord | TemplateId::ClevrerBinary => {
            Answer::Word(normalize_word(text).ok_or_else(fail)?)
        }
        TemplateId::GenerationConditioning => return Err(fail()),
    };
    Ok(ParsedAnswer {
        value,
        raw: text.to_string(),
    })
}

/// Responses that carry no answer under any protocol.
pub const GARBAGE_RESPONSES: [&str; 3] = [
    "I am not sure about this video.",
    "",
    "Sorry, I can't help with that.",
];

/// Word-level normalization applied to ground-truth strings before exact matching.
pub fn normalize_truth_word(word: &str) -> String {
    normalize_word(word).unwrap_or_else(|| word.trim().to_lowercase())
}

fn item_seed(seed: u64, item_id: &str) -> u64 {
    let digest = Sha256::digest(item_id.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Whether any selected index falls in a window belonging to the item.
pub fn selection_hits(item: &QAItem, selected: &IndexSet, truth: &SurpriseAnnotation) -> bool {
    truth
        .windows
        .iter()
        .filter(|w| w.item_id.as_deref().is_none_or(|id| id == item.item_id))
        .any(|w| {
            selected
                .indices()
                .iter()
                .any(|&i| i >= w.start && i <= w.end)
        })
}

/// Deterministic stand-in answerer: correct iff the selection touches one of
/// the item's surprise windows, otherwise a seeded wrong answer.
pub fn mock_oracle(
    item: &QAItem,
    selected: &IndexSet,
    truth: &SurpriseAnnotation,
    seed: u64,
) -> String {
    let hit = selection_hits(item, selected, truth);
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, &item.item_id));
    match &item.answer {
        Answer::Choice(c) => {
            let choice = if hit {
                *c
            } else {
                let wrong: Vec<usize> = (0..item.options.len().max(2)).filter(|o| o != c).collect();
                *wrong.choose(&mut rng).unwrap()
            };
            format!("Final Answer: ({choice})")
        }
        Answer::Choices(set) => {
            let chosen: BTreeSet<usize> = if hit {
                set.clone()
            } else {
                // flip one option's membership
                let n = item.options.len().max(1);
                let flip = *(0..n).collect::<Vec<_>>().choose(&mut rng).unwrap();
                let mut s = set.clone();
                if !s.remove(&flip) {
                    s.insert(flip);
                }
                s
            };
            let list: Vec<String> = chosen.iter().map(|c| c.to_string()).collect();
            format!("Final Answer: {}", list.join(", "))
        }
        Answer::Word(w) => {
            if hit {
                w.clone()
            } else if normalize_truth_word(w) == "yes" {
                "no".into()
            } else if normalize_truth_word(w) == "no" {
                "yes".into()
            } else {
                "something else".into()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FixtureMode {
    Record,
    Replay,
}

/// Request-hash keyed store of responses for offline reruns.
#[derive(Clone, Debug)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn load(&self, req: &ChatRequest) -> Result<Option<Completion>, VlmError> {
        let path = self.path(&req.fingerprint());
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| {
                VlmError::FixtureIo(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn store(&self, req: &ChatRequest, completion: &Completion) -> Result<(), VlmError> {
        std::fs::create_dir_all(&self.dir)?;
        let tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(tmp.as_file(), completion)
            .map_err(|e| VlmError::FixtureIo(std::io::Error::other(e)))?;
        tmp.persist(self.path(&req.fingerprint()))
            .map_err(|e| e.error)?;
        Ok(())
    }
}

/// Where answers come from during evaluation.
pub enum VlmBackend {
    Mock { seed: u64 },
    Remote(Arc<VlmClient>),
    Replay(FixtureStore),
    Record(Arc<VlmClient>, FixtureStore),
}

impl VlmBackend {
    pub fn is_mock(&self) -> bool {
        matches!(self, VlmBackend::Mock { .. })
    }

    /// Answers one rendered request. `truth` is required by the mock oracle.
    pub fn respond(
        &self,
        req: &ChatRequest,
        item: &QAItem,
        selected: &IndexSet,
        truth: Option<&SurpriseAnnotation>,
    ) -> Result<Completion, VlmError> {
        match self {
            VlmBackend::Mock { seed } => {
                let empty = SurpriseAnnotation::default();
                Ok(Completion::Text {
                    text: mock_oracle(item, selected, truth.unwrap_or(&empty), *seed),
                })
            }
            VlmBackend::Remote(client) => client.complete(req),
            VlmBackend::Replay(store) => store.load(req)?.ok_or_else(|| VlmError::FixtureMissing {
                hash: req.fingerprint(),
            }),
            VlmBackend::Record(client, store) => {
                if let Some(c) = store.load(req)? {
                    return Ok(c);
                }
                let c = client.complete(req)?;
                store.store(req, &c)?;
                Ok(c)
            }
        }
    }
}
