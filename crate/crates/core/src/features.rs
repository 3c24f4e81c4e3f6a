//! Token streams for the model.
//!
//! Each question event becomes eight categorical ids: three on the encoder
//! side (question, part, explanation flag) and five on the decoder side
//! (shifted response, prior elapsed time, lag in seconds/minutes/days).
//! Continuous durations are floor-divided into fixed buckets and clamped to
//! the top bucket. Histories are cut into left-padded windows of `max_seq`.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{QuestionMeta, UserHistory};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_SEQ: usize = 100;
pub const DEFAULT_STRIDE: usize = 100;

pub const ELAPSED_BUCKETS: usize = 301;
pub const LAG_SECOND_BUCKETS: usize = 301;
pub const LAG_MINUTE_BUCKETS: usize = 1441;
pub const LAG_DAY_BUCKETS: usize = 366;
pub const EXPLANATION_IDS: usize = 3;
pub const RESPONSE_IDS: usize = 3;
pub const PARTS: usize = 7;

const MS_PER_SECOND: u64 = 1_000;
const MS_PER_MINUTE: u64 = 60_000;
const MS_PER_DAY: u64 = 86_400_000;

/// Response id at the first valid position of a window.
pub const START_TOKEN: u32 = 0;

/// The eight categorical input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Question,
    Part,
    Explanation,
    Response,
    Elapsed,
    LagSeconds,
    LagMinutes,
    LagDays,
}

impl Stream {
    pub const ALL: [Stream; 8] = [
        Stream::Question,
        Stream::Part,
        Stream::Explanation,
        Stream::Response,
        Stream::Elapsed,
        Stream::LagSeconds,
        Stream::LagMinutes,
        Stream::LagDays,
    ];

    pub const LAG: [Stream; 3] = [Stream::LagSeconds, Stream::LagMinutes, Stream::LagDays];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Question => "question",
            Stream::Part => "part",
            Stream::Explanation => "explanation",
            Stream::Response => "response",
            Stream::Elapsed => "elapsed",
            Stream::LagSeconds => "lag_s",
            Stream::LagMinutes => "lag_m",
            Stream::LagDays => "lag_d",
        }
    }
}

/// Non-pad vocabulary size of every stream. Each stream reserves one extra
/// id, equal to its non-pad size, for padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub questions: usize,
    pub parts: usize,
    pub explanation: usize,
    pub response: usize,
    pub elapsed: usize,
    pub lag_s: usize,
    pub lag_m: usize,
    pub lag_d: usize,
}

impl VocabSpec {
    pub fn new(n_questions: usize) -> Self {
        Self {
            questions: n_questions,
            parts: PARTS,
            explanation: EXPLANATION_IDS,
            response: RESPONSE_IDS,
            elapsed: ELAPSED_BUCKETS,
            lag_s: LAG_SECOND_BUCKETS,
            lag_m: LAG_MINUTE_BUCKETS,
            lag_d: LAG_DAY_BUCKETS,
        }
    }

    pub fn pad_id(&self, stream: Stream) -> u32 {
        let n = match stream {
            Stream::Question => self.questions,
            Stream::Part => self.parts,
            Stream::Explanation => self.explanation,
            Stream::Response => self.response,
            Stream::Elapsed => self.elapsed,
            Stream::LagSeconds => self.lag_s,
            Stream::LagMinutes => self.lag_m,
            Stream::LagDays => self.lag_d,
        };
        n as u32
    }

    /// Embedding rows including the pad row.
    pub fn rows(&self, stream: Stream) -> usize {
        self.pad_id(stream) as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        for s in Stream::ALL {
            if self.pad_id(s) == 0 {
                return Err(Error::Invalid(format!("vocabulary for {} is empty", s.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LagBuckets {
    pub lag_s: u32,
    pub lag_m: u32,
    pub lag_d: u32,
}

fn clamp_div(ms: u64, unit: u64, top: usize) -> u32 {
    (ms / unit).min(top as u64 - 1) as u32
}

/// Seconds spent on the previous question, clamped to 300; missing → 0.
pub fn bucket_elapsed(prior_elapsed_ms: Option<i64>) -> Result<u32> {
    match prior_elapsed_ms {
        None => Ok(0),
        Some(ms) if ms < 0 => Err(Error::NegativeDuration(ms)),
        Some(ms) => Ok(clamp_div(ms as u64, MS_PER_SECOND, ELAPSED_BUCKETS)),
    }
}

/// Start-to-start gap between consecutive events at three granularities.
pub fn compute_lag_buckets(prev_ts_ms: i64, cur_ts_ms: i64) -> Result<LagBuckets> {
    if cur_ts_ms < prev_ts_ms {
        return Err(Error::OutOfOrder {
            previous: prev_ts_ms,
            current: cur_ts_ms,
        });
    }
    let dt = (cur_ts_ms - prev_ts_ms) as u64;
    Ok(LagBuckets {
        lag_s: clamp_div(dt, MS_PER_SECOND, LAG_SECOND_BUCKETS),
        lag_m: clamp_div(dt, MS_PER_MINUTE, LAG_MINUTE_BUCKETS),
        lag_d: clamp_div(dt, MS_PER_DAY, LAG_DAY_BUCKETS),
    })
}

/// absent → 0, false → 1, true → 2.
pub fn encode_explanation(flag: Option<bool>) -> u32 {
    match flag {
        None => 0,
        Some(false) => 1,
        Some(true) => 2,
    }
}

/// Shifts correctness right by one behind the start token:
/// `out[0] = 0`, `out[i] = correctness[i - 1] + 1`.
pub fn encode_response_stream(correctness: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(correctness.len());
    if correctness.is_empty() {
        return out;
    }
    out.push(START_TOKEN);
    out.extend(correctness[..correctness.len() - 1].iter().map(|&c| u32::from(c.min(1)) + 1));
    out
}

/// Dense indexing of question ids, in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionTable {
    ids: Vec<u64>,
    parts: Vec<u8>,
    index: HashMap<u64, u32>,
}

impl QuestionTable {
    pub fn new(questions: &BTreeMap<u64, QuestionMeta>) -> Self {
        let ids: Vec<u64> = questions.keys().copied().collect();
        let parts = questions.values().map(|q| q.part).collect();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
        Self { ids, parts, index }
    }

    pub fn from_parts(ids: Vec<u64>, parts: Vec<u8>) -> Result<Self> {
        if ids.len() != parts.len() {
            return Err(Error::Invalid("question ids and parts differ in length".into()));
        }
        let index: HashMap<u64, u32> = ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
        if index.len() != ids.len() {
            return Err(Error::Invalid("question ids are not unique".into()));
        }
        Ok(Self { ids, parts, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn parts(&self) -> &[u8] {
        &self.parts
    }

    /// Dense index and zero-based part id.
    pub fn lookup(&self, content_id: u64) -> Result<(u32, u32)> {
        let idx = *self.index.get(&content_id).ok_or(Error::UnknownContent(content_id))?;
        Ok((idx, u32::from(self.parts[idx as usize]) - 1))
    }
}

/// One fixed-length, left-padded model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedWindow {
    pub user_id: u64,
    /// Index in the user's history of the first valid position.
    pub first_event: u32,
    pub question: Vec<u32>,
    pub part: Vec<u32>,
    pub explanation: Vec<u32>,
    pub response: Vec<u32>,
    pub elapsed: Vec<u32>,
    pub lag_s: Vec<u32>,
    pub lag_m: Vec<u32>,
    pub lag_d: Vec<u32>,
    pub target: Vec<u8>,
    pub valid: Vec<bool>,
}

impl EncodedWindow {
    /// A window with every position padded.
    pub fn padded(vocab: &VocabSpec, max_seq: usize, user_id: u64, first_event: u32) -> Self {
        let pad = |s| vec![vocab.pad_id(s); max_seq];
        Self {
            user_id,
            first_event,
            question: pad(Stream::Question),
            part: pad(Stream::Part),
            explanation: pad(Stream::Explanation),
            response: pad(Stream::Response),
            elapsed: pad(Stream::Elapsed),
            lag_s: pad(Stream::LagSeconds),
            lag_m: pad(Stream::LagMinutes),
            lag_d: pad(Stream::LagDays),
            target: vec![0; max_seq],
            valid: vec![false; max_seq],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn stream(&self, stream: Stream) -> &[u32] {
        match stream {
            Stream::Question => &self.question,
            Stream::Part => &self.part,
            Stream::Explanation => &self.explanation,
            Stream::Response => &self.response,
            Stream::Elapsed => &self.elapsed,
            Stream::LagSeconds => &self.lag_s,
            Stream::LagMinutes => &self.lag_m,
            Stream::LagDays => &self.lag_d,
        }
    }

    pub fn stream_mut(&mut self, stream: Stream) -> &mut Vec<u32> {
        match stream {
            Stream::Question => &mut self.question,
            Stream::Part => &mut self.part,
            Stream::Explanation => &mut self.explanation,
            Stream::Response => &mut self.response,
            Stream::Elapsed => &mut self.elapsed,
            Stream::LagSeconds => &mut self.lag_s,
            Stream::LagMinutes => &mut self.lag_m,
            Stream::LagDays => &mut self.lag_d,
        }
    }

    pub fn valid_positions(&self) -> Vec<usize> {
        self.valid.iter().enumerate().filter_map(|(i, &v)| v.then_some(i)).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Checks stream lengths and id ranges against `vocab`.
    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        let len = self.valid.len();
        if self.target.len() != len {
            return Err(Error::Invalid("target length differs from window length".into()));
        }
        for s in Stream::ALL {
            let ids = self.stream(s);
            if ids.len() != len {
                return Err(Error::Invalid(format!("{} stream has length {}, expected {len}", s.name(), ids.len())));
            }
            let pad = vocab.pad_id(s);
            for (i, &id) in ids.iter().enumerate() {
                let bad = if self.valid[i] { id >= pad } else { id != pad };
                if bad {
                    return Err(Error::TokenOutOfRange {
                        stream: s.name(),
                        id,
                        size: pad as usize,
                    });
                }
            }
        }
        if self.target.iter().zip(&self.valid).any(|(&t, &v)| t > 1 || (!v && t != 0)) {
            return Err(Error::Invalid("targets must be 0/1 and zero on pad positions".into()));
        }
        Ok(())
    }
}

/// Start offsets of the windows cut from a history of `n` events.
///
/// Offsets step by `stride`; a final window always ends at the last event.
pub fn window_offsets(n: usize, max_seq: usize, stride: usize) -> Vec<usize> {
    if n <= max_seq {
        return vec![0];
    }
    let last = n - max_seq;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    offsets
}

fn check_window_params(max_seq: usize, stride: usize) -> Result<()> {
    if max_seq == 0 {
        return Err(Error::Invalid("max_seq must be positive".into()));
    }
    if stride == 0 || stride > max_seq {
        return Err(Error::Invalid(format!("stride must be in 1..={max_seq}, got {stride}")));
    }
    Ok(())
}

/// Cuts one user's history into encoded windows.
pub fn build_windows(
    history: &UserHistory,
    questions: &QuestionTable,
    vocab: &VocabSpec,
    max_seq: usize,
    stride: usize,
) -> Result<Vec<EncodedWindow>> {
    check_window_params(max_seq, stride)?;
    let events = &history.events;
    if events.is_empty() {
        return Err(Error::Invalid(format!("user {} has an empty history", history.user_id)));
    }

    // Per-event tokens over the whole history, so lag at a window's first
    // position still sees the true previous event.
    let n = events.len();
    let mut tokens = Vec::with_capacity(n);
    for (i, e) in events.iter().enumerate() {
        let (q, part) = questions.lookup(e.content_id)?;
        let prev_ts = if i == 0 { e.timestamp_ms } else { events[i - 1].timestamp_ms };
        let lag = compute_lag_buckets(prev_ts, e.timestamp_ms)?;
        let elapsed = bucket_elapsed(e.prior_elapsed_ms.map(|v| v.min(i64::MAX as u64) as i64))?;
        tokens.push((q, part, encode_explanation(e.prior_had_explanation), elapsed, lag, e.answered_correctly.as_label()));
    }

    let mut out = Vec::new();
    for offset in window_offsets(n, max_seq, stride) {
        let len = max_seq.min(n - offset);
        let pad = max_seq - len;
        let mut w = EncodedWindow::padded(vocab, max_seq, history.user_id, offset as u32);
        let slice = &tokens[offset..offset + len];
        let labels: Vec<u8> = slice.iter().map(|t| t.5).collect();
        let responses = encode_response_stream(&labels);
        for (j, &(q, part, expl, elapsed, lag, label)) in slice.iter().enumerate() {
            let p = pad + j;
            w.question[p] = q;
            w.part[p] = part;
            w.explanation[p] = expl;
            w.response[p] = responses[j];
            w.elapsed[p] = elapsed;
            w.lag_s[p] = lag.lag_s;
            w.lag_m[p] = lag.lag_m;
            w.lag_d[p] = lag.lag_d;
            w.target[p] = label;
            w.valid[p] = true;
        }
        out.push(w);
    }
    Ok(out)
}

/// Most recent `max_seq` events of a user, as used at inference time.
pub fn build_inference_window(
    history: &UserHistory,
    questions: &QuestionTable,
    vocab: &VocabSpec,
    max_seq: usize,
) -> Result<EncodedWindow> {
    let windows = build_windows(history, questions, vocab, max_seq, max_seq)?;
    Ok(windows.into_iter().last().expect("at least one window"))
}

/// A featurized corpus: windows plus the vocabulary they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub vocab: VocabSpec,
    pub max_seq: usize,
    pub stride: usize,
    pub question_ids: Vec<u64>,
    pub n_users: usize,
    pub n_events: usize,
    pub windows: Vec<EncodedWindow>,
}

impl EncodedDataset {
    pub fn build(
        histories: &[UserHistory],
        questions: &QuestionTable,
        max_seq: usize,
        stride: usize,
    ) -> Result<Self> {
        check_window_params(max_seq, stride)?;
        let vocab = VocabSpec::new(questions.len());
        vocab.validate()?;
        let per_user: Vec<Vec<EncodedWindow>> = histories
            .par_iter()
            .map(|h| build_windows(h, questions, &vocab, max_seq, stride))
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab,
            max_seq,
            stride,
            question_ids: questions.ids().to_vec(),
            n_users: histories.len(),
            n_events: histories.iter().map(|h| h.events.len()).sum(),
            windows: per_user.into_iter().flatten().collect(),
        })
    }

    /// Replaces every lag-time id at valid positions with bucket 0.
    pub fn ablate_lag(&mut self) {
        for w in &mut self.windows {
            for s in Stream::LAG {
                let valid = w.valid.clone();
                for (id, v) in w.stream_mut(s).iter_mut().zip(valid) {
                    if v {
                        *id = 0;
                    }
                }
            }
        }
    }

    pub fn user_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.windows.iter().map(|w| w.user_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// A dataset restricted to windows matching `keep`; counts are recomputed.
    pub fn filter(&self, mut keep: impl FnMut(usize, &EncodedWindow) -> bool) -> Self {
        let windows: Vec<EncodedWindow> = self
            .windows
            .iter()
            .enumerate()
            .filter(|(i, w)| keep(*i, w))
            .map(|(_, w)| w.clone())
            .collect();
        let mut out = Self {
            windows,
            ..self.clone_header()
        };
        out.recount();
        out
    }

    fn clone_header(&self) -> Self {
        Self {
            vocab: self.vocab,
            max_seq: self.max_seq,
            stride: self.stride,
            question_ids: self.question_ids.clone(),
            n_users: 0,
            n_events: 0,
            windows: Vec::new(),
        }
    }

    fn recount(&mut self) {
        self.n_users = self.user_ids().len();
        let mut seen = std::collections::HashSet::new();
        for w in &self.windows {
            let first = w.first_event as usize;
            for k in 0..w.n_valid() {
                seen.insert((w.user_id, first + k));
            }
        }
        self.n_events = seen.len();
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.vocab.questions != self.question_ids.len() {
            return Err(Error::Invalid("question vocabulary does not match question id list".into()));
        }
        for w in &self.windows {
            if w.len() != self.max_seq {
                return Err(Error::Invalid(format!("window of length {} in dataset with max_seq {}", w.len(), self.max_seq)));
            }
            w.validate(&self.vocab)?;
        }
        Ok(())
    }
}
