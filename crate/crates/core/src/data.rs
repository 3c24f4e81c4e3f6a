//! Interaction log ingestion.
//!
//! Reads the two CSV files of the RIIID answer-correctness schema: the
//! interaction log (one row per question answered or lecture watched) and the
//! question table. Parsing streams row by row; nothing is buffered beyond the
//! current record unless the caller collects the iterator.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use csv::{ReaderBuilder, StringRecord, WriterBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERACTIONS_HEADER: [&str; 10] = [
    "row_id",
    "timestamp",
    "user_id",
    "content_id",
    "content_type_id",
    "task_container_id",
    "user_answer",
    "answered_correctly",
    "prior_question_elapsed_time",
    "prior_question_had_explanation",
];

pub const QUESTIONS_HEADER: [&str; 5] = ["question_id", "bundle_id", "correct_answer", "part", "tags"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContentType {
    Question,
    Lecture,
}

impl ContentType {
    pub fn code(self) -> u8 {
        match self {
            ContentType::Question => 0,
            ContentType::Lecture => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Correctness {
    Correct,
    Incorrect,
    NotApplicable,
}

impl Correctness {
    pub fn code(self) -> i8 {
        match self {
            Correctness::Correct => 1,
            Correctness::Incorrect => 0,
            Correctness::NotApplicable => -1,
        }
    }

    /// 1 for correct, 0 otherwise.
    pub fn as_label(self) -> u8 {
        u8::from(self == Correctness::Correct)
    }
}

/// One row of the interaction log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub row_id: u64,
    /// Milliseconds since the user's first event.
    pub timestamp_ms: i64,
    pub user_id: u64,
    pub content_id: u64,
    pub content_type: ContentType,
    pub task_container_id: i64,
    pub answered_correctly: Correctness,
    pub prior_elapsed_ms: Option<u64>,
    pub prior_had_explanation: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionMeta {
    pub question_id: u64,
    /// Test section, 1..=7.
    pub part: u8,
}

/// All question events of one user, in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: u64,
    pub events: Vec<InteractionRecord>,
}

// A completely empty input (no header line) is accepted as zero rows.
fn check_header(found: &StringRecord, expected: &[&str]) -> Result<()> {
    if found.is_empty() || found.iter().eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(Error::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        })
    }
}

fn field(record: &StringRecord, idx: usize) -> &str {
    record.get(idx).unwrap_or("").trim()
}

fn parse_int<T: std::str::FromStr>(record: &StringRecord, idx: usize, line: u64, what: &str) -> Result<T> {
    let raw = field(record, idx);
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what}: expected integer, found `{raw}`"),
    })
}

fn parse_elapsed(raw: &str, line: u64) -> Result<Option<u64>> {
    if raw.is_empty() {
        return Ok(None);
    }
    // The published log writes this column as a float (`13000.0`).
    let value: f64 = raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("prior_question_elapsed_time: expected number, found `{raw}`"),
    })?;
    if !value.is_finite() || value < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("prior_question_elapsed_time must be finite and non-negative, found `{raw}`"),
        });
    }
    Ok(Some(value.round() as u64))
}

fn parse_flag(raw: &str, line: u64) -> Result<Option<bool>> {
    match raw {
        "" => Ok(None),
        "True" | "true" => Ok(Some(true)),
        "False" | "false" => Ok(Some(false)),
        other => Err(Error::Parse {
            line,
            message: format!("prior_question_had_explanation: expected True/False/empty, found `{other}`"),
        }),
    }
}

fn parse_interaction(record: &StringRecord) -> Result<InteractionRecord> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    if record.len() != INTERACTIONS_HEADER.len() {
        return Err(Error::Parse {
            line,
            message: format!("expected {} fields, found {}", INTERACTIONS_HEADER.len(), record.len()),
        });
    }
    let row_id = parse_int(record, 0, line, "row_id")?;
    let timestamp_ms: i64 = parse_int(record, 1, line, "timestamp")?;
    if timestamp_ms < 0 {
        return Err(Error::Parse {
            line,
            message: format!("timestamp must be non-negative, found {timestamp_ms}"),
        });
    }
    let user_id = parse_int(record, 2, line, "user_id")?;
    let content_id = parse_int(record, 3, line, "content_id")?;
    let content_type = match parse_int::<i64>(record, 4, line, "content_type_id")? {
        0 => ContentType::Question,
        1 => ContentType::Lecture,
        code => {
            return Err(Error::Parse {
                line,
                message: format!("unknown content_type_id {code}"),
            })
        }
    };
    let task_container_id = parse_int(record, 5, line, "task_container_id")?;
    // user_answer is validated as an integer and then dropped.
    let _user_answer: i64 = parse_int(record, 6, line, "user_answer")?;
    let answered_correctly = match parse_int::<i64>(record, 7, line, "answered_correctly")? {
        1 => Correctness::Correct,
        0 => Correctness::Incorrect,
        -1 => Correctness::NotApplicable,
        code => {
            return Err(Error::Parse {
                line,
                message: format!("answered_correctly must be 1, 0 or -1, found {code}"),
            })
        }
    };
    if (answered_correctly == Correctness::NotApplicable) != (content_type == ContentType::Lecture) {
        return Err(Error::Parse {
            line,
            message: format!("answered_correctly {} inconsistent with content type {:?}", answered_correctly.code(), content_type),
        });
    }
    Ok(InteractionRecord {
        row_id,
        timestamp_ms,
        user_id,
        content_id,
        content_type,
        task_container_id,
        answered_correctly,
        prior_elapsed_ms: parse_elapsed(field(record, 8), line)?,
        prior_had_explanation: parse_flag(field(record, 9), line)?,
    })
}

/// Streaming reader over an interaction log.
pub struct InteractionReader<R: Read> {
    inner: csv::Reader<R>,
    record: StringRecord,
}

impl<R: Read> InteractionReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut inner = ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        check_header(inner.headers()?, &INTERACTIONS_HEADER)?;
        Ok(Self {
            inner,
            record: StringRecord::new(),
        })
    }
}

impl<R: Read> Iterator for InteractionReader<R> {
    type Item = Result<InteractionRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.inner.read_record(&mut self.record) {
            Ok(true) => Some(parse_interaction(&self.record)),
            Ok(false) => None,
            Err(e) => Some(Err(e.into())),
        }
    }
}

/// Parses a whole interaction log, preserving file order.
pub fn parse_interactions<R: Read>(reader: R) -> Result<Vec<InteractionRecord>> {
    InteractionReader::new(reader)?.collect()
}

/// Parses the question table into a map keyed by question id.
pub fn parse_questions<R: Read>(reader: R) -> Result<BTreeMap<u64, QuestionMeta>> {
    let mut rdr = ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    check_header(rdr.headers()?, &QUESTIONS_HEADER)?;
    let mut out = BTreeMap::new();
    let mut record = StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != QUESTIONS_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", QUESTIONS_HEADER.len(), record.len()),
            });
        }
        let question_id: u64 = parse_int(&record, 0, line, "question_id")?;
        let part: i64 = parse_int(&record, 3, line, "part")?;
        if !(1..=7).contains(&part) {
            return Err(Error::PartOutOfRange { question_id, part });
        }
        let meta = QuestionMeta {
            question_id,
            part: part as u8,
        };
        if out.insert(question_id, meta).is_some() {
            return Err(Error::DuplicateQuestion(question_id));
        }
    }
    Ok(out)
}

/// Drops lecture rows and groups the rest per user, each sorted by
/// `(timestamp_ms, row_id)`. Users come out in ascending id order.
pub fn filter_and_group(records: impl IntoIterator<Item = InteractionRecord>) -> Vec<UserHistory> {
    let mut by_user: BTreeMap<u64, Vec<InteractionRecord>> = BTreeMap::new();
    for record in records {
        if record.content_type == ContentType::Question {
            by_user.entry(record.user_id).or_default().push(record);
        }
    }
    by_user
        .into_iter()
        .map(|(user_id, mut events)| {
            events.sort_by_key(|e| (e.timestamp_ms, e.row_id));
            UserHistory { user_id, events }
        })
        .collect()
}

/// Writes interaction rows in the log schema.
pub struct InteractionWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> InteractionWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut inner = WriterBuilder::new().has_headers(false).from_writer(writer);
        inner.write_record(INTERACTIONS_HEADER)?;
        Ok(Self { inner })
    }

    /// `user_answer` is the chosen option (-1 for lectures); it is not part of
    /// [`InteractionRecord`] and is written as given.
    pub fn write(&mut self, record: &InteractionRecord, user_answer: i8) -> Result<()> {
        let elapsed = record.prior_elapsed_ms.map(|v| v.to_string()).unwrap_or_default();
        let flag = match record.prior_had_explanation {
            Some(true) => "True",
            Some(false) => "False",
            None => "",
        };
        self.inner.write_record([
            record.row_id.to_string().as_str(),
            &record.timestamp_ms.to_string(),
            &record.user_id.to_string(),
            &record.content_id.to_string(),
            &record.content_type.code().to_string(),
            &record.task_container_id.to_string(),
            &user_answer.to_string(),
            &record.answered_correctly.code().to_string(),
            &elapsed,
            flag,
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Writes the question table. `bundle_id` mirrors the question id and tags
/// are left empty.
pub fn write_questions<W: Write>(writer: W, questions: &[(QuestionMeta, u8)]) -> Result<()> {
    let mut w = WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(QUESTIONS_HEADER)?;
    for (meta, correct_answer) in questions {
        w.write_record([
            meta.question_id.to_string().as_str(),
            &meta.question_id.to_string(),
            &correct_answer.to_string(),
            &meta.part.to_string(),
            "",
        ])?;
    }
    w.flush()?;
    Ok(())
}
