//! Interaction logs drawn from a known generative model with a lag effect.
//!
//! Each user has an ability `θ ~ N(0, ability_std²)` and each question a
//! difficulty `b ~ N(0, difficulty_std²)`. An answer is correct with
//! probability `sigmoid(θ - b + γ·bonus)`, where `bonus` is 1 when the answer
//! comes less than 60 seconds after the user's previous interaction (the
//! first interaction counts as zero seconds) and 0 otherwise.
//!
//! Gaps between interactions mix three scales: short exponential pauses
//! (mean 40 s), log-uniform breaks between two minutes and twelve hours, and
//! uniform absences of one to sixty days.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    filter_and_group, write_questions, ContentType, Correctness, InteractionRecord, InteractionWriter, QuestionMeta,
    UserHistory,
};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::features::PARTS;

/// Gaps shorter than this earn the recency bonus.
pub const BONUS_WINDOW_MS: i64 = 60_000;

const SHORT_GAP_WEIGHT: f64 = 0.6;
const MEDIUM_GAP_WEIGHT: f64 = 0.3;
const SHORT_GAP_MEAN_MS: f64 = 40_000.0;
const MEDIUM_GAP_MIN_MS: f64 = 120_000.0;
const MEDIUM_GAP_MAX_MS: f64 = 12.0 * 3_600_000.0;
const LONG_GAP_MIN_MS: f64 = 86_400_000.0;
const LONG_GAP_MAX_MS: f64 = 60.0 * 86_400_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_questions: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub ability_std: f64,
    pub difficulty_std: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_questions: 200,
            min_events: 100,
            max_events: 300,
            ability_std: 1.0,
            difficulty_std: 1.0,
            gamma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Invalid(format!("synthetic `{field}`: {why}")));
        if self.n_users == 0 {
            return bad("n_users", "must be positive");
        }
        if self.n_questions == 0 {
            return bad("n_questions", "must be positive");
        }
        if self.min_events == 0 || self.min_events > self.max_events {
            return bad("min_events", "must satisfy 1 <= min_events <= max_events");
        }
        for (field, v) in [
            ("ability_std", self.ability_std),
            ("difficulty_std", self.difficulty_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, "must be finite and non-negative");
            }
        }
        if !self.gamma.is_finite() {
            return bad("gamma", "must be finite");
        }
        Ok(())
    }
}

/// Ground truth of a generated log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SyntheticSpec,
    pub theta: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: f64,
    pub n_events: usize,
    /// Share of events that received the recency bonus.
    pub bonus_rate: f64,
    /// AUC of the true probabilities against the sampled labels; `None`
    /// when the labels are a single class.
    pub oracle_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticLog {
    /// Sorted by user, then time; `row_id` counts from 0 in that order.
    pub interactions: Vec<InteractionRecord>,
    /// Chosen option per interaction, aligned with `interactions`.
    pub user_answers: Vec<i8>,
    /// True correctness probability per interaction.
    pub probabilities: Vec<f64>,
    pub questions: Vec<(QuestionMeta, u8)>,
    pub truth: Truth,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn sample_gap_ms(rng: &mut ChaCha8Rng) -> i64 {
    let u: f64 = rng.random();
    let ms = if u < SHORT_GAP_WEIGHT {
        Exp::new(1.0 / SHORT_GAP_MEAN_MS).expect("positive rate").sample(rng)
    } else if u < SHORT_GAP_WEIGHT + MEDIUM_GAP_WEIGHT {
        let (lo, hi) = (MEDIUM_GAP_MIN_MS.ln(), MEDIUM_GAP_MAX_MS.ln());
        rng.random_range(lo..hi).exp()
    } else {
        rng.random_range(LONG_GAP_MIN_MS..LONG_GAP_MAX_MS)
    };
    (ms.round() as i64).max(1)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated std")
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticLog> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let b: Vec<f64> = (0..spec.n_questions).map(|_| normal(spec.difficulty_std).sample(&mut rng)).collect();
    let questions: Vec<(QuestionMeta, u8)> = (0..spec.n_questions)
        .map(|q| {
            let meta = QuestionMeta {
                question_id: q as u64,
                part: rng.random_range(1..=PARTS as u8),
            };
            (meta, rng.random_range(0..4u8))
        })
        .collect();
    let theta: Vec<f64> = (0..spec.n_users).map(|_| normal(spec.ability_std).sample(&mut rng)).collect();

    let mut interactions = Vec::new();
    let mut user_answers = Vec::new();
    let mut probabilities = Vec::new();
    let mut n_bonus = 0usize;
    for (user, &th) in theta.iter().enumerate() {
        let n = rng.random_range(spec.min_events..=spec.max_events);
        let mut ts: i64 = 0;
        for k in 0..n {
            let gap = if k == 0 { 0 } else { sample_gap_ms(&mut rng) };
            ts += gap;
            let q = rng.random_range(0..spec.n_questions);
            let bonus = gap < BONUS_WINDOW_MS;
            n_bonus += usize::from(bonus);
            let p = sigmoid(th - b[q] + if bonus { spec.gamma } else { 0.0 });
            let correct = rng.random::<f64>() < p;
            let key = questions[q].1;
            let answer = if correct {
                key
            } else {
                (key + rng.random_range(1..4u8)) % 4
            };
            let prior_elapsed_ms = (k > 0).then(|| rng.random_range(5_000..60_000u64));
            let prior_had_explanation = (k > 0).then(|| rng.random_bool(0.5));
            interactions.push(InteractionRecord {
                row_id: interactions.len() as u64,
                timestamp_ms: ts,
                user_id: user as u64,
                content_id: q as u64,
                content_type: ContentType::Question,
                task_container_id: k as i64,
                answered_correctly: if correct {
                    Correctness::Correct
                } else {
                    Correctness::Incorrect
                },
                prior_elapsed_ms,
                prior_had_explanation,
            });
            user_answers.push(answer as i8);
            probabilities.push(p);
        }
    }

    let labels: Vec<u8> = interactions.iter().map(|r| r.answered_correctly.as_label()).collect();
    let oracle_auc = match auc(&probabilities, &labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let n_events = interactions.len();
    Ok(SyntheticLog {
        interactions,
        user_answers,
        probabilities,
        questions,
        truth: Truth {
            spec: spec.clone(),
            theta,
            b,
            gamma: spec.gamma,
            n_events,
            bonus_rate: n_bonus as f64 / n_events as f64,
            oracle_auc,
        },
    })
}

impl SyntheticLog {
    pub fn histories(&self) -> Vec<UserHistory> {
        filter_and_group(self.interactions.iter().cloned())
    }

    pub fn question_map(&self) -> std::collections::BTreeMap<u64, QuestionMeta> {
        self.questions.iter().map(|(m, _)| (m.question_id, *m)).collect()
    }

    /// Writes `interactions.csv`, `questions.csv` and `truth.json` to `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = InteractionWriter::new(BufWriter::new(File::create(dir.join("interactions.csv"))?))?;
        for (record, &answer) in self.interactions.iter().zip(&self.user_answers) {
            w.write(record, answer)?;
        }
        w.finish()?.flush()?;
        let mut q = BufWriter::new(File::create(dir.join("questions.csv"))?);
        write_questions(&mut q, &self.questions)?;
        q.flush()?;
        std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&self.truth)? + "\n")?;
        Ok(())
    }
}
