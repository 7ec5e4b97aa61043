//! Triplet ingest and manuscript generation.
//!
//! A manuscript turns a bag of `{entity, position, exist}` triplets into a
//! fixed-template report: one yes/no question per (entity, position) in
//! lexicographic order, followed by a study-level verdict. Identical triplet
//! sets always produce byte-identical text.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocabulary;

pub const UNSPECIFIED: &str = "unspecified";
pub const VERDICT_ABNORMAL: &str = "verdict: abnormal study.";
pub const VERDICT_NORMAL: &str = "verdict: no abnormal findings.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Exist {
    Present,
    Absent,
    Uncertain,
}

impl FromStr for Exist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "present" => Ok(Self::Present),
            "absent" => Ok(Self::Absent),
            "uncertain" => Ok(Self::Uncertain),
            _ => Err(Error::Validation(format!(
                "unknown exist value {s:?} (expected present, absent or uncertain)"
            ))),
        }
    }
}

impl fmt::Display for Exist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Present => "present",
            Self::Absent => "absent",
            Self::Uncertain => "uncertain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub entity: String,
    pub position: String,
    pub exist: Exist,
}

impl Triplet {
    pub fn new(entity: &str, position: &str, exist: Exist) -> Result<Self> {
        let entity = entity.trim().to_lowercase();
        if entity.is_empty() {
            return Err(Error::Validation("triplet entity is empty".into()));
        }
        let position = position.trim().to_lowercase();
        let position = if position.is_empty() {
            UNSPECIFIED.to_string()
        } else {
            position
        };
        Ok(Self {
            entity,
            position,
            exist,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTriplet {
    entity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<String>,
    exist: String,
}

/// One line of a triplet JSONL file.
#[derive(Debug, Serialize, Deserialize)]
struct RawStudy {
    study_id: String,
    triplets: Vec<RawTriplet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

/// A parsed study line: normalized triplets plus the optional original report
/// text and image path carried alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub triplets: Vec<Triplet>,
    pub report: Option<String>,
    pub image: Option<String>,
}

impl StudyRecord {
    pub fn to_json_line(&self) -> String {
        let raw = RawStudy {
            study_id: self.study_id.clone(),
            triplets: self
                .triplets
                .iter()
                .map(|t| RawTriplet {
                    entity: t.entity.clone(),
                    position: Some(t.position.clone()),
                    exist: t.exist.to_string(),
                })
                .collect(),
            report: self.report.clone(),
            image: self.image.clone(),
        };
        serde_json::to_string(&raw).expect("plain strings serialize")
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)).min(text.len())
}

pub fn parse_study(line: &str) -> Result<StudyRecord> {
    let raw: RawStudy = serde_json::from_str(line).map_err(|e| Error::Parse {
        offset: byte_offset(line, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let triplets = raw
        .triplets
        .iter()
        .map(|t| {
            let exist = t.exist.parse()?;
            Triplet::new(&t.entity, t.position.as_deref().unwrap_or(""), exist)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyRecord {
        study_id: raw.study_id,
        triplets,
        report: raw.report,
        image: raw.image,
    })
}

/// Parses `{"study_id": ..., "triplets": [...]}` into the id and normalized triplets.
pub fn parse_triplets(line: &str) -> Result<(String, Vec<Triplet>)> {
    let s = parse_study(line)?;
    Ok((s.study_id, s.triplets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Answer {
    No,
    Uncertain,
    Yes,
}

impl Answer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Yes => "yes",
            Self::No => "no",
            Self::Uncertain => "uncertain",
        }
    }
}

impl From<Exist> for Answer {
    fn from(e: Exist) -> Self {
        match e {
            Exist::Present => Self::Yes,
            Exist::Absent => Self::No,
            Exist::Uncertain => Self::Uncertain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub entity: String,
    pub position: String,
    pub question: String,
    pub answer: Answer,
}

impl Observation {
    pub fn sentence(&self) -> String {
        format!("{} {}.", self.question, self.answer.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manuscript {
    pub observations: Vec<Observation>,
    pub verdict_text: String,
    pub verdict_label: Verdict,
}

impl Manuscript {
    pub fn full_text(&self) -> String {
        let mut parts: Vec<String> = self.observations.iter().map(Observation::sentence).collect();
        parts.push(self.verdict_text.clone());
        parts.join(" ")
    }
}

pub fn question(entity: &str, position: &str) -> String {
    if position == UNSPECIFIED {
        format!("is {entity} present?")
    } else {
        format!("is {entity} present in the {position}?")
    }
}

pub fn generate_manuscript(triplets: &[Triplet]) -> Manuscript {
    // BTreeMap gives the (entity, position) order; duplicates keep the most
    // positive answer (yes > uncertain > no).
    let mut merged: BTreeMap<(&str, &str), Answer> = BTreeMap::new();
    for t in triplets {
        let a = Answer::from(t.exist);
        merged
            .entry((t.entity.as_str(), t.position.as_str()))
            .and_modify(|cur| *cur = (*cur).max(a))
            .or_insert(a);
    }
    let observations: Vec<Observation> = merged
        .into_iter()
        .map(|((entity, position), answer)| Observation {
            entity: entity.to_string(),
            position: position.to_string(),
            question: question(entity, position),
            answer,
        })
        .collect();
    let abnormal = observations.iter().any(|o| o.answer == Answer::Yes);
    Manuscript {
        observations,
        verdict_text: if abnormal { VERDICT_ABNORMAL } else { VERDICT_NORMAL }.to_string(),
        verdict_label: if abnormal { Verdict::Abnormal } else { Verdict::Normal },
    }
}

/// Raw triplet concatenation in input order, e.g. `"nodule upper left present; ..."`.
pub fn triplet_string(triplets: &[Triplet]) -> String {
    triplets
        .iter()
        .map(|t| format!("{} {} {}", t.entity, t.position, t.exist))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManuscriptLabels {
    /// 1 for yes, 0 for no or uncertain, in observation order.
    pub labels: Vec<u8>,
    pub uncertain: Vec<bool>,
    pub verdict: u8,
    /// Vocabulary id of each observation's answer word.
    pub answer_ids: Vec<usize>,
}

pub fn manuscript_token_labels(m: &Manuscript, vocab: &Vocabulary) -> ManuscriptLabels {
    ManuscriptLabels {
        labels: m.observations.iter().map(|o| (o.answer == Answer::Yes) as u8).collect(),
        uncertain: m.observations.iter().map(|o| o.answer == Answer::Uncertain).collect(),
        verdict: (m.verdict_label == Verdict::Abnormal) as u8,
        answer_ids: m.observations.iter().map(|o| vocab.id(o.answer.as_str())).collect(),
    }
}

/// Which text a study contributes to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Manuscript,
    TripletString,
    Passthrough,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manuscript" => Ok(Self::Manuscript),
            "triplet_string" => Ok(Self::TripletString),
            "passthrough" => Ok(Self::Passthrough),
            other => Err(Error::Config(format!(
                "report format must be manuscript|triplet_string|passthrough, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Manuscript => "manuscript",
            Self::TripletString => "triplet_string",
            Self::Passthrough => "passthrough",
        })
    }
}

impl StudyRecord {
    pub fn text(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Manuscript => Ok(generate_manuscript(&self.triplets).full_text()),
            ReportFormat::TripletString => Ok(triplet_string(&self.triplets)),
            ReportFormat::Passthrough => self
                .report
                .clone()
                .ok_or_else(|| Error::Validation(format!("study {} has no original report text", self.study_id))),
        }
    }
}
