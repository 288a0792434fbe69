//! Crowdsourcing export parsing (stage 0) and assignment-anomaly flagging.
//!
//! The export is line-delimited JSON, one `subject` or `classification`
//! object per line; see the formats chapter of the book for the exact schema.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::geometry::{box_iou, BBox};
use crate::store::{Record, Stage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectKind {
    RootRegister,
    Page,
    MarkRegion,
}

impl SubjectKind {
    /// The kind a parent subject must have, if any.
    pub fn parent_kind(self) -> Option<SubjectKind> {
        match self {
            SubjectKind::RootRegister => None,
            SubjectKind::Page => Some(SubjectKind::RootRegister),
            SubjectKind::MarkRegion => Some(SubjectKind::Page),
        }
    }
}

/// Subject metadata. Known keys are typed; anything else is preserved verbatim.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    /// Register index (root registers and pages).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub register: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Declared page total of a register.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pages: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub years: Option<(i32, i32)>,
    /// Page sequence number within its register.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// For mark regions: the mark classification that created the region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mark: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// A micro-task: a register, a page, or a marked region awaiting transcription.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub external_id: String,
    pub kind: SubjectKind,
    pub parent: Option<String>,
    #[serde(default)]
    pub meta: SubjectMeta,
    /// Milliseconds since the Unix epoch, UTC.
    pub created_at: i64,
}

impl Record for Subject {
    const STAGE: Stage = Stage::Cs;
    const KIND: &'static str = "subject";

    fn check(&self) -> std::result::Result<(), String> {
        if self.external_id.is_empty() {
            return Err("empty subject id".into());
        }
        match (self.kind.parent_kind(), &self.parent) {
            (None, Some(_)) => Err("root_register subjects have no parent".into()),
            (Some(kind), None) => Err(format!("{kind:?} parent required")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Mark,
    Transcribe,
    Verify,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Classify, Task::Mark, Task::Transcribe, Task::Verify];

    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Mark => "mark",
            Task::Transcribe => "transcribe",
            Task::Verify => "verify",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

/// Task-dependent classification content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Payload {
    Classify {
        category: String,
    },
    Mark {
        #[serde(rename = "box")]
        bbox: BBox,
        tag: String,
    },
    Transcribe {
        text: String,
    },
    Verify {
        target: String,
        verdict: Verdict,
    },
}

impl Payload {
    pub fn task(&self) -> Task {
        match self {
            Payload::Classify { .. } => Task::Classify,
            Payload::Mark { .. } => Task::Mark,
            Payload::Transcribe { .. } => Task::Transcribe,
            Payload::Verify { .. } => Task::Verify,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match self {
            Payload::Classify { category } if category.is_empty() => Err("empty category".into()),
            Payload::Mark { bbox, .. } => bbox.check_unit(),
            Payload::Transcribe { text } if text.is_empty() => Err("empty transcription".into()),
            Payload::Verify { target, .. } if target.is_empty() => Err("empty verify target".into()),
            _ => Ok(()),
        }
    }
}

/// One volunteer task run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Classification {
    pub external_id: String,
    pub subject: String,
    pub volunteer: String,
    pub task: Task,
    pub payload: Payload,
    pub created_at: i64,
}

impl Record for Classification {
    const STAGE: Stage = Stage::Cs;
    const KIND: &'static str = "classification";

    fn check(&self) -> std::result::Result<(), String> {
        if self.external_id.is_empty() || self.subject.is_empty() || self.volunteer.is_empty() {
            return Err("empty id, subject, or volunteer".into());
        }
        if self.payload.task() != self.task {
            return Err(format!(
                "payload is a {} payload but task is {}",
                self.payload.task().name(),
                self.task.name()
            ));
        }
        self.payload.check()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    pub duplicates_flagged: usize,
    pub orphans_flagged: usize,
    pub dangling_flagged: usize,
}

impl IngestReport {
    pub fn records_read(&self) -> usize {
        self.accepted + self.rejected.len()
    }
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ExportLine {
    Subject {
        id: String,
        kind: SubjectKind,
        #[serde(default)]
        parent: Option<String>,
        #[serde(default)]
        meta: SubjectMeta,
        created_at: String,
    },
    Classification {
        id: String,
        subject: String,
        volunteer: String,
        task: Task,
        payload: Value,
        created_at: String,
    },
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ExportLineRef<'a> {
    Subject {
        id: &'a str,
        kind: SubjectKind,
        parent: &'a Option<String>,
        meta: &'a SubjectMeta,
        created_at: String,
    },
    Classification {
        id: &'a str,
        subject: &'a str,
        volunteer: &'a str,
        task: Task,
        payload: &'a Payload,
        created_at: String,
    },
}

pub fn parse_timestamp(text: &str) -> std::result::Result<i64, String> {
    DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&Utc).timestamp_millis())
        .map_err(|e| format!("bad timestamp `{text}`: {e}"))
}

pub fn format_timestamp(millis: i64) -> String {
    DateTime::<Utc>::from_timestamp_millis(millis)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::AutoSi, true))
        .unwrap_or_default()
}

/// Serializes a subject as one export line (without trailing newline).
pub fn export_subject_line(subject: &Subject) -> String {
    serde_json::to_string(&ExportLineRef::Subject {
        id: &subject.external_id,
        kind: subject.kind,
        parent: &subject.parent,
        meta: &subject.meta,
        created_at: format_timestamp(subject.created_at),
    })
    .expect("export lines serialize")
}

pub fn export_classification_line(c: &Classification) -> String {
    serde_json::to_string(&ExportLineRef::Classification {
        id: &c.external_id,
        subject: &c.subject,
        volunteer: &c.volunteer,
        task: c.task,
        payload: &c.payload,
        created_at: format_timestamp(c.created_at),
    })
    .expect("export lines serialize")
}

enum Parsed {
    Subject(Subject),
    Classification(Classification),
}

fn parse_line(line: &str) -> std::result::Result<Parsed, String> {
    let parsed: ExportLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    match parsed {
        ExportLine::Subject {
            id,
            kind,
            parent,
            meta,
            created_at,
        } => {
            let subject = Subject {
                external_id: id,
                kind,
                parent,
                meta,
                created_at: parse_timestamp(&created_at)?,
            };
            subject.check()?;
            Ok(Parsed::Subject(subject))
        }
        ExportLine::Classification {
            id,
            subject,
            volunteer,
            task,
            payload,
            created_at,
        } => {
            let payload: Payload = serde_json::from_value(payload)
                .map_err(|_| format!("payload does not match any task payload shape for {}", task.name()))?;
            let c = Classification {
                external_id: id,
                subject,
                volunteer,
                task,
                payload,
                created_at: parse_timestamp(&created_at)?,
            };
            c.check()?;
            Ok(Parsed::Classification(c))
        }
    }
}

/// Parses a CS export stream. Malformed lines are reported with their
/// 1-based line number; blank lines are not records and are skipped.
pub fn parse_cs_export<R: BufRead>(
    mut reader: R,
) -> Result<(Vec<Subject>, Vec<Classification>, IngestReport)> {
    let mut subjects = Vec::new();
    let mut subject_lines = Vec::new();
    let mut classifications = Vec::new();
    let mut report = IngestReport::default();
    let mut subject_ids = HashSet::new();
    let mut classification_ids = HashSet::new();

    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let reject = |report: &mut IngestReport, reason: String| {
            report.rejected.push(Rejection {
                line: line_no,
                reason,
            })
        };
        let Ok(text) = std::str::from_utf8(&buf) else {
            reject(&mut report, "line is not valid UTF-8".into());
            continue;
        };
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        match parse_line(text) {
            Ok(Parsed::Subject(s)) => {
                if subject_ids.insert(s.external_id.clone()) {
                    subjects.push(s);
                    subject_lines.push(line_no);
                } else {
                    reject(&mut report, format!("duplicate subject id `{}`", s.external_id));
                }
            }
            Ok(Parsed::Classification(c)) => {
                if classification_ids.insert(c.external_id.clone()) {
                    classifications.push(c);
                } else {
                    reject(&mut report, format!("duplicate classification id `{}`", c.external_id));
                }
            }
            Err(reason) => reject(&mut report, reason),
        }
    }

    // Parent kinds can only be checked once the whole stream is known.
    let kinds: HashMap<&str, SubjectKind> = subjects
        .iter()
        .map(|s| (s.external_id.as_str(), s.kind))
        .collect();
    let mut keep = vec![true; subjects.len()];
    for (index, subject) in subjects.iter().enumerate() {
        if let (Some(expected), Some(parent)) = (subject.kind.parent_kind(), &subject.parent) {
            if let Some(&actual) = kinds.get(parent.as_str()) {
                if actual != expected {
                    keep[index] = false;
                    report.rejected.push(Rejection {
                        line: subject_lines[index],
                        reason: format!("parent `{parent}` is a {actual:?}, expected {expected:?}"),
                    });
                }
            }
        }
    }
    let mut keep = keep.into_iter();
    subjects.retain(|_| keep.next().unwrap_or(true));
    report.rejected.sort_by_key(|r| r.line);
    report.accepted = subjects.len() + classifications.len();
    Ok((subjects, classifications, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    DuplicateRun,
    Orphan,
    DanglingVerify,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlagRules {
    /// Minimum IoU for a later mark (same volunteer, page, tag) to count as a re-run.
    pub duplicate_iou: f64,
}

impl Default for FlagRules {
    fn default() -> Self {
        FlagRules { duplicate_iou: 0.5 }
    }
}

/// Flags for each classification, aligned with the input slice; each flag
/// list is sorted. Earliest run wins: later runs of the same
/// (volunteer, subject, task) are `duplicate_run`.
pub fn flag_assignment_anomalies(
    subjects: &[Subject],
    classifications: &[Classification],
    rules: &FlagRules,
) -> Vec<Vec<Flag>> {
    let known_subjects: HashSet<&str> = subjects.iter().map(|s| s.external_id.as_str()).collect();
    let known_runs: HashSet<&str> = classifications
        .iter()
        .map(|c| c.external_id.as_str())
        .collect();
    let mut flags = vec![Vec::new(); classifications.len()];

    let mut groups: HashMap<(&str, &str, Task), Vec<usize>> = HashMap::new();
    for (index, c) in classifications.iter().enumerate() {
        groups
            .entry((c.volunteer.as_str(), c.subject.as_str(), c.task))
            .or_default()
            .push(index);
    }
    for ((_, _, task), mut members) in groups {
        members.sort_by(|&a, &b| {
            let (a, b) = (&classifications[a], &classifications[b]);
            (a.created_at, &a.external_id).cmp(&(b.created_at, &b.external_id))
        });
        for (position, &index) in members.iter().enumerate().skip(1) {
            let duplicate = match (task, &classifications[index].payload) {
                (Task::Mark, Payload::Mark { bbox, tag }) => members[..position].iter().any(|&earlier| {
                    matches!(&classifications[earlier].payload,
                        Payload::Mark { bbox: b, tag: t } if t == tag && box_iou(b, bbox) >= rules.duplicate_iou)
                }),
                _ => true,
            };
            if duplicate {
                flags[index].push(Flag::DuplicateRun);
            }
        }
    }

    for (index, c) in classifications.iter().enumerate() {
        if !known_subjects.contains(c.subject.as_str()) {
            flags[index].push(Flag::Orphan);
        }
        if let Payload::Verify { target, .. } = &c.payload {
            if !known_runs.contains(target.as_str()) {
                flags[index].push(Flag::DanglingVerify);
            }
        }
        flags[index].sort();
    }
    flags
}

/// Tallies flag counts into an ingest report.
pub fn tally_flags(report: &mut IngestReport, flags: &[Vec<Flag>]) {
    for f in flags.iter().flatten() {
        match f {
            Flag::DuplicateRun => report.duplicates_flagged += 1,
            Flag::Orphan => report.orphans_flagged += 1,
            Flag::DanglingVerify => report.dangling_flagged += 1,
        }
    }
}
