//! One-to-one projection of the CS log onto the Register-Page-Mark-Transcript
//! chain. Flagged task runs are excluded and reported, never rewritten.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::Result;
use crate::geometry::BBox;
use crate::ingest::{
    flag_assignment_anomalies, Classification, Flag, FlagRules, Payload, Subject, SubjectKind,
    Task, Verdict,
};
use crate::pipeline;
use crate::provenance::{self, ActivityBuilder, ActivityKind, ProvAgent};
use crate::store::{Record, RecordId, Stage, Store};

pub const ETL_AGENT: &str = "etl-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Register {
    pub source_subject: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub register_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year_span: Option<(i32, i32)>,
    /// Page total declared in the register subject's metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_pages: Option<u32>,
}

impl Record for Register {
    const STAGE: Stage = Stage::Raw;
    const KIND: &'static str = "register";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Page {
    pub register_id: RecordId,
    pub seq: u32,
    pub image_ref: String,
    pub source_subject: String,
}

impl Record for Page {
    const STAGE: Stage = Stage::Raw;
    const KIND: &'static str = "page";

    fn check(&self) -> std::result::Result<(), String> {
        if self.seq == 0 {
            return Err("page seq must be positive".into());
        }
        if self.register_id.kind != Register::KIND {
            return Err(format!("{} is not a register", self.register_id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mark {
    pub page_id: RecordId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub tag: String,
    pub volunteer: String,
    pub source: String,
    pub created_at: i64,
}

impl Record for Mark {
    const STAGE: Stage = Stage::Raw;
    const KIND: &'static str = "mark";

    fn check(&self) -> std::result::Result<(), String> {
        self.bbox.check_unit()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transcript {
    pub mark_id: RecordId,
    /// Verbatim volunteer input.
    pub text: String,
    pub volunteer: String,
    pub source: String,
    pub created_at: i64,
}

impl Record for Transcript {
    const STAGE: Stage = Stage::Raw;
    const KIND: &'static str = "transcript";

    fn check(&self) -> std::result::Result<(), String> {
        if self.text.is_empty() {
            return Err("empty transcript text".into());
        }
        Ok(())
    }
}

/// A page category vote; presented as `Page.category_votes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryVote {
    pub page_id: RecordId,
    pub category: String,
    pub volunteer: String,
    pub source: String,
    pub created_at: i64,
}

impl Record for CategoryVote {
    const STAGE: Stage = Stage::Raw;
    const KIND: &'static str = "category_vote";
}

/// A verify run on a transcript; presented as `Transcript.verifications`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verification {
    pub transcript_id: RecordId,
    pub verdict: Verdict,
    pub volunteer: String,
    pub source: String,
    pub created_at: i64,
}

impl Record for Verification {
    const STAGE: Stage = Stage::Raw;
    const KIND: &'static str = "verification";
}

/// Raw kinds that count as one fact per classification.
pub const FACT_KINDS: [&str; 4] = [
    Mark::KIND,
    Transcript::KIND,
    CategoryVote::KIND,
    Verification::KIND,
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub external_id: String,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EtlReport {
    /// Records appended by this run, per raw kind.
    pub produced: BTreeMap<String, usize>,
    /// Facts already present from an earlier run.
    pub already_present: usize,
    pub excluded: Vec<Exclusion>,
    /// Subject hierarchy problems and page sequence ties/gaps.
    pub notes: Vec<String>,
}

impl EtlReport {
    pub fn produced_facts(&self) -> usize {
        FACT_KINDS
            .iter()
            .map(|k| self.produced.get(*k).copied().unwrap_or(0))
            .sum()
    }

    /// Line-delimited rendering: one JSON object per line.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        push(serde_json::json!({"type": "summary", "produced": self.produced, "already_present": self.already_present, "excluded": self.excluded.len()}));
        for e in &self.excluded {
            push(serde_json::json!({"type": "excluded", "id": e.external_id, "reasons": e.reasons}));
        }
        for n in &self.notes {
            push(serde_json::json!({"type": "note", "message": n}));
        }
        out
    }
}

enum FactPlan {
    Vote { page: String },
    Mark { page: String },
    Transcript { mark_source: String },
    Verification { target: String },
}

struct Plan<'a> {
    registers: Vec<&'a (RecordId, Subject)>,
    pages: Vec<(&'a (RecordId, Subject), String)>,
    facts: Vec<(&'a (RecordId, Classification), FactPlan)>,
    excluded: Vec<Exclusion>,
    notes: Vec<String>,
}

fn flag_name(flag: Flag) -> &'static str {
    match flag {
        Flag::DuplicateRun => "duplicate_run",
        Flag::Orphan => "orphan",
        Flag::DanglingVerify => "dangling_verify",
    }
}

/// Decides, without touching the store, what the raw stage must contain.
fn plan<'a>(
    subjects: &'a [(RecordId, Subject)],
    classifications: &'a [(RecordId, Classification)],
    rules: &FlagRules,
) -> Plan<'a> {
    let mut notes = Vec::new();
    let by_id: HashMap<&str, &Subject> = subjects
        .iter()
        .map(|(_, s)| (s.external_id.as_str(), s))
        .collect();

    let mut registers: Vec<&(RecordId, Subject)> = subjects
        .iter()
        .filter(|(_, s)| s.kind == SubjectKind::RootRegister)
        .collect();
    registers.sort_by(|(_, a), (_, b)| {
        (a.meta.register.unwrap_or(u32::MAX), &a.external_id)
            .cmp(&(b.meta.register.unwrap_or(u32::MAX), &b.external_id))
    });
    let register_rank: HashMap<&str, usize> = registers
        .iter()
        .enumerate()
        .map(|(i, (_, s))| (s.external_id.as_str(), i))
        .collect();

    let mut pages = Vec::new();
    for entry in subjects.iter().filter(|(_, s)| s.kind == SubjectKind::Page) {
        let s = &entry.1;
        let parent = s.parent.as_deref().unwrap_or_default();
        match (register_rank.get(parent), s.meta.seq) {
            (Some(_), Some(seq)) if seq > 0 => pages.push((entry, parent.to_string())),
            (None, _) => notes.push(format!("page `{}` has no register parent `{parent}`", s.external_id)),
            _ => notes.push(format!("page `{}` has no positive seq", s.external_id)),
        }
    }
    pages.sort_by(|((_, a), ra), ((_, b), rb)| {
        (register_rank[ra.as_str()], a.meta.seq, &a.external_id)
            .cmp(&(register_rank[rb.as_str()], b.meta.seq, &b.external_id))
    });
    let mut seqs: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for ((_, s), register) in &pages {
        seqs.entry(register.as_str()).or_default().push(s.meta.seq.unwrap_or(0));
    }
    for (register, seqs) in &seqs {
        for pair in seqs.windows(2) {
            if pair[0] == pair[1] {
                notes.push(format!("register `{register}`: page seq {} appears more than once", pair[0]));
            } else if pair[1] > pair[0] + 1 {
                notes.push(format!("register `{register}`: page seq gap {}..{}", pair[0], pair[1]));
            }
        }
    }
    let page_ids: HashSet<&str> = pages.iter().map(|((_, s), _)| s.external_id.as_str()).collect();

    let subject_list: Vec<Subject> = subjects.iter().map(|(_, s)| s.clone()).collect();
    let class_list: Vec<Classification> = classifications.iter().map(|(_, c)| c.clone()).collect();
    let flags = flag_assignment_anomalies(&subject_list, &class_list, rules);

    let mut order: Vec<usize> = (0..classifications.len()).collect();
    let phase = |t: Task| match t {
        Task::Classify | Task::Mark => 0,
        Task::Transcribe => 1,
        Task::Verify => 2,
    };
    order.sort_by(|&a, &b| {
        let (a, b) = (&classifications[a].1, &classifications[b].1);
        (phase(a.task), a.created_at, &a.external_id).cmp(&(phase(b.task), b.created_at, &b.external_id))
    });

    let mut excluded = Vec::new();
    let mut facts = Vec::new();
    let mut marks: HashSet<&str> = HashSet::new();
    let mut transcripts: HashSet<&str> = HashSet::new();
    for index in order {
        let entry = &classifications[index];
        let c = &entry.1;
        if !flags[index].is_empty() {
            excluded.push(Exclusion {
                external_id: c.external_id.clone(),
                reasons: flags[index].iter().map(|f| flag_name(*f).to_string()).collect(),
            });
            continue;
        }
        let planned = match &c.payload {
            Payload::Classify { .. } | Payload::Mark { .. } => {
                if page_ids.contains(c.subject.as_str()) {
                    let page = c.subject.clone();
                    Ok(if c.task == Task::Mark {
                        marks.insert(&c.external_id);
                        FactPlan::Mark { page }
                    } else {
                        FactPlan::Vote { page }
                    })
                } else {
                    Err(format!("subject `{}` is not an ingested page", c.subject))
                }
            }
            Payload::Transcribe { .. } => {
                match by_id.get(c.subject.as_str()) {
                    Some(region) if region.kind == SubjectKind::MarkRegion => match &region.meta.mark {
                        Some(mark) if marks.contains(mark.as_str()) => {
                            transcripts.insert(&c.external_id);
                            Ok(FactPlan::Transcript { mark_source: mark.clone() })
                        }
                        Some(mark) => Err(format!("mark `{mark}` of region `{}` is not a valid mark", c.subject)),
                        None => Err(format!("region `{}` names no mark", c.subject)),
                    },
                    _ => Err(format!("subject `{}` is not a mark region", c.subject)),
                }
            }
            Payload::Verify { target, .. } => {
                if transcripts.contains(target.as_str()) {
                    Ok(FactPlan::Verification { target: target.clone() })
                } else {
                    Err(format!("target `{target}` is not a valid transcription"))
                }
            }
        };
        match planned {
            Ok(p) => facts.push((entry, p)),
            Err(reason) => excluded.push(Exclusion {
                external_id: c.external_id.clone(),
                reasons: vec![format!("hierarchy: {reason}")],
            }),
        }
    }
    excluded.sort_by(|a, b| a.external_id.cmp(&b.external_id));

    Plan {
        registers,
        pages,
        facts,
        excluded,
        notes,
    }
}

fn existing_sources(store: &Store) -> Result<HashMap<(&'static str, String), RecordId>> {
    let mut map = HashMap::new();
    for (id, r) in store.records::<Register>()? {
        map.insert((Register::KIND, r.source_subject), id);
    }
    for (id, p) in store.records::<Page>()? {
        map.insert((Page::KIND, p.source_subject), id);
    }
    for (id, m) in store.records::<Mark>()? {
        map.insert((Mark::KIND, m.source), id);
    }
    for (id, t) in store.records::<Transcript>()? {
        map.insert((Transcript::KIND, t.source), id);
    }
    for (id, v) in store.records::<CategoryVote>()? {
        map.insert((CategoryVote::KIND, v.source), id);
    }
    for (id, v) in store.records::<Verification>()? {
        map.insert((Verification::KIND, v.source), id);
    }
    Ok(map)
}

/// Runs the CS → Raw projection. Idempotent: facts are keyed on their source
/// external ids and never appended twice.
pub fn run_etl(store: &mut Store, config: &Config) -> Result<EtlReport> {
    let subjects = store.records::<Subject>()?;
    let classifications = store.records::<Classification>()?;
    let rules = config.flag_rules();
    let plan = plan(&subjects, &classifications, &rules);
    let mut existing = existing_sources(store)?;
    let mut report = EtlReport {
        excluded: plan.excluded.clone(),
        notes: plan.notes.clone(),
        ..Default::default()
    };

    let mut act = ActivityBuilder::begin(store, ActivityKind::Etl, &config.digest());
    act.param("etl.duplicate_iou", rules.duplicate_iou)
        .param("input.cs_digest", store.stage_digest(Stage::Cs));
    let etl_agent = ProvAgent::algorithm(ETL_AGENT);

    let emit = |store: &mut Store,
                    act: &mut ActivityBuilder,
                    report: &mut EtlReport,
                    existing: &mut HashMap<(&'static str, String), RecordId>,
                    key: (&'static str, String),
                    source: RecordId,
                    agent: &ProvAgent,
                    append: &dyn Fn(&mut Store) -> Result<RecordId>|
     -> Result<RecordId> {
        if let Some(id) = existing.get(&key) {
            if FACT_KINDS.contains(&key.0) {
                report.already_present += 1;
            }
            return Ok(*id);
        }
        let id = append(store)?;
        provenance::record(store, act, &[source], &[id], agent)?;
        *report.produced.entry(key.0.to_string()).or_default() += 1;
        existing.insert(key, id);
        Ok(id)
    };

    for (cs_id, s) in &plan.registers {
        let register = Register {
            source_subject: s.external_id.clone(),
            label: s.meta.label.clone().unwrap_or_else(|| s.external_id.clone()),
            register_index: s.meta.register,
            year_span: s.meta.years,
            declared_pages: s.meta.pages,
        };
        emit(store, &mut act, &mut report, &mut existing,
            (Register::KIND, s.external_id.clone()), *cs_id, &etl_agent,
            &|st| st.append_record(&register))?;
    }
    for ((cs_id, s), register) in &plan.pages {
        let register_id = existing[&(Register::KIND, register.clone())];
        let page = Page {
            register_id,
            seq: s.meta.seq.unwrap_or_default(),
            image_ref: s.meta.image.clone().unwrap_or_default(),
            source_subject: s.external_id.clone(),
        };
        emit(store, &mut act, &mut report, &mut existing,
            (Page::KIND, s.external_id.clone()), *cs_id, &etl_agent,
            &|st| st.append_record(&page))?;
    }
    for ((cs_id, c), fact) in &plan.facts {
        let agent = ProvAgent::volunteer(&c.volunteer);
        let key_of = |kind| (kind, c.external_id.clone());
        match (fact, &c.payload) {
            (FactPlan::Vote { page }, Payload::Classify { category }) => {
                let vote = CategoryVote {
                    page_id: existing[&(Page::KIND, page.clone())],
                    category: category.clone(),
                    volunteer: c.volunteer.clone(),
                    source: c.external_id.clone(),
                    created_at: c.created_at,
                };
                emit(store, &mut act, &mut report, &mut existing, key_of(CategoryVote::KIND),
                    *cs_id, &agent, &|st| st.append_record(&vote))?;
            }
            (FactPlan::Mark { page }, Payload::Mark { bbox, tag }) => {
                let mark = Mark {
                    page_id: existing[&(Page::KIND, page.clone())],
                    bbox: *bbox,
                    tag: tag.clone(),
                    volunteer: c.volunteer.clone(),
                    source: c.external_id.clone(),
                    created_at: c.created_at,
                };
                emit(store, &mut act, &mut report, &mut existing, key_of(Mark::KIND),
                    *cs_id, &agent, &|st| st.append_record(&mark))?;
            }
            (FactPlan::Transcript { mark_source }, Payload::Transcribe { text }) => {
                let transcript = Transcript {
                    mark_id: existing[&(Mark::KIND, mark_source.clone())],
                    text: text.clone(),
                    volunteer: c.volunteer.clone(),
                    source: c.external_id.clone(),
                    created_at: c.created_at,
                };
                emit(store, &mut act, &mut report, &mut existing, key_of(Transcript::KIND),
                    *cs_id, &agent, &|st| st.append_record(&transcript))?;
            }
            (FactPlan::Verification { target }, Payload::Verify { verdict, .. }) => {
                let verification = Verification {
                    transcript_id: existing[&(Transcript::KIND, target.clone())],
                    verdict: *verdict,
                    volunteer: c.volunteer.clone(),
                    source: c.external_id.clone(),
                    created_at: c.created_at,
                };
                emit(store, &mut act, &mut report, &mut existing, key_of(Verification::KIND),
                    *cs_id, &agent, &|st| st.append_record(&verification))?;
            }
            _ => unreachable!("plan matches payload"),
        }
    }

    act.param("excluded", report.excluded.len())
        .param("produced_facts", report.produced_facts());
    pipeline::finish(store, act)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<RecordId>,
    pub external_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardinalityReport {
    pub ok: bool,
    pub raw_facts: usize,
    pub valid_classifications: usize,
    pub discrepancies: Vec<Discrepancy>,
}

fn fact_sources(store: &Store) -> Result<Vec<(RecordId, String)>> {
    let mut out = Vec::new();
    out.extend(store.records::<Mark>()?.into_iter().map(|(id, r)| (id, r.source)));
    out.extend(store.records::<Transcript>()?.into_iter().map(|(id, r)| (id, r.source)));
    out.extend(store.records::<CategoryVote>()?.into_iter().map(|(id, r)| (id, r.source)));
    out.extend(store.records::<Verification>()?.into_iter().map(|(id, r)| (id, r.source)));
    Ok(out)
}

/// Checks that raw facts and valid classifications are in one-to-one
/// correspondence and that every fact's provenance edge resolves.
pub fn cardinality_check(store: &Store, rules: &FlagRules) -> Result<CardinalityReport> {
    let subjects = store.records::<Subject>()?;
    let classifications = store.records::<Classification>()?;
    let plan = plan(&subjects, &classifications, rules);
    let expected: HashMap<&str, RecordId> = plan
        .facts
        .iter()
        .map(|((id, c), _)| (c.external_id.as_str(), *id))
        .collect();

    let facts = fact_sources(store)?;
    let mut discrepancies = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (id, source) in &facts {
        let mut problem = |reason: &str| {
            discrepancies.push(Discrepancy {
                record: Some(*id),
                external_id: source.clone(),
                reason: reason.to_string(),
            })
        };
        match expected.get(source.as_str()) {
            None => problem("raw fact has no valid source classification"),
            Some(cs_id) => {
                if !seen.insert(source.as_str()) {
                    problem("second raw fact for one classification");
                }
                let edges: Vec<_> = store.incoming(id).filter(|e| e.source.stage == Stage::Cs).collect();
                if edges.len() != 1 || edges[0].source != *cs_id {
                    problem("provenance edge does not resolve to its source classification");
                }
            }
        }
    }
    for (source, _) in &expected {
        if !seen.contains(source) {
            discrepancies.push(Discrepancy {
                record: None,
                external_id: source.to_string(),
                reason: "valid classification has no raw fact".into(),
            });
        }
    }
    discrepancies.sort_by(|a, b| (&a.external_id, a.record).cmp(&(&b.external_id, b.record)));
    Ok(CardinalityReport {
        ok: discrepancies.is_empty() && facts.len() == expected.len(),
        raw_facts: facts.len(),
        valid_classifications: expected.len(),
        discrepancies,
    })
}
