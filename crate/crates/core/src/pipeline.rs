//! Stage drivers shared by the CLI and the service: ingest into stage 0,
//! activity bookkeeping, and the invariant suite behind `recital verify`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::cook::{ConfidenceTier, CookedPage, CookedTranscript};
use crate::error::{Error, Result};
use crate::etl::cardinality_check;
use crate::ingest::{flag_assignment_anomalies, parse_cs_export, tally_flags, Classification, IngestReport, Subject};
use crate::provenance::{self, ActivityBuilder, ActivityKind};
use crate::review::current_versions;
use crate::store::{Record, RecordId, Stage, Store};

pub const DIGEST_CS: &str = "digest.cs";
pub const DIGEST_RAW: &str = "digest.raw";

/// Records the stage-0 and stage-1 digests on the activity, then commits it.
pub fn finish(store: &mut Store, mut act: ActivityBuilder) -> Result<u64> {
    act.param(DIGEST_CS, store.stage_digest(Stage::Cs))
        .param(DIGEST_RAW, store.stage_digest(Stage::Raw));
    provenance::commit(store, act)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub report: IngestReport,
    pub subjects_appended: usize,
    pub classifications_appended: usize,
    /// Records whose external id was already stored with the same content.
    pub already_present: usize,
    pub activity: u64,
}

/// Parses an export and appends its records to stage 0 in file order.
/// Records already present (same external id and content) are skipped;
/// a stored id with different content is reported as a rejection.
/// Flags are recomputed over the whole stage and tallied into the report.
pub fn ingest_reader<R: BufRead>(store: &mut Store, config: &Config, reader: R) -> Result<IngestSummary> {
    let (subjects, classifications, mut report) = parse_cs_export(reader)?;
    let mut summary = IngestSummary::default();
    let stored_subjects: HashMap<String, Subject> = store
        .records::<Subject>()?
        .into_iter()
        .map(|(_, s)| (s.external_id.clone(), s))
        .collect();
    let stored_runs: HashMap<String, Classification> = store
        .records::<Classification>()?
        .into_iter()
        .map(|(_, c)| (c.external_id.clone(), c))
        .collect();

    let mut act = ActivityBuilder::begin(store, ActivityKind::Ingest, &config.digest());
    for s in subjects {
        match stored_subjects.get(&s.external_id) {
            Some(old) if *old == s => summary.already_present += 1,
            Some(_) => conflict(&mut report, "subject", &s.external_id),
            None => {
                store.append_record(&s)?;
                summary.subjects_appended += 1;
            }
        }
    }
    for c in classifications {
        match stored_runs.get(&c.external_id) {
            Some(old) if *old == c => summary.already_present += 1,
            Some(_) => conflict(&mut report, "classification", &c.external_id),
            None => {
                store.append_record(&c)?;
                summary.classifications_appended += 1;
            }
        }
    }

    let all_subjects: Vec<Subject> = store.records::<Subject>()?.into_iter().map(|(_, s)| s).collect();
    let all_runs: Vec<Classification> = store.records::<Classification>()?.into_iter().map(|(_, c)| c).collect();
    let flags = flag_assignment_anomalies(&all_subjects, &all_runs, &config.flag_rules());
    tally_flags(&mut report, &flags);

    act.param("accepted", report.accepted)
        .param("rejected", report.rejected.len())
        .param("appended", summary.subjects_appended + summary.classifications_appended)
        .param("duplicates_flagged", report.duplicates_flagged)
        .param("orphans_flagged", report.orphans_flagged)
        .param("dangling_flagged", report.dangling_flagged);
    summary.activity = finish(store, act)?;
    summary.report = report;
    Ok(summary)
}

fn conflict(report: &mut IngestReport, what: &str, id: &str) {
    // Line numbers are unknown once parsed; 0 marks a store-level rejection.
    report.accepted -= 1;
    report.rejected.push(crate::ingest::Rejection {
        line: 0,
        reason: format!("{what} `{id}` is already stored with different content"),
    });
}

pub fn ingest_file(store: &mut Store, config: &Config, path: &Path) -> Result<IngestSummary> {
    let file = File::open(path).map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    ingest_reader(store, config, BufReader::new(file))
}

/// Ingest, ETL, cook and link in sequence.
pub fn run_all<R: BufRead>(store: &mut Store, config: &Config, reader: R) -> Result<()> {
    ingest_reader(store, config, reader)?;
    crate::etl::run_etl(store, config)?;
    crate::cook::run_cook(store, config)?;
    crate::linkage::run_link(store, config)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        self.checks
            .iter()
            .map(|c| format!("{:<width$}  {}  {}\n", c.name, if c.ok { "PASS" } else { "FAIL" }, c.detail))
            .collect()
    }

    fn push(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            ok,
            detail: detail.into(),
        });
    }
}

fn sample(ids: &[RecordId]) -> String {
    let shown: Vec<String> = ids.iter().take(5).map(RecordId::to_string).collect();
    let more = if ids.len() > 5 { format!(" (+{} more)", ids.len() - 5) } else { String::new() };
    format!("{}{more}", shown.join(", "))
}

/// Stage-0 may change only through ingest and stage-1 only through ETL.
/// Every finished activity records both digests, so a change between two
/// consecutive activities must be explained by the later one's kind.
pub fn append_only_audit(store: &Store) -> (bool, String) {
    let mut last: Option<(&str, &str)> = None;
    let mut problems = Vec::new();
    for a in store.activities() {
        let (Some(cs), Some(raw)) = (a.parameters.get(DIGEST_CS), a.parameters.get(DIGEST_RAW)) else {
            continue;
        };
        if let Some((prev_cs, prev_raw)) = last {
            if cs != prev_cs && a.kind != ActivityKind::Ingest {
                problems.push(format!("stage-0 digest changed during activity {} ({:?})", a.id, a.kind));
            }
            if raw != prev_raw && a.kind != ActivityKind::Etl {
                problems.push(format!("stage-1 digest changed during activity {} ({:?})", a.id, a.kind));
            }
        }
        last = Some((cs, raw));
    }
    if let Some((cs, raw)) = last {
        if store.stage_digest(Stage::Cs) != cs {
            problems.push("stage-0 digest differs from the last recorded one".into());
        }
        if store.stage_digest(Stage::Raw) != raw {
            problems.push("stage-1 digest differs from the last recorded one".into());
        }
    }
    match problems.is_empty() {
        true => (true, format!("{} activities audited", store.activities().len())),
        false => (false, problems.join("; ")),
    }
}

/// Domain records must not draw content from questionable cooked
/// transcripts. Edges to cooked pages anchor shows and are exempt.
pub fn tier_gate_violations(store: &Store) -> Result<Vec<RecordId>> {
    let tiers: HashMap<RecordId, ConfidenceTier> = store
        .records::<CookedTranscript>()?
        .into_iter()
        .map(|(id, t)| (id, t.tier))
        .collect();
    let mut bad = Vec::new();
    for e in store.edges() {
        if e.derived.stage == Stage::Domain
            && e.source.kind == CookedTranscript::KIND
            && tiers.get(&e.source) == Some(&ConfidenceTier::Questionable)
        {
            bad.push(e.derived);
        }
    }
    bad.dedup();
    Ok(bad)
}

/// Tier counts over every tier-bearing cooked record (all versions).
pub fn tier_counts(store: &Store) -> Result<BTreeMap<ConfidenceTier, u64>> {
    let mut counts: BTreeMap<ConfidenceTier, u64> = ConfidenceTier::ALL.iter().map(|t| (*t, 0)).collect();
    for (_, t) in store.records::<CookedTranscript>()? {
        *counts.entry(t.tier).or_default() += 1;
    }
    for (_, p) in store.records::<CookedPage>()? {
        *counts.entry(p.tier).or_default() += 1;
    }
    Ok(counts)
}

fn tier_partition(store: &Store) -> Result<(bool, String)> {
    let counts = tier_counts(store)?;
    let total = store.count(Stage::Cooked, CookedTranscript::KIND) + store.count(Stage::Cooked, CookedPage::KIND);
    let sum: u64 = counts.values().sum();
    // At most one algorithmic result per cluster and per page.
    let mut per_cluster: HashMap<RecordId, usize> = HashMap::new();
    for (_, t) in store.records::<CookedTranscript>()? {
        if t.supersedes.is_none() {
            *per_cluster.entry(t.cluster_id).or_default() += 1;
        }
    }
    let mut per_page: HashMap<RecordId, usize> = HashMap::new();
    for (_, p) in store.records::<CookedPage>()? {
        if p.supersedes.is_none() {
            *per_page.entry(p.page_id).or_default() += 1;
        }
    }
    let doubled = per_cluster.values().chain(per_page.values()).filter(|&&n| n > 1).count();
    let current = current_versions::<CookedTranscript>(store)?.len() + current_versions::<CookedPage>(store)?.len();
    let detail = format!(
        "{} fully, {} almost, {} questionable of {total} cooked records ({current} current)",
        counts[&ConfidenceTier::FullyConfident],
        counts[&ConfidenceTier::AlmostConfident],
        counts[&ConfidenceTier::Questionable],
    );
    Ok((sum == total && doubled == 0, detail))
}

/// Runs the whole invariant suite.
pub fn verify(store: &Store, config: &Config) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();

    let (ok, detail) = append_only_audit(store);
    report.push("append-only digests", ok, detail);

    let acyclic = provenance::is_acyclic(store);
    report.push("provenance acyclic", acyclic, format!("{} edges", store.edges().len()));

    let stage = provenance::stage_violations(store);
    let ids: Vec<RecordId> = stage.iter().map(|e| e.derived).collect();
    report.push(
        "provenance stage rule",
        stage.is_empty(),
        if stage.is_empty() { "every edge descends one stage or supersedes".into() } else { sample(&ids) },
    );

    let missing = provenance::totality_violations(store);
    let ungrounded = if acyclic { provenance::ungrounded_records(store) } else { Vec::new() };
    let derived: u64 = [Stage::Raw, Stage::Cooked, Stage::Domain]
        .iter()
        .flat_map(|s| s.kinds().iter().map(move |k| store.count(*s, k)))
        .sum();
    report.push(
        "provenance totality",
        missing.is_empty() && ungrounded.is_empty() && acyclic,
        match (missing.is_empty(), ungrounded.is_empty()) {
            (true, true) => format!("{derived} derived records grounded in stage 0"),
            (false, _) => format!("without edges: {}", sample(&missing)),
            (true, false) => format!("ungrounded: {}", sample(&ungrounded)),
        },
    );

    let (ok, detail) = tier_partition(store)?;
    report.push("tier partition", ok, detail);

    let gate = tier_gate_violations(store)?;
    report.push(
        "tier gate",
        gate.is_empty(),
        if gate.is_empty() { "no domain record uses questionable content".into() } else { sample(&gate) },
    );

    let cs_records = store.count(Stage::Cs, Classification::KIND);
    if cs_records == 0 && Stage::Raw.kinds().iter().all(|k| store.count(Stage::Raw, k) == 0) {
        report.push("cardinality", true, "empty store");
    } else {
        let check = cardinality_check(store, &config.flag_rules())?;
        let detail = match check.discrepancies.first() {
            None => format!("{} raw facts = {} valid classifications", check.raw_facts, check.valid_classifications),
            Some(d) => format!(
                "{} raw facts vs {} valid classifications; first: {} {}",
                check.raw_facts, check.valid_classifications, d.external_id, d.reason
            ),
        };
        report.push("cardinality", check.ok, detail);
    }
    Ok(report)
}
