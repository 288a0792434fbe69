//! Task completeness and volunteer activity, computed from stage 0 with
//! exact fractions.

use std::collections::{BTreeMap, HashMap, HashSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::cook::{ConfidenceTier, CookedPage, CookedTranscript};
use crate::error::Result;
use crate::ingest::{Classification, Payload, Subject, SubjectKind, Task};
use crate::review::current_versions;
use crate::store::Store;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskProgress {
    pub done: u64,
    pub total: u64,
    /// Exact `done/total` in lowest terms (`0/1` when total is 0).
    pub completeness: String,
    pub completeness_value: f64,
}

impl TaskProgress {
    pub fn new(done: u64, total: u64) -> Self {
        let ratio = Self::ratio_of(done, total);
        TaskProgress {
            done,
            total,
            completeness: format!("{}/{}", ratio.numer(), ratio.denom()),
            completeness_value: *ratio.numer() as f64 / *ratio.denom() as f64,
        }
    }

    fn ratio_of(done: u64, total: u64) -> Ratio<u64> {
        match total {
            0 => Ratio::from_integer(0),
            _ => Ratio::new(done.min(total), total),
        }
    }

    pub fn ratio(&self) -> Ratio<u64> {
        Self::ratio_of(self.done, self.total)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolunteerActivity {
    pub volunteer: String,
    pub classifications: u64,
    pub by_task: BTreeMap<Task, u64>,
    pub first_activity: Option<i64>,
    pub last_activity: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressReport {
    pub tasks: BTreeMap<Task, TaskProgress>,
    /// Current cooked transcripts and pages by tier.
    pub tiers: BTreeMap<ConfidenceTier, u64>,
    pub cooked_records: u64,
    pub volunteers: Vec<VolunteerActivity>,
}

/// Totals per task:
/// classify and mark count pages (declared page totals of the registers,
/// falling back to page subjects), transcribe counts mark regions, and
/// verify counts transcriptions. A unit is done once it has one run.
pub fn progress(store: &Store) -> Result<ProgressReport> {
    let subjects: Vec<Subject> = store.records::<Subject>()?.into_iter().map(|(_, s)| s).collect();
    let runs: Vec<Classification> = store.records::<Classification>()?.into_iter().map(|(_, c)| c).collect();

    let mut pages_of: HashMap<&str, u64> = HashMap::new();
    for s in subjects.iter().filter(|s| s.kind == SubjectKind::Page) {
        *pages_of.entry(s.parent.as_deref().unwrap_or_default()).or_default() += 1;
    }
    let page_total: u64 = subjects
        .iter()
        .filter(|s| s.kind == SubjectKind::RootRegister)
        .map(|r| match r.meta.pages {
            Some(n) => n as u64,
            None => pages_of.get(r.external_id.as_str()).copied().unwrap_or(0),
        })
        .sum();
    let regions = subjects.iter().filter(|s| s.kind == SubjectKind::MarkRegion).count() as u64;

    let mut touched: HashMap<Task, HashSet<&str>> = HashMap::new();
    let mut transcriptions = 0;
    let mut volunteers: BTreeMap<&str, VolunteerActivity> = BTreeMap::new();
    for c in &runs {
        let unit = match &c.payload {
            Payload::Verify { target, .. } => target.as_str(),
            _ => c.subject.as_str(),
        };
        touched.entry(c.task).or_default().insert(unit);
        if c.task == Task::Transcribe {
            transcriptions += 1;
        }
        let v = volunteers.entry(c.volunteer.as_str()).or_insert_with(|| VolunteerActivity {
            volunteer: c.volunteer.clone(),
            ..Default::default()
        });
        v.classifications += 1;
        *v.by_task.entry(c.task).or_default() += 1;
        v.first_activity = Some(v.first_activity.map_or(c.created_at, |t| t.min(c.created_at)));
        v.last_activity = Some(v.last_activity.map_or(c.created_at, |t| t.max(c.created_at)));
    }
    let page_kinds: HashMap<&str, SubjectKind> = subjects.iter().map(|s| (s.external_id.as_str(), s.kind)).collect();
    let transcribe_ids: HashSet<&str> = runs
        .iter()
        .filter(|c| c.task == Task::Transcribe)
        .map(|c| c.external_id.as_str())
        .collect();
    let done = |task: Task, keep: &dyn Fn(&str) -> bool| -> u64 {
        touched.get(&task).map_or(0, |units| units.iter().filter(|u| keep(u)).count() as u64)
    };
    let kinds = &page_kinds;
    let is = |kind: SubjectKind| move |u: &str| kinds.get(u) == Some(&kind);

    let mut tasks = BTreeMap::new();
    tasks.insert(Task::Classify, TaskProgress::new(done(Task::Classify, &is(SubjectKind::Page)), page_total));
    tasks.insert(Task::Mark, TaskProgress::new(done(Task::Mark, &is(SubjectKind::Page)), page_total));
    tasks.insert(
        Task::Transcribe,
        TaskProgress::new(done(Task::Transcribe, &is(SubjectKind::MarkRegion)), regions),
    );
    tasks.insert(
        Task::Verify,
        TaskProgress::new(done(Task::Verify, &|u| transcribe_ids.contains(u)), transcriptions),
    );

    let mut tiers: BTreeMap<ConfidenceTier, u64> = ConfidenceTier::ALL.iter().map(|t| (*t, 0)).collect();
    let mut cooked_records = 0;
    for (_, t) in current_versions::<CookedTranscript>(store)? {
        *tiers.entry(t.tier).or_default() += 1;
        cooked_records += 1;
    }
    for (_, p) in current_versions::<CookedPage>(store)? {
        *tiers.entry(p.tier).or_default() += 1;
        cooked_records += 1;
    }

    Ok(ProgressReport {
        tasks,
        tiers,
        cooked_records,
        volunteers: volunteers.into_values().collect(),
    })
}
