//! Read-side views over the store: the entity indexes served by the REST
//! layer. Every view is pure and lists records in serial order, so offset
//! pagination is stable.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use serde_json::Value;

use crate::cook::{ConfidenceTier, CookedPage, CookedTranscript, MarkCluster};
use crate::error::{Error, Result};
use crate::etl::{CategoryVote, Mark, Page, Register, Transcript, Verification};
use crate::ingest::Classification;
use crate::linkage::{current_generation, CanonicalEntity, EntityKind, FinancialEntry, LinkDecision, LinkStatus, Show};
use crate::progress::{progress, VolunteerActivity};
use crate::provenance::{reliability_summary, ReliabilitySummary};
use crate::review::{current_versions, latest_version};
use crate::schema;
use crate::store::{Record, RecordId, Stage, Store};

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Paging {
    pub offset: usize,
    pub limit: usize,
}

impl Default for Paging {
    fn default() -> Self {
        Paging {
            offset: 0,
            limit: DEFAULT_LIMIT,
        }
    }
}

impl Paging {
    pub fn new(offset: Option<usize>, limit: Option<usize>) -> Result<Self> {
        let limit = limit.unwrap_or(DEFAULT_LIMIT);
        if limit == 0 || limit > MAX_LIMIT {
            return Err(Error::InvalidArgument(format!("limit must be between 1 and {MAX_LIMIT}")));
        }
        Ok(Paging {
            offset: offset.unwrap_or(0),
            limit,
        })
    }

    pub fn apply<T>(&self, items: Vec<T>) -> Paged<T> {
        let total = items.len();
        Paged {
            items: items.into_iter().skip(self.offset).take(self.limit).collect(),
            offset: self.offset,
            limit: self.limit,
            total,
        }
    }
}

/// One page of a list response; `total` counts the filtered list.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Paged<T> {
    pub items: Vec<T>,
    pub offset: usize,
    pub limit: usize,
    pub total: usize,
}

/// Filters shared by the list endpoints. A filter a list does not carry
/// the field for leaves it unfiltered.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ListFilter {
    pub tier: Option<ConfidenceTier>,
    pub stage: Option<Stage>,
    pub volunteer: Option<String>,
}

impl ListFilter {
    /// Matches on the `tier` and `volunteer` fields of a serialized record.
    pub fn matches(&self, value: &Value) -> bool {
        let tier_ok = match (self.tier, value.get("tier")) {
            (Some(t), Some(v)) => v.as_str() == Some(t.name()),
            _ => true,
        };
        let volunteer_ok = match (&self.volunteer, value.get("volunteer")) {
            (Some(want), Some(v)) => v.as_str() == Some(want.as_str()),
            _ => true,
        };
        tier_ok && volunteer_ok
    }

    fn keep<T: Serialize>(&self, item: &T) -> bool {
        (self.tier.is_none() && self.volunteer.is_none())
            || serde_json::to_value(item).is_ok_and(|v| self.matches(&v))
    }

    pub fn apply<T: Serialize>(&self, items: Vec<T>) -> Vec<T> {
        items.into_iter().filter(|i| self.keep(i)).collect()
    }
}

/// A record with its id.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Entry<T> {
    pub id: RecordId,
    #[serde(flatten)]
    pub record: T,
}

fn entries<T>(records: Vec<(RecordId, T)>) -> Vec<Entry<T>> {
    records.into_iter().map(|(id, record)| Entry { id, record }).collect()
}

fn expect_kind(id: &RecordId, kind: &str) -> Result<()> {
    if id.kind != kind {
        return Err(Error::InvalidArgument(format!("{id} is not a {kind}")));
    }
    Ok(())
}

fn typed<T: Record>(store: &Store, id: &RecordId) -> Result<T> {
    expect_kind(id, T::KIND)?;
    store.get_as(id)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegisterView {
    pub id: RecordId,
    #[serde(flatten)]
    pub register: Register,
    /// Pages present in the store.
    pub page_count: u64,
}

pub fn registers(store: &Store) -> Result<Vec<RegisterView>> {
    let mut counts: HashMap<RecordId, u64> = HashMap::new();
    for (_, p) in store.records::<Page>()? {
        *counts.entry(p.register_id).or_default() += 1;
    }
    Ok(store
        .records::<Register>()?
        .into_iter()
        .map(|(id, register)| RegisterView {
            id,
            register,
            page_count: counts.get(&id).copied().unwrap_or(0),
        })
        .collect())
}

pub fn register_pages(store: &Store, register: &RecordId) -> Result<Vec<Entry<Page>>> {
    typed::<Register>(store, register)?;
    Ok(entries(
        store
            .records::<Page>()?
            .into_iter()
            .filter(|(_, p)| p.register_id == *register)
            .collect(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PageView {
    pub id: RecordId,
    #[serde(flatten)]
    pub page: Page,
    pub category_votes: Vec<Entry<CategoryVote>>,
    /// Current cooked version of the page, if it was voted on.
    pub cooked: Option<Entry<CookedPage>>,
}

pub fn page(store: &Store, id: &RecordId) -> Result<PageView> {
    let page = typed::<Page>(store, id)?;
    let category_votes = entries(
        store
            .records::<CategoryVote>()?
            .into_iter()
            .filter(|(_, v)| v.page_id == *id)
            .collect(),
    );
    let cooked = current_versions::<CookedPage>(store)?
        .into_iter()
        .find(|(_, c)| c.page_id == *id)
        .map(|(id, record)| Entry { id, record });
    Ok(PageView {
        id: *id,
        page,
        category_votes,
        cooked,
    })
}

pub fn page_marks(store: &Store, page: &RecordId) -> Result<Vec<Entry<Mark>>> {
    typed::<Page>(store, page)?;
    Ok(entries(
        store
            .records::<Mark>()?
            .into_iter()
            .filter(|(_, m)| m.page_id == *page)
            .collect(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterView {
    pub id: RecordId,
    #[serde(flatten)]
    pub cluster: MarkCluster,
    /// Current cooked transcript of the cluster.
    pub transcript: Option<Entry<CookedTranscript>>,
}

pub fn page_clusters(store: &Store, page: &RecordId) -> Result<Vec<ClusterView>> {
    typed::<Page>(store, page)?;
    let mut transcripts: HashMap<RecordId, Entry<CookedTranscript>> = current_versions::<CookedTranscript>(store)?
        .into_iter()
        .filter(|(_, t)| t.page_id == *page)
        .map(|(id, record)| (record.cluster_id, Entry { id, record }))
        .collect();
    Ok(store
        .records::<MarkCluster>()?
        .into_iter()
        .filter(|(_, c)| c.page_id == *page)
        .map(|(id, cluster)| ClusterView {
            id,
            cluster,
            transcript: transcripts.remove(&id),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TranscriptView {
    pub id: RecordId,
    #[serde(flatten)]
    pub transcript: Transcript,
    pub verifications: Vec<Entry<Verification>>,
}

fn verifications_by_transcript(store: &Store) -> Result<HashMap<RecordId, Vec<Entry<Verification>>>> {
    let mut map: HashMap<RecordId, Vec<Entry<Verification>>> = HashMap::new();
    for (id, record) in store.records::<Verification>()? {
        map.entry(record.transcript_id).or_default().push(Entry { id, record });
    }
    Ok(map)
}

/// Volunteer transcripts of the marks on a page, with their verifications.
pub fn page_transcripts(store: &Store, page: &RecordId) -> Result<Vec<TranscriptView>> {
    let marks: std::collections::HashSet<RecordId> = page_marks(store, page)?.into_iter().map(|m| m.id).collect();
    let mut verifications = verifications_by_transcript(store)?;
    Ok(store
        .records::<Transcript>()?
        .into_iter()
        .filter(|(_, t)| marks.contains(&t.mark_id))
        .map(|(id, transcript)| TranscriptView {
            id,
            transcript,
            verifications: verifications.remove(&id).unwrap_or_default(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CookedTranscriptView {
    pub id: RecordId,
    #[serde(flatten)]
    pub transcript: CookedTranscript,
    /// Newest version in the supersession chain (itself when current).
    pub latest: RecordId,
    pub reliability: ReliabilitySummary,
}

/// A transcript by id: a volunteer transcript with its verifications, or a
/// cooked transcript with its reliability summary.
pub fn transcript(store: &Store, id: &RecordId) -> Result<Value> {
    let value = match id.kind {
        Transcript::KIND => {
            let transcript = store.get_as::<Transcript>(id)?;
            let verifications = verifications_by_transcript(store)?.remove(id).unwrap_or_default();
            serde_json::to_value(TranscriptView {
                id: *id,
                transcript,
                verifications,
            })?
        }
        CookedTranscript::KIND => serde_json::to_value(CookedTranscriptView {
            id: *id,
            transcript: store.get_as(id)?,
            latest: latest_version(store, *id)?,
            reliability: reliability_summary(store, id)?,
        })?,
        _ => return Err(Error::InvalidArgument(format!("{id} is not a transcript"))),
    };
    Ok(value)
}

pub fn volunteers(store: &Store) -> Result<Vec<VolunteerActivity>> {
    Ok(progress(store)?.volunteers)
}

/// Classifications submitted by one volunteer, in serial order.
pub fn volunteer_activity(store: &Store, volunteer: &str) -> Result<Vec<Entry<Classification>>> {
    let runs: Vec<_> = store
        .records::<Classification>()?
        .into_iter()
        .filter(|(_, c)| c.volunteer == volunteer)
        .collect();
    if runs.is_empty() {
        return Err(Error::NotFound {
            what: "volunteer",
            id: volunteer.to_string(),
        });
    }
    Ok(entries(runs))
}

pub fn entities(store: &Store, kind: EntityKind) -> Result<Vec<Entry<CanonicalEntity>>> {
    Ok(entries(
        store
            .records::<CanonicalEntity>()?
            .into_iter()
            .filter(|(_, e)| e.entity_kind == kind)
            .collect(),
    ))
}

fn latest<T: Record>(store: &Store, generation_of: impl Fn(&T) -> u32) -> Result<Vec<(RecordId, T)>> {
    let generation = current_generation(store)?;
    Ok(store
        .records::<T>()?
        .into_iter()
        .filter(|(_, r)| generation_of(r) == generation)
        .collect())
}

/// Shows of the latest domain generation.
pub fn shows(store: &Store) -> Result<Vec<Entry<Show>>> {
    Ok(entries(latest::<Show>(store, |s| s.generation)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShowView {
    pub id: RecordId,
    #[serde(flatten)]
    pub show: Show,
    pub financial_entries: Vec<Entry<FinancialEntry>>,
}

pub fn show(store: &Store, id: &RecordId) -> Result<ShowView> {
    let show = typed::<Show>(store, id)?;
    let financial_entries = entries(
        store
            .records::<FinancialEntry>()?
            .into_iter()
            .filter(|(_, f)| f.show_id == Some(*id))
            .collect(),
    );
    Ok(ShowView {
        id: *id,
        show,
        financial_entries,
    })
}

pub fn financial_entries(store: &Store) -> Result<Vec<Entry<FinancialEntry>>> {
    Ok(entries(latest::<FinancialEntry>(store, |f| f.generation)?))
}

/// Current link decisions of the latest generation, optionally by status.
pub fn link_decisions(store: &Store, status: Option<LinkStatus>) -> Result<Vec<Entry<LinkDecision>>> {
    let generation = current_generation(store)?;
    Ok(entries(
        current_versions::<LinkDecision>(store)?
            .into_iter()
            .filter(|(_, d)| d.generation == generation)
            .filter(|(_, d)| status.is_none_or(|s| s == d.status))
            .collect(),
    ))
}

/// One page of the records of a kind, untyped. Only the page is copied.
pub fn records(store: &Store, stage: Stage, kind: &str, filter: &ListFilter, paging: Paging) -> Result<Paged<Entry<Value>>> {
    if schema::intern(stage, kind).is_none() {
        return Err(Error::InvalidKind {
            stage,
            kind: kind.to_string(),
        });
    }
    let mut total = 0;
    let mut items = Vec::new();
    for (id, v) in store.iter_kind(stage, kind).filter(|(_, v)| filter.matches(v)) {
        if total >= paging.offset && items.len() < paging.limit {
            items.push(Entry { id, record: v.clone() });
        }
        total += 1;
    }
    Ok(Paged {
        items,
        offset: paging.offset,
        limit: paging.limit,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordView {
    /// The record returned.
    pub id: RecordId,
    /// The id asked for.
    pub requested: RecordId,
    pub record: Value,
}

/// A record by id. Superseded versions resolve to the newest one unless
/// `exact` is set; the original stays reachable either way.
pub fn record(store: &Store, requested: &RecordId, exact: bool) -> Result<RecordView> {
    store.get(requested)?;
    let id = if exact { *requested } else { latest_version(store, *requested)? };
    Ok(RecordView {
        id,
        requested: *requested,
        record: store.get(&id)?.clone(),
    })
}

/// Record counts per stage and kind, with the stage digests.
pub fn kind_counts(store: &Store) -> BTreeMap<Stage, BTreeMap<&'static str, u64>> {
    Stage::ALL
        .iter()
        .map(|s| (*s, s.kinds().iter().map(|k| (*k, store.count(*s, k))).collect()))
        .collect()
}
