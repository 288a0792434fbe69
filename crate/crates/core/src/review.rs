//! Curator review queue. Items and resolutions are append-only log lines;
//! a resolution appends a superseding record and a `curator_decision`
//! activity, leaving the original untouched.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::cook::{abbreviation_table, normalize_text, ConfidenceTier, CookedPage, CookedTranscript};
use crate::error::{Error, Result};
use crate::linkage::{CanonicalEntity, LinkDecision, LinkStatus};
use crate::provenance::{self, now_millis, ActivityBuilder, ActivityKind, ProvAgent};
use crate::store::{Record, RecordId, Stage, Store};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewReason {
    QuestionableTier,
    LinkNeedsReview,
    DateAmbiguous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Rejected,
    Edited,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: u64,
    pub target: RecordId,
    pub reason: ReviewReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub created_at: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Accept,
    Reject,
    Edit,
}

/// What the curator decided. `edit` carries a replacement text (transcripts),
/// a category (pages), or a chosen entity (link decisions).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub action: ReviewAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<RecordId>,
}

impl Resolution {
    pub fn accept() -> Self {
        Resolution {
            action: ReviewAction::Accept,
            text: None,
            category: None,
            entity: None,
        }
    }

    pub fn reject() -> Self {
        Resolution {
            action: ReviewAction::Reject,
            ..Resolution::accept()
        }
    }

    pub fn edit_text(text: &str) -> Self {
        Resolution {
            action: ReviewAction::Edit,
            text: Some(text.to_string()),
            ..Resolution::accept()
        }
    }

    pub fn edit_category(category: &str) -> Self {
        Resolution {
            action: ReviewAction::Edit,
            category: Some(category.to_string()),
            ..Resolution::accept()
        }
    }

    pub fn choose(entity: RecordId) -> Self {
        Resolution {
            action: ReviewAction::Edit,
            entity: Some(entity),
            ..Resolution::accept()
        }
    }

    fn status(&self) -> ReviewStatus {
        match self.action {
            ReviewAction::Accept => ReviewStatus::Accepted,
            ReviewAction::Reject => ReviewStatus::Rejected,
            ReviewAction::Edit => ReviewStatus::Edited,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewResolution {
    pub item: u64,
    pub status: ReviewStatus,
    pub curator: String,
    pub resolution: Resolution,
    pub superseding: RecordId,
    pub activity: u64,
    pub resolved_at: i64,
}

/// An item joined with its resolution, as listed by the queue.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub id: u64,
    pub target: RecordId,
    pub reason: ReviewReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub created_at: i64,
    pub status: ReviewStatus,
    pub curator: Option<String>,
    pub resolution: Option<Resolution>,
    pub superseding: Option<RecordId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReviewFilter {
    pub status: Option<ReviewStatus>,
    pub reason: Option<ReviewReason>,
    pub stage: Option<Stage>,
}

/// Records that can be superseded by a newer version of the same kind.
pub trait Versioned: Record {
    fn supersedes(&self) -> Option<RecordId>;
}

impl Versioned for CookedTranscript {
    fn supersedes(&self) -> Option<RecordId> {
        self.supersedes
    }
}

impl Versioned for CookedPage {
    fn supersedes(&self) -> Option<RecordId> {
        self.supersedes
    }
}

impl Versioned for LinkDecision {
    fn supersedes(&self) -> Option<RecordId> {
        self.supersedes
    }
}

/// Records of a kind that no newer record supersedes, in serial order.
pub fn current_versions<T: Versioned>(store: &Store) -> Result<Vec<(RecordId, T)>> {
    let all = store.records::<T>()?;
    let replaced: HashSet<RecordId> = all.iter().filter_map(|(_, r)| r.supersedes()).collect();
    Ok(all.into_iter().filter(|(id, _)| !replaced.contains(id)).collect())
}

/// Map from each superseded record to the record that replaced it.
pub fn superseded_by<T: Versioned>(store: &Store) -> Result<HashMap<RecordId, RecordId>> {
    Ok(store
        .records::<T>()?
        .into_iter()
        .filter_map(|(id, r)| r.supersedes().map(|old| (old, id)))
        .collect())
}

/// Follows supersession to the newest version of `id`.
pub fn latest_version(store: &Store, id: RecordId) -> Result<RecordId> {
    let map = match id.kind {
        CookedTranscript::KIND => superseded_by::<CookedTranscript>(store)?,
        CookedPage::KIND => superseded_by::<CookedPage>(store)?,
        LinkDecision::KIND => superseded_by::<LinkDecision>(store)?,
        _ => return Ok(id),
    };
    let mut current = id;
    while let Some(next) = map.get(&current) {
        current = *next;
    }
    Ok(current)
}

pub(crate) fn open_item(store: &mut Store, target: RecordId, reason: ReviewReason, detail: Option<String>) -> Result<u64> {
    store.push_review_item(ReviewItem {
        id: 0,
        target,
        reason,
        detail,
        created_at: now_millis(),
    })
}

pub(crate) fn has_item(store: &Store, target: RecordId, reason: ReviewReason) -> bool {
    store
        .review_items()
        .iter()
        .any(|i| i.target == target && i.reason == reason)
}

/// Pending items keyed by (target, reason).
pub(crate) fn pending_targets(store: &Store) -> HashMap<(RecordId, ReviewReason), u64> {
    let resolved: HashSet<u64> = store.review_resolutions().iter().map(|r| r.item).collect();
    store
        .review_items()
        .iter()
        .filter(|i| !resolved.contains(&i.id))
        .map(|i| ((i.target, i.reason), i.id))
        .collect()
}

fn entry(item: &ReviewItem, resolution: Option<&ReviewResolution>) -> ReviewEntry {
    ReviewEntry {
        id: item.id,
        target: item.target,
        reason: item.reason,
        detail: item.detail.clone(),
        created_at: item.created_at,
        status: resolution.map_or(ReviewStatus::Pending, |r| r.status),
        curator: resolution.map(|r| r.curator.clone()),
        resolution: resolution.map(|r| r.resolution.clone()),
        superseding: resolution.map(|r| r.superseding),
    }
}

pub fn list(store: &Store, filter: &ReviewFilter) -> Vec<ReviewEntry> {
    let resolutions: HashMap<u64, &ReviewResolution> =
        store.review_resolutions().iter().map(|r| (r.item, r)).collect();
    store
        .review_items()
        .iter()
        .map(|i| entry(i, resolutions.get(&i.id).copied()))
        .filter(|e| filter.status.is_none_or(|s| s == e.status))
        .filter(|e| filter.reason.is_none_or(|r| r == e.reason))
        .filter(|e| filter.stage.is_none_or(|s| s == e.target.stage))
        .collect()
}

pub fn get(store: &Store, id: u64) -> Result<ReviewEntry> {
    let item = store
        .review_items()
        .get((id as usize).wrapping_sub(1))
        .ok_or_else(|| Error::NotFound {
            what: "review item",
            id: id.to_string(),
        })?;
    let resolution = store.review_resolutions().iter().find(|r| r.item == id);
    Ok(entry(item, resolution))
}

fn missing(what: &str) -> Error {
    Error::InvalidArgument(format!("this resolution needs `{what}`"))
}

/// Resolves a pending item and returns the superseding record.
pub fn resolve(store: &mut Store, config: &Config, item_id: u64, resolution: &Resolution, curator: &str) -> Result<RecordId> {
    let item = get(store, item_id)?;
    if item.status != ReviewStatus::Pending {
        return Err(Error::Conflict(format!("review item {item_id} is already {:?}", item.status).to_lowercase()));
    }
    if curator.trim().is_empty() || curator.contains(char::is_whitespace) {
        return Err(Error::InvalidArgument("curator id must be a non-empty token".into()));
    }
    let agent = ProvAgent::curator(curator);
    let base = latest_version(store, item.target)?;
    let mut act = ActivityBuilder::begin(store, ActivityKind::CuratorDecision, &config.digest());
    act.param("review_item", item_id)
        .param("action", format!("{:?}", resolution.action).to_lowercase())
        .param("curator", curator);

    let superseding = match base.kind {
        CookedTranscript::KIND => {
            let old: CookedTranscript = store.get_as(&base)?;
            let mut new = CookedTranscript {
                supersedes: Some(base),
                curator: Some(curator.to_string()),
                ..old
            };
            match resolution.action {
                ReviewAction::Accept => {
                    new.tier = ConfidenceTier::FullyConfident;
                    new.rejected = false;
                }
                ReviewAction::Reject => new.rejected = true,
                ReviewAction::Edit => {
                    let text = resolution.text.as_deref().ok_or_else(|| missing("text"))?;
                    let table = abbreviation_table(config)?;
                    new.normalized_text = normalize_text(text, &table).normalized;
                    new.consensus_text = text.to_string();
                    new.tier = ConfidenceTier::FullyConfident;
                    new.rejected = false;
                }
            }
            let id = store.append_record(&new)?;
            provenance::record(store, &mut act, &[base], &[id], &agent)?;
            id
        }
        CookedPage::KIND => {
            let old: CookedPage = store.get_as(&base)?;
            let mut new = CookedPage {
                supersedes: Some(base),
                curator: Some(curator.to_string()),
                ..old
            };
            match resolution.action {
                ReviewAction::Accept => {
                    if new.category.is_none() {
                        return Err(Error::InvalidArgument(
                            "a page without a majority category needs an edit with `category`".into(),
                        ));
                    }
                    new.tier = ConfidenceTier::FullyConfident;
                    new.rejected = false;
                }
                ReviewAction::Reject => new.rejected = true,
                ReviewAction::Edit => {
                    let category = resolution.category.as_deref().ok_or_else(|| missing("category"))?;
                    new.category = Some(category.to_string());
                    new.tier = ConfidenceTier::FullyConfident;
                    new.rejected = false;
                }
            }
            let id = store.append_record(&new)?;
            provenance::record(store, &mut act, &[base], &[id], &agent)?;
            id
        }
        LinkDecision::KIND => {
            let old: LinkDecision = store.get_as(&base)?;
            let mut new = LinkDecision {
                supersedes: Some(base),
                decided_by: agent.clone(),
                carried_from: None,
                ..old.clone()
            };
            match resolution.action {
                ReviewAction::Accept => match old.candidate {
                    Some(_) => new.status = LinkStatus::AutoLinked,
                    None => {
                        // Accepting a proposal creates the proposed entity.
                        let cooked: CookedTranscript = store.get_as(&old.cooked_id)?;
                        let entity = store.append_record(&CanonicalEntity {
                            entity_kind: old.entity_kind,
                            canonical_name: cooked.consensus_text.clone(),
                            aliases: Vec::new(),
                            external_refs: Vec::new(),
                            external: false,
                        })?;
                        provenance::record(store, &mut act, &[old.cooked_id], &[entity], &agent)?;
                        new.candidate = Some(entity);
                        new.status = LinkStatus::AutoLinked;
                    }
                },
                ReviewAction::Reject => new.status = LinkStatus::Rejected,
                ReviewAction::Edit => {
                    let entity = resolution.entity.ok_or_else(|| missing("entity"))?;
                    let chosen: CanonicalEntity = store.get_as(&entity)?;
                    if chosen.entity_kind != old.entity_kind {
                        return Err(Error::InvalidArgument(format!("{entity} is not a {}", old.entity_kind)));
                    }
                    new.candidate = Some(entity);
                    new.status = LinkStatus::AutoLinked;
                }
            }
            let id = store.append_record(&new)?;
            provenance::record(store, &mut act, &[base], &[id], &agent)?;
            id
        }
        other => {
            return Err(Error::InvalidArgument(format!("records of kind `{other}` are not reviewable")));
        }
    };
    let activity = crate::pipeline::finish(store, act)?;
    store.push_review_resolution(ReviewResolution {
        item: item_id,
        status: resolution.status(),
        curator: curator.to_string(),
        resolution: resolution.clone(),
        superseding,
        activity,
        resolved_at: now_millis(),
    })?;
    Ok(superseding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ingest_reader;

    /// One cluster transcribed once as "Arlequim": a questionable transcript.
    fn questionable_store() -> (Store, Config) {
        let text: String = include_str!("../tests/data/arlequin.jsonl")
            .lines()
            .filter(|l| !l.contains("\"id\":\"t1\"") && !l.contains("\"id\":\"t2\""))
            .map(|l| l.to_string() + "\n")
            .collect();
        let mut store = Store::in_memory();
        let config = Config::default();
        ingest_reader(&mut store, &config, text.as_bytes()).unwrap();
        crate::etl::run_etl(&mut store, &config).unwrap();
        crate::cook::run_cook(&mut store, &config).unwrap();
        (store, config)
    }

    #[test]
    fn accept_supersedes_without_mutation() {
        let (mut store, config) = questionable_store();
        let pending = list(&store, &ReviewFilter { status: Some(ReviewStatus::Pending), ..Default::default() });
        assert_eq!(pending.len(), 1);
        let target = pending[0].target;
        let original: CookedTranscript = store.get_as(&target).unwrap();
        assert_eq!(original.tier, ConfidenceTier::Questionable);
        let before = store.snapshot();

        let new = resolve(&mut store, &config, pending[0].id, &Resolution::accept(), "alice").unwrap();
        let updated: CookedTranscript = store.get_as(&new).unwrap();
        assert_eq!(updated.tier, ConfidenceTier::FullyConfident);
        assert_eq!(updated.supersedes, Some(target));
        assert_eq!(store.get_as::<CookedTranscript>(&target).unwrap(), original);
        assert_eq!(latest_version(&store, target).unwrap(), new);
        let after = store.snapshot();
        assert_eq!(before.digest(Stage::Cs), after.digest(Stage::Cs));
        assert_eq!(before.digest(Stage::Raw), after.digest(Stage::Raw));
        assert!(provenance::reliability_summary(&store, &new).unwrap().curator_touched);
        assert!(list(&store, &ReviewFilter { status: Some(ReviewStatus::Pending), ..Default::default() }).is_empty());
    }

    #[test]
    fn edit_changes_text_and_lineage_shows_curator() {
        let (mut store, config) = questionable_store();
        let item = list(&store, &ReviewFilter::default())[0].id;
        let new = resolve(&mut store, &config, item, &Resolution::edit_text("Arlequin"), "bob").unwrap();
        let updated: CookedTranscript = store.get_as(&new).unwrap();
        assert_eq!(updated.consensus_text, "Arlequin");
        assert_eq!(updated.normalized_text, "arlequin");
        let lineage = provenance::lineage(&store, &new).unwrap();
        assert!(lineage.agents().iter().any(|a| a.to_string() == "curator:bob"));
        assert!(provenance::stage_violations(&store).is_empty());
        assert_eq!(get(&store, item).unwrap().status, ReviewStatus::Edited);
    }

    #[test]
    fn second_resolution_conflicts() {
        let (mut store, config) = questionable_store();
        resolve(&mut store, &config, 1, &Resolution::reject(), "alice").unwrap();
        let err = resolve(&mut store, &config, 1, &Resolution::accept(), "alice").unwrap_err();
        assert_eq!(err.code(), "conflict");
        assert_eq!(resolve(&mut store, &config, 99, &Resolution::accept(), "alice").unwrap_err().code(), "not_found");
    }

    #[test]
    fn edit_needs_its_payload() {
        let (mut store, config) = questionable_store();
        let err = resolve(&mut store, &config, 1, &Resolution { action: ReviewAction::Edit, ..Resolution::accept() }, "a")
            .unwrap_err();
        assert_eq!(err.code(), "invalid_argument");
        assert_eq!(get(&store, 1).unwrap().status, ReviewStatus::Pending);
    }
}
