//! Stage 3: record linkage against the canonical registry and assembly of
//! shows and financial entries.

mod amount;
mod date;
mod registry;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use amount::{parse_amount, split_amount, Amount, DENIERS_PER_LIVRE, DENIERS_PER_SOL, SOLS_PER_LIVRE};
pub use date::{format_french_date, parse_french_date};
pub use registry::{link_entity, load_registry, parse_registry, LinkOutcome, LinkThresholds, RegistryIndex};

use crate::config::{format_fraction, parse_fraction, Config};
use crate::cook::{abbreviation_table, ConfidenceTier, CookedPage, CookedTranscript, MarkCluster};
use crate::error::{Error, Result};
use crate::etl::Page;
use crate::pipeline;
use crate::provenance::{self, ActivityBuilder, ActivityKind, AgentKind, ProvAgent};
use crate::review::{self, current_versions, ReviewReason};
use crate::store::{Record, RecordId, Stage, Store};

pub const LINK_AGENT: &str = "link-v1";
pub const DOMAIN_AGENT: &str = "domain-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Play,
    Person,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Play => "play",
            EntityKind::Person => "person",
        }
    }
}

impl FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "play" => Ok(EntityKind::Play),
            "person" => Ok(EntityKind::Person),
            _ => Err(Error::InvalidArgument(format!("unknown entity kind `{s}`"))),
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalEntity {
    pub entity_kind: EntityKind,
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub external_refs: Vec<String>,
    /// Bootstrapped from the registry file rather than derived from the store.
    #[serde(default)]
    pub external: bool,
}

impl CanonicalEntity {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.canonical_name.as_str()).chain(self.aliases.iter().map(String::as_str))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if crate::cook::normalize(&self.canonical_name).is_empty() {
            return Err("empty canonical name".into());
        }
        let mut seen = BTreeSet::new();
        for name in self.names() {
            if !seen.insert(crate::cook::normalize(name)) {
                return Err(format!("`{name}` repeats another name of the entity"));
            }
        }
        Ok(())
    }
}

impl Record for CanonicalEntity {
    const STAGE: Stage = Stage::Domain;
    const KIND: &'static str = "canonical_entity";

    fn check(&self) -> std::result::Result<(), String> {
        self.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkStatus {
    AutoLinked,
    NeedsReview,
    NewEntityProposed,
    Rejected,
}

impl LinkStatus {
    pub const ALL: [LinkStatus; 4] = [
        LinkStatus::AutoLinked,
        LinkStatus::NeedsReview,
        LinkStatus::NewEntityProposed,
        LinkStatus::Rejected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinkStatus::AutoLinked => "auto_linked",
            LinkStatus::NeedsReview => "needs_review",
            LinkStatus::NewEntityProposed => "new_entity_proposed",
            LinkStatus::Rejected => "rejected",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDecision {
    pub cooked_id: RecordId,
    pub entity_kind: EntityKind,
    /// The cluster tag, kept as the participant role for persons.
    pub role: String,
    /// Normalized text that was linked.
    pub text: String,
    pub candidate: Option<RecordId>,
    pub score: f64,
    /// Exact score as `a/b`.
    pub score_exact: String,
    pub status: LinkStatus,
    pub decided_by: ProvAgent,
    pub high: String,
    pub low: String,
    pub generation: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<RecordId>,
    /// Earlier curator decision this one repeats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carried_from: Option<RecordId>,
}

impl Record for LinkDecision {
    const STAGE: Stage = Stage::Domain;
    const KIND: &'static str = "link_decision";

    fn check(&self) -> std::result::Result<(), String> {
        if self.cooked_id.kind != CookedTranscript::KIND {
            return Err(format!("{} is not a cooked transcript", self.cooked_id));
        }
        if let Some(c) = self.candidate {
            if c.kind != CanonicalEntity::KIND {
                return Err(format!("{c} is not a canonical entity"));
            }
        }
        if self.decided_by.kind != AgentKind::Algorithm {
            return match (self.status, self.candidate) {
                (LinkStatus::AutoLinked, None) => Err("a curator link needs a candidate".into()),
                _ => Ok(()),
            };
        }
        let thresholds = LinkThresholds {
            high: parse_fraction(&self.high).map_err(|e| e.to_string())?,
            low: parse_fraction(&self.low).map_err(|e| e.to_string())?,
        };
        let score = parse_fraction(&self.score_exact).map_err(|e| e.to_string())?;
        match self.status {
            LinkStatus::Rejected => Ok(()),
            status if status == thresholds.status(score) => Ok(()),
            status => Err(format!("status {} contradicts score {}", status.name(), self.score_exact)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Participant {
    pub person_id: RecordId,
    pub role: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Show {
    /// ISO calendar date; absent for an undated single-page stub.
    pub date: Option<String>,
    pub register_id: RecordId,
    pub register_page_ids: Vec<RecordId>,
    pub play_ids: Vec<RecordId>,
    pub participant_ids: Vec<Participant>,
    pub tier_summary: BTreeMap<ConfidenceTier, u64>,
    pub generation: u32,
}

impl Record for Show {
    const STAGE: Stage = Stage::Domain;
    const KIND: &'static str = "show";

    fn check(&self) -> std::result::Result<(), String> {
        if self.register_page_ids.is_empty() {
            return Err("a show spans at least one page".into());
        }
        if let Some(d) = &self.date {
            chrono::NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|e| format!("bad date `{d}`: {e}"))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinancialEntry {
    pub show_id: Option<RecordId>,
    pub label: String,
    pub amount: Amount,
    pub total_deniers: u64,
    pub source: RecordId,
    pub generation: u32,
}

impl Record for FinancialEntry {
    const STAGE: Stage = Stage::Domain;
    const KIND: &'static str = "financial_entry";

    fn check(&self) -> std::result::Result<(), String> {
        if !self.amount.is_normalized() {
            return Err("sols must be below 20 and deniers below 12".into());
        }
        if self.amount.total_deniers() != self.total_deniers {
            return Err("total_deniers does not match the amount".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub generation: u32,
    pub entities_bootstrapped: usize,
    pub decisions: BTreeMap<LinkStatus, usize>,
    pub shows: usize,
    pub undated_pages: usize,
    pub financial_entries: usize,
    /// Questionable cooked records kept out of the domain.
    pub questionable: Vec<RecordId>,
    /// Curator-rejected cooked records kept out of the domain.
    pub rejected: Vec<RecordId>,
    /// Confident transcripts whose tag feeds nothing.
    pub unused: Vec<RecordId>,
    pub amount_errors: Vec<(RecordId, String)>,
    pub review_items: usize,
    /// Pages with no usable cooked record.
    pub empty_pages: Vec<RecordId>,
}

/// Latest generation present in stage 3 (0 when nothing was built).
pub fn current_generation(store: &Store) -> Result<u32> {
    let mut generation = 0;
    for (_, d) in store.records::<LinkDecision>()? {
        generation = generation.max(d.generation);
    }
    for (_, s) in store.records::<Show>()? {
        generation = generation.max(s.generation);
    }
    Ok(generation)
}

fn bootstrap_registry(store: &mut Store, config: &Config) -> Result<usize> {
    let Some(path) = &config.registry else {
        return Ok(0);
    };
    let entities = load_registry(path)?;
    let known: BTreeSet<(EntityKind, String)> = store
        .records::<CanonicalEntity>()?
        .into_iter()
        .map(|(_, e)| (e.entity_kind, crate::cook::normalize(&e.canonical_name)))
        .collect();
    let mut added = 0;
    for entity in entities {
        if !known.contains(&(entity.entity_kind, crate::cook::normalize(&entity.canonical_name))) {
            store.append_record(&entity)?;
            added += 1;
        }
    }
    Ok(added)
}

struct PageContent {
    dates: Vec<(RecordId, Option<chrono::NaiveDate>)>,
    sources: Vec<(RecordId, ConfidenceTier)>,
    plays: BTreeSet<RecordId>,
    people: BTreeSet<Participant>,
}

/// Builds the next generation of link decisions, shows, and financial
/// entries from the current cooked versions. Only fully or almost confident
/// records feed the domain; curator link decisions are carried forward.
pub fn run_link(store: &mut Store, config: &Config) -> Result<LinkReport> {
    if !store.activities().iter().any(|a| a.kind == ActivityKind::Consensus) {
        return Err(Error::Precondition("link needs a completed cook run".into()));
    }
    let config_digest = config.digest();
    let table = abbreviation_table(config)?;
    let thresholds = LinkThresholds {
        high: config.link_high,
        low: config.link_low,
    };
    let mut report = LinkReport {
        generation: current_generation(store)? + 1,
        ..Default::default()
    };
    report.entities_bootstrapped = bootstrap_registry(store, config)?;
    let generation = report.generation;

    let entities = store.records::<CanonicalEntity>()?;
    let index = RegistryIndex::new(entities.iter().map(|(id, e)| (*id, e)), &table, config.blocking_min_entries);

    // Latest curator link decision per cooked record.
    let mut curated: HashMap<RecordId, (RecordId, LinkDecision)> = HashMap::new();
    for (id, d) in current_versions::<LinkDecision>(store)? {
        if d.decided_by.kind == AgentKind::Curator {
            curated.insert(d.cooked_id, (id, d));
        }
    }
    let pending_targets: HashMap<(RecordId, ReviewReason), u64> = review::pending_targets(store);
    let earlier_decisions: HashMap<RecordId, Vec<RecordId>> = {
        let mut map: HashMap<RecordId, Vec<RecordId>> = HashMap::new();
        for (id, d) in store.records::<LinkDecision>()? {
            map.entry(d.cooked_id).or_default().push(id);
        }
        map
    };

    let cluster_tags: HashMap<RecordId, String> =
        store.records::<MarkCluster>()?.into_iter().map(|(id, c)| (id, c.tag)).collect();
    let mut content: BTreeMap<RecordId, PageContent> = BTreeMap::new();
    let entry = |content: &mut BTreeMap<RecordId, PageContent>, page: RecordId| {
        content.entry(page).or_insert_with(|| PageContent {
            dates: Vec::new(),
            sources: Vec::new(),
            plays: BTreeSet::new(),
            people: BTreeSet::new(),
        });
    };

    let mut act = ActivityBuilder::begin(store, ActivityKind::Link, &config_digest);
    act.param("link.high", format_fraction(&config.link_high))
        .param("link.low", format_fraction(&config.link_low))
        .param("link.blocking_min_entries", config.blocking_min_entries)
        .param("generation", generation)
        .param("input.cooked_digest", store.stage_digest(Stage::Cooked));
    let link_agent = ProvAgent::algorithm(LINK_AGENT);
    let mut amounts = Vec::new();
    let mut review_targets = Vec::new();
    for (ct_id, ct) in current_versions::<CookedTranscript>(store)? {
        if ct.rejected {
            report.rejected.push(ct_id);
            continue;
        }
        if ct.tier == ConfidenceTier::Questionable {
            report.questionable.push(ct_id);
            continue;
        }
        let tag = cluster_tags.get(&ct.cluster_id).cloned().unwrap_or_default();
        entry(&mut content, ct.page_id);
        let kind = if config.play_tags.contains(&tag) {
            Some(EntityKind::Play)
        } else if config.person_tags.contains(&tag) {
            Some(EntityKind::Person)
        } else {
            None
        };
        if tag == config.date_tag {
            if ct.tier == ConfidenceTier::FullyConfident {
                let page = content.get_mut(&ct.page_id).expect("inserted");
                page.dates.push((ct_id, parse_french_date(&ct.consensus_text)));
                page.sources.push((ct_id, ct.tier));
            } else {
                report.unused.push(ct_id);
            }
            continue;
        }
        let Some(kind) = kind else {
            match split_amount(&ct.consensus_text) {
                Ok(Some((label, amount))) => amounts.push((ct_id, ct.page_id, label, tag, amount)),
                Ok(None) => report.unused.push(ct_id),
                Err(e) => report.amount_errors.push((ct_id, e.to_string())),
            }
            continue;
        };

        let (decision, agent) = match curated.get(&ct_id) {
            Some((from, d)) => (
                LinkDecision {
                    generation,
                    supersedes: None,
                    carried_from: Some(*from),
                    ..d.clone()
                },
                d.decided_by.clone(),
            ),
            None => {
                let outcome = index.link(&ct.normalized_text, kind, &thresholds);
                let score = outcome.score;
                (
                    LinkDecision {
                        cooked_id: ct_id,
                        entity_kind: kind,
                        role: tag.clone(),
                        text: ct.normalized_text.clone(),
                        candidate: outcome.candidate,
                        score: *score.numer() as f64 / *score.denom() as f64,
                        score_exact: format!("{}/{}", score.numer(), score.denom()),
                        status: outcome.status,
                        decided_by: link_agent.clone(),
                        high: format_fraction(&thresholds.high),
                        low: format_fraction(&thresholds.low),
                        generation,
                        reason: outcome.reason,
                        supersedes: None,
                        carried_from: None,
                    },
                    link_agent.clone(),
                )
            }
        };
        let id = store.append_record(&decision)?;
        provenance::record(store, &mut act, &[ct_id], &[id], &agent)?;
        *report.decisions.entry(decision.status).or_default() += 1;
        if decision.status == LinkStatus::NeedsReview {
            let already = earlier_decisions
                .get(&ct_id)
                .into_iter()
                .flatten()
                .any(|d| pending_targets.contains_key(&(*d, ReviewReason::LinkNeedsReview)));
            if !already {
                review_targets.push((id, ReviewReason::LinkNeedsReview, None));
            }
        }
        if decision.status == LinkStatus::AutoLinked {
            let page = content.get_mut(&ct.page_id).expect("inserted");
            let candidate = decision.candidate.expect("auto links have a candidate");
            page.sources.push((ct_id, ct.tier));
            match kind {
                EntityKind::Play => {
                    page.plays.insert(candidate);
                }
                EntityKind::Person => {
                    page.people.insert(Participant {
                        person_id: candidate,
                        role: decision.role.clone(),
                    });
                }
            }
        }
    }
    pipeline::finish(store, act)?;

    let mut act = ActivityBuilder::begin(store, ActivityKind::DomainBuild, &config_digest);
    act.param("domain.date_tag", &config.date_tag)
        .param("domain.play_tags", config.play_tags.join(","))
        .param("domain.person_tags", config.person_tags.join(","))
        .param("generation", generation);
    let domain_agent = ProvAgent::algorithm(DOMAIN_AGENT);
    let cooked_pages: HashMap<RecordId, RecordId> = current_versions::<CookedPage>(store)?
        .into_iter()
        .map(|(id, p)| (p.page_id, id))
        .collect();

    // Dated pages group by (register, date); the rest become one stub each.
    let mut groups: BTreeMap<(RecordId, Option<chrono::NaiveDate>, RecordId), Vec<RecordId>> = BTreeMap::new();
    let mut dated: BTreeMap<(RecordId, chrono::NaiveDate), RecordId> = BTreeMap::new();
    for (page_id, page) in store.records::<Page>()? {
        let info = content.get(&page_id);
        let date = info.and_then(|c| {
            let parsed: BTreeSet<Option<chrono::NaiveDate>> = c.dates.iter().map(|(_, d)| *d).collect();
            match (parsed.len(), parsed.iter().next()) {
                (1, Some(Some(d))) => Some(*d),
                (0, _) => None,
                _ => {
                    let target = c.dates[0].0;
                    if !pending_targets.contains_key(&(target, ReviewReason::DateAmbiguous))
                        && !review::has_item(store, target, ReviewReason::DateAmbiguous)
                    {
                        let detail = c.dates.iter().map(|(id, _)| id.to_string()).collect::<Vec<_>>().join(",");
                        review_targets.push((target, ReviewReason::DateAmbiguous, Some(detail)));
                    }
                    None
                }
            }
        });
        let has_sources = info.is_some_and(|c| !c.sources.is_empty()) || cooked_pages.contains_key(&page_id);
        if !has_sources {
            report.empty_pages.push(page_id);
            continue;
        }
        match date {
            Some(d) => {
                let first = *dated.entry((page.register_id, d)).or_insert(page_id);
                groups.entry((page.register_id, Some(d), first)).or_default().push(page_id);
            }
            None => {
                report.undated_pages += 1;
                groups.entry((page.register_id, None, page_id)).or_default().push(page_id);
            }
        }
    }
    let mut ordered: Vec<_> = groups.into_iter().collect();
    ordered.sort_by_key(|((register, _, first), _)| (*register, *first));
    let mut show_of_page: HashMap<RecordId, RecordId> = HashMap::new();
    for ((register_id, date, _), pages) in ordered {
        let mut plays = BTreeSet::new();
        let mut people = BTreeSet::new();
        let mut sources = Vec::new();
        let mut tier_summary: BTreeMap<ConfidenceTier, u64> = BTreeMap::new();
        for page in &pages {
            if let Some(c) = content.get(page) {
                plays.extend(c.plays.iter().copied());
                people.extend(c.people.iter().cloned());
                for (id, tier) in &c.sources {
                    sources.push(*id);
                    *tier_summary.entry(*tier).or_default() += 1;
                }
            }
            sources.extend(cooked_pages.get(page).copied());
        }
        let id = store.append_record(&Show {
            date: date.map(|d| d.format("%Y-%m-%d").to_string()),
            register_id,
            register_page_ids: pages.clone(),
            play_ids: plays.into_iter().collect(),
            participant_ids: people.into_iter().collect(),
            tier_summary,
            generation,
        })?;
        provenance::record(store, &mut act, &sources, &[id], &domain_agent)?;
        for page in pages {
            show_of_page.insert(page, id);
        }
        report.shows += 1;
    }
    for (ct_id, page_id, label, tag, amount) in amounts {
        let id = store.append_record(&FinancialEntry {
            show_id: show_of_page.get(&page_id).copied(),
            label: if label.is_empty() { tag } else { label },
            total_deniers: amount.total_deniers(),
            amount,
            source: ct_id,
            generation,
        })?;
        provenance::record(store, &mut act, &[ct_id], &[id], &domain_agent)?;
        report.financial_entries += 1;
    }
    pipeline::finish(store, act)?;

    for (target, reason, detail) in review_targets {
        review::open_item(store, target, reason, detail)?;
        report.review_items += 1;
    }
    Ok(report)
}
