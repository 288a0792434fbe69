//! Stage 2: normalization, mark clustering, transcript and page consensus,
//! and the three-way confidence partition.

mod cluster;
mod consensus;
mod text;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use cluster::{cluster_marks, lower_median, majority, ClusterDraft};
pub use consensus::{
    agreement_score, consensus_transcript, page_consensus, tier_rule, vote_classes, Consensus, PageVote,
    TierRules, TranscriptInput, VerificationInput,
};
pub use text::{
    levenshtein, normalize, normalize_text, similarity, similarity_ratio, AbbreviationTable, NormalizedText,
};

use crate::config::{format_fraction, Config};
use crate::error::{Error, Result};
use crate::etl::{CategoryVote, Mark, Page, Transcript, Verification};
use crate::geometry::BBox;
use crate::pipeline;
use crate::provenance::{self, ActivityBuilder, ActivityKind, ProvAgent};
use crate::review::{self, ReviewReason};
use crate::store::{Record, RecordId, Stage, Store};

pub const COOK_AGENT: &str = "cook-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceTier {
    FullyConfident,
    AlmostConfident,
    Questionable,
}

impl ConfidenceTier {
    pub const ALL: [ConfidenceTier; 3] = [
        ConfidenceTier::FullyConfident,
        ConfidenceTier::AlmostConfident,
        ConfidenceTier::Questionable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfidenceTier::FullyConfident => "fully_confident",
            ConfidenceTier::AlmostConfident => "almost_confident",
            ConfidenceTier::Questionable => "questionable",
        }
    }
}

impl std::str::FromStr for ConfidenceTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConfidenceTier::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tier `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkCluster {
    pub page_id: RecordId,
    pub member_mark_ids: Vec<RecordId>,
    pub consensus_box: BBox,
    pub tag: String,
    pub n_annotators: u32,
}

impl Record for MarkCluster {
    const STAGE: Stage = Stage::Cooked;
    const KIND: &'static str = "mark_cluster";

    fn check(&self) -> std::result::Result<(), String> {
        if self.member_mark_ids.is_empty() {
            return Err("cluster without members".into());
        }
        if self.member_mark_ids.iter().any(|m| m.kind != Mark::KIND) {
            return Err("cluster members must be marks".into());
        }
        self.consensus_box.check_unit()
    }
}

fn check_agreement(agreement: f64, winning: u64, total: u64) -> std::result::Result<(), String> {
    if winning > total {
        return Err("winning weight exceeds total".into());
    }
    let expected = if total == 0 { 0.0 } else { winning as f64 / total as f64 };
    if (agreement - expected).abs() > 1e-12 {
        return Err(format!("agreement {agreement} is not {winning}/{total}"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CookedTranscript {
    pub cluster_id: RecordId,
    pub page_id: RecordId,
    pub consensus_text: String,
    pub normalized_text: String,
    /// `winning_weight / total_weight`.
    pub agreement: f64,
    pub winning_weight: u64,
    pub total_weight: u64,
    pub n_votes: u64,
    pub class_exact: bool,
    pub tier: ConfidenceTier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<RecordId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curator: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected: bool,
}

impl Record for CookedTranscript {
    const STAGE: Stage = Stage::Cooked;
    const KIND: &'static str = "cooked_transcript";

    fn check(&self) -> std::result::Result<(), String> {
        if self.cluster_id.kind != MarkCluster::KIND {
            return Err(format!("{} is not a cluster", self.cluster_id));
        }
        check_agreement(self.agreement, self.winning_weight, self.total_weight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CookedPage {
    pub page_id: RecordId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub agreement: f64,
    pub winner_votes: u64,
    pub n_votes: u64,
    pub tier: ConfidenceTier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<RecordId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curator: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected: bool,
}

impl Record for CookedPage {
    const STAGE: Stage = Stage::Cooked;
    const KIND: &'static str = "cooked_page";

    fn check(&self) -> std::result::Result<(), String> {
        if self.page_id.kind != Page::KIND {
            return Err(format!("{} is not a page", self.page_id));
        }
        if self.category.is_none() && self.tier != ConfidenceTier::Questionable && self.curator.is_none() {
            return Err("a page without a majority category must be questionable".into());
        }
        check_agreement(self.agreement, self.winner_votes, self.n_votes)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CookReport {
    /// Set when the store was already cooked from this raw state and configuration.
    pub already_cooked: bool,
    pub clusters: usize,
    pub transcripts: usize,
    pub pages: usize,
    /// Clusters whose marks carry no transcript.
    pub untranscribed: Vec<RecordId>,
    /// Pages without any category vote.
    pub unvoted_pages: Vec<RecordId>,
    pub tiers: BTreeMap<ConfidenceTier, usize>,
    pub review_items: usize,
}

pub fn tier_rules(config: &Config) -> TierRules {
    TierRules {
        full: config.full,
        almost: config.almost,
    }
}

pub fn abbreviation_table(config: &Config) -> Result<AbbreviationTable> {
    match &config.abbreviations {
        Some(path) => AbbreviationTable::load(path),
        None => Ok(AbbreviationTable::empty()),
    }
}

fn tier_params(act: &mut ActivityBuilder, config: &Config) {
    act.param("cook.tier.full.min_votes", config.full.min_votes)
        .param("cook.tier.full.min_agreement", format_fraction(&config.full.min_agreement))
        .param("cook.tier.almost.min_votes", config.almost.min_votes)
        .param("cook.tier.almost.min_agreement", format_fraction(&config.almost.min_agreement));
}

fn group_by<K: std::hash::Hash + Eq, T>(items: Vec<T>, key: impl Fn(&T) -> K) -> HashMap<K, Vec<T>> {
    let mut map: HashMap<K, Vec<T>> = HashMap::new();
    for item in items {
        map.entry(key(&item)).or_default().push(item);
    }
    map
}

/// Runs clustering, transcript consensus, and page consensus as three
/// activities. Cooking happens once per store; repeating it over the same raw
/// stage and configuration is a no-op.
pub fn run_cook(store: &mut Store, config: &Config) -> Result<CookReport> {
    if !store.activities().iter().any(|a| a.kind == ActivityKind::Etl) {
        return Err(Error::Precondition("cook needs a completed etl run".into()));
    }
    let raw_digest = store.stage_digest(Stage::Raw);
    let config_digest = config.digest();
    if let Some(previous) = store.activities().iter().find(|a| a.kind == ActivityKind::Cluster) {
        let same = previous.parameters.get("input.raw_digest") == Some(&raw_digest)
            && previous.parameters.get("config_digest") == Some(&config_digest);
        if same {
            return Ok(CookReport {
                already_cooked: true,
                ..Default::default()
            });
        }
        return Err(Error::Precondition(
            "the cooked stage was built from a different raw stage or configuration".into(),
        ));
    }
    let table = abbreviation_table(config)?;
    let rules = tier_rules(config);
    let agent = ProvAgent::algorithm(COOK_AGENT);
    let mut report = CookReport::default();
    let pages = store.records::<Page>()?;

    // Clusters, page by page in serial order.
    let mut marks_by_page = group_by(store.records::<Mark>()?, |(_, m)| m.page_id);
    let mut act = ActivityBuilder::begin(store, ActivityKind::Cluster, &config_digest);
    act.param("cook.tau", config.tau).param("input.raw_digest", &raw_digest);
    let mut clusters: Vec<(RecordId, RecordId, Vec<RecordId>)> = Vec::new();
    for (page_id, _) in &pages {
        let marks = marks_by_page.remove(page_id).unwrap_or_default();
        for draft in cluster_marks(&marks, config.tau) {
            let id = store.append_record(&MarkCluster {
                page_id: *page_id,
                member_mark_ids: draft.members.clone(),
                consensus_box: draft.consensus_box,
                tag: draft.tag,
                n_annotators: draft.n_annotators as u32,
            })?;
            provenance::record(store, &mut act, &draft.members, &[id], &agent)?;
            clusters.push((id, *page_id, draft.members));
        }
    }
    report.clusters = clusters.len();
    pipeline::finish(store, act)?;

    // Transcript consensus per cluster.
    let mut verifications = group_by(store.records::<Verification>()?, |(_, v)| v.transcript_id);
    let mut transcripts = group_by(store.records::<Transcript>()?, |(_, t)| t.mark_id);
    let mut act = ActivityBuilder::begin(store, ActivityKind::Consensus, &config_digest);
    act.param("cook.theta", format_fraction(&config.theta))
        .param("cook.abbreviations.digest", table.digest())
        .param("input.raw_digest", &raw_digest);
    tier_params(&mut act, config);
    let mut questionable = Vec::new();
    for (cluster_id, page_id, members) in &clusters {
        let mut inputs = Vec::new();
        let mut sources = Vec::new();
        for mark in members {
            for (tid, t) in transcripts.remove(mark).unwrap_or_default() {
                let checks = verifications.remove(&tid).unwrap_or_default();
                sources.push(tid);
                sources.extend(checks.iter().map(|(id, _)| *id));
                inputs.push(TranscriptInput {
                    id: tid,
                    text: t.text,
                    volunteer: t.volunteer,
                    created_at: t.created_at,
                    verifications: checks
                        .into_iter()
                        .map(|(id, v)| VerificationInput {
                            id,
                            verdict: v.verdict,
                            volunteer: v.volunteer,
                            created_at: v.created_at,
                        })
                        .collect(),
                });
            }
        }
        let Some(c) = consensus_transcript(&inputs, config.theta, &table, &rules) else {
            report.untranscribed.push(*cluster_id);
            continue;
        };
        let agreement = c.agreement();
        let id = store.append_record(&CookedTranscript {
            cluster_id: *cluster_id,
            page_id: *page_id,
            agreement: *agreement.numer() as f64 / *agreement.denom() as f64,
            n_votes: c.n_votes(),
            winning_weight: c.winning_weight,
            total_weight: c.total_weight,
            class_exact: c.class_exact,
            tier: c.tier,
            consensus_text: c.consensus_text,
            normalized_text: c.normalized_text,
            supersedes: None,
            curator: None,
            rejected: false,
        })?;
        provenance::record(store, &mut act, &sources, &[id], &agent)?;
        *report.tiers.entry(c.tier).or_default() += 1;
        report.transcripts += 1;
        if c.tier == ConfidenceTier::Questionable {
            questionable.push(id);
        }
    }
    pipeline::finish(store, act)?;

    // Page categories.
    let mut votes = group_by(store.records::<CategoryVote>()?, |(_, v)| v.page_id);
    let mut act = ActivityBuilder::begin(store, ActivityKind::PageConsensus, &config_digest);
    act.param("input.raw_digest", &raw_digest);
    tier_params(&mut act, config);
    for (page_id, _) in &pages {
        let page_votes = votes.remove(page_id).unwrap_or_default();
        if page_votes.is_empty() {
            report.unvoted_pages.push(*page_id);
            continue;
        }
        let vote = page_consensus(page_votes.iter().map(|(_, v)| v.category.as_str()), &rules);
        let agreement = vote.agreement();
        let id = store.append_record(&CookedPage {
            page_id: *page_id,
            category: vote.category.clone(),
            agreement: *agreement.numer() as f64 / *agreement.denom() as f64,
            winner_votes: vote.winner_votes,
            n_votes: vote.n_votes,
            tier: vote.tier,
            supersedes: None,
            curator: None,
            rejected: false,
        })?;
        let sources: Vec<RecordId> = page_votes.iter().map(|(id, _)| *id).collect();
        provenance::record(store, &mut act, &sources, &[id], &agent)?;
        *report.tiers.entry(vote.tier).or_default() += 1;
        report.pages += 1;
        if vote.tier == ConfidenceTier::Questionable {
            questionable.push(id);
        }
    }
    pipeline::finish(store, act)?;

    for target in questionable {
        review::open_item(store, target, ReviewReason::QuestionableTier, None)?;
        report.review_items += 1;
    }
    Ok(report)
}
