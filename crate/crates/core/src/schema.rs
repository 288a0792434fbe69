//! Kind table: which record kinds each stage accepts, and the typed
//! validator that guards every untyped append.

use serde_json::Value;

use crate::cook::{CookedPage, CookedTranscript, MarkCluster};
use crate::error::{Error, Result};
use crate::etl::{CategoryVote, Mark, Page, Register, Transcript, Verification};
use crate::ingest::{Classification, Subject};
use crate::linkage::{CanonicalEntity, FinancialEntry, LinkDecision, Show};
use crate::store::{Record, Stage};

const CS: &[&str] = &[Subject::KIND, Classification::KIND];
const RAW: &[&str] = &[
    Register::KIND,
    Page::KIND,
    Mark::KIND,
    Transcript::KIND,
    CategoryVote::KIND,
    Verification::KIND,
];
const COOKED: &[&str] = &[MarkCluster::KIND, CookedTranscript::KIND, CookedPage::KIND];
const DOMAIN: &[&str] = &[
    CanonicalEntity::KIND,
    LinkDecision::KIND,
    Show::KIND,
    FinancialEntry::KIND,
];

pub fn kinds(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Cs => CS,
        Stage::Raw => RAW,
        Stage::Cooked => COOKED,
        Stage::Domain => DOMAIN,
    }
}

/// Returns the static name of `kind` if the stage accepts it.
pub fn intern(stage: Stage, kind: &str) -> Option<&'static str> {
    kinds(stage).iter().copied().find(|k| *k == kind)
}

fn typed<T: Record>(payload: &Value) -> Result<()> {
    let record = T::deserialize(payload).map_err(|e| Error::invariant(T::KIND, e.to_string()))?;
    record.check().map_err(|reason| Error::invariant(T::KIND, reason))
}

pub fn validate(stage: Stage, kind: &str, payload: &Value) -> Result<()> {
    match (stage, kind) {
        (Stage::Cs, Subject::KIND) => typed::<Subject>(payload),
        (Stage::Cs, Classification::KIND) => typed::<Classification>(payload),
        (Stage::Raw, Register::KIND) => typed::<Register>(payload),
        (Stage::Raw, Page::KIND) => typed::<Page>(payload),
        (Stage::Raw, Mark::KIND) => typed::<Mark>(payload),
        (Stage::Raw, Transcript::KIND) => typed::<Transcript>(payload),
        (Stage::Raw, CategoryVote::KIND) => typed::<CategoryVote>(payload),
        (Stage::Raw, Verification::KIND) => typed::<Verification>(payload),
        (Stage::Cooked, MarkCluster::KIND) => typed::<MarkCluster>(payload),
        (Stage::Cooked, CookedTranscript::KIND) => typed::<CookedTranscript>(payload),
        (Stage::Cooked, CookedPage::KIND) => typed::<CookedPage>(payload),
        (Stage::Domain, CanonicalEntity::KIND) => typed::<CanonicalEntity>(payload),
        (Stage::Domain, LinkDecision::KIND) => typed::<LinkDecision>(payload),
        (Stage::Domain, Show::KIND) => typed::<Show>(payload),
        (Stage::Domain, FinancialEntry::KIND) => typed::<FinancialEntry>(payload),
        _ => Err(Error::InvalidKind {
            stage,
            kind: kind.to_string(),
        }),
    }
}
