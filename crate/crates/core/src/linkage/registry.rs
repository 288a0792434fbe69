use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use num_rational::Ratio;

use super::{CanonicalEntity, EntityKind, LinkStatus};
use crate::config::Fraction;
use crate::cook::{normalize_text, similarity_ratio, AbbreviationTable};
use crate::error::{Error, Result};
use crate::store::{Record, RecordId, Stage};

/// Parses the registry bootstrap file: one entity per line,
/// `kind<TAB>canonical_name[<TAB>alias|alias…[<TAB>ref|ref…]]`.
/// Blank lines and `#` comments are skipped.
pub fn parse_registry(text: &str) -> Result<Vec<CanonicalEntity>> {
    let mut entities = Vec::new();
    let mut seen: HashMap<(EntityKind, String), usize> = HashMap::new();
    for (index, line) in text.lines().enumerate() {
        let lineno = index + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |why: &str| Error::Config(format!("registry line {lineno}: {why}"));
        if fields.len() < 2 || fields.len() > 4 {
            return Err(bad("expected 2 to 4 tab-separated fields"));
        }
        let kind: EntityKind = fields[0].trim().parse().map_err(|_| bad("kind must be play or person"))?;
        let list = |i: usize| -> Vec<String> {
            fields
                .get(i)
                .map(|f| f.split('|').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
                .unwrap_or_default()
        };
        let entity = CanonicalEntity {
            entity_kind: kind,
            canonical_name: fields[1].trim().to_string(),
            aliases: list(2),
            external_refs: list(3),
            external: true,
        };
        entity.validate().map_err(|why| bad(&why))?;
        for name in entity.names() {
            let key = (kind, crate::cook::normalize(name));
            if let Some(other) = seen.insert(key, lineno) {
                return Err(bad(&format!("`{name}` already names an entity on line {other}")));
            }
        }
        entities.push(entity);
    }
    Ok(entities)
}

pub fn load_registry(path: &Path) -> Result<Vec<CanonicalEntity>> {
    parse_registry(&std::fs::read_to_string(path)?)
}

/// Link thresholds, exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkThresholds {
    pub high: Fraction,
    pub low: Fraction,
}

impl Default for LinkThresholds {
    fn default() -> Self {
        LinkThresholds {
            high: Ratio::new(85, 100),
            low: Ratio::new(70, 100),
        }
    }
}

impl LinkThresholds {
    pub fn status(&self, score: Fraction) -> LinkStatus {
        if score >= self.high {
            LinkStatus::AutoLinked
        } else if score >= self.low {
            LinkStatus::NeedsReview
        } else {
            LinkStatus::NewEntityProposed
        }
    }
}

struct Entry {
    id: RecordId,
    canonical_name: String,
    names: Vec<String>,
}

/// Normalized registry names of one entity kind, blocked by first character
/// when the registry is large.
pub struct RegistryIndex {
    entries: BTreeMap<EntityKind, Vec<Entry>>,
    blocks: BTreeMap<(EntityKind, char), Vec<usize>>,
    blocking_min_entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkOutcome {
    pub candidate: Option<RecordId>,
    pub score: Fraction,
    pub status: LinkStatus,
    pub reason: Option<String>,
}

impl RegistryIndex {
    pub fn new<'a>(
        entities: impl IntoIterator<Item = (RecordId, &'a CanonicalEntity)>,
        table: &AbbreviationTable,
        blocking_min_entries: usize,
    ) -> Self {
        let mut entries: BTreeMap<EntityKind, Vec<Entry>> = BTreeMap::new();
        for (id, entity) in entities {
            entries.entry(entity.entity_kind).or_default().push(Entry {
                id,
                canonical_name: entity.canonical_name.clone(),
                names: entity.names().map(|n| normalize_text(n, table).normalized).collect(),
            });
        }
        let mut blocks: BTreeMap<(EntityKind, char), Vec<usize>> = BTreeMap::new();
        for (kind, list) in &entries {
            for (i, entry) in list.iter().enumerate() {
                let mut firsts: Vec<char> = entry.names.iter().filter_map(|n| n.chars().next()).collect();
                firsts.sort_unstable();
                firsts.dedup();
                for c in firsts {
                    blocks.entry((*kind, c)).or_default().push(i);
                }
            }
        }
        RegistryIndex {
            entries,
            blocks,
            blocking_min_entries,
        }
    }

    pub fn len(&self, kind: EntityKind) -> usize {
        self.entries.get(&kind).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(Vec::is_empty)
    }

    /// Scores `normalized` against every name of `kind`; the best score
    /// decides the status and ties go to the smallest canonical name.
    pub fn link(&self, normalized: &str, kind: EntityKind, thresholds: &LinkThresholds) -> LinkOutcome {
        if normalized.is_empty() {
            return LinkOutcome {
                candidate: None,
                score: Ratio::from_integer(0),
                status: LinkStatus::Rejected,
                reason: Some("empty text".into()),
            };
        }
        let list = self.entries.get(&kind).map(Vec::as_slice).unwrap_or_default();
        let candidates: Vec<usize> = if list.len() > self.blocking_min_entries {
            let first = normalized.chars().next().expect("non-empty");
            self.blocks.get(&(kind, first)).cloned().unwrap_or_default()
        } else {
            (0..list.len()).collect()
        };
        let mut best: Option<(Fraction, &Entry)> = None;
        for entry in candidates.into_iter().map(|i| &list[i]) {
            let score = entry
                .names
                .iter()
                .map(|name| similarity_ratio(normalized, name))
                .max()
                .unwrap_or_else(|| Ratio::from_integer(0));
            let better = match &best {
                None => true,
                Some((s, e)) => score > *s || (score == *s && entry.canonical_name < e.canonical_name),
            };
            if better {
                best = Some((score, entry));
            }
        }
        match best {
            None => LinkOutcome {
                candidate: None,
                score: Ratio::from_integer(0),
                status: LinkStatus::NewEntityProposed,
                reason: None,
            },
            Some((score, entry)) => {
                let status = thresholds.status(score);
                LinkOutcome {
                    candidate: (status != LinkStatus::NewEntityProposed).then_some(entry.id),
                    score,
                    status,
                    reason: None,
                }
            }
        }
    }
}

/// Links one text against a plain registry list (ids are positional,
/// `domain:canonical_entity:<n>`).
pub fn link_entity(
    text: &str,
    registry: &[CanonicalEntity],
    kind: EntityKind,
    thresholds: &LinkThresholds,
) -> LinkOutcome {
    let table = AbbreviationTable::empty();
    let index = RegistryIndex::new(
        registry.iter().enumerate().map(|(i, e)| {
            (
                RecordId::new(Stage::Domain, CanonicalEntity::KIND, i as u64 + 1).expect("valid"),
                e,
            )
        }),
        &table,
        usize::MAX,
    );
    index.link(&normalize_text(text, &table).normalized, kind, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entity(kind: EntityKind, name: &str, aliases: &[&str]) -> CanonicalEntity {
        CanonicalEntity {
            entity_kind: kind,
            canonical_name: name.into(),
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
            external_refs: Vec::new(),
            external: true,
        }
    }

    #[test]
    fn exact_alias_links() {
        let reg = [entity(EntityKind::Play, "Arlequin sauvage", &["L'Arlequin sauvage"])];
        let out = link_entity("l'arlequin sauvage", &reg, EntityKind::Play, &LinkThresholds::default());
        assert_eq!(out.score, Ratio::from_integer(1));
        assert_eq!(out.status, LinkStatus::AutoLinked);
    }

    #[test]
    fn empty_registry_and_empty_text() {
        let out = link_entity("arlequin", &[], EntityKind::Play, &LinkThresholds::default());
        assert_eq!(out.status, LinkStatus::NewEntityProposed);
        assert_eq!(out.score, Ratio::from_integer(0));
        let reg = [entity(EntityKind::Play, "Arlequin", &[])];
        assert_eq!(link_entity("  ", &reg, EntityKind::Play, &LinkThresholds::default()).status, LinkStatus::Rejected);
    }

    #[test]
    fn edit_distance_thresholds() {
        let reg = [entity(EntityKind::Person, "Arlequin", &[]), entity(EntityKind::Play, "Arlequim", &[])];
        let t = LinkThresholds::default();
        let out = link_entity("arlequim", &reg, EntityKind::Person, &t);
        assert_eq!(out.score, Ratio::new(7, 8));
        assert_eq!(out.status, LinkStatus::AutoLinked);
        let out = link_entity("arlekuim", &reg, EntityKind::Person, &t);
        assert_eq!(out.score, Ratio::new(6, 8));
        assert_eq!(out.status, LinkStatus::NeedsReview);
        assert_eq!(link_entity("pantalon", &reg, EntityKind::Person, &t).status, LinkStatus::NewEntityProposed);
    }

    #[test]
    fn ties_prefer_smallest_canonical_name() {
        let reg = [entity(EntityKind::Play, "Zaïre", &["le joueur"]), entity(EntityKind::Play, "Le Joueur", &[])];
        let out = link_entity("le joueur", &reg, EntityKind::Play, &LinkThresholds::default());
        assert_eq!(out.candidate.unwrap().serial, 2);
    }

    #[test]
    fn blocking_restricts_to_first_character() {
        let reg: Vec<CanonicalEntity> = (0..30)
            .map(|i| entity(EntityKind::Play, &format!("{}piece {i}", ['a', 'b', 'c'][i % 3]), &[]))
            .collect();
        let table = AbbreviationTable::empty();
        let ids = (1..).map(|s| RecordId::new(crate::store::Stage::Domain, "canonical_entity", s).unwrap());
        let blocked = RegistryIndex::new(ids.clone().zip(reg.iter()), &table, 10);
        let full = RegistryIndex::new(ids.zip(reg.iter()), &table, usize::MAX);
        let t = LinkThresholds::default();
        assert_eq!(blocked.link("apiece 3", EntityKind::Play, &t), full.link("apiece 3", EntityKind::Play, &t));
        // A typo in the first character escapes its block.
        assert!(blocked.link("xpiece 0", EntityKind::Play, &t).candidate.is_none());
        assert!(full.link("xpiece 0", EntityKind::Play, &t).candidate.is_some());
    }

    #[test]
    fn registry_file() {
        let text = "# kind\tname\taliases\nplay\tArlequin sauvage\tL'Arlequin sauvage\nperson\tCarlin\tCarlino|Bertinazzi\tbnf:123\n";
        let reg = parse_registry(text).unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg[1].aliases, ["Carlino", "Bertinazzi"]);
        assert_eq!(reg[1].external_refs, ["bnf:123"]);
        assert!(parse_registry("play\tA\nplay\ta.\n").is_err());
        assert!(parse_registry("ghost\tA\n").is_err());
    }
}
