//! Lineage bookkeeping: activities, agents, and `derived_from` edges.
//!
//! An edge always points from a record to a record exactly one stage below
//! it. The only same-stage edges are curator supersessions inside the Cooked
//! and Domain stages.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::cook::{ConfidenceTier, CookedPage, CookedTranscript};
use crate::error::{Error, Result};
use crate::linkage::CanonicalEntity;
use crate::store::{Record, RecordId, Stage, Store};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    Ingest,
    Etl,
    Normalize,
    Cluster,
    Consensus,
    PageConsensus,
    Link,
    DomainBuild,
    CuratorDecision,
    Surrogate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvActivity {
    pub id: u64,
    pub kind: ActivityKind,
    /// Thresholds, input/output digests, and always `config_digest`.
    pub parameters: BTreeMap<String, String>,
    pub started_at: i64,
    pub ended_at: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Volunteer,
    Algorithm,
    Curator,
}

/// An agent, written `kind:name` (e.g. `volunteer:v17`, `algorithm:cook-v1`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProvAgent {
    pub kind: AgentKind,
    pub id: String,
}

impl ProvAgent {
    pub fn volunteer(id: &str) -> Self {
        ProvAgent {
            kind: AgentKind::Volunteer,
            id: id.to_string(),
        }
    }

    pub fn algorithm(name: &str) -> Self {
        ProvAgent {
            kind: AgentKind::Algorithm,
            id: name.to_string(),
        }
    }

    pub fn curator(id: &str) -> Self {
        ProvAgent {
            kind: AgentKind::Curator,
            id: id.to_string(),
        }
    }
}

impl fmt::Display for ProvAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.kind {
            AgentKind::Volunteer => "volunteer",
            AgentKind::Algorithm => "algorithm",
            AgentKind::Curator => "curator",
        };
        write!(f, "{prefix}:{}", self.id)
    }
}

impl FromStr for ProvAgent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (prefix, id) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("malformed agent `{s}`")))?;
        let kind = match prefix {
            "volunteer" => AgentKind::Volunteer,
            "algorithm" => AgentKind::Algorithm,
            "curator" => AgentKind::Curator,
            _ => return Err(Error::InvalidArgument(format!("malformed agent `{s}`"))),
        };
        Ok(ProvAgent {
            kind,
            id: id.to_string(),
        })
    }
}

impl Serialize for ProvAgent {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProvAgent {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProvEdge {
    pub derived: RecordId,
    pub source: RecordId,
    pub activity: u64,
    pub agent: ProvAgent,
}

/// An activity under construction. Edges are validated as they are recorded
/// and written to the store together with the activity on [`commit`].
pub struct ActivityBuilder {
    id: u64,
    kind: ActivityKind,
    parameters: BTreeMap<String, String>,
    started_at: i64,
    edges: Vec<ProvEdge>,
}

impl ActivityBuilder {
    pub fn begin(store: &Store, kind: ActivityKind, config_digest: &str) -> Self {
        let mut parameters = BTreeMap::new();
        parameters.insert("config_digest".to_string(), config_digest.to_string());
        ActivityBuilder {
            id: store.next_activity_id(),
            kind,
            parameters,
            started_at: now_millis(),
            edges: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn kind(&self) -> ActivityKind {
        self.kind
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.parameters.insert(key.to_string(), value.to_string());
        self
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

pub(crate) fn now_millis() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

fn stage_allowed(kind: ActivityKind, derived: &RecordId, source: &RecordId) -> bool {
    if derived.stage.ordinal() == source.stage.ordinal() + 1 {
        return true;
    }
    kind == ActivityKind::CuratorDecision
        && derived.stage == source.stage
        && matches!(derived.stage, Stage::Cooked | Stage::Domain)
        && derived.kind == source.kind
        && derived.serial > source.serial
}

/// Records one `derived_from` edge per (output, source) pair.
pub fn record(
    store: &Store,
    activity: &mut ActivityBuilder,
    sources: &[RecordId],
    outputs: &[RecordId],
    agent: &ProvAgent,
) -> Result<Vec<ProvEdge>> {
    for id in sources.iter().chain(outputs) {
        if !store.contains(id) {
            return Err(Error::UnknownId(*id));
        }
    }
    let mut edges = Vec::with_capacity(sources.len() * outputs.len());
    for output in outputs {
        for source in sources {
            if !stage_allowed(activity.kind, output, source) {
                return Err(Error::StageConstraint(format!(
                    "{output} cannot derive from {source} in a {:?} activity",
                    activity.kind
                )));
            }
            edges.push(ProvEdge {
                derived: *output,
                source: *source,
                activity: activity.id,
                agent: agent.clone(),
            });
        }
    }
    activity.edges.extend(edges.iter().cloned());
    Ok(edges)
}

/// Writes the activity (with its end time) and all its edges.
pub fn commit(store: &mut Store, activity: ActivityBuilder) -> Result<u64> {
    let id = activity.id;
    let record = ProvActivity {
        id,
        kind: activity.kind,
        parameters: activity.parameters,
        started_at: activity.started_at,
        ended_at: now_millis().max(activity.started_at),
    };
    store.push_activity(record, activity.edges)?;
    Ok(id)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageNode {
    pub id: RecordId,
    /// No incoming edges.
    pub leaf: bool,
    /// A leaf that is not a stage-0 record (registry bootstrap entity).
    pub external: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub root: RecordId,
    pub nodes: Vec<LineageNode>,
    pub edges: Vec<ProvEdge>,
}

impl Lineage {
    pub fn leaves(&self) -> impl Iterator<Item = &LineageNode> {
        self.nodes.iter().filter(|n| n.leaf)
    }

    pub fn agents(&self) -> BTreeSet<&ProvAgent> {
        self.edges.iter().map(|e| &e.agent).collect()
    }
}

/// Transitive closure over `derived_from`, nodes and edges sorted.
pub fn lineage(store: &Store, id: &RecordId) -> Result<Lineage> {
    if !store.contains(id) {
        return Err(Error::UnknownId(*id));
    }
    let mut seen = BTreeSet::new();
    let mut edges = BTreeSet::new();
    let mut queue = VecDeque::from([*id]);
    seen.insert(*id);
    while let Some(current) = queue.pop_front() {
        for edge in store.incoming(&current) {
            edges.insert(edge.clone());
            if seen.insert(edge.source) {
                queue.push_back(edge.source);
            }
        }
    }
    let nodes = seen
        .into_iter()
        .map(|node| {
            let leaf = store.incoming(&node).next().is_none();
            LineageNode {
                id: node,
                leaf,
                external: leaf && node.stage != Stage::Cs,
            }
        })
        .collect();
    Ok(Lineage {
        root: *id,
        nodes,
        edges: edges.into_iter().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilitySummary {
    pub volunteers: usize,
    pub algorithm_activities: usize,
    pub curator_touched: bool,
    pub tier: Option<ConfidenceTier>,
}

pub fn reliability_summary(store: &Store, id: &RecordId) -> Result<ReliabilitySummary> {
    let lineage = lineage(store, id)?;
    let volunteers = lineage
        .edges
        .iter()
        .filter(|e| e.agent.kind == AgentKind::Volunteer)
        .map(|e| &e.agent.id)
        .collect::<HashSet<_>>()
        .len();
    let algorithm_activities = lineage
        .edges
        .iter()
        .filter(|e| {
            store
                .activity(e.activity)
                .is_some_and(|a| a.kind != ActivityKind::CuratorDecision)
        })
        .map(|e| e.activity)
        .collect::<HashSet<_>>()
        .len();
    let curator_touched = lineage
        .edges
        .iter()
        .any(|e| e.agent.kind == AgentKind::Curator);
    let tier = match id.kind {
        CookedTranscript::KIND => Some(store.get_as::<CookedTranscript>(id)?.tier),
        CookedPage::KIND => Some(store.get_as::<CookedPage>(id)?.tier),
        _ => None,
    };
    Ok(ReliabilitySummary {
        volunteers,
        algorithm_activities,
        curator_touched,
        tier,
    })
}

/// Edges that break the stage rule (including edges of unknown activities).
pub fn stage_violations(store: &Store) -> Vec<ProvEdge> {
    store
        .edges()
        .iter()
        .filter(|e| match store.activity(e.activity) {
            Some(a) => !stage_allowed(a.kind, &e.derived, &e.source),
            None => true,
        })
        .cloned()
        .collect()
}

/// True when the full edge set has no directed cycle.
pub fn is_acyclic(store: &Store) -> bool {
    let mut indegree: HashMap<RecordId, usize> = HashMap::new();
    let mut out: HashMap<RecordId, Vec<RecordId>> = HashMap::new();
    for e in store.edges() {
        out.entry(e.derived).or_default().push(e.source);
        *indegree.entry(e.source).or_default() += 1;
        indegree.entry(e.derived).or_default();
    }
    let mut ready: Vec<RecordId> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut visited = 0;
    while let Some(node) = ready.pop() {
        visited += 1;
        for next in out.get(&node).into_iter().flatten() {
            let d = indegree.get_mut(next).expect("indexed");
            *d -= 1;
            if *d == 0 {
                ready.push(*next);
            }
        }
    }
    visited == indegree.len()
}

fn is_external_leaf(store: &Store, id: &RecordId) -> bool {
    id.kind == CanonicalEntity::KIND
        && store
            .get_as::<CanonicalEntity>(id)
            .is_ok_and(|e| e.external)
}

/// Stage-1..3 records without an incoming edge, plus stage-0 records with one.
/// Registry bootstrap entities are external leaves and exempt.
pub fn totality_violations(store: &Store) -> Vec<RecordId> {
    let mut missing = Vec::new();
    for stage in Stage::ALL {
        for kind in stage.kinds() {
            for (id, _) in store.iter_kind(stage, kind) {
                let has_edge = store.incoming(&id).next().is_some();
                let ok = match stage {
                    Stage::Cs => !has_edge,
                    _ => has_edge || is_external_leaf(store, &id),
                };
                if !ok {
                    missing.push(id);
                }
            }
        }
    }
    missing
}

/// Stage-1..3 records whose lineage does not bottom out entirely in stage 0
/// (or in external registry leaves). Assumes an acyclic edge set.
pub fn ungrounded_records(store: &Store) -> Vec<RecordId> {
    fn grounded(store: &Store, id: RecordId, memo: &mut HashMap<RecordId, bool>) -> bool {
        if let Some(&known) = memo.get(&id) {
            return known;
        }
        let result = if id.stage == Stage::Cs {
            true
        } else {
            let sources: Vec<RecordId> = store.incoming(&id).map(|e| e.source).collect();
            if sources.is_empty() {
                is_external_leaf(store, &id)
            } else {
                // Provisional entry guards against cycles.
                memo.insert(id, false);
                sources.into_iter().all(|s| grounded(store, s, memo))
            }
        };
        memo.insert(id, result);
        result
    }
    let mut memo = HashMap::new();
    let mut bad = Vec::new();
    for stage in [Stage::Raw, Stage::Cooked, Stage::Domain] {
        for kind in stage.kinds() {
            for (id, _) in store.iter_kind(stage, kind) {
                if !grounded(store, id, &mut memo) {
                    bad.push(id);
                }
            }
        }
    }
    bad
}

/// Line-delimited edge export, one JSON edge per line.
pub fn export_edges(store: &Store) -> String {
    store
        .edges()
        .iter()
        .map(|e| serde_json::to_string(e).expect("edges serialize") + "\n")
        .collect()
}

/// W3C PROV-JSON style document for a set of edges.
pub fn prov_json(store: &Store, edges: &[ProvEdge]) -> Value {
    let mut entity = Map::new();
    let mut activity = Map::new();
    let mut agent = Map::new();
    let mut derived = Map::new();
    let mut generated = Map::new();
    let mut attributed = Map::new();
    for (index, e) in edges.iter().enumerate() {
        for id in [e.derived, e.source] {
            entity.insert(
                format!("recital:{id}"),
                json!({"prov:type": id.kind, "recital:stage": id.stage.ordinal()}),
            );
        }
        let act = format!("recital:activity/{}", e.activity);
        if let Some(a) = store.activity(e.activity) {
            let mut attrs = Map::new();
            attrs.insert("prov:type".into(), json!(a.kind));
            attrs.insert("prov:startTime".into(), json!(crate::ingest::format_timestamp(a.started_at)));
            attrs.insert("prov:endTime".into(), json!(crate::ingest::format_timestamp(a.ended_at)));
            for (k, v) in &a.parameters {
                attrs.insert(format!("recital:{k}"), json!(v));
            }
            activity.insert(act.clone(), Value::Object(attrs));
        }
        let agent_id = format!("recital:{}", e.agent);
        agent.insert(agent_id.clone(), json!({"prov:type": e.agent.kind}));
        derived.insert(
            format!("_:d{index}"),
            json!({
                "prov:generatedEntity": format!("recital:{}", e.derived),
                "prov:usedEntity": format!("recital:{}", e.source),
                "prov:activity": act,
            }),
        );
        generated.insert(
            format!("_:g{index}"),
            json!({"prov:entity": format!("recital:{}", e.derived), "prov:activity": act}),
        );
        attributed.insert(
            format!("_:a{index}"),
            json!({"prov:entity": format!("recital:{}", e.derived), "prov:agent": agent_id}),
        );
    }
    json!({
        "prefix": {"recital": "urn:recital:"},
        "entity": entity,
        "activity": activity,
        "agent": agent,
        "wasDerivedFrom": derived,
        "wasGeneratedBy": generated,
        "wasAttributedTo": attributed,
    })
}
