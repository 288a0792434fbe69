//! Single-file, line-delimited record store with one partition per stage.
//!
//! Every line of the store file is one self-describing JSON object:
//!
//! ```text
//! {"record":{"id":"cs:subject:1","data":{...}}}
//! {"activity":{...}}
//! {"edge":{...}}
//! {"review_item":{...}}
//! {"review_resolution":{...}}
//! ```
//!
//! The file is replayed into in-memory indexes on open. No operation removes
//! or rewrites a line; stage records only ever grow.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::provenance::{ProvActivity, ProvEdge};
use crate::review::{ReviewItem, ReviewResolution};
use crate::schema;

/// The four layers of the data model, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cs,
    Raw,
    Cooked,
    Domain,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Cs, Stage::Raw, Stage::Cooked, Stage::Domain];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Cs => "cs",
            Stage::Raw => "raw",
            Stage::Cooked => "cooked",
            Stage::Domain => "domain",
        }
    }

    pub fn from_ordinal(ordinal: u8) -> Option<Stage> {
        Stage::ALL.get(ordinal as usize).copied()
    }

    /// Kinds accepted by this stage, in the order they are documented.
    pub fn kinds(self) -> &'static [&'static str] {
        schema::kinds(self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cs" | "0" => Ok(Stage::Cs),
            "raw" | "1" => Ok(Stage::Raw),
            "cooked" | "2" => Ok(Stage::Cooked),
            "domain" | "3" => Ok(Stage::Domain),
            _ => Err(Error::InvalidArgument(format!("unknown stage `{s}`"))),
        }
    }
}

/// Identity of a stored record: `stage:kind:serial`.
///
/// Serials start at 1 and increase by one per append within a `(stage, kind)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordId {
    pub stage: Stage,
    pub kind: &'static str,
    pub serial: u64,
}

impl RecordId {
    pub fn new(stage: Stage, kind: &str, serial: u64) -> Result<Self> {
        let kind = schema::intern(stage, kind).ok_or_else(|| Error::InvalidKind {
            stage,
            kind: kind.to_string(),
        })?;
        Ok(RecordId {
            stage,
            kind,
            serial,
        })
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.stage, self.kind, self.serial)
    }
}

impl FromStr for RecordId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadRecordId(s.to_string());
        let mut parts = s.splitn(3, ':');
        let stage = parts.next().ok_or_else(bad)?;
        let kind = parts.next().ok_or_else(bad)?;
        let serial = parts.next().ok_or_else(bad)?;
        let stage: Stage = stage.parse().map_err(|_| bad())?;
        let serial: u64 = serial.parse().map_err(|_| bad())?;
        if serial == 0 {
            return Err(bad());
        }
        RecordId::new(stage, kind, serial).map_err(|_| bad())
    }
}

impl Serialize for RecordId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RecordId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A typed payload owned by one stage and kind.
pub trait Record: Serialize + DeserializeOwned {
    const STAGE: Stage;
    const KIND: &'static str;

    /// Kind invariants; a violation rejects the append.
    fn check(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub counts: BTreeMap<String, u64>,
    /// Lowercase hex SHA-256 over the stage's canonical lines.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub stages: BTreeMap<Stage, StageSnapshot>,
}

impl StoreSnapshot {
    pub fn digest(&self, stage: Stage) -> &str {
        &self.stages[&stage].digest
    }

    pub fn count(&self, stage: Stage, kind: &str) -> u64 {
        self.stages[&stage].counts.get(kind).copied().unwrap_or(0)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Line {
    Record { id: RecordId, data: Value },
    Activity(ProvActivity),
    Edge(ProvEdge),
    ReviewItem(ReviewItem),
    ReviewResolution(ReviewResolution),
}

#[derive(Serialize)]
#[serde(rename_all = "snake_case")]
enum LineRef<'a> {
    Record { id: RecordId, data: &'a Value },
    Activity(&'a ProvActivity),
    Edge(&'a ProvEdge),
    ReviewItem(&'a ReviewItem),
    ReviewResolution(&'a ReviewResolution),
}

#[derive(Default)]
struct Partition {
    kinds: BTreeMap<&'static str, Vec<Value>>,
}

/// The four-stage store plus its provenance and review logs.
pub struct Store {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    stages: [Partition; 4],
    activities: Vec<ProvActivity>,
    edges: Vec<ProvEdge>,
    incoming: HashMap<RecordId, Vec<usize>>,
    review_items: Vec<ReviewItem>,
    review_resolutions: Vec<ReviewResolution>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            path: None,
            writer: None,
            stages: Default::default(),
            activities: Vec::new(),
            edges: Vec::new(),
            incoming: HashMap::new(),
            review_items: Vec::new(),
            review_resolutions: Vec::new(),
        }
    }

    /// Opens (or creates) the store file and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = Store::in_memory();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            store.replay(reader, &path)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        store.writer = Some(BufWriter::new(file));
        store.path = Some(path);
        Ok(store)
    }

    /// Builds a store from a dump, writing it to `path` when given.
    /// The target file must not exist yet.
    pub fn restore<R: BufRead>(reader: R, path: Option<&Path>) -> Result<Self> {
        let mut store = Store::in_memory();
        let origin = path.map(Path::to_path_buf).unwrap_or_default();
        store.replay(reader, &origin)?;
        if let Some(path) = path {
            if path.exists() {
                return Err(Error::InvalidArgument(format!(
                    "restore target {} already exists",
                    path.display()
                )));
            }
            let mut out = BufWriter::new(File::create(path)?);
            store.dump(&mut out)?;
            out.flush()?;
            return Store::open(path);
        }
        Ok(store)
    }

    fn replay<R: BufRead>(&mut self, reader: R, path: &Path) -> Result<()> {
        for (index, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| Error::Corrupt {
                path: path.to_path_buf(),
                line: index + 1,
                reason,
            };
            let parsed: Line = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            match parsed {
                Line::Record { id, data } => {
                    let expected = self.count(id.stage, id.kind) + 1;
                    if id.serial != expected {
                        return Err(corrupt(format!(
                            "serial {} out of order for {}:{} (expected {expected})",
                            id.serial, id.stage, id.kind
                        )));
                    }
                    self.partition_mut(id.stage)
                        .kinds
                        .entry(id.kind)
                        .or_default()
                        .push(data);
                }
                Line::Activity(activity) => self.activities.push(activity),
                Line::Edge(edge) => self.index_edge(edge),
                Line::ReviewItem(item) => self.review_items.push(item),
                Line::ReviewResolution(res) => self.review_resolutions.push(res),
            }
        }
        Ok(())
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn partition(&self, stage: Stage) -> &Partition {
        &self.stages[stage.ordinal() as usize]
    }

    fn partition_mut(&mut self, stage: Stage) -> &mut Partition {
        &mut self.stages[stage.ordinal() as usize]
    }

    fn write_line(&mut self, line: LineRef<'_>) -> Result<()> {
        if let Some(writer) = self.writer.as_mut() {
            serde_json::to_writer(&mut *writer, &line)?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        Ok(())
    }

    /// Appends an untyped payload after validating it against its kind.
    pub fn append(&mut self, stage: Stage, kind: &str, payload: Value) -> Result<RecordId> {
        let kind = schema::intern(stage, kind).ok_or_else(|| Error::InvalidKind {
            stage,
            kind: kind.to_string(),
        })?;
        schema::validate(stage, kind, &payload)?;
        self.push(stage, kind, payload)
    }

    pub fn append_record<T: Record>(&mut self, record: &T) -> Result<RecordId> {
        record
            .check()
            .map_err(|reason| Error::invariant(T::KIND, reason))?;
        let payload = serde_json::to_value(record)?;
        self.push(T::STAGE, T::KIND, payload)
    }

    fn push(&mut self, stage: Stage, kind: &'static str, payload: Value) -> Result<RecordId> {
        let serial = self.count(stage, kind) + 1;
        let id = RecordId {
            stage,
            kind,
            serial,
        };
        self.write_line(LineRef::Record {
            id,
            data: &payload,
        })?;
        self.partition_mut(stage)
            .kinds
            .entry(kind)
            .or_default()
            .push(payload);
        Ok(id)
    }

    pub fn get(&self, id: &RecordId) -> Result<&Value> {
        self.partition(id.stage)
            .kinds
            .get(id.kind)
            .and_then(|records| records.get((id.serial as usize).wrapping_sub(1)))
            .ok_or(Error::UnknownId(*id))
    }

    pub fn get_as<T: Record>(&self, id: &RecordId) -> Result<T> {
        if id.stage != T::STAGE || id.kind != T::KIND {
            return Err(Error::InvalidKind {
                stage: id.stage,
                kind: id.kind.to_string(),
            });
        }
        Ok(T::deserialize(self.get(id)?)?)
    }

    pub fn contains(&self, id: &RecordId) -> bool {
        self.get(id).is_ok()
    }

    pub fn count(&self, stage: Stage, kind: &str) -> u64 {
        self.partition(stage)
            .kinds
            .get(kind)
            .map_or(0, |records| records.len() as u64)
    }

    /// All records of one kind in serial order.
    pub fn iter_kind<'a>(
        &'a self,
        stage: Stage,
        kind: &str,
    ) -> impl Iterator<Item = (RecordId, &'a Value)> + 'a {
        let entry = self.partition(stage).kinds.get_key_value(kind);
        entry.into_iter().flat_map(move |(kind, records)| {
            records.iter().enumerate().map(move |(index, value)| {
                (
                    RecordId {
                        stage,
                        kind,
                        serial: index as u64 + 1,
                    },
                    value,
                )
            })
        })
    }

    /// Typed records of one kind in serial order.
    pub fn records<T: Record>(&self) -> Result<Vec<(RecordId, T)>> {
        self.iter_kind(T::STAGE, T::KIND)
            .map(|(id, value)| Ok((id, T::deserialize(value)?)))
            .collect()
    }

    /// Filtered, paginated scan in serial order.
    pub fn scan<'a, F>(
        &'a self,
        stage: Stage,
        kind: &str,
        filter: F,
        offset: usize,
        limit: usize,
    ) -> Result<Vec<(RecordId, &'a Value)>>
    where
        F: Fn(&Value) -> bool,
    {
        if schema::intern(stage, kind).is_none() {
            return Err(Error::InvalidKind {
                stage,
                kind: kind.to_string(),
            });
        }
        if limit == 0 {
            return Err(Error::InvalidArgument("limit must be at least 1".into()));
        }
        Ok(self
            .iter_kind(stage, kind)
            .filter(|(_, value)| filter(value))
            .skip(offset)
            .take(limit)
            .collect())
    }

    /// Canonical digest of one stage: SHA-256 over `id\tjson\n` lines in
    /// (kind, serial) order.
    pub fn stage_digest(&self, stage: Stage) -> String {
        let mut hasher = Sha256::new();
        for (kind, records) in &self.partition(stage).kinds {
            for (index, value) in records.iter().enumerate() {
                let id = RecordId {
                    stage,
                    kind,
                    serial: index as u64 + 1,
                };
                hasher.update(id.to_string().as_bytes());
                hasher.update(b"\t");
                hasher.update(value.to_string().as_bytes());
                hasher.update(b"\n");
            }
        }
        hex(&hasher.finalize())
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let stages = Stage::ALL
            .iter()
            .map(|&stage| {
                let counts = stage
                    .kinds()
                    .iter()
                    .map(|kind| (kind.to_string(), self.count(stage, kind)))
                    .collect();
                (
                    stage,
                    StageSnapshot {
                        counts,
                        digest: self.stage_digest(stage),
                    },
                )
            })
            .collect();
        StoreSnapshot { stages }
    }

    pub fn activities(&self) -> &[ProvActivity] {
        &self.activities
    }

    pub fn activity(&self, id: u64) -> Option<&ProvActivity> {
        self.activities.get((id as usize).wrapping_sub(1))
    }

    pub fn next_activity_id(&self) -> u64 {
        self.activities.len() as u64 + 1
    }

    pub fn edges(&self) -> &[ProvEdge] {
        &self.edges
    }

    /// Edges whose `derived` end is `id`.
    pub fn incoming(&self, id: &RecordId) -> impl Iterator<Item = &ProvEdge> {
        self.incoming
            .get(id)
            .into_iter()
            .flatten()
            .map(|&index| &self.edges[index])
    }

    fn index_edge(&mut self, edge: ProvEdge) {
        self.incoming
            .entry(edge.derived)
            .or_default()
            .push(self.edges.len());
        self.edges.push(edge);
    }

    /// Appends a finished activity followed by its edges.
    pub(crate) fn push_activity(&mut self, activity: ProvActivity, edges: Vec<ProvEdge>) -> Result<()> {
        debug_assert_eq!(activity.id, self.next_activity_id());
        self.write_line(LineRef::Activity(&activity))?;
        self.activities.push(activity);
        for edge in edges {
            self.write_line(LineRef::Edge(&edge))?;
            self.index_edge(edge);
        }
        Ok(())
    }

    pub fn review_items(&self) -> &[ReviewItem] {
        &self.review_items
    }

    pub fn review_resolutions(&self) -> &[ReviewResolution] {
        &self.review_resolutions
    }

    pub(crate) fn push_review_item(&mut self, mut item: ReviewItem) -> Result<u64> {
        item.id = self.review_items.len() as u64 + 1;
        self.write_line(LineRef::ReviewItem(&item))?;
        let id = item.id;
        self.review_items.push(item);
        Ok(id)
    }

    pub(crate) fn push_review_resolution(&mut self, resolution: ReviewResolution) -> Result<()> {
        self.write_line(LineRef::ReviewResolution(&resolution))?;
        self.review_resolutions.push(resolution);
        Ok(())
    }

    /// Writes every line in canonical order: stage records by
    /// (stage, kind, serial), then activities, edges, and review logs.
    pub fn dump<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut emit = |line: LineRef<'_>| -> Result<()> {
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        for stage in Stage::ALL {
            for (id, data) in stage.kinds().iter().flat_map(|kind| self.iter_kind(stage, kind)) {
                emit(LineRef::Record { id, data })?;
            }
        }
        for activity in &self.activities {
            emit(LineRef::Activity(activity))?;
        }
        for edge in &self.edges {
            emit(LineRef::Edge(edge))?;
        }
        for item in &self.review_items {
            emit(LineRef::ReviewItem(item))?;
        }
        for res in &self.review_resolutions {
            emit(LineRef::ReviewResolution(res))?;
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Advisory lock held for the lifetime of a CLI process or server.
pub struct StoreLock {
    _file: File,
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(store_path: &Path) -> Result<Self> {
        let mut name = store_path.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(StoreLock { _file: file, path }),
            Err(std::fs::TryLockError::WouldBlock) => Err(Error::Locked(path)),
            Err(std::fs::TryLockError::Error(e)) => Err(e.into()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn subject(id: &str) -> Value {
        json!({
            "external_id": id,
            "kind": "root_register",
            "parent": null,
            "meta": {"register": 1},
            "created_at": 0
        })
    }

    #[test]
    fn first_append_gets_serial_one() {
        let mut store = Store::in_memory();
        let id = store.append(Stage::Cs, "subject", subject("r1")).unwrap();
        assert_eq!(id.to_string(), "cs:subject:1");
    }

    #[test]
    fn identical_payloads_get_distinct_ids() {
        let mut store = Store::in_memory();
        let a = store.append(Stage::Cs, "subject", subject("r1")).unwrap();
        let b = store.append(Stage::Cs, "subject", subject("r1")).unwrap();
        assert_ne!(a, b);
        assert_eq!(store.get(&a).unwrap(), store.get(&b).unwrap());
    }

    #[test]
    fn snapshot_counts_track_appends() {
        let mut store = Store::in_memory();
        store.append(Stage::Cs, "subject", subject("r1")).unwrap();
        let before = store.snapshot();
        store.append(Stage::Cs, "subject", subject("r2")).unwrap();
        let after = store.snapshot();
        assert_eq!(after.count(Stage::Cs, "subject"), before.count(Stage::Cs, "subject") + 1);
    }

    #[test]
    fn empty_snapshot_is_all_zero() {
        let snap = Store::in_memory().snapshot();
        for stage in Stage::ALL {
            assert!(snap.stages[&stage].counts.values().all(|&c| c == 0));
            assert_eq!(snap.digest(stage), snap.digest(Stage::Cs));
        }
    }

    #[test]
    fn unknown_serial_is_an_error() {
        let store = Store::in_memory();
        let id: RecordId = "cs:subject:7".parse().unwrap();
        assert!(matches!(store.get(&id), Err(Error::UnknownId(_))));
    }

    #[test]
    fn invalid_kind_for_stage_is_rejected() {
        let mut store = Store::in_memory();
        let err = store.append(Stage::Cs, "mark", json!({})).unwrap_err();
        assert_eq!(err.code(), "invalid_kind");
        assert_eq!(
            store.scan(Stage::Raw, "subject", |_| true, 0, 1).unwrap_err().code(),
            "invalid_kind"
        );
    }

    #[test]
    fn payload_invariants_are_enforced() {
        let mut store = Store::in_memory();
        let err = store
            .append(Stage::Cs, "subject", json!({"external_id": "x"}))
            .unwrap_err();
        assert_eq!(err.code(), "invariant_violation");
    }

    #[test]
    fn scan_respects_order_and_limit() {
        let mut store = Store::in_memory();
        assert!(store.scan(Stage::Cs, "subject", |_| true, 0, 5).unwrap().is_empty());
        for id in ["a", "b", "c"] {
            store.append(Stage::Cs, "subject", subject(id)).unwrap();
        }
        let page = store.scan(Stage::Cs, "subject", |_| true, 0, 2).unwrap();
        let serials: Vec<u64> = page.iter().map(|(id, _)| id.serial).collect();
        assert_eq!(serials, [1, 2]);
        assert!(store.scan(Stage::Cs, "subject", |_| true, 0, 0).is_err());
    }

    #[test]
    fn record_id_text_round_trip() {
        let id: RecordId = "cooked:cooked_transcript:42".parse().unwrap();
        assert_eq!(id.stage, Stage::Cooked);
        assert_eq!(id.serial, 42);
        assert_eq!(id.to_string(), "cooked:cooked_transcript:42");
        assert!("cooked:nope:1".parse::<RecordId>().is_err());
        assert!("cs:subject:0".parse::<RecordId>().is_err());
        assert!("cs:subject".parse::<RecordId>().is_err());
    }

    #[test]
    fn file_store_replays_and_rejects_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let digest = {
            let mut store = Store::open(&path).unwrap();
            store.append(Stage::Cs, "subject", subject("r1")).unwrap();
            store.append(Stage::Cs, "subject", subject("r2")).unwrap();
            store.stage_digest(Stage::Cs)
        };
        let reopened = Store::open(&path).unwrap();
        assert_eq!(reopened.count(Stage::Cs, "subject"), 2);
        assert_eq!(reopened.stage_digest(Stage::Cs), digest);

        let bad = dir.path().join("bad.jsonl");
        let line = |serial: u64| {
            format!(
                "{{\"record\":{{\"id\":\"cs:subject:{serial}\",\"data\":{}}}}}\n",
                subject("x")
            )
        };
        std::fs::write(&bad, line(1) + &line(3)).unwrap();
        assert_eq!(Store::open(&bad).err().unwrap().code(), "corrupt_store");
    }

    #[test]
    fn dump_restore_preserves_digests() {
        let mut store = Store::in_memory();
        store.append(Stage::Cs, "subject", subject("r1")).unwrap();
        let mut buf = Vec::new();
        store.dump(&mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("restored.jsonl");
        let restored = Store::restore(&buf[..], Some(&target)).unwrap();
        assert_eq!(restored.snapshot(), store.snapshot());
        assert!(Store::restore(&buf[..], Some(&target)).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let held = StoreLock::acquire(&path).unwrap();
        assert_eq!(StoreLock::acquire(&path).err().unwrap().code(), "locked");
        drop(held);
        StoreLock::acquire(&path).unwrap();
    }
}
