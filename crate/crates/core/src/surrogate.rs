//! Digital surrogates of a page: reading-ordered text and a positioned
//! layout document, both built from the current cooked versions.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::cook::{ConfidenceTier, CookedTranscript, MarkCluster};
use crate::error::{Error, Result};
use crate::etl::Page;
use crate::geometry::BBox;
use crate::ingest::{Subject, SubjectKind};
use crate::provenance::{now_millis, ActivityBuilder, ActivityKind};
use crate::review::current_versions;
use crate::store::{Record, RecordId, Store};

/// Groups boxes into lines and orders them. Two boxes share a line when
/// their vertical overlap is at least half the smaller height; lines are
/// the single-linkage closure of that relation. Lines go top to bottom,
/// boxes within a line left to right, and `key` breaks exact ties.
pub fn reading_lines<K: Ord + Copy>(items: &[(K, BBox)]) -> Vec<Vec<K>> {
    let mut items: Vec<(K, BBox)> = items.to_vec();
    items.sort_by(|a, b| a.0.cmp(&b.0));
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&items[i].1, &items[j].1);
            if a.vertical_overlap(b) >= 0.5 * a.h.min(b.h) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<(K, BBox)>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(items[i]);
    }
    let by_position = |a: &(K, BBox), b: &(K, BBox)| {
        a.1.x.total_cmp(&b.1.x).then(a.1.y.total_cmp(&b.1.y)).then(a.0.cmp(&b.0))
    };
    let mut lines: Vec<Vec<(K, BBox)>> = groups.into_values().collect();
    for line in &mut lines {
        line.sort_by(by_position);
    }
    let top = |line: &Vec<(K, BBox)>| line.iter().map(|(_, b)| b.y).fold(f64::INFINITY, f64::min);
    lines.sort_by(|a, b| top(a).total_cmp(&top(b)).then_with(|| by_position(&a[0], &b[0])));
    lines.into_iter().map(|l| l.into_iter().map(|(k, _)| k).collect()).collect()
}

/// Flattened reading order. With `column_split`, boxes whose centre lies
/// left of the page middle are read first, each column on its own.
pub fn reading_order<K: Ord + Copy>(items: &[(K, BBox)], column_split: bool) -> Vec<K> {
    ordered_lines(items, column_split).into_iter().flatten().collect()
}

fn ordered_lines<K: Ord + Copy>(items: &[(K, BBox)], column_split: bool) -> Vec<Vec<K>> {
    if !column_split {
        return reading_lines(items);
    }
    let (left, right): (Vec<(K, BBox)>, Vec<(K, BBox)>) = items.iter().partition(|(_, b)| b.x + b.w / 2.0 < 0.5);
    let mut lines = reading_lines(&left);
    lines.extend(reading_lines(&right));
    lines
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutElement {
    pub cluster_id: RecordId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub tag: String,
    /// Current cooked transcript, absent for untranscribed clusters.
    pub transcript_id: Option<RecordId>,
    pub text: Option<String>,
    pub tier: Option<ConfidenceTier>,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub page_id: RecordId,
    pub register_id: RecordId,
    pub seq: u32,
    pub image_ref: String,
    /// Width over height, exact (`1/1` when the export gives no size).
    pub aspect_ratio: String,
    pub elements: Vec<LayoutElement>,
    pub generated_at: i64,
    pub config_digest: String,
}

impl LayoutDocument {
    pub fn aspect(&self) -> Ratio<u64> {
        crate::config::parse_fraction(&self.aspect_ratio).unwrap_or_else(|_| Ratio::from_integer(1))
    }

    /// Plain text: one line per layout line, questionable or rejected
    /// texts wrapped in the markers.
    pub fn text(&self, open: &str, close: &str) -> String {
        let mut lines: Vec<Vec<String>> = Vec::new();
        for e in &self.elements {
            let Some(text) = &e.text else { continue };
            if lines.len() <= e.line {
                lines.resize(e.line + 1, Vec::new());
            }
            let shown = match e.tier {
                Some(ConfidenceTier::Questionable) | None => format!("{open}{text}{close}"),
                _ => text.clone(),
            };
            lines[e.line].push(shown);
        }
        lines
            .into_iter()
            .filter(|l| !l.is_empty())
            .map(|l| l.join(" "))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Scalable-vector rendering: each text inside its box, styled by tier.
    pub fn svg(&self) -> String {
        let aspect = self.aspect();
        let width = 1000.0;
        let height = width * *aspect.denom() as f64 / *aspect.numer() as f64;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height:.3}" data-page="{}">"#,
            self.page_id
        );
        out.push_str(concat!(
            "<style>",
            "rect{fill:none;stroke-width:1}",
            ".fully_confident{stroke:#2b7a3d;fill:#2b7a3d}",
            ".almost_confident{stroke:#b07d12;fill:#b07d12}",
            ".questionable{stroke:#b3261e;fill:#b3261e}",
            ".untranscribed{stroke:#777;fill:#777}",
            "rect.fully_confident,rect.almost_confident,rect.questionable,rect.untranscribed{fill:none}",
            "</style>\n"
        ));
        let _ = writeln!(
            out,
            r##"<rect x="0" y="0" width="{width}" height="{height:.3}" stroke="#ccc" fill="none"/>"##
        );
        for e in &self.elements {
            let class = e.tier.map_or("untranscribed", ConfidenceTier::name);
            let (x, y) = (e.bbox.x * width, e.bbox.y * height);
            let (w, h) = (e.bbox.w * width, e.bbox.h * height);
            let _ = writeln!(
                out,
                r#"<g data-cluster="{}"><rect class="{class}" x="{x:.3}" y="{y:.3}" width="{w:.3}" height="{h:.3}"/><text class="{class}" x="{x:.3}" y="{:.3}" font-size="{:.3}">{}</text></g>"#,
                e.cluster_id,
                y + h * 0.8,
                h * 0.7,
                escape(e.text.as_deref().unwrap_or("")),
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn aspect_of(subject: &Subject) -> String {
    let get = |k: &str| subject.meta.extra.get(k).and_then(serde_json::Value::as_u64);
    match (get("width"), get("height")) {
        (Some(w), Some(h)) if w > 0 && h > 0 => {
            let r = Ratio::new(w, h);
            format!("{}/{}", r.numer(), r.denom())
        }
        _ => "1/1".into(),
    }
}

/// Cooked state of every page, read once for a batch of surrogates.
pub struct CookedView {
    clusters: HashMap<RecordId, Vec<(RecordId, MarkCluster)>>,
    transcripts: HashMap<RecordId, (RecordId, CookedTranscript)>,
    aspects: HashMap<String, String>,
}

impl CookedView {
    pub fn load(store: &Store) -> Result<Self> {
        let mut clusters: HashMap<RecordId, Vec<(RecordId, MarkCluster)>> = HashMap::new();
        for (id, c) in store.records::<MarkCluster>()? {
            clusters.entry(c.page_id).or_default().push((id, c));
        }
        let transcripts = current_versions::<CookedTranscript>(store)?
            .into_iter()
            .map(|(id, t)| (t.cluster_id, (id, t)))
            .collect();
        let aspects = store
            .records::<Subject>()?
            .into_iter()
            .filter(|(_, s)| s.kind == SubjectKind::Page)
            .map(|(_, s)| (s.external_id.clone(), aspect_of(&s)))
            .collect();
        Ok(CookedView {
            clusters,
            transcripts,
            aspects,
        })
    }
}

pub fn layout_reconstitution(store: &Store, config: &Config, page_id: &RecordId) -> Result<LayoutDocument> {
    layout_with(store, config, &CookedView::load(store)?, page_id)
}

pub fn layout_with(store: &Store, config: &Config, view: &CookedView, page_id: &RecordId) -> Result<LayoutDocument> {
    if page_id.kind != Page::KIND {
        return Err(Error::InvalidArgument(format!("{page_id} is not a page")));
    }
    let page: Page = store.get_as(page_id)?;
    let clusters = view.clusters.get(page_id).map(Vec::as_slice).unwrap_or_default();
    let boxes: Vec<(RecordId, BBox)> = clusters.iter().map(|(id, c)| (*id, c.consensus_box)).collect();
    let by_id: HashMap<RecordId, &MarkCluster> = clusters.iter().map(|(id, c)| (*id, c)).collect();
    let mut elements = Vec::with_capacity(clusters.len());
    for (line, members) in ordered_lines(&boxes, config.column_split).into_iter().enumerate() {
        for id in members {
            let cluster = by_id[&id];
            let transcript = view.transcripts.get(&id);
            elements.push(LayoutElement {
                cluster_id: id,
                bbox: cluster.consensus_box,
                tag: cluster.tag.clone(),
                transcript_id: transcript.map(|(tid, _)| *tid),
                text: transcript.map(|(_, t)| t.consensus_text.clone()),
                tier: transcript.map(|(_, t)| if t.rejected { ConfidenceTier::Questionable } else { t.tier }),
                line,
            });
        }
    }
    Ok(LayoutDocument {
        page_id: *page_id,
        register_id: page.register_id,
        seq: page.seq,
        image_ref: page.image_ref.clone(),
        aspect_ratio: view.aspects.get(&page.source_subject).cloned().unwrap_or_else(|| "1/1".into()),
        elements,
        generated_at: now_millis(),
        config_digest: config.digest(),
    })
}

pub fn text_reconstitution(store: &Store, config: &Config, page_id: &RecordId) -> Result<String> {
    let doc = layout_reconstitution(store, config, page_id)?;
    Ok(doc.text(&config.marker_open, &config.marker_close))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub pages: usize,
    pub elements: usize,
    pub files: Vec<PathBuf>,
}

/// Writes `<page>.txt`, `<page>.layout.json`, and `<page>.svg` per page into
/// the configured directory and records one surrogate activity.
pub fn write_surrogates(store: &mut Store, config: &Config, pages: &[RecordId]) -> Result<SurrogateReport> {
    if !store.activities().iter().any(|a| a.kind == ActivityKind::Consensus) {
        return Err(Error::Precondition("surrogates need a completed cook run".into()));
    }
    let dir = &config.surrogate_dir;
    std::fs::create_dir_all(dir)?;
    let view = CookedView::load(store)?;
    let mut report = SurrogateReport::default();
    for page in pages {
        let doc = layout_with(store, config, &view, page)?;
        let stem = page.to_string().replace(':', "_");
        let files = [
            (format!("{stem}.txt"), doc.text(&config.marker_open, &config.marker_close) + "\n"),
            (format!("{stem}.layout.json"), serde_json::to_string_pretty(&doc)? + "\n"),
            (format!("{stem}.svg"), doc.svg()),
        ];
        for (name, content) in files {
            let path = dir.join(name);
            std::fs::write(&path, content)?;
            report.files.push(path);
        }
        report.pages += 1;
        report.elements += doc.elements.len();
    }
    let mut act = ActivityBuilder::begin(store, ActivityKind::Surrogate, &config.digest());
    act.param("pages", report.pages)
        .param("elements", report.elements)
        .param("surrogate.column_split", config.column_split)
        .param("surrogate.dir", dir.display());
    crate::pipeline::finish(store, act)?;
    Ok(report)
}
