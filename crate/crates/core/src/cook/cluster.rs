use std::collections::{BTreeMap, BTreeSet};

use crate::etl::Mark;
use crate::geometry::{box_iou, BBox};
use crate::store::RecordId;

/// A cluster before it is given a record id.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterDraft {
    /// Sorted by serial.
    pub members: Vec<RecordId>,
    pub consensus_box: BBox,
    pub tag: String,
    pub n_annotators: usize,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Lower median: the element at index `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Most frequent string; ties go to the lexicographically smallest.
pub fn majority<'a>(items: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for item in items {
        *counts.entry(item).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(&str, usize)>, (s, n)| match best {
            Some((_, m)) if m >= n => best,
            _ => Some((s, n)),
        })
        .map(|(s, _)| s)
}

/// Single-linkage clustering of one page's marks over the `IoU >= tau` graph.
///
/// Clusters come back ordered by their smallest member id, so the result
/// does not depend on input order.
pub fn cluster_marks(marks: &[(RecordId, Mark)], tau: f64) -> Vec<ClusterDraft> {
    let mut sorted: Vec<&(RecordId, Mark)> = marks.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let n = sorted.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if box_iou(&sorted[i].1.bbox, &sorted[j].1.bbox) >= tau {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups
        .into_values()
        .map(|indexes| {
            let members: Vec<&Mark> = indexes.iter().map(|&i| &sorted[i].1).collect();
            let coord = |f: fn(&BBox) -> f64| lower_median(&mut members.iter().map(|m| f(&m.bbox)).collect::<Vec<_>>());
            ClusterDraft {
                members: indexes.iter().map(|&i| sorted[i].0).collect(),
                consensus_box: BBox::new(coord(|b| b.x), coord(|b| b.y), coord(|b| b.w), coord(|b| b.h)),
                tag: majority(members.iter().map(|m| m.tag.as_str()))
                    .unwrap_or_default()
                    .to_string(),
                n_annotators: members
                    .iter()
                    .map(|m| m.volunteer.as_str())
                    .collect::<BTreeSet<_>>()
                    .len(),
            }
        })
        .collect()
}
