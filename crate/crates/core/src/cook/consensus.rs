use std::collections::BTreeMap;

use num_rational::Ratio;

use super::text::{normalize_text, similarity, similarity_ratio, AbbreviationTable};
use super::ConfidenceTier;
use crate::config::{Fraction, TierThreshold};
use crate::ingest::Verdict;
use crate::store::RecordId;

/// Tier thresholds for transcripts and pages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TierRules {
    pub full: TierThreshold,
    pub almost: TierThreshold,
}

impl Default for TierRules {
    fn default() -> Self {
        TierRules {
            full: TierThreshold {
                min_votes: 3,
                min_agreement: Ratio::new(2, 3),
            },
            almost: TierThreshold {
                min_votes: 2,
                min_agreement: Ratio::new(1, 2),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationInput {
    pub id: RecordId,
    pub verdict: Verdict,
    pub volunteer: String,
    pub created_at: i64,
}

/// One transcript of a cluster member together with its verifications.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptInput {
    pub id: RecordId,
    pub text: String,
    pub volunteer: String,
    pub created_at: i64,
    pub verifications: Vec<VerificationInput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Consensus {
    pub consensus_text: String,
    pub normalized_text: String,
    pub winning_weight: u64,
    pub total_weight: u64,
    pub class_exact: bool,
    pub tier: ConfidenceTier,
    /// Number of classes formed.
    pub classes: usize,
}

impl Consensus {
    pub fn agreement(&self) -> Fraction {
        Ratio::new(self.winning_weight, self.total_weight)
    }

    /// Votes cast, including rejections.
    pub fn n_votes(&self) -> u64 {
        self.total_weight
    }
}

/// FullyConfident, AlmostConfident, or Questionable for a transcript.
pub fn tier_rule(n_votes: u64, agreement: Fraction, winning_class_exact: bool, rules: &TierRules) -> ConfidenceTier {
    if n_votes >= u64::from(rules.full.min_votes)
        && agreement >= rules.full.min_agreement
        && winning_class_exact
    {
        ConfidenceTier::FullyConfident
    } else if n_votes >= u64::from(rules.almost.min_votes) && agreement >= rules.almost.min_agreement {
        ConfidenceTier::AlmostConfident
    } else {
        ConfidenceTier::Questionable
    }
}

/// Single-linkage groups of `texts` under `similarity >= theta`, each sorted,
/// ordered by smallest member.
pub fn vote_classes(texts: &[&str], theta: Fraction) -> Vec<Vec<usize>> {
    let n = texts.len();
    let mut class: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if class[i] != class[j] && similarity_ratio(texts[i], texts[j]) >= theta {
                let (keep, drop) = (class[i].min(class[j]), class[i].max(class[j]));
                for c in class.iter_mut() {
                    if *c == drop {
                        *c = keep;
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in class.into_iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    groups.into_values().collect()
}

struct Vote<'a> {
    raw: &'a str,
    normalized: &'a str,
    /// Ordering key of the transcript this vote supports.
    origin: (i64, RecordId),
}

/// Consensus over one cluster's transcripts. `None` when there are none.
///
/// Every transcript is one vote; every accepting verification is one more
/// vote for the verified text; a rejecting verification only adds to the
/// total weight.
pub fn consensus_transcript(
    transcripts: &[TranscriptInput],
    theta: Fraction,
    table: &AbbreviationTable,
    rules: &TierRules,
) -> Option<Consensus> {
    if transcripts.is_empty() {
        return None;
    }
    let mut sorted: Vec<&TranscriptInput> = transcripts.iter().collect();
    sorted.sort_by_key(|t| (t.created_at, t.id));
    let normalized: Vec<String> = sorted.iter().map(|t| normalize_text(&t.text, table).normalized).collect();

    let mut votes = Vec::new();
    let mut total = 0u64;
    for (t, norm) in sorted.iter().zip(&normalized) {
        let vote = || Vote {
            raw: &t.text,
            normalized: norm,
            origin: (t.created_at, t.id),
        };
        votes.push(vote());
        total += 1;
        for v in &t.verifications {
            total += 1;
            if v.verdict == Verdict::Accept {
                votes.push(vote());
            }
        }
    }

    let texts: Vec<&str> = votes.iter().map(|v| v.normalized).collect();
    let classes = vote_classes(&texts, theta);
    let winner = classes
        .iter()
        .max_by(|a, b| {
            let earliest = |c: &Vec<usize>| c.iter().map(|&i| votes[i].origin).min();
            a.len().cmp(&b.len()).then_with(|| earliest(b).cmp(&earliest(a)))
        })
        .expect("at least one vote");

    let mut raw_counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut norm_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for &i in winner {
        *raw_counts.entry(votes[i].raw).or_default() += 1;
        *norm_counts.entry(votes[i].normalized).or_default() += 1;
    }
    let top = raw_counts.values().copied().max().unwrap_or(0);
    let consensus_text = raw_counts
        .iter()
        .find(|(_, &n)| n == top)
        .map(|(s, _)| s.to_string())
        .unwrap_or_default();
    let normalized_text = normalize_text(&consensus_text, table).normalized;
    let own = norm_counts.get(normalized_text.as_str()).copied().unwrap_or(0);
    let class_exact = norm_counts
        .iter()
        .all(|(text, &n)| *text == normalized_text || n < own);

    let winning_weight = winner.len() as u64;
    let tier = tier_rule(total, Ratio::new(winning_weight, total), class_exact, rules);
    Some(Consensus {
        consensus_text,
        normalized_text,
        winning_weight,
        total_weight: total,
        class_exact,
        tier,
        classes: classes.len(),
    })
}

/// Outcome of the page category vote.
#[derive(Clone, Debug, PartialEq)]
pub struct PageVote {
    pub category: Option<String>,
    pub winner_votes: u64,
    pub n_votes: u64,
    pub tier: ConfidenceTier,
}

impl PageVote {
    pub fn agreement(&self) -> Fraction {
        if self.n_votes == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(self.winner_votes, self.n_votes)
        }
    }
}

/// Strict-majority category vote. The almost-confident agreement bound is
/// strict for pages.
pub fn page_consensus<'a>(categories: impl IntoIterator<Item = &'a str>, rules: &TierRules) -> PageVote {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut n = 0;
    for c in categories {
        *counts.entry(c).or_default() += 1;
        n += 1;
    }
    let (best, winner_votes) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(c, v)| (Some(*c), *v))
        .unwrap_or((None, 0));
    let category = best.filter(|_| 2 * winner_votes > n);
    let vote = PageVote {
        category: category.map(String::from),
        winner_votes,
        n_votes: n,
        tier: ConfidenceTier::Questionable,
    };
    let agreement = vote.agreement();
    let tier = if vote.category.is_none() {
        ConfidenceTier::Questionable
    } else if n >= u64::from(rules.full.min_votes) && agreement >= rules.full.min_agreement {
        ConfidenceTier::FullyConfident
    } else if n >= u64::from(rules.almost.min_votes) && agreement > rules.almost.min_agreement {
        ConfidenceTier::AlmostConfident
    } else {
        ConfidenceTier::Questionable
    };
    PageVote { tier, ..vote }
}

/// Mean over clusters with at least two transcripts of the mean pairwise
/// similarity of their normalized texts. `None` when no cluster qualifies.
pub fn agreement_score<S: AsRef<str>>(clusters: &[Vec<S>]) -> Option<f64> {
    let scores: Vec<f64> = clusters
        .iter()
        .filter(|c| c.len() >= 2)
        .map(|c| {
            let mut sum = 0.0;
            let mut pairs = 0.0;
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    sum += similarity(c[i].as_ref(), c[j].as_ref());
                    pairs += 1.0;
                }
            }
            sum / pairs
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}
