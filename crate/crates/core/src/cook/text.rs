//! Text normalization and edit-distance similarity.

use std::collections::HashSet;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::config::Fraction;
use crate::error::{Error, Result};
use crate::store::hex;

const TERMINAL_PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?', '…', '·'];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedText {
    pub raw: String,
    pub normalized: String,
    /// Rules that changed the text, in application order.
    pub rules_applied: Vec<String>,
}

/// Word-bounded abbreviation expansions, matched longest-first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AbbreviationTable {
    /// (abbreviation tokens, expansion), sorted by token count descending.
    entries: Vec<(Vec<String>, String)>,
}

impl AbbreviationTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// A small table of period abbreviations found in theatre registers.
    pub fn sample() -> Self {
        Self::parse(SAMPLE_TABLE).expect("bundled table is valid")
    }

    /// Parses a two-column UTF-8 table: `abbreviation<TAB>expansion` per line.
    /// Both columns are normalized on load. Tables where an expansion would
    /// itself be rewritten are rejected, which keeps normalization idempotent.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(Vec<String>, String)> = Vec::new();
        let mut keys = HashSet::new();
        for (index, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (abbrev, expansion) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("abbreviation table line {}: expected two tab-separated columns", index + 1))
            })?;
            let abbrev = base_normalize(abbrev).0;
            let expansion = base_normalize(expansion).0;
            if abbrev.is_empty() || expansion.is_empty() {
                return Err(Error::Config(format!("abbreviation table line {}: empty column", index + 1)));
            }
            if !keys.insert(abbrev.clone()) {
                return Err(Error::Config(format!("abbreviation `{abbrev}` listed twice")));
            }
            entries.push((abbrev.split(' ').map(String::from).collect(), expansion));
        }
        // No expansion token may occur in any abbreviation, so an expansion can
        // never take part in a later match.
        let key_tokens: HashSet<&str> = entries
            .iter()
            .flat_map(|(tokens, _)| tokens.iter().map(String::as_str))
            .collect();
        for (_, expansion) in &entries {
            if expansion.split(' ').any(|t| key_tokens.contains(t)) {
                return Err(Error::Config(format!(
                    "expansion `{expansion}` contains an abbreviation token of the same table"
                )));
            }
        }
        let mut table = AbbreviationTable { entries };
        table
            .entries
            .sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (tokens, expansion) in &self.entries {
            hasher.update(format!("{}\t{expansion}\n", tokens.join(" ")).as_bytes());
        }
        hex(&hasher.finalize())
    }

    fn expand(&self, text: &str) -> String {
        if self.entries.is_empty() || text.is_empty() {
            return text.to_string();
        }
        let tokens: Vec<&str> = text.split(' ').collect();
        let mut out: Vec<&str> = Vec::with_capacity(tokens.len());
        let mut i = 0;
        'outer: while i < tokens.len() {
            for (abbrev, expansion) in &self.entries {
                let n = abbrev.len();
                if i + n <= tokens.len() && abbrev.iter().zip(&tokens[i..i + n]).all(|(a, t)| a == t) {
                    out.push(expansion);
                    i += n;
                    continue 'outer;
                }
            }
            out.push(tokens[i]);
            i += 1;
        }
        out.join(" ")
    }
}

const SAMPLE_TABLE: &str = "\
# abbreviation\texpansion
sr\tsieur
srs\tsieurs
mr\tmonsieur
mrs\tmessieurs
mlle\tmademoiselle
mlles\tmesdemoiselles
mme\tmadame
dlle\tdemoiselle
&\tet
st\tsaint
ste\tsainte
";

/// The first five rules; returns the text and the names of rules that changed it.
fn base_normalize(raw: &str) -> (String, Vec<&'static str>) {
    fn apply(
        current: &mut String,
        applied: &mut Vec<&'static str>,
        name: &'static str,
        rule: impl Fn(&str) -> String,
    ) {
        let next = rule(current);
        if next != *current {
            if !applied.contains(&name) {
                applied.push(name);
            }
            *current = next;
        }
    }

    let mut applied = Vec::new();
    let mut current = raw.to_string();
    // Lowercasing can expose new compositions; iterate to a fixpoint.
    for _ in 0..4 {
        let start = current.clone();
        apply(&mut current, &mut applied, "unicode_nfc", |s| s.nfc().collect());
        apply(&mut current, &mut applied, "lowercase", |s| s.to_lowercase().nfc().collect());
        apply(&mut current, &mut applied, "collapse_whitespace", collapse_whitespace);
        apply(&mut current, &mut applied, "trim", |s| s.trim().to_string());
        apply(&mut current, &mut applied, "strip_terminal_punctuation", |s| {
            s.trim_end_matches(|c: char| TERMINAL_PUNCTUATION.contains(&c) || c.is_whitespace())
                .to_string()
        });
        if current == start {
            break;
        }
    }
    (current, applied)
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_run = false;
    for c in s.chars() {
        if c.is_whitespace() {
            if !in_run {
                out.push(' ');
            }
            in_run = true;
        } else {
            out.push(c);
            in_run = false;
        }
    }
    out
}

/// Applies, in order: NFC composition, lowercasing, whitespace collapsing,
/// trimming, terminal punctuation stripping, and abbreviation expansion.
pub fn normalize_text(raw: &str, table: &AbbreviationTable) -> NormalizedText {
    let (base, mut applied) = base_normalize(raw);
    let normalized = table.expand(&base);
    if normalized != base {
        applied.push("abbreviations");
    }
    NormalizedText {
        raw: raw.to_string(),
        normalized,
        rules_applied: applied.into_iter().map(String::from).collect(),
    }
}

/// Normalization with an empty abbreviation table.
pub fn normalize(raw: &str) -> String {
    normalize_text(raw, &AbbreviationTable::empty()).normalized
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(ca != cb);
            curr[j + 1] = substitution.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// `1 − levenshtein(a,b) / max(|a|,|b|)` as an exact fraction; 1 for two empty strings.
pub fn similarity_ratio(a: &str, b: &str) -> Fraction {
    let longest = a.chars().count().max(b.chars().count()) as u64;
    if longest == 0 {
        return Ratio::from_integer(1);
    }
    let distance = levenshtein(a, b) as u64;
    Ratio::new(longest - distance, longest)
}

pub fn similarity(a: &str, b: &str) -> f64 {
    let r = similarity_ratio(a, b);
    *r.numer() as f64 / *r.denom() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exponential recursive definition, only usable on short strings.
    fn naive_levenshtein(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ha, ta)), Some((hb, tb))) => {
                let sub = naive_levenshtein(ta, tb) + usize::from(ha != hb);
                sub.min(naive_levenshtein(ta, b) + 1).min(naive_levenshtein(a, tb) + 1)
            }
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("  La  Fausse   Coquette. "), "la fausse coquette");
        assert_eq!(normalize("Arlequin"), "arlequin");
        assert_eq!(normalize("arlequin"), "arlequin");
        assert_eq!(normalize("12?"), "12");
        assert_eq!(normalize("abc . ."), "abc");
        // Composed and decomposed forms normalize identically.
        assert_eq!(normalize("Comédie"), normalize("Come\u{301}die"));
    }

    #[test]
    fn rules_applied_are_reported() {
        let n = normalize_text("  La  Fausse   Coquette. ", &AbbreviationTable::empty());
        assert!(n.rules_applied.contains(&"lowercase".to_string()));
        assert!(n.rules_applied.contains(&"strip_terminal_punctuation".to_string()));
        assert!(normalize_text("abc", &AbbreviationTable::empty()).rules_applied.is_empty());
    }

    #[test]
    fn abbreviations_expand_longest_match_word_bounded() {
        let table = AbbreviationTable::parse("st\tsaint\nst germain\tsaint-germain\n").unwrap();
        assert_eq!(normalize_text("Foire St Germain", &table).normalized, "foire saint-germain");
        assert_eq!(normalize_text("St Laurent", &table).normalized, "saint laurent");
        assert_eq!(normalize_text("Stable", &table).normalized, "stable");
        let sample = AbbreviationTable::sample();
        assert_eq!(normalize_text("Mlle Silvia & Sr Mario", &sample).normalized, "mademoiselle silvia et sieur mario");
    }

    #[test]
    fn non_idempotent_tables_are_rejected() {
        assert!(AbbreviationTable::parse("a\ta b\n").is_err());
        assert!(AbbreviationTable::parse("a\tb\na\tc\n").is_err());
        assert!(AbbreviationTable::parse("no tab here\n").is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity("abc", "abc"), 1.0);
        assert_eq!(similarity("abc", ""), 0.0);
        assert_eq!(similarity("", ""), 1.0);
        assert_eq!(similarity_ratio("kitten", "sitting"), Ratio::new(4, 7));
        assert!((similarity("kitten", "sitting") - 0.5714).abs() < 1e-4);
        assert_eq!(similarity_ratio("arlequin", "arlequim"), Ratio::new(7, 8));
    }

    #[test]
    fn levenshtein_matches_naive_oracle_exhaustively_small() {
        let alphabet = ['a', 'b'];
        let mut words = vec![String::new()];
        for len in 1..=4 {
            let mut next = Vec::new();
            for w in words.iter().filter(|w| w.len() == len - 1) {
                for c in alphabet {
                    next.push(format!("{w}{c}"));
                }
            }
            words.extend(next);
        }
        for a in &words {
            for b in &words {
                let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
                assert_eq!(levenshtein(a, b), naive_levenshtein(&ca, &cb), "{a} {b}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn levenshtein_matches_naive_oracle(a in "[a-dé ]{0,8}", b in "[a-dé ]{0,8}") {
            let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            prop_assert_eq!(levenshtein(&a, &b), naive_levenshtein(&ca, &cb));
        }
    }
}
