//! Key-value configuration (`key = value` per line, `#` comments).
//!
//! Unknown keys are rejected. The config digest hashes the canonical form of
//! every key that influences derived data (`store.*` and `api.*` are
//! operational and excluded) and is recorded on every provenance activity.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::FlagRules;
use crate::store::hex;

/// Exact non-negative fraction used for every agreement/similarity threshold.
pub type Fraction = Ratio<u64>;

pub const ENV_CONFIG: &str = "RECITAL_CONFIG";

/// Parses `a/b`, an integer, or a finite decimal (`0.85`) exactly.
pub fn parse_fraction(text: &str) -> Result<Fraction> {
    let bad = || Error::Config(format!("`{text}` is not a fraction"));
    let text = text.trim();
    if let Some((n, d)) = text.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| bad())?;
        let d: u64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(n, d));
    }
    let (whole, frac) = text.split_once('.').unwrap_or((text, ""));
    if whole.is_empty() && frac.is_empty() || frac.len() > 18 {
        return Err(bad());
    }
    let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| bad())? };
    let frac_value: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let scale = 10u64.pow(frac.len() as u32);
    let numer = whole
        .checked_mul(scale)
        .and_then(|w| w.checked_add(frac_value))
        .ok_or_else(bad)?;
    Ok(Ratio::new(numer, scale))
}

pub fn format_fraction(f: &Fraction) -> String {
    if *f.denom() == 1 {
        f.numer().to_string()
    } else {
        format!("{}/{}", f.numer(), f.denom())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TierThreshold {
    pub min_votes: u32,
    pub min_agreement: Fraction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub store_path: PathBuf,
    pub duplicate_iou: f64,
    pub theta: Fraction,
    pub tau: f64,
    pub full: TierThreshold,
    pub almost: TierThreshold,
    pub abbreviations: Option<PathBuf>,
    pub link_high: Fraction,
    pub link_low: Fraction,
    pub registry: Option<PathBuf>,
    pub blocking_min_entries: usize,
    pub date_tag: String,
    pub play_tags: Vec<String>,
    pub person_tags: Vec<String>,
    pub marker_open: String,
    pub marker_close: String,
    pub column_split: bool,
    pub surrogate_dir: PathBuf,
    pub api_bind: String,
    pub api_port: u16,
    pub curator_token: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            store_path: PathBuf::from("recital.store"),
            duplicate_iou: 0.5,
            theta: Ratio::new(9, 10),
            tau: 0.5,
            full: TierThreshold {
                min_votes: 3,
                min_agreement: Ratio::new(2, 3),
            },
            almost: TierThreshold {
                min_votes: 2,
                min_agreement: Ratio::new(1, 2),
            },
            abbreviations: None,
            link_high: Ratio::new(85, 100),
            link_low: Ratio::new(70, 100),
            registry: None,
            blocking_min_entries: 10_000,
            date_tag: "date".into(),
            play_tags: vec!["play".into()],
            person_tags: ["actor", "actress", "musician", "dancer", "designer"]
                .map(String::from)
                .to_vec(),
            marker_open: "⟨".into(),
            marker_close: "⟩".into(),
            column_split: false,
            surrogate_dir: PathBuf::from("surrogates"),
            api_bind: "127.0.0.1".into(),
            api_port: 8080,
            curator_token: None,
        }
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{value}` is not a valid value for {key}")))
}

impl Config {
    /// All keys with their current values, in canonical (sorted) order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        BTreeMap::from([
            ("store.path", self.store_path.display().to_string()),
            ("etl.duplicate_iou", self.duplicate_iou.to_string()),
            ("cook.theta", format_fraction(&self.theta)),
            ("cook.tau", self.tau.to_string()),
            ("cook.tier.full.min_votes", self.full.min_votes.to_string()),
            ("cook.tier.full.min_agreement", format_fraction(&self.full.min_agreement)),
            ("cook.tier.almost.min_votes", self.almost.min_votes.to_string()),
            ("cook.tier.almost.min_agreement", format_fraction(&self.almost.min_agreement)),
            ("cook.abbreviations", path(&self.abbreviations)),
            ("link.high", format_fraction(&self.link_high)),
            ("link.low", format_fraction(&self.link_low)),
            ("link.registry", path(&self.registry)),
            ("link.blocking_min_entries", self.blocking_min_entries.to_string()),
            ("domain.date_tag", self.date_tag.clone()),
            ("domain.play_tags", self.play_tags.join(",")),
            ("domain.person_tags", self.person_tags.join(",")),
            ("surrogate.marker.open", self.marker_open.clone()),
            ("surrogate.marker.close", self.marker_close.clone()),
            ("surrogate.column_split", self.column_split.to_string()),
            ("surrogate.output", self.surrogate_dir.display().to_string()),
            ("api.bind", self.api_bind.clone()),
            ("api.port", self.api_port.to_string()),
            ("api.curator_token", self.curator_token.clone().unwrap_or_default()),
        ])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "store.path" => self.store_path = PathBuf::from(value),
            "etl.duplicate_iou" => self.duplicate_iou = parse_num(key, value)?,
            "cook.theta" => self.theta = parse_fraction(value)?,
            "cook.tau" => self.tau = parse_num(key, value)?,
            "cook.tier.full.min_votes" => self.full.min_votes = parse_num(key, value)?,
            "cook.tier.full.min_agreement" => self.full.min_agreement = parse_fraction(value)?,
            "cook.tier.almost.min_votes" => self.almost.min_votes = parse_num(key, value)?,
            "cook.tier.almost.min_agreement" => self.almost.min_agreement = parse_fraction(value)?,
            "cook.abbreviations" => self.abbreviations = opt_path(value),
            "link.high" => self.link_high = parse_fraction(value)?,
            "link.low" => self.link_low = parse_fraction(value)?,
            "link.registry" => self.registry = opt_path(value),
            "link.blocking_min_entries" => self.blocking_min_entries = parse_num(key, value)?,
            "domain.date_tag" => self.date_tag = value.to_string(),
            "domain.play_tags" => self.play_tags = list(value),
            "domain.person_tags" => self.person_tags = list(value),
            "surrogate.marker.open" => self.marker_open = value.to_string(),
            "surrogate.marker.close" => self.marker_close = value.to_string(),
            "surrogate.column_split" => self.column_split = parse_num(key, value)?,
            "surrogate.output" => self.surrogate_dir = PathBuf::from(value),
            "api.bind" => self.api_bind = value.to_string(),
            "api.port" => self.api_port = parse_num(key, value)?,
            "api.curator_token" => self.curator_token = (!value.is_empty()).then(|| value.to_string()),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(key.trim(), value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (index, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            config
                .set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", index + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let one = Ratio::from_integer(1);
        if *self.theta.numer() == 0 || self.theta > one {
            return Err(Error::Config("cook.theta must lie in (0,1]".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config("cook.tau must lie in (0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.duplicate_iou) {
            return Err(Error::Config("etl.duplicate_iou must lie in [0,1]".into()));
        }
        if self.link_low > self.link_high || self.link_high > one {
            return Err(Error::Config("link thresholds need 0 <= low <= high <= 1".into()));
        }
        if self.full.min_agreement > one || self.almost.min_agreement > one {
            return Err(Error::Config("tier agreements must not exceed 1".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` text (the format `recital config --defaults` prints).
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (key, value) in self.entries() {
            if key.starts_with("store.") || key.starts_with("api.") {
                continue;
            }
            hasher.update(format!("{key}={value}\n").as_bytes());
        }
        hex(&hasher.finalize())
    }

    pub fn flag_rules(&self) -> FlagRules {
        FlagRules {
            duplicate_iou: self.duplicate_iou,
        }
    }
}
