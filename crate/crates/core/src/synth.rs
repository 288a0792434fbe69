//! Seeded synthetic corpora: ground-truth registers, noisy simulated
//! volunteers, and the truth table the acceptance runs compare against.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64`; every draw is
//! taken from `next_u64` by the helpers below, so the byte stream depends
//! only on the algorithm and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Duration, NaiveDate};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::ingest::{
    export_classification_line, export_subject_line, Classification, Payload, Subject, SubjectKind, SubjectMeta, Task,
    Verdict,
};
use crate::linkage::{format_french_date, Amount};

pub const PLAYS: &[&str] = &[
    "Arlequin sauvage",
    "La Surprise de l'amour",
    "Le Jeu de l'amour et du hasard",
    "La Double inconstance",
    "Arlequin poli par l'amour",
    "Les Fausses confidences",
    "Le Prince travesti",
    "La Mère confidente",
    "L'Heureux stratagème",
    "Timon le misanthrope",
    "La Fausse suivante",
    "Le Triomphe de Plutus",
    "L'Île des esclaves",
    "Le Dénouement imprévu",
    "Les Amants réunis",
    "La Vie est un songe",
];

pub const PERSONS: &[&str] = &[
    "Thomassin Vicentini",
    "Silvia Balletti",
    "Luigi Riccoboni",
    "Flaminia Riccoboni",
    "Pierre Biancolelli",
    "Antoine Romagnesi",
    "Giovanna Benozzi",
    "Carlo Bertinazzi",
    "Francesco Balletti",
    "Marie-Thérèse Lalande",
    "Antonio Sticotti",
    "Jean-Baptiste Deshayes",
];

pub const CATEGORIES: &[&str] = &["recettes", "depenses", "mixte"];

const TAGS: [&str; 5] = ["date", "play", "actor", "receipt", "play"];
const BASE_MILLIS: i64 = 1_546_300_800_000;
const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_registers: u32,
    pub pages_per_register: u32,
    pub marks_per_page: u32,
    pub n_volunteers: u32,
    /// Per-character substitution probability.
    pub char_noise: f64,
    /// Per-character insertion and deletion probabilities.
    pub insert_rate: f64,
    pub delete_rate: f64,
    /// Probability that a volunteer skips any one task.
    pub skip: f64,
    /// Box coordinates move by up to ±jitter, clipped to the page.
    pub jitter: f64,
    /// Probability that a run is resubmitted.
    pub duplicate_rate: f64,
    /// Probability that a volunteer verifies another volunteer's transcript.
    pub verify_rate: f64,
    /// Probability that a category vote is wrong.
    pub category_noise: f64,
    pub first_year: i32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 1,
            n_registers: 1,
            pages_per_register: 1,
            marks_per_page: 1,
            n_volunteers: 3,
            char_noise: 0.0,
            insert_rate: 0.0,
            delete_rate: 0.0,
            skip: 0.0,
            jitter: 0.0,
            duplicate_rate: 0.0,
            verify_rate: 0.0,
            category_noise: 0.0,
            first_year: 1744,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let probabilities = [
            ("char_noise", self.char_noise),
            ("insert_rate", self.insert_rate),
            ("delete_rate", self.delete_rate),
            ("skip", self.skip),
            ("duplicate_rate", self.duplicate_rate),
            ("verify_rate", self.verify_rate),
            ("category_noise", self.category_noise),
        ];
        for (name, p) in probabilities {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidArgument(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if self.n_volunteers == 0 {
            return Err(Error::InvalidArgument("at least one volunteer is needed".into()));
        }
        if self.marks_per_page > 20 {
            return Err(Error::InvalidArgument("at most 20 marks per page".into()));
        }
        Ok(())
    }

    /// Sets one parameter from `name=value` text.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let bad = || Error::InvalidArgument(format!("`{value}` is not valid for {name}"));
        let float = || value.parse::<f64>().map_err(|_| bad());
        let int = || value.parse::<u32>().map_err(|_| bad());
        match name {
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "registers" | "n_registers" => self.n_registers = int()?,
            "pages" | "pages_per_register" => self.pages_per_register = int()?,
            "marks" | "marks_per_page" => self.marks_per_page = int()?,
            "volunteers" | "n_volunteers" => self.n_volunteers = int()?,
            "p" | "char_noise" => self.char_noise = float()?,
            "insert_rate" => self.insert_rate = float()?,
            "delete_rate" => self.delete_rate = float()?,
            "q" | "skip" => self.skip = float()?,
            "sigma" | "jitter" => self.jitter = float()?,
            "d" | "duplicate_rate" => self.duplicate_rate = float()?,
            "verify_rate" => self.verify_rate = float()?,
            "category_noise" => self.category_noise = float()?,
            "first_year" => self.first_year = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::InvalidArgument(format!("unknown synth parameter `{name}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthMark {
    pub tag: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthPage {
    pub subject: String,
    pub register: u32,
    pub seq: u32,
    pub category: String,
    pub date: NaiveDate,
    pub marks: Vec<TruthMark>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRun {
    pub volunteer: String,
    pub task: Task,
    pub page: String,
    pub mark_index: Option<usize>,
    /// Set on resubmissions: the run this one repeats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TruthShow {
    pub register: u32,
    pub date: NaiveDate,
    pub page_seqs: Vec<u32>,
    pub plays: BTreeSet<String>,
    /// (person, role)
    pub participants: BTreeSet<(String, String)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub params: Option<SynthParams>,
    pub pages: Vec<TruthPage>,
    pub runs: BTreeMap<String, TruthRun>,
    pub volunteers: BTreeMap<String, BTreeMap<Task, u64>>,
    pub shows: Vec<TruthShow>,
    pub subjects: u64,
    pub classifications: u64,
    pub duplicates: u64,
}

impl TruthTable {
    pub fn duplicate_ids(&self) -> BTreeSet<&str> {
        self.runs
            .iter()
            .filter(|(_, r)| r.duplicate_of.is_some())
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub export: Vec<u8>,
    pub truth: TruthTable,
    /// Registry bootstrap file listing every play and person.
    pub registry: String,
}

struct Rng(ChaCha8Rng);

impl Rng {
    /// Uniform in [0,1) from the top 53 bits.
    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.unit() < p
    }

    /// Uniform in [0, n) by rejection, so every value is equally likely.
    fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.0.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    fn between(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.below(hi - lo + 1)
    }

    fn pick<'a>(&mut self, items: &'a [&'a str]) -> &'a str {
        items[self.below(items.len() as u64) as usize]
    }

    fn symmetric(&mut self, radius: f64) -> f64 {
        if radius == 0.0 {
            return 0.0;
        }
        (self.unit() * 2.0 - 1.0) * radius
    }
}

fn round4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

fn tag_of(index: usize) -> &'static str {
    match index {
        i if i < TAGS.len() => TAGS[i],
        i => ["play", "actor", "receipt"][(i - TAGS.len()) % 3],
    }
}

/// True box of mark `index` out of `n`: one row each, never overlapping.
fn true_box(index: usize, n: usize) -> BBox {
    let slot = 0.9 / n as f64;
    let x = 0.08 + 0.04 * (index % 3) as f64;
    BBox::new(round4(x), round4(0.05 + slot * index as f64), 0.5, round4(slot * 0.45))
}

fn jittered(rng: &mut Rng, b: &BBox, sigma: f64) -> BBox {
    if sigma == 0.0 {
        return *b;
    }
    let x = round4((b.x + rng.symmetric(sigma)).clamp(0.0, 0.99));
    let y = round4((b.y + rng.symmetric(sigma)).clamp(0.0, 0.99));
    let w = round4((b.w + rng.symmetric(sigma)).clamp(0.001, 1.0 - x));
    let h = round4((b.h + rng.symmetric(sigma)).clamp(0.001, 1.0 - y));
    BBox::new(x, y, w, h)
}

fn noisy(rng: &mut Rng, text: &str, params: &SynthParams) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if rng.chance(params.insert_rate) {
            out.push(ALPHABET[rng.below(26) as usize] as char);
        }
        if rng.chance(params.delete_rate) {
            continue;
        }
        if c != ' ' && rng.chance(params.char_noise) {
            let lower = c.to_ascii_lowercase() as u32;
            loop {
                let replacement = ALPHABET[rng.below(26) as usize] as char;
                if replacement as u32 != lower {
                    out.push(replacement);
                    break;
                }
            }
        } else {
            out.push(c);
        }
    }
    if out.trim().is_empty() {
        text.to_string()
    } else {
        out
    }
}

struct Emitter {
    lines: Vec<String>,
    clock: i64,
    serial: u64,
    truth: TruthTable,
}

impl Emitter {
    fn tick(&mut self) -> i64 {
        self.clock += 1_000;
        self.clock
    }

    fn subject(&mut self, id: String, kind: SubjectKind, parent: Option<String>, meta: SubjectMeta) {
        let created_at = self.tick();
        self.lines.push(export_subject_line(&Subject {
            external_id: id,
            kind,
            parent,
            meta,
            created_at,
        }));
        self.truth.subjects += 1;
    }

    /// Emits a run and, with the duplicate rate, an identical resubmission.
    fn run(&mut self, rng: &mut Rng, params: &SynthParams, subject: &str, volunteer: &str, payload: Payload, truth: TruthRun) -> String {
        self.serial += 1;
        let id = format!("c{}", self.serial);
        let c = Classification {
            external_id: id.clone(),
            subject: subject.to_string(),
            volunteer: volunteer.to_string(),
            task: payload.task(),
            payload,
            created_at: self.tick(),
        };
        self.lines.push(export_classification_line(&c));
        self.count(volunteer, c.task);
        self.truth.runs.insert(id.clone(), truth.clone());
        if rng.chance(params.duplicate_rate) {
            self.serial += 1;
            let dup_id = format!("c{}", self.serial);
            let dup = Classification {
                external_id: dup_id.clone(),
                created_at: self.tick(),
                ..c
            };
            self.lines.push(export_classification_line(&dup));
            self.count(volunteer, dup.task);
            self.truth.duplicates += 1;
            self.truth.runs.insert(
                dup_id,
                TruthRun {
                    duplicate_of: Some(id.clone()),
                    ..truth
                },
            );
        }
        id
    }

    fn count(&mut self, volunteer: &str, task: Task) {
        *self
            .truth
            .volunteers
            .entry(volunteer.to_string())
            .or_default()
            .entry(task)
            .or_default() += 1;
        self.truth.classifications += 1;
    }
}

fn receipt_text(rng: &mut Rng) -> String {
    let amount = Amount {
        livres: rng.between(100, 2999),
        sols: rng.below(20),
        deniers: rng.below(12),
    };
    format!("Recette {amount}")
}

/// Generates the export, the truth table, and the registry file.
pub fn generate(params: &SynthParams) -> Result<Corpus> {
    params.validate()?;
    let mut rng = Rng(ChaCha8Rng::seed_from_u64(params.seed));
    let volunteers: Vec<String> = (1..=params.n_volunteers).map(|v| format!("v{v}")).collect();
    let mut out = Emitter {
        lines: Vec::new(),
        clock: BASE_MILLIS,
        serial: 0,
        truth: TruthTable {
            params: Some(params.clone()),
            ..Default::default()
        },
    };
    let n_marks = params.marks_per_page as usize;
    let mut region_serial = 0u64;

    for r in 1..=params.n_registers {
        let year = params.first_year + r as i32 - 1;
        let register_id = format!("r{r}");
        out.subject(
            register_id.clone(),
            SubjectKind::RootRegister,
            None,
            SubjectMeta {
                register: Some(r),
                label: Some(format!("Registre {year}")),
                pages: Some(params.pages_per_register),
                years: Some((year, year)),
                ..Default::default()
            },
        );
        let mut date = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year");
        for seq in 1..=params.pages_per_register {
            // Consecutive pages sometimes record the same day.
            if seq > 1 && !rng.chance(0.25) {
                date += Duration::days(rng.between(1, 2) as i64);
            }
            let page_id = format!("r{r}p{seq}");
            let mut meta = SubjectMeta {
                register: Some(r),
                seq: Some(seq),
                image: Some(format!("img/r{r}/p{seq}.jpg")),
                ..Default::default()
            };
            meta.extra.insert("width".into(), 2400.into());
            meta.extra.insert("height".into(), 3200.into());
            out.subject(page_id.clone(), SubjectKind::Page, Some(register_id.clone()), meta);

            let category = rng.pick(CATEGORIES).to_string();
            let mut plays_used: BTreeSet<&str> = BTreeSet::new();
            let marks: Vec<TruthMark> = (0..n_marks)
                .map(|i| {
                    let tag = tag_of(i);
                    let text = match tag {
                        "date" => format_french_date(date),
                        "play" => loop {
                            let play = rng.pick(PLAYS);
                            if plays_used.insert(play) || plays_used.len() >= PLAYS.len() {
                                break play.to_string();
                            }
                        },
                        "actor" => rng.pick(PERSONS).to_string(),
                        _ => receipt_text(&mut rng),
                    };
                    TruthMark {
                        tag: tag.to_string(),
                        bbox: true_box(i, n_marks),
                        text,
                    }
                })
                .collect();

            let mut transcripts: Vec<(String, String, String, usize, String)> = Vec::new();
            for volunteer in &volunteers {
                if !rng.chance(params.skip) {
                    let voted = if rng.chance(params.category_noise) {
                        CATEGORIES.iter().find(|c| **c != category).copied().unwrap_or("autre").to_string()
                    } else {
                        category.clone()
                    };
                    out.run(
                        &mut rng,
                        params,
                        &page_id,
                        volunteer,
                        Payload::Classify { category: voted },
                        TruthRun {
                            volunteer: volunteer.clone(),
                            task: Task::Classify,
                            page: page_id.clone(),
                            mark_index: None,
                            duplicate_of: None,
                        },
                    );
                }
                for (i, mark) in marks.iter().enumerate() {
                    if rng.chance(params.skip) {
                        continue;
                    }
                    let truth = TruthRun {
                        volunteer: volunteer.clone(),
                        task: Task::Mark,
                        page: page_id.clone(),
                        mark_index: Some(i),
                        duplicate_of: None,
                    };
                    let bbox = jittered(&mut rng, &mark.bbox, params.jitter);
                    let payload = Payload::Mark {
                        bbox,
                        tag: mark.tag.clone(),
                    };
                    let mark_run = out.run(&mut rng, params, &page_id, volunteer, payload, truth);
                    region_serial += 1;
                    let region = format!("mr{region_serial}");
                    out.subject(
                        region.clone(),
                        SubjectKind::MarkRegion,
                        Some(page_id.clone()),
                        SubjectMeta {
                            mark: Some(mark_run),
                            ..Default::default()
                        },
                    );
                    if rng.chance(params.skip) {
                        continue;
                    }
                    let text = noisy(&mut rng, &mark.text, params);
                    let run = out.run(
                        &mut rng,
                        params,
                        &region,
                        volunteer,
                        Payload::Transcribe { text: text.clone() },
                        TruthRun {
                            volunteer: volunteer.clone(),
                            task: Task::Transcribe,
                            page: page_id.clone(),
                            mark_index: Some(i),
                            duplicate_of: None,
                        },
                    );
                    transcripts.push((run, region, volunteer.clone(), i, text));
                }
            }
            // Verifiers see only original runs of other volunteers.
            for (target, region, author, i, text) in &transcripts {
                for volunteer in volunteers.iter().filter(|v| *v != author) {
                    if !rng.chance(params.verify_rate) {
                        continue;
                    }
                    let verdict = if *text == marks[*i].text {
                        Verdict::Accept
                    } else {
                        Verdict::Reject
                    };
                    out.run(
                        &mut rng,
                        params,
                        region,
                        volunteer,
                        Payload::Verify {
                            target: target.clone(),
                            verdict,
                        },
                        TruthRun {
                            volunteer: volunteer.clone(),
                            task: Task::Verify,
                            page: page_id.clone(),
                            mark_index: Some(*i),
                            duplicate_of: None,
                        },
                    );
                }
            }
            out.truth.pages.push(TruthPage {
                subject: page_id,
                register: r,
                seq,
                category,
                date,
                marks,
            });
        }
    }

    out.truth.shows = truth_shows(&out.truth.pages);
    let mut export = Vec::new();
    for line in &out.lines {
        export.write_all(line.as_bytes())?;
        export.write_all(b"\n")?;
    }
    let mut registry = String::from("# kind\tcanonical_name\n");
    for play in PLAYS {
        registry.push_str(&format!("play\t{play}\n"));
    }
    for person in PERSONS {
        registry.push_str(&format!("person\t{person}\n"));
    }
    Ok(Corpus {
        export,
        truth: out.truth,
        registry,
    })
}

/// Pages grouped by (register, date), with the plays and people they name.
pub fn truth_shows(pages: &[TruthPage]) -> Vec<TruthShow> {
    let mut shows: BTreeMap<(u32, NaiveDate), TruthShow> = BTreeMap::new();
    for page in pages {
        let show = shows.entry((page.register, page.date)).or_insert_with(|| TruthShow {
            register: page.register,
            date: page.date,
            page_seqs: Vec::new(),
            plays: BTreeSet::new(),
            participants: BTreeSet::new(),
        });
        show.page_seqs.push(page.seq);
        for mark in &page.marks {
            match mark.tag.as_str() {
                "play" => {
                    show.plays.insert(mark.text.clone());
                }
                "actor" => {
                    show.participants.insert((mark.text.clone(), mark.tag.clone()));
                }
                _ => {}
            }
        }
    }
    shows.into_values().collect()
}
