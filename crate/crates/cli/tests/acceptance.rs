//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde_json::Value;
use tower::ServiceExt;

use recital_api::{router, AppState};
use recital_core::cook::{levenshtein, normalize, run_cook, similarity, vote_classes, ConfidenceTier, CookedPage, CookedTranscript, MarkCluster};
use recital_core::etl::{run_etl, EtlReport, Page, Register};
use recital_core::geometry::{box_iou, BBox};
use recital_core::linkage::{run_link, CanonicalEntity, LinkDecision};
use recital_core::pipeline::{append_only_audit, ingest_reader};
use recital_core::provenance::{is_acyclic, stage_violations};
use recital_core::review::{self, current_versions, Resolution, ReviewFilter, ReviewStatus};
use recital_core::store::Record;
use recital_core::surrogate::{reading_order, write_surrogates};
use recital_core::synth::{generate, SynthParams, TruthTable};
use recital_core::views;
use recital_core::{Config, RecordId, Stage, Store};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Run {
    store: Store,
    config: Config,
    truth: TruthTable,
    etl: EtlReport,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn pipeline(params: SynthParams) -> Run {
    let start = Instant::now();
    let corpus = generate(&params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.txt");
    std::fs::write(&registry, &corpus.registry).unwrap();
    let config = Config {
        registry: Some(registry),
        surrogate_dir: dir.path().join("surrogates"),
        ..Config::default()
    };
    let mut store = Store::in_memory();
    ingest_reader(&mut store, &config, corpus.export.as_slice()).unwrap();
    let etl = run_etl(&mut store, &config).unwrap();
    run_cook(&mut store, &config).unwrap();
    run_link(&mut store, &config).unwrap();
    Run {
        store,
        config,
        truth: corpus.truth,
        etl,
        elapsed: start.elapsed(),
        _dir: dir,
    }
}

fn noise_params() -> SynthParams {
    SynthParams {
        seed: 42,
        n_volunteers: 5,
        char_noise: 0.03,
        duplicate_rate: 0.03,
        jitter: 0.01,
        n_registers: 10,
        pages_per_register: 100,
        marks_per_page: 5,
        ..SynthParams::default()
    }
}

fn noise_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| pipeline(noise_params()))
}

/// Independent overlap ratio used to pair clusters with true marks.
fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let h = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = w.max(0.0) * h.max(0.0);
    inter / (a.w * a.h + b.w * b.h - inter)
}

struct ClusterTruth {
    tier: Option<ConfidenceTier>,
    text: Option<String>,
    truth: String,
}

/// Each cluster with its current transcript and the true text of the
/// best-overlapping true mark on its page.
fn clusters_vs_truth(run: &Run) -> Vec<ClusterTruth> {
    let store = &run.store;
    let pages: HashMap<RecordId, String> = store
        .records::<Page>()
        .unwrap()
        .into_iter()
        .map(|(id, p)| (id, p.source_subject))
        .collect();
    let truth_pages: HashMap<&str, _> = run.truth.pages.iter().map(|p| (p.subject.as_str(), p)).collect();
    let transcripts: HashMap<RecordId, CookedTranscript> = current_versions::<CookedTranscript>(store)
        .unwrap()
        .into_iter()
        .map(|(_, t)| (t.cluster_id, t))
        .collect();
    store
        .records::<MarkCluster>()
        .unwrap()
        .into_iter()
        .map(|(id, cluster)| {
            let page = truth_pages[pages[&cluster.page_id].as_str()];
            let best = page
                .marks
                .iter()
                .max_by(|a, b| overlap(&a.bbox, &cluster.consensus_box).total_cmp(&overlap(&b.bbox, &cluster.consensus_box)))
                .unwrap();
            let t = transcripts.get(&id);
            ClusterTruth {
                tier: t.map(|t| t.tier),
                text: t.map(|t| t.consensus_text.clone()),
                truth: best.text.clone(),
            }
        })
        .collect()
}

type ShowKey = (u32, String, Vec<u32>, BTreeSet<String>, BTreeSet<(String, String)>);

fn domain_shows(store: &Store) -> BTreeSet<ShowKey> {
    let registers: HashMap<RecordId, u32> = store
        .records::<Register>()
        .unwrap()
        .into_iter()
        .map(|(id, r)| (id, r.register_index.unwrap()))
        .collect();
    let seqs: HashMap<RecordId, u32> = store.records::<Page>().unwrap().into_iter().map(|(id, p)| (id, p.seq)).collect();
    let names: HashMap<RecordId, String> = store
        .records::<CanonicalEntity>()
        .unwrap()
        .into_iter()
        .map(|(id, e)| (id, e.canonical_name))
        .collect();
    views::shows(store)
        .unwrap()
        .into_iter()
        .map(|s| {
            let show = s.record;
            let mut pages: Vec<u32> = show.register_page_ids.iter().map(|p| seqs[p]).collect();
            pages.sort();
            (
                registers[&show.register_id],
                show.date.unwrap_or_default(),
                pages,
                show.play_ids.iter().map(|p| names[p].clone()).collect(),
                show.participant_ids.iter().map(|p| (names[&p.person_id].clone(), p.role.clone())).collect(),
            )
        })
        .collect()
}

fn truth_shows(truth: &TruthTable) -> BTreeSet<ShowKey> {
    truth
        .shows
        .iter()
        .map(|s| {
            let mut pages = s.page_seqs.clone();
            pages.sort();
            (s.register, s.date.to_string(), pages, s.plays.clone(), s.participants.clone())
        })
        .collect()
}

fn zero_noise_fixpoint() -> Verdict {
    let run = pipeline(SynthParams {
        n_volunteers: 3,
        n_registers: 2,
        pages_per_register: 20,
        marks_per_page: 5,
        ..SynthParams::default()
    });
    let clusters = clusters_vs_truth(&run);
    let fully = clusters.iter().filter(|c| c.tier == Some(ConfidenceTier::FullyConfident)).count();
    let exact = clusters.iter().filter(|c| c.text.as_deref() == Some(c.truth.as_str())).count();
    let shows = domain_shows(&run.store);
    let expected = truth_shows(&run.truth);
    let n = run.truth.pages.len() * 5;
    let ok = clusters.len() == n && fully == n && exact == n && shows == expected && run.elapsed < Duration::from_secs(10);
    check(
        ok,
        format!(
            "{} clusters (expected {n}), {fully} fully confident, {exact} equal truth, {} of {} truth shows matched exactly (sets equal: {}), {:.2?}",
            clusters.len(),
            shows.intersection(&expected).count(),
            expected.len(),
            shows == expected,
            run.elapsed
        ),
    )
}

fn noise_recovery() -> Verdict {
    let run = noise_run();
    let clusters = clusters_vs_truth(run);
    let fully: Vec<&ClusterTruth> = clusters.iter().filter(|c| c.tier == Some(ConfidenceTier::FullyConfident)).collect();
    let correct = fully.iter().filter(|c| c.text.as_deref() == Some(c.truth.as_str())).count();
    let fully_share = fully.len() as f64 / clusters.len() as f64;
    let correct_share = correct as f64 / fully.len().max(1) as f64;
    let excluded: BTreeSet<&str> = run.etl.excluded.iter().map(|e| e.external_id.as_str()).collect();
    let injected = run.truth.duplicate_ids();
    let ok = fully_share >= 0.90
        && correct_share >= 0.98
        && run.etl.excluded.len() as u64 == run.truth.duplicates
        && excluded == injected
        && run.elapsed < Duration::from_secs(60);
    check(
        ok,
        format!(
            "{:.2}% of {} clusters fully confident, {:.2}% of those equal truth, excluded {} vs injected {} (same ids: {}), {:.2?}",
            100.0 * fully_share,
            clusters.len(),
            100.0 * correct_share,
            run.etl.excluded.len(),
            run.truth.duplicates,
            excluded == injected,
            run.elapsed
        ),
    )
}

fn random_resolution(store: &Store, rng: &mut ChaCha8Rng, target: RecordId) -> Resolution {
    let roll = rng.next_u32() % 3;
    match (target.kind, roll) {
        (_, 0) => Resolution::accept(),
        (_, 1) => Resolution::reject(),
        (CookedTranscript::KIND, _) => Resolution::edit_text(&format!("texte {}", rng.next_u32() % 1000)),
        (CookedPage::KIND, _) => Resolution::edit_category("receipts"),
        (_, _) => {
            let decision: LinkDecision = store.get_as(&target).unwrap();
            let pool: Vec<RecordId> = views::entities(store, decision.entity_kind)
                .unwrap()
                .into_iter()
                .map(|e| e.id)
                .collect();
            match pool.is_empty() {
                true => Resolution::accept(),
                false => Resolution::choose(pool[rng.next_u32() as usize % pool.len()]),
            }
        }
    }
}

fn append_only_audit_holds() -> Verdict {
    let corpus = generate(&SynthParams {
        seed: 42,
        n_volunteers: 3,
        char_noise: 0.12,
        duplicate_rate: 0.03,
        jitter: 0.01,
        verify_rate: 0.2,
        n_registers: 3,
        pages_per_register: 10,
        marks_per_page: 5,
        ..SynthParams::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let registry = dir.path().join("registry.txt");
    std::fs::write(&registry, &corpus.registry).unwrap();
    let config = Config {
        registry: Some(registry),
        surrogate_dir: dir.path().join("surrogates"),
        ..Config::default()
    };
    let mut store = Store::in_memory();
    ingest_reader(&mut store, &config, corpus.export.as_slice()).unwrap();
    run_etl(&mut store, &config).unwrap();
    let digests = |s: &Store| (s.stage_digest(Stage::Cs), s.stage_digest(Stage::Raw));
    let reference = digests(&store);
    let mut log = Vec::new();

    run_cook(&mut store, &config).unwrap();
    log.push(("cook", digests(&store) == reference));
    run_link(&mut store, &config).unwrap();
    log.push(("link", digests(&store) == reference));
    let pages: Vec<RecordId> = store.iter_kind(Stage::Raw, Page::KIND).map(|(id, _)| id).collect();
    write_surrogates(&mut store, &config, &pages).unwrap();
    log.push(("surrogates", digests(&store) == reference));

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut resolved = 0;
    let mut attempts = 0;
    while resolved < 50 && attempts < 1000 {
        attempts += 1;
        let pending = review::list(
            &store,
            &ReviewFilter {
                status: Some(ReviewStatus::Pending),
                ..ReviewFilter::default()
            },
        );
        if pending.is_empty() {
            break;
        }
        let item = &pending[rng.next_u32() as usize % pending.len()];
        let resolution = random_resolution(&store, &mut rng, item.target);
        if review::resolve(&mut store, &config, item.id, &resolution, &format!("curator{}", rng.next_u32() % 4)).is_ok() {
            resolved += 1;
        }
    }
    log.push(("50 resolutions", resolved == 50 && digests(&store) == reference));
    let (audit_ok, audit_detail) = append_only_audit(&store);
    let ok = log.iter().all(|(_, same)| *same) && audit_ok;
    let steps: Vec<String> = log.iter().map(|(step, same)| format!("{step}={}", if *same { "same" } else { "CHANGED" })).collect();
    check(ok, format!("{resolved} resolutions; {}; audit: {audit_detail}", steps.join(", ")))
}

fn provenance_total_and_acyclic() -> Verdict {
    let store = &noise_run().store;
    let mut sources: HashMap<RecordId, Vec<RecordId>> = HashMap::new();
    for e in store.edges() {
        sources.entry(e.derived).or_default().push(e.source);
    }
    // Breadth-first walk from each record down to its leaves.
    let mut records = 0;
    let mut grounded = 0;
    let mut external = 0;
    for stage in [Stage::Raw, Stage::Cooked, Stage::Domain] {
        for kind in stage.kinds() {
            for (id, value) in store.iter_kind(stage, kind) {
                records += 1;
                if *kind == CanonicalEntity::KIND && value["external"] == true && !sources.contains_key(&id) {
                    external += 1;
                    continue;
                }
                let mut seen = BTreeSet::from([id]);
                let mut queue = VecDeque::from([id]);
                let mut leaves_ok = true;
                while let Some(node) = queue.pop_front() {
                    match sources.get(&node) {
                        Some(next) => {
                            for s in next {
                                if seen.insert(*s) {
                                    queue.push_back(*s);
                                }
                            }
                        }
                        None => leaves_ok &= node.stage == Stage::Cs,
                    }
                }
                if leaves_ok && seen.len() > 1 {
                    grounded += 1;
                }
            }
        }
    }
    let acyclic = is_acyclic(store);
    let violations = stage_violations(store).len();
    check(
        grounded + external == records && acyclic && violations == 0,
        format!(
            "{grounded} of {} derived records end in stage 0 ({external} registry entities are external leaves), acyclic={acyclic}, {violations} stage-rule violations over {} edges",
            records - external,
            store.edges().len()
        ),
    )
}

fn tier_partition_and_determinism() -> Verdict {
    let params = SynthParams {
        seed: 9,
        n_volunteers: 4,
        char_noise: 0.08,
        duplicate_rate: 0.05,
        jitter: 0.01,
        verify_rate: 0.3,
        skip: 0.05,
        n_registers: 3,
        pages_per_register: 10,
        marks_per_page: 5,
        ..SynthParams::default()
    };
    let corpus = generate(&params).unwrap();
    let text = String::from_utf8(corpus.export.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let slots: Vec<usize> = (0..lines.len()).filter(|i| lines[*i].contains("\"type\":\"classification\"")).collect();
    let mut moved: Vec<&str> = slots.iter().map(|i| lines[*i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in (1..moved.len()).rev() {
        moved.swap(i, rng.next_u64() as usize % (i + 1));
    }
    let mut shuffled = lines.clone();
    for (slot, line) in slots.iter().zip(moved) {
        shuffled[*slot] = line;
    }
    let shuffled = shuffled.join("\n") + "\n";
    assert_ne!(shuffled, text);

    let cook = |export: &[u8]| {
        let config = Config::default();
        let mut store = Store::in_memory();
        ingest_reader(&mut store, &config, export).unwrap();
        run_etl(&mut store, &config).unwrap();
        run_cook(&mut store, &config).unwrap();
        store
    };
    let a = cook(&corpus.export);
    let b = cook(shuffled.as_bytes());
    let same_cooked = a.stage_digest(Stage::Cooked) == b.stage_digest(Stage::Cooked);
    let same_raw = a.stage_digest(Stage::Raw) == b.stage_digest(Stage::Raw);

    // Every cooked record carries exactly one tier; the three tier sets
    // are disjoint and cover all of them.
    let mut by_tier: BTreeMap<ConfidenceTier, BTreeSet<RecordId>> = BTreeMap::new();
    for (id, t) in a.records::<CookedTranscript>().unwrap() {
        by_tier.entry(t.tier).or_default().insert(id);
    }
    for (id, p) in a.records::<CookedPage>().unwrap() {
        by_tier.entry(p.tier).or_default().insert(id);
    }
    let union: BTreeSet<&RecordId> = by_tier.values().flatten().collect();
    let summed: usize = by_tier.values().map(BTreeSet::len).sum();
    let cooked = (a.count(Stage::Cooked, CookedTranscript::KIND) + a.count(Stage::Cooked, CookedPage::KIND)) as usize;
    let counts: Vec<String> = by_tier.iter().map(|(t, s)| format!("{}={}", t.name(), s.len())).collect();
    check(
        same_cooked && union.len() == cooked && summed == cooked && by_tier.len() > 1,
        format!(
            "{} over {cooked} cooked records; shuffled {} classifications: cooked digest {}, raw digest {}",
            counts.join(" "),
            slots.len(),
            if same_cooked { "unchanged" } else { "CHANGED" },
            if same_raw { "unchanged" } else { "CHANGED" },
        ),
    )
}

const CASES: u32 = 10_000;

fn metric_properties() -> Verdict {
    let text = "[a-zA-Zéèà' .-]{0,16}";
    let unit_box = (0.0..0.9f64, 0.0..0.9f64, 0.001..0.1f64, 0.001..0.1f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h));
    let mut results = Vec::new();
    let mut run = |name: &str, outcome: Result<(), String>| results.push((name.to_string(), outcome));
    let runner = || {
        TestRunner::new(PropConfig {
            failure_persistence: None,
            ..PropConfig::with_cases(CASES)
        })
    };

    run(
        "similarity",
        runner()
            .run(&(text, text), |(a, b)| {
                let s = similarity(&a, &b);
                prop_assert_eq!(s, similarity(&b, &a));
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert_eq!(similarity(&a, &a), 1.0);
                prop_assert_eq!(s == 1.0, a == b);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    run(
        "box_iou",
        runner()
            .run(&(unit_box.clone(), unit_box.clone()), |(a, b)| {
                let v = box_iou(&a, &b);
                prop_assert_eq!(v, box_iou(&b, &a));
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    run(
        "normalize",
        runner()
            .run(&"[ a-zA-Z\u{300}-\u{302}éÉſ&.,;'-]{0,24}", |s| {
                let once = normalize(&s);
                prop_assert_eq!(normalize(&once), once);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    let items = proptest::collection::vec(unit_box, 0..12);
    run(
        "reading_order",
        runner()
            .run(&(items, any::<u64>(), any::<bool>()), |(boxes, seed, split)| {
                let keyed: Vec<(usize, BBox)> = boxes.iter().copied().enumerate().collect();
                let order = reading_order(&keyed, split);
                let mut sorted = order.clone();
                sorted.sort();
                prop_assert_eq!(sorted, (0..boxes.len()).collect::<Vec<_>>());
                let mut shuffled = keyed.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..shuffled.len()).rev() {
                    shuffled.swap(i, rng.next_u64() as usize % (i + 1));
                }
                prop_assert_eq!(reading_order(&shuffled, split), order);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );
    let failed: Vec<String> = results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    check(
        failed.is_empty(),
        match failed.is_empty() {
            true => format!("{} properties x {CASES} cases", results.len()),
            false => failed.join("; "),
        },
    )
}

fn naive_levenshtein(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((ha, ta)), Some((hb, tb))) => (naive_levenshtein(ta, tb) + usize::from(ha != hb))
            .min(naive_levenshtein(ta, b) + 1)
            .min(naive_levenshtein(a, tb) + 1),
    }
}

/// Connected components of the graph whose edges join pairs at or above
/// `theta`, computed from the full matrix by repeated relabelling.
fn brute_force_classes(texts: &[String], theta: (u64, u64)) -> Vec<Vec<usize>> {
    let n = texts.len();
    let chars: Vec<Vec<char>> = texts.iter().map(|t| t.chars().collect()).collect();
    let linked: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let longest = chars[i].len().max(chars[j].len()) as u64;
                    let d = naive_levenshtein(&chars[i], &chars[j]) as u64;
                    // (longest - d) / longest >= num/den, cross-multiplied.
                    longest == 0 || (longest - d) * theta.1 >= theta.0 * longest
                })
                .collect()
        })
        .collect();
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if linked[i][j] && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in label.into_iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups.into_values().collect()
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let base = ["Arlequin", "Colombine", "Pantalon", "Scapin"];
    let mut class_mismatch = Vec::new();
    for case in 0..200 {
        let n = 1 + rng.next_u32() as usize % 6;
        let texts: Vec<String> = (0..n)
            .map(|_| {
                let mut t: Vec<char> = base[rng.next_u32() as usize % base.len()].chars().collect();
                for _ in 0..rng.next_u32() % 3 {
                    let at = rng.next_u32() as usize % t.len();
                    t[at] = (b'a' + (rng.next_u32() % 26) as u8) as char;
                }
                t.into_iter().collect()
            })
            .collect();
        let theta = [(9u64, 10u64), (3, 4), (1, 2)][case % 3];
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let got = vote_classes(&refs, num_rational::Ratio::new(theta.0, theta.1));
        if got != brute_force_classes(&texts, theta) {
            class_mismatch.push(case);
        }
    }

    let alphabet = ['a', 'b', 'c', 'é'];
    let mut lev_cases = 0;
    let mut lev_mismatch = 0;
    for _ in 0..500 {
        let mut word = || -> String {
            let len = rng.next_u32() as usize % 9;
            (0..len).map(|_| alphabet[rng.next_u32() as usize % alphabet.len()]).collect()
        };
        let (a, b) = (word(), word());
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        lev_cases += 1;
        if levenshtein(&a, &b) != naive_levenshtein(&ca, &cb) {
            lev_mismatch += 1;
        }
    }
    check(
        class_mismatch.is_empty() && lev_mismatch == 0,
        format!(
            "consensus classes: {} mismatches in 200 cases; levenshtein: {lev_mismatch} mismatches in {lev_cases} pairs",
            class_mismatch.len()
        ),
    )
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().build().unwrap()
}

async fn fetch(state: &recital_api::Shared, uri: &str) -> Value {
    let resp = router(Arc::clone(state))
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK, "{uri}");
    serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap()
}

fn progress_arithmetic() -> Verdict {
    // 63 registers declaring 27,544 pages; every other page classified.
    let (registers, pages) = (63u32, 27_544u32);
    let mut lines = Vec::new();
    let mut page_no = 0;
    for r in 1..=registers {
        let declared = pages / registers + u32::from(r <= pages % registers);
        lines.push(format!(
            r#"{{"type":"subject","id":"r{r}","kind":"root_register","parent":null,"meta":{{"register":{r},"pages":{declared}}},"created_at":"2019-01-01T00:00:00Z"}}"#
        ));
        for seq in 1..=declared {
            page_no += 1;
            lines.push(format!(
                r#"{{"type":"subject","id":"p{page_no}","kind":"page","parent":"r{r}","meta":{{"seq":{seq}}},"created_at":"2019-01-01T00:00:00Z"}}"#
            ));
            if page_no % 2 == 0 {
                lines.push(format!(
                    r#"{{"type":"classification","id":"k{page_no}","subject":"p{page_no}","volunteer":"v{}","task":"classify","payload":{{"category":"receipts"}},"created_at":"2019-01-02T00:00:00Z"}}"#,
                    page_no % 7
                ));
            }
        }
    }
    let config = Config::default();
    let mut store = Store::in_memory();
    ingest_reader(&mut store, &config, lines.join("\n").as_bytes()).unwrap();
    let state = AppState::new(store, config);
    let report = runtime().block_on(fetch(&state, "/api/progress"));
    let classify = &report["tasks"]["classify"];
    check(
        page_no == pages && classify["total"] == pages && classify["completeness"] == "1/2" && classify["completeness_value"] == 0.5,
        format!(
            "classify done {} of {} ({} = {})",
            classify["done"], classify["total"], classify["completeness"], classify["completeness_value"]
        ),
    )
}

fn api_coverage() -> Verdict {
    let run = noise_run();
    let config = run.config.clone();
    // Rebuild a store holding the same lines so the shared run stays untouched.
    let mut dump = Vec::new();
    run.store.dump(&mut dump).unwrap();
    let store = Store::restore(dump.as_slice(), None).unwrap();
    let expected: Vec<(Stage, &str, Vec<String>)> = Stage::ALL
        .iter()
        .flat_map(|s| s.kinds().iter().map(move |k| (*s, *k)))
        .map(|(s, k)| (s, k, store.iter_kind(s, k).map(|(id, _)| id.to_string()).collect()))
        .collect();
    let state = AppState::new(store, config);
    let mut problems = Vec::new();
    let mut kinds_seen = 0;
    let mut records_seen = 0;
    runtime().block_on(async {
        for (stage, kind, ids) in &expected {
            let mut got = Vec::new();
            loop {
                let page = fetch(&state, &format!("/api/records/{stage}/{kind}?offset={}&limit=1000", got.len())).await;
                let items = page["items"].as_array().unwrap();
                got.extend(items.iter().map(|i| i["id"].as_str().unwrap().to_string()));
                if items.is_empty() || got.len() >= page["total"].as_u64().unwrap() as usize {
                    break;
                }
            }
            if &got != ids {
                problems.push(format!("{stage}:{kind} pagination union differs from scan"));
            }
            if let Some(first) = ids.first() {
                let serial = first.rsplit(':').next().unwrap();
                let one = fetch(&state, &format!("/api/records/{stage}/{kind}/{serial}?exact=true")).await;
                if one["id"] != first.as_str() {
                    problems.push(format!("{first} not retrievable"));
                }
                kinds_seen += 1;
            }
            records_seen += got.len();
        }
    });
    let stored_kinds = expected.iter().filter(|(_, _, ids)| !ids.is_empty()).count();
    let missing: Vec<String> = expected
        .iter()
        .filter(|(_, _, ids)| ids.is_empty())
        .map(|(s, k, _)| format!("{s}:{k}"))
        .collect();
    check(
        problems.is_empty() && kinds_seen == stored_kinds,
        format!(
            "{kinds_seen} stored kinds, {records_seen} records paged at limit 1000 with no gaps or duplicates{}{}",
            if missing.is_empty() { String::new() } else { format!("; kinds without records: {}", missing.join(", ")) },
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("zero-noise fixpoint", zero_noise_fixpoint),
        ("noise recovery", noise_recovery),
        ("append-only audit", append_only_audit_holds),
        ("provenance totality and acyclicity", provenance_total_and_acyclic),
        ("tier partition and determinism", tier_partition_and_determinism),
        ("metric properties", metric_properties),
        ("oracle equivalence", oracle_equivalence),
        ("progress arithmetic", progress_arithmetic),
        ("api coverage and pagination", api_coverage),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, criterion) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|panic| {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {message}"))
        });
        let took = start.elapsed();
        match verdict {
            Ok(detail) => println!("PASS  {name}: {detail} [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{took:.1?}]");
            }
        }
    }
    match failed {
        0 => ExitCode::SUCCESS,
        _ => ExitCode::FAILURE,
    }
}
