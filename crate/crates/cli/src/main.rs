//! `recital`: runs the pipeline stages over a store file, checks its
//! invariants, generates synthetic corpora, and serves the REST API.
//!
//! Exit codes: 0 success, 1 failed verification, 2 bad arguments or
//! configuration, 3 unmet stage precondition, 4 store error.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use recital_core::config::ENV_CONFIG;
use recital_core::cook::run_cook;
use recital_core::etl::{run_etl, Page};
use recital_core::linkage::run_link;
use recital_core::pipeline::{ingest_file, verify};
use recital_core::progress::progress;
use recital_core::provenance::{lineage, prov_json};
use recital_core::review::{self, Resolution, ReviewFilter, ReviewReason, ReviewStatus};
use recital_core::store::{Record, StoreLock};
use recital_core::surrogate::{layout_reconstitution, write_surrogates};
use recital_core::synth::{generate, SynthParams};
use recital_core::{Config, Error, RecordId, Store};

#[derive(Parser)]
#[command(name = "recital", version, about = "Staged curation pipeline for crowdsourced transcriptions")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true, env = ENV_CONFIG)]
    config: Option<PathBuf>,
    /// Store file; overrides `store.path`.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Appends a crowdsourcing export to stage 0.
    Ingest { file: PathBuf },
    /// Maps stage 0 onto registers, pages, marks and transcripts.
    Etl,
    /// Clusters marks and computes consensus and tiers.
    Cook,
    /// Links cooked records to entities and builds shows.
    Link,
    /// Writes text, layout and vector surrogates.
    Surrogate(SurrogateArgs),
    /// Serves the REST API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Prints task completeness, tiers and volunteer activity.
    Progress {
        #[arg(long)]
        json: bool,
    },
    /// Runs the invariant suite.
    Verify {
        #[arg(long)]
        json: bool,
    },
    /// Generates a synthetic export, truth table and registry.
    Synth(SynthArgs),
    /// Prints record counts and digests per stage.
    Snapshot,
    /// Writes the store in its line encoding.
    Dump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Creates the store from a dump.
    Restore { file: PathBuf },
    /// Prints the effective configuration, or the defaults.
    Config {
        #[arg(long)]
        defaults: bool,
    },
    /// Lists or resolves review items.
    #[command(subcommand)]
    Review(ReviewCommand),
    /// Prints the derivation graph of a record.
    Lineage {
        record: String,
        /// PROV-JSON instead of the plain graph.
        #[arg(long)]
        prov: bool,
    },
}

#[derive(Args)]
struct SurrogateArgs {
    /// Page record ids.
    pages: Vec<String>,
    /// Every page in the store.
    #[arg(long, conflicts_with = "pages")]
    all: bool,
    /// Prints one page to stdout (text, layout or svg) instead of writing files.
    #[arg(long, value_name = "MODE")]
    print: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator parameters such as `seed=42 p=0.03 registers=10`.
    params: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for export.jsonl, truth.json and registry.txt.
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ReviewCommand {
    List {
        #[arg(long)]
        status: Option<String>,
        #[arg(long)]
        reason: Option<String>,
    },
    Resolve {
        item: u64,
        #[arg(long)]
        curator: String,
        #[arg(long, group = "action")]
        accept: bool,
        #[arg(long, group = "action")]
        reject: bool,
        #[arg(long, group = "action")]
        text: Option<String>,
        #[arg(long, group = "action")]
        category: Option<String>,
        #[arg(long, group = "action")]
        entity: Option<String>,
    },
}

enum Failure {
    Core(Error),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::BadRecordId(_)
        | Error::InvalidKind { .. }
        | Error::UnknownId(_)
        | Error::NotFound { .. } => 2,
        Error::Precondition(_) => 3,
        _ => 4,
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for pair in &cli.set {
        config.set_pair(pair)?;
    }
    if let Some(store) = &cli.store {
        config.store_path = store.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Opens the store for writing under the advisory lock.
fn open_locked(config: &Config) -> Result<(StoreLock, Store), Error> {
    let lock = StoreLock::acquire(&config.store_path)?;
    Ok((lock, Store::open(&config.store_path)?))
}

/// Opens the store for reading; a missing file reads as an empty store.
fn open_read(config: &Config) -> Result<Store, Error> {
    if config.store_path.exists() {
        Store::restore(BufReader::new(fs::File::open(&config.store_path)?), None)
    } else {
        Ok(Store::in_memory())
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn parse_snake<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> Result<T, Error> {
    serde_json::from_value(serde_json::Value::String(text.into()))
        .map_err(|_| Error::InvalidArgument(format!("unknown {what} `{text}`")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Config { defaults: true } = cli.command {
        print!("{}", Config::default().to_text());
        return Ok(());
    }
    if let Command::Synth(args) = &cli.command {
        return synth(args);
    }
    let config = load_config(&cli)?;
    match cli.command {
        Command::Config { .. } => print!("{}", config.to_text()),
        Command::Ingest { file } => {
            let (_lock, mut store) = open_locked(&config)?;
            print_json(&ingest_file(&mut store, &config, &file)?)?;
        }
        Command::Etl => {
            let (_lock, mut store) = open_locked(&config)?;
            print_json(&run_etl(&mut store, &config)?)?;
        }
        Command::Cook => {
            let (_lock, mut store) = open_locked(&config)?;
            print_json(&run_cook(&mut store, &config)?)?;
        }
        Command::Link => {
            let (_lock, mut store) = open_locked(&config)?;
            print_json(&run_link(&mut store, &config)?)?;
        }
        Command::Surrogate(args) => surrogate(&config, args)?,
        Command::Serve { port, bind } => {
            let mut config = config;
            config.api_port = port.unwrap_or(config.api_port);
            config.api_bind = bind.unwrap_or(config.api_bind);
            let (_lock, store) = open_locked(&config)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(recital_api::serve(store, config))?;
        }
        Command::Progress { json } => {
            let report = progress(&open_read(&config)?)?;
            if json {
                print_json(&report)?;
            } else {
                for (task, p) in &report.tasks {
                    println!("{:<11} {:>8}/{:<8} {}", task.name(), p.done, p.total, p.completeness);
                }
                for (tier, n) in &report.tiers {
                    println!("{:<16} {n}", tier.name());
                }
                println!("volunteers       {}", report.volunteers.len());
            }
        }
        Command::Verify { json } => {
            let report = verify(&open_read(&config)?, &config)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.table());
            }
            if !report.passed() {
                return Err(Failure::Verify);
            }
        }
        Command::Snapshot => print_json(&open_read(&config)?.snapshot())?,
        Command::Dump { out } => {
            let store = open_read(&config)?;
            match out {
                Some(path) => {
                    let mut file = io::BufWriter::new(fs::File::create(path)?);
                    store.dump(&mut file)?;
                    file.flush()?;
                }
                None => store.dump(&mut io::stdout().lock())?,
            }
        }
        Command::Restore { file } => {
            let _lock = StoreLock::acquire(&config.store_path)?;
            let reader = BufReader::new(fs::File::open(&file)?);
            let store = Store::restore(reader, Some(&config.store_path))?;
            print_json(&store.snapshot())?;
        }
        Command::Review(ReviewCommand::List { status, reason }) => {
            let filter = ReviewFilter {
                status: status.map(|s| parse_snake::<ReviewStatus>("status", &s)).transpose()?,
                reason: reason.map(|r| parse_snake::<ReviewReason>("reason", &r)).transpose()?,
                stage: None,
            };
            print_json(&review::list(&open_read(&config)?, &filter))?;
        }
        Command::Review(ReviewCommand::Resolve {
            item,
            curator,
            accept,
            reject,
            text,
            category,
            entity,
        }) => {
            let resolution = match (accept, reject, text, category, entity) {
                (true, ..) => Resolution::accept(),
                (_, true, ..) => Resolution::reject(),
                (_, _, Some(t), ..) => Resolution::edit_text(&t),
                (_, _, _, Some(c), _) => Resolution::edit_category(&c),
                (_, _, _, _, Some(e)) => Resolution::choose(e.parse::<RecordId>()?),
                _ => {
                    return Err(Error::InvalidArgument(
                        "one of --accept, --reject, --text, --category, --entity is required".into(),
                    )
                    .into())
                }
            };
            let (_lock, mut store) = open_locked(&config)?;
            let superseding = review::resolve(&mut store, &config, item, &resolution, &curator)?;
            println!("{superseding}");
        }
        Command::Lineage { record, prov } => {
            let store = open_read(&config)?;
            let graph = lineage(&store, &record.parse::<RecordId>()?)?;
            if prov {
                print_json(&prov_json(&store, &graph.edges))?;
            } else {
                print_json(&graph)?;
            }
        }
        Command::Synth(_) => unreachable!("handled before loading the configuration"),
    }
    Ok(())
}

fn surrogate(config: &Config, args: SurrogateArgs) -> Result<(), Failure> {
    let ids = |store: &Store| -> Result<Vec<RecordId>, Error> {
        if args.all {
            return Ok(store.iter_kind(Page::STAGE, Page::KIND).map(|(id, _)| id).collect());
        }
        if args.pages.is_empty() {
            return Err(Error::InvalidArgument("name a page or pass --all".into()));
        }
        args.pages.iter().map(|p| p.parse::<RecordId>()).collect()
    };
    if let Some(mode) = &args.print {
        let store = open_read(config)?;
        for id in ids(&store)? {
            let doc = layout_reconstitution(&store, config, &id)?;
            match mode.as_str() {
                "text" => println!("{}", doc.text(&config.marker_open, &config.marker_close)),
                "layout" => print_json(&doc)?,
                "svg" => println!("{}", doc.svg()),
                other => return Err(Error::InvalidArgument(format!("unknown surrogate mode `{other}`")).into()),
            }
        }
        return Ok(());
    }
    let (_lock, mut store) = open_locked(config)?;
    let pages = ids(&store)?;
    print_json(&write_surrogates(&mut store, config, &pages)?)
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let mut params = SynthParams::default();
    for pair in &args.params {
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected name=value, got `{pair}`")))?;
        params.set(name.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    let corpus = generate(&params)?;
    fs::create_dir_all(&args.out)?;
    let write = |name: &str, bytes: &[u8]| -> io::Result<PathBuf> {
        let path = Path::new(&args.out).join(name);
        fs::write(&path, bytes)?;
        Ok(path)
    };
    write("export.jsonl", &corpus.export)?;
    write("truth.json", &serde_json::to_vec_pretty(&corpus.truth)?)?;
    write("registry.txt", corpus.registry.as_bytes())?;
    print_json(&serde_json::json!({
        "out": args.out,
        "subjects": corpus.truth.subjects,
        "classifications": corpus.truth.classifications,
        "duplicates": corpus.truth.duplicates,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => {
            eprintln!("verify: FAIL");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(exit_code(&e))
        }
    }
}
