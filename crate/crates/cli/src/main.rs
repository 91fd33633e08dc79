//! `fhesql`: server daemon and client commands.

mod config;
mod keys;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fhesql::access::{create_token, delegate, unix_now, DelegationToken, OwnerKeypair, Permissions};
use fhesql::bench::{
    estimate_client_time, estimate_pir, estimate_server_time, run_benchmarks, stress_run, Engine, Scenario,
    StressConfig, WorkloadSpec,
};
use fhesql::client::{Client, FilterMode, TcpTransport};
use fhesql::crypto::{FheBackend, OpLatencyTable, SimBackend, SimConfig};
use fhesql::engine::{EngineConfig, OwnerRecord, PirMode, Server};
use fhesql::net::serve;
use fhesql::schema::TableSchema;
use fhesql::storage::{BlobStoreConfig, CacheConfig, HybridStore, StoreConfig};

use config::{BackendKind, ServerArgs};

#[derive(Parser)]
#[command(name = "fhesql", version, about = "Encrypted SQL selection and key-value lookup")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the query server.
    Server(ServerArgs),
    /// Generate FHE and signing keys.
    Keygen(KeygenArgs),
    /// Capability tokens.
    #[command(subcommand)]
    Token(TokenCommand),
    /// Encrypt and store rows.
    Insert(InsertArgs),
    /// Run an encrypted SELECT and print the decrypted rows.
    Query(QueryArgs),
    /// Private lookup in a (key, value) table.
    Lookup(LookupArgs),
    /// Cost model, storage benchmarks and stress runs.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Reclaim dead blob space on the server.
    Compact(CompactArgs),
    /// Fetch a stored leakage transcript.
    Transcript(TranscriptArgs),
}

#[derive(Args)]
struct KeygenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Principal id recorded in the keys.
    #[arg(long)]
    id: String,
    /// Only a signing key (for delegates who receive FHE keys separately).
    #[arg(long)]
    signing_only: bool,
    #[arg(long, default_value_t = 128)]
    security: u32,
    /// Replace existing key files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum TokenCommand {
    /// Mint a token and print it as base64.
    Create(TokenCreateArgs),
}

#[derive(Args)]
struct TokenCreateArgs {
    /// Key directory whose signing key issues the token.
    #[arg(long)]
    keys: PathBuf,
    /// Holder of the new token.
    #[arg(long)]
    user: String,
    /// Comma-separated: read, write, delete, delegate.
    #[arg(long)]
    perms: String,
    /// Lifetime in seconds.
    #[arg(long, default_value_t = 3600)]
    ttl: u64,
    /// Delegate from this base64 token instead of issuing as owner.
    #[arg(long)]
    parent: Option<String>,
}

#[derive(Args)]
struct Conn {
    /// Server address.
    #[arg(long, env = "FHESQL_SERVER", default_value = "127.0.0.1:7878")]
    server: String,
    /// Key directory.
    #[arg(long, env = "FHESQL_KEYS")]
    keys: PathBuf,
    /// Use this base64 token instead of minting one per request.
    #[arg(long)]
    token: Option<String>,
}

impl Conn {
    fn client(&self) -> Result<Client> {
        let key = keys::load_fhe_key(&self.keys)?;
        let transport = TcpTransport::connect(&self.server, Duration::from_secs(5))?;
        Ok(Client::new(transport, sim_backend(None)?, key))
    }

    /// The explicit token, or a fresh one from the signing key.
    fn token(&self, perms: Permissions) -> Result<DelegationToken> {
        if let Some(t) = &self.token {
            return DelegationToken::from_base64(t.trim()).map_err(|e| anyhow!("--token: {e}"));
        }
        let kp = keys::load_signing(&self.keys)?;
        Ok(create_token(&kp, &kp.owner_id.clone(), perms, unix_now() + 300)?)
    }
}

#[derive(Args)]
struct InsertArgs {
    #[command(flatten)]
    conn: Conn,
    #[arg(long)]
    table: String,
    /// Create the table first, e.g. `age:u32,salary:u32`.
    #[arg(long)]
    create: Option<String>,
    /// One row of comma-separated integers (repeatable).
    #[arg(long = "row")]
    rows: Vec<String>,
    /// Rows from a CSV file of integers; a non-numeric first line is a header.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Filter {
    Auto,
    Mask,
    Nonzero,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    conn: Conn,
    sql: String,
    #[arg(long, value_enum, default_value = "auto")]
    filter: Filter,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Sparse,
    Aggregate,
}

#[derive(Args)]
struct LookupArgs {
    #[command(flatten)]
    conn: Conn,
    #[arg(long)]
    table: String,
    #[arg(long)]
    key: u64,
    #[arg(long, value_enum, default_value = "sparse")]
    mode: Mode,
}

#[derive(Args)]
struct CompactArgs {
    #[command(flatten)]
    conn: Conn,
}

#[derive(Args)]
struct TranscriptArgs {
    #[command(flatten)]
    conn: Conn,
    #[arg(long)]
    id: u64,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Print the lookup cost model for `n` entries.
    Cost {
        #[arg(long, default_value_t = 1)]
        n: u64,
        #[arg(long)]
        latency_table: Option<PathBuf>,
    },
    /// Storage scenarios on the blob store and the inline KV baseline.
    Storage(StorageBenchArgs),
    /// Concurrent writers and readers with compaction, then verification.
    Stress {
        #[arg(long)]
        dir: Option<PathBuf>,
        /// JSON stress config; fields default individually.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StorageBenchArgs {
    /// Working directory (a temporary one by default).
    #[arg(long)]
    dir: Option<PathBuf>,
    /// JSON workload spec; fields default individually.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Small run for smoke tests.
    #[arg(long)]
    quick: bool,
    /// Comma-separated scenario names (default: all).
    #[arg(long)]
    scenarios: Option<String>,
    /// Comma-separated: blob, kv.
    #[arg(long, default_value = "blob,kv")]
    engines: String,
    #[arg(long)]
    prepopulation: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    ops_per_thread: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn sim_backend(table: Option<OpLatencyTable>) -> Result<Arc<dyn FheBackend>> {
    Ok(Arc::new(SimBackend::new(SimConfig {
        latency: table.unwrap_or_default(),
        ..SimConfig::default()
    })))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Server(a) => server(a),
        Command::Keygen(a) => keygen(a),
        Command::Token(TokenCommand::Create(a)) => token_create(a),
        Command::Insert(a) => insert(a),
        Command::Query(a) => query(a),
        Command::Lookup(a) => lookup(a),
        Command::Bench(b) => bench(b),
        Command::Compact(a) => {
            let c = a.conn.client()?;
            let n = c.compact(&a.conn.token(Permissions::DELETE)?)?;
            println!("reclaimed {n} bytes");
            Ok(())
        }
        Command::Transcript(a) => {
            let c = a.conn.client()?;
            println!("{}", serde_json::to_string_pretty(&c.transcript(a.id)?)?);
            Ok(())
        }
    }
}

fn server(args: ServerArgs) -> Result<()> {
    let cfg = args.resolve()?;
    if cfg.backend == BackendKind::Fhe {
        bail!("the fhe backend is not built into this binary; use --backend sim");
    }
    let table = match &cfg.latency_table {
        Some(p) => OpLatencyTable::load(p).with_context(|| format!("latency table {}", p.display()))?,
        None => OpLatencyTable::default(),
    };
    let store = HybridStore::open(
        &cfg.data_dir,
        StoreConfig {
            blob: BlobStoreConfig {
                segment_bytes: cfg.segment_bytes,
                sync_writes: cfg.sync_writes,
                cache: CacheConfig {
                    hot_bytes: cfg.cache_hot_bytes,
                    warm_bytes: cfg.cache_warm_bytes,
                },
                ..BlobStoreConfig::default()
            },
        },
    )
    .with_context(|| format!("opening storage at {}", cfg.data_dir.display()))?;
    let rec = store.recovery_report();
    if !rec.is_clean() {
        log::warn!("recovery repaired storage: {rec:?}");
    }
    let engine = Server::new(
        Arc::new(store),
        sim_backend(Some(table))?,
        EngineConfig {
            return_mask: cfg.return_mask,
            transcript_capacity: cfg.transcript_capacity,
        },
    );
    let mut owner_files = keys::json_files(&cfg.data_dir.join("owners"))?;
    owner_files.extend(cfg.owners.iter().cloned());
    for p in &owner_files {
        let rec: OwnerRecord = keys::load_owner(p)?;
        log::info!("registered owner {}", rec.owner_id);
        engine.register_owner(rec);
    }
    for p in keys::json_files(&cfg.data_dir.join("principals"))? {
        let (id, key) = keys::PrincipalFile::load(&p)?;
        engine.register_principal(&id, key);
    }
    let tables = engine.store().tables()?;
    let handle =
        serve(&cfg.listen, Arc::new(engine), cfg.max_frame_bytes).with_context(|| format!("binding {}", cfg.listen))?;
    println!(
        "listening on {} ({} tables, {} owners)",
        handle.local_addr(),
        tables.len(),
        owner_files.len()
    );
    handle.join();
    Ok(())
}

fn keygen(a: KeygenArgs) -> Result<()> {
    let kp = OwnerKeypair::generate(a.id.clone());
    let mut files = vec![
        (keys::SIGNING, kp.to_json()),
        (
            keys::PRINCIPAL,
            serde_json::to_string_pretty(&keys::PrincipalFile::of(&kp))?,
        ),
    ];
    if !a.signing_only {
        let key = sim_backend(None)?.keygen(a.security)?;
        let owner = OwnerRecord {
            owner_id: a.id.clone(),
            verification_key: kp.verification_key(),
            evaluation_key: key.evaluation_key(),
        };
        files.push((keys::FHE_KEY, serde_json::to_string_pretty(&key)?));
        files.push((keys::OWNER, owner.to_json()));
    }
    for p in keys::write_all(&a.out, &files, a.force)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn token_create(a: TokenCreateArgs) -> Result<()> {
    let kp = keys::load_signing(&a.keys)?;
    let perms = Permissions::parse(&a.perms).map_err(anyhow::Error::msg)?;
    let exp = unix_now() + a.ttl;
    let t = match &a.parent {
        None => create_token(&kp, &a.user, perms, exp)?,
        Some(p) => {
            let parent = DelegationToken::from_base64(p.trim()).map_err(|e| anyhow!("--parent: {e}"))?;
            let exp = exp.min(parent.expires_at);
            delegate(&parent, &kp, &a.user, perms, exp)?
        }
    };
    println!("{}", t.to_base64());
    Ok(())
}

fn parse_row(line: &str) -> Result<Vec<u64>> {
    line.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .with_context(|| format!("bad value {v:?} in row {line:?}"))
        })
        .collect()
}

fn insert(a: InsertArgs) -> Result<()> {
    let mut rows: Vec<Vec<u64>> = a.rows.iter().map(|r| parse_row(r)).collect::<Result<_>>()?;
    if let Some(p) = &a.csv {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        if lines
            .peek()
            .is_some_and(|l| !l.trim_start().starts_with(|c: char| c.is_ascii_digit()))
        {
            lines.next();
        }
        for l in lines {
            rows.push(parse_row(l)?);
        }
    }
    let c = a.conn.client()?;
    if let Some(spec) = &a.create {
        let schema = TableSchema::new(&a.table, TableSchema::parse_columns(spec).map_err(anyhow::Error::msg)?);
        c.create_table(&schema, &a.conn.token(Permissions::WRITE)?)?;
        println!("created table {}", a.table);
    }
    if rows.is_empty() {
        return Ok(());
    }
    let ids = c.insert(&a.table, &rows, &a.conn.token(Permissions::WRITE)?)?;
    println!("inserted {} rows (ids {:?})", ids.len(), ids);
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let filter = match a.filter {
        Filter::Auto => FilterMode::Auto,
        Filter::Mask => FilterMode::Mask,
        Filter::Nonzero => FilterMode::NonZero,
    };
    let c = a.conn.client()?.with_filter(filter);
    let out = c.query(&a.sql, &a.conn.token(Permissions::READ)?)?;
    let set = &out.result;
    match a.format {
        Format::Json => {
            let rows: Vec<serde_json::Value> = set
                .values()
                .iter()
                .map(|r| {
                    serde_json::Value::Object(set.columns.iter().cloned().zip(r.iter().map(|&v| v.into())).collect())
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Format::Csv | Format::Table => {
            let sep = if matches!(a.format, Format::Csv) { "," } else { "\t" };
            println!("{}", set.columns.join(sep));
            for r in set.values() {
                println!("{}", r.iter().map(u32::to_string).collect::<Vec<_>>().join(sep));
            }
        }
    }
    eprintln!(
        "{} of {} rows matched (transcript {})",
        set.len(),
        out.row_count,
        out.transcript_id.map_or("-".into(), |t| t.to_string())
    );
    Ok(())
}

fn lookup(a: LookupArgs) -> Result<()> {
    let mode = match a.mode {
        Mode::Sparse => PirMode::Sparse,
        Mode::Aggregate => PirMode::Aggregate,
    };
    let c = a.conn.client()?;
    let pairs = c.lookup(&a.table, a.key, mode, &a.conn.token(Permissions::READ)?)?;
    if pairs.is_empty() {
        println!("key {} not found", a.key);
    }
    for (k, v) in pairs {
        println!("{k}\t{v}");
    }
    Ok(())
}

fn load_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// `dir`, or a fresh temporary directory removed when the guard drops.
fn work_dir(dir: Option<PathBuf>) -> Result<(PathBuf, Option<tempfile::TempDir>)> {
    match dir {
        Some(d) => {
            std::fs::create_dir_all(&d)?;
            Ok((d, None))
        }
        None => {
            let t = tempfile::Builder::new().prefix("fhesql-bench-").tempdir()?;
            Ok((t.path().to_path_buf(), Some(t)))
        }
    }
}

fn bench(cmd: BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::Cost { n, latency_table } => {
            let t = match latency_table {
                Some(p) => OpLatencyTable::load(&p)?,
                None => OpLatencyTable::default(),
            };
            println!("server: {:.4} ms", estimate_server_time(n, &t));
            println!("client: {:.4} ms", estimate_client_time(n, &t));
            println!("{}", serde_json::to_string_pretty(&estimate_pir(n, false, false, &t))?);
            Ok(())
        }
        BenchCommand::Storage(a) => {
            let mut spec = match (&a.spec, a.quick) {
                (Some(p), _) => load_json(p)?,
                (None, true) => WorkloadSpec::quick(),
                (None, false) => WorkloadSpec::default(),
            };
            if let Some(n) = a.prepopulation {
                spec.prepopulation = n;
            }
            if let Some(n) = a.samples {
                spec.samples = n;
            }
            if let Some(n) = a.ops_per_thread {
                spec.ops_per_thread = n;
            }
            let scenarios: Vec<Scenario> = match &a.scenarios {
                None => Scenario::ALL.to_vec(),
                Some(s) => s
                    .split(',')
                    .map(|n| Scenario::from_name(n.trim()).ok_or_else(|| anyhow!("unknown scenario {n:?}")))
                    .collect::<Result<_>>()?,
            };
            let engines: Vec<Engine> = a
                .engines
                .split(',')
                .map(|e| match e.trim() {
                    "blob" => Ok(Engine::Blob),
                    "kv" => Ok(Engine::Kv),
                    other => Err(anyhow!("unknown engine {other:?}")),
                })
                .collect::<Result<_>>()?;
            let (dir, _guard) = work_dir(a.dir)?;
            let report = run_benchmarks(&dir, &scenarios, &engines, &spec).map_err(anyhow::Error::msg)?;
            print!("{}", report.to_table());
            for (label, ok) in report.directional_checks() {
                println!("{} {label}", if ok { "ok  " } else { "FAIL" });
            }
            if let Some(p) = &a.json {
                std::fs::write(p, report.to_json())?;
            }
            if let Some(p) = &a.csv {
                std::fs::write(p, report.to_csv())?;
            }
            Ok(())
        }
        BenchCommand::Stress { dir, config } => {
            let cfg: StressConfig = match config {
                Some(p) => load_json(&p)?,
                None => StressConfig::default(),
            };
            let (dir, _guard) = work_dir(dir)?;
            let r = stress_run(&dir.join("stress"), &cfg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if !r.is_clean() {
                bail!("stress run found lost writes or corruption");
            }
            Ok(())
        }
    }
}
