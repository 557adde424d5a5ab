//! The `neemtrace` command line.
//!
//! [`dispatch`] parses arguments, runs one subcommand against the selected
//! store and returns the process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | verification failure (audit verdict false, replay or diff mismatch) |
//! | 2 | usage error or invalid input file |
//! | 3 | object not found |
//! | 4 | integrity violation |
//! | 5 | I/O or other runtime failure |

use std::ffi::OsString;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use neemtrace_core::model::{Episode, FaultSpec};
use neemtrace_core::perception::{self, PipelineNode};
use neemtrace_core::query::{self, QueryError};
use neemtrace_core::replay::{self, Overrides, ReexecVerdict, ReplayError};
use neemtrace_core::rules;
use neemtrace_core::simworld::{self, RunConfig, SimError};
use neemtrace_core::store::{ObjectStatus, StoreError, STORE_DIR_ENV};
use neemtrace_core::verify::{self, AuditTrail, Quadruplet, VerifyError};
use neemtrace_core::{ContentHash, ObjectKind, Store};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_FOUND: i32 = 3;
pub const EXIT_INTEGRITY: i32 = 4;
pub const EXIT_FAILURE: i32 = 5;

pub const DEFAULT_TICK_US: u64 = 10_000;

#[derive(Debug, Parser)]
#[command(name = "neemtrace", version, about = "Record, store, replay, verify and query robot task episodes")]
pub struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = STORE_DIR_ENV, default_value = "trace-store")]
    pub store: PathBuf,
    /// Omit wall-clock timestamps from output.
    #[arg(long, global = true)]
    pub deterministic_output: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a plan in the simulated world, store the episode and print its hash.
    Run {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TICK_US)]
        tick_us: u64,
        /// Fault injection file.
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Perception pipeline tree run on the final scene.
        #[arg(long)]
        ppt: Option<PathBuf>,
    },
    /// Rebuild state and beliefs from a stored episode's symbolic layer.
    Replay { hash: String },
    /// Audit a stored episode and store the audit trail.
    Verify {
        hash: String,
        #[arg(long)]
        rules: PathBuf,
        /// Episode whose task tree the audited one must match.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Re-execute a stored episode and compare it with the recording.
    Diff {
        hash: String,
        /// Re-execute under a different seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a query; reads the query from stdin when TEXT is absent or `-`.
    Query {
        text: Option<String>,
        /// Tab-separated output instead of canonical text.
        #[arg(long)]
        tsv: bool,
    },
    /// Store maintenance.
    Store {
        #[command(subcommand)]
        action: StoreCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum StoreCommand {
    /// Re-hash every object and re-check every audit trail.
    Verify,
    /// List stored objects.
    List {
        /// Only objects of this kind (episode, audit_trail, plan, pipeline).
        #[arg(long)]
        kind: Option<String>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound(_) => EXIT_NOT_FOUND,
            StoreError::IntegrityViolation { .. } | StoreError::Malformed { .. } => EXIT_INTEGRITY,
            StoreError::Locked | StoreError::Io(_) => EXIT_FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Store(s) => s.into(),
            VerifyError::NotFound(_) => CliError::new(EXIT_NOT_FOUND, e.to_string()),
            VerifyError::Canon(_) => CliError::new(EXIT_INTEGRITY, e.to_string()),
            VerifyError::Rule(_)
            | VerifyError::UnknownRule(_)
            | VerifyError::MissingReference
            | VerifyError::EmptyInput => CliError::usage(e.to_string()),
        }
    }
}

impl From<ReplayError> for CliError {
    fn from(e: ReplayError) -> Self {
        match e {
            ReplayError::Unavailable { ref source, .. } => {
                let code = match source {
                    StoreError::NotFound(_) => EXIT_NOT_FOUND,
                    StoreError::IntegrityViolation { .. } | StoreError::Malformed { .. } => {
                        EXIT_INTEGRITY
                    }
                    StoreError::Locked | StoreError::Io(_) => EXIT_FAILURE,
                };
                CliError::new(code, e.to_string())
            }
            ReplayError::InvalidEpisode(_)
            | ReplayError::InconsistentTransition { .. }
            | ReplayError::Malformed { .. } => CliError::new(EXIT_INTEGRITY, e.to_string()),
            ReplayError::Execution(_) => CliError::new(EXIT_FAILURE, e.to_string()),
        }
    }
}

impl From<QueryError> for CliError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::Store(s) => s.into(),
            QueryError::NotFound(_) => CliError::new(EXIT_NOT_FOUND, e.to_string()),
            QueryError::NotAnEpisode(_) => CliError::usage(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::usage(e.to_string())
    }
}

type CmdResult = Result<i32, CliError>;

/// Runs one invocation. `argv[0]` is the program name.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch_with_input(argv, &mut io::stdin().lock(), out, err)
}

/// [`dispatch`] with an explicit stdin.
pub fn dispatch_with_input<I, T>(
    argv: I,
    input: &mut dyn Read,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = sink.write_all(rendered.as_bytes());
            return code;
        }
    };
    match execute(&cli, input, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "neemtrace: {}", e.message);
            e.code
        }
    }
}

fn execute(cli: &Cli, input: &mut dyn Read, out: &mut dyn Write) -> CmdResult {
    let store = Store::open(&cli.store)?;
    let show_created = !cli.deterministic_output;
    match &cli.command {
        Command::Run {
            scene,
            plan,
            seed,
            tick_us,
            faults,
            ppt,
        } => cmd_run(&store, scene, plan, *seed, *tick_us, faults.as_deref(), ppt.as_deref(), out),
        Command::Replay { hash } => cmd_replay(&store, &parse_hash(hash)?, show_created, out),
        Command::Verify {
            hash,
            rules,
            reference,
        } => {
            let reference = reference.as_deref().map(parse_hash).transpose()?;
            cmd_verify(&store, &parse_hash(hash)?, rules, reference.as_ref(), show_created, out)
        }
        Command::Diff { hash, seed } => cmd_diff(&store, &parse_hash(hash)?, *seed, out),
        Command::Query { text, tsv } => {
            let text = match text.as_deref() {
                Some(t) if t != "-" => t.to_string(),
                _ => {
                    let mut buf = String::new();
                    input.read_to_string(&mut buf)?;
                    buf
                }
            };
            cmd_query(&store, &text, *tsv, out)
        }
        Command::Store {
            action: StoreCommand::Verify,
        } => cmd_store_verify(&store, out),
        Command::Store {
            action: StoreCommand::List { kind },
        } => {
            let kind = kind
                .as_deref()
                .map(|k| {
                    ObjectKind::from_tag(k)
                        .ok_or_else(|| CliError::usage(format!("unknown object kind {k:?}")))
                })
                .transpose()?;
            cmd_store_list(&store, kind, show_created, out)
        }
    }
}

fn parse_hash(s: &str) -> Result<ContentHash, CliError> {
    s.parse()
        .map_err(|e| CliError::usage(format!("invalid hash {s:?}: {e}")))
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => {
            CliError::new(EXIT_NOT_FOUND, format!("{}: no such file", path.display()))
        }
        _ => CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display())),
    })
}

fn invalid_file(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    store: &Store,
    scene_path: &Path,
    plan_path: &Path,
    seed: u64,
    tick_us: u64,
    faults_path: Option<&Path>,
    ppt_path: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    let scene = simworld::decode_scene(&read_input(scene_path)?)
        .map_err(|e| invalid_file(scene_path, e))?;
    let plan =
        simworld::decode_plan(&read_input(plan_path)?).map_err(|e| invalid_file(plan_path, e))?;
    let faults = match faults_path {
        Some(p) => simworld::decode_faults(&read_input(p)?).map_err(|e| invalid_file(p, e))?,
        None => FaultSpec::NONE,
    };
    let pipeline: Option<PipelineNode> = ppt_path
        .map(|p| perception::decode_pipeline(&read_input(p)?).map_err(|e| invalid_file(p, e)))
        .transpose()?;

    let cfg = RunConfig::seeded(seed, tick_us, faults);
    let episode = simworld::record(&scene, &plan, &cfg, pipeline.as_ref())?;
    let bytes = neemtrace_core::model::canonical_encode(&episode)
        .map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;

    let created = Some(now());
    store.put_with_created(&plan.canonical_bytes(), ObjectKind::Plan, created.clone())?;
    if let Some(p) = &pipeline {
        store.put_with_created(&perception::pipeline_bytes(p), ObjectKind::Pipeline, created.clone())?;
    }
    let h = store.put_with_created(&bytes, ObjectKind::Episode, created)?;
    writeln!(out, "{h}")?;
    Ok(EXIT_OK)
}

fn write_created(out: &mut dyn Write, e: &Episode, show: bool) -> io::Result<()> {
    match (&e.meta.created, show) {
        (Some(c), true) => writeln!(out, "meta.created {c}"),
        _ => Ok(()),
    }
}

fn cmd_replay(store: &Store, h: &ContentHash, show_created: bool, out: &mut dyn Write) -> CmdResult {
    let e = store.get_episode(h)?;
    let result = replay::replay(&e)?;
    writeln!(out, "episode {h}")?;
    write_created(out, &e, show_created)?;
    writeln!(out, "transitions {}", result.steps)?;
    for snap in &result.belief_timeline {
        let source = match snap.source {
            neemtrace_core::model::BeliefSource::Kinematic => "kinematic",
            neemtrace_core::model::BeliefSource::Perception => "perception",
        };
        writeln!(out, "belief t={} source={source}", snap.t)?;
        for (entity, b) in &snap.beliefs {
            writeln!(out, "  {entity} pose={} confidence={}", b.pose, b.confidence_ppm)?;
        }
    }
    writeln!(out, "final state")?;
    for (entity, attrs) in &result.final_state.entities {
        for (attr, value) in attrs {
            writeln!(out, "  {entity}.{attr} = {value}")?;
        }
    }
    let faithful = result.belief_timeline == e.beliefs;
    writeln!(
        out,
        "belief timeline {}",
        if faithful { "matches recording" } else { "differs from recording" }
    )?;
    Ok(if faithful { EXIT_OK } else { EXIT_VERIFICATION_FAILED })
}

fn write_quadruplet(out: &mut dyn Write, label: &str, q: &Quadruplet) -> io::Result<()> {
    writeln!(
        out,
        "{label} D_s={} C_f={} E_d={}",
        q.decision, q.confidence_ppm, q.explanation
    )
}

fn cmd_verify(
    store: &Store,
    h: &ContentHash,
    rules_path: &Path,
    reference: Option<&ContentHash>,
    show_created: bool,
    out: &mut dyn Write,
) -> CmdResult {
    let text = String::from_utf8(read_input(rules_path)?)
        .map_err(|e| invalid_file(rules_path, e))?;
    let rules = rules::parse_rules_file(&text).map_err(|e| invalid_file(rules_path, e))?;
    let episode = store.get_episode(h)?;
    let (trail, trail_hash) = verify::audit(store, h, &rules, reference, Some(now()))?;

    writeln!(out, "audit {trail_hash}")?;
    writeln!(out, "episode {h}")?;
    write_created(out, &episode, show_created)?;
    writeln!(out, "rules {}", trail.rules)?;
    if let Some(r) = &trail.reference {
        writeln!(out, "reference {r}")?;
    }
    writeln!(out, "pipeline {}", trail.pipeline.join(" "))?;
    for r in &trail.results {
        write_quadruplet(out, &format!("result {}", r.name), &r.result)?;
    }
    for v in &trail.violations {
        writeln!(out, "violation {} {}", v.severity.name(), v.message)?;
    }
    write_quadruplet(out, "final", &trail.verdict)?;
    if let Some(steps) = &trail.verdict.recovery {
        writeln!(out, "recovery")?;
        for (i, a) in steps.iter().enumerate() {
            writeln!(out, "  {}. {a}", i + 1)?;
        }
    }
    Ok(if trail.verdict.decision { EXIT_OK } else { EXIT_VERIFICATION_FAILED })
}

fn cmd_diff(store: &Store, h: &ContentHash, seed: Option<u64>, out: &mut dyn Write) -> CmdResult {
    let e = store.get_episode(h)?;
    let overrides = Overrides { seed, plan: None };
    let report = replay::re_execute_and_diff(&e, store, &overrides)?;
    writeln!(out, "episode {h}")?;
    writeln!(out, "reexecuted {}", report.reexecuted_hash)?;
    writeln!(out, "verdict {}", report.verdict)?;
    if let Some(d) = &report.first_difference {
        writeln!(out, "first difference {d}")?;
    }
    Ok(match report.verdict {
        ReexecVerdict::Mismatch => EXIT_VERIFICATION_FAILED,
        ReexecVerdict::IdenticalBytes | ReexecVerdict::SemanticMatch => EXIT_OK,
    })
}

fn cmd_query(store: &Store, text: &str, tsv: bool, out: &mut dyn Write) -> CmdResult {
    let q = query::parse_query(text).map_err(|e| CliError::usage(e.to_string()))?;
    let table = query::run_query(&q, store)?;
    if tsv {
        out.write_all(table.to_tsv().as_bytes())?;
    } else {
        out.write_all(&table.to_canonical())?;
        writeln!(out)?;
    }
    Ok(EXIT_OK)
}

/// Problems found when re-checking a stored audit trail.
pub fn recheck_trail(store: &Store, trail: &AuditTrail) -> Vec<String> {
    let mut problems = Vec::new();
    let mut check = |what: &str, h: &ContentHash| match store.verify(h) {
        Ok(ObjectStatus::Ok) => {}
        Ok(status) => problems.push(format!("{what} {h} is {}", status.name())),
        Err(e) => problems.push(format!("{what} {h}: {e}")),
    };
    check("episode", &trail.episode);
    if let Some(r) = &trail.reference {
        check("reference", r);
    }
    let names: Vec<&str> = trail.results.iter().map(|r| r.name.as_str()).collect();
    let planned: Vec<&str> = trail.pipeline.iter().map(String::as_str).collect();
    if names != planned {
        problems.push("results do not follow the recorded pipeline".to_string());
    }
    let pairs: Vec<(String, Quadruplet)> = trail
        .results
        .iter()
        .map(|r| (r.name.clone(), r.result.clone()))
        .collect();
    match verify::synthesize(&pairs) {
        Ok(v) if v == trail.verdict => {}
        Ok(_) => problems.push("final verdict does not follow from the results".to_string()),
        Err(e) => problems.push(e.to_string()),
    }
    problems
}

fn cmd_store_verify(store: &Store, out: &mut dyn Write) -> CmdResult {
    let statuses = store.verify_all()?;
    let mut bad = 0usize;
    for (h, status) in &statuses {
        let kind = store
            .entry(h)
            .map(|e| e.kind.tag())
            .unwrap_or("unindexed");
        let mut line = status.name().to_string();
        if *status == ObjectStatus::Ok && kind == ObjectKind::AuditTrail.tag() {
            let trail = verify::decode_canonical_trail(&store.get(h)?)
                .map_err(|e| CliError::new(EXIT_INTEGRITY, e.to_string()))?;
            let problems = recheck_trail(store, &trail);
            if !problems.is_empty() {
                line = format!("inconsistent: {}", problems.join("; "));
            }
        }
        if line != "ok" {
            bad += 1;
        }
        writeln!(out, "{h}\t{kind}\t{line}")?;
    }
    writeln!(out, "{} objects, {bad} problems", statuses.len())?;
    Ok(if bad == 0 { EXIT_OK } else { EXIT_INTEGRITY })
}

fn cmd_store_list(
    store: &Store,
    kind: Option<ObjectKind>,
    show_created: bool,
    out: &mut dyn Write,
) -> CmdResult {
    let kinds: Vec<ObjectKind> = match kind {
        Some(k) => vec![k],
        None => ObjectKind::ALL.to_vec(),
    };
    let mut rows: Vec<(ContentHash, ObjectKind)> = kinds
        .into_iter()
        .flat_map(|k| store.list(k).into_iter().map(move |h| (h, k)))
        .collect();
    rows.sort();
    for (h, k) in rows {
        write!(out, "{h}\t{}", k.tag())?;
        if show_created {
            if let Some(c) = store.entry(&h).and_then(|e| e.created) {
                write!(out, "\t{c}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(EXIT_OK)
}
