//! Command-line front end: each subcommand is a plain function over a
//! [`RunConfig`] so it can be driven from tests as well as from `main`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::baseline::{
    aggregate_company, company_csv, explain_central, train_central, ShapReport,
};
use crate::config::{RunConfig, TransformSpec, Transport};
use crate::dataset::{
    build_metric_series, clean_measurements, generate_synthetic, load_csv, load_setpoints,
    partition_actors, ActorDataset, ActorSchema, DatasetManifest, MetricSeries, SetpointSource,
    NOISE_ACTOR_ID,
};
use crate::error::Error;
use crate::evaluation::{compare, emit_report, ComparisonReport};
use crate::protocol::{
    actor_seed, noise_actor, run_campaign, serve_actor, ActorLink, ActorPolicy, CampaignOutcome,
    ContributionRanking, InProcessLink, LocalActor, MetricTransform, TcpLink,
};

pub const RANKING_FILE: &str = "ranking.csv";
pub const CAMPAIGN_LOG_FILE: &str = "campaign_log.json";
pub const SHAP_VALUES_FILE: &str = "shap_values.csv";
pub const COMPANY_SHAP_FILE: &str = "company_shap.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Config or input problems.
pub const EXIT_INVALID: i32 = 2;
/// The campaign itself failed (e.g. no actor answered).
pub const EXIT_CAMPAIGN: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl CliError {
    fn invalid(error: Error) -> Self {
        Self {
            code: EXIT_INVALID,
            error,
        }
    }

    fn campaign(error: Error) -> Self {
        Self {
            code: EXIT_CAMPAIGN,
            error,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::invalid(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "echelon", version, about = "Contribution estimation across a supply chain")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub transport: Option<Transport>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Clean a raw process table and split it into per-actor datasets.
    Ingest(CommonArgs),
    /// Generate a synthetic multi-actor dataset with known contributions.
    Synth(CommonArgs),
    /// Rank actors by their locally computed uncertainty.
    RunDecentralised(CommonArgs),
    /// Train the central model and attribute it per company.
    RunCentral(CommonArgs),
    /// Compare a decentralised ranking with central importances.
    Compare(CommonArgs),
    /// Serve one actor over TCP (used by the socket transport).
    Actor(ActorArgs),
}

#[derive(Debug, Args)]
pub struct ActorArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub actor_id: String,
    #[arg(long, default_value = "127.0.0.1:0")]
    pub listen: String,
}

/// Loads the config (or defaults) and applies command-line overrides.
pub fn resolve_config(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        if let Some(s) = &mut cfg.synthetic {
            s.seed = seed;
        }
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(t) = args.transport {
        cfg.transport = t;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    let dir = cfg.require_out_dir()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, body: &str) -> CliResult<()> {
    std::fs::write(path, body).map_err(|e| CliError::invalid(Error::io(path, e)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub rows_kept: usize,
    pub rows_dropped: usize,
    pub dropped_columns: Vec<String>,
    pub actors: Vec<String>,
}

pub fn cmd_ingest(cfg: &RunConfig) -> CliResult<IngestSummary> {
    let ing = cfg
        .ingest
        .as_ref()
        .ok_or_else(|| Error::Config("missing [ingest] section".into()))?;
    let out = out_dir(cfg)?;
    let raw = load_csv(&ing.input, &ing.id_column)?;
    let cleaned = clean_measurements(&raw, ing.column_missing_threshold, ing.drop_incomplete_rows)?;
    for c in &cleaned.dropped_columns {
        info!("dropped column `{c}`");
    }
    let table = &cleaned.table;
    let present: HashSet<&str> = table.columns().iter().map(String::as_str).collect();

    let measurements: Vec<String> = ing
        .measurement_columns
        .iter()
        .filter(|c| present.contains(c.as_str()))
        .cloned()
        .collect();
    let setpoints = match &ing.setpoints {
        Some(p) => SetpointSource::Fixed(load_setpoints(p)?),
        None => SetpointSource::Companion,
    };
    let metric = build_metric_series(table, &measurements, ing.parts_per_observation, &setpoints)?;

    let mut excluded: Vec<String> = ing.measurement_columns.clone();
    excluded.extend(setpoints.companion_columns(table, &ing.measurement_columns));
    excluded.extend(ing.excluded_columns.iter().cloned());
    let keep = |cols: &[String]| -> Vec<String> {
        cols.iter()
            .filter(|c| present.contains(c.as_str()))
            .cloned()
            .collect()
    };
    let schema = ActorSchema {
        actors: ing
            .actors
            .iter()
            .map(|a| (a.id.clone(), keep(&a.columns)))
            .collect(),
        shared: keep(&ing.shared_columns),
        excluded: keep(&excluded),
    };
    let actors = partition_actors(table, &schema)?;
    DatasetManifest::write(out, &metric, &actors, None)?;
    Ok(IngestSummary {
        rows_kept: table.len(),
        rows_dropped: cleaned.dropped_rows,
        dropped_columns: cleaned.dropped_columns.clone(),
        actors: actors.iter().map(|a| a.actor_id().to_string()).collect(),
    })
}

pub fn cmd_synth(cfg: &RunConfig) -> CliResult<DatasetManifest> {
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("missing [synthetic] section".into()))?;
    let data = generate_synthetic(spec)?;
    let out = out_dir(cfg)?;
    Ok(DatasetManifest::write(
        out,
        &data.metric,
        &data.actors,
        Some(&data.ground_truth),
    )?)
}

fn load_data(cfg: &RunConfig) -> CliResult<(DatasetManifest, MetricSeries, Vec<ActorDataset>)> {
    let dir = cfg.require_data_dir()?;
    let manifest = DatasetManifest::read(&dir.join(DatasetManifest::FILE_NAME))?;
    let (metric, actors) = manifest.load(dir)?;
    Ok((manifest, metric, actors))
}

fn transform_for(cfg: &RunConfig, metric: &MetricSeries) -> CliResult<Option<MetricTransform>> {
    match cfg.transform.as_ref().map(|t| t.to_transform_spec()).transpose()? {
        None => Ok(None),
        Some(TransformSpec::Fixed(t)) => Ok(Some(t)),
        Some(TransformSpec::Standardise) => Ok(Some(MetricTransform::standardising(metric)?)),
    }
}

fn policy_for(cfg: &RunConfig, actor_id: &str) -> ActorPolicy {
    ActorPolicy {
        base_seed: actor_seed(cfg.seed, actor_id),
        min_overlap: cfg.campaign.min_overlap,
        participate: !cfg.campaign.decline.iter().any(|d| d == actor_id),
    }
}

struct Spawned(Vec<Child>);

impl Drop for Spawned {
    fn drop(&mut self) {
        for c in &mut self.0 {
            if !matches!(c.try_wait(), Ok(Some(_))) {
                let _ = c.kill();
            }
            let _ = c.wait();
        }
    }
}

fn spawn_actor(exe: &Path, config: &Path, actor_id: &str) -> Result<(Child, SocketAddr), Error> {
    let mut child = Command::new(exe)
        .args(["actor", "--config"])
        .arg(config)
        .args(["--actor-id", actor_id, "--listen", "127.0.0.1:0"])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Protocol(format!("cannot start actor `{actor_id}`: {e}")))?;
    let stdout = child.stdout.take().expect("piped stdout");
    let mut line = String::new();
    BufReader::new(stdout)
        .read_line(&mut line)
        .map_err(|e| Error::Protocol(format!("actor `{actor_id}` did not report an address: {e}")))?;
    let addr = line
        .trim()
        .strip_prefix("listening ")
        .and_then(|a| a.parse().ok())
        .ok_or_else(|| {
            let _ = child.kill();
            Error::Protocol(format!("actor `{actor_id}` printed `{}`", line.trim()))
        })?;
    Ok((child, addr))
}

/// Runs one campaign over the configured transport. `actor_exe` is the
/// executable started in actor mode for the socket transport.
pub fn cmd_run_decentralised(cfg: &RunConfig, actor_exe: Option<&Path>) -> CliResult<CampaignOutcome> {
    let out = out_dir(cfg)?.to_path_buf();
    let (_, metric, actors) = load_data(cfg)?;
    let transform = transform_for(cfg, &metric)?;
    for d in &cfg.campaign.decline {
        if !actors.iter().any(|a| a.actor_id() == d) {
            return Err(Error::Config(format!("[campaign] declining actor `{d}` is unknown")).into());
        }
    }

    let mut children = Spawned(Vec::new());
    let links: Vec<Arc<dyn ActorLink>> = match cfg.transport {
        Transport::InProcess => actors
            .into_iter()
            .map(|a| {
                let policy = policy_for(cfg, a.actor_id());
                Arc::new(InProcessLink::new(LocalActor::new(a, policy))) as Arc<dyn ActorLink>
            })
            .collect(),
        Transport::Sockets => {
            let exe = actor_exe.ok_or_else(|| {
                CliError::invalid(Error::Config("socket transport needs the actor executable".into()))
            })?;
            let resolved = out.join(RESOLVED_CONFIG_FILE);
            write_file(&resolved, &cfg.to_toml_string()?)?;
            let mut links: Vec<Arc<dyn ActorLink>> = Vec::new();
            for a in &actors {
                let (child, addr) = spawn_actor(exe, &resolved, a.actor_id()).map_err(CliError::campaign)?;
                children.0.push(child);
                links.push(Arc::new(TcpLink::new(a.actor_id(), addr)));
            }
            links
        }
    };

    let outcome = run_campaign(
        &links,
        &metric,
        transform.as_ref(),
        &cfg.ensemble,
        &cfg.campaign_config(),
    )
    .map_err(CliError::campaign)?;
    drop(children);

    write_file(&out.join(RANKING_FILE), &outcome.ranking.to_csv_string())?;
    let log = serde_json::to_string_pretty(&outcome.log).map_err(Error::from)?;
    write_file(&out.join(CAMPAIGN_LOG_FILE), &(log + "\n"))?;
    Ok(outcome)
}

/// Serves one call for `actor_id`, announcing `listening <addr>` on stdout.
pub fn cmd_actor(cfg: &RunConfig, actor_id: &str, listen: &str) -> CliResult<()> {
    let dir = cfg.require_data_dir()?;
    let manifest = DatasetManifest::read(&dir.join(DatasetManifest::FILE_NAME))?;
    let dataset = manifest.load_actor(dir, actor_id)?;
    let actor = LocalActor::new(dataset, policy_for(cfg, actor_id));
    let listener = TcpListener::bind(listen)
        .map_err(|e| CliError::invalid(Error::Config(format!("cannot listen on {listen}: {e}"))))?;
    let addr = listener.local_addr().map_err(|e| Error::io(listen, e))?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "listening {addr}")
        .and_then(|_| stdout.flush())
        .map_err(|e| Error::io("stdout", e))?;
    serve_actor(listener, &actor, Some(1)).map_err(CliError::campaign)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralOutcome {
    pub report: ShapReport,
    pub importance: BTreeMap<String, f64>,
}

pub fn cmd_run_central(cfg: &RunConfig) -> CliResult<CentralOutcome> {
    let out = out_dir(cfg)?.to_path_buf();
    let (_, metric, mut actors) = load_data(cfg)?;
    if cfg.central.include_noise_actor {
        let ids: Vec<String> = metric.part_ids().map(String::from).collect();
        actors.push(noise_actor(
            &ids,
            cfg.campaign.noise_feature_count,
            actor_seed(cfg.seed, NOISE_ACTOR_ID),
        )?);
    }
    let model = train_central(
        &actors,
        &metric,
        &cfg.ensemble,
        cfg.seed,
        cfg.central.background_size,
    )?;
    let report = explain_central(&model, &cfg.central.shap_config(), cfg.seed)?;
    let importance = aggregate_company(&report, model.feature_index())?;
    write_file(&out.join(SHAP_VALUES_FILE), &report.to_csv_string())?;
    write_file(&out.join(COMPANY_SHAP_FILE), &company_csv(&importance))?;
    Ok(CentralOutcome { report, importance })
}

fn read_importance(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    #[derive(serde::Deserialize)]
    struct Row {
        actor_id: String,
        importance: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(Error::from)?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(Error::from)?;
        if out.insert(row.actor_id.clone(), row.importance).is_some() {
            return Err(Error::DuplicateId(row.actor_id).into());
        }
    }
    Ok(out)
}

pub fn cmd_compare(cfg: &RunConfig) -> CliResult<ComparisonReport> {
    let out = out_dir(cfg)?.to_path_buf();
    let ranking_path = cfg.compare.ranking.clone().unwrap_or_else(|| out.join(RANKING_FILE));
    let importance_path = cfg
        .compare
        .importance
        .clone()
        .unwrap_or_else(|| out.join(COMPANY_SHAP_FILE));
    let file = std::fs::File::open(&ranking_path).map_err(|e| Error::io(&ranking_path, e))?;
    let ranking = ContributionRanking::from_csv_reader(file)?;
    let importance = read_importance(&importance_path)?;
    let report = compare(&ranking, &importance)?;
    emit_report(&report, &out)?;
    Ok(report)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Cmd::Ingest(a) => resolve_config(a).and_then(|c| cmd_ingest(&c)).map(|s| {
            println!(
                "kept {} rows, dropped {} rows; dropped columns: {}",
                s.rows_kept,
                s.rows_dropped,
                if s.dropped_columns.is_empty() {
                    "none".to_string()
                } else {
                    s.dropped_columns.join(", ")
                }
            );
        }),
        Cmd::Synth(a) => resolve_config(a).and_then(|c| cmd_synth(&c)).map(|m| {
            println!("wrote {} actor datasets", m.actors.len());
        }),
        Cmd::RunDecentralised(a) => resolve_config(a).and_then(|c| {
            let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
            cmd_run_decentralised(&c, Some(&exe)).map(|o| {
                print!("{}", o.ranking.to_csv_string());
                for d in o.log.declined.iter().chain(&o.log.timed_out) {
                    println!("no contribution from {d}");
                }
            })
        }),
        Cmd::RunCentral(a) => resolve_config(a).and_then(|c| cmd_run_central(&c)).map(|o| {
            print!("{}", company_csv(&o.importance));
        }),
        Cmd::Compare(a) => resolve_config(a).and_then(|c| cmd_compare(&c)).map(|r| {
            println!("kendall_tau={} spearman_rho={}", r.kendall_tau, r.spearman_rho);
        }),
        Cmd::Actor(a) => {
            resolve_config(&a.common).and_then(|c| cmd_actor(&c, &a.actor_id, &a.listen))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
