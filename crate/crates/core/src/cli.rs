//! Command-line entry point.
//!
//! Every subcommand reads a TOML run manifest (all sections optional),
//! applies `--override key=value` edits, writes tab-separated reports into
//! the output directory and finishes with `run.json` recording the seed,
//! the SHA-256 of the effective configuration and the crate version.

mod backend;
mod commands;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::activationstore::Position;
use crate::choicemodel::FitConfig;
use crate::corpus::ASSISTANT;
use crate::error::{Error, Result};
use crate::interventions::{PatchCondition, SteeringMode, DEFAULT_COEFFICIENT_CAP};
use crate::probekit::{default_alpha_grid, ProbeOptions};
use crate::seeding::sha256_hex;
use crate::simbackend::BackendConfig;

pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "prefvec", version, about = "Revealed-preference utilities, probes and interventions")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    FitUtilities,
    TrainProbe,
    EvalProbe,
    SweepPositions,
    TransferMatrix,
    ProbeBias,
    PersonaSelect,
    Diversity,
    PairedDelta,
    Discriminate,
    Inlp,
    Steer,
    LayerSweep,
    Ablate,
    Patch,
    /// Synthetic backend end to end.
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::FitUtilities => "fit-utilities",
            Command::TrainProbe => "train-probe",
            Command::EvalProbe => "eval-probe",
            Command::SweepPositions => "sweep-positions",
            Command::TransferMatrix => "transfer-matrix",
            Command::ProbeBias => "probe-bias",
            Command::PersonaSelect => "persona-select",
            Command::Diversity => "diversity",
            Command::PairedDelta => "paired-delta",
            Command::Discriminate => "discriminate",
            Command::Inlp => "inlp",
            Command::Steer => "steer",
            Command::LayerSweep => "layer-sweep",
            Command::Ablate => "ablate",
            Command::Patch => "patch",
            Command::Simulate => "simulate",
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub tasks: Option<PathBuf>,
    pub personas: Option<PathBuf>,
    pub choices: Option<PathBuf>,
    /// Directory holding an activation manifest.
    pub activations: Option<PathBuf>,
    /// `utilities.tsv` as written by `fit-utilities`.
    pub utilities: Option<PathBuf>,
    pub probe: Option<PathBuf>,
    /// JSON lines of stimulus scores for `paired-delta` and `discriminate`.
    pub scores: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeStage {
    pub persona: String,
    pub layer: usize,
    pub position: Position,
    pub validation: f64,
    pub test: f64,
    pub alpha_grid: Vec<f64>,
    pub standardize: bool,
    pub internal_validation: f64,
}

impl Default for ProbeStage {
    fn default() -> Self {
        ProbeStage {
            persona: ASSISTANT.into(),
            layer: 6,
            position: Position::EndOfTurn,
            validation: 0.2,
            test: 0.2,
            alpha_grid: default_alpha_grid(),
            standardize: false,
            internal_validation: 0.2,
        }
    }
}

impl ProbeStage {
    pub fn options(&self, seed: u64) -> ProbeOptions {
        ProbeOptions {
            alpha_grid: self.alpha_grid.clone(),
            standardize: self.standardize,
            internal_validation: self.internal_validation,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepStage {
    /// Empty means every layer in the activation manifest.
    pub layers: Vec<usize>,
    /// Empty means every position in the activation manifest.
    pub positions: Vec<Position>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonaStage {
    /// Empty means every persona with utilities.
    pub personas: Vec<String>,
    pub reference: String,
    /// Empty means every persona.
    pub observers: Vec<String>,
    pub threshold: f64,
    pub target_count: usize,
    pub total_size: usize,
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Condition in the scores file used as the external baseline.
    pub baseline: Option<String>,
}

impl Default for PersonaStage {
    fn default() -> Self {
        PersonaStage {
            personas: Vec::new(),
            reference: ASSISTANT.into(),
            observers: Vec::new(),
            threshold: 0.75,
            target_count: 4,
            total_size: 2000,
            counts: vec![1, 2, 4],
            seeds: vec![0, 1, 2],
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InlpStage {
    pub iterations: usize,
    pub loo: bool,
}

impl Default for InlpStage {
    fn default() -> Self {
        InlpStage { iterations: 5, loo: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSource {
    /// The backend's mean planted direction.
    Planted,
    /// The weight vector of `paths.probe`.
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateStage {
    pub n_tasks: usize,
    pub n_topics: usize,
    pub harmful_fraction: f64,
    pub pairs_per_task: usize,
    pub trials: usize,
    /// Layers exported to the activation tree; empty means the read window.
    pub export_layers: Vec<usize>,
    pub steer: bool,
    pub patch: bool,
}

impl Default for SimulateStage {
    fn default() -> Self {
        SimulateStage {
            n_tasks: 300,
            n_topics: 14,
            harmful_fraction: 0.0,
            pairs_per_task: 20,
            trials: 5,
            export_layers: Vec::new(),
            steer: true,
            patch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionStage {
    pub direction: DirectionSource,
    pub personas: Vec<String>,
    pub n_pairs: usize,
    pub trials: usize,
    pub coefficients: Vec<f64>,
    pub modes: Vec<SteeringMode>,
    pub layer: usize,
    pub cap: Option<f64>,
    /// Layers for `layer-sweep` and `ablate`; empty means all.
    pub layers: Vec<usize>,
    pub sweep_coefficient: f64,
    pub n_random: usize,
    pub conditions: Vec<PatchCondition>,
    pub patch_all_layers: bool,
    pub patch_single_layers: Vec<usize>,
}

impl Default for InterventionStage {
    fn default() -> Self {
        InterventionStage {
            direction: DirectionSource::Planted,
            personas: vec![ASSISTANT.into()],
            n_pairs: 100,
            trials: 5,
            coefficients: vec![-0.06, -0.03, 0.0, 0.03, 0.06],
            modes: vec![SteeringMode::BothTasksContrastive],
            layer: 0,
            cap: Some(DEFAULT_COEFFICIENT_CAP),
            layers: Vec::new(),
            sweep_coefficient: 0.06,
            n_random: 10,
            conditions: PatchCondition::ALL.to_vec(),
            patch_all_layers: true,
            patch_single_layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    pub paths: Paths,
    pub fit: FitConfig,
    pub probe: ProbeStage,
    pub sweep: SweepStage,
    pub personas: PersonaStage,
    pub inlp: InlpStage,
    pub backend: BackendConfig,
    pub simulate: SimulateStage,
    pub interventions: InterventionStage,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` edits to a TOML table. Values are parsed as TOML
/// and fall back to bare strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let mut node = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

/// A manifest with overrides applied and paths resolved against `base`.
#[derive(Debug, Clone)]
pub struct ResolvedManifest {
    pub manifest: RunManifest,
    pub base: PathBuf,
    pub config_sha256: String,
}

impl ResolvedManifest {
    pub fn path(&self, p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::Config(format!("paths.{what} is required for this command")))?;
        let full = if p.is_absolute() { p.clone() } else { self.base.join(p) };
        if !full.exists() {
            return Err(Error::Config(format!("paths.{what} = {} does not exist", full.display())));
        }
        Ok(full)
    }

    pub fn seed(&self) -> u64 {
        self.manifest.seed
    }
}

pub fn load_manifest(path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<ResolvedManifest> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            (t, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    apply_overrides(&mut table, overrides)?;
    let mut manifest: RunManifest = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        manifest.seed = s;
    }
    if let Some(o) = out {
        manifest.paths.out = Some(o.to_path_buf());
    }
    manifest.fit.seed = manifest.seed;
    manifest.backend.validate()?;
    let mut hashed = manifest.clone();
    hashed.paths.out = None;
    let canonical = serde_json::to_string(&hashed).map_err(|e| Error::Format(e.to_string()))?;
    Ok(ResolvedManifest {
        config_sha256: sha256_hex(canonical.as_bytes()),
        manifest,
        base,
    })
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

/// Text form of a report cell.
pub trait Cell {
    fn cell(&self) -> String;
}

impl Cell for f64 {
    fn cell(&self) -> String {
        format!("{self}")
    }
}

impl Cell for usize {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for bool {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for str {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for String {
    fn cell(&self) -> String {
        self.clone()
    }
}

impl<T: Cell + ?Sized> Cell for &T {
    fn cell(&self) -> String {
        (**self).cell()
    }
}

impl<T: Cell> Cell for Option<T> {
    fn cell(&self) -> String {
        self.as_ref().map_or_else(String::new, Cell::cell)
    }
}

#[macro_export]
#[doc(hidden)]
macro_rules! row {
    ($($x:expr),* $(,)?) => {
        vec![$($crate::cli::Cell::cell(&$x)),*]
    };
}

pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn tsv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.record(name);
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Necessary)
            .from_path(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let werr = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(header).map_err(werr)?;
        for r in rows {
            if r.len() != header.len() {
                return Err(Error::invalid(format!("{name}: row has {} cells, header {}", r.len(), header.len())));
            }
            w.write_record(r).map_err(werr)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        self.text(name, &(text + "\n"))
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<()> {
        let path = self.record(name);
        crate::corpus::write_jsonl(&path, records)
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.record(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Register a file written by other means.
    pub fn note(&mut self, name: &str) {
        self.files.push(name.to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub version: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub status: String,
    pub kind: String,
    pub message: String,
}

impl ErrorRecord {
    pub fn new(e: &Error) -> Self {
        ErrorRecord {
            status: "error".into(),
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

pub struct Ctx {
    pub m: ResolvedManifest,
    pub out: Output,
}

impl Ctx {
    pub fn cfg(&self) -> &RunManifest {
        &self.m.manifest
    }
}

/// Run one subcommand and return its run record.
pub fn run(args: &Args) -> Result<RunRecord> {
    let m = load_manifest(args.manifest.as_deref(), &args.overrides, args.seed, args.out.as_deref())?;
    let out_dir = m.manifest.paths.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let out_dir = if out_dir.is_absolute() || args.out.is_some() {
        out_dir
    } else {
        m.base.join(out_dir)
    };
    let mut ctx = Ctx {
        out: Output::create(&out_dir)?,
        m,
    };
    let command = args.command;
    let work = |ctx: &mut Ctx| match command {
        Command::FitUtilities => commands::fit_utilities(ctx),
        Command::TrainProbe => commands::train_probe(ctx),
        Command::EvalProbe => commands::eval_probe(ctx),
        Command::SweepPositions => commands::sweep_positions(ctx),
        Command::TransferMatrix => commands::transfer(ctx),
        Command::ProbeBias => commands::probe_bias(ctx),
        Command::PersonaSelect => commands::persona_select(ctx),
        Command::Diversity => commands::diversity(ctx),
        Command::PairedDelta => commands::paired_delta(ctx),
        Command::Discriminate => commands::discriminate(ctx),
        Command::Inlp => commands::inlp(ctx),
        Command::Steer => backend::steer(ctx),
        Command::LayerSweep => backend::layer_sweep(ctx),
        Command::Ablate => backend::ablate(ctx),
        Command::Patch => backend::patch(ctx),
        Command::Simulate => backend::simulate(ctx),
    };
    match args.jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| work(&mut ctx))?;
        }
        None => work(&mut ctx)?,
    }
    let record = RunRecord {
        command: command.name().into(),
        seed: ctx.m.seed(),
        config_sha256: ctx.m.config_sha256.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        files: ctx.out.files.clone(),
    };
    ctx.out.json(RUN_RECORD, &record)?;
    Ok(record)
}

/// Process entry: parse, run, and print a JSON error record on failure.
pub fn main_with(args: Args) -> i32 {
    match run(&args) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&ErrorRecord::new(&e)).expect("error record serialises"));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let mut t = toml::Table::new();
        apply_overrides(
            &mut t,
            &[
                "backend.noise_scale=0.1".into(),
                "probe.position=role_marker".into(),
                "seed=7".into(),
                "personas.counts=[1, 3]".into(),
            ],
        )
        .unwrap();
        let m: RunManifest = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(m.backend.noise_scale, 0.1);
        assert_eq!(m.probe.position, Position::RoleMarker);
        assert_eq!(m.seed, 7);
        assert_eq!(m.personas.counts, vec![1, 3]);
        let mut t = toml::Table::new();
        assert!(apply_overrides(&mut t, &["novalue".into()]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let t: toml::Table = toml::from_str("[probe]\nlayr = 3\n").unwrap();
        assert!(toml::Value::Table(t).try_into::<RunManifest>().is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = load_manifest(None, &[], Some(1), None).unwrap();
        let b = load_manifest(None, &[], Some(1), None).unwrap();
        let c = load_manifest(None, &[], Some(2), None).unwrap();
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
    }
}
