//! The `aimcot` command line: generation, ablations, trace analysis, probes and overlays.
//!
//! Exit codes are shared by every subcommand: 0 success, 2 configuration or usage error,
//! 3 backend failure, 4 data error.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use aimcot_core::backend::sim::{SimOracle, SimOracleSpec};
use aimcot_core::backend::wire::{serve, ExecBackend};
use aimcot_core::backend::StepBackend;
use aimcot_core::config::{ConfigSources, Resolved};
use aimcot_core::experiments::{self, AblationMode, DEFAULT_QUESTION};
use aimcot_core::orchestrator::{generate, mask_probe, Request};
use aimcot_core::stats::{analysis, TTestVariant};
use aimcot_core::trace::{read_traces, write_trace, TraceRecord};
use aimcot_core::{render, Error};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;
pub const EXIT_DATA: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Backend(_) => EXIT_BACKEND,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Template(_) | Error::Geometry(_) | Error::Index(_) | Error::Capacity { .. } => {
                CliError::Config(msg)
            }
            Error::Backend(_) | Error::Step { .. } | Error::Contract(_) | Error::Shape(_) | Error::Mapping(_) => {
                CliError::Backend(msg)
            }
            Error::ConstantInput | Error::InsufficientData(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) => {
                CliError::Data(msg)
            }
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "aimcot", version, about = "Information-gain guided interleaved visual chain-of-thought")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate responses and write their traces.
    Generate(GenerateArgs),
    /// Compare CAG / selection / trigger variants on planted-evidence instances.
    Ablate(AblateArgs),
    /// Synchronized-insertion correlation, group analysis and region sources over traces.
    Analyze(AnalyzeArgs),
    /// Diminishing-returns probe batch with an exact binomial test per row.
    SubmodProbe(SubmodArgs),
    /// Masks the most attended cells before generation and reports the evidence loss.
    MaskSweep(MaskArgs),
    /// Draw the regions of one insertion over the analysis grid as SVG.
    Render(RenderArgs),
    /// Print the resolved configuration.
    ShowConfig(ConfigArgs),
    /// Serve the simulated oracle over stdin/stdout.
    ServeSim,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a key, e.g. `--set trigger.delta=0.2`. Applied after the file and environment.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// `sim` or `exec:<command>`; external backends are initialized with the oracle spec.
    #[arg(long, default_value = "sim")]
    pub backend: String,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value = DEFAULT_QUESTION)]
    pub question: String,
    #[arg(long, default_value = "q0000")]
    pub question_id: String,
    /// Mask the K most attended cells before generating.
    #[arg(long, default_value_t = 0)]
    pub mask: usize,
    /// Generate N planted-evidence instances and also write `scores.tsv` (evidence recall).
    #[arg(long)]
    pub questions: Option<u64>,
    /// Evidence cells per planted instance.
    #[arg(long, default_value_t = 3)]
    pub evidence: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated modes (aimcot, wo_cag, wo_avp, wo_dat or e.g. nocag-topk-newline).
    /// Omitted: the full 2x2x2 matrix.
    #[arg(long)]
    pub modes: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    #[arg(long, default_value_t = 3)]
    pub evidence: usize,
    /// Also write the rows as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub traces: Vec<PathBuf>,
    /// Lines of `question_id<TAB>score`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub quantile: f64,
    #[arg(long)]
    pub welch: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SubmodArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 60)]
    pub n: u64,
    #[arg(long = "k-small", value_delimiter = ',', default_value = "2,3,4,5")]
    pub k_small: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub evidence: usize,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long = "k-mask", value_delimiter = ',', default_value = "0,1,5,10,20")]
    pub k_mask: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 3)]
    pub evidence: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Which response of the trace file.
    #[arg(long, default_value_t = 0)]
    pub record: usize,
    /// Which insertion of that response.
    #[arg(long, default_value_t = 0)]
    pub insertion: usize,
    /// Image reference embedded under the overlay.
    #[arg(long)]
    pub image: Option<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the subcommand. `env` supplies `AIMCOT_*` overrides.
pub fn run<I, T>(args: I, env: Vec<(String, String)>, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, &env, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, env: &[(String, String)], out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Generate(a) => cmd_generate(&a, env, out, err),
        Command::Ablate(a) => cmd_ablate(&a, env, out),
        Command::Analyze(a) => cmd_analyze(&a, out),
        Command::SubmodProbe(a) => cmd_submod_probe(&a, env, out),
        Command::MaskSweep(a) => cmd_mask_sweep(&a, env, out),
        Command::Render(a) => cmd_render(&a, out),
        Command::ShowConfig(a) => {
            let resolved = resolve(&a, env)?;
            let text = serde_json::to_string_pretty(&resolved.echo()).map_err(|e| CliError::Data(e.to_string()))?;
            emit(out, &format!("{text}\n"))
        }
        Command::ServeSim => {
            let stdin = std::io::stdin();
            serve(init_sim, stdin.lock(), out).map_err(|e| CliError::Backend(e.to_string()))
        }
    }
}

fn init_sim(config: &serde_json::Value) -> aimcot_core::Result<SimOracle> {
    SimOracle::new(serde_json::from_value(config.clone())?)
}

fn read_input(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Data(format!("cannot write output: {e}")))
}

/// Defaults, then the config file, environment, `--set` entries and `--seed`.
pub fn resolve(args: &ConfigArgs, env: &[(String, String)]) -> CliResult<Resolved> {
    let file = args.config.as_deref().map(|p| read_input(p, "config file")).transpose()?;
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let sources = ConfigSources { file, overrides, ..Default::default() }.with_env(env.iter().cloned());
    Ok(sources.resolve()?)
}

/// Opens the backend named by `kind` for one generation.
pub fn open_backend(kind: &str, spec: &SimOracleSpec) -> CliResult<Box<dyn StepBackend>> {
    if kind == "sim" {
        return Ok(Box::new(SimOracle::new(spec.clone())?));
    }
    let Some(command) = kind.strip_prefix("exec:") else {
        return Err(CliError::Config(format!("unknown backend {kind:?}; expected sim or exec:<command>")));
    };
    let config = serde_json::to_value(spec).map_err(|e| CliError::Config(e.to_string()))?;
    let backend = ExecBackend::spawn(command, config).map_err(|e| CliError::Backend(e.to_string()))?;
    Ok(Box::new(backend))
}

pub fn cmd_generate(
    args: &GenerateArgs,
    env: &[(String, String)],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult {
    let resolved = resolve(&args.config, env)?;
    let echo = resolved.echo();
    let jobs: Vec<(String, aimcot_core::config::RunConfig, SimOracleSpec)> = match args.questions {
        None => vec![(args.question_id.clone(), resolved.run.clone(), resolved.sim_spec()?)],
        Some(n) => (0..n)
            .map(|i| {
                let seed = resolved.run.seed.wrapping_add(i);
                let spec = experiments::planted_spec(&resolved, args.evidence, seed)?;
                let run = aimcot_core::config::RunConfig { seed, ..resolved.run.clone() };
                Ok((format!("q{i:04}"), run, spec))
            })
            .collect::<aimcot_core::Result<_>>()?,
    };

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", args.out.display())))?;
    let mut traces = Vec::new();
    let mut responses = String::new();
    let mut scores = String::new();
    let mut failure = None;
    for (id, run, spec) in &jobs {
        let mut backend = open_backend(&args.backend, spec)?;
        let request = Request::new(id.clone(), args.question.clone());
        let outcome = if args.mask > 0 {
            mask_probe(&mut backend, &request, args.mask, run, echo.clone())?
        } else {
            generate(&mut backend, &request, run, echo.clone())?
        };
        let trace = outcome.trace;
        write_trace(&mut traces, &trace)?;
        if jobs.len() == 1 {
            responses.push_str(&trace.response);
        } else {
            responses.push_str(&format!("[{id}]\n{}\n", trace.response));
        }
        let recall = experiments::evidence_recall(&trace, &spec.evidence_cells);
        scores.push_str(&format!("{id}\t{recall}\n"));
        let _ = writeln!(err, "{id}: {} tokens, {} insertions", trace.entries.len(), trace.insertion_count());
        if let Some(e) = outcome.error {
            failure = Some(e);
            break;
        }
    }
    write_output(&args.out.join("trace.jsonl"), &traces)?;
    write_output(&args.out.join("response.txt"), responses.as_bytes())?;
    if args.questions.is_some() {
        write_output(&args.out.join("scores.tsv"), scores.as_bytes())?;
    }
    if let Some(e) = failure {
        return Err(CliError::Backend(format!("{e} (partial trace written)")));
    }
    emit(out, &format!("{}\n", args.out.join("trace.jsonl").display()))
}

pub fn cmd_ablate(args: &AblateArgs, env: &[(String, String)], out: &mut dyn Write) -> CliResult {
    let modes = match &args.modes {
        None => AblationMode::full_matrix(),
        Some(list) => {
            let names: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if names.is_empty() {
                return Err(CliError::Config("--modes needs at least one mode".into()));
            }
            names.into_iter().map(AblationMode::parse).collect::<aimcot_core::Result<_>>()?
        }
    };
    let resolved = resolve(&args.config, env)?;
    let seed = resolved.run.seed;
    let rows = experiments::ablation(&resolved, &modes, args.evidence, seed..seed + args.seeds)?;
    if let Some(path) = &args.json {
        write_output(path, &serde_json::to_vec_pretty(&rows).map_err(|e| CliError::Data(e.to_string()))?)?;
    }
    emit(out, &experiments::render_ablation_table(&rows))
}

fn load_traces(paths: &[PathBuf]) -> CliResult<Vec<TraceRecord>> {
    let mut all = Vec::new();
    for p in paths {
        let file =
            fs::File::open(p).map_err(|e| CliError::Config(format!("cannot read trace file {}: {e}", p.display())))?;
        let traces = read_traces(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        all.extend(traces);
    }
    Ok(all)
}

pub fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> CliResult {
    let scores_text = read_input(&args.scores, "score file")?;
    let traces = load_traces(&args.traces)?;
    let scores =
        analysis::parse_scores(&scores_text).map_err(|e| CliError::Data(format!("{}: {e}", args.scores.display())))?;
    let variant = if args.welch { TTestVariant::Welch } else { TTestVariant::Student };
    let report = analysis::analyze(&traces, &scores, args.quantile, variant)?;
    if let Some(path) = &args.json {
        write_output(path, &serde_json::to_vec_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?)?;
    }
    emit(out, &analysis::render_report(&report))
}

pub fn cmd_submod_probe(args: &SubmodArgs, env: &[(String, String)], out: &mut dyn Write) -> CliResult {
    if args.k_small.is_empty() {
        return Err(CliError::Config("--k-small needs at least one value".into()));
    }
    let resolved = resolve(&args.config, env)?;
    let rows = experiments::submodularity_batch(&resolved, args.evidence, args.n, &args.k_small, resolved.run.seed)?;
    if let Some(path) = &args.json {
        write_output(path, &serde_json::to_vec_pretty(&rows).map_err(|e| CliError::Data(e.to_string()))?)?;
    }
    emit(out, &experiments::render_submod_table(&rows))
}

pub fn cmd_mask_sweep(args: &MaskArgs, env: &[(String, String)], out: &mut dyn Write) -> CliResult {
    let resolved = resolve(&args.config, env)?;
    let seed = resolved.run.seed;
    let rows = experiments::mask_sweep(&resolved, args.evidence, &args.k_mask, seed..seed + args.seeds)?;
    emit(out, &experiments::render_mask_table(&rows))
}

pub fn cmd_render(args: &RenderArgs, out: &mut dyn Write) -> CliResult {
    let traces = load_traces(std::slice::from_ref(&args.trace))?;
    let trace = traces.get(args.record).ok_or_else(|| {
        CliError::Data(format!("{} holds {} responses, no index {}", args.trace.display(), traces.len(), args.record))
    })?;
    let grid = Resolved::from_echo(&trace.config)
        .and_then(|r| r.run.grid())
        .map_err(|e| CliError::Data(format!("trace config echo: {e}")))?;
    let insertions: Vec<_> = trace.insertions().map(|(_, ins)| ins).collect();
    let insertion = match insertions.get(args.insertion) {
        Some(ins) => Some(*ins),
        None if insertions.is_empty() => None,
        None => {
            return Err(CliError::Data(format!(
                "response has {} insertions, no index {}",
                insertions.len(),
                args.insertion
            )))
        }
    };
    let svg = render::render_svg(&grid, args.image.as_deref(), insertion);
    match &args.out {
        Some(path) => write_output(path, svg.as_bytes()),
        None => emit(out, &svg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (u8, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("aimcot").chain(args.iter().copied()), vec![], &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&["no-such-command"]).0, EXIT_CONFIG);
        assert_eq!(run_args(&["generate", "--set"]).0, EXIT_CONFIG);
    }

    #[test]
    fn help_exits_0() {
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("generate"));
    }

    #[test]
    fn unknown_key_is_config_error() {
        let (code, _, err) = run_args(&["show-config", "--set", "no.such=1"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("no.such"));
    }

    #[test]
    fn env_layer_sits_below_overrides() {
        let env = vec![("AIMCOT_TRIGGER__DELTA".to_string(), "0.3".to_string())];
        let r = resolve(&ConfigArgs::default(), &env).unwrap();
        assert_eq!(r.run.trigger.delta, 0.3);
        let args = ConfigArgs { overrides: vec!["delta=0.4".into()], ..Default::default() };
        assert_eq!(resolve(&args, &env).unwrap().run.trigger.delta, 0.4);
    }

    #[test]
    fn seed_flag_wins_over_set() {
        let args = ConfigArgs { overrides: vec!["seed=1".into()], seed: Some(9), ..Default::default() };
        assert_eq!(resolve(&args, &[]).unwrap().run.seed, 9);
    }

    #[test]
    fn error_classes() {
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::from(Error::InsufficientData("x".into())).exit_code(), EXIT_DATA);
        let b = aimcot_core::BackendError::Transport("x".into());
        assert_eq!(CliError::from(Error::Backend(b)).exit_code(), EXIT_BACKEND);
    }

    #[test]
    fn unknown_backend_kind() {
        let spec = Resolved::defaults().sim_spec().unwrap();
        assert!(matches!(open_backend("grpc:x", &spec), Err(CliError::Config(_))));
    }
}
