//! Command-line interface: argument grammar, dispatch, report rendering and
//! exit codes.
//!
//! With `--json` every command prints exactly one JSON object on standard
//! output; errors always go to standard error.

mod scaffold;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{self, BufRead, IsTerminal, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use bytesize::ByteSize;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::census::{self, Exclusions, OutputFormat};
use crate::container;
use crate::data::{self, CleanOptions, FetchOptions, FetchStatus, HttpTransport, PackSelection, DEFAULT_FETCH_JOBS};
use crate::error::{Error, EXIT_OK, EXIT_USAGE};
use crate::manifest::ProjectManifest;
use crate::package::{self, ReplayOptions};
use crate::workflow::{self, RunOptions};

pub use scaffold::{scaffold_new, SKELETON};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("target directory {} is not empty", .0.display())]
    TargetNotEmpty(PathBuf),
    #[error("refusing to delete {size} without confirmation (threshold {threshold}); pass --yes")]
    ConfirmationRequired { size: String, threshold: String },
    #[error("deletion cancelled")]
    Cancelled,
    #[error("{failed} of {total} remote files could not be fetched")]
    FetchFailed { failed: usize, total: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Parser)]
#[command(name = "kerblam", version, about = "Manage data-analysis projects", propagate_version = true)]
pub struct Cli {
    /// Print one machine-readable JSON report on standard output
    #[arg(long, global = true)]
    pub json: bool,
    /// Increase log verbosity (repeatable)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Start project discovery from this directory instead of the current one
    #[arg(short = 'C', long = "project-dir", global = true, value_name = "DIR")]
    pub project_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a new project skeleton
    New {
        dir: PathBuf,
        /// Project name used in the README (defaults to the directory name)
        #[arg(long)]
        name: Option<String>,
    },
    /// Download remote input files
    Fetch {
        /// Parallel downloads
        #[arg(short, long, default_value_t = DEFAULT_FETCH_JOBS, value_parser = clap::value_parser!(usize))]
        jobs: usize,
        /// Download even files that are already present
        #[arg(long)]
        force: bool,
    },
    /// Show data statistics, or clean or pack the data directory
    Data {
        #[command(subcommand)]
        action: Option<DataCommand>,
    },
    /// Run a workflow
    Run {
        workflow: Option<String>,
        /// Input profile to swap in for the duration of the run
        #[arg(short, long)]
        profile: Option<String>,
        /// Run inside the workflow's container image
        #[arg(long)]
        container: bool,
    },
    /// Build a replay package for a workflow
    Package {
        workflow: Option<String>,
        /// Tarball path (default: <project>-<workflow>.replay.tar.gz)
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Recreate and run a packaged analysis in a fresh directory
    Replay {
        archive: PathBuf,
        dir: PathBuf,
        /// Verify the package and show what would happen
        #[arg(long)]
        dry_run: bool,
    },
    /// Frequency analysis of the structure of many project templates
    Census(CensusArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Delete recreatable data; precious inputs are never touched
    Clean {
        /// Keep downloaded remote inputs
        #[arg(long)]
        keep_remote: bool,
        /// List what would be deleted without deleting
        #[arg(long)]
        dry_run: bool,
        /// Skip the confirmation for large deletions
        #[arg(short, long)]
        yes: bool,
        /// Deletions larger than this need confirmation
        #[arg(long, default_value = "1GiB", value_parser = parse_size)]
        confirm_threshold: ByteSize,
    },
    /// Archive a selection of data files into a tarball
    Pack {
        #[arg(long, value_enum, default_value_t = Selection::Precious)]
        select: Selection,
        /// Tarball path (default: <project>-<selection>.tar.gz)
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Selection {
    Precious,
    Output,
}

impl From<Selection> for PackSelection {
    fn from(value: Selection) -> Self {
        match value {
            Selection::Precious => PackSelection::Precious,
            Selection::Output => PackSelection::Output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Dot,
    Csv,
}

#[derive(Debug, Args)]
pub struct CensusArgs {
    /// Template directories or listing files
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Drop entries present in fewer templates than this
    #[arg(long, default_value_t = census::DEFAULT_MIN_COUNT as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub min_count: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Extra glob to strip from every listing (repeatable)
    #[arg(long, value_name = "GLOB")]
    pub exclude: Vec<String>,
    /// Do not strip `.git` contents and `.gitkeep` files
    #[arg(long)]
    pub no_default_excludes: bool,
    /// Print uniqueness statistics of the unthresholded tree instead
    #[arg(long)]
    pub stats: bool,
}

fn parse_size(raw: &str) -> Result<ByteSize, String> {
    raw.trim().parse::<ByteSize>()
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

/// The parent ignores Ctrl-C so it can clean up after the interrupted
/// child (which receives the signal itself) and report its status.
fn install_interrupt_handler() {
    if let Err(err) = ctrlc::set_handler(|| INTERRUPTED.store(true, Ordering::SeqCst)) {
        log::debug!("no interrupt handler: {err}");
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let mut builder = env_logger::Builder::new();
    builder.filter_level(level).format_timestamp(None).parse_env("KERBLAM_LOG");
    if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        builder.write_style(env_logger::WriteStyle::Never);
    }
    let _ = builder.try_init();
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = err.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let json_mode = cli.json;
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            report_error(&err, json_mode);
            err.exit_code()
        }
    }
}

fn report_error(err: &Error, json_mode: bool) {
    let mut stderr = io::stderr().lock();
    if json_mode {
        let body = json!({
            "error": { "kind": err.kind(), "message": err.to_string(), "exit_code": err.exit_code() }
        });
        let _ = writeln!(stderr, "{body}");
    } else {
        let _ = writeln!(stderr, "error: {err}");
    }
}

struct Output {
    json: bool,
}

impl Output {
    /// Prints `report` as JSON, or `human` otherwise.
    fn emit<T: Serialize>(&self, report: &T, human: impl FnOnce() -> String) -> Result<(), Error> {
        let mut stdout = io::stdout().lock();
        let text = if self.json {
            let mut text = serde_json::to_string_pretty(report).expect("reports serialize");
            text.push('\n');
            text
        } else {
            human()
        };
        stdout
            .write_all(text.as_bytes())
            .and_then(|_| stdout.flush())
            .map_err(|source| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })?;
        Ok(())
    }
}

fn start_dir(cli_dir: &Option<PathBuf>) -> Result<PathBuf, Error> {
    match cli_dir {
        Some(dir) => Ok(dir.clone()),
        None => std::env::current_dir().map_err(|source| {
            Error::Cli(CliError::Io {
                path: PathBuf::from("."),
                source,
            })
        }),
    }
}

fn load_project(cli_dir: &Option<PathBuf>) -> Result<ProjectManifest, Error> {
    Ok(ProjectManifest::discover(&start_dir(cli_dir)?)?)
}

pub fn dispatch(cli: Cli) -> Result<i32, Error> {
    let out = Output { json: cli.json };
    match cli.command {
        Command::New { dir, name } => {
            let dir = match &cli.project_dir {
                Some(base) if dir.is_relative() => base.join(dir),
                _ => dir,
            };
            let name = name.unwrap_or_else(|| {
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "project".into())
            });
            let created = scaffold_new(&dir, &name)?;
            let report = json!({ "project": dir, "created": created });
            out.emit(&report, || {
                let mut text = format!("created project `{name}` in {}\n", dir.display());
                for path in &created {
                    let _ = writeln!(text, "  {path}");
                }
                text
            })?;
            Ok(EXIT_OK)
        }
        Command::Fetch { jobs, force } => {
            let manifest = load_project(&cli.project_dir)?;
            let report = data::fetch(&manifest, &HttpTransport::new(), FetchOptions { jobs, force });
            out.emit(&report, || render_fetch(&report))?;
            let failed = report.failures().count();
            if failed > 0 {
                return Err(CliError::FetchFailed {
                    failed,
                    total: report.outcomes.len(),
                }
                .into());
            }
            Ok(EXIT_OK)
        }
        Command::Data { action: None } => {
            let manifest = load_project(&cli.project_dir)?;
            let stats = data::stats(&manifest);
            out.emit(&stats, || render_stats(&stats))?;
            Ok(EXIT_OK)
        }
        Command::Data {
            action:
                Some(DataCommand::Clean {
                    keep_remote,
                    dry_run,
                    yes,
                    confirm_threshold,
                }),
        } => {
            let manifest = load_project(&cli.project_dir)?;
            let plan = data::clean_plan(&manifest, keep_remote)?;
            if !dry_run && !yes && plan.bytes > confirm_threshold.as_u64() {
                confirm_deletion(plan.deleted.len(), plan.bytes, confirm_threshold)?;
            }
            let report = if dry_run {
                plan
            } else {
                data::clean(&manifest, CleanOptions { keep_remote, dry_run })?
            };
            out.emit(&report, || render_clean(&report))?;
            Ok(EXIT_OK)
        }
        Command::Data {
            action: Some(DataCommand::Pack { select, output }),
        } => {
            let manifest = load_project(&cli.project_dir)?;
            let selection = PackSelection::from(select);
            let dest = output.unwrap_or_else(|| {
                PathBuf::from(format!("{}-{}.tar.gz", manifest.project_name(), selection_name(select)))
            });
            let report = data::pack(&manifest, selection, &dest)?;
            out.emit(&report, || {
                format!(
                    "packed {} files ({}) into {}\n",
                    report.entries.len(),
                    ByteSize(report.bytes),
                    report.archive.display()
                )
            })?;
            Ok(EXIT_OK)
        }
        Command::Run {
            workflow,
            profile,
            container,
        } => {
            let manifest = load_project(&cli.project_dir)?;
            install_interrupt_handler();
            let options = RunOptions {
                profile,
                containerized: container,
                engine: None,
                stdout_to_stderr: cli.json,
            };
            let outcome = workflow::run(&manifest, workflow.as_deref(), &options)?;
            out.emit(&outcome, || {
                let mut text = format!("workflow `{}` finished with status {}\n", outcome.workflow, outcome.status);
                if outcome.recovered_swap {
                    text.insert_str(0, "reverted a profile swap left by an interrupted run\n");
                }
                text
            })?;
            Ok(EXIT_OK)
        }
        Command::Package { workflow, output } => {
            let manifest = load_project(&cli.project_dir)?;
            let descriptor = workflow::resolve_workflow(&manifest, workflow.as_deref())?;
            let dest = output.unwrap_or_else(|| {
                PathBuf::from(format!("{}-{}.replay.tar.gz", manifest.project_name(), descriptor.name))
            });
            let engine = container::detect_engine(&manifest.execution.engines)?;
            let outcome = package::package(&manifest, Some(&descriptor.name), &dest, &engine)?;
            out.emit(&outcome, || {
                format!(
                    "built image {}\nwrote {} ({} precious files)\n",
                    outcome.image,
                    outcome.archive.display(),
                    outcome.precious_files.len()
                )
            })?;
            Ok(EXIT_OK)
        }
        Command::Replay { archive, dir, dry_run } => {
            install_interrupt_handler();
            let options = ReplayOptions {
                dry_run,
                stdout_to_stderr: cli.json,
                ..ReplayOptions::default()
            };
            let outcome = package::replay(&archive, &dir, None, &HttpTransport::new(), &options)?;
            out.emit(&outcome, || {
                let verb = if dry_run { "would extract" } else { "extracted" };
                let mut text = format!(
                    "{verb} {} precious files and {} remote inputs into {}\n",
                    outcome.extracted.len(),
                    outcome.remote_files.len(),
                    outcome.workdir.display()
                );
                if dry_run {
                    let _ = writeln!(text, "would run image {}", outcome.image);
                } else {
                    let _ = writeln!(text, "image {} finished with status {}", outcome.image, outcome.status);
                }
                text
            })?;
            Ok(EXIT_OK)
        }
        Command::Census(args) => run_census(&args, &out),
    }
}

fn selection_name(selection: Selection) -> &'static str {
    match selection {
        Selection::Precious => "precious",
        Selection::Output => "output",
    }
}

fn confirm_deletion(files: usize, bytes: u64, threshold: ByteSize) -> Result<(), Error> {
    let size = ByteSize(bytes).to_string();
    if !io::stdin().is_terminal() {
        return Err(CliError::ConfirmationRequired {
            size,
            threshold: threshold.to_string(),
        }
        .into());
    }
    eprint!("delete {files} files ({size})? [y/N] ");
    let _ = io::stderr().flush();
    let mut answer = String::new();
    io::stdin().lock().read_line(&mut answer).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdin>"),
        source,
    })?;
    if matches!(answer.trim(), "y" | "Y" | "yes") {
        Ok(())
    } else {
        Err(CliError::Cancelled.into())
    }
}

fn run_census(args: &CensusArgs, out: &Output) -> Result<i32, Error> {
    let mut patterns: Vec<String> = Vec::new();
    if !args.no_default_excludes {
        patterns.extend(census::DEFAULT_EXCLUSIONS.iter().map(|p| (*p).to_owned()));
    }
    patterns.extend(args.exclude.iter().cloned());
    let exclusions = Exclusions::new(&patterns)?;
    let listings: Vec<_> = census::load_inputs(&args.inputs)?
        .iter()
        .map(|l| census::strip_housekeeping(l, &exclusions))
        .collect();
    let tree = census::merge(&listings)?;
    if args.stats {
        let stats = tree.uniqueness();
        let report = json!({ "templates": tree.templates, "uniqueness": stats });
        out.emit(&report, || {
            format!(
                "templates: {}\nentries: {} ({} unique)\ndirectories: {} ({} unique)\n",
                tree.templates, stats.entries, stats.unique_entries, stats.dirs, stats.unique_dirs
            )
        })?;
        return Ok(EXIT_OK);
    }
    let kept = census::threshold(&tree, usize::try_from(args.min_count).unwrap_or(usize::MAX));
    let format = match args.format {
        Format::Json => OutputFormat::Json,
        Format::Dot => OutputFormat::Dot,
        Format::Csv => OutputFormat::Csv,
    };
    let text = census::emit(&kept, format);
    let mut stdout = io::stdout().lock();
    stdout.write_all(text.as_bytes()).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })?;
    Ok(EXIT_OK)
}

fn render_stats(stats: &data::DataStats) -> String {
    let mut text = format!("{:<14}{:<11}{:>8}{:>14}\n", "role", "fragility", "files", "size");
    for bucket in &stats.buckets {
        let _ = writeln!(
            text,
            "{:<14}{:<11}{:>8}{:>14}",
            bucket.role.to_string(),
            bucket.fragility.to_string(),
            bucket.tally.files,
            ByteSize(bucket.tally.bytes).to_string()
        );
    }
    let _ = writeln!(
        text,
        "{:<25}{:>8}{:>14}",
        "total",
        stats.total.files,
        ByteSize(stats.total.bytes).to_string()
    );
    if !stats.declared_missing.is_empty() {
        let _ = writeln!(text, "\nremote files not yet fetched:");
        for path in &stats.declared_missing {
            let _ = writeln!(text, "  {path}");
        }
    }
    render_issues(&mut text, &stats.issues);
    text
}

fn render_issues(text: &mut String, issues: &[data::EntryIssue]) {
    for issue in issues {
        let _ = writeln!(text, "warning: {}: {}", issue.path, issue.message);
    }
}

fn render_clean(report: &data::CleanReport) -> String {
    let verb = if report.dry_run { "would delete" } else { "deleted" };
    let mut text = String::new();
    for path in &report.deleted {
        let _ = writeln!(text, "{verb} {path}");
    }
    for dir in &report.removed_dirs {
        let _ = writeln!(text, "{verb} empty directory {dir}");
    }
    let _ = writeln!(text, "{verb} {} files ({})", report.deleted.len(), ByteSize(report.bytes));
    render_issues(&mut text, &report.issues);
    text
}

fn render_fetch(report: &data::FetchReport) -> String {
    let mut text = String::new();
    for outcome in &report.outcomes {
        let _ = match &outcome.status {
            FetchStatus::Downloaded { bytes, .. } => {
                writeln!(text, "fetched {} ({})", outcome.path, ByteSize(*bytes))
            }
            FetchStatus::Skipped => writeln!(text, "up to date {}", outcome.path),
            FetchStatus::Failed { error } => writeln!(text, "FAILED {}: {error}", outcome.path),
        };
    }
    if report.outcomes.is_empty() {
        text.push_str("no remote files declared\n");
    }
    text
}
