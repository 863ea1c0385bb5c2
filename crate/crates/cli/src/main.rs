use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tracing::{error, info};

use semctl::adapters::verify_contract;
use semctl::artifacts::{
    export_attention_heatmaps, export_stack_heatmaps, write_ablation, write_json, write_result,
};
use semctl::container::{
    archive_from_container, stacks_from_container, Container, ARCHIVE_KIND, STACKS_KIND,
};
use semctl::jobfile::{JobEntry, JobFile};
use semctl::pipeline::{default_ablation_modes, generate, run_ablation_suite, GenerationResult};
use semctl::toy::{build_backbone, BackboneConfig, ToyBackbone};

#[derive(Parser)]
#[command(
    name = "semctl",
    version,
    about = "Attention-guided ControlNet modulation"
)]
struct Cli {
    /// Backbone config JSON; the built-in toy config when omitted.
    #[arg(long, global = true, env = "SEMCTL_BACKBONE_CONFIG")]
    backbone_config: Option<PathBuf>,

    /// Jobs run concurrently.
    #[arg(long, global = true, env = "SEMCTL_WORKERS", default_value_t = 1)]
    workers: usize,

    /// Root for outputs; each job writes to `<dir>/<job id>`.
    #[arg(long, global = true, env = "SEMCTL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Also write attention, mask and bias heatmaps.
    #[arg(long, global = true, env = "SEMCTL_EMIT_HEATMAPS")]
    emit_heatmaps: bool,

    /// Emit logs as JSON lines.
    #[arg(long, global = true, env = "SEMCTL_LOG_JSON")]
    log_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct JobArgs {
    /// Job file to run.
    #[arg(value_name = "JOBFILE", required_unless_present = "jobfile")]
    path: Option<PathBuf>,

    #[arg(long, env = "SEMCTL_JOBFILE", conflicts_with = "path")]
    jobfile: Option<PathBuf>,
}

impl JobArgs {
    fn path(&self) -> &Path {
        self.path
            .as_deref()
            .or(self.jobfile.as_deref())
            .expect("clap enforces a job file")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every job in a job file in its configured mode.
    Generate(JobArgs),
    /// Run every job once per ablation mode with a shared seed.
    Ablate(JobArgs),
    /// Render heatmaps from an archive or stacks container.
    Inspect {
        container: PathBuf,
        /// Token columns to render (archives only); all when omitted.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<usize>,
    },
    /// Run the backbone contract suite.
    Verify {
        /// Overrides `--backbone-config`.
        config: Option<PathBuf>,
    },
}

/// A failure reported as `{"error": {...}}` on stderr.
struct Failure {
    stage: &'static str,
    job: Option<String>,
    error: anyhow::Error,
}

impl Failure {
    fn new(stage: &'static str, error: impl Into<anyhow::Error>) -> Self {
        Self {
            stage,
            job: None,
            error: error.into(),
        }
    }

    fn for_job(mut self, id: &str) -> Self {
        self.job = Some(id.to_string());
        self
    }

    /// The error chain joined with `: `, skipping links already quoted by
    /// their parent.
    fn message(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for link in self.error.chain() {
            let text = link.to_string();
            if !parts.last().is_some_and(|prev| prev.contains(&text)) {
                parts.push(text);
            }
        }
        parts.join(": ")
    }

    fn to_json(&self) -> serde_json::Value {
        let lib = self
            .error
            .chain()
            .find_map(|e| e.downcast_ref::<semctl::Error>());
        let kind = lib.map_or("Cli", |e| e.kind());
        let stage = lib.and_then(|e| e.stage()).unwrap_or(self.stage);
        json!({
            "error": {
                "kind": kind,
                "message": self.message(),
                "stage": stage,
                "job_id": self.job,
            }
        })
    }
}

type CliResult<T> = Result<T, Failure>;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure::new(stage, e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_json);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!(stage = f.stage, job = f.job.as_deref(), "{}", f.message());
            eprintln!("{}", f.to_json());
            ExitCode::FAILURE
        }
    }
}

fn init_logging(json: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr);
    if json {
        builder.json().init();
    } else {
        builder.init();
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(args) => run_jobs(cli, args.path(), false),
        Command::Ablate(args) => run_jobs(cli, args.path(), true),
        Command::Inspect { container, tokens } => inspect(cli, container, tokens),
        Command::Verify { config } => verify(
            config.as_deref().or(cli.backbone_config.as_deref()),
            cli.output_dir.as_deref(),
        ),
    }
}

fn load_backbone(path: Option<&Path>) -> CliResult<ToyBackbone> {
    let config = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .stage("backbone_config")?;
            serde_json::from_str::<BackboneConfig>(&text)
                .map_err(semctl::Error::from)
                .with_context(|| format!("parsing {}", p.display()))
                .stage("backbone_config")?
        }
        None => BackboneConfig::default(),
    };
    build_backbone(&config).stage("backbone_config")
}

#[derive(Serialize)]
struct JobSummary {
    id: String,
    output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    modes: Option<usize>,
}

fn run_jobs(cli: &Cli, jobfile: &Path, ablate: bool) -> CliResult<()> {
    let file = JobFile::load(jobfile)
        .with_context(|| format!("loading {}", jobfile.display()))
        .stage("jobfile")?;
    let base = jobfile.parent().unwrap_or(Path::new(".")).to_path_buf();
    let backbone = load_backbone(cli.backbone_config.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build()
        .stage("workers")?;
    info!(
        jobs = file.jobs.len(),
        workers = cli.workers.max(1),
        command = if ablate { "ablate" } else { "generate" },
        "starting"
    );
    let outcomes: Vec<CliResult<JobSummary>> = pool.install(|| {
        file.jobs
            .par_iter()
            .map(|entry| {
                let out = entry.output_dir(&base, cli.output_dir.as_deref());
                let r = if ablate {
                    ablate_job(entry, &base, &out, &backbone)
                } else {
                    generate_job(entry, &base, &out, &backbone, cli.emit_heatmaps)
                };
                r.map_err(|f| f.for_job(&entry.id))
            })
            .collect()
    });
    let mut summaries = Vec::new();
    let mut first_failure = None;
    for outcome in outcomes {
        match outcome {
            Ok(s) => summaries.push(s),
            Err(f) => {
                error!(job = f.job.as_deref(), stage = f.stage, "{}", f.message());
                first_failure.get_or_insert(f);
            }
        }
    }
    println!(
        "{}",
        json!({ "command": if ablate { "ablate" } else { "generate" }, "jobs": summaries })
    );
    first_failure.map_or(Ok(()), Err)
}

fn generate_job(
    entry: &JobEntry,
    base: &Path,
    out: &Path,
    backbone: &ToyBackbone,
    heatmaps: bool,
) -> CliResult<JobSummary> {
    let job = entry.to_job_spec(base).stage("jobfile")?;
    info!(job = %job.id, mode = %job.mode, steps = job.sampler.steps, "generating");
    let result = generate(&job, backbone).stage("generate")?;
    write_result(&result, out).stage("write")?;
    if heatmaps {
        write_heatmaps(&result, &out.join("heatmaps"))?;
    }
    info!(job = %job.id, hash = %result.metadata.output_hash, dir = %out.display(), "done");
    Ok(JobSummary {
        id: job.id,
        output_dir: out.to_path_buf(),
        output_hash: Some(result.metadata.output_hash),
        modes: None,
    })
}

fn ablate_job(
    entry: &JobEntry,
    base: &Path,
    out: &Path,
    backbone: &ToyBackbone,
) -> CliResult<JobSummary> {
    let job = entry.to_job_spec(base).stage("jobfile")?;
    let modes = entry
        .ablation_modes
        .clone()
        .unwrap_or_else(default_ablation_modes);
    info!(job = %job.id, modes = modes.len(), "ablating");
    let table = run_ablation_suite(&job, &modes, backbone);
    let manifest = write_ablation(&table, out).stage("write")?;
    if let Some(row) = manifest.rows.iter().find(|r| !r.ok) {
        return Err(Failure::new(
            "generate",
            anyhow!(
                "mode {} failed: {}",
                row.mode_label,
                row.error.as_deref().unwrap_or("unknown")
            ),
        ));
    }
    Ok(JobSummary {
        id: job.id,
        output_dir: out.to_path_buf(),
        output_hash: None,
        modes: Some(manifest.rows.len()),
    })
}

fn write_heatmaps(result: &GenerationResult, dir: &Path) -> CliResult<()> {
    if let Some(archive) = &result.archive {
        let m = &result.metadata;
        let tokens: Vec<usize> = m
            .non_conflicting_indices
            .iter()
            .chain(&m.conflicting_indices)
            .copied()
            .collect();
        export_attention_heatmaps(archive, &tokens, dir).stage("heatmaps")?;
    }
    export_stack_heatmaps(
        result.control_stack.as_ref(),
        result.bias_stack.as_ref(),
        dir,
    )
    .stage("heatmaps")?;
    Ok(())
}

fn inspect(cli: &Cli, path: &Path, tokens: &[usize]) -> CliResult<()> {
    let container = Container::load(path).stage("load")?;
    let dir = match &cli.output_dir {
        Some(d) => d.clone(),
        None => path.with_extension("heatmaps"),
    };
    let (kind, written) = match container.kind() {
        Some(ARCHIVE_KIND) => {
            let archive = archive_from_container(&container).stage("load")?;
            let files = export_attention_heatmaps(&archive, tokens, &dir).stage("heatmaps")?;
            (ARCHIVE_KIND, files)
        }
        Some(STACKS_KIND) => {
            let (control, bias) = stacks_from_container(&container).stage("load")?;
            let files =
                export_stack_heatmaps(control.as_ref(), bias.as_ref(), &dir).stage("heatmaps")?;
            (STACKS_KIND, files)
        }
        other => {
            return Err(Failure::new(
                "load",
                semctl::Error::Format(format!("unknown container kind {other:?}")),
            ))
        }
    };
    info!(kind, files = written.len(), dir = %dir.display(), "heatmaps written");
    println!(
        "{}",
        json!({
            "command": "inspect",
            "kind": kind,
            "entries": container.entries.len(),
            "output_dir": dir,
            "files": written.len(),
        })
    );
    Ok(())
}

fn verify(config: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let backbone = load_backbone(config)?;
    let report = verify_contract(&backbone);
    if let Some(dir) = out {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .stage("write")?;
        write_json(&dir.join("conformance.json"), &report).stage("write")?;
    }
    let text = serde_json::to_string_pretty(&report).stage("verify")?;
    println!("{text}");
    if report.passed {
        info!(backbone = %report.backbone, "contract satisfied");
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .clauses
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.clause.as_str())
            .collect();
        Err(Failure::new(
            "verify",
            anyhow!("contract clauses failed: {}", failed.join(", ")),
        ))
    }
}
