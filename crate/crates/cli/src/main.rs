use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use audit_cli::{config, server};
use audit_core::artifact;
use audit_core::demo::{run_demo, DemoConfig};
use audit_core::pipeline::{run_audit, PipelineConfig, RunOutcome};
use audit_core::subgroups::SubgroupStatus;

#[derive(Parser)]
#[command(name = "audit", version, about = "Subgroup bias audits for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the audit pipeline and write an artifact.
    Run(RunArgs),
    /// Serve a saved artifact over HTTP.
    Serve(ServeArgs),
    /// Check a saved artifact and its assets.
    Validate {
        /// Artifact directory or manifest file.
        path: PathBuf,
    },
    /// Generate synthetic data, train a small model and audit it.
    Demo(DemoArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON or YAML file with pipeline settings. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV or JSON dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Sets every stage seed from one value.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_clusters: Option<usize>,
    #[arg(long)]
    top_rate: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    embedder_epochs: Option<usize>,
    #[arg(long)]
    cluster_threshold: Option<f64>,
    /// Reuse cached stages from a previous run in the same output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Artifact directory or manifest file.
    #[arg(long, default_value = "artifact")]
    artifact: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "AUDIT_PORT", default_value_t = 8080)]
    port: u16,
    /// Directory of static UI files served at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value = "demo-output")]
    output: PathBuf,
    /// JSON or YAML file with demo settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn pipeline_config(a: RunArgs) -> Result<PipelineConfig> {
    let mut c: PipelineConfig = config::load_or_default(a.config.as_deref())?;
    if let Some(v) = a.model {
        c.model = v;
    }
    if let Some(v) = a.dataset {
        c.dataset = v;
    }
    if let Some(v) = a.output {
        c.output = v;
    }
    if let Some(v) = a.seed {
        c = c.with_seed(v);
    }
    if let Some(v) = a.n_clusters {
        c.subgroup_clustering.n_clusters = Some(v);
    }
    if let Some(v) = a.top_rate {
        c.top_rate = v;
    }
    if let Some(v) = a.patch_size {
        c.patches.patch_size = v;
    }
    if let Some(v) = a.pairs {
        c.positive_pairs = v;
        c.negative_pairs = v;
    }
    if let Some(v) = a.embedder_epochs {
        c.embedder.epochs = v;
    }
    if let Some(v) = a.cluster_threshold {
        c.neuron_clustering.threshold = v;
    }
    c.resume |= a.resume;
    Ok(c)
}

fn report(run: &RunOutcome) {
    let a = &run.artifact;
    let under = a
        .subgroups
        .iter()
        .filter(|s| s.status == SubgroupStatus::Underperforming)
        .count();
    println!("artifact: {}", run.manifest.display());
    println!(
        "overall accuracy {:.3}, {} subgroups ({} underperforming), {} pairings, {} concept neurons, {} clusters",
        a.overall_accuracy,
        a.subgroups.len(),
        under,
        a.pairings.len(),
        a.concepts.len(),
        a.clusters.len()
    );
    for t in &run.timings {
        println!("  {:<14} {:>8.2}s{}", t.stage, t.seconds, if t.cached { " (cached)" } else { "" });
    }
    for n in &a.notices {
        println!("notice: {n}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error and its causes, skipping causes its message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.is_empty() {
            out = msg;
        } else if !out.contains(&msg) {
            out = format!("{out}: {msg}");
        }
    }
    out
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let c = pipeline_config(args)?;
            report(&run_audit(&c)?);
        }
        Command::Serve(args) => {
            let state = server::AppState::load(&args.artifact)?;
            tokio::runtime::Runtime::new()?.block_on(server::serve(state, &args.host, args.port, args.ui))?;
        }
        Command::Validate { path } => {
            let a = artifact::load(&path)?;
            let dir = if path.is_dir() { path.clone() } else { path.parent().map(PathBuf::from).unwrap_or_default() };
            artifact::validate_assets(&a, &dir)?;
            println!(
                "ok: schema {}, {} images, {} subgroups, {} concepts, {} clusters",
                a.schema_version,
                a.images.len(),
                a.subgroups.len(),
                a.concepts.len(),
                a.clusters.len()
            );
        }
        Command::Demo(args) => {
            let c: DemoConfig = config::load_or_default(args.config.as_deref())?;
            let out = run_demo(&args.output, &c)?;
            println!("dataset: {}", out.dataset.display());
            println!("model: {}", out.model.display());
            report(&out.run);
            println!("finished in {:.1}s", out.seconds);
        }
    }
    Ok(())
}
