//! `docxplain`: command-line client of the DocXplain service.
//!
//! Without `--server` the service runs embedded on a loopback port for the
//! lifetime of the command.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 model protocol error,
//! 3 more than 10% of corpus samples failed.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use docxplain_client::output::{stem, RunDir};
use docxplain_client::{Client, ClientError};
use docxplain_core::api::{ErrorKind, EvaluateRequest, ExplainRequest, SamplePayload, SegmentRequest};
use docxplain_core::config::{CorpusManifest, RunConfig};
use docxplain_core::corpus::{CorpusReport, MAX_FAILURE_FRACTION};
use docxplain_core::model::ModelSpec;
use docxplain_core::pipeline::MethodSpec;
use docxplain_server::AppState;
use tracing_subscriber::EnvFilter;

const DEFAULT_OUT: &str = "docxplain-out";

#[derive(Parser)]
#[command(name = "docxplain", version, about = "Structure-aware attribution for document image classifiers")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model shorthand: constant[:p], region-density[:x,y,w,h] or exec:<command>.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true, value_parser = ["fg", "fgbg", "both"])]
    mode: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    target_class: Option<usize>,
    /// Service URL; an embedded service is started when omitted.
    #[arg(long, global = true)]
    server: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes one mask and one visualization per kernel.
    Segment { image: PathBuf },
    /// Writes attribution maps and heatmaps for the selected mode.
    Explain { image: PathBuf },
    /// Evaluates the DocXplain variants of the selected mode over a corpus.
    Evaluate { manifest: Option<PathBuf> },
    /// Compares two or more methods over a corpus.
    Compare {
        manifest: Option<PathBuf>,
        /// Comma-separated methods, e.g. docxplain_fgbg,occlusion,random:7.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<MethodSpec>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Protocol(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Other(_) => 1,
            Failure::Protocol(_) => 2,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(err: ClientError) -> Self {
        match &err {
            ClientError::Api { error, .. } if error.kind == ErrorKind::ModelProtocol => Failure::Protocol(match error.offset {
                Some(o) => format!("{} (reply byte offset {o})", error.message),
                None => error.message.clone(),
            }),
            ClientError::Api { error, .. } if error.kind == ErrorKind::BadRequest => Failure::Usage(error.message.clone()),
            _ => Failure::Other(err.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Other(format!("{}: {e}", path.display()))
}

fn effective_config(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(m) = &g.model {
        cfg.model = Some(ModelSpec::parse_shorthand(m).map_err(|e| Failure::Usage(e.to_string()))?);
    }
    if let Some(m) = &g.mode {
        cfg.mode = m.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = g.target_class {
        cfg.target_class = Some(t);
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn require_model(cfg: &RunConfig) -> Result<(), Failure> {
    match cfg.model {
        Some(_) => Ok(()),
        None => Err(Failure::Usage("no model given; use --model or a [model] config section".into())),
    }
}

fn run_dir(cfg: &RunConfig) -> Result<RunDir, Failure> {
    let root = cfg.out.clone().unwrap_or_else(|| DEFAULT_OUT.into());
    let run = RunDir::create(&root).map_err(io_err(&root))?;
    run.write("config.toml", cfg.to_toml().as_bytes()).map_err(io_err(&root))?;
    Ok(run)
}

fn write(run: &RunDir, rel: String, bytes: &[u8]) -> Result<(), Failure> {
    run.write(&rel, bytes)
        .map(|_| ())
        .map_err(|e| Failure::Other(format!("{}: {e}", run.root().join(rel).display())))
}

fn read_image(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

async fn segment(client: &Client, cfg: RunConfig, image: &Path) -> Result<u8, Failure> {
    let bytes = read_image(image)?;
    let resp = client.segment(&SegmentRequest { image: bytes, config: cfg.clone() }).await?;
    let run = run_dir(&cfg)?;
    let name = stem(image);
    for m in &resp.masks {
        write(&run, format!("masks/{name}.{}.dxsm", m.kernel), &m.dxsm)?;
        write(&run, format!("masks/{name}.{}.png", m.kernel), &m.png)?;
        println!("kernel {:>5}: n_bg={} n_fg={}", m.kernel, m.n_bg, m.n_fg);
    }
    if resp.empty_foreground {
        println!("no foreground found");
    }
    Ok(0)
}

async fn explain(client: &Client, cfg: RunConfig, image: &Path) -> Result<u8, Failure> {
    require_model(&cfg)?;
    let bytes = read_image(image)?;
    let req = ExplainRequest { image: bytes, config: cfg.clone(), methods: None };
    let resp = client.explain(&req).await?;
    let run = run_dir(&cfg)?;
    let name = stem(image);
    println!("target class {} (scores {:?})", resp.target_class, resp.scores);
    for m in &resp.maps {
        write(&run, format!("attributions/{name}.{}.dxam", m.method), &m.dxam)?;
        write(&run, format!("heatmaps/{name}.{}.png", m.method), &m.heatmap_png)?;
        println!("{}: {}x{}", m.method, m.width, m.height);
    }
    Ok(0)
}

fn load_corpus(cfg: &RunConfig, manifest: Option<PathBuf>) -> Result<Vec<SamplePayload>, Failure> {
    let path = manifest
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| Failure::Usage("no manifest given".into()))?;
    let manifest = CorpusManifest::load(&path).map_err(|e| Failure::Usage(e.to_string()))?;
    if manifest.entries.is_empty() {
        return Err(Failure::Usage(format!("{}: manifest lists no images", path.display())));
    }
    Ok(manifest
        .entries
        .iter()
        .map(|e| {
            // Unreadable files are sent empty and fail as that sample only.
            let image = std::fs::read(&e.path).unwrap_or_else(|err| {
                tracing::warn!(path = %e.path.display(), "unreadable sample: {err}");
                Vec::new()
            });
            SamplePayload {
                name: e.path.display().to_string(),
                image,
                true_class: e.true_class,
            }
        })
        .collect())
}

fn write_report(run: &RunDir, report: &CorpusReport) -> Result<(), Failure> {
    write(run, "report.json".into(), report.to_json().as_bytes())?;
    write(run, "samples.csv".into(), report.samples_csv().as_bytes())?;
    write(run, "aggregate.csv".into(), report.comparison_csv().as_bytes())?;
    for label in &report.methods {
        if let Some((morf, lerf)) = report.curve_csvs(label) {
            write(run, format!("curves/{label}.morf.csv"), morf.as_bytes())?;
            write(run, format!("curves/{label}.lerf.csv"), lerf.as_bytes())?;
        }
    }
    Ok(())
}

async fn corpus(
    client: &Client,
    cfg: RunConfig,
    manifest: Option<PathBuf>,
    methods: Option<Vec<MethodSpec>>,
) -> Result<u8, Failure> {
    require_model(&cfg)?;
    let samples = load_corpus(&cfg, manifest)?;
    let names: Vec<String> = samples
        .iter()
        .map(|s| stem(Path::new(&s.name)))
        .collect();
    let req = EvaluateRequest { samples, config: cfg.clone(), methods, workers: 0 };
    let resp = client.evaluate(&req).await?;
    let run = run_dir(&cfg)?;
    for m in &resp.maps {
        write(&run, format!("attributions/{:05}_{}.{}.dxam", m.sample, names[m.sample], m.method), &m.dxam)?;
    }
    let report = &resp.report;
    write_report(&run, report)?;
    for s in report.samples.iter().filter(|s| s.error.is_some()) {
        eprintln!("sample {} ({}) failed: {}", s.index, s.name, s.error.as_deref().unwrap_or(""));
    }
    print!("{}", report.comparison_table());
    println!(
        "evaluated {} / misclassified {} / failed {} of {} samples",
        report.n_evaluated,
        report.n_misclassified,
        report.n_failed,
        report.samples.len()
    );
    if report.has_protocol_failure() {
        eprintln!("model protocol errors occurred");
        return Ok(2);
    }
    if report.failure_fraction() > MAX_FAILURE_FRACTION {
        eprintln!("more than {:.0}% of samples failed", MAX_FAILURE_FRACTION * 100.0);
        return Ok(3);
    }
    Ok(0)
}

fn compare_methods(cfg: &RunConfig, flag: Vec<MethodSpec>) -> Result<Vec<MethodSpec>, Failure> {
    let methods = if flag.is_empty() { cfg.methods.clone() } else { flag };
    if methods.len() < 2 {
        return Err(Failure::Usage("compare needs at least two methods".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = methods.iter().find(|m| !seen.insert(m.label())) {
        return Err(Failure::Usage(format!(
            "method {} listed twice; give repeated methods distinct seeds, e.g. random:1,random:2",
            dup.label()
        )));
    }
    Ok(methods)
}

async fn run(cli: Cli) -> Result<u8, Failure> {
    let mut cfg = effective_config(&cli.global)?;
    if let Command::Compare { methods, .. } = &cli.command {
        cfg.methods = compare_methods(&cfg, methods.clone())?;
    }
    let (client, _server) = match &cli.global.server {
        Some(url) => (Client::new(url.clone()), None),
        None => {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
                .await
                .map_err(|e| Failure::Other(format!("starting embedded service: {e}")))?;
            let addr = listener.local_addr().map_err(|e| Failure::Other(e.to_string()))?;
            let task = tokio::spawn(docxplain_server::serve(listener, AppState::new()));
            tracing::debug!(%addr, "embedded service started");
            (Client::new(format!("http://{addr}")), Some(task))
        }
    };
    match cli.command {
        Command::Segment { image } => segment(&client, cfg, &image).await,
        Command::Explain { image } => explain(&client, cfg, &image).await,
        Command::Evaluate { manifest } => corpus(&client, cfg, manifest, None).await,
        Command::Compare { manifest, .. } => {
            let methods = cfg.methods.clone();
            corpus(&client, cfg, manifest, Some(methods)).await
        }
    }
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env("DOCXPLAIN_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("docxplain: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) => m.clone(),
                Failure::Protocol(m) => format!("model protocol error: {m}"),
                Failure::Other(m) => m.clone(),
            };
            eprintln!("docxplain: {msg}");
            ExitCode::from(f.code())
        }
    }
}
