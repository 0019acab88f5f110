use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use privlens_core::decoder::{decode, display_chain, DecoderLimits};
use privlens_core::service::{self, Settings};
use privlens_core::session::config::{AnalysisConfig, DeviceChoice, DeviceKind, RecordingMethod};
use privlens_core::session::device::{BundleProvider, ReplayBundle, VideoMeta};
use privlens_core::session::{Environment, Session};
use privlens_core::store::{ArtifactKind, Store};

#[derive(Parser)]
#[command(name = "privlens", version, about = "Privacy analysis for Android apps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline headlessly with the replay device.
    Analyze(AnalyzeArgs),
    /// Start the REST service.
    Serve(ServeArgs),
    /// Decode a payload file and print the layer tree.
    Decode {
        file: PathBuf,
        #[arg(long)]
        max_depth: Option<usize>,
    },
    /// Rebuild the report of an analysis directory.
    Report { analysis_dir: PathBuf },
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    apk: PathBuf,
    /// HAR recorded by an intercepting proxy.
    #[arg(long, conflicts_with_all = ["pcap", "fixture"])]
    har: Option<PathBuf>,
    /// Packet capture recorded on the device.
    #[arg(long, conflicts_with = "fixture")]
    pcap: Option<PathBuf>,
    /// TLS key log for the capture.
    #[arg(long, requires = "pcap")]
    keylog: Option<PathBuf>,
    /// Device profile with the values to look for.
    #[arg(long, conflicts_with = "fixture")]
    profile: Option<PathBuf>,
    /// Replay bundle directory (manifest.json plus files) instead of loose files.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Screen recording of the session.
    #[arg(long, requires = "video_offset_ms", conflicts_with = "fixture")]
    video: Option<PathBuf>,
    /// Video start relative to the capture start, in milliseconds.
    #[arg(long, allow_hyphen_values = true)]
    video_offset_ms: Option<i64>,
    #[arg(long)]
    video_duration_ms: Option<u64>,
    /// Skip hosting lookups.
    #[arg(long)]
    offline: bool,
    #[arg(long)]
    title: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// TOML settings file.
    #[arg(long)]
    config: Option<PathBuf>,
}

struct CliError {
    code: String,
    message: String,
}

impl CliError {
    fn new(code: &str, message: impl std::fmt::Display) -> Self {
        CliError {
            code: code.into(),
            message: message.to_string(),
        }
    }
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.code(), &e)
            }
        }
    )*};
}

coded!(
    privlens_core::store::StoreError,
    privlens_core::session::SessionError,
    privlens_core::report::ReportError
);

impl From<privlens_core::session::config::InvalidConfig> for CliError {
    fn from(e: privlens_core::session::config::InvalidConfig) -> Self {
        CliError::new("InvalidConfig", e)
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::new("NotFound", format!("{}: {e}", path.display())))
}

fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let store = Arc::new(Store::open_single(&a.out)?);
    let apk_name = a.apk.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let app = store.put_app(&apk_name, &read(&a.apk)?)?;

    let settings = Settings::load(None, std::env::vars()).map_err(|e| CliError::new("InvalidConfig", e))?;
    let mut env = Environment::new(store.clone());
    let (method, fixture) = if let Some(dir) = &a.fixture {
        let bundle = ReplayBundle::load(dir).map_err(|e| CliError::new("InvalidConfig", e))?;
        let method = if bundle.har.is_some() {
            RecordingMethod::Mitm
        } else if bundle.keylog.is_some() {
            RecordingMethod::OndeviceKeylog
        } else {
            RecordingMethod::Ondevice
        };
        (Some(method), Some(dir.clone()))
    } else {
        let method = match (&a.har, &a.pcap, &a.keylog) {
            (Some(_), _, _) => Some(RecordingMethod::Mitm),
            (None, Some(_), Some(_)) => Some(RecordingMethod::OndeviceKeylog),
            (None, Some(_), None) => Some(RecordingMethod::Ondevice),
            _ => None,
        };
        let video = match (&a.video, a.video_offset_ms) {
            (Some(v), Some(off)) => Some((
                v.clone(),
                VideoMeta {
                    start_offset_ms: off,
                    duration_ms: a.video_duration_ms,
                },
            )),
            _ => None,
        };
        let bundle = ReplayBundle::from_files(a.profile.clone(), a.pcap.clone(), a.keylog.clone(), a.har.clone(), video);
        env.devices = Arc::new(BundleProvider(bundle));
        (method, None)
    };

    let mut enrichment = settings.enrichment;
    enrichment.offline |= a.offline;
    let config = AnalysisConfig {
        schema_version: "1.0".into(),
        analysis_id: None,
        title: a.title.unwrap_or_else(|| app.manifest.package_name.clone()),
        annotations: String::new(),
        app_ref: app.id.clone(),
        static_enabled: true,
        dynamic_enabled: method.is_some(),
        device: DeviceChoice {
            kind: DeviceKind::Replay,
            fixture,
            serial: None,
        },
        recording_method_key: method,
        decoder_limits: None,
        enrichment,
    };
    let mut session = Session::create(env, config)?;
    let state = session.run_headless()?;
    let index = store.index(session.id())?;
    println!("analysis {} {}", session.id(), state);
    for a in &index.artifacts {
        println!("  {:<15} {}", a.kind.as_str(), store.analysis_dir(session.id()).join(&a.path).display());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut settings =
        Settings::load(a.config.as_deref(), std::env::vars()).map_err(|e| CliError::new("InvalidConfig", e))?;
    if let Some(p) = a.port {
        settings.port = p;
    }
    if let Some(d) = a.data_dir {
        settings.data_dir = d;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("Internal", e))?;
    rt.block_on(service::serve(settings))
        .map_err(|e| CliError::new("Internal", e))
}

fn decode_file(file: &Path, max_depth: Option<usize>) -> Result<(), CliError> {
    let bytes = read(file)?;
    let mut limits = DecoderLimits::default();
    if let Some(d) = max_depth {
        limits.max_depth = d;
    }
    let decoded = decode(&bytes, &limits);
    let mut leaves = Vec::new();
    decoded.root.walk(&mut |node, path, chain| {
        if node.children().is_empty() {
            if let Some(text) = node.scalar_text() {
                let chain: Vec<&str> = display_chain(chain).iter().map(|e| e.as_str()).collect();
                leaves.push(serde_json::json!({"path": path, "chain": chain, "value": text}));
            }
        }
    });
    let out = serde_json::json!({
        "tree": decoded.root.to_json(),
        "leaves": leaves,
        "output_limit_exceeded": decoded.output_limit_exceeded,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("JSON output"));
    Ok(())
}

fn rebuild_report(dir: &Path) -> Result<(), CliError> {
    let (store, id) = if dir.join("index.json").exists() && dir.join("config.json").exists() && !dir.join("analyses").exists() {
        let store = Store::open_single(dir)?;
        let id = store
            .single_id()
            .ok_or_else(|| CliError::new("UnknownAnalysis", format!("{} has no readable index", dir.display())))?;
        // Single-analysis directories and store analysis directories share a
        // layout; pick the store form when the parent is an analyses dir.
        match dir.parent().filter(|p| p.file_name().is_some_and(|n| n == "analyses")) {
            Some(analyses) => (Store::open(analyses.parent().unwrap_or(Path::new(".")))?, id),
            None => (store, id),
        }
    } else {
        return Err(CliError::new("UnknownAnalysis", format!("{} is not an analysis directory", dir.display())));
    };
    let model = privlens_core::report::publish(&store, &id)?;
    let out = store.analysis_dir(&id);
    println!("report {} rebuilt", model.analysis_id);
    println!("  {}", out.join(ArtifactKind::ReportModel.file_name()).display());
    println!("  {}", out.join(ArtifactKind::ReportHtml.file_name()).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Serve(a) => serve(a),
        Command::Decode { file, max_depth } => decode_file(&file, max_depth),
        Command::Report { analysis_dir } => rebuild_report(&analysis_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.code, e.message);
            ExitCode::FAILURE
        }
    }
}
