use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use tracing_subscriber::EnvFilter;

use privmem::config::Settings;
use privmem::conversation::{ConversationState, Role};
use privmem::engine::{Engine, EngineOptions, SchedulerMode, Strategy};
use privmem::llm::{HttpProvider, LlmClient, MockProvider, Provider};
use privmem::memory::MemoryStore;
use privmem::metrics::{GroupBy, MetricsLog, Window};
use privmem::persistence::{replay_file, Durability, Fold, Journal, Stream};

#[derive(Parser)]
#[command(name = "privmem", version, about = "Privacy-aware conversational memory gateway")]
struct Cli {
    /// tracing filter, e.g. `info` or `privmem=debug`
    #[arg(long, global = true, default_value = "info", env = "PRIVMEM_LOG")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Strategy used when a message does not name one.
        #[arg(long, default_value = "analyzer", value_parser = parse_strategy)]
        strategy: Strategy,
        /// Answer from a scripted mock instead of the network.
        #[arg(long)]
        mock_script: Option<PathBuf>,
    },
    /// Run privacy inference over an exported dialogue log and print
    /// per-category finding counts.
    Audit {
        log_file: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mock_script: Option<PathBuf>,
    },
    /// Drop deleted memories' records from the memories log.
    PurgeDeleted {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Print the metrics summary (JSON) or the raw events (CSV).
    ExportMetrics {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "dialogue", value_parser = parse_group_by)]
        group_by: GroupBy,
        #[arg(long)]
        csv: bool,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: privmem::Error| e.to_string())
}

fn parse_group_by(s: &str) -> Result<GroupBy, String> {
    s.parse().map_err(|e: privmem::Error| e.to_string())
}

fn client(settings: &Settings, mock_script: Option<&Path>) -> anyhow::Result<LlmClient> {
    let provider: Arc<dyn Provider> = match mock_script {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Arc::new(MockProvider::from_json(&text)?)
        }
        None => {
            if settings.provider.api_key.is_empty() {
                tracing::warn!("no API key configured; set PRIVMEM_API_KEY");
            }
            Arc::new(HttpProvider::new(&settings.provider))
        }
    };
    Ok(LlmClient::new(provider, settings.provider.clone()))
}

fn engine(settings: &Settings, client: LlmClient, persistent: bool) -> anyhow::Result<Engine> {
    let options = EngineOptions {
        context_turns: settings.context_turns,
        retrieval_k: settings.retrieval_k,
        scheduler: SchedulerMode::Background,
        durability: Durability::Sync,
    };
    let mut b = Engine::builder(client).options(options).table(settings.table()?).fixture(settings.fixture()?);
    if persistent {
        if let Some(dir) = &settings.data_dir {
            std::fs::create_dir_all(dir)?;
            b = b.data_dir(dir);
        }
    }
    Ok(b.build()?)
}

/// One line of the plain export format.
#[derive(Deserialize)]
struct PlainLine {
    dialogue: String,
    role: Role,
    text: String,
}

/// Dialogues in first-seen order, each with its turns.
fn read_dialogue_log(path: &Path) -> anyhow::Result<Vec<(String, Vec<(Role, String)>)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let is_event_log = serde_json::from_str::<serde_json::Value>(first)
        .map(|v| v.get("checksum").is_some())
        .unwrap_or(false);
    let mut out: Vec<(String, Vec<(Role, String)>)> = Vec::new();
    let mut push = |d: &str, role: Role, t: String| match out.iter_mut().find(|(id, _)| id == d) {
        Some((_, turns)) => turns.push((role, t)),
        None => out.push((d.to_owned(), vec![(role, t)])),
    };
    if is_event_log {
        let replay = replay_file(path, Stream::Turns)?;
        for w in replay.warnings {
            tracing::warn!("{w}");
        }
        let state = ConversationState::fold(&replay.records)?;
        for d in state.dialogues.keys() {
            for t in state.turns_of(d)? {
                push(d.as_str(), t.role, t.text.clone());
            }
        }
    } else {
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: PlainLine =
                serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
            push(&l.dialogue, l.role, l.text);
        }
    }
    Ok(out)
}

fn audit(log_file: &Path, config: Option<&Path>, mock_script: Option<&Path>) -> anyhow::Result<()> {
    let settings = Settings::load(config)?;
    let engine = engine(&settings, client(&settings, mock_script)?, false)?;
    let mut counts: BTreeMap<String, usize> =
        engine.fixture().category_names().map(|c| (c.to_owned(), 0)).collect();
    let mut failures = 0usize;
    for (name, turns) in read_dialogue_log(log_file)? {
        let d = engine.create_dialogue(&name)?;
        for (role, text) in &turns {
            engine.append_turn(&d, *role, text)?;
        }
        match engine.infer_privacy(&d) {
            Ok(set) => {
                for f in set.findings {
                    *counts.entry(f.category.to_string()).or_default() += 1;
                }
            }
            Err(privmem::Error::EmptyInput) => {}
            Err(e) => {
                failures += 1;
                eprintln!("dialogue {name}: {e}");
            }
        }
    }
    let mut out = std::io::stdout().lock();
    let total: usize = counts.values().sum();
    for (category, n) in &counts {
        writeln!(out, "{category}\t{n}")?;
    }
    writeln!(out, "total\t{total}")?;
    if failures > 0 {
        bail!("{failures} dialogue(s) failed inference");
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&cli.log_level).context("invalid --log-level")?)
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Serve { listen, config, strategy, mock_script } => {
            let settings = Settings::load(config.as_deref())?;
            let engine = engine(&settings, client(&settings, mock_script.as_deref())?, true)?;
            let app = privmem::api::router(engine, strategy);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(listen).await?;
                tracing::info!(addr = %listener.local_addr()?, strategy = strategy.as_str(), "listening");
                privmem::api::serve(listener, app).await
            })?;
        }
        Command::Audit { log_file, config, mock_script } => {
            audit(&log_file, config.as_deref(), mock_script.as_deref())?;
        }
        Command::PurgeDeleted { data_dir } => {
            let (journal, warnings) = Journal::open(&data_dir, Durability::Sync)?;
            for w in warnings {
                tracing::warn!("{w}");
            }
            let mut store = MemoryStore::new(journal)?;
            let dropped = store.purge_deleted()?;
            println!("dropped {dropped} record(s)");
        }
        Command::ExportMetrics { data_dir, group_by, csv } => {
            let (journal, warnings) = Journal::open(&data_dir, Durability::Sync)?;
            for w in warnings {
                tracing::warn!("{w}");
            }
            let log = MetricsLog::new(journal)?;
            if csv {
                privmem::metrics::export_csv(&log.state().events, std::io::stdout().lock())?;
            } else {
                let summary = log.summarize(&Window::all(), group_by);
                println!("{}", serde_json::to_string_pretty(&summary)?);
            }
        }
    }
    Ok(())
}
