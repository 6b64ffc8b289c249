//! Service settings: an optional TOML file, then `PRIVMEM_*` environment
//! overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::conversation::DEFAULT_CONTEXT_TURNS;
use crate::error::{Error, Result};
use crate::inference::PromptFixture;
use crate::llm::ProviderConfig;
use crate::memory::DEFAULT_RETRIEVAL_K;
use crate::sensitivity::SensitivityTable;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileProvider {
    api_key: Option<String>,
    base_url: Option<String>,
    model: Option<String>,
    timeout_secs: Option<f64>,
    retry_limit: Option<u32>,
    backoff_ms: Option<u64>,
    max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSettings {
    #[serde(default)]
    provider: FileProvider,
    data_dir: Option<PathBuf>,
    context_turns: Option<usize>,
    retrieval_k: Option<usize>,
    sensitivity_table: Option<PathBuf>,
    prompt_fixture: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub provider: ProviderConfig,
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub context_turns: usize,
    pub retrieval_k: usize,
    pub sensitivity_table: Option<PathBuf>,
    pub prompt_fixture: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            provider: ProviderConfig::default(),
            data_dir: None,
            context_turns: DEFAULT_CONTEXT_TURNS,
            retrieval_k: DEFAULT_RETRIEVAL_K,
            sensitivity_table: None,
            prompt_fixture: None,
        }
    }
}

fn parse_env<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Config(format!("{name}: cannot parse {raw:?}")))
}

fn secs(name: &str, v: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(v).map_err(|_| Error::Config(format!("{name}: invalid duration {v}")))
}

impl Settings {
    /// Reads `path` (if any) then applies overrides from the process env.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_with(path, |k| std::env::var(k).ok())
    }

    pub fn load_with(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let file: FileSettings = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => FileSettings::default(),
        };
        let mut s = Settings::default();
        let p = &mut s.provider;
        if let Some(v) = file.provider.api_key {
            p.api_key = v;
        }
        if let Some(v) = file.provider.base_url {
            p.base_url = v;
        }
        if let Some(v) = file.provider.model {
            p.model_name = v;
        }
        if let Some(v) = file.provider.timeout_secs {
            p.timeout = secs("provider.timeout_secs", v)?;
        }
        if let Some(v) = file.provider.retry_limit {
            p.retry_limit = v;
        }
        if let Some(v) = file.provider.backoff_ms {
            p.backoff_base = Duration::from_millis(v);
        }
        if let Some(v) = file.provider.max_in_flight {
            p.max_in_flight = v;
        }
        s.data_dir = file.data_dir;
        s.context_turns = file.context_turns.unwrap_or(s.context_turns);
        s.retrieval_k = file.retrieval_k.unwrap_or(s.retrieval_k);
        s.sensitivity_table = file.sensitivity_table;
        s.prompt_fixture = file.prompt_fixture;

        if let Some(v) = env("PRIVMEM_API_KEY") {
            s.provider.api_key = v;
        }
        if let Some(v) = env("PRIVMEM_BASE_URL") {
            s.provider.base_url = v;
        }
        if let Some(v) = env("PRIVMEM_MODEL") {
            s.provider.model_name = v;
        }
        if let Some(v) = env("PRIVMEM_TIMEOUT_SECS") {
            s.provider.timeout = secs("PRIVMEM_TIMEOUT_SECS", parse_env("PRIVMEM_TIMEOUT_SECS", &v)?)?;
        }
        if let Some(v) = env("PRIVMEM_DATA_DIR") {
            s.data_dir = Some(v.into());
        }
        if let Some(v) = env("PRIVMEM_CONTEXT_TURNS") {
            s.context_turns = parse_env("PRIVMEM_CONTEXT_TURNS", &v)?;
        }
        if let Some(v) = env("PRIVMEM_RETRIEVAL_K") {
            s.retrieval_k = parse_env("PRIVMEM_RETRIEVAL_K", &v)?;
        }
        if let Some(v) = env("PRIVMEM_SENSITIVITY_TABLE") {
            s.sensitivity_table = Some(v.into());
        }
        if let Some(v) = env("PRIVMEM_PROMPT_FIXTURE") {
            s.prompt_fixture = Some(v.into());
        }
        if s.context_turns == 0 {
            return Err(Error::Config("context_turns must be at least 1".into()));
        }
        Ok(s)
    }

    pub fn table(&self) -> Result<SensitivityTable> {
        match &self.sensitivity_table {
            Some(p) => SensitivityTable::load(p),
            None => Ok(SensitivityTable::default()),
        }
    }

    pub fn fixture(&self) -> Result<PromptFixture> {
        match &self.prompt_fixture {
            Some(p) => PromptFixture::load(p),
            None => Ok(PromptFixture::default()),
        }
    }
}
