use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::args::Format;
use crate::exit::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ServeSection {
    pub listen: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ProxySection {
    pub listen: Option<String>,
    pub upstream: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub budget_mib: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct QuerySection {
    #[serde(default)]
    pub endpoints: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CliConfig {
    pub store: Option<PathBuf>,
    pub format: Option<Format>,
    #[serde(default)]
    pub serve: ServeSection,
    #[serde(default)]
    pub proxy: ProxySection,
    #[serde(default)]
    pub query: QuerySection,
}

pub fn parse_listen(s: &str) -> Result<SocketAddr, CliError> {
    s.parse()
        .map_err(|_| CliError::Usage(format!("'{s}' is not a listen address like 127.0.0.1:8080")))
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: CliConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for listen in [&self.serve.listen, &self.proxy.listen].into_iter().flatten() {
            parse_listen(listen)?;
        }
        if self.proxy.budget_mib == Some(0) {
            return Err(CliError::Usage("proxy budget-mib must be at least 1".into()));
        }
        for e in &self.query.endpoints {
            let kind = e.split_once('=').map(|(k, _)| k).unwrap_or("");
            if !matches!(kind, "proxy" | "origin" | "slice" | "snapshot" | "store") {
                return Err(CliError::Usage(format!("endpoint '{e}' is not KIND=VALUE")));
            }
        }
        Ok(())
    }
}
