use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mdif_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A stored artifact no longer matches its manifest or its constraints.
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl CliError {
    /// Machine-readable class printed on failure.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.class(),
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Integrity(_) => "integrity",
        }
    }

    /// `error: class=<class> message=<text>` on one line.
    pub fn report_line(&self) -> String {
        let msg: String = self.to_string().chars().map(|c| if c == '\n' { ' ' } else { c }).collect();
        format!("error: class={} message={}", self.class(), msg)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
