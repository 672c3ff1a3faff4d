use thiserror::Error;

/// Failures surfaced to the command line, each with a fixed exit code and a
/// one-word reason tag.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Unsatisfiable(String),
    #[error("{0}")]
    Desync(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Unsatisfiable(_) => 2,
            CliError::Desync(_) => 3,
            CliError::Io(_) | CliError::Runtime(_) => 1,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Unsatisfiable(_) => "unsatisfiable",
            CliError::Desync(_) => "desync",
            CliError::Io(_) => "io",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// Same kind, with `prefix` prepended to the message.
    pub fn prefixed(self, prefix: &str) -> Self {
        let p = |m: String| format!("{prefix}{m}");
        match self {
            CliError::Config(m) => CliError::Config(p(m)),
            CliError::Unsatisfiable(m) => CliError::Unsatisfiable(p(m)),
            CliError::Desync(m) => CliError::Desync(p(m)),
            CliError::Io(m) => CliError::Io(p(m)),
            CliError::Runtime(m) => CliError::Runtime(p(m)),
        }
    }

    /// `error[tag]: message`, flattened onto one line.
    pub fn line(&self) -> String {
        let message = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {message}", self.tag())
    }
}

impl From<fusillade::Error> for CliError {
    fn from(e: fusillade::Error) -> Self {
        use fusillade::Error as E;
        match e.root() {
            E::Desync { .. } => CliError::Desync(e.to_string()),
            E::Unsatisfiable(_) => CliError::Unsatisfiable(e.to_string()),
            E::Config(msg) if msg.starts_with("links[") => CliError::Config(format!("network.{msg}")),
            E::Config(msg) => CliError::Config(format!("network: {msg}")),
            E::Domain(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
