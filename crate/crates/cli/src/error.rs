use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] moeplan::Error),

    /// Bad flag combination or argument value.
    #[error("{0}")]
    Usage(String),

    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_user_error() => 2,
            CliError::Core(_) | CliError::Serialize(_) => 1,
            CliError::Usage(_) | CliError::Write { .. } => 2,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Serialize(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let user = CliError::Core(moeplan::Error::Validation {
            field: "model.top_k".into(),
            message: "must be >= 1".into(),
        });
        assert_eq!(user.exit_code(), 2);
        assert_eq!(
            CliError::Core(moeplan::Error::Graph("cycle".into())).exit_code(),
            1
        );
        assert_eq!(CliError::Serialize("x".into()).exit_code(), 1);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
    }
}
