use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] morse_core::Error),
}

impl CliError {
    /// 2 config, 3 data, 4 numeric divergence, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use morse_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Output { .. } => 1,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(E::Config(_)) => 2,
            CliError::Core(
                E::Io { .. }
                | E::Parse { .. }
                | E::Validation(_)
                | E::UnknownRelation(_)
                | E::Checkpoint(_)
                | E::Protocol(_)
                | E::Sampling { .. },
            ) => 3,
            CliError::Core(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(morse_core::Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(morse_core::Error::UnknownRelation("r".into())).exit_code(), 3);
        assert_eq!(
            CliError::from(morse_core::Error::Divergence { step: 3, loss: f64::NAN }).exit_code(),
            4
        );
    }
}
