use hybrid_core::error::Error;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Error,
    },
}

impl CliError {
    /// 1 usage or configuration, 2 bad input data, 3 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Stage { source: Error::Config(_), .. } => 1,
            CliError::Stage { source, .. } if source.is_data_error() => 2,
            CliError::Stage { .. } => 3,
        }
    }
}

pub trait Staged<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Staged<T> for Result<T, Error> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let st = |e: Error| Err::<(), _>(e).stage("x").unwrap_err().exit_code();
        assert_eq!(CliError::Usage("u".into()).exit_code(), 1);
        assert_eq!(st(Error::Config("c".into())), 1);
        assert_eq!(st(Error::Row { row: 3, msg: "bad".into() }), 2);
        assert_eq!(st(Error::Diverged { epoch: 2 }), 3);
    }
}
