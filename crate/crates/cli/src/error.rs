use std::path::PathBuf;

use fastshap_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or input data.
    #[error("{0}")]
    Validation(String),

    #[error("no {what} found under {dir}; run `fastshap {command}` first")]
    MissingPrerequisite {
        what: &'static str,
        command: &'static str,
        dir: PathBuf,
    },

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    /// 1 for anything the user can fix in their inputs, 2 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::MissingPrerequisite { .. } => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                CoreError::InvalidArgument(_)
                | CoreError::ShapeMismatch { .. }
                | CoreError::DimensionTooLarge { .. }
                | CoreError::EmptyDataset
                | CoreError::Data { .. }
                | CoreError::Schema(_)
                | CoreError::Csv(_) => 1,
                CoreError::RankDeficient { .. }
                | CoreError::NonFiniteLoss(_)
                | CoreError::Io(_)
                | CoreError::Json(_) => 2,
            },
        }
    }
}
