//! Command implementations behind the `fuseseg` binary: configuration,
//! patient-level folds, the cross-validation harness and report emission.

pub mod commands;
pub mod config;
pub mod folds;
pub mod report;

pub use config::ExperimentConfig;
pub use folds::{make_folds, FoldAssignment};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] fuseseg::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use fuseseg::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                E::InvalidConfig(_) | E::InvalidSpec(_) | E::TooFewCases { .. } => EXIT_CONFIG,
                E::MissingHeader(_)
                | E::ShapeMismatch(_)
                | E::NonFiniteData(_)
                | E::InvalidSpacing(_)
                | E::EmptyMask
                | E::NoLungFound
                | E::OutOfExtent(_)
                | E::ManifestMismatch(_)
                | E::MissingRegisteredPet(_)
                | E::ChannelMismatch { .. }
                | E::NoRecords
                | E::InvalidManifest(_)
                | E::Json { .. } => EXIT_DATA,
                E::NonFiniteGradient(_) | E::MissingUpstreamModel(_) | E::Io { .. } => EXIT_RUNTIME,
            },
        }
    }
}
