use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error(transparent)]
    Core(#[from] panini_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ToolError>;

impl ToolError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ToolError::Io { path: path.to_path_buf(), source }
    }

    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            ToolError::Core(e) => e.class(),
            ToolError::Io { .. } => "io",
            ToolError::Image { .. } => "codec",
            ToolError::Config(_) => "invalid-argument",
        }
    }

    /// Process exit code; one per class, never 0.
    pub fn exit_code(&self) -> u8 {
        match self.class() {
            "invalid-argument" => 2,
            "invalid-state" => 3,
            "incompatible" => 4,
            "corrupt" => 5,
            "divergence" => 6,
            "codec" => 7,
            _ => 8,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::ToolError::Config(format!($($arg)*))
    };
}
pub(crate) use config_err;
