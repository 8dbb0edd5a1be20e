use std::fmt;

/// Process exit codes. These values are part of the public interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    GradCheck = 1,
    Io = 2,
    Mismatch = 3,
    Divergence = 4,
    Config = 5,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        CliError {
            exit,
            message: message.into(),
        }
    }

    pub fn io(m: impl Into<String>) -> Self {
        Self::new(Exit::Io, m)
    }

    pub fn mismatch(m: impl Into<String>) -> Self {
        Self::new(Exit::Mismatch, m)
    }

    pub fn config(m: impl Into<String>) -> Self {
        Self::new(Exit::Config, m)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<sfmkit_data::voc::VocError> for CliError {
    fn from(e: sfmkit_data::voc::VocError) -> Self {
        use sfmkit_data::voc::VocError::*;
        let exit = match &e {
            Io { .. } | Xml { .. } => Exit::Io,
            MissingField { .. } | BadValue { .. } | MissingImages(_) | Domain(_) => Exit::Mismatch,
        };
        CliError::new(exit, e.to_string())
    }
}
