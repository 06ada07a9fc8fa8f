//! Machine-readable error reports.

use std::fmt;
use std::path::Path;

use cachesub_core::scenario::Diagnostic;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    FileNotFound,
    Schema,
    InvalidInput,
    Infeasible,
    Io,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}

impl Failure {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Failure { kind, message: message.into(), path: None, diagnostics: Vec::new() }
    }

    pub fn at(mut self, path: &Path) -> Self {
        self.path = Some(path.display().to_string());
        self
    }

    pub fn io(e: impl fmt::Display) -> Self {
        Failure::new(Kind::Io, e.to_string())
    }

    pub fn io_at(path: &Path, e: std::io::Error) -> Self {
        let kind = if e.kind() == std::io::ErrorKind::NotFound { Kind::FileNotFound } else { Kind::Io };
        let message = match kind {
            Kind::FileNotFound => format!("file not found: {}", path.display()),
            _ => format!("{}: {e}", path.display()),
        };
        Failure::new(kind, message).at(path)
    }

    pub fn schema(path: &Path, diagnostics: Vec<Diagnostic>) -> Self {
        let message = match diagnostics.as_slice() {
            [d] => d.to_string(),
            ds => format!("{} problems in scenario", ds.len()),
        };
        Failure { kind: Kind::Schema, message, path: Some(path.display().to_string()), diagnostics }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::FileNotFound | Kind::Schema | Kind::InvalidInput => 2,
            Kind::Infeasible | Kind::Io => 1,
        }
    }
}

impl From<cachesub_core::Error> for Failure {
    fn from(e: cachesub_core::Error) -> Self {
        use cachesub_core::Error as E;
        let kind = match &e {
            E::InfeasibleScenario { .. } => Kind::Infeasible,
            E::Io(_) => Kind::Io,
            _ => Kind::InvalidInput,
        };
        Failure::new(kind, e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}
