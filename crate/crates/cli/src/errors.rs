//! Mapping of failures to exit codes and their printed form.

use std::fmt;

use skyhost_core::model::ModelError;
use skyhost_core::object::ObjectError;
use skyhost_core::pipeline::PlanError;
use skyhost_core::stream::BrokerError;
use skyhost_core::transfer::{ErrorCategory, TransferError};
use skyhost_core::transport::TransportError;
use skyhost_core::uri::UriError;

/// A bad argument detected after clap accepted the command line.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(e: impl fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn broker_category(e: &BrokerError) -> ErrorCategory {
    match e {
        BrokerError::Io(_) => ErrorCategory::Connectivity,
        BrokerError::UnknownTopic(_)
        | BrokerError::TopicExists { .. }
        | BrokerError::PartitionOutOfRange { .. }
        | BrokerError::InvalidRequest(_) => ErrorCategory::Usage,
        _ => ErrorCategory::Transfer,
    }
}

fn category(e: &anyhow::Error) -> ErrorCategory {
    if let Some(t) = e.downcast_ref::<TransferError>() {
        return t.category();
    }
    if let Some(b) = e.downcast_ref::<BrokerError>() {
        return broker_category(b);
    }
    if let Some(t) = e.downcast_ref::<TransportError>() {
        return if t.is_connectivity() {
            ErrorCategory::Connectivity
        } else {
            ErrorCategory::Transfer
        };
    }
    if let Some(o) = e.downcast_ref::<ObjectError>() {
        return match o {
            ObjectError::NotFound(..) | ObjectError::UnsupportedBackend(_) | ObjectError::Config(_) => {
                ErrorCategory::Usage
            }
            _ => ErrorCategory::Transfer,
        };
    }
    if e.downcast_ref::<UsageError>().is_some()
        || e.downcast_ref::<UriError>().is_some()
        || e.downcast_ref::<PlanError>().is_some()
        || e.downcast_ref::<ModelError>().is_some()
        || e.downcast_ref::<csv::Error>().is_some()
    {
        return ErrorCategory::Usage;
    }
    ErrorCategory::Transfer
}

/// The error and its causes joined by `: `, skipping causes already spelled out by
/// the message before them.
fn chain_text(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

pub struct Failure {
    pub category: ErrorCategory,
    message: String,
}

impl From<&anyhow::Error> for Failure {
    fn from(e: &anyhow::Error) -> Self {
        Self {
            category: category(e),
            message: chain_text(e),
        }
    }
}

impl Failure {
    fn name(&self) -> &'static str {
        match self.category {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Transfer => "transfer",
            ErrorCategory::Connectivity => "connectivity",
        }
    }

    /// One line on stderr; with `json` also a JSON object on stdout.
    pub fn print(&self, json: bool) {
        eprintln!("skyhost: {} error: {}", self.name(), self.message);
        if json {
            let v = serde_json::json!({
                "error": { "category": self.name(), "exit_code": self.category.exit_code(), "message": self.message }
            });
            println!("{v}");
        }
    }
}
