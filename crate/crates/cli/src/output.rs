use std::io::Write;
use std::process::ExitCode;

use anyhow::Result;
use serde::Serialize;

/// Writes results to standard output: compact JSON by default, the table
/// (or indented JSON when there is none) under `--pretty`.
pub struct Output {
    pub pretty: bool,
}

impl Output {
    pub fn emit<T: Serialize>(&self, value: &T, table: Option<String>) -> Result<ExitCode> {
        let text = match (self.pretty, table) {
            (true, Some(t)) => t.trim_end().to_string(),
            (true, None) => serde_json::to_string_pretty(value)?,
            (false, _) => serde_json::to_string(value)?,
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{text}")?;
        out.flush()?;
        Ok(ExitCode::SUCCESS)
    }
}
