use std::path::Path;
use std::str::FromStr;

use gazeward_core::eval::{render_csv, render_markdown, ReportRow};

use crate::error::{AppError, AppResult};
use crate::io::{write_json, write_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(AppError::config(format!(
                "unknown report format {other:?} (json, csv, markdown)"
            ))),
        }
    }
}

impl ReportFormat {
    /// From the file extension, defaulting to JSON.
    pub fn for_path(path: &Path) -> Self {
        path.extension()
            .and_then(|e| e.to_str())
            .and_then(|e| e.parse().ok())
            .unwrap_or(Self::Json)
    }
}

pub fn write_report(rows: &[ReportRow], path: &Path, format: ReportFormat) -> AppResult<()> {
    match format {
        ReportFormat::Json => write_json(rows, path),
        ReportFormat::Csv => write_text(&render_csv(rows), path),
        ReportFormat::Markdown => write_text(&render_markdown(rows), path),
    }
}
