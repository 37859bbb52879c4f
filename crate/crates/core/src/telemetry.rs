//! Logs and metrics for a run.
//!
//! Every task execution writes to its own log stream tagged with the task's
//! full parameter map (plus the instance it ran on), so the logs of any
//! parameter value can be pulled with [`Telemetry::query_logs`]. Metric
//! series record queue depth, fleet size and accumulated cost over time.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::specfiles::{Parameters, Scalar};

pub const QUEUE_VISIBLE: &str = "queue_visible";
pub const QUEUE_IN_FLIGHT: &str = "queue_in_flight";
pub const QUEUE_DLQ: &str = "queue_dlq";
pub const FLEET_RUNNING: &str = "fleet_running";
pub const FLEET_TARGET: &str = "fleet_target";
pub const COST_TOTAL: &str = "cost_total";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("stream `{0}` already exists with different tags")]
    TagMutation(String),
    #[error("stream `{0}` does not exist and no tags were given")]
    UnknownStream(String),
    #[error("metric `{name}`: timestamp {attempted} is before last point {last}")]
    TimestampRegression {
        name: String,
        last: Timestamp,
        attempted: Timestamp,
    },
    #[error("telemetry export i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Debug,
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub time: Timestamp,
    pub severity: LogLevel,
    pub line: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStream {
    pub stream_id: String,
    pub tags: Parameters,
    pub entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub points: Vec<(Timestamp, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub streams: usize,
    pub series: usize,
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Telemetry {
    streams: BTreeMap<String, LogStream>,
    metrics: BTreeMap<String, MetricSeries>,
}

impl Telemetry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append one line, creating the stream on first use.
    ///
    /// Tags are only needed at creation; later appends may pass `None` or the
    /// same tags. Entries keep non-decreasing timestamps: a line stamped
    /// earlier than the stream's last entry is recorded at that last time.
    pub fn append_log(
        &mut self,
        stream_id: &str,
        tags: Option<&Parameters>,
        severity: LogLevel,
        line: impl Into<String>,
        now: Timestamp,
    ) -> Result<String, TelemetryError> {
        let stream = match self.streams.get_mut(stream_id) {
            Some(stream) => {
                if tags.is_some_and(|t| *t != stream.tags) {
                    return Err(TelemetryError::TagMutation(stream_id.to_string()));
                }
                stream
            }
            None => {
                let tags = tags.ok_or_else(|| TelemetryError::UnknownStream(stream_id.into()))?;
                self.streams
                    .entry(stream_id.to_string())
                    .or_insert_with(|| LogStream {
                        stream_id: stream_id.to_string(),
                        tags: tags.clone(),
                        entries: Vec::new(),
                    })
            }
        };
        let time = stream.entries.last().map_or(now, |last| last.time.max(now));
        stream.entries.push(LogEntry {
            time,
            severity,
            line: line.into(),
        });
        Ok(stream_id.to_string())
    }

    pub fn put_metric(&mut self, name: &str, value: f64, now: Timestamp) -> Result<(), TelemetryError> {
        let series = self
            .metrics
            .entry(name.to_string())
            .or_insert_with(|| MetricSeries {
                name: name.to_string(),
                points: Vec::new(),
            });
        if let Some(&(last, _)) = series.points.last() {
            if now < last {
                return Err(TelemetryError::TimestampRegression {
                    name: name.to_string(),
                    last,
                    attempted: now,
                });
            }
        }
        series.points.push((now, value));
        Ok(())
    }

    pub fn stream(&self, stream_id: &str) -> Option<&LogStream> {
        self.streams.get(stream_id)
    }

    pub fn series(&self, name: &str) -> Option<&MetricSeries> {
        self.metrics.get(name)
    }

    pub fn stream_count(&self) -> usize {
        self.streams.len()
    }

    /// Streams whose tags contain every pair in `filter`, ordered by id.
    pub fn query_logs(&self, filter: &BTreeMap<String, Scalar>) -> Vec<&LogStream> {
        self.streams
            .values()
            .filter(|s| filter.iter().all(|(k, v)| s.tags.get(k) == Some(v)))
            .collect()
    }

    pub fn clear_logs(&mut self) {
        self.streams.clear();
    }

    /// Write `logs/<stream_id>.log`, `metrics/<name>.tsv` and `manifest.json`
    /// under `dir`. Output depends only on the telemetry contents.
    pub fn export(&self, dir: &Path) -> Result<ExportManifest, TelemetryError> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        if !self.streams.is_empty() {
            fs::create_dir_all(dir.join("logs"))?;
        }
        for stream in self.streams.values() {
            let mut text = serde_json::to_string(&serde_json::json!({ "tags": stream.tags }))
                .expect("tags serialize");
            text.push('\n');
            for entry in &stream.entries {
                text.push_str(&serde_json::to_string(entry).expect("entries serialize"));
                text.push('\n');
            }
            let rel = format!("logs/{}.log", stream.stream_id);
            fs::write(dir.join(&rel), text)?;
            files.push(ManifestFile {
                path: rel,
                records: stream.entries.len(),
            });
        }
        if !self.metrics.is_empty() {
            fs::create_dir_all(dir.join("metrics"))?;
        }
        for series in self.metrics.values() {
            let mut text = String::new();
            for (t, v) in &series.points {
                text.push_str(&format!("{t}\t{v}\n"));
            }
            let rel = format!("metrics/{}.tsv", series.name);
            fs::write(dir.join(&rel), text)?;
            files.push(ManifestFile {
                path: rel,
                records: series.points.len(),
            });
        }
        let manifest = ExportManifest {
            streams: self.streams.len(),
            series: self.metrics.len(),
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}
