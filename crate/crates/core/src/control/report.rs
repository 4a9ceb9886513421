use std::io::BufRead;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::metrics::{LatencyByPath, MetricsSnapshot};
use super::stats::LatencyStats;
use crate::servers::{AsDelivery, DeliveryPath};

/// Final run report. Contains no wall-clock data, so fixed-seed fast runs
/// reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub duration_s: f64,
    pub devices: usize,
    pub gateways: usize,
    pub trace_hash: String,
    pub metrics: MetricsSnapshot,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// One NDJSON line per delivery.
pub fn delivery_log(deliveries: &[AsDelivery]) -> String {
    let mut out = String::new();
    for d in deliveries {
        out.push_str(&serde_json::to_string(d).expect("delivery serialization is infallible"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeliverySummary {
    pub records: u64,
    pub cloud: u64,
    pub fallback: u64,
    pub edge: u64,
    pub edge_frames: u64,
    pub late_overlap_frames: u64,
    pub latency: LatencyByPath,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_delivery_log(reader: impl BufRead) -> Result<Vec<AsDelivery>, LogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| LogError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn summarize(deliveries: &[AsDelivery]) -> DeliverySummary {
    let cloud: Vec<u64> = deliveries.iter().filter(|d| d.path == DeliveryPath::Cloud).map(|d| d.latency_us).collect();
    let edge: Vec<&AsDelivery> = deliveries.iter().filter(|d| d.path == DeliveryPath::Edge).collect();
    DeliverySummary {
        records: deliveries.len() as u64,
        cloud: cloud.len() as u64,
        fallback: deliveries.iter().filter(|d| d.fallback).count() as u64,
        edge: edge.len() as u64,
        edge_frames: edge.iter().map(|d| d.fcnt_list.len() as u64).sum(),
        late_overlap_frames: edge.iter().map(|d| d.late_overlap.len() as u64).sum(),
        latency: LatencyByPath {
            cloud: LatencyStats::from_micros(&cloud),
            edge: LatencyStats::from_micros(&edge.iter().map(|d| d.latency_us).collect::<Vec<_>>()),
        },
    }
}
