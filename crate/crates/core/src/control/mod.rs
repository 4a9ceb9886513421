//! Scenario loading, metrics, and reports.

pub mod metrics;
pub mod report;
pub mod scenario;
pub mod stats;

pub use metrics::{Accounting, DeviceTraffic, FrameCounts, LatencyByPath, MetricsSnapshot, TrafficStats};
pub use report::{delivery_log, read_delivery_log, summarize, DeliverySummary, Report};
pub use scenario::{ConfigError, ScenarioConfig};
pub use stats::LatencyStats;
