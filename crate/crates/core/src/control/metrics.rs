use serde::{Deserialize, Serialize};

use super::stats::LatencyStats;
use crate::codec::{Eui, GatewayId};
use crate::ddf::DdfStats;
use crate::gateway::GatewayCounters;
use crate::servers::{AsCounters, JsCounters, NsCounters};
use crate::sim::{LinkStats, Micros, RadioCounters};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub sent_legacy: u64,
    pub sent_e2ed: u64,
    pub accepted_at_gateways: u64,
    pub cloud_deliveries: u64,
    pub edge_aggregates: u64,
    pub edge_frames: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceTraffic {
    pub dev_eui: Eui,
    /// Data-frame envelopes on GW→NS and NS→AS.
    pub cloud_bytes: u64,
    /// Aggregate envelopes on GW→AS.
    pub edge_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub legacy_path_bytes: u64,
    pub edge_path_bytes: u64,
    /// Joins, notices, key hand-offs, acknowledgements, downlinks.
    pub control_bytes: u64,
    pub per_device: Vec<DeviceTraffic>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyByPath {
    pub cloud: LatencyStats,
    pub edge: LatencyStats,
}

/// Distinct frame identities by final disposition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub frames_accepted_at_gateways: u64,
    pub delivered_cloud: u64,
    pub delivered_edge: u64,
    pub dropped_duplicates: u64,
    pub dropped_security: u64,
    pub in_flight: u64,
    /// Accepted identities found neither resolved nor anywhere in the pipeline.
    pub unaccounted: u64,
    /// Resolved identities that no gateway ever accepted.
    pub unexpected: u64,
}

impl Accounting {
    pub fn balanced(&self) -> bool {
        self.unaccounted == 0
            && self.unexpected == 0
            && self.delivered_cloud + self.delivered_edge + self.dropped_duplicates + self.dropped_security + self.in_flight
                == self.frames_accepted_at_gateways
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueDepths {
    pub scheduler: u64,
    pub ns_collecting: u64,
    pub hold_queue: u64,
    pub gateway_windows: u64,
    pub max_link_queue: u64,
}

/// Throughput proxies; the report labels these as proxies, not a single scalability figure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityProxies {
    pub devices: u64,
    pub deliveries_per_s: f64,
    pub frames_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatewayMetrics {
    pub id: GatewayId,
    pub counters: GatewayCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub sim_time_us: Micros,
    pub events_processed: u64,
    pub frames: FrameCounts,
    pub latency: LatencyByPath,
    pub traffic: TrafficStats,
    pub links: Vec<LinkStats>,
    pub radio: RadioCounters,
    pub gateways: Vec<GatewayMetrics>,
    pub ns: NsCounters,
    pub js: JsCounters,
    pub app: AsCounters,
    pub ddf: DdfStats,
    pub accounting: Accounting,
    pub queues: QueueDepths,
    pub scalability_proxies: ScalabilityProxies,
}
