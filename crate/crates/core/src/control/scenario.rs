//! Scenario files: TOML with a versioned schema and strict field checking.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{AesKey, Eui, GatewayId, MAX_PAYLOAD_LEN};
use crate::device::{DeviceMode, MIN_PERIOD_MS, SENSOR_PAYLOAD_MIN};
use crate::gateway::{AggregateFunction, GatewayMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    /// Mandatory when `pacing` is 0.
    pub seed: Option<u64>,
    pub duration_s: f64,
    /// 0 runs as fast as possible; 1 follows the wall clock.
    #[serde(default)]
    pub pacing: f64,
    #[serde(default)]
    pub radio: RadioSection,
    #[serde(default)]
    pub aggregation: AggregationSection,
    #[serde(default)]
    pub servers: ServersSection,
    #[serde(default)]
    pub link_defaults: LinkDefaults,
    #[serde(default)]
    pub links: Vec<LinkOverride>,
    pub gateways: Vec<GatewaySection>,
    pub devices: Vec<DeviceSection>,
    #[serde(default)]
    pub coverage: CoverageSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioSection {
    pub channels: u8,
    pub airtime_us_per_byte: u64,
    /// Fixed delay between a gateway's downlink send and reception at the device.
    pub downlink_delay_ms: u64,
}

impl Default for RadioSection {
    fn default() -> Self {
        RadioSection { channels: 8, airtime_us_per_byte: 1500, downlink_delay_ms: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationSection {
    pub function: AggregateFunction,
    pub window_len: u32,
    pub timeout_periods: u32,
    pub hold_margin_ms: u64,
    pub hold_timeout_ms: Option<u64>,
}

impl Default for AggregationSection {
    fn default() -> Self {
        AggregationSection {
            function: AggregateFunction::Mean,
            window_len: 5,
            timeout_periods: 3,
            hold_margin_ms: 500,
            hold_timeout_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServersSection {
    pub ns_processing_ms: u64,
    pub ns_dedup_window_ms: u64,
    pub ddf_capacity: usize,
    /// 32-byte hex private keys; derived from the seed when absent.
    pub js_static_key: Option<String>,
    pub as_static_key: Option<String>,
}

impl Default for ServersSection {
    fn default() -> Self {
        ServersSection {
            ns_processing_ms: 50,
            ns_dedup_window_ms: 200,
            ddf_capacity: crate::ddf::DEFAULT_CAPACITY,
            js_static_key: None,
            as_static_key: None,
        }
    }
}

/// `bandwidth_bps` is in bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkProfile {
    pub bandwidth_bps: u64,
    pub delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkDefaults {
    pub gw_ns: LinkProfile,
    pub gw_as: LinkProfile,
    pub ns_as: LinkProfile,
}

impl Default for LinkDefaults {
    fn default() -> Self {
        let p = LinkProfile { bandwidth_bps: 1_000_000, delay_ms: 80 };
        LinkDefaults { gw_ns: p, gw_as: p, ns_as: p }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    /// `gw<N>-ns`, `gw<N>-as`, or `ns-as`.
    pub id: String,
    pub bandwidth_bps: Option<u64>,
    pub delay_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    pub id: u16,
    pub mode: GatewayMode,
    #[serde(default)]
    pub suppress_ns_forward_for_e2ed: bool,
    pub static_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub dev_eui: Eui,
    pub join_eui: Option<Eui>,
    pub root_key: Option<AesKey>,
    pub mode: DeviceMode,
    pub period_ms: u64,
    #[serde(default = "default_payload_len")]
    pub payload_len: usize,
    pub max_frames: Option<u32>,
    pub start_offset_ms: Option<u64>,
}

fn default_payload_len() -> usize {
    SENSOR_PAYLOAD_MIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageSection {
    pub default: f64,
    pub overrides: Vec<CoverageOverride>,
}

impl Default for CoverageSection {
    fn default() -> Self {
        CoverageSection { default: 1.0, overrides: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageOverride {
    pub dev_eui: Eui,
    pub gateway: u16,
    pub prob: f64,
}

pub fn parse_static_key(field: &str, hex_key: &str) -> Result<[u8; 32], ConfigError> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(hex_key, &mut out).map_err(|_| invalid(field, "expected 64 hex digits"))?;
    Ok(out)
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: origin.clone(), message: e.to_string() })?;
        Self::parse(&text, &origin)
    }

    pub fn mean_period_ms(&self) -> f64 {
        self.devices.iter().map(|d| d.period_ms as f64).sum::<f64>() / self.devices.len().max(1) as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version)));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(invalid("duration_s", "must be a positive number of seconds"));
        }
        if !(self.pacing.is_finite() && self.pacing >= 0.0) {
            return Err(invalid("pacing", "must be 0 (fast) or a positive ratio"));
        }
        if self.pacing == 0.0 && self.seed.is_none() {
            return Err(invalid("seed", "required when pacing = 0"));
        }
        if self.radio.channels == 0 {
            return Err(invalid("radio.channels", "must be at least 1"));
        }
        if self.radio.airtime_us_per_byte == 0 {
            return Err(invalid("radio.airtime_us_per_byte", "must be positive"));
        }
        if !(1..=255).contains(&self.aggregation.window_len) {
            return Err(invalid("aggregation.window_len", "must be in 1..=255"));
        }
        if self.aggregation.timeout_periods == 0 {
            return Err(invalid("aggregation.timeout_periods", "must be at least 1"));
        }
        if self.servers.ddf_capacity == 0 {
            return Err(invalid("servers.ddf_capacity", "must be positive"));
        }
        if let Some(k) = &self.servers.js_static_key {
            parse_static_key("servers.js_static_key", k)?;
        }
        if let Some(k) = &self.servers.as_static_key {
            parse_static_key("servers.as_static_key", k)?;
        }
        for (name, p) in [("gw_ns", self.link_defaults.gw_ns), ("gw_as", self.link_defaults.gw_as), ("ns_as", self.link_defaults.ns_as)] {
            if p.bandwidth_bps == 0 {
                return Err(invalid(format!("link_defaults.{name}.bandwidth_bps"), "must be positive"));
            }
        }
        if self.gateways.is_empty() {
            return Err(invalid("gateways", "at least one gateway is required"));
        }
        let mut gw_ids = BTreeSet::new();
        for (i, g) in self.gateways.iter().enumerate() {
            if !gw_ids.insert(g.id) {
                return Err(invalid(format!("gateways[{i}].id"), format!("duplicate gateway id {}", g.id)));
            }
            if let Some(k) = &g.static_key {
                parse_static_key(&format!("gateways[{i}].static_key"), k)?;
            }
        }
        let mut link_ids: BTreeSet<String> = gw_ids.iter().flat_map(|g| [format!("{}-ns", GatewayId(*g)), format!("{}-as", GatewayId(*g))]).collect();
        link_ids.insert("ns-as".into());
        for (i, l) in self.links.iter().enumerate() {
            if !link_ids.contains(&l.id) {
                return Err(invalid(format!("links[{i}].id"), format!("no link named `{}`", l.id)));
            }
            if l.bandwidth_bps == Some(0) {
                return Err(invalid(format!("links[{i}].bandwidth_bps"), "must be positive"));
            }
        }
        if self.devices.is_empty() {
            return Err(invalid("devices", "at least one device is required"));
        }
        let mut euis = BTreeSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            if !euis.insert(d.dev_eui) {
                return Err(invalid(format!("devices[{i}].dev_eui"), format!("duplicate dev_eui {}", d.dev_eui)));
            }
            if d.period_ms < MIN_PERIOD_MS {
                return Err(invalid(format!("devices[{i}].period_ms"), format!("must be at least {MIN_PERIOD_MS}")));
            }
            if !(SENSOR_PAYLOAD_MIN..=MAX_PAYLOAD_LEN).contains(&d.payload_len) {
                return Err(invalid(
                    format!("devices[{i}].payload_len"),
                    format!("must be in {SENSOR_PAYLOAD_MIN}..={MAX_PAYLOAD_LEN}"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.coverage.default) {
            return Err(invalid("coverage.default", "probability must be in [0, 1]"));
        }
        for (i, o) in self.coverage.overrides.iter().enumerate() {
            if !(0.0..=1.0).contains(&o.prob) {
                return Err(invalid(format!("coverage.overrides[{i}].prob"), "probability must be in [0, 1]"));
            }
            if !euis.contains(&o.dev_eui) {
                return Err(invalid(format!("coverage.overrides[{i}].dev_eui"), "unknown device"));
            }
            if !gw_ids.contains(&o.gateway) {
                return Err(invalid(format!("coverage.overrides[{i}].gateway"), "unknown gateway"));
            }
        }
        Ok(())
    }
}
