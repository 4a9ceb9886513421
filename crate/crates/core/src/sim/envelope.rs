use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::Micros;
use crate::codec::{DevAddr, GatewayId, Mic};
use crate::gateway::AggregateFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeKind {
    /// Radio reception relayed by a packet forwarder, or re-sent by the NS.
    Uplink,
    /// Frame for a gateway to transmit over the air.
    Downlink,
    EdgeNotice,
    KeyHandoff,
    HandoffAck,
    EdgeAggregate,
}

/// Aggregate metadata carried in the clear next to the encrypted values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateFields {
    pub dev_addr: DevAddr,
    pub function: AggregateFunction,
    pub window_len_actual: u8,
    pub fcnt_list: Vec<u16>,
    pub mic_list: Vec<Mic>,
    /// Hex of the 8-byte CMAC tag.
    pub tag: String,
}

/// JSON wrapper for every backhaul message. Its serialized length is what
/// links throttle and what traffic metrics count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: EnvelopeKind,
    pub gw_id: GatewayId,
    pub rx_time_us: Micros,
    pub egress_time_us: Micros,
    pub channel: u8,
    pub rssi: i16,
    /// Base64 of the carried bytes.
    pub data: String,
    #[serde(flatten)]
    pub aggregate: Option<AggregateFields>,
}

#[derive(Debug, thiserror::Error)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed envelope data: {0}")]
    Base64(#[from] base64::DecodeError),
}

impl Envelope {
    pub fn new(kind: EnvelopeKind, gw_id: GatewayId, rx_time_us: Micros, egress_time_us: Micros, data: &[u8]) -> Self {
        Envelope {
            kind,
            gw_id,
            rx_time_us,
            egress_time_us,
            channel: 0,
            rssi: 0,
            data: B64.encode(data),
            aggregate: None,
        }
    }

    pub fn with_radio(mut self, channel: u8, rssi: i16) -> Self {
        self.channel = channel;
        self.rssi = rssi;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serialization is infallible")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn payload(&self) -> Result<Vec<u8>, EnvelopeError> {
        Ok(B64.decode(&self.data)?)
    }
}
