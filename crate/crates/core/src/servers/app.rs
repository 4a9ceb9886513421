use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::{AesKey, DataFrame, DevAddr, Eui, GatewayId, FPORT_SENSOR};
use crate::ddf::{CapacityExceeded, Ddf, DdfKey, DdfStats, Verdict};
use crate::device::parse_sensor_payload;
use crate::edge_crypto::{ChannelKeys, ChannelPurpose, EcKeyPair, EdgeCryptoError, EdgeSessionKeys, HandoffAck, KeyHandoff};
use crate::gateway::{AggregateFunction, EdgeAggregate};
use crate::sim::{Envelope, EnvelopeKind, Micros, MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryPath {
    Cloud,
    Edge,
}

/// One record of the application-side delivery log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsDelivery {
    pub path: DeliveryPath,
    pub dev_eui: Eui,
    pub dev_addr: DevAddr,
    pub gw_id: GatewayId,
    pub fcnt_list: Vec<u16>,
    pub values: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<AggregateFunction>,
    /// Cloud frame released from the hold queue without a covering aggregate.
    #[serde(default)]
    pub fallback: bool,
    pub egress_us: Micros,
    pub arrival_us: Micros,
    pub latency_us: Micros,
    /// Counters in this aggregate already delivered through the cloud path.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub late_overlap: Vec<u16>,
}

/// Final disposition of one accepted frame identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fate {
    Cloud,
    Edge,
    LateDuplicate,
    Security,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsEvent {
    KeysInstalled { dev_addr: DevAddr, gw: GatewayId },
    HandoffRejected { gw: GatewayId },
    DuplicateDropped { dev_addr: DevAddr, fcnt: u16 },
    SecurityDrop { dev_addr: DevAddr, reason: &'static str },
    LateOverlap { dev_addr: DevAddr, fcnts: Vec<u16> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AsOutput {
    ToGateway { gw: GatewayId, env: Envelope },
    /// Wake the AS at this time to release held frames.
    Arm { at: Micros },
    Event(AsEvent),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AsCounters {
    pub cloud_received: u64,
    pub edge_received: u64,
    pub unknown_device: u64,
    pub held: u64,
    pub released: u64,
    pub hold_duplicates: u64,
    pub cloud_duplicates: u64,
    pub fallback_deliveries: u64,
    pub cloud_deliveries: u64,
    pub edge_deliveries: u64,
    pub security_drops: u64,
    pub format_failures: u64,
    pub late_overlaps: u64,
    pub handoffs_accepted: u64,
    pub handoffs_rejected: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsConfig {
    pub window_len: u8,
    pub hold_margin: Micros,
    /// Replaces `window_len × period + margin` when set.
    pub hold_override: Option<Micros>,
    pub ddf_capacity: usize,
}

impl Default for AsConfig {
    fn default() -> Self {
        AsConfig { window_len: 5, hold_margin: 500 * MS, hold_override: None, ddf_capacity: crate::ddf::DEFAULT_CAPACITY }
    }
}

#[derive(Debug, Clone)]
struct AsDevice {
    dev_eui: Eui,
    app_s_key: AesKey,
    edge: Option<EdgeSessionKeys>,
    period: Micros,
}

#[derive(Debug, Clone)]
pub struct HeldFrame {
    pub frame: DataFrame,
    pub gw_id: GatewayId,
    pub egress: Micros,
    pub arrival: Micros,
    pub deadline: Micros,
}

/// Application server: hold queue, duplicate filter, decryption, delivery.
pub struct AppServer {
    static_key: EcKeyPair,
    channels: BTreeMap<GatewayId, ChannelKeys>,
    config: AsConfig,
    devices: BTreeMap<DevAddr, AsDevice>,
    ddf: Ddf,
    hold: BTreeMap<(Micros, u64), HeldFrame>,
    hold_seq: u64,
    deliveries: Vec<AsDelivery>,
    fates: BTreeMap<DdfKey, Fate>,
    counters: AsCounters,
}

impl AppServer {
    pub fn new(static_key: EcKeyPair, config: AsConfig) -> Self {
        AppServer {
            static_key,
            channels: BTreeMap::new(),
            ddf: Ddf::with_capacity(config.ddf_capacity),
            config,
            devices: BTreeMap::new(),
            hold: BTreeMap::new(),
            hold_seq: 0,
            deliveries: Vec::new(),
            fates: BTreeMap::new(),
            counters: AsCounters::default(),
        }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.static_key.public_bytes()
    }

    pub fn add_gateway(&mut self, gw: GatewayId, gw_pub: &[u8; 32]) -> Result<(), EdgeCryptoError> {
        let keys = ChannelKeys::between(&self.static_key, gw_pub, gw, ChannelPurpose::KeyHandoff)?;
        self.channels.insert(gw, keys);
        Ok(())
    }

    pub fn provision(&mut self, dev_addr: DevAddr, dev_eui: Eui, app_s_key: AesKey, period: Micros) {
        self.devices.insert(dev_addr, AsDevice { dev_eui, app_s_key, edge: None, period });
    }

    pub fn set_device_period(&mut self, dev_addr: DevAddr, period: Micros) {
        if let Some(d) = self.devices.get_mut(&dev_addr) {
            d.period = period;
        }
    }

    pub fn set_window_len(&mut self, window_len: u8) {
        self.config.window_len = window_len;
    }

    pub fn counters(&self) -> AsCounters {
        self.counters
    }

    pub fn ddf_stats(&self) -> DdfStats {
        self.ddf.stats()
    }

    pub fn deliveries(&self) -> &[AsDelivery] {
        &self.deliveries
    }

    pub fn fates(&self) -> &BTreeMap<DdfKey, Fate> {
        &self.fates
    }

    pub fn held(&self) -> impl Iterator<Item = &HeldFrame> {
        self.hold.values()
    }

    pub fn edge_keys(&self, dev_addr: DevAddr) -> Option<&EdgeSessionKeys> {
        self.devices.get(&dev_addr).and_then(|d| d.edge.as_ref())
    }

    pub fn edge_key_count(&self) -> usize {
        self.devices.values().filter(|d| d.edge.is_some()).count()
    }

    fn hold_timeout(&self, d: &AsDevice) -> Micros {
        self.config
            .hold_override
            .unwrap_or(self.config.window_len as Micros * d.period + self.config.hold_margin)
    }

    fn set_fate(&mut self, key: DdfKey, fate: Fate) {
        self.fates.entry(key).or_insert(fate);
    }

    /// Data frame forwarded by the NS.
    pub fn on_cloud(&mut self, now: Micros, env: &Envelope) -> Result<Vec<AsOutput>, CapacityExceeded> {
        self.counters.cloud_received += 1;
        let Some(frame) = env.payload().ok().and_then(|b| DataFrame::decode(&b).ok()) else {
            return Ok(Vec::new());
        };
        let Some(dev) = self.devices.get(&frame.dev_addr) else {
            self.counters.unknown_device += 1;
            return Ok(Vec::new());
        };
        if frame.fport != FPORT_SENSOR {
            return Ok(Vec::new());
        }
        if dev.edge.is_some() {
            let deadline = now + self.hold_timeout(dev);
            self.hold_seq += 1;
            self.hold.insert(
                (deadline, self.hold_seq),
                HeldFrame { frame, gw_id: env.gw_id, egress: env.egress_time_us, arrival: now, deadline },
            );
            self.counters.held += 1;
            return Ok(vec![AsOutput::Arm { at: deadline }]);
        }
        let key = dev.app_s_key;
        self.deliver_cloud(now, frame, env.gw_id, env.egress_time_us, key, false)
    }

    fn deliver_cloud(
        &mut self,
        now: Micros,
        frame: DataFrame,
        gw_id: GatewayId,
        egress: Micros,
        key: AesKey,
        fallback: bool,
    ) -> Result<Vec<AsOutput>, CapacityExceeded> {
        let ddf_key = DdfKey::new(frame.dev_addr, frame.fcnt, frame.mic);
        if self.ddf.check_and_insert(ddf_key)? == Verdict::Duplicate {
            if fallback {
                self.counters.hold_duplicates += 1;
            } else {
                self.counters.cloud_duplicates += 1;
            }
            return Ok(vec![AsOutput::Event(AsEvent::DuplicateDropped { dev_addr: frame.dev_addr, fcnt: frame.fcnt })]);
        }
        let values = match parse_sensor_payload(&frame.decrypt_payload(&key)) {
            Ok(v) => v,
            Err(_) => {
                self.counters.format_failures += 1;
                self.counters.security_drops += 1;
                self.set_fate(ddf_key, Fate::Security);
                return Ok(vec![AsOutput::Event(AsEvent::SecurityDrop {
                    dev_addr: frame.dev_addr,
                    reason: "sensor format",
                })]);
            }
        };
        assert!(now >= egress, "delivery before egress");
        let dev_eui = self.devices[&frame.dev_addr].dev_eui;
        self.deliveries.push(AsDelivery {
            path: DeliveryPath::Cloud,
            dev_eui,
            dev_addr: frame.dev_addr,
            gw_id,
            fcnt_list: vec![frame.fcnt],
            values,
            function: None,
            fallback,
            egress_us: egress,
            arrival_us: now,
            latency_us: now - egress,
            late_overlap: Vec::new(),
        });
        if fallback {
            self.counters.fallback_deliveries += 1;
        }
        self.counters.cloud_deliveries += 1;
        self.set_fate(ddf_key, Fate::Cloud);
        Ok(Vec::new())
    }

    /// Release every held frame whose deadline has passed.
    pub fn release_due(&mut self, now: Micros) -> Result<Vec<AsOutput>, CapacityExceeded> {
        let mut out = Vec::new();
        while let Some(entry) = self.hold.first_entry() {
            if entry.key().0 > now {
                break;
            }
            let held = entry.remove();
            self.counters.released += 1;
            let key = self
                .devices
                .get(&held.frame.dev_addr)
                .map(|d| d.edge.map(|e| e.edge_s_enc_key).unwrap_or(d.app_s_key))
                .expect("held frames come from provisioned devices");
            out.extend(self.deliver_cloud(now, held.frame, held.gw_id, held.egress, key, true)?);
        }
        Ok(out)
    }

    pub fn next_deadline(&self) -> Option<Micros> {
        self.hold.keys().next().map(|k| k.0)
    }

    /// Messages on a GW→AS link: key hand-offs and aggregates.
    pub fn on_gateway(&mut self, now: Micros, env: &Envelope) -> Result<Vec<AsOutput>, CapacityExceeded> {
        match env.kind {
            EnvelopeKind::KeyHandoff => Ok(self.on_handoff(now, env)),
            EnvelopeKind::EdgeAggregate => self.on_aggregate(now, env),
            _ => Ok(Vec::new()),
        }
    }

    fn on_handoff(&mut self, now: Micros, env: &Envelope) -> Vec<AsOutput> {
        let gw = env.gw_id;
        let Some(channel) = self.channels.get(&gw).copied() else {
            return Vec::new();
        };
        let Some(msg) = env.payload().ok().and_then(|b| KeyHandoff::decode(&b).ok()) else {
            self.counters.handoffs_rejected += 1;
            return vec![AsOutput::Event(AsEvent::HandoffRejected { gw })];
        };
        let accepted = match msg.open(&channel) {
            Ok(keys) if keys.assigned_gw == gw => match self.devices.get_mut(&keys.dev_addr) {
                Some(d) => {
                    d.edge = Some(keys);
                    true
                }
                None => false,
            },
            _ => false,
        };
        let ack = HandoffAck::seal(gw, msg.dev_addr, msg.seq, accepted, &channel);
        let mut out = vec![AsOutput::ToGateway {
            gw,
            env: Envelope::new(EnvelopeKind::HandoffAck, gw, now, now, &ack.encode()),
        }];
        if accepted {
            self.counters.handoffs_accepted += 1;
            out.push(AsOutput::Event(AsEvent::KeysInstalled { dev_addr: msg.dev_addr, gw }));
        } else {
            self.counters.handoffs_rejected += 1;
            out.push(AsOutput::Event(AsEvent::HandoffRejected { gw }));
        }
        out
    }

    fn security_drop(&mut self, dev_addr: DevAddr, reason: &'static str) -> Vec<AsOutput> {
        self.counters.security_drops += 1;
        vec![AsOutput::Event(AsEvent::SecurityDrop { dev_addr, reason })]
    }

    fn on_aggregate(&mut self, now: Micros, env: &Envelope) -> Result<Vec<AsOutput>, CapacityExceeded> {
        self.counters.edge_received += 1;
        let agg = match EdgeAggregate::from_envelope(env) {
            Ok(a) => a,
            Err(_) => return Ok(self.security_drop(DevAddr(0), "malformed aggregate")),
        };
        let Some(dev) = self.devices.get(&agg.dev_addr) else {
            self.counters.unknown_device += 1;
            return Ok(Vec::new());
        };
        let Some(keys) = dev.edge else {
            return Ok(self.security_drop(agg.dev_addr, "no edge keys"));
        };
        if keys.assigned_gw != env.gw_id || agg.gw_id != env.gw_id {
            return Ok(self.security_drop(agg.dev_addr, "not the serving gateway"));
        }
        let values = match agg.open(&keys) {
            Ok(v) => v,
            Err(_) => return Ok(self.security_drop(agg.dev_addr, "aggregate tag")),
        };
        let dev_eui = dev.dev_eui;
        let mut late = Vec::new();
        let mut seen = BTreeSet::new();
        for (&fcnt, &mic) in agg.fcnt_list.iter().zip(&agg.mic_list) {
            let key = DdfKey::new(agg.dev_addr, fcnt, mic);
            if !seen.insert(key) {
                continue;
            }
            match self.ddf.check_and_insert(key)? {
                Verdict::Fresh => self.set_fate(key, Fate::Edge),
                Verdict::Duplicate => {
                    if let Some(f @ Fate::Cloud) = self.fates.get_mut(&key) {
                        *f = Fate::LateDuplicate;
                        late.push(fcnt);
                    }
                }
            }
        }
        assert!(now >= env.egress_time_us, "delivery before egress");
        self.counters.edge_deliveries += 1;
        self.counters.late_overlaps += late.len() as u64;
        self.deliveries.push(AsDelivery {
            path: DeliveryPath::Edge,
            dev_eui,
            dev_addr: agg.dev_addr,
            gw_id: env.gw_id,
            fcnt_list: agg.fcnt_list.clone(),
            values,
            function: Some(agg.function),
            fallback: false,
            egress_us: env.egress_time_us,
            arrival_us: now,
            latency_us: now - env.egress_time_us,
            late_overlap: late.clone(),
        });
        if late.is_empty() {
            Ok(Vec::new())
        } else {
            Ok(vec![AsOutput::Event(AsEvent::LateOverlap { dev_addr: agg.dev_addr, fcnts: late })])
        }
    }
}
