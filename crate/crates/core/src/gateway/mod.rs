//! Gateway node: the packet forwarder bridge, plus the edge module on
//! E2GW-mode gateways.

mod window;

pub use window::{AggregateError, AggregateFunction, AggregationSpec, EdgeAggregate, PushOutcome, WindowState};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{AesKey, DataFrame, DevAddr, GatewayId, FPORT_SENSOR};
use crate::device::{parse_sensor_payload, seal_edge_accept};
use crate::edge_crypto::{
    derive_edge_keys, ChannelKeys, ChannelPurpose, EcKeyPair, EdgeCryptoError, EdgeNotice, EdgeSessionKeys,
    HandoffAck, KeyHandoff,
};
use crate::sim::{Envelope, EnvelopeKind, Micros};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Legacy,
    E2gw,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub id: GatewayId,
    pub mode: GatewayMode,
    pub suppress_ns_forward_for_e2ed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GatewayTimer {
    WindowTimeout { dev_addr: DevAddr, generation: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GatewayEvent {
    Serving { dev_addr: DevAddr },
    Revoked { dev_addr: DevAddr },
    Aggregate { dev_addr: DevAddr, frames: usize },
    MicFailure { dev_addr: DevAddr },
    FormatFailure { dev_addr: DevAddr },
    StaleFrame { dev_addr: DevAddr, fcnt: u16 },
    ControlRejected,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GatewayOutput {
    ToNs(Envelope),
    ToAs(Envelope),
    /// Frame to transmit over the air.
    Downlink(Vec<u8>),
    Arm { at: Micros, timer: GatewayTimer },
    Event(GatewayEvent),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayCounters {
    pub receptions: u64,
    pub forwarded_ns: u64,
    pub suppressed: u64,
    pub intercepted: u64,
    pub mic_failures: u64,
    pub format_failures: u64,
    pub stale_frames: u64,
    pub aggregates: u64,
    pub handoffs: u64,
    pub control_rejected: u64,
}

struct Pending {
    keys: EdgeSessionKeys,
    nwk_s_key: AesKey,
    gw_pub: [u8; 32],
    seq: u32,
}

struct Served {
    keys: EdgeSessionKeys,
    nwk_s_key: AesKey,
    window: WindowState,
    generation: u64,
    fcnt_down: u16,
}

pub struct Gateway {
    config: GatewayConfig,
    static_key: EcKeyPair,
    as_channel: ChannelKeys,
    js_channel: ChannelKeys,
    spec: AggregationSpec,
    periods: BTreeMap<DevAddr, Micros>,
    pending: BTreeMap<DevAddr, Pending>,
    serving: BTreeMap<DevAddr, Served>,
    handoff_seq: u32,
    rng: ChaCha8Rng,
    counters: GatewayCounters,
}

impl Gateway {
    pub fn new(
        config: GatewayConfig,
        static_key: EcKeyPair,
        as_pub: &[u8; 32],
        js_pub: &[u8; 32],
        spec: AggregationSpec,
        seed: u64,
    ) -> Result<Self, EdgeCryptoError> {
        let as_channel = ChannelKeys::between(&static_key, as_pub, config.id, ChannelPurpose::KeyHandoff)?;
        let js_channel = ChannelKeys::between(&static_key, js_pub, config.id, ChannelPurpose::Control)?;
        Ok(Gateway {
            config,
            static_key,
            as_channel,
            js_channel,
            spec,
            periods: BTreeMap::new(),
            pending: BTreeMap::new(),
            serving: BTreeMap::new(),
            handoff_seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: GatewayCounters::default(),
        })
    }

    pub fn id(&self) -> GatewayId {
        self.config.id
    }

    pub fn mode(&self) -> GatewayMode {
        self.config.mode
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.static_key.public_bytes()
    }

    pub fn counters(&self) -> GatewayCounters {
        self.counters
    }

    pub fn serving(&self) -> impl Iterator<Item = (&DevAddr, &EdgeSessionKeys)> {
        self.serving.iter().map(|(a, s)| (a, &s.keys))
    }

    pub fn edge_keys(&self, dev_addr: DevAddr) -> Option<&EdgeSessionKeys> {
        self.serving.get(&dev_addr).map(|s| &s.keys)
    }

    /// Buffered frames per served device, as `(dev_addr, fcnt)` pairs.
    pub fn buffered(&self) -> impl Iterator<Item = (DevAddr, &WindowState)> {
        self.serving.iter().map(|(a, s)| (*a, &s.window))
    }

    /// Registry information: how often a device transmits, for the straggler timeout.
    pub fn set_device_period(&mut self, dev_addr: DevAddr, period: Micros) {
        self.periods.insert(dev_addr, period);
    }

    pub fn set_spec(&mut self, now: Micros, spec: AggregationSpec) -> Vec<GatewayOutput> {
        self.spec = spec;
        let ready: Vec<DevAddr> = self
            .serving
            .iter()
            .filter(|(_, s)| s.window.len() >= spec.window_len as usize)
            .map(|(a, _)| *a)
            .collect();
        ready.into_iter().flat_map(|a| self.flush(now, a)).collect()
    }

    pub fn on_reception(&mut self, now: Micros, bytes: &[u8], channel: u8, rssi: i16) -> Vec<GatewayOutput> {
        self.counters.receptions += 1;
        let mut out = Vec::new();
        let mut suppress = false;
        if self.config.mode == GatewayMode::E2gw {
            if let Ok(frame) = DataFrame::decode(bytes) {
                if frame.fport == FPORT_SENSOR && self.serving.contains_key(&frame.dev_addr) {
                    suppress = self.config.suppress_ns_forward_for_e2ed;
                    self.intercept(now, frame, &mut out);
                }
            }
        }
        if suppress {
            self.counters.suppressed += 1;
        } else {
            self.counters.forwarded_ns += 1;
            let env = Envelope::new(EnvelopeKind::Uplink, self.config.id, now, now, bytes).with_radio(channel, rssi);
            out.insert(0, GatewayOutput::ToNs(env));
        }
        out
    }

    fn intercept(&mut self, now: Micros, frame: DataFrame, out: &mut Vec<GatewayOutput>) {
        let dev_addr = frame.dev_addr;
        let served = self.serving.get_mut(&dev_addr).expect("caller checked");
        self.counters.intercepted += 1;
        if !frame.verify_mic(&served.nwk_s_key) {
            self.counters.mic_failures += 1;
            out.push(GatewayOutput::Event(GatewayEvent::MicFailure { dev_addr }));
            return;
        }
        let values = match parse_sensor_payload(&frame.decrypt_payload(&served.keys.edge_s_enc_key)) {
            Ok(v) => v,
            Err(_) => {
                self.counters.format_failures += 1;
                out.push(GatewayOutput::Event(GatewayEvent::FormatFailure { dev_addr }));
                return;
            }
        };
        if served.window.push(now, frame.fcnt, frame.mic, values) == PushOutcome::Stale {
            self.counters.stale_frames += 1;
            out.push(GatewayOutput::Event(GatewayEvent::StaleFrame { dev_addr, fcnt: frame.fcnt }));
            return;
        }
        if served.window.len() >= self.spec.window_len as usize {
            out.extend(self.flush(now, dev_addr));
        } else {
            served.generation += 1;
            let period = self.periods.get(&dev_addr).copied().unwrap_or(crate::sim::SECOND);
            out.push(GatewayOutput::Arm {
                at: now + self.spec.timeout_periods as Micros * period,
                timer: GatewayTimer::WindowTimeout { dev_addr, generation: served.generation },
            });
        }
    }

    fn flush(&mut self, now: Micros, dev_addr: DevAddr) -> Vec<GatewayOutput> {
        let Some(served) = self.serving.get_mut(&dev_addr) else {
            return Vec::new();
        };
        served.generation += 1;
        let opened_at = served.window.opened_at.unwrap_or(now);
        let buffer = served.window.take();
        let Some(values) = self.spec.function.apply(&buffer.iter().map(|b| b.2).collect::<Vec<_>>()) else {
            return Vec::new();
        };
        let frames: Vec<_> = buffer.iter().map(|b| (b.0, b.1)).collect();
        let agg = EdgeAggregate::seal(&served.keys, self.config.id, self.spec.function, &frames, values);
        self.counters.aggregates += 1;
        vec![
            GatewayOutput::ToAs(agg.to_envelope(opened_at, now)),
            GatewayOutput::Event(GatewayEvent::Aggregate { dev_addr, frames: frames.len() }),
        ]
    }

    pub fn on_timer(&mut self, now: Micros, timer: GatewayTimer) -> Vec<GatewayOutput> {
        match timer {
            GatewayTimer::WindowTimeout { dev_addr, generation } => {
                match self.serving.get(&dev_addr) {
                    Some(s) if s.generation == generation && !s.window.is_empty() => self.flush(now, dev_addr),
                    _ => Vec::new(),
                }
            }
        }
    }

    /// Messages arriving on the NS→GW lane: downlinks to transmit and
    /// control notices from the join server.
    pub fn on_from_ns(&mut self, now: Micros, env: &Envelope) -> Vec<GatewayOutput> {
        let Ok(bytes) = env.payload() else {
            return Vec::new();
        };
        match env.kind {
            EnvelopeKind::Downlink => vec![GatewayOutput::Downlink(bytes)],
            EnvelopeKind::EdgeNotice => self.on_notice(now, &bytes),
            _ => Vec::new(),
        }
    }

    fn reject(&mut self) -> Vec<GatewayOutput> {
        self.counters.control_rejected += 1;
        vec![GatewayOutput::Event(GatewayEvent::ControlRejected)]
    }

    fn on_notice(&mut self, now: Micros, bytes: &[u8]) -> Vec<GatewayOutput> {
        let Ok(notice) = EdgeNotice::decode(bytes) else {
            return self.reject();
        };
        if notice.gw_id() != self.config.id || self.config.mode != GatewayMode::E2gw {
            return self.reject();
        }
        let nwk_s_key = match notice.open(&self.js_channel) {
            Ok(k) => k,
            Err(_) => return self.reject(),
        };
        let dev_addr = notice.dev_addr();
        match (notice, nwk_s_key) {
            (EdgeNotice::Assign { join_nonce, device_pub, .. }, Some(nwk_s_key)) => {
                let eph = EcKeyPair::generate(&mut self.rng);
                let Ok(shared) = eph.dh(&device_pub) else {
                    return self.reject();
                };
                let keys = derive_edge_keys(&shared, dev_addr, join_nonce, self.config.id);
                self.handoff_seq += 1;
                let seq = self.handoff_seq;
                let handoff = KeyHandoff::seal(&keys, &self.as_channel, seq);
                self.pending.insert(dev_addr, Pending { keys, nwk_s_key, gw_pub: eph.public_bytes(), seq });
                self.counters.handoffs += 1;
                vec![GatewayOutput::ToAs(Envelope::new(EnvelopeKind::KeyHandoff, self.config.id, now, now, &handoff.encode()))]
            }
            (EdgeNotice::Revoke { .. }, _) => {
                let mut out = self.flush(now, dev_addr);
                self.pending.remove(&dev_addr);
                if self.serving.remove(&dev_addr).is_some() {
                    out.push(GatewayOutput::Event(GatewayEvent::Revoked { dev_addr }));
                }
                out
            }
            _ => self.reject(),
        }
    }

    /// Acknowledgement of a key hand-off from the application server.
    pub fn on_from_as(&mut self, _now: Micros, env: &Envelope) -> Vec<GatewayOutput> {
        if env.kind != EnvelopeKind::HandoffAck {
            return Vec::new();
        }
        let Some(ack) = env.payload().ok().and_then(|b| HandoffAck::decode(&b).ok()) else {
            return self.reject();
        };
        if !ack.verify(&self.as_channel) || ack.gw_id != self.config.id {
            return self.reject();
        }
        match self.pending.get(&ack.dev_addr) {
            Some(p) if p.seq == ack.seq => {}
            _ => return Vec::new(),
        }
        let p = self.pending.remove(&ack.dev_addr).unwrap();
        if !ack.accepted {
            return Vec::new();
        }
        let accept = seal_edge_accept(&p.keys, p.gw_pub, 1);
        self.serving.insert(
            ack.dev_addr,
            Served { keys: p.keys, nwk_s_key: p.nwk_s_key, window: WindowState::new(ack.dev_addr), generation: 0, fcnt_down: 1 },
        );
        vec![
            GatewayOutput::Downlink(accept.encode()),
            GatewayOutput::Event(GatewayEvent::Serving { dev_addr: ack.dev_addr }),
        ]
    }

    pub fn fcnt_down(&self, dev_addr: DevAddr) -> Option<u16> {
        self.serving.get(&dev_addr).map(|s| s.fcnt_down)
    }
}
