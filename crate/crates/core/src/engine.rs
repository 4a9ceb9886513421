//! The assembled emulator: every actor on one deterministic event loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::codec::{message_type, AesKey, DataFrame, DevAddr, Eui, GatewayId, FPORT_SENSOR, MHDR_DATA_UP};
use crate::control::metrics::{GatewayMetrics, QueueDepths, ScalabilityProxies};
use crate::control::scenario::{parse_static_key, ScenarioConfig, SCHEMA_VERSION};
use crate::control::{
    Accounting, ConfigError, DeviceTraffic, FrameCounts, LatencyByPath, LatencyStats, MetricsSnapshot, Report,
    TrafficStats,
};
use crate::ddf::DdfKey;
use crate::device::{
    parse_sensor_payload, validate_payload_len, validate_period, ActivationState, Device, DeviceAction, DeviceEvent,
    DeviceMode, DeviceProfile, DeviceTimer, TxKind,
};
use crate::edge_crypto::{EcKeyPair, EdgeSessionKeys};
use crate::gateway::{
    AggregateFunction, AggregationSpec, Gateway, GatewayConfig, GatewayEvent, GatewayMode, GatewayOutput, GatewayTimer,
};
use crate::servers::{
    AppServer, AsConfig, AsDelivery, AsEvent, AsOutput, DeliveryPath, Fate, JoinServer, JsEvent, JsOutput,
    NetworkServer, NsConfig, NsOutput, NsTimer,
};
use crate::sim::{
    CoverageMatrix, Endpoint, Envelope, EnvelopeKind, LaneDir, Link, LinkConfig, LinkStats, Micros, RadioMedium,
    RadioTx, Scheduler, SimError, TraceHasher, TxId, MS, SECOND,
};

const DEFAULT_JOIN_EUI: Eui = Eui(0x70b3_d57e_d000_0000);
const EVENT_BUFFER: usize = 4096;

const TAG_DEVICE: u64 = 1;
const TAG_GATEWAY: u64 = 2;
const TAG_KEYS: u64 = 3;
const TAG_ROOT: u64 = 4;
const TAG_RADIO: u64 = 5;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent seed for one consumer of randomness.
pub fn sub_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(tag.wrapping_mul(0x1000_0000_01b3) ^ splitmix(index)))
}

fn seeded_bytes<const N: usize>(seed: u64) -> [u8; N] {
    let mut out = [0u8; N];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut out);
    out
}

#[derive(Debug, Clone)]
enum Event {
    Device { dev: usize, timer: DeviceTimer, epoch: u64 },
    RadioEnd(TxId),
    Downlink(Vec<u8>),
    Link { link: usize, dir: LaneDir, bytes: Vec<u8> },
    Gateway { gw: usize, timer: GatewayTimer },
    Ns(NsTimer),
    AsRelease,
}

impl Event {
    fn describe(&self) -> String {
        match self {
            Event::Link { link, dir, bytes } => format!("link {link} {dir:?} {}", String::from_utf8_lossy(bytes)),
            Event::Downlink(bytes) => format!("downlink {}", hex::encode(bytes)),
            other => format!("{other:?}"),
        }
    }
}

/// Discrete occurrence pushed to event-stream subscribers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent {
    pub t_us: Micros,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEventKind {
    Joined { dev_eui: Eui, dev_addr: DevAddr },
    JoinFailed { dev_eui: Eui },
    EdgeAssigned { dev_eui: Eui, gw: GatewayId },
    NoEdgeGateway { dev_eui: Eui },
    KeysInstalled { dev_addr: DevAddr, gw: GatewayId },
    EdgeActivated { dev_eui: Eui, gw: GatewayId },
    EdgeFallback { dev_eui: Eui },
    ModeChanged { dev_eui: Eui, mode: DeviceMode },
    Aggregate { gw: GatewayId, dev_addr: DevAddr, frames: usize },
    DuplicateDrop { dev_addr: DevAddr, fcnt: u16 },
    LateOverlap { dev_addr: DevAddr, fcnts: Vec<u16> },
    SecurityDrop { dev_addr: DevAddr, reason: String },
    Rejected { reason: String },
    ConfigChanged { what: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceUpdate {
    pub mode: Option<DeviceMode>,
    pub period_ms: Option<u64>,
    pub payload_len: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationUpdate {
    pub function: Option<AggregateFunction>,
    pub window_len: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkUpdate {
    pub bandwidth_bps: Option<u64>,
    pub delay_ms: Option<u64>,
}

/// Runtime mutation, applied between events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Device(Eui, DeviceUpdate),
    Aggregation(AggregationUpdate),
    Link(String, LinkUpdate),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandError {
    #[error("unknown device {0}")]
    UnknownDevice(Eui),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceView {
    pub dev_eui: Eui,
    pub mode: DeviceMode,
    pub activation: ActivationState,
    pub dev_addr: Option<DevAddr>,
    pub period_ms: u64,
    pub payload_len: usize,
    pub frames_sent: u32,
    pub serving_gw: Option<GatewayId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatewayView {
    pub id: GatewayId,
    pub mode: GatewayMode,
    pub suppress_ns_forward_for_e2ed: bool,
    pub serving: Vec<DevAddr>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateView {
    pub sim_time_us: Micros,
    pub duration_us: Micros,
    pub seed: u64,
    pub pacing: f64,
    pub devices: Vec<DeviceView>,
    pub gateways: Vec<GatewayView>,
    pub aggregation: AggregationSpec,
    pub links: Vec<LinkStats>,
}

/// The same frame as the NS and the edge see it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecurityView {
    pub dev_eui: Eui,
    pub dev_addr: DevAddr,
    pub fcnt: u16,
    pub ciphertext_hex: String,
    /// Keys the NS holds, and whether any of them yields a valid sensor payload.
    pub ns_keys_tried: usize,
    pub ns_can_read: bool,
    pub plaintext: Option<[f32; 3]>,
    /// `edge_gateway` for served E2ED frames, `application_server` otherwise.
    pub plaintext_source: &'static str,
}

/// Copies of one device's edge keys, in canonical byte form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyCopies {
    pub dev_eui: Eui,
    pub device: Option<[u8; 38]>,
    pub gateway: Option<[u8; 38]>,
    pub server: Option<[u8; 38]>,
}

pub struct Simulation {
    config: ScenarioConfig,
    seed: u64,
    end: Micros,
    sched: Scheduler<Event>,
    trace: TraceHasher,
    radio_rng: ChaCha8Rng,
    radio: RadioMedium,
    devices: Vec<Device>,
    dev_index: BTreeMap<Eui, usize>,
    addr_index: BTreeMap<DevAddr, usize>,
    gateways: Vec<Gateway>,
    gw_index: BTreeMap<GatewayId, usize>,
    links: Vec<Link>,
    ns: NetworkServer,
    js: JoinServer,
    app: AppServer,
    spec: AggregationSpec,
    airtime_per_byte: Micros,
    downlink_delay: Micros,
    in_air: BTreeMap<TxId, (usize, TxKind)>,
    accepted: BTreeSet<DdfKey>,
    last_frame: BTreeMap<usize, DataFrame>,
    traffic: TrafficStats,
    device_traffic: Vec<DeviceTraffic>,
    frames: FrameCounts,
    events: VecDeque<SimEvent>,
    events_emitted: u64,
}

impl Simulation {
    /// Build a run from a validated scenario. `seed` overrides the file's.
    pub fn new(config: ScenarioConfig, seed: Option<u64>) -> Result<Self, ConfigError> {
        config.validate().or_else(|e| match (&e, seed) {
            (ConfigError::Invalid { field, .. }, Some(_)) if field == "seed" => Ok(()),
            _ => Err(e),
        })?;
        let seed = seed.or(config.seed).unwrap_or_else(rand::random);
        let end = (config.duration_s * SECOND as f64).round() as Micros;

        let static_key = |field: &str, hex_key: &Option<String>, index: u64| -> Result<EcKeyPair, ConfigError> {
            Ok(EcKeyPair::from_private_bytes(match hex_key {
                Some(k) => parse_static_key(field, k)?,
                None => seeded_bytes(sub_seed(seed, TAG_KEYS, index)),
            }))
        };
        let js_key = static_key("servers.js_static_key", &config.servers.js_static_key, 0)?;
        let as_key = static_key("servers.as_static_key", &config.servers.as_static_key, 1)?;
        let js_pub = js_key.public_bytes();
        let as_pub = as_key.public_bytes();

        let spec = AggregationSpec {
            function: config.aggregation.function,
            window_len: config.aggregation.window_len as u8,
            timeout_periods: config.aggregation.timeout_periods,
        };
        let crypto_err = |field: String| move |e: crate::edge_crypto::EdgeCryptoError| ConfigError::Invalid { field, reason: e.to_string() };

        let mut js = JoinServer::new(js_key);
        let mut app = AppServer::new(
            as_key,
            AsConfig {
                window_len: spec.window_len,
                hold_margin: config.aggregation.hold_margin_ms * MS,
                hold_override: config.aggregation.hold_timeout_ms.map(|ms| ms * MS),
                ddf_capacity: config.servers.ddf_capacity,
            },
        );
        let mut gateways = Vec::new();
        let mut gw_index = BTreeMap::new();
        for (i, g) in config.gateways.iter().enumerate() {
            let id = GatewayId(g.id);
            let key = static_key(&format!("gateways[{i}].static_key"), &g.static_key, 100 + g.id as u64)?;
            let gw = Gateway::new(
                GatewayConfig { id, mode: g.mode, suppress_ns_forward_for_e2ed: g.suppress_ns_forward_for_e2ed },
                key,
                &as_pub,
                &js_pub,
                spec,
                sub_seed(seed, TAG_GATEWAY, g.id as u64),
            )
            .map_err(crypto_err(format!("gateways[{i}].static_key")))?;
            js.add_gateway(id, g.mode, &gw.public_key()).map_err(crypto_err(format!("gateways[{i}].static_key")))?;
            app.add_gateway(id, &gw.public_key()).map_err(crypto_err(format!("gateways[{i}].static_key")))?;
            gw_index.insert(id, gateways.len());
            gateways.push(gw);
        }

        let mut links = Vec::new();
        let d = &config.link_defaults;
        let cfg = |a, b, p: crate::control::scenario::LinkProfile| LinkConfig {
            a,
            b,
            bandwidth: p.bandwidth_bps,
            base_delay: p.delay_ms * MS,
        };
        for g in &config.gateways {
            let ep = Endpoint::Gateway(GatewayId(g.id));
            links.push(Link::new(cfg(ep, Endpoint::NetworkServer, d.gw_ns)));
            links.push(Link::new(cfg(ep, Endpoint::AppServer, d.gw_as)));
        }
        links.push(Link::new(cfg(Endpoint::NetworkServer, Endpoint::AppServer, d.ns_as)));
        for o in &config.links {
            let link = links.iter_mut().find(|l| l.id() == o.id).expect("validated link id");
            if let Some(b) = o.bandwidth_bps {
                link.set_bandwidth(b);
            }
            if let Some(ms) = o.delay_ms {
                link.set_delay(ms * MS);
            }
        }

        let mut probs = vec![vec![config.coverage.default; config.gateways.len()]; config.devices.len()];
        let mut devices = Vec::new();
        let mut dev_index = BTreeMap::new();
        for (i, d) in config.devices.iter().enumerate() {
            let root_key = d.root_key.unwrap_or_else(|| AesKey(seeded_bytes(sub_seed(seed, TAG_ROOT, d.dev_eui.0))));
            let join_eui = d.join_eui.unwrap_or(DEFAULT_JOIN_EUI);
            js.register(d.dev_eui, join_eui, root_key, d.mode, d.period_ms);
            let profile = DeviceProfile {
                dev_eui: d.dev_eui,
                join_eui,
                root_key,
                mode: d.mode,
                period_ms: d.period_ms,
                payload_len: d.payload_len,
                max_frames: d.max_frames,
                start_offset_ms: d.start_offset_ms,
            };
            devices.push(Device::new(profile, sub_seed(seed, TAG_DEVICE, d.dev_eui.0), config.radio.channels));
            dev_index.insert(d.dev_eui, i);
        }
        for o in &config.coverage.overrides {
            let gi = config.gateways.iter().position(|g| g.id == o.gateway).expect("validated gateway");
            probs[dev_index[&o.dev_eui]][gi] = o.prob;
        }
        let coverage = CoverageMatrix::new(probs, config.gateways.len())
            .map_err(|reason| ConfigError::Invalid { field: "coverage".into(), reason })?;

        let device_traffic = config.devices.iter().map(|d| DeviceTraffic { dev_eui: d.dev_eui, ..Default::default() }).collect();
        let mut sim = Simulation {
            seed,
            end,
            sched: Scheduler::new(),
            trace: TraceHasher::default(),
            radio_rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_RADIO, 0)),
            radio: RadioMedium::new(coverage),
            devices,
            dev_index,
            addr_index: BTreeMap::new(),
            gateways,
            gw_index,
            links,
            ns: NetworkServer::new(NsConfig {
                processing: config.servers.ns_processing_ms * MS,
                dedup_window: config.servers.ns_dedup_window_ms * MS,
            }),
            js,
            app,
            spec,
            airtime_per_byte: config.radio.airtime_us_per_byte,
            downlink_delay: config.radio.downlink_delay_ms * MS,
            in_air: BTreeMap::new(),
            accepted: BTreeSet::new(),
            last_frame: BTreeMap::new(),
            traffic: TrafficStats::default(),
            device_traffic,
            frames: FrameCounts::default(),
            events: VecDeque::new(),
            events_emitted: 0,
            config,
        };
        for dev in 0..sim.devices.len() {
            let boot = sim.devices[dev].boot();
            sim.device_actions(0, dev, vec![boot]);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> Micros {
        self.sched.now()
    }

    pub fn end(&self) -> Micros {
        self.end
    }

    pub fn is_finished(&self) -> bool {
        self.sched.now() >= self.end
    }

    pub fn trace_hash(&self) -> String {
        self.trace.hex()
    }

    pub fn next_event_time(&self) -> Option<Micros> {
        self.sched.peek_time()
    }

    /// Dispatch every event due at or before `until` (capped at the scenario end).
    pub fn run_until(&mut self, until: Micros) -> Result<u64, SimError> {
        let until = until.min(self.end);
        let mut n = 0;
        while let Some((at, ev)) = self.sched.pop_until(until) {
            self.trace.record(at, &ev.describe());
            self.dispatch(at, ev)?;
            n += 1;
        }
        self.sched.advance_to(until);
        Ok(n)
    }

    pub fn run_to_end(&mut self) -> Result<u64, SimError> {
        self.run_until(self.end)
    }

    fn emit(&mut self, t_us: Micros, kind: SimEventKind) {
        if self.events.len() == EVENT_BUFFER {
            self.events.pop_front();
        }
        self.events.push_back(SimEvent { t_us, kind });
        self.events_emitted += 1;
    }

    /// Take buffered events (oldest first).
    pub fn drain_events(&mut self) -> Vec<SimEvent> {
        self.events.drain(..).collect()
    }

    fn schedule(&mut self, at: Micros, ev: Event) {
        self.sched.schedule(at.max(self.sched.now()), ev).expect("clamped to now");
    }

    fn dispatch(&mut self, now: Micros, ev: Event) -> Result<(), SimError> {
        match ev {
            Event::Device { dev, timer, epoch } => {
                let actions = self.devices[dev].on_timer(now, timer, epoch);
                self.device_actions(now, dev, actions);
            }
            Event::RadioEnd(id) => self.radio_end(now, id)?,
            Event::Downlink(bytes) => {
                for dev in 0..self.devices.len() {
                    let actions = self.devices[dev].on_downlink(now, &bytes);
                    self.device_actions(now, dev, actions);
                }
            }
            Event::Link { link, dir, bytes } => self.link_arrival(now, link, dir, &bytes)?,
            Event::Gateway { gw, timer } => {
                let out = self.gateways[gw].on_timer(now, timer);
                self.gateway_outputs(now, gw, out);
            }
            Event::Ns(timer) => {
                let out = self.ns.on_timer(now, timer);
                self.ns_outputs(now, out);
            }
            Event::AsRelease => {
                let out = self.app.release_due(now)?;
                self.as_outputs(now, out);
            }
        }
        Ok(())
    }

    fn device_actions(&mut self, now: Micros, dev: usize, actions: Vec<DeviceAction>) {
        let dev_eui = self.devices[dev].profile().dev_eui;
        for a in actions {
            match a {
                DeviceAction::Transmit(t) => {
                    if let TxKind::Data(_) = t.kind {
                        match self.devices[dev].profile().mode {
                            DeviceMode::Legacy => self.frames.sent_legacy += 1,
                            DeviceMode::E2ed => self.frames.sent_e2ed += 1,
                        }
                        if let Ok(f) = DataFrame::decode(&t.bytes) {
                            self.last_frame.insert(dev, f);
                        }
                    }
                    let airtime = (t.bytes.len() as Micros * self.airtime_per_byte).max(1);
                    let tx = RadioTx { device: dev, start: now, airtime, channel: t.channel, payload: t.bytes };
                    let id = self.radio.begin(tx, &mut self.radio_rng).expect("device index is in the matrix");
                    self.in_air.insert(id, (dev, t.kind));
                    self.schedule(now + airtime, Event::RadioEnd(id));
                }
                DeviceAction::Arm { at, timer, epoch } => self.schedule(at, Event::Device { dev, timer, epoch }),
                DeviceAction::Event(e) => {
                    let kind = match e {
                        DeviceEvent::Joined { .. } => continue,
                        DeviceEvent::EdgeActivated { gw } => SimEventKind::EdgeActivated { dev_eui, gw },
                        DeviceEvent::EdgeFallback => SimEventKind::EdgeFallback { dev_eui },
                        DeviceEvent::JoinFailed => SimEventKind::JoinFailed { dev_eui },
                    };
                    self.emit(now, kind);
                }
            }
        }
    }

    fn radio_end(&mut self, now: Micros, id: TxId) -> Result<(), SimError> {
        let Some((tx, receptions)) = self.radio.finish(id) else {
            return Ok(());
        };
        let kind = self.in_air.remove(&id).map(|(_, k)| k);
        if let (Some(TxKind::Data(key)), false) = (kind, receptions.is_empty()) {
            if self.accepted.insert(key) {
                self.frames.accepted_at_gateways += 1;
            }
        }
        for r in receptions {
            let out = self.gateways[r.gateway].on_reception(now, &tx.payload, tx.channel, r.rssi);
            self.gateway_outputs(now, r.gateway, out);
        }
        Ok(())
    }

    fn link_index(&self, from: Endpoint, to: Endpoint) -> (usize, LaneDir) {
        self.links
            .iter()
            .enumerate()
            .find_map(|(i, l)| {
                let c = l.config();
                if (c.a, c.b) == (from, to) {
                    Some((i, LaneDir::Forward))
                } else if (c.b, c.a) == (from, to) {
                    Some((i, LaneDir::Reverse))
                } else {
                    None
                }
            })
            .expect("every endpoint pair has a link")
    }

    fn frame_device(&self, env: &Envelope) -> Option<usize> {
        let bytes = env.payload().ok()?;
        if message_type(&bytes) != Some(MHDR_DATA_UP) {
            return None;
        }
        let f = DataFrame::decode(&bytes).ok()?;
        if f.fport != FPORT_SENSOR {
            return None;
        }
        self.addr_index.get(&f.dev_addr).copied()
    }

    fn send(&mut self, now: Micros, from: Endpoint, to: Endpoint, env: &Envelope) {
        let bytes = env.to_bytes();
        let len = bytes.len() as u64;
        match env.kind {
            EnvelopeKind::Uplink => match self.frame_device(env) {
                Some(dev) => {
                    self.traffic.legacy_path_bytes += len;
                    self.device_traffic[dev].cloud_bytes += len;
                }
                None => self.traffic.control_bytes += len,
            },
            EnvelopeKind::EdgeAggregate => {
                self.traffic.edge_path_bytes += len;
                let dev = env.aggregate.as_ref().and_then(|a| self.addr_index.get(&a.dev_addr).copied());
                if let Some(dev) = dev {
                    self.device_traffic[dev].edge_bytes += len;
                }
            }
            _ => self.traffic.control_bytes += len,
        }
        let (link, dir) = self.link_index(from, to);
        let arrival = self.links[link].send(dir, now, bytes.len());
        self.schedule(arrival, Event::Link { link, dir, bytes });
    }

    fn link_arrival(&mut self, now: Micros, link: usize, dir: LaneDir, bytes: &[u8]) -> Result<(), SimError> {
        self.links[link].delivered(dir);
        let c = self.links[link].config().clone();
        let (from, to) = match dir {
            LaneDir::Forward => (c.a, c.b),
            LaneDir::Reverse => (c.b, c.a),
        };
        let Ok(env) = Envelope::from_bytes(bytes) else {
            return Ok(());
        };
        match (from, to) {
            (_, Endpoint::NetworkServer) => {
                let out = self.ns.ingest(now, env);
                self.ns_outputs(now, out);
            }
            (Endpoint::NetworkServer, Endpoint::AppServer) => {
                let out = self.app.on_cloud(now, &env)?;
                self.as_outputs(now, out);
            }
            (Endpoint::Gateway(_), Endpoint::AppServer) => {
                let out = self.app.on_gateway(now, &env)?;
                self.as_outputs(now, out);
            }
            (Endpoint::NetworkServer, Endpoint::Gateway(id)) => {
                let gw = self.gw_index[&id];
                let out = self.gateways[gw].on_from_ns(now, &env);
                self.gateway_outputs(now, gw, out);
            }
            (Endpoint::AppServer, Endpoint::Gateway(id)) => {
                let gw = self.gw_index[&id];
                let out = self.gateways[gw].on_from_as(now, &env);
                self.gateway_outputs(now, gw, out);
            }
            _ => {}
        }
        Ok(())
    }

    fn gateway_outputs(&mut self, now: Micros, gw: usize, out: Vec<GatewayOutput>) {
        let id = self.gateways[gw].id();
        let ep = Endpoint::Gateway(id);
        for o in out {
            match o {
                GatewayOutput::ToNs(env) => self.send(now, ep, Endpoint::NetworkServer, &env),
                GatewayOutput::ToAs(env) => self.send(now, ep, Endpoint::AppServer, &env),
                GatewayOutput::Downlink(bytes) => self.schedule(now + self.downlink_delay, Event::Downlink(bytes)),
                GatewayOutput::Arm { at, timer } => self.schedule(at, Event::Gateway { gw, timer }),
                GatewayOutput::Event(e) => {
                    let kind = match e {
                        GatewayEvent::Aggregate { dev_addr, frames } => SimEventKind::Aggregate { gw: id, dev_addr, frames },
                        GatewayEvent::MicFailure { dev_addr } => SimEventKind::SecurityDrop { dev_addr, reason: format!("{id} frame MIC") },
                        GatewayEvent::FormatFailure { dev_addr } => {
                            SimEventKind::SecurityDrop { dev_addr, reason: format!("{id} sensor format") }
                        }
                        GatewayEvent::StaleFrame { dev_addr, fcnt } => SimEventKind::DuplicateDrop { dev_addr, fcnt },
                        GatewayEvent::ControlRejected => SimEventKind::Rejected { reason: format!("{id} control message") },
                        GatewayEvent::Serving { .. } | GatewayEvent::Revoked { .. } => continue,
                    };
                    self.emit(now, kind);
                }
            }
        }
    }

    fn ns_outputs(&mut self, now: Micros, out: Vec<NsOutput>) {
        for o in out {
            match o {
                NsOutput::ToAs(env) => self.send(now, Endpoint::NetworkServer, Endpoint::AppServer, &env),
                NsOutput::JoinRequest { request, receptions } => {
                    let out = self.js.on_join_request(&request, &receptions);
                    self.js_outputs(now, out);
                }
                NsOutput::EdgeJoin { frame, receptions } => {
                    let out = self.js.on_edge_join(&frame, &receptions);
                    self.js_outputs(now, out);
                }
                NsOutput::Arm { at, timer } => self.schedule(at, Event::Ns(timer)),
            }
        }
    }

    fn js_outputs(&mut self, now: Micros, out: Vec<JsOutput>) {
        for o in out {
            match o {
                JsOutput::Downlink { gw, bytes } => {
                    let env = Envelope::new(EnvelopeKind::Downlink, gw, now, now, &bytes);
                    self.send(now, Endpoint::NetworkServer, Endpoint::Gateway(gw), &env);
                }
                JsOutput::Notice { gw, bytes } => {
                    let env = Envelope::new(EnvelopeKind::EdgeNotice, gw, now, now, &bytes);
                    self.send(now, Endpoint::NetworkServer, Endpoint::Gateway(gw), &env);
                }
                JsOutput::Session { dev_eui, dev_addr, nwk_s_key, app_s_key } => {
                    let dev = self.dev_index[&dev_eui];
                    let period = self.devices[dev].profile().period_ms * MS;
                    self.addr_index.insert(dev_addr, dev);
                    self.ns.install_session(dev_addr, nwk_s_key);
                    self.app.provision(dev_addr, dev_eui, app_s_key, period);
                    for g in &mut self.gateways {
                        g.set_device_period(dev_addr, period);
                    }
                }
                JsOutput::Event(e) => {
                    let kind = match e {
                        JsEvent::Joined { dev_eui, dev_addr } => SimEventKind::Joined { dev_eui, dev_addr },
                        JsEvent::EdgeAssigned { dev_eui, gw, .. } => SimEventKind::EdgeAssigned { dev_eui, gw },
                        JsEvent::NoEdgeGateway { dev_eui } => SimEventKind::NoEdgeGateway { dev_eui },
                        JsEvent::Rejected { reason } => SimEventKind::Rejected { reason: reason.to_string() },
                    };
                    self.emit(now, kind);
                }
            }
        }
    }

    fn as_outputs(&mut self, now: Micros, out: Vec<AsOutput>) {
        for o in out {
            match o {
                AsOutput::ToGateway { gw, env } => self.send(now, Endpoint::AppServer, Endpoint::Gateway(gw), &env),
                AsOutput::Arm { at } => self.schedule(at, Event::AsRelease),
                AsOutput::Event(e) => {
                    let kind = match e {
                        AsEvent::KeysInstalled { dev_addr, gw } => SimEventKind::KeysInstalled { dev_addr, gw },
                        AsEvent::HandoffRejected { gw } => SimEventKind::Rejected { reason: format!("key hand-off from {gw}") },
                        AsEvent::DuplicateDropped { dev_addr, fcnt } => SimEventKind::DuplicateDrop { dev_addr, fcnt },
                        AsEvent::SecurityDrop { dev_addr, reason } => {
                            SimEventKind::SecurityDrop { dev_addr, reason: reason.to_string() }
                        }
                        AsEvent::LateOverlap { dev_addr, fcnts } => SimEventKind::LateOverlap { dev_addr, fcnts },
                    };
                    self.emit(now, kind);
                }
            }
        }
    }

    /// Validate, then apply a runtime mutation at the current simulated time.
    pub fn apply(&mut self, cmd: Command) -> Result<(), CommandError> {
        let now = self.now();
        let invalid = |field: &'static str, e: &dyn std::fmt::Display| CommandError::Invalid { field, reason: e.to_string() };
        match cmd {
            Command::Device(dev_eui, u) => {
                let dev = *self.dev_index.get(&dev_eui).ok_or(CommandError::UnknownDevice(dev_eui))?;
                if let Some(p) = u.period_ms {
                    validate_period(p).map_err(|e| invalid("period_ms", &e))?;
                }
                if let Some(l) = u.payload_len {
                    validate_payload_len(l).map_err(|e| invalid("payload_len", &e))?;
                }
                if let Some(l) = u.payload_len {
                    self.devices[dev].set_payload_len(l).expect("validated");
                }
                if let Some(p) = u.period_ms {
                    let actions = self.devices[dev].set_period(now, p).expect("validated");
                    self.device_actions(now, dev, actions);
                    if let Some(e) = self.js.entry_mut(dev_eui) {
                        e.period_ms = p;
                    }
                    if let Some(addr) = self.devices[dev].session().map(|s| s.dev_addr) {
                        self.app.set_device_period(addr, p * MS);
                        for g in &mut self.gateways {
                            g.set_device_period(addr, p * MS);
                        }
                    }
                }
                if let Some(mode) = u.mode {
                    if let Some(e) = self.js.entry_mut(dev_eui) {
                        e.mode = mode;
                    }
                    let actions = self.devices[dev].set_mode(now, mode);
                    self.device_actions(now, dev, actions);
                    self.emit(now, SimEventKind::ModeChanged { dev_eui, mode });
                }
            }
            Command::Aggregation(u) => {
                if let Some(w) = u.window_len {
                    if !(1..=255).contains(&w) {
                        return Err(CommandError::Invalid { field: "window_len", reason: "must be in 1..=255".into() });
                    }
                }
                let mut spec = self.spec;
                if let Some(f) = u.function {
                    spec.function = f;
                }
                if let Some(w) = u.window_len {
                    spec.window_len = w as u8;
                }
                self.spec = spec;
                self.app.set_window_len(spec.window_len);
                for gw in 0..self.gateways.len() {
                    let out = self.gateways[gw].set_spec(now, spec);
                    self.gateway_outputs(now, gw, out);
                }
                self.emit(now, SimEventKind::ConfigChanged { what: format!("aggregation {} x{}", spec.function, spec.window_len) });
            }
            Command::Link(id, u) => {
                let link = self.links.iter().position(|l| l.id() == id).ok_or_else(|| CommandError::UnknownLink(id.clone()))?;
                if u.bandwidth_bps == Some(0) {
                    return Err(CommandError::Invalid { field: "bandwidth_bps", reason: "must be positive".into() });
                }
                if let Some(b) = u.bandwidth_bps {
                    self.links[link].set_bandwidth(b);
                }
                if let Some(ms) = u.delay_ms {
                    self.links[link].set_delay(ms * MS);
                }
                self.emit(now, SimEventKind::ConfigChanged { what: format!("link {id}") });
            }
        }
        Ok(())
    }

    pub fn deliveries(&self) -> &[AsDelivery] {
        self.app.deliveries()
    }

    pub fn delivery_log(&self) -> String {
        crate::control::delivery_log(self.deliveries())
    }

    pub fn accepted_frames(&self) -> &BTreeSet<DdfKey> {
        &self.accepted
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn gateways(&self) -> &[Gateway] {
        &self.gateways
    }

    pub fn network_server(&self) -> &NetworkServer {
        &self.ns
    }

    pub fn join_server(&self) -> &JoinServer {
        &self.js
    }

    pub fn app_server(&self) -> &AppServer {
        &self.app
    }

    pub fn last_frame(&self, dev_eui: Eui) -> Option<&DataFrame> {
        self.last_frame.get(self.dev_index.get(&dev_eui)?)
    }

    /// Edge keys as held by the device, its serving gateway, and the AS.
    pub fn key_copies(&self) -> Vec<KeyCopies> {
        self.devices
            .iter()
            .map(|d| {
                let session = d.session();
                let addr = session.map(|s| s.dev_addr);
                let device = session.and_then(|s| s.edge).map(|k| k.to_bytes());
                let gateway = addr.and_then(|a| self.gateways.iter().find_map(|g| g.edge_keys(a))).map(EdgeSessionKeys::to_bytes);
                let server = addr.and_then(|a| self.app.edge_keys(a)).map(EdgeSessionKeys::to_bytes);
                KeyCopies { dev_eui: d.profile().dev_eui, device, gateway, server }
            })
            .collect()
    }

    pub fn security_view(&self, dev_eui: Eui) -> Option<SecurityView> {
        let dev = *self.dev_index.get(&dev_eui)?;
        let frame = self.last_frame.get(&dev)?;
        let ns_keys: Vec<&AesKey> = self.ns.held_keys().collect();
        let ns_can_read = ns_keys.iter().any(|k| parse_sensor_payload(&frame.decrypt_payload(k)).is_ok());
        let served = self.gateways.iter().find_map(|g| g.edge_keys(frame.dev_addr));
        let (key, source) = match served {
            Some(k) => (Some(k.edge_s_enc_key), "edge_gateway"),
            None => (
                self.devices[dev].session().filter(|s| s.dev_addr == frame.dev_addr).map(|s| s.app_s_key),
                "application_server",
            ),
        };
        Some(SecurityView {
            dev_eui,
            dev_addr: frame.dev_addr,
            fcnt: frame.fcnt,
            ciphertext_hex: hex::encode(&frame.frm_payload),
            ns_keys_tried: ns_keys.len(),
            ns_can_read,
            plaintext: key.and_then(|k| parse_sensor_payload(&frame.decrypt_payload(&k)).ok()),
            plaintext_source: source,
        })
    }

    fn envelope_keys(env: &Envelope, out: &mut BTreeSet<DdfKey>) {
        match env.kind {
            EnvelopeKind::Uplink => {
                if let Some(f) = env.payload().ok().and_then(|b| DataFrame::decode(&b).ok()) {
                    out.insert(DdfKey::new(f.dev_addr, f.fcnt, f.mic));
                }
            }
            EnvelopeKind::EdgeAggregate => {
                if let Some(a) = &env.aggregate {
                    for (f, m) in a.fcnt_list.iter().zip(&a.mic_list) {
                        out.insert(DdfKey::new(a.dev_addr, *f, *m));
                    }
                }
            }
            _ => {}
        }
    }

    /// Frame identities currently inside the pipeline: on links, in NS
    /// collection, in the hold queue, or buffered in gateway windows.
    pub fn in_flight_keys(&self) -> BTreeSet<DdfKey> {
        let mut keys = BTreeSet::new();
        for (_, ev) in self.sched.pending() {
            if let Event::Link { bytes, .. } = ev {
                if let Ok(env) = Envelope::from_bytes(bytes) {
                    Self::envelope_keys(&env, &mut keys);
                }
            }
        }
        for env in self.ns.pending() {
            Self::envelope_keys(env, &mut keys);
        }
        for h in self.app.held() {
            keys.insert(DdfKey::new(h.frame.dev_addr, h.frame.fcnt, h.frame.mic));
        }
        for g in &self.gateways {
            for (addr, w) in g.buffered() {
                for (fcnt, mic, _) in &w.buffer {
                    keys.insert(DdfKey::new(addr, *fcnt, *mic));
                }
            }
        }
        keys
    }

    pub fn accounting(&self) -> Accounting {
        let fates = self.app.fates();
        let pipeline = self.in_flight_keys();
        let mut a = Accounting { frames_accepted_at_gateways: self.accepted.len() as u64, ..Default::default() };
        for key in &self.accepted {
            match fates.get(key) {
                Some(Fate::Cloud) => a.delivered_cloud += 1,
                Some(Fate::Edge) => a.delivered_edge += 1,
                Some(Fate::LateDuplicate) => a.dropped_duplicates += 1,
                Some(Fate::Security) => a.dropped_security += 1,
                None if pipeline.contains(key) => a.in_flight += 1,
                None => a.unaccounted += 1,
            }
        }
        a.unexpected = fates.keys().filter(|k| !self.accepted.contains(k)).count() as u64;
        a
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let deliveries = self.app.deliveries();
        let cloud: Vec<u64> = deliveries.iter().filter(|d| d.path == DeliveryPath::Cloud).map(|d| d.latency_us).collect();
        let edge: Vec<&AsDelivery> = deliveries.iter().filter(|d| d.path == DeliveryPath::Edge).collect();
        let mut frames = self.frames;
        frames.cloud_deliveries = cloud.len() as u64;
        frames.edge_aggregates = edge.len() as u64;
        frames.edge_frames = edge.iter().map(|d| d.fcnt_list.len() as u64).sum();
        let mut traffic = self.traffic.clone();
        traffic.per_device = self.device_traffic.clone();
        let links: Vec<LinkStats> = self.links.iter().map(Link::stats).collect();
        let secs = (self.now() as f64 / SECOND as f64).max(1e-9);
        MetricsSnapshot {
            sim_time_us: self.now(),
            events_processed: self.sched.processed(),
            frames,
            latency: LatencyByPath {
                cloud: LatencyStats::from_micros(&cloud),
                edge: LatencyStats::from_micros(&edge.iter().map(|d| d.latency_us).collect::<Vec<_>>()),
            },
            traffic,
            queues: QueueDepths {
                scheduler: self.sched.len() as u64,
                ns_collecting: self.ns.pending().count() as u64,
                hold_queue: self.app.held().count() as u64,
                gateway_windows: self.gateways.iter().flat_map(|g| g.buffered()).map(|(_, w)| w.len() as u64).sum(),
                max_link_queue: links.iter().map(|l| l.forward.max_queue_depth.max(l.reverse.max_queue_depth)).max().unwrap_or(0),
            },
            links,
            radio: self.radio.counters(),
            gateways: self.gateways.iter().map(|g| GatewayMetrics { id: g.id(), counters: g.counters() }).collect(),
            ns: self.ns.counters(),
            js: self.js.counters(),
            app: self.app.counters(),
            ddf: self.app.ddf_stats(),
            accounting: self.accounting(),
            scalability_proxies: ScalabilityProxies {
                devices: self.devices.len() as u64,
                deliveries_per_s: deliveries.len() as f64 / secs,
                frames_per_s: (frames.sent_legacy + frames.sent_e2ed) as f64 / secs,
            },
        }
    }

    pub fn state(&self) -> StateView {
        let devices = self
            .devices
            .iter()
            .map(|d| {
                let p = d.profile();
                let addr = d.session().map(|s| s.dev_addr);
                DeviceView {
                    dev_eui: p.dev_eui,
                    mode: p.mode,
                    activation: d.state(),
                    dev_addr: addr,
                    period_ms: p.period_ms,
                    payload_len: p.payload_len,
                    frames_sent: d.frames_sent(),
                    serving_gw: addr.and_then(|a| self.gateways.iter().find(|g| g.edge_keys(a).is_some()).map(|g| g.id())),
                }
            })
            .collect();
        StateView {
            sim_time_us: self.now(),
            duration_us: self.end,
            seed: self.seed,
            pacing: self.config.pacing,
            devices,
            gateways: self
                .gateways
                .iter()
                .map(|g| GatewayView {
                    id: g.id(),
                    mode: g.mode(),
                    suppress_ns_forward_for_e2ed: g.config().suppress_ns_forward_for_e2ed,
                    serving: g.serving().map(|(a, _)| *a).collect(),
                })
                .collect(),
            aggregation: self.spec,
            links: self.links.iter().map(Link::stats).collect(),
        }
    }

    pub fn report(&self) -> Report {
        Report {
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            duration_s: self.config.duration_s,
            devices: self.devices.len(),
            gateways: self.gateways.len(),
            trace_hash: self.trace.hex(),
            metrics: self.snapshot(),
        }
    }
}
