use std::collections::BTreeMap;

use serde::Serialize;

use crate::codec::{
    message_type, AesKey, DataFrame, DevAddr, GatewayId, JoinRequest, FPORT_EDGE_JOIN, FPORT_SENSOR,
    MHDR_DATA_UP, MHDR_JOIN_REQUEST,
};
use crate::sim::{Envelope, Micros};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NsConfig {
    /// Time the NS waits for further gateway copies before forwarding.
    pub processing: Micros,
    /// Copies arriving this long after the first are no longer matched.
    pub dedup_window: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NsTimer {
    Flush(u64),
    Purge(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatewayRx {
    pub gw_id: GatewayId,
    pub rssi: i16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NsOutput {
    ToAs(Envelope),
    JoinRequest { request: JoinRequest, receptions: Vec<GatewayRx> },
    EdgeJoin { frame: DataFrame, receptions: Vec<GatewayRx> },
    Arm { at: Micros, timer: NsTimer },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NsCounters {
    pub received: u64,
    pub malformed: u64,
    pub unknown_device: u64,
    pub bad_mic: u64,
    pub unsupported_port: u64,
    pub duplicates: u64,
    pub forwarded_as: u64,
    pub to_js: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    App,
    Join,
    EdgeJoin,
}

struct Collecting {
    id: u64,
    route: Route,
    best: Envelope,
    receptions: Vec<GatewayRx>,
}

/// Network server: validates uplinks, merges multi-gateway copies, and
/// routes data to the AS and activation traffic to the JS.
pub struct NetworkServer {
    config: NsConfig,
    sessions: BTreeMap<DevAddr, AesKey>,
    collecting: BTreeMap<Vec<u8>, Collecting>,
    ids: BTreeMap<u64, Vec<u8>>,
    recent: BTreeMap<Vec<u8>, u64>,
    next_id: u64,
    counters: NsCounters,
}

impl NetworkServer {
    pub fn new(config: NsConfig) -> Self {
        NetworkServer {
            config,
            sessions: BTreeMap::new(),
            collecting: BTreeMap::new(),
            ids: BTreeMap::new(),
            recent: BTreeMap::new(),
            next_id: 0,
            counters: NsCounters::default(),
        }
    }

    pub fn counters(&self) -> NsCounters {
        self.counters
    }

    pub fn install_session(&mut self, dev_addr: DevAddr, nwk_s_key: AesKey) {
        self.sessions.insert(dev_addr, nwk_s_key);
    }

    /// Every key the NS holds, for security checks.
    pub fn held_keys(&self) -> impl Iterator<Item = &AesKey> {
        self.sessions.values()
    }

    /// Envelopes waiting out the collection window.
    pub fn pending(&self) -> impl Iterator<Item = &Envelope> {
        self.collecting.values().map(|c| &c.best)
    }

    pub fn ingest(&mut self, now: Micros, env: Envelope) -> Vec<NsOutput> {
        self.counters.received += 1;
        let Ok(bytes) = env.payload() else {
            self.counters.malformed += 1;
            return Vec::new();
        };
        let route = match message_type(&bytes) {
            Some(MHDR_JOIN_REQUEST) if bytes.len() == JoinRequest::LEN => Route::Join,
            Some(MHDR_DATA_UP) => {
                let Ok(frame) = DataFrame::decode(&bytes) else {
                    self.counters.malformed += 1;
                    return Vec::new();
                };
                let Some(key) = self.sessions.get(&frame.dev_addr) else {
                    self.counters.unknown_device += 1;
                    return Vec::new();
                };
                if !frame.verify_mic(key) {
                    self.counters.bad_mic += 1;
                    return Vec::new();
                }
                match frame.fport {
                    FPORT_SENSOR => Route::App,
                    FPORT_EDGE_JOIN => Route::EdgeJoin,
                    _ => {
                        self.counters.unsupported_port += 1;
                        return Vec::new();
                    }
                }
            }
            _ => {
                self.counters.malformed += 1;
                return Vec::new();
            }
        };
        if self.recent.contains_key(&bytes) {
            self.counters.duplicates += 1;
            return Vec::new();
        }
        let rx = GatewayRx { gw_id: env.gw_id, rssi: env.rssi };
        if let Some(c) = self.collecting.get_mut(&bytes) {
            self.counters.duplicates += 1;
            c.receptions.push(rx);
            if env.rssi > c.best.rssi {
                c.best = env;
            }
            return Vec::new();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.ids.insert(id, bytes.clone());
        self.collecting.insert(bytes, Collecting { id, route, best: env, receptions: vec![rx] });
        vec![NsOutput::Arm { at: now + self.config.processing, timer: NsTimer::Flush(id) }]
    }

    pub fn on_timer(&mut self, now: Micros, timer: NsTimer) -> Vec<NsOutput> {
        match timer {
            NsTimer::Flush(id) => {
                let Some(bytes) = self.ids.get(&id).cloned() else {
                    return Vec::new();
                };
                let Some(c) = self.collecting.remove(&bytes) else {
                    return Vec::new();
                };
                let mut out = Vec::new();
                let purge_at = now.saturating_sub(self.config.processing) + self.config.dedup_window;
                if purge_at > now {
                    self.recent.insert(bytes.clone(), c.id);
                    out.push(NsOutput::Arm { at: purge_at, timer: NsTimer::Purge(id) });
                } else {
                    self.ids.remove(&id);
                }
                match c.route {
                    Route::App => {
                        self.counters.forwarded_as += 1;
                        out.push(NsOutput::ToAs(c.best));
                    }
                    Route::Join => {
                        self.counters.to_js += 1;
                        let request = JoinRequest::decode(&bytes).expect("length checked at ingest");
                        out.push(NsOutput::JoinRequest { request, receptions: c.receptions });
                    }
                    Route::EdgeJoin => {
                        self.counters.to_js += 1;
                        let frame = DataFrame::decode(&bytes).expect("decoded at ingest");
                        out.push(NsOutput::EdgeJoin { frame, receptions: c.receptions });
                    }
                }
                out
            }
            NsTimer::Purge(id) => {
                if let Some(bytes) = self.ids.remove(&id) {
                    self.recent.remove(&bytes);
                }
                Vec::new()
            }
        }
    }
}

/// Strongest reception among `candidates`; ties go to the lowest gateway id.
pub fn strongest(candidates: impl IntoIterator<Item = GatewayRx>) -> Option<GatewayRx> {
    candidates.into_iter().max_by(|a, b| a.rssi.cmp(&b.rssi).then(b.gw_id.cmp(&a.gw_id)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Direction, FPORT_SENSOR};
    use crate::sim::{EnvelopeKind, MS};

    fn ns() -> NetworkServer {
        let mut ns = NetworkServer::new(NsConfig { processing: 50 * MS, dedup_window: 200 * MS });
        ns.install_session(DevAddr(7), AesKey([1; 16]));
        ns
    }

    fn frame(fcnt: u16, key: &AesKey) -> Vec<u8> {
        DataFrame::seal(Direction::Uplink, DevAddr(7), fcnt, FPORT_SENSOR, &[0; 12], &AesKey([2; 16]), key)
            .unwrap()
            .encode()
    }

    fn env(gw: u16, rssi: i16, bytes: &[u8]) -> Envelope {
        Envelope::new(EnvelopeKind::Uplink, GatewayId(gw), 0, 0, bytes).with_radio(0, rssi)
    }

    fn run(ns: &mut NetworkServer, mut out: Vec<NsOutput>) -> Vec<NsOutput> {
        let mut done = Vec::new();
        while let Some(o) = out.pop() {
            match o {
                NsOutput::Arm { at, timer } => out.extend(ns.on_timer(at, timer)),
                other => done.push(other),
            }
        }
        done
    }

    #[test]
    fn two_gateway_copies_forward_once_with_strongest() {
        let mut ns = ns();
        let f = frame(1, &AesKey([1; 16]));
        let mut out = ns.ingest(0, env(1, -90, &f));
        out.extend(ns.ingest(10 * MS, env(2, -70, &f)));
        let done = run(&mut ns, out);
        assert_eq!(done.len(), 1);
        match &done[0] {
            NsOutput::ToAs(e) => assert_eq!(e.gw_id, GatewayId(2)),
            o => panic!("{o:?}"),
        }
        assert_eq!(ns.counters().duplicates, 1);
    }

    #[test]
    fn bad_mic_is_dropped_and_counted() {
        let mut ns = ns();
        assert!(ns.ingest(0, env(1, -90, &frame(1, &AesKey([9; 16])))).is_empty());
        assert_eq!(ns.counters().bad_mic, 1);
    }

    #[test]
    fn distinct_fcnts_forward_separately() {
        let mut ns = ns();
        let mut out = ns.ingest(0, env(1, -90, &frame(1, &AesKey([1; 16]))));
        out.extend(ns.ingest(0, env(1, -90, &frame(2, &AesKey([1; 16])))));
        assert_eq!(run(&mut ns, out).len(), 2);
    }

    #[test]
    fn copy_inside_dedup_window_after_forward_is_dropped() {
        let mut ns = ns();
        let f = frame(1, &AesKey([1; 16]));
        let out = ns.ingest(0, env(1, -90, &f));
        let NsOutput::Arm { at, timer } = out[0] else { panic!() };
        let flushed = ns.on_timer(at, timer);
        assert!(ns.ingest(150 * MS, env(2, -60, &f)).is_empty());
        assert_eq!(ns.counters().duplicates, 1);
        let purge = flushed
            .iter()
            .find_map(|o| match o {
                NsOutput::Arm { at, timer } => Some((*at, *timer)),
                _ => None,
            })
            .unwrap();
        assert_eq!(purge.0, 200 * MS);
        ns.on_timer(purge.0, purge.1);
        assert_eq!(ns.ingest(250 * MS, env(2, -60, &f)).len(), 1);
    }

    #[test]
    fn strongest_breaks_ties_by_lowest_id() {
        let rx = |g, r| GatewayRx { gw_id: GatewayId(g), rssi: r };
        assert_eq!(strongest([rx(1, -90), rx(2, -70)]).unwrap().gw_id, GatewayId(2));
        assert_eq!(strongest([rx(3, -70), rx(2, -70)]).unwrap().gw_id, GatewayId(2));
        assert_eq!(strongest([]), None);
    }
}
