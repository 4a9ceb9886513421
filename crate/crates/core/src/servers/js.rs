use std::collections::BTreeMap;

use serde::Serialize;

use super::ns::{strongest, GatewayRx};
use crate::codec::{
    derive_session_keys, AesKey, DataFrame, DevAddr, EdgeJoinPayload, EdgeRole, Eui, GatewayId, JoinAccept,
    JoinRequest,
};
use crate::device::DeviceMode;
use crate::edge_crypto::{ChannelKeys, ChannelPurpose, EcKeyPair, EdgeCryptoError, EdgeNotice};
use crate::gateway::GatewayMode;

pub const NET_ID: u32 = 0x13;
const DEV_ADDR_BASE: u32 = 0x2600_0000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JsSession {
    pub dev_addr: DevAddr,
    pub join_nonce: u32,
    pub dev_nonce: u16,
    #[serde(skip)]
    pub nwk_s_key: AesKey,
    #[serde(skip)]
    pub app_s_key: AesKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegistryEntry {
    pub dev_eui: Eui,
    pub join_eui: Eui,
    #[serde(skip)]
    pub root_key: AesKey,
    pub mode: DeviceMode,
    pub period_ms: u64,
    pub last_dev_nonce: Option<u16>,
    pub session: Option<JsSession>,
    pub assigned_gw: Option<GatewayId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JsEvent {
    Joined { dev_eui: Eui, dev_addr: DevAddr },
    EdgeAssigned { dev_eui: Eui, dev_addr: DevAddr, gw: GatewayId },
    NoEdgeGateway { dev_eui: Eui },
    Rejected { reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JsOutput {
    /// Frame for `gw` to transmit.
    Downlink { gw: GatewayId, bytes: Vec<u8> },
    /// Authenticated control notice for `gw`.
    Notice { gw: GatewayId, bytes: Vec<u8> },
    /// New session keys to install at the NS and the AS.
    Session { dev_eui: Eui, dev_addr: DevAddr, nwk_s_key: AesKey, app_s_key: AesKey },
    Event(JsEvent),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct JsCounters {
    pub joins: u64,
    pub rejected: u64,
    pub edge_assignments: u64,
    pub edge_unassigned: u64,
    pub revocations: u64,
}

/// Join server: device registry, OTAA, and edge-gateway selection.
pub struct JoinServer {
    static_key: EcKeyPair,
    gateways: BTreeMap<GatewayId, (GatewayMode, ChannelKeys)>,
    registry: BTreeMap<Eui, RegistryEntry>,
    by_addr: BTreeMap<DevAddr, Eui>,
    next_addr: u32,
    next_join_nonce: u32,
    notice_seq: u32,
    counters: JsCounters,
}

impl JoinServer {
    pub fn new(static_key: EcKeyPair) -> Self {
        JoinServer {
            static_key,
            gateways: BTreeMap::new(),
            registry: BTreeMap::new(),
            by_addr: BTreeMap::new(),
            next_addr: 0,
            next_join_nonce: 0,
            notice_seq: 0,
            counters: JsCounters::default(),
        }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.static_key.public_bytes()
    }

    pub fn add_gateway(&mut self, gw: GatewayId, mode: GatewayMode, gw_pub: &[u8; 32]) -> Result<(), EdgeCryptoError> {
        let keys = ChannelKeys::between(&self.static_key, gw_pub, gw, ChannelPurpose::Control)?;
        self.gateways.insert(gw, (mode, keys));
        Ok(())
    }

    pub fn register(&mut self, dev_eui: Eui, join_eui: Eui, root_key: AesKey, mode: DeviceMode, period_ms: u64) {
        self.registry.insert(
            dev_eui,
            RegistryEntry {
                dev_eui,
                join_eui,
                root_key,
                mode,
                period_ms,
                last_dev_nonce: None,
                session: None,
                assigned_gw: None,
            },
        );
    }

    pub fn registry(&self) -> &BTreeMap<Eui, RegistryEntry> {
        &self.registry
    }

    pub fn entry_mut(&mut self, dev_eui: Eui) -> Option<&mut RegistryEntry> {
        self.registry.get_mut(&dev_eui)
    }

    pub fn dev_eui_of(&self, dev_addr: DevAddr) -> Option<Eui> {
        self.by_addr.get(&dev_addr).copied()
    }

    pub fn counters(&self) -> JsCounters {
        self.counters
    }

    /// Every key the JS holds, for security checks.
    pub fn held_keys(&self) -> Vec<AesKey> {
        self.registry
            .values()
            .flat_map(|e| {
                let mut v = vec![e.root_key];
                if let Some(s) = &e.session {
                    v.extend([s.nwk_s_key, s.app_s_key]);
                }
                v
            })
            .collect()
    }

    fn reject(&mut self, reason: &'static str) -> Vec<JsOutput> {
        self.counters.rejected += 1;
        vec![JsOutput::Event(JsEvent::Rejected { reason })]
    }

    fn revoke(&mut self, gw: GatewayId, dev_addr: DevAddr) -> Option<JsOutput> {
        let (_, keys) = self.gateways.get(&gw)?;
        self.notice_seq += 1;
        self.counters.revocations += 1;
        Some(JsOutput::Notice { gw, bytes: EdgeNotice::revoke(gw, dev_addr, self.notice_seq, keys).encode() })
    }

    pub fn on_join_request(&mut self, request: &JoinRequest, receptions: &[GatewayRx]) -> Vec<JsOutput> {
        let Some(entry) = self.registry.get(&request.dev_eui) else {
            return self.reject("unknown dev_eui");
        };
        if entry.join_eui != request.join_eui || !request.verify(&entry.root_key) {
            return self.reject("join request MIC");
        }
        if entry.last_dev_nonce.is_some_and(|n| request.dev_nonce <= n) {
            return self.reject("replayed dev_nonce");
        }
        let Some(best) = strongest(receptions.iter().copied()) else {
            return self.reject("no receiving gateway");
        };
        let root_key = entry.root_key;
        let old = entry.session.as_ref().map(|s| s.dev_addr).zip(entry.assigned_gw);

        self.next_join_nonce = (self.next_join_nonce + 1) & 0xff_ffff;
        self.next_addr += 1;
        let join_nonce = self.next_join_nonce;
        let dev_addr = DevAddr(DEV_ADDR_BASE | self.next_addr);
        let (nwk_s_key, app_s_key) = derive_session_keys(&root_key, join_nonce, request.dev_nonce);

        let mut out = Vec::new();
        if let Some((old_addr, old_gw)) = old {
            out.extend(self.revoke(old_gw, old_addr));
        }
        let entry = self.registry.get_mut(&request.dev_eui).unwrap();
        entry.last_dev_nonce = Some(request.dev_nonce);
        entry.assigned_gw = None;
        entry.session = Some(JsSession { dev_addr, join_nonce, dev_nonce: request.dev_nonce, nwk_s_key, app_s_key });
        self.by_addr.insert(dev_addr, request.dev_eui);
        self.counters.joins += 1;

        let accept = JoinAccept { join_nonce, net_id: NET_ID, dev_addr, settings: [0; 2] };
        out.push(JsOutput::Session { dev_eui: request.dev_eui, dev_addr, nwk_s_key, app_s_key });
        out.push(JsOutput::Downlink { gw: best.gw_id, bytes: accept.encode(&root_key).to_vec() });
        out.push(JsOutput::Event(JsEvent::Joined { dev_eui: request.dev_eui, dev_addr }));
        out
    }

    /// FPort-8 uplink, already MIC-checked by the NS.
    pub fn on_edge_join(&mut self, frame: &DataFrame, receptions: &[GatewayRx]) -> Vec<JsOutput> {
        let Some(dev_eui) = self.by_addr.get(&frame.dev_addr).copied() else {
            return self.reject("edge join from unknown dev_addr");
        };
        let entry = &self.registry[&dev_eui];
        let Some(session) = entry.session.clone().filter(|s| s.dev_addr == frame.dev_addr) else {
            return self.reject("edge join from stale session");
        };
        let payload = match EdgeJoinPayload::decode(&frame.decrypt_payload(&session.app_s_key)) {
            Ok(p) if p.role == EdgeRole::Device => p,
            _ => return self.reject("malformed edge join"),
        };
        let candidates = receptions.iter().copied().filter(|r| {
            self.gateways.get(&r.gw_id).is_some_and(|(mode, _)| *mode == GatewayMode::E2gw)
        });
        let Some(best) = strongest(candidates) else {
            self.counters.edge_unassigned += 1;
            return vec![JsOutput::Event(JsEvent::NoEdgeGateway { dev_eui })];
        };
        let mut out = Vec::new();
        if let Some(old) = entry.assigned_gw.filter(|g| *g != best.gw_id) {
            out.extend(self.revoke(old, session.dev_addr));
        }
        self.notice_seq += 1;
        let (_, keys) = &self.gateways[&best.gw_id];
        let notice = EdgeNotice::assign(
            best.gw_id,
            session.dev_addr,
            self.notice_seq,
            session.join_nonce,
            payload.ephemeral_pub,
            &session.nwk_s_key,
            keys,
        );
        self.registry.get_mut(&dev_eui).unwrap().assigned_gw = Some(best.gw_id);
        self.counters.edge_assignments += 1;
        out.push(JsOutput::Notice { gw: best.gw_id, bytes: notice.encode() });
        out.push(JsOutput::Event(JsEvent::EdgeAssigned { dev_eui, dev_addr: session.dev_addr, gw: best.gw_id }));
        out
    }
}
