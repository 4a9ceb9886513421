//! Simulated end devices: sensor stream, OTAA plus edge activation, uplinks.

mod sensor;

pub use sensor::{
    check_values, parse_sensor_payload, FormatError, SensorModel, SensorReading, HUMIDITY_RANGE, PRESSURE_RANGE,
    SENSOR_PAYLOAD_MIN, TEMPERATURE_RANGE,
};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    derive_session_keys, AesKey, CodecError, DataFrame, DevAddr, Direction, EdgeJoinPayload, EdgeRole, Eui,
    GatewayId, JoinAccept, JoinRequest, FPORT_EDGE_JOIN, FPORT_SENSOR, MAX_PAYLOAD_LEN, MHDR_DATA_DOWN,
};
use crate::ddf::DdfKey;
use crate::edge_crypto::{derive_edge_keys, EcKeyPair, EdgeSessionKeys};
use crate::sim::{Micros, MS, SECOND};

pub const JOIN_TIMEOUT: Micros = 3 * SECOND;
pub const MAX_RETRIES: u32 = 5;
pub const MIN_PERIOD_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceMode {
    Legacy,
    E2ed,
}

impl fmt::Display for DeviceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviceMode::Legacy => "legacy",
            DeviceMode::E2ed => "e2ed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceProfile {
    pub dev_eui: Eui,
    pub join_eui: Eui,
    pub root_key: AesKey,
    pub mode: DeviceMode,
    pub period_ms: u64,
    pub payload_len: usize,
    /// Stop after this many data frames.
    pub max_frames: Option<u32>,
    /// Delay before the first join; drawn from the device RNG when absent.
    pub start_offset_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeviceError {
    #[error("payload_len {0} is below the 12-byte sensor payload")]
    PayloadTooShort(usize),
    #[error("payload_len {0} exceeds the 222-byte frame payload limit")]
    PayloadTooLong(usize),
    #[error("period_ms {0} is below the 100 ms minimum")]
    PeriodTooShort(u64),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub fn validate_payload_len(len: usize) -> Result<(), DeviceError> {
    if len < SENSOR_PAYLOAD_MIN {
        Err(DeviceError::PayloadTooShort(len))
    } else if len > MAX_PAYLOAD_LEN {
        Err(DeviceError::PayloadTooLong(len))
    } else {
        Ok(())
    }
}

pub fn validate_period(ms: u64) -> Result<(), DeviceError> {
    if ms < MIN_PERIOD_MS {
        Err(DeviceError::PeriodTooShort(ms))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSession {
    pub dev_addr: DevAddr,
    pub nwk_s_key: AesKey,
    pub app_s_key: AesKey,
    pub join_nonce: u32,
    pub fcnt_up: u16,
    pub edge: Option<EdgeSessionKeys>,
}

impl DeviceSession {
    pub fn new(dev_addr: DevAddr, nwk_s_key: AesKey, app_s_key: AesKey, join_nonce: u32) -> Self {
        DeviceSession { dev_addr, nwk_s_key, app_s_key, join_nonce, fcnt_up: 0, edge: None }
    }

    fn next_fcnt(&mut self) -> u16 {
        self.fcnt_up += 1;
        self.fcnt_up
    }
}

/// Sensor uplink on FPort 1. The payload is encrypted under the edge
/// encryption key when the session has edge keys, under the application
/// key otherwise; the MIC is always under the network key.
pub fn build_uplink(
    session: &mut DeviceSession,
    reading: &SensorReading,
    payload_len: usize,
) -> Result<DataFrame, DeviceError> {
    validate_payload_len(payload_len)?;
    let enc = session.edge.as_ref().map(|e| e.edge_s_enc_key).unwrap_or(session.app_s_key);
    let fcnt = session.next_fcnt();
    Ok(DataFrame::seal(
        Direction::Uplink,
        session.dev_addr,
        fcnt,
        FPORT_SENSOR,
        &reading.to_payload(payload_len),
        &enc,
        &session.nwk_s_key,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum ActivationState {
    Idle,
    JoinSent { attempt: u32 },
    ActiveLegacy,
    EdgeJoinSent { attempt: u32 },
    ActiveEdge,
    Failed,
}

impl ActivationState {
    pub fn is_active(&self) -> bool {
        matches!(self, ActivationState::ActiveLegacy | ActivationState::ActiveEdge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceTimer {
    Start,
    JoinTimeout,
    EdgeTimeout,
    SendData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxKind {
    JoinRequest,
    EdgeJoin,
    Data(DdfKey),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmission {
    pub bytes: Vec<u8>,
    pub channel: u8,
    pub kind: TxKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceEvent {
    Joined { dev_addr: DevAddr },
    EdgeActivated { gw: GatewayId },
    EdgeFallback,
    JoinFailed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceAction {
    Transmit(Transmission),
    Arm { at: Micros, timer: DeviceTimer, epoch: u64 },
    Event(DeviceEvent),
}

/// One simulated terminal. Driven only by timer and downlink callbacks.
pub struct Device {
    profile: DeviceProfile,
    state: ActivationState,
    session: Option<DeviceSession>,
    last_dev_nonce: u16,
    ephemeral: Option<EcKeyPair>,
    sensor: SensorModel,
    rng: ChaCha8Rng,
    channels: u8,
    epoch: u64,
    anchor: Micros,
    slot: u64,
    frames_sent: u32,
}

impl Device {
    pub fn new(profile: DeviceProfile, seed: u64, channels: u8) -> Self {
        Device {
            profile,
            state: ActivationState::Idle,
            session: None,
            last_dev_nonce: 0,
            ephemeral: None,
            sensor: SensorModel::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            channels: channels.max(1),
            epoch: 0,
            anchor: 0,
            slot: 0,
            frames_sent: 0,
        }
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn state(&self) -> ActivationState {
        self.state
    }

    pub fn session(&self) -> Option<&DeviceSession> {
        self.session.as_ref()
    }

    pub fn frames_sent(&self) -> u32 {
        self.frames_sent
    }

    pub fn dev_nonce(&self) -> u16 {
        self.last_dev_nonce
    }

    /// Offset of the first join attempt.
    pub fn boot(&mut self) -> DeviceAction {
        let offset = match self.profile.start_offset_ms {
            Some(ms) => ms * MS,
            None => self.rng.gen_range(0..self.profile.period_ms.max(1)) * MS,
        };
        DeviceAction::Arm { at: offset, timer: DeviceTimer::Start, epoch: self.epoch }
    }

    fn arm(&self, at: Micros, timer: DeviceTimer) -> DeviceAction {
        DeviceAction::Arm { at, timer, epoch: self.epoch }
    }

    fn channel(&mut self) -> u8 {
        self.rng.gen_range(0..self.channels)
    }

    fn send_join(&mut self, now: Micros, attempt: u32) -> Vec<DeviceAction> {
        self.last_dev_nonce = self.last_dev_nonce.wrapping_add(1);
        let req = JoinRequest::new(self.profile.join_eui, self.profile.dev_eui, self.last_dev_nonce, &self.profile.root_key);
        self.state = ActivationState::JoinSent { attempt };
        self.epoch += 1;
        let channel = self.channel();
        vec![
            DeviceAction::Transmit(Transmission { bytes: req.encode().to_vec(), channel, kind: TxKind::JoinRequest }),
            self.arm(now + JOIN_TIMEOUT, DeviceTimer::JoinTimeout),
        ]
    }

    fn send_edge_join(&mut self, now: Micros, attempt: u32) -> Vec<DeviceAction> {
        let eph = EcKeyPair::generate(&mut self.rng);
        let payload = EdgeJoinPayload { ephemeral_pub: eph.public_bytes(), role: EdgeRole::Device }.encode();
        self.ephemeral = Some(eph);
        let session = self.session.as_mut().expect("edge join requires a session");
        let fcnt = session.next_fcnt();
        let frame = DataFrame::seal(
            Direction::Uplink,
            session.dev_addr,
            fcnt,
            FPORT_EDGE_JOIN,
            &payload,
            &session.app_s_key,
            &session.nwk_s_key,
        )
        .expect("33-byte payload is within limits");
        self.state = ActivationState::EdgeJoinSent { attempt };
        self.epoch += 1;
        let channel = self.channel();
        vec![
            DeviceAction::Transmit(Transmission { bytes: frame.encode(), channel, kind: TxKind::EdgeJoin }),
            self.arm(now + JOIN_TIMEOUT, DeviceTimer::EdgeTimeout),
        ]
    }

    fn start_data(&mut self, now: Micros) -> DeviceAction {
        self.anchor = now;
        self.slot = 0;
        self.epoch += 1;
        self.next_data_timer()
    }

    fn next_data_timer(&mut self) -> DeviceAction {
        self.slot += 1;
        let period = self.profile.period_ms * MS;
        let max_jitter = (period / 100) as i64;
        let jitter = self.rng.gen_range(-max_jitter..=max_jitter);
        let at = (self.anchor + self.slot * period) as i64 + jitter;
        self.arm(at as Micros, DeviceTimer::SendData)
    }

    pub fn on_timer(&mut self, now: Micros, timer: DeviceTimer, epoch: u64) -> Vec<DeviceAction> {
        if epoch != self.epoch {
            return Vec::new();
        }
        match (timer, self.state) {
            (DeviceTimer::Start, ActivationState::Idle) => self.send_join(now, 0),
            (DeviceTimer::JoinTimeout, ActivationState::JoinSent { attempt }) => {
                if attempt < MAX_RETRIES {
                    self.send_join(now, attempt + 1)
                } else {
                    self.state = ActivationState::Failed;
                    self.epoch += 1;
                    vec![DeviceAction::Event(DeviceEvent::JoinFailed)]
                }
            }
            (DeviceTimer::EdgeTimeout, ActivationState::EdgeJoinSent { attempt }) => {
                if attempt < MAX_RETRIES {
                    self.send_edge_join(now, attempt + 1)
                } else {
                    self.ephemeral = None;
                    self.state = ActivationState::ActiveLegacy;
                    vec![DeviceAction::Event(DeviceEvent::EdgeFallback), self.start_data(now)]
                }
            }
            (DeviceTimer::SendData, s) if s.is_active() => self.send_data(now),
            _ => Vec::new(),
        }
    }

    fn send_data(&mut self, now: Micros) -> Vec<DeviceAction> {
        if self.profile.max_frames.is_some_and(|m| self.frames_sent >= m) {
            return Vec::new();
        }
        let reading = self.sensor.next_reading(&mut self.rng, now);
        let len = self.profile.payload_len;
        let session = self.session.as_mut().expect("active device has a session");
        let frame = match build_uplink(session, &reading, len) {
            Ok(f) => f,
            Err(_) => return Vec::new(),
        };
        self.frames_sent += 1;
        let key = DdfKey::new(frame.dev_addr, frame.fcnt, frame.mic);
        let channel = self.channel();
        let mut out = vec![DeviceAction::Transmit(Transmission { bytes: frame.encode(), channel, kind: TxKind::Data(key) })];
        if !self.profile.max_frames.is_some_and(|m| self.frames_sent >= m) {
            out.push(self.next_data_timer());
        }
        out
    }

    /// Any downlink the device's radio picks up; foreign frames are ignored.
    pub fn on_downlink(&mut self, now: Micros, bytes: &[u8]) -> Vec<DeviceAction> {
        match self.state {
            ActivationState::JoinSent { .. } => self.try_join_accept(now, bytes),
            ActivationState::EdgeJoinSent { .. } => self.try_edge_accept(now, bytes),
            _ => Vec::new(),
        }
    }

    fn try_join_accept(&mut self, now: Micros, bytes: &[u8]) -> Vec<DeviceAction> {
        let Ok(accept) = JoinAccept::decode(bytes, &self.profile.root_key) else {
            return Vec::new();
        };
        let (nwk, app) = derive_session_keys(&self.profile.root_key, accept.join_nonce, self.last_dev_nonce);
        self.session = Some(DeviceSession::new(accept.dev_addr, nwk, app, accept.join_nonce));
        let mut out = vec![DeviceAction::Event(DeviceEvent::Joined { dev_addr: accept.dev_addr })];
        match self.profile.mode {
            DeviceMode::Legacy => {
                self.state = ActivationState::ActiveLegacy;
                out.push(self.start_data(now));
            }
            DeviceMode::E2ed => out.extend(self.send_edge_join(now, 0)),
        }
        out
    }

    fn try_edge_accept(&mut self, now: Micros, bytes: &[u8]) -> Vec<DeviceAction> {
        let (Some(session), Some(eph)) = (self.session.as_ref(), self.ephemeral.as_ref()) else {
            return Vec::new();
        };
        let Some(keys) = open_edge_accept(bytes, session, eph) else {
            return Vec::new();
        };
        let gw = keys.assigned_gw;
        self.session.as_mut().unwrap().edge = Some(keys);
        self.ephemeral = None;
        self.state = ActivationState::ActiveEdge;
        vec![DeviceAction::Event(DeviceEvent::EdgeActivated { gw }), self.start_data(now)]
    }

    /// Re-activate from scratch under the new mode.
    pub fn set_mode(&mut self, now: Micros, mode: DeviceMode) -> Vec<DeviceAction> {
        self.profile.mode = mode;
        self.session = None;
        self.ephemeral = None;
        self.state = ActivationState::Idle;
        self.epoch += 1;
        vec![self.arm(now, DeviceTimer::Start)]
    }

    pub fn set_period(&mut self, now: Micros, period_ms: u64) -> Result<Vec<DeviceAction>, DeviceError> {
        validate_period(period_ms)?;
        self.profile.period_ms = period_ms;
        if self.state.is_active() {
            Ok(vec![self.start_data(now)])
        } else {
            Ok(Vec::new())
        }
    }

    pub fn set_payload_len(&mut self, len: usize) -> Result<(), DeviceError> {
        validate_payload_len(len)?;
        self.profile.payload_len = len;
        Ok(())
    }
}

/// EdgeAccept: FPort-8 downlink carrying the gateway's public key and id,
/// MIC'd under the edge integrity key the device is about to derive.
pub fn open_edge_accept(bytes: &[u8], session: &DeviceSession, eph: &EcKeyPair) -> Option<EdgeSessionKeys> {
    let frame = DataFrame::decode(bytes).ok()?;
    if frame.mhdr != MHDR_DATA_DOWN || frame.dev_addr != session.dev_addr || frame.fport != FPORT_EDGE_JOIN {
        return None;
    }
    if frame.frm_payload.len() != EdgeJoinPayload::LEN + 2 {
        return None;
    }
    let payload = EdgeJoinPayload::decode(&frame.frm_payload[..EdgeJoinPayload::LEN]).ok()?;
    if payload.role != EdgeRole::Gateway {
        return None;
    }
    let gw = GatewayId(u16::from_le_bytes([frame.frm_payload[33], frame.frm_payload[34]]));
    let shared = eph.dh(&payload.ephemeral_pub).ok()?;
    let keys = derive_edge_keys(&shared, session.dev_addr, session.join_nonce, gw);
    frame.verify_mic(&keys.edge_s_int_key).then_some(keys)
}

/// Counterpart of [`open_edge_accept`], built by the serving gateway.
pub fn seal_edge_accept(keys: &EdgeSessionKeys, gw_pub: [u8; 32], fcnt_down: u16) -> DataFrame {
    let mut payload = EdgeJoinPayload { ephemeral_pub: gw_pub, role: EdgeRole::Gateway }.encode().to_vec();
    payload.extend_from_slice(&keys.assigned_gw.0.to_le_bytes());
    DataFrame::with_payload(Direction::Downlink, keys.dev_addr, fcnt_down, FPORT_EDGE_JOIN, payload, &keys.edge_s_int_key)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session() -> DeviceSession {
        DeviceSession::new(DevAddr(0x2600_0001), AesKey([1; 16]), AesKey([2; 16]), 7)
    }

    fn profile(mode: DeviceMode) -> DeviceProfile {
        DeviceProfile {
            dev_eui: Eui(1),
            join_eui: Eui(2),
            root_key: AesKey([9; 16]),
            mode,
            period_ms: 1000,
            payload_len: 12,
            max_frames: None,
            start_offset_ms: Some(0),
        }
    }

    #[test]
    fn twelve_byte_payload_round_trips() {
        let mut s = session();
        let r = SensorReading::from_values([22.0, 45.0, 1013.0], 0);
        let f = build_uplink(&mut s, &r, 12).unwrap();
        assert_eq!(f.frm_payload.len(), 12);
        assert_eq!(f.fport, FPORT_SENSOR);
        assert!(f.verify_mic(&s.nwk_s_key));
        assert_eq!(parse_sensor_payload(&f.decrypt_payload(&s.app_s_key)).unwrap(), [22.0, 45.0, 1013.0]);
    }

    #[test]
    fn short_payload_len_is_rejected() {
        let mut s = session();
        let r = SensorReading::from_values([22.0, 45.0, 1013.0], 0);
        assert_eq!(build_uplink(&mut s, &r, 11), Err(DeviceError::PayloadTooShort(11)));
        assert_eq!(s.fcnt_up, 0);
    }

    #[test]
    fn legacy_frame_is_garbage_under_edge_key() {
        let mut s = session();
        let r = SensorReading::from_values([22.0, 45.0, 1013.0], 0);
        let f = build_uplink(&mut s, &r, 16).unwrap();
        assert!(parse_sensor_payload(&f.decrypt_payload(&AesKey([3; 16]))).is_err());
    }

    #[test]
    fn edge_session_encrypts_under_edge_key() {
        let mut s = session();
        let keys = derive_edge_keys(&[4; 32], s.dev_addr, 7, GatewayId(2));
        s.edge = Some(keys);
        let r = SensorReading::from_values([22.0, 45.0, 1013.0], 0);
        let f = build_uplink(&mut s, &r, 16).unwrap();
        assert!(parse_sensor_payload(&f.decrypt_payload(&keys.edge_s_enc_key)).is_ok());
        assert!(parse_sensor_payload(&f.decrypt_payload(&s.app_s_key)).is_err());
    }

    #[test]
    fn fcnt_counts_one_to_hundred() {
        let mut s = session();
        let r = SensorReading::from_values([22.0, 45.0, 1013.0], 0);
        let fcnts: Vec<u16> = (0..100).map(|_| build_uplink(&mut s, &r, 12).unwrap().fcnt).collect();
        assert_eq!(fcnts, (1..=100).collect::<Vec<_>>());
    }

    fn transmits(actions: &[DeviceAction]) -> Vec<TxKind> {
        actions
            .iter()
            .filter_map(|a| match a {
                DeviceAction::Transmit(t) => Some(t.kind),
                _ => None,
            })
            .collect()
    }

    fn timer(actions: &[DeviceAction]) -> Option<(Micros, DeviceTimer, u64)> {
        actions.iter().find_map(|a| match a {
            DeviceAction::Arm { at, timer, epoch } => Some((*at, *timer, *epoch)),
            _ => None,
        })
    }

    #[test]
    fn join_timeouts_retry_with_fresh_nonce_then_fail() {
        let mut d = Device::new(profile(DeviceMode::Legacy), 1, 8);
        let DeviceAction::Arm { at, timer: t, epoch } = d.boot() else { panic!() };
        let mut acts = d.on_timer(at, t, epoch);
        let mut nonces = vec![d.dev_nonce()];
        for _ in 0..MAX_RETRIES {
            let (at, t, e) = timer(&acts).unwrap();
            assert_eq!(t, DeviceTimer::JoinTimeout);
            acts = d.on_timer(at, t, e);
            assert_eq!(transmits(&acts), vec![TxKind::JoinRequest]);
            nonces.push(d.dev_nonce());
        }
        assert!(nonces.windows(2).all(|w| w[1] > w[0]));
        let (at, t, e) = timer(&acts).unwrap();
        let acts = d.on_timer(at, t, e);
        assert_eq!(acts, vec![DeviceAction::Event(DeviceEvent::JoinFailed)]);
        assert_eq!(d.state(), ActivationState::Failed);
    }

    #[test]
    fn stale_timers_are_ignored_and_no_data_before_active() {
        let mut d = Device::new(profile(DeviceMode::Legacy), 1, 8);
        assert!(d.on_timer(0, DeviceTimer::SendData, 0).is_empty());
        let acts = d.on_timer(0, DeviceTimer::Start, 0);
        assert_eq!(transmits(&acts), vec![TxKind::JoinRequest]);
        assert!(d.on_timer(10, DeviceTimer::Start, 0).is_empty());
    }

    #[test]
    fn legacy_device_joins_and_sends_data_only() {
        let mut d = Device::new(profile(DeviceMode::Legacy), 1, 8);
        d.on_timer(0, DeviceTimer::Start, 0);
        let accept = JoinAccept { join_nonce: 5, net_id: 0, dev_addr: DevAddr(0x10), settings: [0; 2] };
        assert!(d.on_downlink(10, &accept.encode(&AesKey([8; 16]))).is_empty(), "foreign key ignored");
        let acts = d.on_downlink(10, &accept.encode(&AesKey([9; 16])));
        assert_eq!(d.state(), ActivationState::ActiveLegacy);
        assert!(transmits(&acts).is_empty());
        let (at, t, e) = timer(&acts).unwrap();
        assert_eq!(t, DeviceTimer::SendData);
        assert!((at as i64 - (10 + 1_000_000) as i64).abs() <= 10_000);
        let acts = d.on_timer(at, t, e);
        assert!(matches!(transmits(&acts)[..], [TxKind::Data(k)] if k.fcnt == 1));
    }

    #[test]
    fn e2ed_happy_path_emits_join_edge_join_then_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = Device::new(profile(DeviceMode::E2ed), 1, 8);
        let mut kinds = transmits(&d.on_timer(0, DeviceTimer::Start, 0));
        let accept = JoinAccept { join_nonce: 5, net_id: 0, dev_addr: DevAddr(0x10), settings: [0; 2] };
        let acts = d.on_downlink(10, &accept.encode(&AesKey([9; 16])));
        kinds.extend(transmits(&acts));
        assert!(matches!(d.state(), ActivationState::EdgeJoinSent { attempt: 0 }));

        // play the gateway side with the published key
        let edge_join_bytes = acts
            .iter()
            .find_map(|a| match a {
                DeviceAction::Transmit(t) => Some(t.bytes.clone()),
                _ => None,
            })
            .unwrap();
        let session = d.session().unwrap().clone();
        let f = DataFrame::decode_verified(&edge_join_bytes, &session.nwk_s_key).unwrap();
        assert_eq!(f.fport, FPORT_EDGE_JOIN);
        let dev_pub = EdgeJoinPayload::decode(&f.decrypt_payload(&session.app_s_key)).unwrap().ephemeral_pub;
        let gw_eph = EcKeyPair::generate(&mut rng);
        let keys = derive_edge_keys(&gw_eph.dh(&dev_pub).unwrap(), session.dev_addr, 5, GatewayId(2));
        let mut wrong = keys;
        wrong.edge_s_int_key = AesKey([0; 16]);
        assert!(d.on_downlink(20, &seal_edge_accept(&wrong, gw_eph.public_bytes(), 1).encode()).is_empty());
        let acts = d.on_downlink(20, &seal_edge_accept(&keys, gw_eph.public_bytes(), 1).encode());
        assert_eq!(d.state(), ActivationState::ActiveEdge);
        assert_eq!(d.session().unwrap().edge.unwrap().to_bytes(), keys.to_bytes());
        let (at, t, e) = timer(&acts).unwrap();
        kinds.extend(transmits(&d.on_timer(at, t, e)));
        assert!(matches!(kinds[..], [TxKind::JoinRequest, TxKind::EdgeJoin, TxKind::Data(_)]));
    }

    #[test]
    fn edge_timeouts_fall_back_to_legacy() {
        let mut d = Device::new(profile(DeviceMode::E2ed), 1, 8);
        d.on_timer(0, DeviceTimer::Start, 0);
        let accept = JoinAccept { join_nonce: 5, net_id: 0, dev_addr: DevAddr(0x10), settings: [0; 2] };
        let mut acts = d.on_downlink(10, &accept.encode(&AesKey([9; 16])));
        for _ in 0..MAX_RETRIES {
            let (at, t, e) = timer(&acts).unwrap();
            acts = d.on_timer(at, t, e);
            assert_eq!(transmits(&acts), vec![TxKind::EdgeJoin]);
        }
        let (at, t, e) = timer(&acts).unwrap();
        let acts = d.on_timer(at, t, e);
        assert!(acts.contains(&DeviceAction::Event(DeviceEvent::EdgeFallback)));
        assert_eq!(d.state(), ActivationState::ActiveLegacy);
    }

    #[test]
    fn mode_switch_resets_to_idle() {
        let mut d = Device::new(profile(DeviceMode::Legacy), 1, 8);
        d.on_timer(0, DeviceTimer::Start, 0);
        let accept = JoinAccept { join_nonce: 5, net_id: 0, dev_addr: DevAddr(0x10), settings: [0; 2] };
        d.on_downlink(10, &accept.encode(&AesKey([9; 16])));
        let acts = d.set_mode(50, DeviceMode::E2ed);
        assert_eq!(d.state(), ActivationState::Idle);
        assert!(d.session().is_none());
        let (at, t, e) = timer(&acts).unwrap();
        assert_eq!((at, t), (50, DeviceTimer::Start));
        assert_eq!(transmits(&d.on_timer(at, t, e)), vec![TxKind::JoinRequest]);
    }

    #[test]
    fn data_timestamps_follow_period_with_bounded_jitter() {
        let mut p = profile(DeviceMode::Legacy);
        p.max_frames = Some(50);
        let mut d = Device::new(p, 3, 8);
        d.on_timer(0, DeviceTimer::Start, 0);
        let accept = JoinAccept { join_nonce: 5, net_id: 0, dev_addr: DevAddr(0x10), settings: [0; 2] };
        let mut acts = d.on_downlink(0, &accept.encode(&AesKey([9; 16])));
        let mut k = 0i64;
        while let Some((at, t, e)) = timer(&acts) {
            k += 1;
            let ideal = k * 1_000_000;
            assert!((at as i64 - ideal).abs() <= 10_000, "slot {k} at {at}");
            acts = d.on_timer(at, t, e);
        }
        assert_eq!(d.frames_sent(), 50);
    }

    #[test]
    fn runtime_knob_validation() {
        let mut d = Device::new(profile(DeviceMode::Legacy), 1, 8);
        assert_eq!(d.set_payload_len(5), Err(DeviceError::PayloadTooShort(5)));
        assert_eq!(d.set_payload_len(300), Err(DeviceError::PayloadTooLong(300)));
        assert_eq!(d.set_period(0, 50).unwrap_err(), DeviceError::PeriodTooShort(50));
        assert!(d.set_payload_len(40).is_ok());
    }
}
