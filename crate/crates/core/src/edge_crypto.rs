//! Edge session key agreement.
//!
//! The device and its serving gateway run an ephemeral X25519 exchange and
//! derive the two edge session keys with HKDF-SHA-256. The gateway hands a
//! copy to the application server over a channel keyed by a static-static
//! exchange between the two, so the network and join servers never see the
//! keys. Control messages from the join server to a gateway use the same
//! channel construction with a join-server static key.

use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::codec::{cmac, ct_eq, xor_keystream, AesKey, DevAddr, Direction, GatewayId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EdgeCryptoError {
    #[error("peer public key is a low-order point")]
    LowOrderPoint,
    #[error("authentication tag mismatch")]
    TagMismatch,
    #[error("malformed {what}: expected {expected} bytes, got {actual}")]
    BadLength { what: &'static str, expected: usize, actual: usize },
    #[error("no serving gateway assigned")]
    MissingGateway,
}

/// X25519 key pair.
#[derive(Clone)]
pub struct EcKeyPair {
    private: StaticSecret,
    public: PublicKey,
}

impl EcKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self::from_private_bytes(bytes)
    }

    pub fn from_private_bytes(bytes: [u8; 32]) -> Self {
        let private = StaticSecret::from(bytes);
        let public = PublicKey::from(&private);
        EcKeyPair { private, public }
    }

    pub fn public_bytes(&self) -> [u8; 32] {
        self.public.to_bytes()
    }

    pub fn private_bytes(&self) -> [u8; 32] {
        self.private.to_bytes()
    }

    pub fn dh(&self, peer_public: &[u8; 32]) -> Result<[u8; 32], EdgeCryptoError> {
        dh_shared(&self.private_bytes(), peer_public)
    }
}

impl std::fmt::Debug for EcKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EcKeyPair(pub={})", hex::encode(self.public_bytes()))
    }
}

/// Raw X25519. Rejects peers whose point yields the all-zero secret.
pub fn dh_shared(private: &[u8; 32], peer_public: &[u8; 32]) -> Result<[u8; 32], EdgeCryptoError> {
    let secret = StaticSecret::from(*private);
    let shared = secret.diffie_hellman(&PublicKey::from(*peer_public));
    if !shared.was_contributory() {
        return Err(EdgeCryptoError::LowOrderPoint);
    }
    Ok(shared.to_bytes())
}

fn hkdf16(shared: &[u8; 32], info: &[&[u8]]) -> AesKey {
    let hk = Hkdf::<Sha256>::new(None, shared);
    let info: Vec<u8> = info.concat();
    let mut okm = [0u8; 16];
    hk.expand(&info, &mut okm).expect("16 bytes is a valid HKDF length");
    AesKey(okm)
}

/// The two group keys held by device, serving gateway, and application server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeSessionKeys {
    pub edge_s_enc_key: AesKey,
    pub edge_s_int_key: AesKey,
    pub dev_addr: DevAddr,
    pub assigned_gw: GatewayId,
}

impl EdgeSessionKeys {
    /// Canonical byte form, used for three-way comparisons.
    pub fn to_bytes(&self) -> [u8; 38] {
        let mut out = [0u8; 38];
        out[..16].copy_from_slice(&self.edge_s_enc_key.0);
        out[16..32].copy_from_slice(&self.edge_s_int_key.0);
        out[32..36].copy_from_slice(&self.dev_addr.0.to_le_bytes());
        out[36..38].copy_from_slice(&self.assigned_gw.0.to_le_bytes());
        out
    }
}

/// HKDF-SHA-256 over the device/gateway shared secret, bound to
/// `dev_addr ‖ join_nonce` and separated by label.
pub fn derive_edge_keys(
    shared: &[u8; 32],
    dev_addr: DevAddr,
    join_nonce: u32,
    assigned_gw: GatewayId,
) -> EdgeSessionKeys {
    let addr = dev_addr.0.to_le_bytes();
    let nonce = &join_nonce.to_le_bytes()[..3];
    EdgeSessionKeys {
        edge_s_enc_key: hkdf16(shared, &[&addr, nonce, b"e2l-enc"]),
        edge_s_int_key: hkdf16(shared, &[&addr, nonce, b"e2l-int"]),
        dev_addr,
        assigned_gw,
    }
}

/// Symmetric keys for an authenticated channel between one gateway and a
/// server, derived from a static-static exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelKeys {
    pub chan_enc: AesKey,
    pub chan_int: AesKey,
}

/// Channel between a gateway and the application server.
pub type GwAsChannelKeys = ChannelKeys;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPurpose {
    /// Gateway ↔ application server (key hand-off).
    KeyHandoff,
    /// Join server → gateway (edge assignment notices).
    Control,
}

impl ChannelKeys {
    pub fn derive(shared: &[u8; 32], gw_id: GatewayId, purpose: ChannelPurpose) -> Self {
        let gw = gw_id.0.to_le_bytes();
        let (enc, int): (&[u8], &[u8]) = match purpose {
            ChannelPurpose::KeyHandoff => (b"e2l-chan-enc", b"e2l-chan-int"),
            ChannelPurpose::Control => (b"e2l-ctl-enc", b"e2l-ctl-int"),
        };
        ChannelKeys { chan_enc: hkdf16(shared, &[&gw, enc]), chan_int: hkdf16(shared, &[&gw, int]) }
    }

    pub fn between(
        own: &EcKeyPair,
        peer_public: &[u8; 32],
        gw_id: GatewayId,
        purpose: ChannelPurpose,
    ) -> Result<Self, EdgeCryptoError> {
        Ok(Self::derive(&own.dh(peer_public)?, gw_id, purpose))
    }
}

pub(crate) fn tag8(key: &AesKey, parts: &[&[u8]]) -> [u8; 8] {
    cmac(key, parts)[..8].try_into().unwrap()
}

fn check_len(what: &'static str, bytes: &[u8], expected: usize) -> Result<(), EdgeCryptoError> {
    if bytes.len() == expected {
        Ok(())
    } else {
        Err(EdgeCryptoError::BadLength { what, expected, actual: bytes.len() })
    }
}

/// Edge keys in transit from the serving gateway to the application server.
///
/// Wire form: `gw_id(2) | dev_addr(4) | seq(4) | ciphertext(32) | tag(8)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyHandoff {
    pub gw_id: GatewayId,
    pub dev_addr: DevAddr,
    pub seq: u32,
    pub ciphertext: [u8; 32],
    pub tag: [u8; 8],
}

impl KeyHandoff {
    pub const LEN: usize = 50;

    pub fn seal(keys: &EdgeSessionKeys, channel: &GwAsChannelKeys, seq: u32) -> Self {
        let mut ciphertext = [0u8; 32];
        ciphertext[..16].copy_from_slice(&keys.edge_s_enc_key.0);
        ciphertext[16..].copy_from_slice(&keys.edge_s_int_key.0);
        xor_keystream(&channel.chan_enc, keys.dev_addr, seq, Direction::KeyHandoff, &mut ciphertext);
        let mut msg = KeyHandoff { gw_id: keys.assigned_gw, dev_addr: keys.dev_addr, seq, ciphertext, tag: [0; 8] };
        msg.tag = tag8(&channel.chan_int, &[&msg.header(), &msg.ciphertext]);
        msg
    }

    fn header(&self) -> [u8; 10] {
        let mut h = [0u8; 10];
        h[..2].copy_from_slice(&self.gw_id.0.to_le_bytes());
        h[2..6].copy_from_slice(&self.dev_addr.0.to_le_bytes());
        h[6..10].copy_from_slice(&self.seq.to_le_bytes());
        h
    }

    /// Verify the tag, then decrypt.
    pub fn open(&self, channel: &GwAsChannelKeys) -> Result<EdgeSessionKeys, EdgeCryptoError> {
        let expected = tag8(&channel.chan_int, &[&self.header(), &self.ciphertext]);
        if !ct_eq(&expected, &self.tag) {
            return Err(EdgeCryptoError::TagMismatch);
        }
        let mut plain = self.ciphertext;
        xor_keystream(&channel.chan_enc, self.dev_addr, self.seq, Direction::KeyHandoff, &mut plain);
        Ok(EdgeSessionKeys {
            edge_s_enc_key: AesKey(plain[..16].try_into().unwrap()),
            edge_s_int_key: AesKey(plain[16..].try_into().unwrap()),
            dev_addr: self.dev_addr,
            assigned_gw: self.gw_id,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        [&self.header()[..], &self.ciphertext, &self.tag].concat()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EdgeCryptoError> {
        check_len("key hand-off", bytes, Self::LEN)?;
        Ok(KeyHandoff {
            gw_id: GatewayId(u16::from_le_bytes([bytes[0], bytes[1]])),
            dev_addr: DevAddr(u32::from_le_bytes(bytes[2..6].try_into().unwrap())),
            seq: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
            ciphertext: bytes[10..42].try_into().unwrap(),
            tag: bytes[42..50].try_into().unwrap(),
        })
    }
}

/// Application server verdict on a hand-off: `gw_id | dev_addr | seq | ok | tag`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandoffAck {
    pub gw_id: GatewayId,
    pub dev_addr: DevAddr,
    pub seq: u32,
    pub accepted: bool,
    pub tag: [u8; 8],
}

impl HandoffAck {
    pub const LEN: usize = 19;

    pub fn seal(gw_id: GatewayId, dev_addr: DevAddr, seq: u32, accepted: bool, channel: &GwAsChannelKeys) -> Self {
        let mut ack = HandoffAck { gw_id, dev_addr, seq, accepted, tag: [0; 8] };
        ack.tag = tag8(&channel.chan_int, &[b"ack", &ack.body()]);
        ack
    }

    fn body(&self) -> [u8; 11] {
        let mut b = [0u8; 11];
        b[..2].copy_from_slice(&self.gw_id.0.to_le_bytes());
        b[2..6].copy_from_slice(&self.dev_addr.0.to_le_bytes());
        b[6..10].copy_from_slice(&self.seq.to_le_bytes());
        b[10] = self.accepted as u8;
        b
    }

    pub fn verify(&self, channel: &GwAsChannelKeys) -> bool {
        ct_eq(&tag8(&channel.chan_int, &[b"ack", &self.body()]), &self.tag)
    }

    pub fn encode(&self) -> Vec<u8> {
        [&self.body()[..], &self.tag].concat()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EdgeCryptoError> {
        check_len("hand-off ack", bytes, Self::LEN)?;
        Ok(HandoffAck {
            gw_id: GatewayId(u16::from_le_bytes([bytes[0], bytes[1]])),
            dev_addr: DevAddr(u32::from_le_bytes(bytes[2..6].try_into().unwrap())),
            seq: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
            accepted: bytes[10] != 0,
            tag: bytes[11..19].try_into().unwrap(),
        })
    }
}

/// Join-server notice telling a gateway to start or stop serving a device.
///
/// An assignment carries the device's ephemeral public key (public) and its
/// network session key (encrypted) so the gateway can check frame MICs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeNotice {
    Assign {
        gw_id: GatewayId,
        dev_addr: DevAddr,
        seq: u32,
        join_nonce: u32,
        device_pub: [u8; 32],
        wrapped_nwk_key: [u8; 16],
        tag: [u8; 8],
    },
    Revoke {
        gw_id: GatewayId,
        dev_addr: DevAddr,
        seq: u32,
        tag: [u8; 8],
    },
}

impl EdgeNotice {
    pub fn assign(
        gw_id: GatewayId,
        dev_addr: DevAddr,
        seq: u32,
        join_nonce: u32,
        device_pub: [u8; 32],
        nwk_s_key: &AesKey,
        channel: &ChannelKeys,
    ) -> Self {
        let mut wrapped = nwk_s_key.0;
        xor_keystream(&channel.chan_enc, dev_addr, seq, Direction::EdgeControl, &mut wrapped);
        let mut n = EdgeNotice::Assign { gw_id, dev_addr, seq, join_nonce, device_pub, wrapped_nwk_key: wrapped, tag: [0; 8] };
        let t = tag8(&channel.chan_int, &[&n.body()]);
        n.set_tag(t);
        n
    }

    pub fn revoke(gw_id: GatewayId, dev_addr: DevAddr, seq: u32, channel: &ChannelKeys) -> Self {
        let mut n = EdgeNotice::Revoke { gw_id, dev_addr, seq, tag: [0; 8] };
        let t = tag8(&channel.chan_int, &[&n.body()]);
        n.set_tag(t);
        n
    }

    fn set_tag(&mut self, t: [u8; 8]) {
        match self {
            EdgeNotice::Assign { tag, .. } | EdgeNotice::Revoke { tag, .. } => *tag = t,
        }
    }

    fn tag(&self) -> &[u8; 8] {
        match self {
            EdgeNotice::Assign { tag, .. } | EdgeNotice::Revoke { tag, .. } => tag,
        }
    }

    pub fn gw_id(&self) -> GatewayId {
        match self {
            EdgeNotice::Assign { gw_id, .. } | EdgeNotice::Revoke { gw_id, .. } => *gw_id,
        }
    }

    pub fn dev_addr(&self) -> DevAddr {
        match self {
            EdgeNotice::Assign { dev_addr, .. } | EdgeNotice::Revoke { dev_addr, .. } => *dev_addr,
        }
    }

    fn body(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        match self {
            EdgeNotice::Assign { gw_id, dev_addr, seq, join_nonce, device_pub, wrapped_nwk_key, .. } => {
                out.push(0x01);
                out.extend_from_slice(&gw_id.0.to_le_bytes());
                out.extend_from_slice(&dev_addr.0.to_le_bytes());
                out.extend_from_slice(&seq.to_le_bytes());
                out.extend_from_slice(&join_nonce.to_le_bytes());
                out.extend_from_slice(device_pub);
                out.extend_from_slice(wrapped_nwk_key);
            }
            EdgeNotice::Revoke { gw_id, dev_addr, seq, .. } => {
                out.push(0x02);
                out.extend_from_slice(&gw_id.0.to_le_bytes());
                out.extend_from_slice(&dev_addr.0.to_le_bytes());
                out.extend_from_slice(&seq.to_le_bytes());
            }
        }
        out
    }

    /// Verify the tag; for assignments also unwrap the network session key.
    pub fn open(&self, channel: &ChannelKeys) -> Result<Option<AesKey>, EdgeCryptoError> {
        if !ct_eq(&tag8(&channel.chan_int, &[&self.body()]), self.tag()) {
            return Err(EdgeCryptoError::TagMismatch);
        }
        Ok(match self {
            EdgeNotice::Assign { dev_addr, seq, wrapped_nwk_key, .. } => {
                let mut k = *wrapped_nwk_key;
                xor_keystream(&channel.chan_enc, *dev_addr, *seq, Direction::EdgeControl, &mut k);
                Some(AesKey(k))
            }
            EdgeNotice::Revoke { .. } => None,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        [self.body(), self.tag().to_vec()].concat()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EdgeCryptoError> {
        let u16le = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]);
        let u32le = |b: &[u8]| u32::from_le_bytes(b[..4].try_into().unwrap());
        match bytes.first() {
            Some(0x01) => {
                check_len("edge assignment", bytes, 71)?;
                Ok(EdgeNotice::Assign {
                    gw_id: GatewayId(u16le(&bytes[1..3])),
                    dev_addr: DevAddr(u32le(&bytes[3..7])),
                    seq: u32le(&bytes[7..11]),
                    join_nonce: u32le(&bytes[11..15]),
                    device_pub: bytes[15..47].try_into().unwrap(),
                    wrapped_nwk_key: bytes[47..63].try_into().unwrap(),
                    tag: bytes[63..71].try_into().unwrap(),
                })
            }
            Some(0x02) => {
                check_len("edge revocation", bytes, 19)?;
                Ok(EdgeNotice::Revoke {
                    gw_id: GatewayId(u16le(&bytes[1..3])),
                    dev_addr: DevAddr(u32le(&bytes[3..7])),
                    seq: u32le(&bytes[7..11]),
                    tag: bytes[11..19].try_into().unwrap(),
                })
            }
            _ => Err(EdgeCryptoError::BadLength { what: "edge notice", expected: 19, actual: bytes.len() }),
        }
    }
}

/// All three copies of the group keys produced by one activation, plus the
/// public messages that crossed the network.
#[derive(Debug, Clone)]
pub struct GroupKeyOutcome {
    pub device: EdgeSessionKeys,
    pub gateway: EdgeSessionKeys,
    pub server: EdgeSessionKeys,
    pub handoff: KeyHandoff,
    pub gateway_pub: [u8; 32],
}

/// Run the three-party establishment end to end:
/// the gateway derives from its ephemeral key and the device's public key,
/// ships the keys to the server over `channel`, and returns its public key to
/// the device, which derives the same pair. `transit` models the network
/// between gateway and server.
pub fn establish_group_key(
    device_eph: &EcKeyPair,
    gw_eph: &EcKeyPair,
    channel: &GwAsChannelKeys,
    dev_addr: DevAddr,
    join_nonce: u32,
    serving_gw: Option<GatewayId>,
    transit: impl FnOnce(KeyHandoff) -> KeyHandoff,
) -> Result<GroupKeyOutcome, EdgeCryptoError> {
    let gw_id = serving_gw.ok_or(EdgeCryptoError::MissingGateway)?;
    let gateway = derive_edge_keys(&gw_eph.dh(&device_eph.public_bytes())?, dev_addr, join_nonce, gw_id);
    let handoff = KeyHandoff::seal(&gateway, channel, 0);
    let server = transit(handoff.clone()).open(channel)?;
    let gateway_pub = gw_eph.public_bytes();
    let device = derive_edge_keys(&device_eph.dh(&gateway_pub)?, dev_addr, join_nonce, gw_id);
    Ok(GroupKeyOutcome { device, gateway, server, handoff, gateway_pub })
}
