use super::crypto::{aes_decrypt_block, aes_encrypt_block, cmac, ct_eq};
use super::types::{AesKey, DevAddr, Eui, Mic};
use super::CodecError;

pub const MHDR_JOIN_REQUEST: u8 = 0x00;
pub const MHDR_JOIN_ACCEPT: u8 = 0x20;

fn mic4(full: [u8; 16]) -> Mic {
    Mic(full[..4].try_into().unwrap())
}

/// OTAA join request, MIC'd under the device root key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinRequest {
    pub join_eui: Eui,
    pub dev_eui: Eui,
    pub dev_nonce: u16,
    pub mic: Mic,
}

impl JoinRequest {
    pub const LEN: usize = 23;

    pub fn new(join_eui: Eui, dev_eui: Eui, dev_nonce: u16, root_key: &AesKey) -> Self {
        let mut req = JoinRequest { join_eui, dev_eui, dev_nonce, mic: Mic::default() };
        req.mic = req.expected_mic(root_key);
        req
    }

    fn body(&self) -> [u8; 19] {
        let mut b = [0u8; 19];
        b[0] = MHDR_JOIN_REQUEST;
        b[1..9].copy_from_slice(&self.join_eui.0.to_le_bytes());
        b[9..17].copy_from_slice(&self.dev_eui.0.to_le_bytes());
        b[17..19].copy_from_slice(&self.dev_nonce.to_le_bytes());
        b
    }

    pub fn expected_mic(&self, root_key: &AesKey) -> Mic {
        mic4(cmac(root_key, &[&self.body()]))
    }

    pub fn verify(&self, root_key: &AesKey) -> bool {
        ct_eq(&self.expected_mic(root_key).0, &self.mic.0)
    }

    pub fn encode(&self) -> [u8; 23] {
        let mut out = [0u8; 23];
        out[..19].copy_from_slice(&self.body());
        out[19..].copy_from_slice(&self.mic.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != Self::LEN {
            return Err(CodecError::BadLength { expected: Self::LEN, actual: bytes.len() });
        }
        if bytes[0] != MHDR_JOIN_REQUEST {
            return Err(CodecError::UnexpectedMhdr(bytes[0]));
        }
        Ok(JoinRequest {
            join_eui: Eui(u64::from_le_bytes(bytes[1..9].try_into().unwrap())),
            dev_eui: Eui(u64::from_le_bytes(bytes[9..17].try_into().unwrap())),
            dev_nonce: u16::from_le_bytes([bytes[17], bytes[18]]),
            mic: Mic(bytes[19..23].try_into().unwrap()),
        })
    }
}

/// OTAA join accept. On the wire the 16 bytes after the MHDR
/// (`join_nonce | net_id | dev_addr | settings | mic`) are encrypted with
/// AES-decrypt under the root key, so the device only needs AES-encrypt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinAccept {
    /// 24-bit server nonce.
    pub join_nonce: u32,
    /// 24-bit network id, zero in this emulator.
    pub net_id: u32,
    pub dev_addr: DevAddr,
    pub settings: [u8; 2],
}

impl JoinAccept {
    pub const LEN: usize = 17;

    fn plain_body(&self) -> [u8; 12] {
        let mut b = [0u8; 12];
        b[0..3].copy_from_slice(&self.join_nonce.to_le_bytes()[..3]);
        b[3..6].copy_from_slice(&self.net_id.to_le_bytes()[..3]);
        b[6..10].copy_from_slice(&self.dev_addr.0.to_le_bytes());
        b[10..12].copy_from_slice(&self.settings);
        b
    }

    fn mic(&self, root_key: &AesKey) -> Mic {
        mic4(cmac(root_key, &[&[MHDR_JOIN_ACCEPT], &self.plain_body()]))
    }

    pub fn encode(&self, root_key: &AesKey) -> [u8; 17] {
        let mut block = [0u8; 16];
        block[..12].copy_from_slice(&self.plain_body());
        block[12..].copy_from_slice(&self.mic(root_key).0);
        aes_decrypt_block(root_key, &mut block);
        let mut out = [0u8; 17];
        out[0] = MHDR_JOIN_ACCEPT;
        out[1..].copy_from_slice(&block);
        out
    }

    /// Decrypt and verify; fails unless `root_key` is the issuing device's key.
    pub fn decode(bytes: &[u8], root_key: &AesKey) -> Result<Self, CodecError> {
        if bytes.len() != Self::LEN {
            return Err(CodecError::BadLength { expected: Self::LEN, actual: bytes.len() });
        }
        if bytes[0] != MHDR_JOIN_ACCEPT {
            return Err(CodecError::UnexpectedMhdr(bytes[0]));
        }
        let mut block: [u8; 16] = bytes[1..].try_into().unwrap();
        aes_encrypt_block(root_key, &mut block);
        let le3 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], 0]);
        let accept = JoinAccept {
            join_nonce: le3(&block[0..3]),
            net_id: le3(&block[3..6]),
            dev_addr: DevAddr(u32::from_le_bytes(block[6..10].try_into().unwrap())),
            settings: [block[10], block[11]],
        };
        if ct_eq(&accept.mic(root_key).0, &block[12..16]) {
            Ok(accept)
        } else {
            Err(CodecError::MicMismatch)
        }
    }
}

/// Network and application session keys:
/// `AES(root, 0x01|0x02 ‖ join_nonce ‖ dev_nonce ‖ pad)`.
pub fn derive_session_keys(root_key: &AesKey, join_nonce: u32, dev_nonce: u16) -> (AesKey, AesKey) {
    let derive = |label: u8| {
        let mut block = [0u8; 16];
        block[0] = label;
        block[1..4].copy_from_slice(&join_nonce.to_le_bytes()[..3]);
        block[4..6].copy_from_slice(&dev_nonce.to_le_bytes());
        aes_encrypt_block(root_key, &mut block);
        AesKey(block)
    };
    (derive(0x01), derive(0x02))
}
