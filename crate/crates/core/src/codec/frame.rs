use super::crypto::{compute_mic, ct_eq, encrypt_payload, Direction};
use super::types::{AesKey, DevAddr, Mic};
use super::CodecError;

pub const MHDR_DATA_UP: u8 = 0x40;
pub const MHDR_DATA_DOWN: u8 = 0x60;

/// Application sensor data.
pub const FPORT_SENSOR: u8 = 1;
/// Edge-join key exchange (EdgeJoin uplink and EdgeAccept downlink).
pub const FPORT_EDGE_JOIN: u8 = 8;

/// MHDR + DevAddr + FCtrl + FCnt + FPort + MIC.
pub const FRAME_OVERHEAD: usize = 13;

/// A data frame in the `MHDR | DevAddr | FCtrl | FCnt | FPort | FRMPayload | MIC`
/// layout. `frm_payload` holds the bytes exactly as transmitted (encrypted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrame {
    pub mhdr: u8,
    pub dev_addr: DevAddr,
    pub fctrl: u8,
    pub fcnt: u16,
    pub fport: u8,
    pub frm_payload: Vec<u8>,
    pub mic: Mic,
}

impl DataFrame {
    /// Encrypt `plaintext` under `enc_key` and seal the frame with a MIC
    /// under `mic_key`.
    pub fn seal(
        direction: Direction,
        dev_addr: DevAddr,
        fcnt: u16,
        fport: u8,
        plaintext: &[u8],
        enc_key: &AesKey,
        mic_key: &AesKey,
    ) -> Result<Self, CodecError> {
        let frm_payload = encrypt_payload(enc_key, dev_addr, fcnt as u32, direction, plaintext)?;
        Ok(Self::with_payload(direction, dev_addr, fcnt, fport, frm_payload, mic_key))
    }

    /// Seal a frame whose payload is carried as-is.
    pub fn with_payload(
        direction: Direction,
        dev_addr: DevAddr,
        fcnt: u16,
        fport: u8,
        frm_payload: Vec<u8>,
        mic_key: &AesKey,
    ) -> Self {
        let mhdr = match direction {
            Direction::Downlink => MHDR_DATA_DOWN,
            _ => MHDR_DATA_UP,
        };
        let mut frame = DataFrame {
            mhdr,
            dev_addr,
            fctrl: 0,
            fcnt,
            fport,
            frm_payload,
            mic: Mic::default(),
        };
        frame.mic = frame.expected_mic(mic_key);
        frame
    }

    pub fn direction(&self) -> Direction {
        if self.mhdr & 0xe0 == MHDR_DATA_DOWN {
            Direction::Downlink
        } else {
            Direction::Uplink
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.frm_payload.len()
    }

    fn header_and_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.mhdr);
        out.extend_from_slice(&self.dev_addr.0.to_le_bytes());
        out.push(self.fctrl);
        out.extend_from_slice(&self.fcnt.to_le_bytes());
        out.push(self.fport);
        out.extend_from_slice(&self.frm_payload);
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header_and_payload();
        out.extend_from_slice(&self.mic.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < FRAME_OVERHEAD {
            return Err(CodecError::TooShort { expected: FRAME_OVERHEAD, actual: bytes.len() });
        }
        let mhdr = bytes[0];
        if !matches!(mhdr & 0xe0, MHDR_DATA_UP | MHDR_DATA_DOWN) {
            return Err(CodecError::UnexpectedMhdr(mhdr));
        }
        let n = bytes.len();
        Ok(DataFrame {
            mhdr,
            dev_addr: DevAddr(u32::from_le_bytes(bytes[1..5].try_into().unwrap())),
            fctrl: bytes[5],
            fcnt: u16::from_le_bytes([bytes[6], bytes[7]]),
            fport: bytes[8],
            frm_payload: bytes[9..n - 4].to_vec(),
            mic: Mic(bytes[n - 4..].try_into().unwrap()),
        })
    }

    /// Decode and check the MIC under `mic_key`.
    pub fn decode_verified(bytes: &[u8], mic_key: &AesKey) -> Result<Self, CodecError> {
        let frame = Self::decode(bytes)?;
        if frame.verify_mic(mic_key) {
            Ok(frame)
        } else {
            Err(CodecError::MicMismatch)
        }
    }

    pub fn expected_mic(&self, key: &AesKey) -> Mic {
        compute_mic(key, self.dev_addr, self.fcnt as u32, self.direction(), &self.header_and_payload())
    }

    pub fn verify_mic(&self, key: &AesKey) -> bool {
        ct_eq(&self.expected_mic(key).0, &self.mic.0)
    }

    /// Decrypt the payload under `key` (the cipher is its own inverse).
    pub fn decrypt_payload(&self, key: &AesKey) -> Vec<u8> {
        // stored payloads are bounded by the length check in `seal`
        encrypt_payload(key, self.dev_addr, self.fcnt as u32, self.direction(), &self.frm_payload)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeRole {
    Device,
    Gateway,
}

/// Ephemeral public key published during edge activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeJoinPayload {
    pub ephemeral_pub: [u8; 32],
    pub role: EdgeRole,
}

impl EdgeJoinPayload {
    pub const LEN: usize = 33;

    pub fn encode(&self) -> [u8; 33] {
        let mut out = [0u8; 33];
        out[..32].copy_from_slice(&self.ephemeral_pub);
        out[32] = match self.role {
            EdgeRole::Device => 0x01,
            EdgeRole::Gateway => 0x02,
        };
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != Self::LEN {
            return Err(CodecError::BadLength { expected: Self::LEN, actual: bytes.len() });
        }
        let role = match bytes[32] {
            0x01 => EdgeRole::Device,
            0x02 => EdgeRole::Gateway,
            other => return Err(CodecError::InvalidRole(other)),
        };
        Ok(EdgeJoinPayload { ephemeral_pub: bytes[..32].try_into().unwrap(), role })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(payload: Vec<u8>) -> DataFrame {
        DataFrame::with_payload(Direction::Uplink, DevAddr(0x01020304), 7, 2, payload, &AesKey([9; 16]))
    }

    #[test]
    fn three_byte_payload_encodes_to_sixteen_bytes() {
        let f = sample(vec![1, 2, 3]);
        let bytes = f.encode();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..9], &[0x40, 0x04, 0x03, 0x02, 0x01, 0x00, 0x07, 0x00, 0x02]);
    }

    #[test]
    fn empty_payload_encodes_to_thirteen_bytes() {
        assert_eq!(sample(vec![]).encode().len(), 13);
    }

    #[test]
    fn decode_rejects_short_and_foreign_frames() {
        assert!(matches!(DataFrame::decode(&[0x40; 12]), Err(CodecError::TooShort { .. })));
        let mut bytes = sample(vec![1]).encode();
        bytes[0] = 0x00;
        assert_eq!(DataFrame::decode(&bytes), Err(CodecError::UnexpectedMhdr(0x00)));
    }

    #[test]
    fn verified_decode_fails_under_wrong_key() {
        let bytes = sample(vec![1, 2, 3]).encode();
        assert!(DataFrame::decode_verified(&bytes, &AesKey([9; 16])).is_ok());
        assert_eq!(DataFrame::decode_verified(&bytes, &AesKey([8; 16])), Err(CodecError::MicMismatch));
    }

    #[test]
    fn sealed_payload_decrypts() {
        let enc = AesKey([1; 16]);
        let f = DataFrame::seal(Direction::Uplink, DevAddr(5), 3, FPORT_SENSOR, b"abc", &enc, &AesKey([2; 16]))
            .unwrap();
        assert_ne!(f.frm_payload, b"abc");
        assert_eq!(f.decrypt_payload(&enc), b"abc");
    }

    #[test]
    fn edge_join_payload_is_33_bytes() {
        let p = EdgeJoinPayload { ephemeral_pub: [0xab; 32], role: EdgeRole::Gateway };
        let bytes = p.encode();
        assert_eq!(bytes.len(), 33);
        assert_eq!(EdgeJoinPayload::decode(&bytes).unwrap(), p);
        assert!(EdgeJoinPayload::decode(&bytes[..32]).is_err());
        let mut bad = bytes;
        bad[32] = 7;
        assert_eq!(EdgeJoinPayload::decode(&bad), Err(CodecError::InvalidRole(7)));
    }
}
