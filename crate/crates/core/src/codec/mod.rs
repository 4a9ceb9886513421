//! Over-the-air message formats: data frames, OTAA join messages, and the
//! edge-join payload carried on the reserved port.

mod crypto;
mod frame;
mod join;
mod types;

pub use crypto::{cmac, compute_mic, encrypt_payload, Direction, MAX_PAYLOAD_LEN};
pub(crate) use crypto::{ct_eq, xor_keystream};
pub use frame::{
    DataFrame, EdgeJoinPayload, EdgeRole, FPORT_EDGE_JOIN, FPORT_SENSOR, FRAME_OVERHEAD,
    MHDR_DATA_DOWN, MHDR_DATA_UP,
};
pub use join::{derive_session_keys, JoinAccept, JoinRequest, MHDR_JOIN_ACCEPT, MHDR_JOIN_REQUEST};
pub use types::{AesKey, DevAddr, Eui, GatewayId, HexParseError, Mic};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("payload of {0} bytes exceeds the 222-byte limit")]
    PayloadTooLong(usize),
    #[error("frame too short: expected at least {expected} bytes, got {actual}")]
    TooShort { expected: usize, actual: usize },
    #[error("wrong length: expected exactly {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("unexpected message header 0x{0:02x}")]
    UnexpectedMhdr(u8),
    #[error("integrity code mismatch")]
    MicMismatch,
    #[error("unknown edge role 0x{0:02x}")]
    InvalidRole(u8),
}

/// Message type of a raw radio frame, taken from its first byte.
pub fn message_type(bytes: &[u8]) -> Option<u8> {
    bytes.first().map(|b| b & 0xe0)
}
