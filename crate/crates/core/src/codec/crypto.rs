//! AES-128 primitives shared by every frame type: the counter-mode payload
//! cipher keyed on A-blocks and the B0-prefixed CMAC integrity code.

use aes::cipher::{generic_array::GenericArray, BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use cmac::{Cmac, Mac};

use super::types::{AesKey, DevAddr, Mic};
use super::CodecError;

/// Largest FRMPayload accepted by the codec.
pub const MAX_PAYLOAD_LEN: usize = 222;

/// Direction byte placed in A-blocks and B0 blocks.
///
/// `Uplink` and `Downlink` are the radio directions. The remaining variants
/// separate the keystreams of edge-side messages that reuse the same
/// construction under edge or channel keys, so no two message classes can
/// ever share a (key, nonce) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Direction {
    Uplink = 0x00,
    Downlink = 0x01,
    EdgeAggregate = 0x02,
    KeyHandoff = 0x03,
    EdgeControl = 0x04,
}

fn cipher(key: &AesKey) -> Aes128 {
    Aes128::new(GenericArray::from_slice(key.as_bytes()))
}

pub(crate) fn aes_encrypt_block(key: &AesKey, block: &mut [u8; 16]) {
    let mut b = GenericArray::from(*block);
    cipher(key).encrypt_block(&mut b);
    block.copy_from_slice(&b);
}

pub(crate) fn aes_decrypt_block(key: &AesKey, block: &mut [u8; 16]) {
    let mut b = GenericArray::from(*block);
    cipher(key).decrypt_block(&mut b);
    block.copy_from_slice(&b);
}

fn helper_block(first: u8, direction: Direction, dev_addr: DevAddr, counter: u32) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[0] = first;
    b[5] = direction as u8;
    b[6..10].copy_from_slice(&dev_addr.0.to_le_bytes());
    b[10..14].copy_from_slice(&counter.to_le_bytes());
    b
}

/// XOR `data` with the AES-CTR keystream. Encrypting twice with identical
/// parameters returns the original bytes.
pub fn encrypt_payload(
    key: &AesKey,
    dev_addr: DevAddr,
    fcnt: u32,
    direction: Direction,
    data: &[u8],
) -> Result<Vec<u8>, CodecError> {
    if data.len() > MAX_PAYLOAD_LEN {
        return Err(CodecError::PayloadTooLong(data.len()));
    }
    let mut out = data.to_vec();
    xor_keystream(key, dev_addr, fcnt, direction, &mut out);
    Ok(out)
}

/// Unbounded in-place variant used by edge-side messages.
pub(crate) fn xor_keystream(
    key: &AesKey,
    dev_addr: DevAddr,
    counter: u32,
    direction: Direction,
    data: &mut [u8],
) {
    let aes = cipher(key);
    for (i, chunk) in data.chunks_mut(16).enumerate() {
        let mut a = helper_block(0x01, direction, dev_addr, counter);
        a[15] = (i + 1) as u8;
        let mut s = GenericArray::from(a);
        aes.encrypt_block(&mut s);
        for (byte, k) in chunk.iter_mut().zip(s.iter()) {
            *byte ^= k;
        }
    }
}

/// Full 16-byte AES-CMAC over the concatenation of `parts`.
pub fn cmac(key: &AesKey, parts: &[&[u8]]) -> [u8; 16] {
    let mut mac = <Cmac<Aes128> as Mac>::new(GenericArray::from_slice(key.as_bytes()));
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// First four bytes of CMAC(B0 ‖ msg).
pub fn compute_mic(
    key: &AesKey,
    dev_addr: DevAddr,
    fcnt: u32,
    direction: Direction,
    msg: &[u8],
) -> Mic {
    let mut b0 = helper_block(0x49, direction, dev_addr, fcnt);
    b0[15] = msg.len() as u8;
    let full = cmac(key, &[&b0, msg]);
    let mut m = [0u8; 4];
    m.copy_from_slice(&full[..4]);
    Mic(m)
}

pub(crate) fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_plaintext_is_empty_ciphertext() {
        let k = AesKey([7; 16]);
        assert!(encrypt_payload(&k, DevAddr(1), 1, Direction::Uplink, &[])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn rejects_oversized_payload() {
        let k = AesKey([7; 16]);
        let err = encrypt_payload(&k, DevAddr(1), 1, Direction::Uplink, &[0; 223]).unwrap_err();
        assert_eq!(err, CodecError::PayloadTooLong(223));
        assert!(encrypt_payload(&k, DevAddr(1), 1, Direction::Uplink, &[0; 222]).is_ok());
    }

    #[test]
    fn mic_is_deterministic_and_direction_bound() {
        let k = AesKey([3; 16]);
        let a = compute_mic(&k, DevAddr(9), 4, Direction::Uplink, b"hello");
        let b = compute_mic(&k, DevAddr(9), 4, Direction::Uplink, b"hello");
        let c = compute_mic(&k, DevAddr(9), 4, Direction::Downlink, b"hello");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn block_decrypt_inverts_encrypt() {
        let k = AesKey([0x5a; 16]);
        let mut b = *b"0123456789abcdef";
        aes_encrypt_block(&k, &mut b);
        assert_ne!(&b, b"0123456789abcdef");
        aes_decrypt_block(&k, &mut b);
        assert_eq!(&b, b"0123456789abcdef");
    }
}
