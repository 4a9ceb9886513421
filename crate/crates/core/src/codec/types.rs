use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

/// 32-bit device address. Displayed and serialized big-endian as 8 hex
/// digits; transmitted little-endian on the air.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct DevAddr(pub u32);

/// 64-bit extended unique identifier (DevEUI / JoinEUI).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Eui(pub u64);

/// Gateway identifier as configured in the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GatewayId(pub u16);

/// 128-bit AES key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AesKey(pub [u8; 16]);

/// 4-byte message integrity code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Mic(pub [u8; 4]);

impl AesKey {
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for AesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keys never show up in traces or logs
        f.write_str("AesKey(..)")
    }
}

impl fmt::Display for DevAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

impl fmt::Display for Eui {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl fmt::Display for GatewayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gw{}", self.0)
    }
}

impl fmt::Display for Mic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid hex value {value:?}: expected {expected} hex digits")]
pub struct HexParseError {
    pub value: String,
    pub expected: usize,
}

fn parse_fixed<const N: usize>(s: &str) -> Result<[u8; N], HexParseError> {
    let err = || HexParseError { value: s.to_string(), expected: N * 2 };
    let bytes = hex::decode(s).map_err(|_| err())?;
    bytes.try_into().map_err(|_| err())
}

impl FromStr for DevAddr {
    type Err = HexParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(DevAddr(u32::from_be_bytes(parse_fixed::<4>(s)?)))
    }
}

impl FromStr for Eui {
    type Err = HexParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Eui(u64::from_be_bytes(parse_fixed::<8>(s)?)))
    }
}

impl FromStr for AesKey {
    type Err = HexParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(AesKey(parse_fixed::<16>(s)?))
    }
}

impl FromStr for Mic {
    type Err = HexParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(Mic(parse_fixed::<4>(s)?))
    }
}

macro_rules! hex_serde {
    ($t:ty, $to:expr) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let f: fn(&$t) -> String = $to;
                s.serialize_str(&f(self))
            }
        }
        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(de::Error::custom)
            }
        }
    };
}

hex_serde!(DevAddr, |v| v.to_string());
hex_serde!(Eui, |v| v.to_string());
hex_serde!(Mic, |v| v.to_string());
hex_serde!(AesKey, |v| hex::encode(v.0));
