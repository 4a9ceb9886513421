use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{ct_eq, xor_keystream, DevAddr, Direction, GatewayId, Mic};
use crate::edge_crypto::{tag8, EdgeCryptoError, EdgeSessionKeys};
use crate::sim::{AggregateFields, Envelope, EnvelopeKind, Micros};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateFunction {
    Mean,
    Sum,
    Max,
    Min,
}

impl AggregateFunction {
    pub const ALL: [AggregateFunction; 4] =
        [AggregateFunction::Mean, AggregateFunction::Sum, AggregateFunction::Max, AggregateFunction::Min];

    pub fn code(self) -> u8 {
        match self {
            AggregateFunction::Mean => 0,
            AggregateFunction::Sum => 1,
            AggregateFunction::Max => 2,
            AggregateFunction::Min => 3,
        }
    }

    /// Per-field aggregate. Mean and sum accumulate in f64; min and max are exact.
    pub fn apply(self, values: &[[f32; 3]]) -> Option<[f32; 3]> {
        if values.is_empty() {
            return None;
        }
        let mut out = [0f32; 3];
        for (field, slot) in out.iter_mut().enumerate() {
            let column = values.iter().map(|v| v[field]);
            *slot = match self {
                AggregateFunction::Sum => column.map(f64::from).sum::<f64>() as f32,
                AggregateFunction::Mean => (column.map(f64::from).sum::<f64>() / values.len() as f64) as f32,
                AggregateFunction::Max => column.fold(f32::NEG_INFINITY, f32::max),
                AggregateFunction::Min => column.fold(f32::INFINITY, f32::min),
            };
        }
        Some(out)
    }
}

impl fmt::Display for AggregateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregateFunction::Mean => "mean",
            AggregateFunction::Sum => "sum",
            AggregateFunction::Max => "max",
            AggregateFunction::Min => "min",
        })
    }
}

impl FromStr for AggregateFunction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(AggregateFunction::Mean),
            "sum" => Ok(AggregateFunction::Sum),
            "max" => Ok(AggregateFunction::Max),
            "min" => Ok(AggregateFunction::Min),
            other => Err(format!("unknown aggregation function `{other}`")),
        }
    }
}

/// Operator and tumbling-window length applied by every edge gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub function: AggregateFunction,
    pub window_len: u8,
    /// A partial window is flushed once no frame has arrived for this many device periods.
    pub timeout_periods: u32,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        AggregationSpec { function: AggregateFunction::Mean, window_len: 5, timeout_periods: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    /// Counter not above the last accepted one.
    Stale,
}

/// Buffered readings of one served device.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    pub dev_addr: DevAddr,
    pub buffer: Vec<(u16, Mic, [f32; 3])>,
    pub opened_at: Option<Micros>,
    last_fcnt: Option<u16>,
}

impl WindowState {
    pub fn new(dev_addr: DevAddr) -> Self {
        WindowState { dev_addr, buffer: Vec::new(), opened_at: None, last_fcnt: None }
    }

    pub fn push(&mut self, now: Micros, fcnt: u16, mic: Mic, values: [f32; 3]) -> PushOutcome {
        if self.last_fcnt.is_some_and(|last| fcnt <= last) {
            return PushOutcome::Stale;
        }
        self.last_fcnt = Some(fcnt);
        if self.buffer.is_empty() {
            self.opened_at = Some(now);
        }
        self.buffer.push((fcnt, mic, values));
        PushOutcome::Accepted
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn take(&mut self) -> Vec<(u16, Mic, [f32; 3])> {
        self.opened_at = None;
        std::mem::take(&mut self.buffer)
    }
}

/// Aggregate sent from an edge gateway straight to the application server.
///
/// The values are encrypted under the edge encryption key; the tag is a
/// truncated CMAC under the edge integrity key over every other field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeAggregate {
    pub gw_id: GatewayId,
    pub dev_addr: DevAddr,
    pub function: AggregateFunction,
    pub fcnt_list: Vec<u16>,
    pub mic_list: Vec<Mic>,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 8],
}

#[derive(Debug, thiserror::Error)]
pub enum AggregateError {
    #[error("envelope carries no aggregate fields")]
    MissingFields,
    #[error("aggregate is malformed: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Envelope(#[from] crate::sim::EnvelopeError),
    #[error(transparent)]
    Crypto(#[from] EdgeCryptoError),
}

impl EdgeAggregate {
    fn counter(fcnt_list: &[u16]) -> u32 {
        let first = *fcnt_list.first().unwrap_or(&0) as u32;
        let last = *fcnt_list.last().unwrap_or(&0) as u32;
        (first << 16) | last
    }

    fn tag_input(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 6 * self.fcnt_list.len() + self.ciphertext.len());
        out.extend_from_slice(&self.gw_id.0.to_le_bytes());
        out.extend_from_slice(&self.dev_addr.0.to_le_bytes());
        out.push(self.function.code());
        out.push(self.fcnt_list.len() as u8);
        for (f, m) in self.fcnt_list.iter().zip(&self.mic_list) {
            out.extend_from_slice(&f.to_le_bytes());
            out.extend_from_slice(&m.0);
        }
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn seal(
        keys: &EdgeSessionKeys,
        gw_id: GatewayId,
        function: AggregateFunction,
        frames: &[(u16, Mic)],
        values: [f32; 3],
    ) -> Self {
        let fcnt_list: Vec<u16> = frames.iter().map(|f| f.0).collect();
        let mut ciphertext: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        xor_keystream(
            &keys.edge_s_enc_key,
            keys.dev_addr,
            Self::counter(&fcnt_list),
            Direction::EdgeAggregate,
            &mut ciphertext,
        );
        let mut agg = EdgeAggregate {
            gw_id,
            dev_addr: keys.dev_addr,
            function,
            fcnt_list,
            mic_list: frames.iter().map(|f| f.1).collect(),
            ciphertext,
            tag: [0; 8],
        };
        agg.tag = tag8(&keys.edge_s_int_key, &[&agg.tag_input()]);
        agg
    }

    pub fn verify(&self, keys: &EdgeSessionKeys) -> bool {
        self.fcnt_list.len() == self.mic_list.len()
            && ct_eq(&tag8(&keys.edge_s_int_key, &[&self.tag_input()]), &self.tag)
    }

    /// Verify the tag, then decrypt the three aggregated fields.
    pub fn open(&self, keys: &EdgeSessionKeys) -> Result<[f32; 3], EdgeCryptoError> {
        if !self.verify(keys) {
            return Err(EdgeCryptoError::TagMismatch);
        }
        if self.ciphertext.len() != 12 {
            return Err(EdgeCryptoError::BadLength { what: "aggregate values", expected: 12, actual: self.ciphertext.len() });
        }
        let mut plain = self.ciphertext.clone();
        xor_keystream(
            &keys.edge_s_enc_key,
            self.dev_addr,
            Self::counter(&self.fcnt_list),
            Direction::EdgeAggregate,
            &mut plain,
        );
        let f = |i: usize| f32::from_le_bytes(plain[i * 4..i * 4 + 4].try_into().unwrap());
        Ok([f(0), f(1), f(2)])
    }

    pub fn to_envelope(&self, rx_time_us: Micros, egress_time_us: Micros) -> Envelope {
        let mut env = Envelope::new(EnvelopeKind::EdgeAggregate, self.gw_id, rx_time_us, egress_time_us, &self.ciphertext);
        env.aggregate = Some(AggregateFields {
            dev_addr: self.dev_addr,
            function: self.function,
            window_len_actual: self.fcnt_list.len() as u8,
            fcnt_list: self.fcnt_list.clone(),
            mic_list: self.mic_list.clone(),
            tag: hex::encode(self.tag),
        });
        env
    }

    pub fn from_envelope(env: &Envelope) -> Result<Self, AggregateError> {
        let fields = env.aggregate.as_ref().ok_or(AggregateError::MissingFields)?;
        if fields.window_len_actual as usize != fields.fcnt_list.len() || fields.fcnt_list.len() != fields.mic_list.len() {
            return Err(AggregateError::Malformed("list lengths disagree"));
        }
        let mut tag = [0u8; 8];
        hex::decode_to_slice(&fields.tag, &mut tag).map_err(|_| AggregateError::Malformed("tag"))?;
        Ok(EdgeAggregate {
            gw_id: env.gw_id,
            dev_addr: fields.dev_addr,
            function: fields.function,
            fcnt_list: fields.fcnt_list.clone(),
            mic_list: fields.mic_list.clone(),
            ciphertext: env.payload()?,
            tag,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::AesKey;
    use crate::edge_crypto::derive_edge_keys;

    fn col(t: &[f32]) -> Vec<[f32; 3]> {
        t.iter().map(|&x| [x, 50.0, 1000.0]).collect()
    }

    #[test]
    fn mean_of_five_temperatures() {
        let out = AggregateFunction::Mean.apply(&col(&[20.0, 21.0, 22.0, 23.0, 24.0])).unwrap();
        assert_eq!(out[0], 22.0);
        assert_eq!(out[1], 50.0);
    }

    #[test]
    fn min_max_sum() {
        let v = col(&[3.5, -1.0, 7.25]);
        assert_eq!(AggregateFunction::Min.apply(&v).unwrap()[0], -1.0);
        assert_eq!(AggregateFunction::Max.apply(&v).unwrap()[0], 7.25);
        assert_eq!(AggregateFunction::Sum.apply(&v).unwrap()[0], 9.75);
        assert_eq!(AggregateFunction::Sum.apply(&[]), None);
    }

    #[test]
    fn window_ignores_replayed_and_old_counters() {
        let mut w = WindowState::new(DevAddr(1));
        assert_eq!(w.push(10, 1, Mic([0; 4]), [0.0; 3]), PushOutcome::Accepted);
        assert_eq!(w.push(11, 1, Mic([0; 4]), [0.0; 3]), PushOutcome::Stale);
        assert_eq!(w.push(12, 2, Mic([0; 4]), [0.0; 3]), PushOutcome::Accepted);
        assert_eq!(w.opened_at, Some(10));
        assert_eq!(w.take().len(), 2);
        assert_eq!(w.push(13, 2, Mic([0; 4]), [0.0; 3]), PushOutcome::Stale, "counters stay monotone across windows");
        assert!(w.is_empty());
    }

    fn keys() -> EdgeSessionKeys {
        derive_edge_keys(&[5; 32], DevAddr(0x2600_0101), 3, GatewayId(2))
    }

    #[test]
    fn aggregate_round_trips_through_envelope() {
        let k = keys();
        let frames = [(1, Mic([1; 4])), (2, Mic([2; 4])), (3, Mic([3; 4]))];
        let agg = EdgeAggregate::seal(&k, GatewayId(2), AggregateFunction::Max, &frames, [21.5, 40.0, 1001.0]);
        let env = Envelope::from_bytes(&agg.to_envelope(5, 6).to_bytes()).unwrap();
        let back = EdgeAggregate::from_envelope(&env).unwrap();
        assert_eq!(back, agg);
        assert_eq!(back.open(&k).unwrap(), [21.5, 40.0, 1001.0]);
    }

    #[test]
    fn aggregate_tamper_is_detected() {
        let k = keys();
        let agg = EdgeAggregate::seal(&k, GatewayId(2), AggregateFunction::Mean, &[(7, Mic([9; 4]))], [1.0, 2.0, 3.0]);
        for i in 0..agg.ciphertext.len() * 8 {
            let mut t = agg.clone();
            t.ciphertext[i / 8] ^= 1 << (i % 8);
            assert!(t.open(&k).is_err());
        }
        let mut t = agg.clone();
        t.fcnt_list[0] = 8;
        assert!(!t.verify(&k));
        let mut t = agg.clone();
        t.function = AggregateFunction::Sum;
        assert!(!t.verify(&k));
        let mut t = agg.clone();
        t.gw_id = GatewayId(3);
        assert!(!t.verify(&k));
        let mut other = k;
        other.edge_s_int_key = AesKey([0; 16]);
        assert!(!agg.verify(&other));
    }
}
