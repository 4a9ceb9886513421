use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::Micros;

pub const TEMPERATURE_RANGE: (f32, f32) = (-40.0, 85.0);
pub const HUMIDITY_RANGE: (f32, f32) = (0.0, 100.0);
pub const PRESSURE_RANGE: (f32, f32) = (300.0, 1100.0);

/// Temperature/humidity/pressure sample, BME280 ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub temperature: f32,
    pub humidity: f32,
    pub pressure: f32,
    pub t: Micros,
}

impl SensorReading {
    pub fn values(&self) -> [f32; 3] {
        [self.temperature, self.humidity, self.pressure]
    }

    pub fn from_values(v: [f32; 3], t: Micros) -> Self {
        SensorReading { temperature: v[0], humidity: v[1], pressure: v[2], t }
    }

    /// Three little-endian f32 values, zero-padded to `len` bytes.
    pub fn to_payload(&self, len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len.max(SENSOR_PAYLOAD_MIN));
        for v in self.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(len.max(SENSOR_PAYLOAD_MIN), 0);
        out
    }
}

pub const SENSOR_PAYLOAD_MIN: usize = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("sensor payload too short: {0} bytes")]
    TooShort(usize),
    #[error("{field} value {value} outside sensor range")]
    OutOfRange { field: &'static str, value: f32 },
    #[error("non-zero padding byte")]
    Padding,
}

fn in_range(v: f32, (lo, hi): (f32, f32)) -> bool {
    v.is_finite() && v >= lo && v <= hi
}

/// Range checks on a value triple.
pub fn check_values(v: [f32; 3]) -> Result<[f32; 3], FormatError> {
    let fields = [
        ("temperature", TEMPERATURE_RANGE),
        ("humidity", HUMIDITY_RANGE),
        ("pressure", PRESSURE_RANGE),
    ];
    for (value, (field, range)) in v.iter().zip(fields) {
        if !in_range(*value, range) {
            return Err(FormatError::OutOfRange { field, value: *value });
        }
    }
    Ok(v)
}

/// The plaintext format check: three in-range floats and all-zero padding.
pub fn parse_sensor_payload(bytes: &[u8]) -> Result<[f32; 3], FormatError> {
    if bytes.len() < SENSOR_PAYLOAD_MIN {
        return Err(FormatError::TooShort(bytes.len()));
    }
    let f = |i: usize| f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    let v = check_values([f(0), f(1), f(2)])?;
    if bytes[SENSOR_PAYLOAD_MIN..].iter().any(|b| *b != 0) {
        return Err(FormatError::Padding);
    }
    Ok(v)
}

/// Bounded random walk starting at (22.0 °C, 45.0 %RH, 1013.0 hPa).
#[derive(Debug, Clone, Default)]
pub struct SensorModel {
    last: Option<[f32; 3]>,
}

const STEPS: [f32; 3] = [0.2, 0.5, 0.3];
const INITIAL: [f32; 3] = [22.0, 45.0, 1013.0];

impl SensorModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_reading<R: Rng>(&mut self, rng: &mut R, t: Micros) -> SensorReading {
        let next = match self.last {
            None => INITIAL,
            Some(prev) => {
                let ranges = [TEMPERATURE_RANGE, HUMIDITY_RANGE, PRESSURE_RANGE];
                let mut v = prev;
                for i in 0..3 {
                    let step = rng.gen_range(-STEPS[i]..=STEPS[i]);
                    v[i] = (prev[i] + step).clamp(ranges[i].0, ranges[i].1);
                }
                v
            }
        };
        self.last = Some(next);
        SensorReading::from_values(next, t)
    }
}
