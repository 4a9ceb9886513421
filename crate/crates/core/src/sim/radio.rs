use rand::Rng;
use serde::Serialize;

use super::{Micros, SimError};

/// One over-the-air transmission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadioTx {
    pub device: usize,
    pub start: Micros,
    pub airtime: Micros,
    pub channel: u8,
    pub payload: Vec<u8>,
}

impl RadioTx {
    fn end(&self) -> Micros {
        self.start + self.airtime
    }

    fn overlaps(&self, other: &RadioTx) -> bool {
        self.channel == other.channel && self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reception {
    pub gateway: usize,
    pub rssi: i16,
}

/// `reception_prob[device][gateway]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMatrix {
    probs: Vec<Vec<f64>>,
    gateways: usize,
}

impl CoverageMatrix {
    pub fn new(probs: Vec<Vec<f64>>, gateways: usize) -> Result<Self, String> {
        for (d, row) in probs.iter().enumerate() {
            if row.len() != gateways {
                return Err(format!("coverage row {d} has {} entries, expected {gateways}", row.len()));
            }
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(format!("coverage row {d} has probability {p} outside [0, 1]"));
            }
        }
        Ok(CoverageMatrix { probs, gateways })
    }

    pub fn uniform(devices: usize, gateways: usize, p: f64) -> Self {
        CoverageMatrix { probs: vec![vec![p; gateways]; devices], gateways }
    }

    pub fn get(&self, device: usize, gateway: usize) -> Option<f64> {
        self.probs.get(device).and_then(|r| r.get(gateway)).copied()
    }

    pub fn set(&mut self, device: usize, gateway: usize, p: f64) {
        self.probs[device][gateway] = p;
    }

    pub fn devices(&self) -> usize {
        self.probs.len()
    }

    pub fn gateways(&self) -> usize {
        self.gateways
    }
}

/// Counters over (transmission, gateway) pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RadioCounters {
    pub transmissions: u64,
    pub pairs: u64,
    pub delivered: u64,
    pub coverage_losses: u64,
    pub collision_losses: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxId(pub u64);

struct ActiveTx {
    id: TxId,
    tx: RadioTx,
    heard: Vec<Option<i16>>,
    collided: Vec<bool>,
}

/// Shared radio channel. A transmission starts with [`RadioMedium::begin`]
/// and resolves into receptions with [`RadioMedium::finish`] at its end.
///
/// Each gateway hears a transmission independently with the coverage
/// probability. A heard reception is destroyed when another transmission on
/// the same channel, also heard at that gateway, overlaps it in time; both
/// are lost.
pub struct RadioMedium {
    coverage: CoverageMatrix,
    active: Vec<ActiveTx>,
    next_id: u64,
    counters: RadioCounters,
}

impl RadioMedium {
    pub fn new(coverage: CoverageMatrix) -> Self {
        RadioMedium { coverage, active: Vec::new(), next_id: 0, counters: RadioCounters::default() }
    }

    pub fn coverage(&self) -> &CoverageMatrix {
        &self.coverage
    }

    pub fn counters(&self) -> RadioCounters {
        self.counters
    }

    pub fn in_air(&self) -> usize {
        self.active.len()
    }

    pub fn begin<R: Rng>(&mut self, tx: RadioTx, rng: &mut R) -> Result<TxId, SimError> {
        if tx.device >= self.coverage.devices() {
            return Err(SimError::UnknownDevice(tx.device));
        }
        let n = self.coverage.gateways();
        let mut heard = Vec::with_capacity(n);
        for g in 0..n {
            let p = self.coverage.get(tx.device, g).unwrap_or(0.0);
            // fixed draw count per gateway keeps the RNG stream independent of outcomes
            let u: f64 = rng.gen();
            let r: f64 = rng.gen_range(0.9..=1.0);
            let rssi = (-120.0 + 60.0 * p * r).round() as i16;
            heard.push((u < p).then_some(rssi));
        }
        let mut collided = vec![false; n];
        for other in &mut self.active {
            if !other.tx.overlaps(&tx) {
                continue;
            }
            for g in 0..n {
                if heard[g].is_some() && other.heard[g].is_some() {
                    collided[g] = true;
                    other.collided[g] = true;
                }
            }
        }
        let id = TxId(self.next_id);
        self.next_id += 1;
        self.active.push(ActiveTx { id, tx, heard, collided });
        Ok(id)
    }

    /// Resolve an ended transmission. Unknown ids resolve to nothing.
    pub fn finish(&mut self, id: TxId) -> Option<(RadioTx, Vec<Reception>)> {
        let idx = self.active.iter().position(|a| a.id == id)?;
        let done = self.active.swap_remove(idx);
        self.counters.transmissions += 1;
        let mut out = Vec::new();
        for (g, h) in done.heard.iter().enumerate() {
            self.counters.pairs += 1;
            match h {
                None => self.counters.coverage_losses += 1,
                Some(_) if done.collided[g] => self.counters.collision_losses += 1,
                Some(rssi) => {
                    self.counters.delivered += 1;
                    out.push(Reception { gateway: g, rssi: *rssi });
                }
            }
        }
        Some((done.tx, out))
    }
}
