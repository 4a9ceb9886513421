use std::fmt;

use serde::Serialize;

use super::Micros;
use crate::codec::GatewayId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Gateway(GatewayId),
    NetworkServer,
    AppServer,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Gateway(g) => write!(f, "{g}"),
            Endpoint::NetworkServer => f.write_str("ns"),
            Endpoint::AppServer => f.write_str("as"),
        }
    }
}

/// Backhaul link between two endpoints. `bandwidth` is in bytes per second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkConfig {
    pub a: Endpoint,
    pub b: Endpoint,
    pub bandwidth: u64,
    pub base_delay: Micros,
}

impl LinkConfig {
    pub fn id(&self) -> String {
        format!("{}-{}", self.a, self.b)
    }
}

/// `Forward` runs from `a` to `b` (the uplink direction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LaneDir {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Lane {
    pub busy_until: Micros,
    pub bytes: u64,
    pub messages: u64,
    pub queue_depth: u64,
    pub max_queue_depth: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub id: String,
    pub bandwidth_bps: u64,
    pub delay_us: Micros,
    pub forward: Lane,
    pub reverse: Lane,
}

/// FIFO-serialized link: a message starts transmitting once the previous
/// one on the same lane has finished, and arrives `base_delay` after its
/// last byte leaves.
#[derive(Debug, Clone)]
pub struct Link {
    config: LinkConfig,
    lanes: [Lane; 2],
}

impl Link {
    pub fn new(config: LinkConfig) -> Self {
        assert!(config.bandwidth > 0, "link bandwidth must be positive");
        Link { config, lanes: [Lane::default(); 2] }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.config
    }

    pub fn id(&self) -> String {
        self.config.id()
    }

    /// Lane carrying traffic from `from` towards the other end.
    pub fn direction_from(&self, from: Endpoint) -> Option<LaneDir> {
        if from == self.config.a {
            Some(LaneDir::Forward)
        } else if from == self.config.b {
            Some(LaneDir::Reverse)
        } else {
            None
        }
    }

    pub fn destination(&self, dir: LaneDir) -> Endpoint {
        match dir {
            LaneDir::Forward => self.config.b,
            LaneDir::Reverse => self.config.a,
        }
    }

    fn lane_mut(&mut self, dir: LaneDir) -> &mut Lane {
        &mut self.lanes[dir as usize]
    }

    pub fn lane(&self, dir: LaneDir) -> &Lane {
        &self.lanes[dir as usize]
    }

    pub fn transmit_time(&self, len: usize) -> Micros {
        (len as u64 * 1_000_000).div_ceil(self.config.bandwidth)
    }

    /// Queue `len` bytes at `now`; returns the arrival time at the far end.
    pub fn send(&mut self, dir: LaneDir, now: Micros, len: usize) -> Micros {
        let tx = self.transmit_time(len);
        let delay = self.config.base_delay;
        let lane = self.lane_mut(dir);
        let start = now.max(lane.busy_until);
        lane.busy_until = start + tx;
        lane.bytes += len as u64;
        lane.messages += 1;
        lane.queue_depth += 1;
        lane.max_queue_depth = lane.max_queue_depth.max(lane.queue_depth);
        lane.busy_until + delay
    }

    /// Called when a message leaves the lane at the far end.
    pub fn delivered(&mut self, dir: LaneDir) {
        let lane = self.lane_mut(dir);
        lane.queue_depth = lane.queue_depth.saturating_sub(1);
    }

    /// Takes effect for messages sent after the call.
    pub fn set_bandwidth(&mut self, bandwidth: u64) {
        assert!(bandwidth > 0, "link bandwidth must be positive");
        self.config.bandwidth = bandwidth;
    }

    pub fn set_delay(&mut self, delay: Micros) {
        self.config.base_delay = delay;
    }

    pub fn stats(&self) -> LinkStats {
        LinkStats {
            id: self.id(),
            bandwidth_bps: self.config.bandwidth,
            delay_us: self.config.base_delay,
            forward: self.lanes[0],
            reverse: self.lanes[1],
        }
    }
}
