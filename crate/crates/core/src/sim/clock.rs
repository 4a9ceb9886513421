use std::time::{Duration, Instant};

use super::Micros;

/// Simulation clock plus the pacing ratio it runs at.
/// `pacing == 0` runs as fast as possible; `1.0` tracks wall time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    pub now: Micros,
    pub pacing: f64,
}

impl SimClock {
    pub fn is_realtime(&self) -> bool {
        self.pacing > 0.0
    }
}

/// Maps simulation time onto wall time for paced runs.
#[derive(Debug, Clone)]
pub struct Pacer {
    pacing: f64,
    wall_origin: Instant,
    sim_origin: Micros,
}

impl Pacer {
    pub fn new(pacing: f64, sim_now: Micros) -> Self {
        Pacer { pacing, wall_origin: Instant::now(), sim_origin: sim_now }
    }

    /// Re-anchor after a pause so paused time is not "caught up".
    pub fn rebase(&mut self, sim_now: Micros) {
        self.wall_origin = Instant::now();
        self.sim_origin = sim_now;
    }

    /// Simulation time corresponding to the current wall time.
    pub fn sim_now(&self) -> Micros {
        if self.pacing <= 0.0 {
            return Micros::MAX;
        }
        let elapsed = self.wall_origin.elapsed().as_secs_f64() * 1e6 * self.pacing;
        self.sim_origin + elapsed as Micros
    }

    /// Wall duration until `sim_t` becomes due, zero if already due.
    pub fn wait_for(&self, sim_t: Micros) -> Duration {
        if self.pacing <= 0.0 || sim_t <= self.sim_origin {
            return Duration::ZERO;
        }
        let target = Duration::from_secs_f64((sim_t - self.sim_origin) as f64 / 1e6 / self.pacing);
        target.saturating_sub(self.wall_origin.elapsed())
    }
}
