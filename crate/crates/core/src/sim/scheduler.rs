use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use sha2::{Digest, Sha256};

use super::{Micros, SimError};

struct Queued<E> {
    at: Micros,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<E> Eq for Queued<E> {}
impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Queued<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Event queue ordered by `(timestamp, insertion sequence)`.
pub struct Scheduler<E> {
    now: Micros,
    seq: u64,
    heap: BinaryHeap<Reverse<Queued<E>>>,
    processed: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler { now: 0, seq: 0, heap: BinaryHeap::new(), processed: 0 }
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: Micros, event: E) -> Result<(), SimError> {
        if at < self.now {
            return Err(SimError::ScheduledInPast { at, now: self.now });
        }
        self.heap.push(Reverse(Queued { at, seq: self.seq, event }));
        self.seq += 1;
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: Micros, event: E) {
        let at = self.now + delay;
        self.heap.push(Reverse(Queued { at, seq: self.seq, event }));
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<Micros> {
        self.heap.peek().map(|Reverse(q)| q.at)
    }

    /// Pop the next event due at or before `until`, advancing the clock to it.
    pub fn pop_until(&mut self, until: Micros) -> Option<(Micros, E)> {
        if self.peek_time()? > until {
            return None;
        }
        let Reverse(q) = self.heap.pop()?;
        self.now = q.at;
        self.processed += 1;
        Some((q.at, q.event))
    }

    /// Move the clock forward without dispatching. Never moves backwards.
    pub fn advance_to(&mut self, t: Micros) {
        self.now = self.now.max(t);
    }

    /// Dispatch everything due at or before `until`; returns the number of events handled.
    pub fn run_until<F>(&mut self, until: Micros, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Micros, E),
    {
        let mut n = 0;
        while let Some((at, ev)) = self.pop_until(until) {
            handler(self, at, ev);
            n += 1;
        }
        self.advance_to(until);
        n
    }

    /// Pending events in unspecified order.
    pub fn pending(&self) -> impl Iterator<Item = (Micros, &E)> {
        self.heap.iter().map(|Reverse(q)| (q.at, &q.event))
    }
}

/// Running SHA-256 over dispatched events.
#[derive(Clone, Default)]
pub struct TraceHasher {
    hasher: Sha256,
    events: u64,
}

impl TraceHasher {
    pub fn record(&mut self, at: Micros, description: &str) {
        self.hasher.update(at.to_le_bytes());
        self.hasher.update((description.len() as u64).to_le_bytes());
        self.hasher.update(description.as_bytes());
        self.events += 1;
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn hex(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_dispatch_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(5, "c").unwrap();
        s.schedule(3, "a").unwrap();
        s.schedule(3, "b").unwrap();
        let mut seen = Vec::new();
        let n = s.run_until(10, |_, at, ev| seen.push((at, ev)));
        assert_eq!(n, 3);
        assert_eq!(seen, vec![(3, "a"), (3, "b"), (5, "c")]);
    }

    #[test]
    fn empty_run_processes_nothing() {
        let mut s: Scheduler<()> = Scheduler::new();
        assert_eq!(s.run_until(0, |_, _, _| {}), 0);
    }

    #[test]
    fn past_scheduling_is_an_error() {
        let mut s = Scheduler::new();
        s.schedule(10, ()).unwrap();
        s.run_until(10, |_, _, _| {});
        assert_eq!(s.schedule(9, ()), Err(SimError::ScheduledInPast { at: 9, now: 10 }));
        assert!(s.schedule(10, ()).is_ok());
    }

    #[test]
    fn handlers_never_see_future_clock() {
        let mut s = Scheduler::new();
        for t in [7u64, 1, 4, 4, 9] {
            s.schedule(t, t).unwrap();
        }
        s.run_until(100, |sch, at, ev| {
            assert_eq!(sch.now(), at);
            assert_eq!(at, ev);
            if ev == 4 {
                sch.schedule_in(2, 6);
            }
        });
        assert_eq!(s.now(), 100);
    }

    #[test]
    fn stop_time_is_inclusive() {
        let mut s = Scheduler::new();
        s.schedule(5, ()).unwrap();
        s.schedule(6, ()).unwrap();
        assert_eq!(s.run_until(5, |_, _, _| {}), 1);
        assert_eq!(s.len(), 1);
    }
}
