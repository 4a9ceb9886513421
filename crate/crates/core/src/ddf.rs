//! Exact duplicate-detection filter kept by the application server.
//!
//! An open-addressed, linear-probing hash set over packed frame identities.
//! The table is allocated and touched up front at twice the configured
//! capacity, so inserts never resize and probe sequences stay short.

use serde::Serialize;

use crate::codec::{DevAddr, Mic};

pub const DEFAULT_CAPACITY: usize = 1 << 20;

/// Identity of one uplink frame: address, counter, and integrity code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct DdfKey {
    pub dev_addr: DevAddr,
    pub fcnt: u16,
    pub mic: Mic,
}

impl DdfKey {
    pub fn new(dev_addr: DevAddr, fcnt: u16, mic: Mic) -> Self {
        DdfKey { dev_addr, fcnt, mic }
    }

    // 80 bits packed into the low bits; bit 127 marks an occupied slot
    fn pack(&self) -> u128 {
        (1u128 << 127)
            | ((self.dev_addr.0 as u128) << 48)
            | ((self.fcnt as u128) << 32)
            | u32::from_be_bytes(self.mic.0) as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Fresh,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("duplicate filter full: capacity {capacity} entries")]
pub struct CapacityExceeded {
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DdfStats {
    pub fresh: u64,
    pub duplicate: u64,
    pub size: u64,
    pub capacity: u64,
}

pub struct Ddf {
    slots: Vec<u128>,
    mask: usize,
    capacity: usize,
    len: usize,
    fresh: u64,
    duplicate: u64,
}

const EMPTY: u128 = 0;

fn mix(x: u128) -> u64 {
    // fold, then the 64-bit murmur3 finalizer
    let mut h = (x as u64) ^ ((x >> 64) as u64).rotate_left(29);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    h
}

impl Ddf {
    pub fn with_capacity(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        let table = (capacity * 2).next_power_of_two();
        let mut slots = Vec::with_capacity(table);
        // explicit fill so every page is resident before the first lookup
        slots.resize(table, EMPTY);
        Ddf { slots, mask: table - 1, capacity, len: 0, fresh: 0, duplicate: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn find(&self, packed: u128) -> (usize, bool) {
        let mut i = mix(packed) as usize & self.mask;
        loop {
            let s = self.slots[i];
            if s == packed {
                return (i, true);
            }
            if s == EMPTY {
                return (i, false);
            }
            i = (i + 1) & self.mask;
        }
    }

    pub fn contains(&self, key: &DdfKey) -> bool {
        self.find(key.pack()).1
    }

    /// Duplicate iff `key` was inserted before; otherwise inserts it.
    pub fn check_and_insert(&mut self, key: DdfKey) -> Result<Verdict, CapacityExceeded> {
        let packed = key.pack();
        let (slot, present) = self.find(packed);
        if present {
            self.duplicate += 1;
            return Ok(Verdict::Duplicate);
        }
        if self.len >= self.capacity {
            return Err(CapacityExceeded { capacity: self.capacity });
        }
        self.slots[slot] = packed;
        self.len += 1;
        self.fresh += 1;
        Ok(Verdict::Fresh)
    }

    /// Insert every key; returns how many were new.
    pub fn mark_covered(&mut self, keys: &[DdfKey]) -> Result<usize, CapacityExceeded> {
        let mut n = 0;
        for k in keys {
            if self.check_and_insert(*k)? == Verdict::Fresh {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn stats(&self) -> DdfStats {
        DdfStats {
            fresh: self.fresh,
            duplicate: self.duplicate,
            size: self.len as u64,
            capacity: self.capacity as u64,
        }
    }
}

impl std::fmt::Debug for Ddf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ddf").field("len", &self.len).field("capacity", &self.capacity).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: u32) -> DdfKey {
        DdfKey::new(DevAddr(i / 7), (i % 65536) as u16, Mic(i.wrapping_mul(2654435761).to_be_bytes()))
    }

    #[test]
    fn second_sighting_is_duplicate() {
        let mut d = Ddf::with_capacity(16);
        assert_eq!(d.check_and_insert(key(1)).unwrap(), Verdict::Fresh);
        assert_eq!(d.check_and_insert(key(1)).unwrap(), Verdict::Duplicate);
        assert!(d.contains(&key(1)));
    }

    #[test]
    fn distinct_keys_are_all_fresh() {
        let mut d = Ddf::with_capacity(128);
        for i in 0..100 {
            assert_eq!(d.check_and_insert(key(i)).unwrap(), Verdict::Fresh);
        }
        assert_eq!(d.stats(), DdfStats { fresh: 100, duplicate: 0, size: 100, capacity: 128 });
    }

    #[test]
    fn mic_is_part_of_identity() {
        let mut d = Ddf::with_capacity(8);
        let a = DdfKey::new(DevAddr(1), 1, Mic([1, 2, 3, 4]));
        let b = DdfKey::new(DevAddr(1), 1, Mic([1, 2, 3, 5]));
        d.check_and_insert(a).unwrap();
        assert_eq!(d.check_and_insert(b).unwrap(), Verdict::Fresh);
    }

    #[test]
    fn mark_covered_counts_new_keys() {
        let mut d = Ddf::with_capacity(32);
        let five: Vec<_> = (0..5).map(key).collect();
        assert_eq!(d.mark_covered(&five).unwrap(), 5);
        assert_eq!(d.mark_covered(&five).unwrap(), 0);
        let mixed: Vec<_> = (3..8).map(key).collect();
        assert_eq!(d.mark_covered(&mixed).unwrap(), 3);
    }

    #[test]
    fn capacity_is_enforced_but_duplicates_still_answer() {
        let mut d = Ddf::with_capacity(3);
        for i in 0..3 {
            d.check_and_insert(key(i)).unwrap();
        }
        assert_eq!(d.check_and_insert(key(9)), Err(CapacityExceeded { capacity: 3 }));
        assert_eq!(d.check_and_insert(key(0)).unwrap(), Verdict::Duplicate);
    }

    #[test]
    fn zero_key_fields_are_storable() {
        let mut d = Ddf::with_capacity(4);
        let z = DdfKey::new(DevAddr(0), 0, Mic([0; 4]));
        assert_eq!(d.check_and_insert(z).unwrap(), Verdict::Fresh);
        assert_eq!(d.check_and_insert(z).unwrap(), Verdict::Duplicate);
    }
}
