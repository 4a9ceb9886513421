use e2l_core::codec::{DevAddr, Mic};
use e2l_core::ddf::{Ddf, DdfKey, Verdict};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn key(addr: u32, fcnt: u16, mic: u32) -> DdfKey {
    DdfKey::new(DevAddr(addr), fcnt, Mic(mic.to_be_bytes()))
}

proptest! {
    #[test]
    fn agrees_with_linear_scan(ops in proptest::collection::vec((0u32..4, 0u16..64, 0u32..4), 1..400)) {
        let mut ddf = Ddf::with_capacity(1000);
        let mut seen: Vec<DdfKey> = Vec::new();
        for (a, f, m) in ops {
            let k = key(a, f, m);
            let expected = if seen.contains(&k) { Verdict::Duplicate } else { seen.push(k); Verdict::Fresh };
            prop_assert_eq!(ddf.check_and_insert(k).unwrap(), expected);
        }
        prop_assert_eq!(ddf.len(), seen.len());
    }
}

#[test]
fn zero_key_is_not_confused_with_an_empty_slot() {
    let mut ddf = Ddf::with_capacity(4);
    let zero = key(0, 0, 0);
    assert!(!ddf.contains(&zero));
    assert_eq!(ddf.check_and_insert(zero).unwrap(), Verdict::Fresh);
    assert_eq!(ddf.check_and_insert(zero).unwrap(), Verdict::Duplicate);
}

#[test]
fn capacity_is_enforced_but_duplicates_still_answer() {
    let mut ddf = Ddf::with_capacity(3);
    for f in 0..3 {
        ddf.check_and_insert(key(1, f, 0)).unwrap();
    }
    assert!(ddf.check_and_insert(key(1, 9, 0)).is_err());
    assert_eq!(ddf.check_and_insert(key(1, 2, 0)).unwrap(), Verdict::Duplicate);
    assert_eq!(ddf.stats().size, 3);
}

#[test]
fn randomized_stream_with_duplicates_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ddf = Ddf::with_capacity(20_000);
    let mut inserted: Vec<DdfKey> = Vec::new();
    for _ in 0..20_000 {
        let k = if !inserted.is_empty() && rng.gen_bool(0.3) {
            inserted[rng.gen_range(0..inserted.len())]
        } else {
            key(rng.gen_range(0..50), rng.gen(), rng.gen())
        };
        let expected = if inserted.contains(&k) { Verdict::Duplicate } else { inserted.push(k); Verdict::Fresh };
        assert_eq!(ddf.check_and_insert(k).unwrap(), expected);
    }
    let s = ddf.stats();
    assert_eq!(s.fresh + s.duplicate, 20_000);
}
