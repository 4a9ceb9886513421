use e2l_core::codec::{DevAddr, Mic};
use e2l_core::gateway::{AggregateFunction, PushOutcome, WindowState};
use proptest::prelude::*;

fn ulp_distance(a: f32, b: f32) -> u32 {
    let key = |x: f32| {
        let bits = x.to_bits() as i32;
        if bits < 0 { i32::MIN - bits } else { bits }
    };
    key(a).abs_diff(key(b))
}

fn sensor_values() -> impl Strategy<Value = [f32; 3]> {
    (-40.0f32..85.0, 0.0f32..100.0, 300.0f32..1100.0).prop_map(|(t, h, p)| [t, h, p])
}

proptest! {
    #[test]
    fn functions_match_brute_force(window in proptest::collection::vec(sensor_values(), 1..=20)) {
        for f in AggregateFunction::ALL {
            let got = f.apply(&window).unwrap();
            for field in 0..3 {
                let mut min = window[0][field];
                let mut max = window[0][field];
                let mut sum = 0f64;
                for v in &window {
                    min = if v[field] < min { v[field] } else { min };
                    max = if v[field] > max { v[field] } else { max };
                    sum += v[field] as f64;
                }
                match f {
                    AggregateFunction::Min => prop_assert_eq!(got[field], min),
                    AggregateFunction::Max => prop_assert_eq!(got[field], max),
                    AggregateFunction::Mean => prop_assert!(ulp_distance(got[field], (sum / window.len() as f64) as f32) <= 1),
                    AggregateFunction::Sum => prop_assert!(((got[field] as f64 - sum) / sum.abs().max(1e-9)).abs() <= 1e-3),
                }
            }
        }
    }

    #[test]
    fn window_accepts_only_increasing_counters(fcnts in proptest::collection::vec(any::<u16>(), 1..40)) {
        let mut w = WindowState::new(DevAddr(1));
        let mut last: Option<u16> = None;
        for f in fcnts {
            let outcome = w.push(0, f, Mic([0; 4]), [0.0; 3]);
            let fresh = last.is_none_or(|l| f > l);
            prop_assert_eq!(outcome, if fresh { PushOutcome::Accepted } else { PushOutcome::Stale });
            if fresh {
                last = Some(f);
            }
        }
        let taken = w.take();
        prop_assert!(taken.windows(2).all(|p| p[0].0 < p[1].0));
        // monotonicity survives the window boundary
        if let Some(l) = last {
            prop_assert_eq!(w.push(1, l, Mic([0; 4]), [0.0; 3]), PushOutcome::Stale);
        }
    }
}

#[test]
fn empty_window_has_no_aggregate() {
    for f in AggregateFunction::ALL {
        assert_eq!(f.apply(&[]), None);
    }
}
