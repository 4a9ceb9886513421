//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fail.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use e2l_core::codec::{DevAddr, Mic};
use e2l_core::control::ScenarioConfig;
use e2l_core::ddf::{Ddf, DdfKey, Verdict, DEFAULT_CAPACITY};
use e2l_core::device::{parse_sensor_payload, DeviceMode};
use e2l_core::engine::Simulation;
use e2l_core::gateway::{AggregateFunction, GatewayMode};
use e2l_core::servers::{DeliveryPath, Fate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAFFIC_RATIO: (f64, f64) = (0.15, 0.30);
const TABLE1_AGGREGATES: usize = 20;
const TABLE1_WALL: Duration = Duration::from_secs(10);
const LATENCY_GAIN_MS: f64 = 130.0;
const LATENCY_TOL_MS: f64 = 5.0;
const SECURITY_RUNS: u64 = 100;
const DDF_OPS: usize = 100_000;
const DDF_SMALL_OPS: usize = 10_000;
const DDF_DUP_FRACTION: f64 = 0.3;
const DDF_SLOWDOWN: f64 = 1.3;
const DDF_REPEATS: usize = 9;
const AGG_WINDOWS: usize = 1000;
const AGG_MAX_LEN: usize = 20;
const SUM_REL_TOL: f64 = 1e-3;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn run(cfg: ScenarioConfig, seed: Option<u64>) -> Result<Simulation, String> {
    let mut sim = Simulation::new(cfg, seed).map_err(|e| e.to_string())?;
    sim.run_to_end().map_err(|e| e.to_string())?;
    Ok(sim)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn traffic_reduction() -> Outcome {
    let started = Instant::now();
    let sim = run(scenario("table1.scn"), None)?;
    let wall = started.elapsed();
    let m = sim.snapshot();
    let mode_of = |eui| sim.devices().iter().find(|d| d.profile().dev_eui == eui).map(|d| d.profile().mode);
    let legacy: u64 =
        m.traffic.per_device.iter().filter(|t| mode_of(t.dev_eui) == Some(DeviceMode::Legacy)).map(|t| t.cloud_bytes).sum();
    let edge: u64 =
        m.traffic.per_device.iter().filter(|t| mode_of(t.dev_eui) == Some(DeviceMode::E2ed)).map(|t| t.edge_bytes).sum();
    let ratio = edge as f64 / legacy as f64;
    let aggregates = sim.deliveries().iter().filter(|d| d.path == DeliveryPath::Edge).count();
    check(
        (TRAFFIC_RATIO.0..=TRAFFIC_RATIO.1).contains(&ratio) && aggregates == TABLE1_AGGREGATES && wall < TABLE1_WALL,
        format!("edge {edge} B / legacy {legacy} B = {ratio:.4}, aggregates {aggregates}, wall {:.2}s", wall.as_secs_f64()),
    )
}

fn latency_gain() -> Outcome {
    let sim = run(scenario("latency.scn"), None)?;
    let m = sim.snapshot();
    let (cloud, edge) = (m.latency.cloud, m.latency.edge);
    let diff = cloud.mean_ms - edge.mean_ms;
    let lat = |p| sim.deliveries().iter().filter(|d| d.path == p).map(|d| d.latency_us).collect::<Vec<_>>();
    let (c, e) = (lat(DeliveryPath::Cloud), lat(DeliveryPath::Edge));
    let every_pair = !c.is_empty() && !e.is_empty() && e.iter().max() < c.iter().min();
    check(
        (diff - LATENCY_GAIN_MS).abs() <= LATENCY_TOL_MS && every_pair,
        format!(
            "cloud {:.3} ± {:.3} ms (n={}), edge {:.3} ± {:.3} ms (n={}), gain {diff:.3} ms, edge < cloud for all pairs: {every_pair}",
            cloud.mean_ms, cloud.ci95_ms, cloud.count, edge.mean_ms, edge.ci95_ms, edge.count
        ),
    )
}

fn group_key_security() -> Outcome {
    let (mut agreed, mut ns_clean, mut unreadable) = (0, 0, 0);
    for seed in 1..=SECURITY_RUNS {
        let sim = run(scenario("activation.scn"), Some(seed))?;
        let copies = sim.key_copies();
        let c = &copies[0];
        if c.device.is_some() && c.device == c.gateway && c.device == c.server {
            agreed += 1;
        }
        let edge_keys: Vec<[u8; 16]> =
            copies.iter().filter_map(|c| c.device).flat_map(|b| [b[..16].try_into().unwrap(), b[16..32].try_into().unwrap()]).collect();
        let leaked = sim.network_server().held_keys().copied().chain(sim.join_server().held_keys()).any(|k| edge_keys.contains(&k.0));
        if !edge_keys.is_empty() && !leaked {
            ns_clean += 1;
        }
        let eui = sim.devices()[0].profile().dev_eui;
        if let Some(frame) = sim.last_frame(eui) {
            let keys: Vec<_> = sim.network_server().held_keys().collect();
            if !keys.is_empty() && keys.iter().all(|k| parse_sensor_payload(&frame.decrypt_payload(k)).is_err()) {
                unreadable += 1;
            }
        }
    }
    let n = SECURITY_RUNS;
    check(
        agreed == n && ns_clean == n && unreadable == n,
        format!("key agreement {agreed}/{n}, NS/JS free of edge keys {ns_clean}/{n}, NS decrypt fails format {unreadable}/{n}"),
    )
}

fn ddf_stream(n: usize, seed: u64) -> Vec<DdfKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<DdfKey> = Vec::with_capacity(n);
    for _ in 0..n {
        let k = if !out.is_empty() && rng.gen_bool(DDF_DUP_FRACTION) {
            out[rng.gen_range(0..out.len())]
        } else {
            DdfKey::new(DevAddr(rng.gen_range(0x2600_0000..0x2600_0400)), rng.gen(), Mic(rng.gen()))
        };
        out.push(k);
    }
    out
}

fn time_per_op(stream: &[DdfKey]) -> f64 {
    let mut ddf = Ddf::with_capacity(DEFAULT_CAPACITY);
    let t = Instant::now();
    for k in stream {
        std::hint::black_box(ddf.check_and_insert(*k).unwrap());
    }
    t.elapsed().as_secs_f64() / stream.len() as f64
}

/// Fastest of `DDF_REPEATS` runs at each size, alternating sizes so both see
/// the same machine conditions.
fn interleaved_min(small: &[DdfKey], large: &[DdfKey]) -> (f64, f64) {
    time_per_op(small);
    time_per_op(large);
    let (mut s, mut l) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..DDF_REPEATS {
        s = s.min(time_per_op(small));
        l = l.min(time_per_op(large));
    }
    (s, l)
}

fn ddf_exactness_and_speed() -> Outcome {
    let stream = ddf_stream(DDF_OPS, 2024);
    let mut ddf = Ddf::with_capacity(DEFAULT_CAPACITY);
    let mut oracle: Vec<DdfKey> = Vec::new();
    let mut disagreements = 0;
    for k in &stream {
        let expected = if oracle.iter().any(|o| o == k) {
            Verdict::Duplicate
        } else {
            oracle.push(*k);
            Verdict::Fresh
        };
        if ddf.check_and_insert(*k).map_err(|e| e.to_string())? != expected {
            disagreements += 1;
        }
    }
    let dup = 1.0 - oracle.len() as f64 / stream.len() as f64;

    let small = ddf_stream(DDF_SMALL_OPS, 2025);
    let (t_small, t_large) = interleaved_min(&small, &stream);
    let ratio = t_large / t_small;
    check(
        disagreements == 0 && ratio <= DDF_SLOWDOWN,
        format!(
            "{disagreements} disagreements over {DDF_OPS} ops ({:.1}% duplicates), {:.1} ns/op at 10^5 vs {:.1} ns/op at 10^4 (x{ratio:.3})",
            dup * 100.0,
            t_large * 1e9,
            t_small * 1e9
        ),
    )
}

fn exactly_once() -> Outcome {
    let cfg = scenario("mixed.scn");
    let suppressed = cfg.gateways.iter().any(|g| g.suppress_ns_forward_for_e2ed);
    let sim = run(cfg, None)?;
    let acc = sim.accounting();
    let mut delivered: BTreeMap<(DevAddr, u16), u32> = BTreeMap::new();
    for d in sim.deliveries() {
        for f in d.fcnt_list.iter().filter(|f| !d.late_overlap.contains(f)) {
            *delivered.entry((d.dev_addr, *f)).or_default() += 1;
        }
    }
    let fates = sim.app_server().fates();
    let mut violations = 0;
    for key in sim.accepted_frames() {
        let n = delivered.get(&(key.dev_addr, key.fcnt)).copied().unwrap_or(0);
        let ok = match fates.get(key) {
            Some(Fate::Cloud | Fate::Edge | Fate::LateDuplicate) => n == 1,
            Some(Fate::Security) => n == 0,
            None => false,
        };
        violations += usize::from(!ok);
    }
    check(
        acc.balanced() && acc.in_flight == 0 && violations == 0 && !suppressed,
        format!(
            "accepted {} = cloud {} + edge {} + late duplicate {} + security {} + in flight {}; unaccounted {}, unexpected {}, exactly-once violations {violations}",
            acc.frames_accepted_at_gateways,
            acc.delivered_cloud,
            acc.delivered_edge,
            acc.dropped_duplicates,
            acc.dropped_security,
            acc.in_flight,
            acc.unaccounted,
            acc.unexpected
        ),
    )
}

fn backward_compatibility() -> Outcome {
    let mut logs = Vec::new();
    for mode in [GatewayMode::Legacy, GatewayMode::E2gw] {
        let mut cfg = scenario("legacy_compat.scn");
        if cfg.devices.iter().any(|d| d.mode != DeviceMode::Legacy) {
            return Err("population is not all-legacy".into());
        }
        cfg.gateways[1].mode = mode;
        logs.push(run(cfg, None)?.delivery_log());
    }
    let lines = logs[0].lines().count();
    check(logs[0] == logs[1] && lines > 0, format!("{lines} deliveries, logs identical: {}", logs[0] == logs[1]))
}

fn determinism() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for name in ["table1.scn", "mixed.scn", "latency.scn", "legacy_compat.scn", "activation.scn"] {
        let a = run(scenario(name), None)?.report();
        let b = run(scenario(name), None)?.report();
        ok &= a.hash() == b.hash();
        details.push(format!("{name} {}", &a.hash()[..12]));
    }
    check(ok, details.join(", "))
}

fn ulp_distance(a: f32, b: f32) -> u32 {
    let key = |x: f32| {
        let bits = x.to_bits() as i32;
        if bits < 0 {
            i32::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

fn aggregation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut worst_ulp, mut worst_rel, mut exact_misses, mut checked) = (0u32, 0f64, 0, 0);
    for _ in 0..AGG_WINDOWS {
        let len = rng.gen_range(1..=AGG_MAX_LEN);
        let window: Vec<[f32; 3]> = (0..len)
            .map(|_| [rng.gen_range(-40.0..85.0), rng.gen_range(0.0..100.0), rng.gen_range(300.0..1100.0)])
            .collect();
        for f in AggregateFunction::ALL {
            let got = f.apply(&window).ok_or("empty aggregate")?;
            for field in 0..3 {
                let column: Vec<f32> = window.iter().map(|v| v[field]).collect();
                let mut min = column[0];
                let mut max = column[0];
                let mut sum = 0f64;
                for &x in &column {
                    if x < min {
                        min = x;
                    }
                    if x > max {
                        max = x;
                    }
                    sum += x as f64;
                }
                checked += 1;
                match f {
                    AggregateFunction::Min => exact_misses += usize::from(got[field] != min),
                    AggregateFunction::Max => exact_misses += usize::from(got[field] != max),
                    AggregateFunction::Mean => worst_ulp = worst_ulp.max(ulp_distance(got[field], (sum / len as f64) as f32)),
                    AggregateFunction::Sum => worst_rel = worst_rel.max(((got[field] as f64 - sum) / sum.abs().max(1e-12)).abs()),
                }
            }
        }
    }
    check(
        worst_ulp <= 1 && exact_misses == 0 && worst_rel <= SUM_REL_TOL,
        format!("{AGG_WINDOWS} windows, {checked} field checks: mean max {worst_ulp} ULP, min/max mismatches {exact_misses}, sum max rel err {worst_rel:.2e}"),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("traffic_reduction", traffic_reduction),
        ("latency_gain", latency_gain),
        ("group_key_security", group_key_security),
        ("ddf_exactness_and_speed", ddf_exactness_and_speed),
        ("exactly_once_accounting", exactly_once),
        ("backward_compatibility", backward_compatibility),
        ("determinism", determinism),
        ("aggregation_oracle", aggregation_oracle),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
