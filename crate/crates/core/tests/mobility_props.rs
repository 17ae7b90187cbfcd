mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use fcplan::mobility::*;
use fcplan::roadnet::{build_manhattan, Point, DEFAULT_SNAP};
use fcplan::Error;
use proptest::prelude::*;

fn write_trace(body: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(body.as_bytes()).unwrap();
    f
}

#[test]
fn stationary_node_gives_one_sample_per_second() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let mid = g.link(4).midpoint();
    let mut body = String::from("t,node_id,x,y\n");
    for t in 0..10 {
        body += &format!("{t},car,{},{}\n", mid.x, mid.y);
    }
    let f = write_trace(&body);
    let loaded = load_traces(f.path(), &g, 1.0, DEFAULT_SNAP).unwrap();
    let tracks = &loaded.trajectories.tracks;
    assert_eq!(tracks.len(), 1);
    assert_eq!(tracks[0].samples.len(), 10);
    assert!(tracks[0].samples.iter().all(|s| s.link == 4 && s.speed == 0.0));
    assert_eq!(loaded.dropped_samples, 0);
}

#[test]
fn gaps_are_linearly_interpolated() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let l = g.link(4);
    let (p, q) = (l.ends[0], l.ends[1]);
    let f = write_trace(&format!("t,node_id,x,y,speed\n0,a,{},{},5\n2,a,{},{},7\n", p.x, p.y, q.x, q.y));
    let loaded = load_traces(f.path(), &g, 1.0, DEFAULT_SNAP).unwrap();
    let s = &loaded.trajectories.tracks[0].samples;
    assert_eq!(s.len(), 3);
    let mid = p.lerp(&q, 0.5);
    assert!(s[1].pos.dist(&mid) < 1e-12);
    assert!((s[1].speed - 6.0).abs() < 1e-12);
}

#[test]
fn malformed_row_names_its_line() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let f = write_trace("t,node_id,x,y\n0,a,10,0\n1,a,oops,0\n");
    match load_traces(f.path(), &g, 1.0, DEFAULT_SNAP) {
        Err(Error::Parse { line, message }) => {
            assert_eq!(line, 3);
            assert!(message.contains("oops"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn empty_trace_is_an_error() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let f = write_trace("t,node_id,x,y\n");
    assert!(matches!(load_traces(f.path(), &g, 1.0, DEFAULT_SNAP), Err(Error::EmptyTrace(_))));
}

#[test]
fn off_grid_samples_are_dropped_and_counted() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let mid = g.link(4).midpoint();
    let f = write_trace(&format!(
        "t,node_id,x,y\n0,a,{},{}\n1,a,{},{}\n2,a,{},{}\n",
        mid.x, mid.y, mid.x + 40.0, mid.y + 40.0, mid.x, mid.y
    ));
    let loaded = load_traces(f.path(), &g, 1.0, DEFAULT_SNAP).unwrap();
    assert_eq!(loaded.dropped_samples, 1);
    assert_eq!(loaded.trajectories.num_samples(), 2);
}

#[test]
fn poisson_arrivals_per_stub() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let (rate, duration, seeds) = (0.05, 1000.0, 50u64);
    let stubs: Vec<usize> = g.border_stubs().map(|l| l.id).collect();
    let mut total = 0usize;
    for seed in 0..seeds {
        let traj = simulate_manhattan(&g, rate, SpeedModel::Constant { speed: kmh(30.0) }, duration, 1.0, seed).unwrap();
        // A node enters on the stub it arrived on.
        total += traj.tracks.iter().filter(|t| stubs.contains(&t.samples[0].link)).count();
    }
    let mean = rate * duration;
    let per_stub = total as f64 / (seeds as f64 * stubs.len() as f64);
    let sigma = (mean / (seeds as f64 * stubs.len() as f64)).sqrt();
    assert!((per_stub - mean).abs() < 3.0 * sigma, "mean {per_stub} vs {mean} (sigma {sigma})");
}

#[test]
fn uniform_speeds_stay_in_range() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let model = SpeedModel::Uniform { low: kmh(20.0), high: kmh(30.0) };
    let traj = simulate_manhattan(&g, 0.05, model, 600.0, 1.0, 3).unwrap();
    assert!(!traj.tracks.is_empty());
    for s in traj.tracks.iter().flat_map(|t| &t.samples) {
        assert!((5.555..=8.334).contains(&s.speed), "{}", s.speed);
    }
}

#[test]
fn synthetic_steps_match_speed() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let traj = simulate_manhattan(&g, 0.05, SpeedModel::Constant { speed: kmh(30.0) }, 600.0, 1.0, 4).unwrap();
    for t in &traj.tracks {
        for w in t.samples.windows(2) {
            let step = w[0].pos.dist(&w[1].pos);
            // Turning corners shortens the straight-line step, never lengthens it.
            assert!(step <= w[0].speed * 1.01 + 1e-9);
        }
    }
}

#[test]
fn head_on_pass_lasts_about_twelve_seconds() {
    let v = kmh(30.0);
    let make = |node: u64, x0: f64, dir: f64| Track {
        node,
        enter_tick: 0,
        samples: (0..60)
            .map(|k| Sample {
                pos: Point::new(x0 + dir * v * k as f64, 0.0),
                speed: v,
                link: 0,
            })
            .collect(),
    };
    let traj = TrajectorySet {
        tick_secs: 1.0,
        num_ticks: 60,
        tracks: vec![make(0, 0.0, 1.0), make(1, 500.0, -1.0)],
    };
    let contacts = detect_contacts(&traj, 100.0).unwrap();
    assert_eq!(contacts.len(), 1);
    let secs = contacts[0].duration_ticks() as f64;
    assert!((secs - 200.0 / (2.0 * v)).abs() <= 1.0, "{secs}");
}

/// Pairwise distance runs, computed from raw samples without the spatial hash.
fn brute_contacts(traj: &TrajectorySet, r: f64) -> BTreeMap<(u32, u32), Vec<(u32, u32)>> {
    let mut runs: BTreeMap<(u32, u32), Vec<(u32, u32)>> = BTreeMap::new();
    for i in 0..traj.tracks.len() {
        for j in i + 1..traj.tracks.len() {
            let mut open: Option<u32> = None;
            for k in 0..=traj.num_ticks {
                let close = match (traj.tracks[i].at(k), traj.tracks[j].at(k)) {
                    (Some(a), Some(b)) if k < traj.num_ticks => a.pos.dist(&b.pos) <= r,
                    _ => false,
                };
                match (close, open) {
                    (true, None) => open = Some(k),
                    (false, Some(s)) => {
                        runs.entry((i as u32, j as u32)).or_default().push((s, k - 1));
                        open = None;
                    }
                    _ => {}
                }
            }
        }
    }
    runs
}

#[test]
fn contacts_match_brute_force() {
    let g = build_manhattan(4, 4, 100.0).unwrap();
    let traj = common::trajectories(&g, 0.06, 400, 21);
    let contacts = detect_contacts(&traj, 100.0).unwrap();
    let mut found: BTreeMap<(u32, u32), Vec<(u32, u32)>> = BTreeMap::new();
    for c in &contacts {
        assert!(c.a < c.b);
        assert!(c.distances.iter().all(|&d| d <= 100.0));
        found.entry((c.a, c.b)).or_default().push((c.start, c.end));
    }
    found.values_mut().for_each(|v| v.sort());
    assert_eq!(found, brute_contacts(&traj, 100.0));
}

#[test]
fn features_match_single_pass_oracle() {
    let g = build_manhattan(4, 4, 100.0).unwrap();
    let traj = common::trajectories(&g, 0.06, 400, 22);
    let r = 100.0;
    let contacts = detect_contacts(&traj, r).unwrap();
    let intervals = Intervals::from_durations(&[150.0, 250.0], 1.0).unwrap();
    let f = mobility_features(&traj, &contacts, &g, &intervals).unwrap();

    let links = g.num_links();
    let interval_of = |k: u32| if k < 150 { 0 } else { 1 };
    let mut samples = vec![[0.0f64; 2]; links];
    let mut speed = vec![[0.0f64; 2]; links];
    let mut neighbours = vec![[0.0f64; 2]; links];
    for k in 0..traj.num_ticks {
        let present: Vec<_> = traj.tracks.iter().filter_map(|t| t.at(k)).collect();
        for s in &present {
            let t = interval_of(k);
            samples[s.link][t] += 1.0;
            speed[s.link][t] += s.speed;
            neighbours[s.link][t] += present.iter().filter(|o| o.pos.dist(&s.pos) <= r).count() as f64 - 1.0;
        }
    }
    let mut tau = vec![[(0.0f64, 0.0f64); 2]; links];
    for ((i, j), runs) in brute_contacts(&traj, r) {
        for (start, end) in runs {
            for node in [i, j] {
                let l = traj.tracks[node as usize].at(start).unwrap().link;
                let cell = &mut tau[l][interval_of(start)];
                cell.0 += (end - start + 1) as f64;
                cell.1 += 1.0;
            }
        }
    }
    let ticks = [150.0, 250.0];
    for l in 0..links {
        for t in 0..2 {
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
            assert!(close(f.n[[l, t]], samples[l][t] / ticks[t]));
            let denom = samples[l][t].max(1.0);
            assert!(close(f.nu[[l, t]], speed[l][t] / denom));
            assert!(close(f.lambda[[l, t]], neighbours[l][t] / denom));
            let (ts, tc) = tau[l][t];
            assert!(close(f.tau[[l, t]], if tc > 0.0 { ts / tc } else { 0.0 }));
            assert_eq!(f.occupied[[l, t]], samples[l][t] > 0.0);
        }
    }
}

#[test]
fn parked_pair_features() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let mid = g.link(2).midpoint();
    let parked = |node| Track {
        node,
        enter_tick: 0,
        samples: vec![Sample { pos: mid, speed: 0.0, link: 2 }; 100],
    };
    let traj = TrajectorySet { tick_secs: 1.0, num_ticks: 100, tracks: vec![parked(0), parked(1)] };
    let contacts = detect_contacts(&traj, 100.0).unwrap();
    let f = mobility_features(&traj, &contacts, &g, &Intervals::from_durations(&[100.0], 1.0).unwrap()).unwrap();
    assert_eq!(f.n[[2, 0]], 2.0);
    assert_eq!(f.lambda[[2, 0]], 1.0);
    assert_eq!(f.tau[[2, 0]], 100.0);
    assert_eq!(f.nu[[2, 0]], 0.0);
}

#[test]
fn intervals_longer_than_trace_are_rejected() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let traj = TrajectorySet::empty(1.0, 50);
    let iv = Intervals::from_durations(&[60.0], 1.0).unwrap();
    assert!(matches!(mobility_features(&traj, &[], &g, &iv), Err(Error::Range(_))));
}

#[test]
fn window_keeps_nodes_present_at_its_start() {
    let g = build_manhattan(5, 4, 150.0).unwrap();
    let full = simulate_manhattan(&g, 0.05, SpeedModel::Constant { speed: kmh(30.0) }, 500.0, 1.0, 9).unwrap();
    let w = full.window(200, 300).unwrap();
    assert_eq!(w.num_ticks, 300);
    let full_frames = full.frames();
    let frames = w.frames();
    for k in 0..300 {
        assert_eq!(frames[k].len(), full_frames[k + 200].len());
    }
    assert!(!frames[0].is_empty());
    assert!(full.window(400, 200).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_is_deterministic_and_conserves_nodes(seed in 0u64..10_000, rate in 0.01f64..0.08) {
        let g = build_manhattan(4, 5, 120.0).unwrap();
        let speed = SpeedModel::Uniform { low: kmh(20.0), high: kmh(30.0) };
        let a = simulate_manhattan(&g, rate, speed, 300.0, 1.0, seed).unwrap();
        let b = simulate_manhattan(&g, rate, speed, 300.0, 1.0, seed).unwrap();
        prop_assert_eq!(&a, &b);

        let contacts = detect_contacts(&a, 80.0).unwrap();
        let mut seen = BTreeSet::new();
        let mut last_end: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for c in &contacts {
            prop_assert!(c.a < c.b);
            prop_assert!(seen.insert((c.a, c.b, c.start)));
            if let Some(&end) = last_end.get(&(c.a, c.b)) {
                prop_assert!(c.start > end + 1, "overlapping or adjacent events for one pair");
            }
            last_end.insert((c.a, c.b), c.end);
        }

        let iv = Intervals::from_durations(&[100.0, 200.0], 1.0).unwrap();
        let f = mobility_features(&a, &contacts, &g, &iv).unwrap();
        let frames = a.frames();
        let counted: f64 = (0..2).map(|t| f.n.column(t).sum() * iv.ticks(t) as f64).sum();
        let present: usize = frames.iter().map(Vec::len).sum();
        prop_assert!((counted - present as f64).abs() < 1e-6);
        prop_assert!(f.n.iter().chain(f.lambda.iter()).chain(f.tau.iter()).chain(f.nu.iter()).all(|&x| x >= 0.0));
    }
}
