mod common;

use std::sync::OnceLock;

use common::scenario;
use fcplan::fcsim::{run_fc, run_fc_observed, RunOptions, SeedingMode, SimContext, TransferMode};
use fcplan::scheme::{all_on, FcScheme};
use ndarray::Array2;
use proptest::prelude::*;

fn instantaneous_one_interval() -> &'static SimContext {
    static CTX: OnceLock<SimContext> = OnceLock::new();
    CTX.get_or_init(|| scenario(0.08, &[300.0], 11, TransferMode::Instantaneous, SeedingMode::Exact).1)
}

fn instantaneous_two_intervals() -> &'static SimContext {
    static CTX: OnceLock<SimContext> = OnceLock::new();
    CTX.get_or_init(|| scenario(0.08, &[150.0, 150.0], 12, TransferMode::Instantaneous, SeedingMode::Exact).1)
}

fn holder_history(ctx: &SimContext, scheme: &FcScheme, seed: u64) -> Vec<Vec<bool>> {
    let mut history = Vec::new();
    run_fc_observed(ctx, scheme, None, seed, RunOptions::default(), |_, h| history.push(h.to_vec())).unwrap();
    history
}

fn scheme_from(values: &[f64], links: usize, intervals: usize) -> FcScheme {
    let plane = |p: usize| Array2::from_shape_fn((links, intervals), |(l, t)| values[(p * links + l) * intervals + t]);
    FcScheme::new(plane(0), plane(1), plane(2)).unwrap()
}

fn is_superset(big: &[bool], small: &[bool]) -> bool {
    big.iter().zip(small).all(|(&b, &s)| b || !s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn larger_scheme_holds_a_superset_every_tick(
        base in prop::collection::vec(0.0f64..=1.0, 24 * 3),
        bump in prop::collection::vec(0.0f64..=1.0, 24 * 3),
        seed in 0u64..1000,
    ) {
        let ctx = instantaneous_one_interval();
        let links = ctx.num_links();
        prop_assume!(links == 24);
        let lower = scheme_from(&base, links, 1);
        let upper_vals: Vec<f64> = base.iter().zip(&bump).map(|(x, d)| (x + d * (1.0 - x)).min(1.0)).collect();
        let upper = scheme_from(&upper_vals, links, 1);
        prop_assert!(upper.dominates(&lower));
        let low = holder_history(ctx, &lower, seed);
        let high = holder_history(ctx, &upper, seed);
        for (k, (h, l)) in high.iter().zip(&low).enumerate() {
            prop_assert!(is_superset(h, l), "tick {}", k);
        }
    }

    #[test]
    fn all_on_dominates_over_two_intervals(
        vals in prop::collection::vec(0.0f64..=1.0, 24 * 3 * 2),
        seed in 0u64..1000,
    ) {
        let ctx = instantaneous_two_intervals();
        let links = ctx.num_links();
        let scheme = scheme_from(&vals, links, 2);
        let low = holder_history(ctx, &scheme, seed);
        let high = holder_history(ctx, &all_on(links, 2), seed);
        for (k, (h, l)) in high.iter().zip(&low).enumerate() {
            prop_assert!(is_superset(h, l), "tick {}", k);
        }
    }

    #[test]
    fn measured_counts_are_bounded(vals in prop::collection::vec(0.0f64..=1.0, 24 * 3 * 2), seed in 0u64..100) {
        let ctx = instantaneous_two_intervals();
        let scheme = scheme_from(&vals, ctx.num_links(), 2);
        let out = ctx.run(&scheme, None, seed).unwrap();
        let gamma = out.gamma_total();
        for ((l, t), &n) in out.n.indexed_iter() {
            prop_assert!(out.nc[[l, t]] >= 0.0 && out.nc[[l, t]] <= n + 1e-12);
            prop_assert!(gamma[[l, t]] >= 0.0 && gamma[[l, t]] <= n + 1e-12);
            prop_assert!((0.0..=1.0).contains(&out.v[[l, t]]));
        }
        prop_assert!(out.v.column(0).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn capacity_runs_are_deterministic() {
    let (_, ctx) = scenario(0.08, &[200.0, 100.0], 3, TransferMode::Capacity, SeedingMode::Exact);
    let scheme = FcScheme::uniform(ctx.num_links(), 2, 0.7, 0.8, 0.4).unwrap();
    let opts = RunOptions { record_events: true };
    let a = run_fc(&ctx, &scheme, Some(&[5]), 9, opts).unwrap();
    let b = run_fc(&ctx, &scheme, Some(&[5]), 9, opts).unwrap();
    assert_eq!(a, b);
    assert!(!a.events.is_empty());
    let c = run_fc(&ctx, &scheme, Some(&[5]), 10, opts).unwrap();
    assert_ne!(a.events, c.events);
}

/// Per-link holder counts right after the seeding step of each interval start,
/// with replication switched off so nothing else changes them in that tick.
fn counts_at_starts(ctx: &SimContext, scheme: &FcScheme) -> Vec<(Vec<usize>, Vec<usize>)> {
    let starts: Vec<u32> = (0..ctx.num_intervals()).map(|t| ctx.intervals.start(t)).collect();
    let mut out = Vec::new();
    run_fc_observed(ctx, scheme, None, 4, RunOptions::default(), |k, h| {
        if starts.contains(&k) {
            let mut present = vec![0; ctx.num_links()];
            let mut holding = vec![0; ctx.num_links()];
            for (i, track) in ctx.traj.tracks.iter().enumerate() {
                if let Some(s) = track.at(k) {
                    present[s.link] += 1;
                    holding[s.link] += h[i] as usize;
                }
            }
            out.push((present, holding));
        }
    })
    .unwrap();
    out
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[test]
fn exact_seeding_hits_the_target_count() {
    let (_, ctx) = scenario(0.1, &[100.0, 100.0], 5, TransferMode::Capacity, SeedingMode::Exact);
    let links = ctx.num_links();
    let s = Array2::from_shape_fn((links, 2), |(l, t)| [0.0, 0.25, 0.5, 0.75, 1.0, 0.3][(l + 2 * t) % 6]);
    let scheme = FcScheme::new(Array2::zeros((links, 2)), Array2::ones((links, 2)), s.clone()).unwrap();
    let counts = counts_at_starts(&ctx, &scheme);
    assert_eq!(counts.len(), 2);
    let mut checked = 0;
    for (t, (present, holding)) in counts.iter().enumerate() {
        for l in 0..links {
            assert_eq!(holding[l], round_half_up(s[[l, t]] * present[l] as f64), "link {l} interval {t}");
            checked += (present[l] > 0) as usize;
        }
    }
    assert!(checked > 10);
}

#[test]
fn floor_seeding_never_drops() {
    let (_, ctx) = scenario(0.1, &[100.0, 100.0], 6, TransferMode::Capacity, SeedingMode::Floor);
    let links = ctx.num_links();
    let s = Array2::from_shape_fn((links, 2), |(_, t)| if t == 0 { 1.0 } else { 0.2 });
    let scheme = FcScheme::new(Array2::zeros((links, 2)), Array2::ones((links, 2)), s).unwrap();
    let out = ctx.run(&scheme, None, 1).unwrap();
    assert!(out.dropped.iter().all(|&d| d == 0.0));
    let counts = counts_at_starts(&ctx, &scheme);
    let (present, holding) = &counts[1];
    for l in 0..links {
        assert!(holding[l] >= round_half_up(0.2 * present[l] as f64));
    }

    let exact = ctx.with_channel(ctx.channel, SeedingMode::Exact).unwrap();
    let out = exact.run(&scheme, None, 1).unwrap();
    assert!(out.dropped.column(1).sum() > 0.0);
}

#[test]
fn seeding_counts_match_first_interval_targets() {
    let (_, ctx) = scenario(0.1, &[120.0], 8, TransferMode::Capacity, SeedingMode::Exact);
    let links = ctx.num_links();
    let scheme = FcScheme::uniform(links, 1, 0.0, 1.0, 0.5).unwrap();
    let out = ctx.run(&scheme, None, 2).unwrap();
    let counts = counts_at_starts(&ctx, &scheme);
    for l in 0..links {
        assert_eq!(out.seeded[[l, 0]] as usize, round_half_up(0.5 * counts[0].0[l] as f64));
    }
}
