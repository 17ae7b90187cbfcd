#![allow(dead_code)]

use fcplan::fcsim::{ChannelModel, SeedingMode, SimContext, TransferMode};
use fcplan::mobility::{detect_contacts, kmh, simulate_manhattan, Intervals, SpeedModel, TrajectorySet};
use fcplan::roadnet::{build_manhattan, RoadGrid};

/// Small populated Manhattan scenario: 60 s of warm-up dropped, then `ticks` seconds.
pub fn trajectories(grid: &RoadGrid, rate: f64, ticks: u32, seed: u64) -> TrajectorySet {
    let speed = SpeedModel::Uniform {
        low: kmh(20.0),
        high: kmh(30.0),
    };
    simulate_manhattan(grid, rate, speed, (ticks + 60) as f64, 1.0, seed)
        .unwrap()
        .window(60, ticks)
        .unwrap()
}

pub fn scenario(
    rate: f64,
    durations: &[f64],
    seed: u64,
    mode: TransferMode,
    seeding: SeedingMode,
) -> (RoadGrid, SimContext) {
    let grid = build_manhattan(4, 4, 100.0).unwrap();
    let ticks = durations.iter().sum::<f64>() as u32;
    let traj = trajectories(&grid, rate, ticks, seed);
    let contacts = detect_contacts(&traj, 100.0).unwrap();
    let channel = ChannelModel {
        mode,
        ..ChannelModel::default()
    };
    let intervals = Intervals::from_durations(durations, 1.0).unwrap();
    let links = grid.num_links();
    let ctx = SimContext::new(traj, contacts, intervals, channel, seeding, 8.0 * 1024.0 * 1024.0, links).unwrap();
    (grid, ctx)
}
