//! Floating-content engine: channel model, interval seeding, probabilistic
//! replication and caching over contacts, and measurement of the
//! communication features.
//!
//! Every random decision is a keyed draw (see [`crate::rng::keyed_uniform`]):
//! the number used for a given potential event depends only on the run seed,
//! the event kind, the nodes involved and the tick. Runs of different schemes
//! over the same contacts are therefore coupled event by event.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{ContactEvent, Intervals, TrajectorySet};
use crate::rng::keyed_uniform;
use crate::scheme::FcScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Transfers accumulate Shannon capacity tick by tick until the content size is reached.
    #[default]
    Capacity,
    /// Transfers complete within the tick they start in.
    Instantaneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedingMode {
    /// Availability at an interval start is set to `s`: top up and drop down.
    #[default]
    Exact,
    /// Only top up to `s`; surplus holders keep the content.
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelModel {
    pub bandwidth_hz: f64,
    /// SINR at the edge of the transmission radius, dB.
    pub edge_sinr_db: f64,
    pub path_loss_exp: f64,
    /// Transmission radius, m.
    pub radius: f64,
    pub technology: usize,
    pub mode: TransferMode,
    /// Upper bound on the SINR, dB.
    pub sinr_cap_db: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1e6,
            edge_sinr_db: 5.0,
            path_loss_exp: 3.0,
            radius: 100.0,
            technology: 0,
            mode: TransferMode::Capacity,
            sinr_cap_db: 30.0,
        }
    }
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.bandwidth_hz > 0.0) {
            errors.push(format!("bandwidth must be positive, got {}", self.bandwidth_hz));
        }
        if !(self.path_loss_exp >= 2.0) {
            errors.push(format!("path-loss exponent must be >= 2, got {}", self.path_loss_exp));
        }
        if !(self.radius > 0.0) {
            errors.push(format!("radius must be positive, got {}", self.radius));
        }
        if !self.edge_sinr_db.is_finite() {
            errors.push("edge SINR must be finite".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// SINR (linear) at distance `d`, path-loss scaled from the edge value and capped.
    pub fn sinr(&self, d: f64) -> f64 {
        let cap = db_to_linear(self.sinr_cap_db);
        if d <= 0.0 {
            return cap;
        }
        (db_to_linear(self.edge_sinr_db) * (self.radius / d).powf(self.path_loss_exp)).min(cap)
    }

    /// Shannon capacity `B log2(1 + SINR(d))` in bit/s for `0 < d <= r`.
    pub fn capacity(&self, d: f64) -> Result<f64> {
        if !(d > 0.0) {
            return Err(Error::InvalidParameter(format!("distance must be positive, got {d}")));
        }
        if d > self.radius {
            return Err(Error::Range(format!(
                "distance {d} m exceeds the transmission radius {} m",
                self.radius
            )));
        }
        Ok(self.rate(d))
    }

    /// Capacity without range checks; `d <= 0` uses the capped SINR.
    pub fn rate(&self, d: f64) -> f64 {
        self.bandwidth_hz * (1.0 + self.sinr(d)).log2()
    }
}

/// Everything a run needs besides the scheme and the seed. Built once per
/// scenario and shared read-only between concurrent runs.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub traj: TrajectorySet,
    pub contacts: Vec<ContactEvent>,
    pub intervals: Intervals,
    pub channel: ChannelModel,
    pub seeding: SeedingMode,
    pub content_bits: f64,
    num_links: usize,
    frames: Vec<Vec<u32>>,
    active_contacts: Vec<Vec<u32>>,
    tick_map: Vec<usize>,
}

impl SimContext {
    pub fn new(
        traj: TrajectorySet,
        contacts: Vec<ContactEvent>,
        intervals: Intervals,
        channel: ChannelModel,
        seeding: SeedingMode,
        content_bits: f64,
        num_links: usize,
    ) -> Result<Self> {
        channel.validate()?;
        let horizon = intervals.horizon_ticks();
        if horizon > traj.num_ticks {
            return Err(Error::Range(format!(
                "intervals cover {horizon} ticks but the trajectories only span {}",
                traj.num_ticks
            )));
        }
        if (intervals.tick_secs() - traj.tick_secs).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "interval tick {} s differs from trajectory tick {} s",
                intervals.tick_secs(),
                traj.tick_secs
            )));
        }
        if !(content_bits > 0.0) {
            return Err(Error::InvalidParameter("content size must be positive".into()));
        }
        if let Some(bad) = traj
            .tracks
            .iter()
            .flat_map(|t| t.samples.iter())
            .find(|s| s.link >= num_links)
        {
            return Err(Error::Shape(format!(
                "trajectory references link {} but the grid has {num_links}",
                bad.link
            )));
        }
        let frames = traj.frames();
        let mut active_contacts = vec![Vec::new(); traj.num_ticks as usize];
        for (ci, c) in contacts.iter().enumerate() {
            for k in c.start..=c.end.min(traj.num_ticks.saturating_sub(1)) {
                active_contacts[k as usize].push(ci as u32);
            }
        }
        let tick_map = intervals.tick_map();
        Ok(Self {
            traj,
            contacts,
            intervals,
            channel,
            seeding,
            content_bits,
            num_links,
            frames,
            active_contacts,
            tick_map,
        })
    }

    pub fn num_links(&self) -> usize {
        self.num_links
    }

    pub fn num_intervals(&self) -> usize {
        self.intervals.len()
    }

    /// Same trajectories and contacts with a different channel or seeding mode.
    pub fn with_channel(&self, channel: ChannelModel, seeding: SeedingMode) -> Result<Self> {
        channel.validate()?;
        Ok(Self {
            channel,
            seeding,
            ..self.clone()
        })
    }

    pub fn run(&self, scheme: &FcScheme, zoi: Option<&[usize]>, seed: u64) -> Result<SimOutcome> {
        run_fc(self, scheme, zoi, seed, RunOptions::default())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_events: bool,
}

/// One transfer attempt, recorded when [`RunOptions::record_events`] is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub sender: u32,
    pub receiver: u32,
    pub start_tick: u32,
    pub end_tick: u32,
    pub completed: bool,
    pub kept: bool,
}

/// Measured per-(link, interval) quantities of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    /// Time-averaged node count.
    pub n: Array2<f64>,
    /// Time-averaged count of nodes holding the content.
    pub nc: Array2<f64>,
    /// Time-averaged count of transmitting nodes, per technology.
    pub gamma: Array3<f64>,
    /// Availability at the interval start before seeding.
    pub v: Array2<f64>,
    /// Nodes given the content by the infrastructure at the interval start.
    pub seeded: Array2<f64>,
    /// Holders told to drop the content at the interval start.
    pub dropped: Array2<f64>,
    /// Success ratio per interval over the run's zone of interest, if one was given.
    pub alpha: Option<Vec<Option<f64>>>,
    pub tick_secs: f64,
    pub seed: u64,
    pub events: Vec<TransferEvent>,
}

impl SimOutcome {
    pub fn num_links(&self) -> usize {
        self.n.nrows()
    }

    pub fn num_intervals(&self) -> usize {
        self.n.ncols()
    }

    /// Total transmitting count over technologies.
    pub fn gamma_total(&self) -> Array2<f64> {
        self.gamma.sum_axis(ndarray::Axis(2))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["link_id", "t", "n", "n_c", "gamma", "v", "seeded", "dropped"])?;
        let gamma = self.gamma_total();
        for ((l, t), n) in self.n.indexed_iter() {
            w.write_record([
                l.to_string(),
                t.to_string(),
                n.to_string(),
                self.nc[[l, t]].to_string(),
                gamma[[l, t]].to_string(),
                self.v[[l, t]].to_string(),
                self.seeded[[l, t]].to_string(),
                self.dropped[[l, t]].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_alpha_csv(&self, path: &Path, alphas: &[Option<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "alpha"])?;
        for (t, a) in alphas.iter().enumerate() {
            w.write_record([t.to_string(), a.map_or_else(|| "nan".to_string(), |a| a.to_string())])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fraction of nodes holding the content over `zoi` during interval `t`.
pub fn success_ratio(outcome: &SimOutcome, zoi: &[usize], t: usize) -> Result<f64> {
    let (mut holders, mut nodes) = (0.0, 0.0);
    for &l in zoi {
        holders += outcome.nc[[l, t]];
        nodes += outcome.n[[l, t]];
    }
    if nodes > 0.0 {
        Ok(holders / nodes)
    } else {
        Err(Error::UndefinedRatio { interval: t })
    }
}

// Event kinds for keyed draws.
const ENTRY: u64 = 1;
const SEED: u64 = 2;
const REPLICATE: u64 = 3;
const KEEP: u64 = 4;
const PARTNER: u64 = 5;

#[derive(Debug, Clone, Copy)]
struct Transfer {
    contact: u32,
    sender: u32,
    receiver: u32,
    start: u32,
    bits: f64,
}

/// Run `scheme` over the scenario and measure the communication features.
pub fn run_fc(
    ctx: &SimContext,
    scheme: &FcScheme,
    zoi: Option<&[usize]>,
    seed: u64,
    opts: RunOptions,
) -> Result<SimOutcome> {
    run_fc_observed(ctx, scheme, zoi, seed, opts, |_, _| {})
}

/// [`run_fc`] calling `observe(tick, holders)` after every tick, where
/// `holders[i]` tells whether track `i` holds the content.
pub fn run_fc_observed(
    ctx: &SimContext,
    scheme: &FcScheme,
    zoi: Option<&[usize]>,
    seed: u64,
    opts: RunOptions,
    mut observe: impl FnMut(u32, &[bool]),
) -> Result<SimOutcome> {
    let (links, nt) = (ctx.num_links, ctx.intervals.len());
    if scheme.dim() != (links, nt) {
        return Err(Error::Shape(format!(
            "scheme is {:?} but the scenario has {links} links and {nt} intervals",
            scheme.dim()
        )));
    }
    if let Some(z) = zoi {
        if let Some(l) = z.iter().find(|&&l| l >= links) {
            return Err(Error::Shape(format!("zone of interest link {l} is out of range")));
        }
    }

    let traj = &ctx.traj;
    let dt = traj.tick_secs;
    let nodes = traj.tracks.len();
    let instantaneous = ctx.channel.mode == TransferMode::Instantaneous;

    let mut holder = vec![false; nodes];
    let mut busy = vec![false; nodes];
    let mut transmitting = vec![false; nodes];
    let mut transfers: Vec<Transfer> = Vec::new();
    let mut events = Vec::new();

    let mut n_ticks = Array2::<f64>::zeros((links, nt));
    let mut nc_ticks = Array2::<f64>::zeros((links, nt));
    let mut gamma_ticks = Array2::<f64>::zeros((links, nt));
    let mut seeded = Array2::<f64>::zeros((links, nt));
    let mut dropped = Array2::<f64>::zeros((links, nt));

    let link_at = |i: u32, k: u32| traj.tracks[i as usize].at(k).expect("node present").link;
    let mut holders_count: i64 = 0;

    for k in 0..ctx.intervals.horizon_ticks() {
        let t = ctx.tick_map[k as usize];
        let frame = &ctx.frames[k as usize];
        let mut gained: i64 = 0;
        let mut lost: i64 = 0;
        transmitting.iter_mut().for_each(|x| *x = false);

        // Departures and link changes.
        if k > 0 {
            for &i in &ctx.frames[k as usize - 1] {
                let track = &traj.tracks[i as usize];
                if track.exit_tick() == k - 1 {
                    if holder[i as usize] {
                        holder[i as usize] = false;
                        lost += 1;
                    }
                    abort_involving(&mut transfers, &mut busy, &mut events, i, k, opts);
                }
            }
        }
        for &i in frame {
            let track = &traj.tracks[i as usize];
            if track.enter_tick == k || !holder[i as usize] {
                continue;
            }
            let (prev, cur) = (link_at(i, k - 1), link_at(i, k));
            if prev != cur && keyed_uniform(&[seed, ENTRY, i as u64, k as u64]) >= scheme.b[[cur, t]] {
                holder[i as usize] = false;
                lost += 1;
                abort_involving(&mut transfers, &mut busy, &mut events, i, k, opts);
            }
        }

        // Seeding at interval starts.
        if k == ctx.intervals.start(t) {
            let mut on_link: Vec<Vec<u32>> = vec![Vec::new(); links];
            for &i in frame {
                on_link[link_at(i, k)].push(i);
            }
            for (l, members) in on_link.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let target = (scheme.s[[l, t]] * members.len() as f64 + 0.5).floor() as usize;
                let key = |i: u32| keyed_uniform(&[seed, SEED, i as u64, t as u64]);
                let (mut have, mut lack): (Vec<u32>, Vec<u32>) =
                    members.iter().partition(|&&i| holder[i as usize]);
                if have.len() < target {
                    lack.sort_by(|&x, &y| key(x).total_cmp(&key(y)).then(x.cmp(&y)));
                    for &i in &lack[..target - have.len()] {
                        holder[i as usize] = true;
                        seeded[[l, t]] += 1.0;
                        gained += 1;
                        abort_involving(&mut transfers, &mut busy, &mut events, i, k, opts);
                    }
                } else if have.len() > target && ctx.seeding == SeedingMode::Exact {
                    have.sort_by(|&x, &y| key(y).total_cmp(&key(x)).then(x.cmp(&y)));
                    for &i in &have[..have.len() - target] {
                        holder[i as usize] = false;
                        dropped[[l, t]] += 1.0;
                        lost += 1;
                        abort_involving(&mut transfers, &mut busy, &mut events, i, k, opts);
                    }
                }
            }
        }

        let keep = |sender: u32, receiver: u32| {
            let (x, y) = (sender.min(receiver), sender.max(receiver));
            keyed_uniform(&[seed, KEEP, x as u64, y as u64, k as u64])
                < scheme.b[[link_at(receiver, k), t]]
        };

        if instantaneous {
            // Senders are the holders at this point; receptions take effect
            // after all contacts are processed.
            let mut received = Vec::new();
            for &ci in &ctx.active_contacts[k as usize] {
                let c = &ctx.contacts[ci as usize];
                let (sender, receiver) = match (holder[c.a as usize], holder[c.b as usize]) {
                    (true, false) => (c.a, c.b),
                    (false, true) => (c.b, c.a),
                    _ => continue,
                };
                let draw = keyed_uniform(&[seed, REPLICATE, c.a as u64, c.b as u64, k as u64]);
                if draw >= scheme.a[[link_at(sender, k), t]] {
                    continue;
                }
                transmitting[sender as usize] = true;
                let kept = keep(sender, receiver);
                if kept {
                    received.push(receiver);
                }
                if opts.record_events {
                    events.push(TransferEvent {
                        sender,
                        receiver,
                        start_tick: k,
                        end_tick: k,
                        completed: true,
                        kept,
                    });
                }
            }
            for r in received {
                if !holder[r as usize] {
                    holder[r as usize] = true;
                    gained += 1;
                }
            }
        } else {
            let content = ctx.content_bits;
            let mut engaged = vec![false; nodes];
            let mut still = Vec::with_capacity(transfers.len());
            for mut tr in std::mem::take(&mut transfers) {
                let c = &ctx.contacts[tr.contact as usize];
                busy[tr.sender as usize] = false;
                busy[tr.receiver as usize] = false;
                if k > c.end {
                    record(&mut events, opts, &tr, k, false, false);
                    continue;
                }
                engaged[tr.sender as usize] = true;
                engaged[tr.receiver as usize] = true;
                transmitting[tr.sender as usize] = true;
                tr.bits += ctx.channel.rate(c.distance_at(k).unwrap()) * dt;
                if tr.bits >= content {
                    let kept = keep(tr.sender, tr.receiver);
                    if kept {
                        holder[tr.receiver as usize] = true;
                        gained += 1;
                    }
                    record(&mut events, opts, &tr, k, true, kept);
                } else {
                    busy[tr.sender as usize] = true;
                    busy[tr.receiver as usize] = true;
                    still.push(tr);
                }
            }
            transfers = still;

            // Successful replication draws, grouped by sender.
            let idle = |i: u32| !busy[i as usize] && !engaged[i as usize];
            let mut offers: Vec<(u32, u32, u32)> = Vec::new();
            for &ci in &ctx.active_contacts[k as usize] {
                let c = &ctx.contacts[ci as usize];
                if !idle(c.a) || !idle(c.b) {
                    continue;
                }
                let (sender, receiver) = match (holder[c.a as usize], holder[c.b as usize]) {
                    (true, false) => (c.a, c.b),
                    (false, true) => (c.b, c.a),
                    _ => continue,
                };
                let draw = keyed_uniform(&[seed, REPLICATE, c.a as u64, c.b as u64, k as u64]);
                if draw < scheme.a[[link_at(sender, k), t]] {
                    offers.push((sender, receiver, ci));
                }
            }
            offers.sort_unstable();
            for group in offers.chunk_by(|x, y| x.0 == y.0) {
                let sender = group[0].0;
                let ready: Vec<&(u32, u32, u32)> =
                    group.iter().filter(|o| !engaged[o.1 as usize]).collect();
                if ready.is_empty() {
                    continue;
                }
                let u = keyed_uniform(&[seed, PARTNER, sender as u64, k as u64]);
                let &(_, receiver, ci) = ready[((u * ready.len() as f64) as usize).min(ready.len() - 1)];
                engaged[sender as usize] = true;
                engaged[receiver as usize] = true;
                transmitting[sender as usize] = true;
                let c = &ctx.contacts[ci as usize];
                let tr = Transfer {
                    contact: ci,
                    sender,
                    receiver,
                    start: k,
                    bits: ctx.channel.rate(c.distance_at(k).unwrap()) * dt,
                };
                if tr.bits >= content {
                    let kept = keep(sender, receiver);
                    if kept {
                        holder[receiver as usize] = true;
                        gained += 1;
                    }
                    record(&mut events, opts, &tr, k, true, kept);
                } else {
                    busy[sender as usize] = true;
                    busy[receiver as usize] = true;
                    transfers.push(tr);
                }
            }
        }

        // Measurement.
        for &i in frame {
            let l = link_at(i, k);
            n_ticks[[l, t]] += 1.0;
            if holder[i as usize] {
                nc_ticks[[l, t]] += 1.0;
            }
            if transmitting[i as usize] {
                gamma_ticks[[l, t]] += 1.0;
            }
        }
        holders_count += gained - lost;
        debug_assert_eq!(
            holders_count,
            frame.iter().filter(|&&i| holder[i as usize]).count() as i64,
            "content ledger out of balance at tick {k}"
        );
        observe(k, &holder);
    }

    let mut n = n_ticks;
    let mut nc = nc_ticks;
    let mut gamma2 = gamma_ticks;
    for t in 0..nt {
        let ticks = ctx.intervals.ticks(t) as f64;
        n.column_mut(t).mapv_inplace(|x| x / ticks);
        nc.column_mut(t).mapv_inplace(|x| x / ticks);
        gamma2.column_mut(t).mapv_inplace(|x| x / ticks);
    }
    let v = availability_before_seeding(&n, &nc);
    let gamma = gamma2
        .into_shape_with_order((links, nt, 1))
        .expect("same element count");
    let mut outcome = SimOutcome {
        n,
        nc,
        gamma,
        v,
        seeded,
        dropped,
        alpha: None,
        tick_secs: dt,
        seed,
        events,
    };
    if let Some(z) = zoi {
        outcome.alpha = Some((0..nt).map(|t| success_ratio(&outcome, z, t).ok()).collect());
    }
    Ok(outcome)
}

fn record(events: &mut Vec<TransferEvent>, opts: RunOptions, tr: &Transfer, k: u32, completed: bool, kept: bool) {
    if opts.record_events {
        events.push(TransferEvent {
            sender: tr.sender,
            receiver: tr.receiver,
            start_tick: tr.start,
            end_tick: k,
            completed,
            kept,
        });
    }
}

/// `v_{l,1} = 0`, `v_{l,t} = nc_{l,t-1} / n_{l,t-1}` (0 for an empty link).
pub fn availability_before_seeding(n: &Array2<f64>, nc: &Array2<f64>) -> Array2<f64> {
    let mut v = Array2::zeros(n.dim());
    for t in 1..n.ncols() {
        for l in 0..n.nrows() {
            let prev = n[[l, t - 1]];
            v[[l, t]] = if prev > 0.0 { nc[[l, t - 1]] / prev } else { 0.0 };
        }
    }
    v
}

fn abort_involving(
    transfers: &mut Vec<Transfer>,
    busy: &mut [bool],
    events: &mut Vec<TransferEvent>,
    node: u32,
    k: u32,
    opts: RunOptions,
) {
    transfers.retain(|tr| {
        if tr.sender == node || tr.receiver == node {
            busy[tr.sender as usize] = false;
            busy[tr.receiver as usize] = false;
            record(events, opts, tr, k, false, false);
            false
        } else {
            true
        }
    });
}
