//! Node trajectories, pairwise contacts and per-link mobility features.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::roadnet::{Endpoint, Point, RoadGrid};

/// Convert km/h to m/s.
pub fn kmh(v: f64) -> f64 {
    v / 3.6
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub pos: Point,
    /// m/s
    pub speed: f64,
    pub link: usize,
}

/// Contiguous presence of one node: one sample per tick from `enter_tick`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    /// Identifier of the originating node (trace id or arrival index).
    pub node: u64,
    pub enter_tick: u32,
    pub samples: Vec<Sample>,
}

impl Track {
    pub fn exit_tick(&self) -> u32 {
        self.enter_tick + self.samples.len() as u32 - 1
    }

    pub fn at(&self, tick: u32) -> Option<&Sample> {
        tick.checked_sub(self.enter_tick)
            .and_then(|i| self.samples.get(i as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub tick_secs: f64,
    pub num_ticks: u32,
    pub tracks: Vec<Track>,
}

impl TrajectorySet {
    pub fn empty(tick_secs: f64, num_ticks: u32) -> Self {
        Self {
            tick_secs,
            num_ticks,
            tracks: Vec::new(),
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_ticks as f64 * self.tick_secs
    }

    /// Track indices present at each tick, in ascending order.
    pub fn frames(&self) -> Vec<Vec<u32>> {
        let mut frames = vec![Vec::new(); self.num_ticks as usize];
        for (i, t) in self.tracks.iter().enumerate() {
            for k in t.enter_tick..=t.exit_tick().min(self.num_ticks.saturating_sub(1)) {
                frames[k as usize].push(i as u32);
            }
        }
        frames
    }

    /// Sub-window of `len` ticks starting at `start`, re-based to tick 0.
    /// Nodes already present at `start` enter at tick 0. Used to drop a
    /// warm-up period so the grid is populated when the window opens.
    pub fn window(&self, start: u32, len: u32) -> Result<Self> {
        if start.checked_add(len).is_none_or(|end| end > self.num_ticks) {
            return Err(Error::Range(format!(
                "window [{start}, {start}+{len}) exceeds the {} recorded ticks",
                self.num_ticks
            )));
        }
        let end = start + len;
        let tracks = self
            .tracks
            .iter()
            .filter(|t| t.enter_tick < end && t.exit_tick() >= start)
            .map(|t| {
                let from = start.max(t.enter_tick);
                let to = (end - 1).min(t.exit_tick());
                Track {
                    node: t.node,
                    enter_tick: from - start,
                    samples: t.samples[(from - t.enter_tick) as usize..=(to - t.enter_tick) as usize].to_vec(),
                }
            })
            .collect();
        Ok(Self {
            tick_secs: self.tick_secs,
            num_ticks: len,
            tracks,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.tracks.iter().map(|t| t.samples.len()).sum()
    }

    pub fn stats(&self) -> TraceStats {
        let frames = self.frames();
        let occupancy: Vec<usize> = frames.iter().map(Vec::len).collect();
        let samples = self.num_samples();
        TraceStats {
            nodes: self.tracks.len(),
            ticks: self.num_ticks,
            samples,
            mean_nodes_present: if occupancy.is_empty() {
                0.0
            } else {
                samples as f64 / occupancy.len() as f64
            },
            max_nodes_present: occupancy.iter().copied().max().unwrap_or(0),
            mean_speed: if samples == 0 {
                0.0
            } else {
                self.tracks
                    .iter()
                    .flat_map(|t| t.samples.iter().map(|s| s.speed))
                    .sum::<f64>()
                    / samples as f64
            },
        }
    }

    /// Write as a trace CSV (`t,node_id,x,y,speed`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "node_id", "x", "y", "speed"])?;
        for t in &self.tracks {
            for (i, s) in t.samples.iter().enumerate() {
                let time = (t.enter_tick as usize + i) as f64 * self.tick_secs;
                w.write_record([
                    time.to_string(),
                    t.node.to_string(),
                    s.pos.x.to_string(),
                    s.pos.y.to_string(),
                    s.speed.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub nodes: usize,
    pub ticks: u32,
    pub samples: usize,
    pub mean_nodes_present: f64,
    pub max_nodes_present: usize,
    pub mean_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedModel {
    /// m/s
    Constant { speed: f64 },
    /// m/s, drawn once per node
    Uniform { low: f64, high: f64 },
}

impl SpeedModel {
    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            SpeedModel::Constant { speed } => speed,
            SpeedModel::Uniform { low, high } if high > low => rng.random_range(low..=high),
            SpeedModel::Uniform { low, .. } => low,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            SpeedModel::Constant { speed } => speed >= 0.0 && speed.is_finite(),
            SpeedModel::Uniform { low, high } => low >= 0.0 && high >= low && high.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid speed model {self:?}")))
        }
    }
}

/// One leg of a route: a link traversed from `from` to the other end.
#[derive(Debug, Clone, Copy)]
struct Leg {
    link: usize,
    from: Point,
    to: Point,
    length: f64,
}

const MAX_ROUTE_LEGS: usize = 10_000;

/// Random route from the border end of `stub`: at every intersection pick
/// uniformly among the incident links other than the one just travelled
/// (straight, left or right on a lattice); reverse only at dead ends.
fn random_route(grid: &RoadGrid, stub: usize, rng: &mut impl Rng) -> Vec<Leg> {
    let first = grid.link(stub);
    let border_end = if first.kinds[0] == Endpoint::Border { 0 } else { 1 };
    let mut legs = Vec::new();
    let mut link = stub;
    let mut from_end = border_end;
    loop {
        let l = grid.link(link);
        let to_end = 1 - from_end;
        legs.push(Leg {
            link,
            from: l.ends[from_end],
            to: l.ends[to_end],
            length: l.length,
        });
        let node = match l.kinds[to_end] {
            Endpoint::Border => break,
            Endpoint::Intersection(n) => n,
        };
        if legs.len() >= MAX_ROUTE_LEGS {
            break;
        }
        let options: Vec<usize> = grid
            .incident(node)
            .iter()
            .copied()
            .filter(|&c| c != link)
            .collect();
        link = if options.is_empty() {
            link
        } else {
            options[rng.random_range(0..options.len())]
        };
        from_end = grid.link(link).end_at(node).expect("incident link touches node");
    }
    legs
}

/// Synthetic Manhattan mobility: Poisson arrivals at every border stub,
/// constant per-node speed along link center lines, random turns.
pub fn simulate_manhattan(
    grid: &RoadGrid,
    arrival_rate: f64,
    speed_model: SpeedModel,
    duration: f64,
    tick_secs: f64,
    seed: u64,
) -> Result<TrajectorySet> {
    if !(arrival_rate >= 0.0) || !arrival_rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "arrival rate must be non-negative, got {arrival_rate}"
        )));
    }
    if !(duration > 0.0) || !(tick_secs > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "duration and tick must be positive, got {duration} s / {tick_secs} s"
        )));
    }
    speed_model.validate()?;
    let num_ticks = (duration / tick_secs).round() as u32;
    let mut set = TrajectorySet::empty(tick_secs, num_ticks);
    if arrival_rate == 0.0 {
        return Ok(set);
    }

    let exp = Exp::new(arrival_rate).expect("positive rate");
    let mut arrivals: Vec<(f64, usize)> = Vec::new();
    for stub in grid.border_stubs() {
        let mut r = rng::stream(seed, "arrivals", stub.id as u64);
        let mut t = exp.sample(&mut r);
        while t < duration {
            arrivals.push((t, stub.id));
            t += exp.sample(&mut r);
        }
    }
    arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let last_tick = num_ticks.saturating_sub(1);
    for (index, &(arrival, stub)) in arrivals.iter().enumerate() {
        let mut r = rng::stream(seed, "node", index as u64);
        let speed = speed_model.draw(&mut r);
        let legs = random_route(grid, stub, &mut r);
        let total: f64 = legs.iter().map(|l| l.length).sum();

        let enter_tick = (arrival / tick_secs).ceil() as u32;
        if enter_tick > last_tick {
            continue;
        }
        let mut samples = Vec::new();
        let mut leg = 0;
        let mut leg_start = 0.0;
        for k in enter_tick..=last_tick {
            let arc = speed * (k as f64 * tick_secs - arrival);
            if arc > total {
                break;
            }
            while leg + 1 < legs.len() && arc > leg_start + legs[leg].length {
                leg_start += legs[leg].length;
                leg += 1;
            }
            let l = &legs[leg];
            let f = ((arc - leg_start) / l.length).clamp(0.0, 1.0);
            samples.push(Sample {
                pos: l.from.lerp(&l.to, f),
                speed,
                link: l.link,
            });
        }
        if !samples.is_empty() {
            set.tracks.push(Track {
                node: index as u64,
                enter_tick,
                samples,
            });
        }
    }
    Ok(set)
}

/// Result of trace ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTraces {
    pub trajectories: TrajectorySet,
    pub rows: usize,
    /// Resampled positions farther than the snap tolerance from every link.
    pub dropped_samples: usize,
}

#[derive(Debug, Clone, Copy)]
struct RawRow {
    t: f64,
    pos: Point,
    speed: Option<f64>,
}

/// Read a trace CSV (`t,node_id,x,y[,speed]`), resample each node to the tick
/// grid by linear interpolation and assign links. Off-grid samples are dropped
/// and split the node's presence into separate tracks.
pub fn load_traces(path: &Path, grid: &RoadGrid, tick_secs: f64, snap: f64) -> Result<LoadedTraces> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let header = reader.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 4 || cols[..4] != ["t", "node_id", "x", "y"] || (cols.len() == 5 && cols[4] != "speed") || cols.len() > 5 {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `t,node_id,x,y[,speed]`, got `{}`", cols.join(",")),
        });
    }

    let mut by_node: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize, name: &str| -> Result<f64> {
            let raw = record.get(i).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field `{name}`"),
            })?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("field `{name}` is not a number: `{raw}`"),
                })
        };
        let t = field(0, "t")?;
        let node = record.get(1).unwrap_or_default().to_string();
        let pos = Point::new(field(2, "x")?, field(3, "y")?);
        let speed = if cols.len() == 5 && record.get(4).is_some_and(|s| !s.is_empty()) {
            Some(field(4, "speed")?)
        } else {
            None
        };
        let samples = by_node.entry(node.clone()).or_default();
        if samples.last().is_some_and(|last| t < last.t) {
            return Err(Error::Parse {
                line,
                message: format!("timestamps decrease for node `{node}`"),
            });
        }
        samples.push(RawRow { t, pos, speed });
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyTrace(path.to_path_buf()));
    }

    let mut tracks = Vec::new();
    let mut dropped = 0;
    let mut max_tick = 0u32;
    for (ordinal, raw) in by_node.values().enumerate() {
        let first = (raw[0].t / tick_secs).ceil().max(0.0) as u32;
        let last = (raw[raw.len() - 1].t / tick_secs + 1e-9).floor();
        if last < first as f64 {
            continue;
        }
        let last = last as u32;
        let mut resampled: Vec<(u32, Point, Option<f64>)> = Vec::new();
        let mut seg = 0;
        for k in first..=last {
            let time = k as f64 * tick_secs;
            while seg + 1 < raw.len() && raw[seg + 1].t <= time {
                seg += 1;
            }
            let (pos, speed) = if seg + 1 < raw.len() && raw[seg + 1].t > raw[seg].t {
                let (a, b) = (&raw[seg], &raw[seg + 1]);
                let f = ((time - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
                let speed = match (a.speed, b.speed) {
                    (Some(sa), Some(sb)) => Some(sa + (sb - sa) * f),
                    _ => None,
                };
                (a.pos.lerp(&b.pos, f), speed)
            } else {
                (raw[seg].pos, raw[seg].speed)
            };
            resampled.push((k, pos, speed));
        }
        let speeds: Vec<f64> = (0..resampled.len())
            .map(|i| {
                resampled[i].2.unwrap_or_else(|| {
                    if resampled.len() < 2 {
                        0.0
                    } else {
                        let j = if i + 1 < resampled.len() { i } else { i - 1 };
                        resampled[j].1.dist(&resampled[j + 1].1) / tick_secs
                    }
                })
            })
            .collect();

        let mut current: Option<Track> = None;
        for ((k, pos, _), speed) in resampled.iter().zip(speeds) {
            match grid.link_of(*pos, snap) {
                Ok(link) => {
                    let track = current.get_or_insert_with(|| Track {
                        node: ordinal as u64,
                        enter_tick: *k,
                        samples: Vec::new(),
                    });
                    track.samples.push(Sample {
                        pos: *pos,
                        speed,
                        link,
                    });
                    max_tick = max_tick.max(*k);
                }
                Err(_) => {
                    dropped += 1;
                    tracks.extend(current.take());
                }
            }
        }
        tracks.extend(current.take());
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} off-grid samples while loading {}", path.display());
    }
    let num_ticks = if tracks.is_empty() { 0 } else { max_tick + 1 };
    Ok(LoadedTraces {
        trajectories: TrajectorySet {
            tick_secs,
            num_ticks,
            tracks,
        },
        rows,
        dropped_samples: dropped,
    })
}

/// Maximal run of ticks during which two tracks are within radius.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactEvent {
    /// Track index, `a < b`.
    pub a: u32,
    pub b: u32,
    pub start: u32,
    /// Inclusive.
    pub end: u32,
    /// Distance at each tick `start..=end`, meters.
    pub distances: Vec<f64>,
}

impl ContactEvent {
    pub fn duration_ticks(&self) -> u32 {
        self.end - self.start + 1
    }

    pub fn distance_at(&self, tick: u32) -> Option<f64> {
        tick.checked_sub(self.start)
            .and_then(|i| self.distances.get(i as usize))
            .copied()
    }
}

/// Pairwise contact detection with a uniform spatial hash of cell size `r`.
pub fn detect_contacts(traj: &TrajectorySet, r: f64) -> Result<Vec<ContactEvent>> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("contact radius must be positive, got {r}")));
    }
    let frames = traj.frames();
    let mut open: BTreeMap<(u32, u32), ContactEvent> = BTreeMap::new();
    let mut done = Vec::new();
    let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
    for (k, frame) in frames.iter().enumerate() {
        let k = k as u32;
        buckets.clear();
        for &i in frame {
            let p = traj.tracks[i as usize].at(k).expect("frame consistent").pos;
            buckets
                .entry(((p.x / r).floor() as i64, (p.y / r).floor() as i64))
                .or_default()
                .push(i);
        }
        let mut pairs: Vec<(u32, u32, f64)> = Vec::new();
        for &i in frame {
            let p = traj.tracks[i as usize].at(k).unwrap().pos;
            let (cx, cy) = ((p.x / r).floor() as i64, (p.y / r).floor() as i64);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(bucket) = buckets.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j <= i {
                            continue;
                        }
                        let d = p.dist(&traj.tracks[j as usize].at(k).unwrap().pos);
                        if d <= r {
                            pairs.push((i, j, d));
                        }
                    }
                }
            }
        }
        pairs.sort_by_key(|x| (x.0, x.1));

        let mut still_open = BTreeMap::new();
        for (a, b, d) in pairs {
            let ev = match open.remove(&(a, b)) {
                Some(mut ev) => {
                    ev.end = k;
                    ev.distances.push(d);
                    ev
                }
                None => ContactEvent {
                    a,
                    b,
                    start: k,
                    end: k,
                    distances: vec![d],
                },
            };
            still_open.insert((a, b), ev);
        }
        done.extend(std::mem::replace(&mut open, still_open).into_values());
    }
    done.extend(open.into_values());
    done.sort_by_key(|e| (e.start, e.a, e.b));
    Ok(done)
}

/// Partition of the horizon into consecutive intervals, in ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervals {
    tick_secs: f64,
    lengths: Vec<u32>,
}

impl Intervals {
    /// Durations in seconds; each must be a positive whole number of ticks.
    pub fn from_durations(durations: &[f64], tick_secs: f64) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::InvalidParameter("at least one interval is required".into()));
        }
        let mut lengths = Vec::with_capacity(durations.len());
        for &d in durations {
            let ticks = d / tick_secs;
            if !(ticks >= 1.0) || (ticks - ticks.round()).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "interval of {d} s is not a positive multiple of the {tick_secs} s tick"
                )));
            }
            lengths.push(ticks.round() as u32);
        }
        Ok(Self { tick_secs, lengths })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn tick_secs(&self) -> f64 {
        self.tick_secs
    }

    pub fn ticks(&self, t: usize) -> u32 {
        self.lengths[t]
    }

    pub fn start(&self, t: usize) -> u32 {
        self.lengths[..t].iter().sum()
    }

    pub fn horizon_ticks(&self) -> u32 {
        self.lengths.iter().sum()
    }

    pub fn durations_secs(&self) -> Vec<f64> {
        self.lengths.iter().map(|&l| l as f64 * self.tick_secs).collect()
    }

    /// Interval index of every tick in the horizon.
    pub fn tick_map(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(t, &l)| std::iter::repeat_n(t, l as usize))
            .collect()
    }

    /// Intervals `from..` as a new partition.
    pub fn tail(&self, from: usize) -> Self {
        Self {
            tick_secs: self.tick_secs,
            lengths: self.lengths[from..].to_vec(),
        }
    }
}

/// Per-(link, interval) mobility features.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityFeatures {
    /// Time-averaged node count.
    pub n: Array2<f64>,
    /// Mean number of concurrent contacts of a node on the link.
    pub lambda: Array2<f64>,
    /// Mean duration of contacts started on the link, s.
    pub tau: Array2<f64>,
    /// Mean speed of samples on the link, m/s.
    pub nu: Array2<f64>,
    /// `false` where no sample fell on the link during the interval.
    pub occupied: Array2<bool>,
}

pub const MOBILITY_CHANNELS: [&str; 4] = ["n", "lambda", "tau", "nu"];

impl MobilityFeatures {
    pub fn zeros(links: usize, intervals: usize) -> Self {
        Self {
            n: Array2::zeros((links, intervals)),
            lambda: Array2::zeros((links, intervals)),
            tau: Array2::zeros((links, intervals)),
            nu: Array2::zeros((links, intervals)),
            occupied: Array2::from_elem((links, intervals), false),
        }
    }

    pub fn num_links(&self) -> usize {
        self.n.nrows()
    }

    pub fn num_intervals(&self) -> usize {
        self.n.ncols()
    }

    /// Feature channel by index in [`MOBILITY_CHANNELS`] order.
    pub fn channel(&self, c: usize) -> &Array2<f64> {
        match c {
            0 => &self.n,
            1 => &self.lambda,
            2 => &self.tau,
            3 => &self.nu,
            _ => panic!("mobility channel {c} out of range"),
        }
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut Array2<f64> {
        match c {
            0 => &mut self.n,
            1 => &mut self.lambda,
            2 => &mut self.tau,
            3 => &mut self.nu,
            _ => panic!("mobility channel {c} out of range"),
        }
    }

    /// Features restricted to intervals `from..`.
    pub fn tail(&self, from: usize) -> Self {
        let s = ndarray::s![.., from..];
        Self {
            n: self.n.slice(s).to_owned(),
            lambda: self.lambda.slice(s).to_owned(),
            tau: self.tau.slice(s).to_owned(),
            nu: self.nu.slice(s).to_owned(),
            occupied: self.occupied.slice(s).to_owned(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["link_id", "t", "n", "lambda", "tau", "nu", "occupied"])?;
        for l in 0..self.num_links() {
            for t in 0..self.num_intervals() {
                w.write_record([
                    l.to_string(),
                    t.to_string(),
                    self.n[[l, t]].to_string(),
                    self.lambda[[l, t]].to_string(),
                    self.tau[[l, t]].to_string(),
                    self.nu[[l, t]].to_string(),
                    (self.occupied[[l, t]] as u8).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Aggregate trajectories and contacts into per-link per-interval features.
///
/// A contact contributes its duration to the link of each participant at the
/// contact's first tick, in the interval containing that tick.
pub fn mobility_features(
    traj: &TrajectorySet,
    contacts: &[ContactEvent],
    grid: &RoadGrid,
    intervals: &Intervals,
) -> Result<MobilityFeatures> {
    let horizon = intervals.horizon_ticks();
    if horizon > traj.num_ticks {
        return Err(Error::Range(format!(
            "intervals cover {horizon} ticks but the trajectories only span {}",
            traj.num_ticks
        )));
    }
    let (links, nt) = (grid.num_links(), intervals.len());
    let tick_map = intervals.tick_map();

    let mut concurrent: Vec<Vec<u32>> = traj
        .tracks
        .iter()
        .map(|t| vec![0; t.samples.len()])
        .collect();
    for c in contacts {
        for k in c.start..=c.end {
            for node in [c.a, c.b] {
                let t = &traj.tracks[node as usize];
                concurrent[node as usize][(k - t.enter_tick) as usize] += 1;
            }
        }
    }

    let mut node_ticks = Array2::<f64>::zeros((links, nt));
    let mut speed_sum = Array2::<f64>::zeros((links, nt));
    let mut contact_sum = Array2::<f64>::zeros((links, nt));
    for (i, track) in traj.tracks.iter().enumerate() {
        for (j, s) in track.samples.iter().enumerate() {
            let k = track.enter_tick as usize + j;
            if k >= horizon as usize {
                break;
            }
            let t = tick_map[k];
            node_ticks[[s.link, t]] += 1.0;
            speed_sum[[s.link, t]] += s.speed;
            contact_sum[[s.link, t]] += concurrent[i][j] as f64;
        }
    }

    let mut tau_sum = Array2::<f64>::zeros((links, nt));
    let mut tau_count = Array2::<f64>::zeros((links, nt));
    for c in contacts {
        if c.start >= horizon {
            continue;
        }
        let t = tick_map[c.start as usize];
        let secs = c.duration_ticks() as f64 * traj.tick_secs;
        for node in [c.a, c.b] {
            let l = traj.tracks[node as usize].at(c.start).unwrap().link;
            tau_sum[[l, t]] += secs;
            tau_count[[l, t]] += 1.0;
        }
    }

    let mut f = MobilityFeatures::zeros(links, nt);
    for l in 0..links {
        for t in 0..nt {
            let nts = node_ticks[[l, t]];
            f.n[[l, t]] = nts / intervals.ticks(t) as f64;
            if nts > 0.0 {
                f.occupied[[l, t]] = true;
                f.nu[[l, t]] = speed_sum[[l, t]] / nts;
                f.lambda[[l, t]] = contact_sum[[l, t]] / nts;
            }
            if tau_count[[l, t]] > 0.0 {
                f.tau[[l, t]] = tau_sum[[l, t]] / tau_count[[l, t]];
            }
        }
    }
    Ok(f)
}
