//! Strategy planning: candidate generation, surrogate filtering and ranking,
//! simulator verification with the all-on fallback, mid-period replanning,
//! and the anchor-zone and full-infrastructure comparison strategies.
//!
//! Every strategy sits behind [`StrategyPlanner`] and is picked by name from
//! [`planner`].

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{gen_random_schemes, CommFeatures, SchemeStyle};
use crate::error::{Error, Result};
use crate::fcsim::{availability_before_seeding, SimContext, SimOutcome};
use crate::learn::{predicted_alphas, SurrogateModel};
use crate::mobility::MobilityFeatures;
use crate::rng::{derive_seed, stream};
use crate::roadnet::{Point, RoadGrid};
use crate::scheme::{alphas_feasible, all_on, cost_breakdown, cost_from_features, CostBreakdown, CostWeights, FcScheme, ServiceRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerOptions {
    /// Random (mixed-style) candidates.
    pub random_candidates: usize,
    /// Relative safety margin on the predicted success ratio.
    pub margin: f64,
    pub verify_top_k: usize,
    /// Verification rounds; each round checks up to `verify_top_k` candidates.
    pub verify_rounds: usize,
    pub verify_seeds: usize,
    /// Local-search rounds around the incumbent, and candidates per round.
    pub perturb_rounds: usize,
    pub perturb_per_round: usize,
    pub perturb_sigma: f64,
    /// Anchor-zone radii (m); derived from the grid when empty.
    pub radius_sweep: Vec<f64>,
    /// Seeding ratios used inside the anchor-zone candidates.
    pub az_seeding_levels: Vec<f64>,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            random_candidates: 200,
            margin: 0.05,
            verify_top_k: 5,
            verify_rounds: 3,
            verify_seeds: 3,
            perturb_rounds: 4,
            perturb_per_round: 40,
            perturb_sigma: 0.1,
            radius_sweep: Vec::new(),
            az_seeding_levels: vec![1.0, 0.5, 0.2],
        }
    }
}

impl PlannerOptions {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.margin >= 0.0) {
            e.push(format!("planner margin must be >= 0, got {}", self.margin));
        }
        if self.verify_top_k == 0 {
            e.push("verify_top_k must be at least 1".into());
        }
        if self.verify_rounds == 0 {
            e.push("verify_rounds must be at least 1".into());
        }
        if self.verify_seeds == 0 {
            e.push("verify_seeds must be at least 1".into());
        }
        if !(self.perturb_sigma >= 0.0) {
            e.push("perturbation sigma must be >= 0".into());
        }
        if self.radius_sweep.iter().any(|r| !(*r >= 0.0)) {
            e.push("anchor-zone radii must be >= 0".into());
        }
        if self.az_seeding_levels.iter().any(|s| !(0.0..=1.0).contains(s)) {
            e.push("anchor-zone seeding levels must lie in [0, 1]".into());
        }
        e
    }

    /// The configured sweep, or half-block steps out to the grid diagonal.
    pub fn radii(&self, grid: &RoadGrid) -> Vec<f64> {
        if !self.radius_sweep.is_empty() {
            let mut r = self.radius_sweep.clone();
            r.sort_by(f64::total_cmp);
            r.dedup();
            return r;
        }
        let step = grid
            .links()
            .iter()
            .map(|l| l.length)
            .fold(f64::INFINITY, f64::min)
            / 2.0;
        let bb = grid.bbox();
        let diag = bb.width().hypot(bb.height());
        let mut r = vec![0.0];
        while *r.last().unwrap() < diag {
            r.push(r.len() as f64 * step);
        }
        r
    }
}

/// Simulator-verified performance of one scheme over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Mean cost over seeds, in bits.
    pub cost: f64,
    pub breakdown: CostBreakdown,
    /// Per-interval minimum success ratio over seeds.
    pub alpha: Vec<Option<f64>>,
    /// Per seed, per interval success ratio.
    pub alpha_runs: Vec<Vec<Option<f64>>>,
    /// Feasible under every seed.
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub strategy: String,
    #[serde(skip)]
    pub scheme: Option<FcScheme>,
    pub predicted_cost: Option<f64>,
    pub verified_cost: f64,
    pub breakdown: CostBreakdown,
    pub alpha: Vec<Option<f64>>,
    pub alpha_runs: Vec<Vec<Option<f64>>>,
    pub feasible: bool,
    pub fallback: bool,
    pub examined: usize,
    pub filtered: usize,
    pub verified: usize,
    /// Anchor-zone radius, for the anchor-zone strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// First interval covered (non-zero after a replan).
    pub from_interval: usize,
    pub duration_secs: f64,
}

impl PlanResult {
    pub fn scheme(&self) -> &FcScheme {
        self.scheme.as_ref().expect("plan results carry their scheme")
    }

    /// Writes `plan.csv` (the scheme) and `plan.json` (the summary).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.scheme().write_csv(&dir.join(format!("{stem}.csv")))?;
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

/// Everything a planner needs for one request.
pub struct PlanInput<'a> {
    pub grid: &'a RoadGrid,
    pub model: Option<&'a SurrogateModel>,
    /// Forecast mobility for the intervals being planned.
    pub forecast: &'a MobilityFeatures,
    pub request: &'a ServiceRequest,
    pub weights: &'a CostWeights,
    /// Simulation context used for verification.
    pub verifier: &'a SimContext,
    pub options: &'a PlannerOptions,
    pub seed: u64,
}

pub trait StrategyPlanner: Send + Sync {
    fn name(&self) -> &'static str;
    fn plan(&self, input: &PlanInput) -> Result<PlanResult>;
}

pub const PLANNERS: [&str; 4] = ["surrogate", "all-on", "circular-az", "full-infrastructure"];

/// Planner registry.
pub fn planner(name: &str) -> Result<Box<dyn StrategyPlanner>> {
    match name {
        "surrogate" => Ok(Box::new(SurrogatePlanner)),
        "all-on" => Ok(Box::new(AllOnPlanner)),
        "circular-az" => Ok(Box::new(CircularAzPlanner)),
        "full-infrastructure" => Ok(Box::new(FullInfrastructurePlanner)),
        other => Err(Error::Unknown {
            kind: "planner",
            name: other.to_string(),
            available: PLANNERS.join(", "),
        }),
    }
}

pub struct SurrogatePlanner;
pub struct AllOnPlanner;
pub struct CircularAzPlanner;
pub struct FullInfrastructurePlanner;

impl StrategyPlanner for SurrogatePlanner {
    fn name(&self) -> &'static str {
        "surrogate"
    }

    fn plan(&self, input: &PlanInput) -> Result<PlanResult> {
        let model = input
            .model
            .ok_or_else(|| Error::InvalidParameter("the surrogate planner needs a trained model".into()))?;
        bootstrap(model, input)
    }
}

impl StrategyPlanner for AllOnPlanner {
    fn name(&self) -> &'static str {
        "all-on"
    }

    fn plan(&self, input: &PlanInput) -> Result<PlanResult> {
        let started = Instant::now();
        let (l, t) = (input.grid.num_links(), input.request.durations.len());
        let scheme = all_on(l, t);
        let v = verify(input.verifier, &scheme, input.request, input.weights, &verify_seeds(input), None)?;
        Ok(fixed_result(self.name(), scheme, v, started))
    }
}

impl StrategyPlanner for FullInfrastructurePlanner {
    fn name(&self) -> &'static str {
        "full-infrastructure"
    }

    fn plan(&self, input: &PlanInput) -> Result<PlanResult> {
        let started = Instant::now();
        let scheme = full_infrastructure_baseline(&input.request.zoi, input.grid.num_links(), input.request.durations.len());
        let v = verify(input.verifier, &scheme, input.request, input.weights, &verify_seeds(input), None)?;
        Ok(fixed_result(self.name(), scheme, v, started))
    }
}

impl StrategyPlanner for CircularAzPlanner {
    fn name(&self) -> &'static str {
        "circular-az"
    }

    fn plan(&self, input: &PlanInput) -> Result<PlanResult> {
        let started = Instant::now();
        let az = circular_az_baseline(input, &input.options.radii(input.grid))?;
        let mut r = fixed_result(self.name(), az.scheme, az.verification, started);
        r.radius = Some(az.radius);
        r.verified = az.tried;
        Ok(r)
    }
}

fn fixed_result(name: &str, scheme: FcScheme, v: Verification, started: Instant) -> PlanResult {
    PlanResult {
        strategy: name.to_string(),
        scheme: Some(scheme),
        predicted_cost: None,
        verified_cost: v.cost,
        breakdown: v.breakdown,
        alpha: v.alpha,
        alpha_runs: v.alpha_runs,
        feasible: v.feasible,
        fallback: false,
        examined: 1,
        filtered: 1,
        verified: 1,
        radius: None,
        from_interval: 0,
        duration_secs: started.elapsed().as_secs_f64(),
    }
}

fn verify_seeds(input: &PlanInput) -> Vec<u64> {
    verification_seeds(input.seed, input.options.verify_seeds)
}

/// Simulation seeds used to verify candidates of a planner run with `seed`.
pub fn verification_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count).map(|j| derive_seed(seed, 0x7e51_0000 + j as u64)).collect()
}

/// Simulate `scheme` under every seed. With `from = Some(t0)` the scheme
/// covers the full horizon but only intervals `t0..` are scored.
pub fn verify(
    ctx: &SimContext,
    scheme: &FcScheme,
    req: &ServiceRequest,
    w: &CostWeights,
    seeds: &[u64],
    from: Option<usize>,
) -> Result<Verification> {
    let runs: Vec<Result<SimOutcome>> = seeds.par_iter().map(|&s| ctx.run(scheme, Some(&req.zoi), s)).collect();
    summarize(runs.into_iter().collect::<Result<Vec<_>>>()?, scheme, req, w, from.unwrap_or(0))
}

fn summarize(runs: Vec<SimOutcome>, scheme: &FcScheme, req: &ServiceRequest, w: &CostWeights, from: usize) -> Result<Verification> {
    let tail_w = w.tail(from);
    let tail_scheme = scheme.tail(from);
    let mut total = CostBreakdown::default();
    let mut alpha_runs = Vec::new();
    for o in &runs {
        let tail = outcome_tail(o, from);
        let c = cost_breakdown(&tail, &tail_scheme, &tail_w)?;
        total.storage += c.storage;
        total.communication += c.communication;
        total.seeding += c.seeding;
        alpha_runs.push(crate::scheme::alphas(&tail, &req.zoi));
    }
    let k = runs.len() as f64;
    let breakdown = CostBreakdown {
        storage: total.storage / k,
        communication: total.communication / k,
        seeding: total.seeding / k,
    };
    let intervals = alpha_runs.first().map_or(0, Vec::len);
    let alpha = (0..intervals)
        .map(|t| {
            alpha_runs
                .iter()
                .map(|a| a[t])
                .try_fold(f64::INFINITY, |m, a| a.map(|a| m.min(a)))
        })
        .collect();
    let feasible = alpha_runs.iter().all(|a| alphas_feasible(a, req.alpha0));
    Ok(Verification {
        cost: breakdown.total(),
        breakdown,
        alpha,
        alpha_runs,
        feasible,
    })
}

/// Outcome columns `from..`.
pub fn outcome_tail(o: &SimOutcome, from: usize) -> SimOutcome {
    if from == 0 {
        return o.clone();
    }
    SimOutcome {
        n: o.n.slice(s![.., from..]).to_owned(),
        nc: o.nc.slice(s![.., from..]).to_owned(),
        gamma: o.gamma.slice(s![.., from.., ..]).to_owned(),
        v: o.v.slice(s![.., from..]).to_owned(),
        seeded: o.seeded.slice(s![.., from..]).to_owned(),
        dropped: o.dropped.slice(s![.., from..]).to_owned(),
        alpha: o.alpha.as_ref().map(|a| a[from..].to_vec()),
        tick_secs: o.tick_secs,
        seed: o.seed,
        events: Vec::new(),
    }
}

// ---------------------------------------------------------------- baselines

fn zoi_centroid(grid: &RoadGrid, zoi: &[usize]) -> Point {
    let k = zoi.len() as f64;
    let (x, y) = zoi.iter().fold((0.0, 0.0), |(x, y), &l| {
        let m = grid.link(l).midpoint();
        (x + m.x, y + m.y)
    });
    Point::new(x / k, y / k)
}

/// Links whose midpoint lies within `radius` of the ZOI centroid; the link
/// nearest the centroid is always included.
pub fn anchor_zone_links(grid: &RoadGrid, zoi: &[usize], radius: f64) -> Vec<bool> {
    let c = zoi_centroid(grid, zoi);
    let mut inside: Vec<bool> = grid.links().iter().map(|l| l.midpoint().dist(&c) <= radius).collect();
    inside[grid.nearest_midpoint(c)] = true;
    inside
}

/// `a = b = 1` inside the anchor zone and 0 outside; `s = seeding` inside.
pub fn anchor_zone_scheme(grid: &RoadGrid, zoi: &[usize], radius: f64, intervals: usize, seeding: f64) -> FcScheme {
    let inside = anchor_zone_links(grid, zoi, radius);
    let plane = |v: f64| Array2::from_shape_fn((grid.num_links(), intervals), |(l, _)| if inside[l] { v } else { 0.0 });
    FcScheme::new(plane(1.0), plane(1.0), plane(seeding)).expect("values in range")
}

#[derive(Debug, Clone)]
pub struct AnchorZone {
    pub scheme: FcScheme,
    pub radius: f64,
    pub verification: Verification,
    /// Radii simulated.
    pub tried: usize,
}

/// Smallest radius of the sweep whose anchor zone verifies feasible; otherwise
/// the largest radius, reported infeasible.
pub fn circular_az_baseline(input: &PlanInput, radii: &[f64]) -> Result<AnchorZone> {
    if radii.is_empty() {
        return Err(Error::InvalidParameter("the anchor-zone radius sweep is empty".into()));
    }
    if input.request.zoi.is_empty() {
        return Err(Error::InvalidParameter("the zone of interest is empty".into()));
    }
    let mut sorted = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = input.request.durations.len();
    let seeds = verify_seeds(input);
    let mut last = None;
    for (i, &r) in sorted.iter().enumerate() {
        let scheme = anchor_zone_scheme(input.grid, &input.request.zoi, r, t, 1.0);
        let v = verify(input.verifier, &scheme, input.request, input.weights, &seeds, None)?;
        let done = v.feasible;
        last = Some(AnchorZone {
            scheme,
            radius: r,
            verification: v,
            tried: i + 1,
        });
        if done {
            break;
        }
    }
    Ok(last.expect("non-empty sweep"))
}

/// `a = b = 0`; `s = 1` on the ZOI links only.
pub fn full_infrastructure_baseline(zoi: &[usize], links: usize, intervals: usize) -> FcScheme {
    let mut s = Array2::zeros((links, intervals));
    for &l in zoi {
        s.row_mut(l).fill(1.0);
    }
    FcScheme::new(Array2::zeros((links, intervals)), Array2::zeros((links, intervals)), s).expect("values in range")
}

// ---------------------------------------------------------------- surrogate search

struct Scored {
    index: usize,
    scheme: FcScheme,
    predicted_cost: f64,
    /// Lowest predicted success ratio over intervals.
    predicted_alpha: f64,
    passes: bool,
}

/// Predicted cost with availability carried across intervals as predicted;
/// `v0` overrides the availability at the first interval.
fn predicted_cost(
    pred: &CommFeatures,
    forecast: &MobilityFeatures,
    scheme: &FcScheme,
    w: &CostWeights,
    v0: Option<&[f64]>,
) -> Result<f64> {
    let mut v = availability_before_seeding(&forecast.n, &pred.nc.mapv(|x| x.max(0.0)));
    v.mapv_inplace(|x| x.min(1.0));
    if let Some(v0) = v0 {
        v.column_mut(0).assign(&ndarray::ArrayView1::from(v0));
    }
    Ok(cost_from_features(&pred.nc, &pred.gamma, &v, scheme, w)?.total())
}

fn score(
    model: &SurrogateModel,
    forecast: &MobilityFeatures,
    req: &ServiceRequest,
    w: &CostWeights,
    margin: f64,
    v0: Option<&[f64]>,
    batch: Vec<(usize, FcScheme)>,
) -> Result<Vec<Scored>> {
    batch
        .into_par_iter()
        .map(|(index, scheme)| {
            let pred = model.predict(forecast, &scheme)?;
            let threshold = req.alpha0 * (1.0 + margin);
            let predicted_alpha = predicted_alphas(&pred, forecast, &req.zoi)
                .iter()
                .map(|a| a.unwrap_or(f64::NAN))
                .fold(f64::INFINITY, f64::min);
            let passes = predicted_alpha >= threshold;
            Ok(Scored {
                index,
                predicted_cost: predicted_cost(&pred, forecast, &scheme, w, v0)?,
                scheme,
                predicted_alpha,
                passes,
            })
        })
        .collect()
}

fn perturb(base: &FcScheme, sigma: f64, seed: u64, index: u64) -> FcScheme {
    let mut rng = stream(seed, "perturb", index);
    let normal = Normal::new(0.0, sigma.max(1e-300)).expect("finite sigma");
    let mut jitter = |p: &Array2<f64>| p.mapv(|x| x + normal.sample(&mut rng));
    let (a, b, s) = (jitter(&base.a), jitter(&base.b), jitter(&base.s));
    FcScheme::clamped(a, b, s).expect("same dimensions")
}

/// Candidate schemes that do not depend on the request's target.
fn initial_candidates(input: &PlanInput, model: &SurrogateModel, intervals: usize, extra: &[FcScheme]) -> Result<Vec<FcScheme>> {
    let links = input.grid.num_links();
    let mut c = vec![all_on(links, intervals)];
    c.extend(extra.iter().cloned());
    for r in input.options.radii(input.grid) {
        for &s in &input.options.az_seeding_levels {
            c.push(anchor_zone_scheme(input.grid, &input.request.zoi, r, intervals, s));
        }
    }
    if input.options.random_candidates > 0 {
        let mut random = gen_random_schemes(
            input.options.random_candidates,
            &model.header.embedding,
            intervals,
            derive_seed(input.seed, 1),
            SchemeStyle::Mixed,
        )?;
        random.truncate(input.options.random_candidates);
        c.extend(random);
    }
    Ok(c)
}

fn search(
    model: &SurrogateModel,
    input: &PlanInput,
    forecast: &MobilityFeatures,
    req: &ServiceRequest,
    w: &CostWeights,
    v0: Option<&[f64]>,
    candidates: Vec<FcScheme>,
) -> Result<Vec<Scored>> {
    let opts = input.options;
    let mut scored = score(model, forecast, req, w, opts.margin, v0, candidates.into_iter().enumerate().collect())?;
    for round in 0..opts.perturb_rounds {
        let Some(best) = scored
            .iter()
            .filter(|s| s.passes)
            .min_by(|a, b| a.predicted_cost.total_cmp(&b.predicted_cost).then(a.index.cmp(&b.index)))
        else {
            break;
        };
        let base = best.scheme.clone();
        let next = scored.len();
        let batch = (0..opts.perturb_per_round)
            .map(|j| {
                let id = (round * opts.perturb_per_round + j) as u64;
                (next + j, perturb(&base, opts.perturb_sigma, input.seed, id))
            })
            .collect();
        scored.extend(score(model, forecast, req, w, opts.margin, v0, batch)?);
    }
    Ok(scored)
}

/// Survivors ordered by predicted cost, ties by candidate index.
fn ranked(scored: &[Scored]) -> Vec<&Scored> {
    let mut r: Vec<&Scored> = scored.iter().filter(|s| s.passes).collect();
    r.sort_by(|a, b| a.predicted_cost.total_cmp(&b.predicted_cost).then(a.index.cmp(&b.index)));
    r
}

/// Plan the whole floating period.
pub fn bootstrap(model: &SurrogateModel, input: &PlanInput) -> Result<PlanResult> {
    let started = Instant::now();
    let req = input.request;
    let problems = input.options.validate();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    req.validate(input.grid.num_links())?;
    let intervals = req.durations.len();
    if input.forecast.num_intervals() != intervals || input.verifier.num_intervals() != intervals {
        return Err(Error::Shape(format!(
            "request has {intervals} intervals, forecast {} and verifier {}",
            input.forecast.num_intervals(),
            input.verifier.num_intervals()
        )));
    }
    let candidates = initial_candidates(input, model, intervals, &[])?;
    let scored = search(model, input, input.forecast, req, input.weights, None, candidates)?;
    let seeds = verify_seeds(input);
    let all_on_scheme = all_on(input.grid.num_links(), intervals);
    let check = |s: &FcScheme| verify(input.verifier, s, req, input.weights, &seeds, None);
    finish(input, started, &scored, req.alpha0, all_on_scheme, None, check, 0)
}

/// Verify survivors in predicted-cost order, `verify_top_k` per round. When
/// a whole round fails, the filter threshold rises by the largest shortfall
/// between predicted and verified success ratio seen in that round, and the
/// next round takes the cheapest unverified candidates above it, or the most
/// confident ones when none clears it. After the first success, later rounds
/// only verify candidates predicted cheaper than the best so far. The result
/// is the cheapest verified-feasible scheme among those checked, the
/// incumbent tail (when replanning) and all-on.
#[allow(clippy::too_many_arguments)]
fn finish(
    input: &PlanInput,
    started: Instant,
    scored: &[Scored],
    alpha0: f64,
    all_on_scheme: FcScheme,
    incumbent: Option<FcScheme>,
    check: impl Fn(&FcScheme) -> Result<Verification> + Sync,
    from: usize,
) -> Result<PlanResult> {
    let all_on_check = check(&all_on_scheme)?;
    let incumbent_check = incumbent.as_ref().map(&check).transpose()?;
    if !all_on_check.feasible && !incumbent_check.as_ref().is_some_and(|v| v.feasible) {
        return Err(Error::Infeasible);
    }

    let ranked = ranked(scored);
    let mut threshold = alpha0 * (1.0 + input.options.margin);
    let mut done = vec![false; ranked.len()];
    let mut verified = 1 + usize::from(incumbent.is_some());
    type Best = Option<(f64, usize, FcScheme, Verification, Option<f64>)>;
    let mut best: Best = None;
    let consider = |best: &mut Best, key: usize, scheme: &FcScheme, v: Verification, predicted: Option<f64>| {
        if v.feasible && best.as_ref().is_none_or(|b| v.cost < b.0 || (v.cost == b.0 && key < b.1)) {
            *best = Some((v.cost, key, scheme.clone(), v, predicted));
        }
    };
    let mut any_top = false;
    for round in 0..input.options.verify_rounds {
        // Once something passes, later rounds only chase predicted savings.
        let bound = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        let mut batch: Vec<usize> = (0..ranked.len())
            .filter(|&i| !done[i] && ranked[i].predicted_alpha >= threshold && ranked[i].predicted_cost < bound)
            .take(input.options.verify_top_k)
            .collect();
        if batch.is_empty() && !any_top {
            // The raised bar cleared everything: try the most confident instead.
            batch = (0..ranked.len()).filter(|&i| !done[i]).collect();
            batch.sort_by(|&x, &y| ranked[y].predicted_alpha.total_cmp(&ranked[x].predicted_alpha).then(x.cmp(&y)));
            batch.truncate(input.options.verify_top_k);
        }
        if batch.is_empty() {
            break;
        }
        let checks: Vec<Result<Verification>> = batch.par_iter().map(|&i| check(&ranked[i].scheme)).collect();
        verified += batch.len();
        let mut shortfall = 0.0f64;
        for (&i, v) in batch.iter().zip(checks) {
            let (s, v) = (ranked[i], v?);
            done[i] = true;
            let worst = v.alpha.iter().map(|a| a.unwrap_or(0.0)).fold(f64::INFINITY, f64::min);
            log::debug!(
                "round {round} candidate {}: predicted cost {:.4e} alpha {:.3}, verified cost {:.4e} alpha {worst:.3}",
                s.index,
                s.predicted_cost,
                s.predicted_alpha,
                v.cost
            );
            shortfall = shortfall.max(s.predicted_alpha - worst);
            any_top |= v.feasible;
            consider(&mut best, s.index, &s.scheme, v, Some(s.predicted_cost));
        }
        if !any_top {
            threshold += shortfall.max(0.0);
        }
    }
    let fallback = !any_top;
    if let Some(v) = incumbent_check {
        consider(&mut best, usize::MAX - 1, incumbent.as_ref().unwrap(), v, None);
    }
    consider(&mut best, usize::MAX, &all_on_scheme, all_on_check, None);
    let (_, _, scheme, v, predicted) = best.expect("a feasible anchor exists");
    Ok(PlanResult {
        strategy: "surrogate".into(),
        scheme: Some(scheme),
        predicted_cost: predicted,
        verified_cost: v.cost,
        breakdown: v.breakdown,
        alpha: v.alpha,
        alpha_runs: v.alpha_runs,
        feasible: true,
        fallback,
        examined: scored.len(),
        filtered: ranked.len(),
        verified,
        radius: None,
        from_interval: from,
        duration_secs: started.elapsed().as_secs_f64(),
    })
}

/// Replan intervals `t0..` given the outcome so far. `incumbent` is the scheme
/// in force over the full horizon; `forecast` and `input.request` cover the
/// full horizon. Verification simulates the incumbent before `t0` spliced with
/// each candidate from `t0`, and scores intervals `t0..` only.
pub fn replan(
    model: &SurrogateModel,
    input: &PlanInput,
    live: &SimOutcome,
    incumbent: &FcScheme,
    t0: usize,
) -> Result<PlanResult> {
    let started = Instant::now();
    let req = input.request;
    let total = req.durations.len();
    if t0 == 0 || t0 >= total {
        return Err(Error::Range(format!("replanning interval {t0} must lie in 1..{total}")));
    }
    if live.num_intervals() < t0 {
        return Err(Error::Range(format!(
            "the live outcome covers {} intervals, replanning from {t0} needs {t0}",
            live.num_intervals()
        )));
    }
    let links = input.grid.num_links();
    let v0: Vec<f64> = (0..links)
        .map(|l| {
            let n = live.n[[l, t0 - 1]];
            if n > 0.0 {
                live.nc[[l, t0 - 1]] / n
            } else {
                0.0
            }
        })
        .collect();
    let tail_req = ServiceRequest {
        zoi: req.zoi.clone(),
        alpha0: req.alpha0,
        durations: req.durations[t0..].to_vec(),
    };
    let tail_w = input.weights.tail(t0);
    let forecast = input.forecast.tail(t0);
    let tail_input = PlanInput {
        request: &tail_req,
        weights: &tail_w,
        forecast: &forecast,
        ..*input
    };
    let remaining = total - t0;
    let incumbent_tail = incumbent.tail(t0);
    let candidates = initial_candidates(&tail_input, model, remaining, std::slice::from_ref(&incumbent_tail))?;
    let scored = search(model, &tail_input, &forecast, &tail_req, &tail_w, Some(&v0), candidates)?;
    let seeds = verify_seeds(input);
    let check = |tail: &FcScheme| -> Result<Verification> {
        let full = incumbent.splice(t0, tail)?;
        verify(input.verifier, &full, req, input.weights, &seeds, Some(t0))
    };
    finish(&tail_input, started, &scored, req.alpha0, all_on(links, remaining), Some(incumbent_tail), check, t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::build_manhattan;

    #[test]
    fn anchor_zone_covers_grid_at_large_radius() {
        let g = build_manhattan(5, 4, 150.0).unwrap();
        let s = anchor_zone_scheme(&g, &[12], 1e6, 2, 1.0);
        assert_eq!(s, all_on(31, 2));
        let s = anchor_zone_scheme(&g, &[12], 0.0, 1, 1.0);
        assert_eq!(s.a.sum(), 1.0);
        assert_eq!(s.a[[12, 0]], 1.0);
    }

    #[test]
    fn full_infrastructure_shape() {
        let s = full_infrastructure_baseline(&[3, 4], 10, 2);
        assert_eq!(s.a.sum() + s.b.sum(), 0.0);
        assert_eq!(s.s.sum(), 4.0);
        assert_eq!(s.s[[3, 1]], 1.0);
    }

    #[test]
    fn derived_radii_reach_the_diagonal() {
        let g = build_manhattan(5, 4, 150.0).unwrap();
        let r = PlannerOptions::default().radii(&g);
        assert_eq!(r[0], 0.0);
        let bb = g.bbox();
        assert!(*r.last().unwrap() >= bb.width().hypot(bb.height()));
    }

    #[test]
    fn registry_resolves_names() {
        for name in PLANNERS {
            assert_eq!(planner(name).unwrap().name(), name);
        }
        assert!(planner("genetic").is_err());
    }

    #[test]
    fn perturbation_stays_in_range() {
        let base = all_on(5, 2);
        let p = perturb(&base, 0.5, 1, 0);
        assert!(p.a.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_ne!(p, base);
    }
}
