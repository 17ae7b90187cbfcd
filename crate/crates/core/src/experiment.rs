//! Configurable, reproducible experiment runs.
//!
//! A run directory is filled stage by stage (`grid`, `mobility`, `features`,
//! `dataset`, `train`, `bootstrap`, `evaluate`, `report`). Each stage checks
//! that the artifacts it consumes exist, and every stage refreshes
//! `manifest.json` with the config hash, the seeds and a digest of every
//! deterministic artifact. Wall-clock timings go to `timings.json` so that
//! the manifest itself stays reproducible.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{build_dataset, gen_random_schemes, Dataset, ScenarioInfo, SchemeStyle, TrainingPair};
use crate::error::{Error, Result};
use crate::fcsim::{ChannelModel, SeedingMode, SimContext};
use crate::learn::{classifier, f_score, pair_feasible, pair_row, predicted_alphas, train_surrogate, BaselineConfig, SurrogateModel, TrainConfig, CLASSIFIERS};
use crate::mobility::{detect_contacts, kmh, load_traces, mobility_features, simulate_manhattan, Intervals, MobilityFeatures, SpeedModel, TraceStats};
use crate::plan::{planner, verify, PlanInput, PlannerOptions, PLANNERS};
use crate::rng::{derive_seed, stream};
use crate::roadnet::{build_manhattan, Point, RoadGrid, DEFAULT_SNAP};
use crate::scheme::{CostWeights, FcScheme, ServiceRequest, DEFAULT_ALPHA0, DEFAULT_CONTENT_BITS};

// ---------------------------------------------------------------- configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    Manhattan { rows: usize, cols: usize, block_side: f64 },
    File { path: PathBuf },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Manhattan {
            rows: 5,
            cols: 4,
            block_side: 150.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MobilitySpec {
    Synthetic {
        /// Nodes/s per border stub.
        arrival_rate: f64,
        speed: SpeedModel,
        /// Simulated before the floating period starts so the grid is populated.
        #[serde(default = "default_warmup")]
        warmup_secs: f64,
    },
    Traces {
        path: PathBuf,
        #[serde(default = "default_snap")]
        snap: f64,
    },
}

fn default_warmup() -> f64 {
    300.0
}

fn default_snap() -> f64 {
    DEFAULT_SNAP
}

impl Default for MobilitySpec {
    fn default() -> Self {
        MobilitySpec::Synthetic {
            arrival_rate: 1.5,
            speed: SpeedModel::Constant { speed: kmh(30.0) },
            warmup_secs: default_warmup(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSpec {
    pub beta: f64,
    pub delta: f64,
    /// Per-link communication weight, broadcast over intervals; 1 when absent.
    pub theta: Option<Vec<f64>>,
    pub content_bits: f64,
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self {
            beta: 1.0,
            delta: 1.0,
            theta: None,
            content_bits: DEFAULT_CONTENT_BITS,
        }
    }
}

/// One mobility scenario used for training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    /// Multiplier on the configured arrival rate.
    #[serde(default = "one")]
    pub rate_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Random schemes per scenario (all-on and all-zero are added on top).
    pub schemes: usize,
    pub style: SchemeStyle,
    pub scenarios: Vec<ScenarioSpec>,
    /// Share of pairs held out to score the surrogate and the classifiers.
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            schemes: 1000,
            style: SchemeStyle::Mixed,
            scenarios: vec![ScenarioSpec { seed: 1, rate_scale: 1.0 }],
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestSpec {
    /// ZOI link ids; the link nearest the grid centre when absent.
    pub zoi: Option<Vec<usize>>,
    pub alpha0: f64,
}

impl Default for RequestSpec {
    fn default() -> Self {
        Self {
            zoi: None,
            alpha0: DEFAULT_ALPHA0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSpec {
    /// Mobility seed of the deployment scenario that is planned and evaluated.
    pub mobility_seed: u64,
    /// Simulation seeds per evaluated strategy.
    pub seeds: usize,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            mobility_seed: 1000,
            seeds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    /// Raster `[height, width]`; the smallest injective square-ish raster when absent.
    pub raster: Option<[usize; 2]>,
    pub mobility: MobilitySpec,
    pub tick_secs: f64,
    pub channel: ChannelModel,
    pub seeding: SeedingMode,
    /// Interval durations, s.
    pub intervals: Vec<f64>,
    pub weights: WeightSpec,
    pub dataset: DatasetSpec,
    pub model: TrainConfig,
    pub baselines: BaselineConfig,
    pub planner: PlannerOptions,
    pub request: RequestSpec,
    pub evaluation: EvaluationSpec,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            raster: None,
            mobility: MobilitySpec::default(),
            tick_secs: 1.0,
            channel: ChannelModel::default(),
            seeding: SeedingMode::default(),
            intervals: vec![3600.0],
            weights: WeightSpec::default(),
            dataset: DatasetSpec::default(),
            model: TrainConfig::default(),
            baselines: BaselineConfig::default(),
            planner: PlannerOptions::default(),
            request: RequestSpec::default(),
            evaluation: EvaluationSpec::default(),
            seed: 0,
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse a JSON document. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let GridSpec::File { path } = &mut cfg.grid {
            rebase(path);
        }
        if let MobilitySpec::Traces { path, .. } = &mut cfg.mobility {
            rebase(path);
        }
        Ok(cfg)
    }

    /// Every violation at once; empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        match &self.grid {
            GridSpec::Manhattan { rows, cols, block_side } => {
                if *rows < 2 || *cols < 2 {
                    e.push(format!("manhattan grid needs at least 2x2 intersections, got {rows}x{cols}"));
                }
                if !(*block_side > 0.0) {
                    e.push(format!("block side must be positive, got {block_side}"));
                }
            }
            GridSpec::File { path } => {
                if !path.is_file() {
                    e.push(format!("grid file {} does not exist", path.display()));
                }
            }
        }
        if let Some([h, w]) = self.raster {
            if h == 0 || w == 0 {
                e.push("raster dimensions must be positive".into());
            }
        }
        match &self.mobility {
            MobilitySpec::Synthetic {
                arrival_rate,
                speed,
                warmup_secs,
            } => {
                if !(*arrival_rate >= 0.0) || !arrival_rate.is_finite() {
                    e.push(format!("arrival rate must be non-negative, got {arrival_rate}"));
                }
                let ok = match *speed {
                    SpeedModel::Constant { speed } => speed > 0.0 && speed.is_finite(),
                    SpeedModel::Uniform { low, high } => low > 0.0 && high >= low && high.is_finite(),
                };
                if !ok {
                    e.push(format!("speed model {speed:?} must have positive finite speeds"));
                }
                if !(*warmup_secs >= 0.0) {
                    e.push("warm-up must be non-negative".into());
                }
                if !matches!(self.grid, GridSpec::Manhattan { .. }) {
                    e.push("synthetic mobility needs a manhattan grid".into());
                }
            }
            MobilitySpec::Traces { path, snap } => {
                if !path.is_file() {
                    e.push(format!("trace file {} does not exist", path.display()));
                }
                if !(*snap >= 0.0) {
                    e.push("snap tolerance must be non-negative".into());
                }
                if self.dataset.scenarios.iter().any(|s| s.rate_scale != 1.0) {
                    e.push("rate_scale only applies to synthetic mobility".into());
                }
            }
        }
        if !(self.tick_secs > 0.0) {
            e.push(format!("tick must be positive, got {}", self.tick_secs));
        }
        if let Err(err) = self.channel.validate() {
            e.push(err.to_string());
        }
        if self.intervals.is_empty() {
            e.push("at least one interval is required".into());
        }
        for (t, d) in self.intervals.iter().enumerate() {
            if !(*d > 0.0) {
                e.push(format!("interval {t} has non-positive duration {d}"));
            } else if ((d / self.tick_secs).round() * self.tick_secs - d).abs() > 1e-9 * d {
                e.push(format!("interval {t} ({d} s) is not a whole number of ticks"));
            }
        }
        let w = &self.weights;
        if !(w.beta >= 0.0) || !(w.delta >= 0.0) {
            e.push("cost weights beta and delta must be non-negative".into());
        }
        if !(w.content_bits > 0.0) {
            e.push("content size must be positive".into());
        }
        if let Some(theta) = &w.theta {
            if theta.iter().any(|x| !(*x >= 0.0)) {
                e.push("theta entries must be non-negative".into());
            }
        }
        let d = &self.dataset;
        if d.schemes == 0 {
            e.push("the dataset needs at least one random scheme per scenario".into());
        }
        if d.scenarios.is_empty() {
            e.push("the dataset needs at least one scenario".into());
        }
        if d.scenarios.iter().any(|s| !(s.rate_scale >= 0.0)) {
            e.push("scenario rate scales must be non-negative".into());
        }
        let mut seeds: Vec<u64> = d.scenarios.iter().map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != d.scenarios.len() {
            e.push("dataset scenario seeds must be distinct".into());
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            e.push("test fraction must lie in [0, 1)".into());
        }
        e.extend(self.model.validate());
        if self.baselines.knn_k == 0 || self.baselines.forest_trees == 0 || self.baselines.tree_max_depth == 0 {
            e.push("baseline k, tree count and depth must be positive".into());
        }
        e.extend(self.planner.validate());
        if !(self.request.alpha0 > 0.0 && self.request.alpha0 <= 1.0) {
            e.push(format!("alpha0 must lie in (0, 1], got {}", self.request.alpha0));
        }
        if matches!(&self.request.zoi, Some(z) if z.is_empty()) {
            e.push("the zone of interest is empty".into());
        }
        if self.evaluation.seeds == 0 {
            e.push("evaluation needs at least one seed".into());
        }
        // Link-count dependent checks need the grid.
        if let Ok(grid) = self.build_grid() {
            let links = grid.num_links();
            if let Some(z) = &self.request.zoi {
                if let Some(bad) = z.iter().find(|&&l| l >= links) {
                    e.push(format!("zoi link {bad} out of range (grid has {links} links)"));
                }
            }
            if let Some(theta) = &w.theta {
                if theta.len() != links {
                    e.push(format!("theta has {} entries for {links} links", theta.len()));
                }
            }
            if let Some([h, wd]) = self.raster {
                if h > 0 && wd > 0 {
                    if let Err(err) = grid.raster_embed(h, wd, true) {
                        e.push(err.to_string());
                    }
                }
            }
        }
        e
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn build_grid(&self) -> Result<RoadGrid> {
        match &self.grid {
            GridSpec::Manhattan { rows, cols, block_side } => build_manhattan(*rows, *cols, *block_side),
            GridSpec::File { path } => RoadGrid::load(path),
        }
    }

    pub fn zoi(&self, grid: &RoadGrid) -> Vec<usize> {
        self.request.zoi.clone().unwrap_or_else(|| {
            let b = grid.bbox();
            vec![grid.nearest_midpoint(Point::new(b.min.x + b.width() / 2.0, b.min.y + b.height() / 2.0))]
        })
        .into_iter()
        .collect()
    }

    pub fn request(&self, grid: &RoadGrid) -> ServiceRequest {
        ServiceRequest {
            zoi: self.zoi(grid),
            alpha0: self.request.alpha0,
            durations: self.intervals.clone(),
        }
    }

    pub fn cost_weights(&self, links: usize) -> CostWeights {
        let t = self.intervals.len();
        CostWeights {
            beta: self.weights.beta,
            delta: self.weights.delta,
            theta: self
                .weights
                .theta
                .as_ref()
                .map(|th| Array3::from_shape_fn((links, t, self.channel.technology + 1), |(l, _, _)| th[l])),
            durations: self.intervals.clone(),
            content_bits: self.weights.content_bits,
        }
    }
}

/// Smallest injective raster, growing with the grid's aspect ratio.
pub fn auto_raster(grid: &RoadGrid) -> Result<[usize; 2]> {
    let b = grid.bbox();
    let aspect = if b.width() > 0.0 { b.height() / b.width() } else { 1.0 };
    for w in 2..=256usize {
        let h = ((w as f64 * aspect).round() as usize).max(2);
        if grid.raster_embed(h, w, true).is_ok() {
            return Ok([h, w]);
        }
    }
    Err(Error::InvalidParameter("no injective raster up to 256 columns".into()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------- scenarios

/// A simulated (or ingested) mobility scenario ready for the FC engine.
pub struct Scenario {
    pub info: ScenarioInfo,
    pub ctx: SimContext,
    pub stats: TraceStats,
    pub contacts: usize,
}

pub fn build_scenario(cfg: &ExperimentConfig, grid: &RoadGrid, id: &str, seed: u64, rate_scale: f64) -> Result<Scenario> {
    let intervals = Intervals::from_durations(&cfg.intervals, cfg.tick_secs)?;
    let horizon = intervals.horizon_ticks();
    let (traj, rate) = match &cfg.mobility {
        MobilitySpec::Synthetic {
            arrival_rate,
            speed,
            warmup_secs,
        } => {
            let warm = (warmup_secs / cfg.tick_secs).round() as u32;
            let total = (warm + horizon) as f64 * cfg.tick_secs;
            let rate = arrival_rate * rate_scale;
            let t = simulate_manhattan(grid, rate, *speed, total, cfg.tick_secs, seed)?;
            (t.window(warm, horizon)?, Some(rate))
        }
        MobilitySpec::Traces { path, snap } => {
            let loaded = load_traces(path, grid, cfg.tick_secs, *snap)?;
            let t = loaded.trajectories;
            if t.num_ticks < horizon {
                return Err(Error::Range(format!(
                    "trace spans {} ticks, the intervals need {horizon}",
                    t.num_ticks
                )));
            }
            (t.window(0, horizon)?, None)
        }
    };
    let contacts = detect_contacts(&traj, cfg.channel.radius)?;
    let stats = traj.stats();
    let n_contacts = contacts.len();
    let ctx = SimContext::new(
        traj,
        contacts,
        intervals,
        cfg.channel,
        cfg.seeding,
        cfg.weights.content_bits,
        grid.num_links(),
    )?;
    Ok(Scenario {
        info: ScenarioInfo {
            id: id.to_string(),
            mobility_seed: seed,
            arrival_rate: rate,
        },
        ctx,
        stats,
        contacts: n_contacts,
    })
}

// ---------------------------------------------------------------- run directory

pub const STAGES: [&str; 8] = ["grid", "mobility", "features", "dataset", "train", "bootstrap", "evaluate", "report"];

/// Strategies simulated by `evaluate`, with the file holding each scheme.
const EVALUATED: [(&str, &str); 4] = [
    ("surrogate", "plan.csv"),
    ("all-on", "plans/all-on.csv"),
    ("circular-az", "plans/circular-az.csv"),
    ("full-infrastructure", "plans/full-infrastructure.csv"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_seeds: Vec<u64>,
    pub evaluation_mobility_seed: u64,
    pub stages: Vec<String>,
    /// SHA-256 of every deterministic artifact, keyed by relative path.
    pub artifacts: BTreeMap<String, String>,
}

/// Exclusive ownership of a run directory for the lifetime of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidParameter(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// One experiment run bound to its output directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    /// Leave the generation timestamp out of SVG reports.
    pub deterministic_svg: bool,
    grid: OnceCell<RoadGrid>,
    deployment: OnceCell<Scenario>,
    timings: BTreeMap<String, f64>,
    _lock: RunLock,
}

impl Run {
    /// Validate the config, then create and lock the run directory.
    pub fn open(cfg: ExperimentConfig, dir: &Path) -> Result<Self> {
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = RunLock::acquire(dir)?;
        let timings_path = dir.join("timings.json");
        let timings = std::fs::read_to_string(&timings_path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        Ok(Self {
            cfg,
            dir: dir.to_path_buf(),
            deterministic_svg: false,
            grid: OnceCell::new(),
            deployment: OnceCell::new(),
            timings,
            _lock: lock,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rel: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Dependency {
                artifact: p.display().to_string(),
                subcommand: stage.to_string(),
            })
        }
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn write(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn grid(&self) -> Result<&RoadGrid> {
        if let Some(g) = self.grid.get() {
            return Ok(g);
        }
        let g = RoadGrid::load(&self.require("grid.json", "grid")?)?;
        Ok(self.grid.get_or_init(|| g))
    }

    fn deployment(&self) -> Result<&Scenario> {
        if let Some(s) = self.deployment.get() {
            return Ok(s);
        }
        let s = build_scenario(&self.cfg, self.grid()?, "deployment", self.cfg.evaluation.mobility_seed, 1.0)?;
        Ok(self.deployment.get_or_init(|| s))
    }

    fn forecast(&self) -> Result<MobilityFeatures> {
        let s = self.deployment()?;
        mobility_features(&s.ctx.traj, &s.ctx.contacts, self.grid()?, &s.ctx.intervals)
    }

    fn raster(&self) -> Result<[usize; 2]> {
        match self.cfg.raster {
            Some(r) => Ok(r),
            None => auto_raster(self.grid()?),
        }
    }

    pub fn run_stage(&mut self, name: &str, scheme: Option<&Path>) -> Result<()> {
        let started = Instant::now();
        match name {
            "grid" => self.stage_grid(),
            "mobility" => self.stage_mobility(),
            "features" => self.stage_features(),
            "dataset" => self.stage_dataset(),
            "train" => self.stage_train(),
            "bootstrap" => self.stage_bootstrap(),
            "evaluate" => match scheme {
                Some(p) => self.evaluate_custom(p),
                None => self.stage_evaluate(),
            },
            "report" => self.stage_report(),
            "pipeline" => {
                for s in STAGES {
                    self.run_stage(s, None)?;
                }
                return Ok(());
            }
            other => Err(Error::Unknown {
                kind: "subcommand",
                name: other.to_string(),
                available: format!("{}, pipeline", STAGES.join(", ")),
            }),
        }?;
        self.timings.insert(name.to_string(), started.elapsed().as_secs_f64());
        self.write("timings.json", &serde_json::to_string_pretty(&self.timings)?)?;
        self.update_manifest(name)
    }

    fn update_manifest(&self, stage: &str) -> Result<()> {
        let path = self.path("manifest.json");
        let hash = self.cfg.hash();
        let mut stages = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .filter(|m| m.config_hash == hash)
            .map(|m| m.stages)
            .unwrap_or_default();
        if !stages.iter().any(|s| s == stage) {
            stages.push(stage.to_string());
        }
        let manifest = RunManifest {
            tool: format!("fcplan {}", env!("CARGO_PKG_VERSION")),
            config_hash: hash,
            seed: self.cfg.seed,
            dataset_seeds: self.cfg.dataset.scenarios.iter().map(|s| s.seed).collect(),
            evaluation_mobility_seed: self.cfg.evaluation.mobility_seed,
            stages,
            artifacts: digest_artifacts(&self.dir)?,
        };
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    // ------------------------------------------------------------ stages

    fn stage_grid(&mut self) -> Result<()> {
        let grid = self.cfg.build_grid()?;
        grid.save(&self.path("grid.json"))?;
        let [h, w] = match self.cfg.raster {
            Some(r) => r,
            None => auto_raster(&grid)?,
        };
        grid.raster_embed(h, w, true)?;
        log::info!(
            "grid: {} links, {} intersections, raster {h}x{w}",
            grid.num_links(),
            grid.intersections().len()
        );
        self.grid = OnceCell::from(grid);
        self.deployment = OnceCell::new();
        Ok(())
    }

    fn stage_mobility(&mut self) -> Result<()> {
        let grid = self.grid()?;
        self.mkdir("mobility")?;
        let mut w = csv::Writer::from_path(self.path("mobility/stats.csv"))?;
        w.write_record([
            "scenario",
            "mobility_seed",
            "arrival_rate",
            "nodes",
            "mean_nodes_present",
            "max_nodes_present",
            "mean_speed",
            "contacts",
        ])?;
        let mut row = |s: &Scenario| -> Result<()> {
            w.write_record([
                s.info.id.clone(),
                s.info.mobility_seed.to_string(),
                s.info.arrival_rate.map_or(String::new(), |r| r.to_string()),
                s.stats.nodes.to_string(),
                s.stats.mean_nodes_present.to_string(),
                s.stats.max_nodes_present.to_string(),
                s.stats.mean_speed.to_string(),
                s.contacts.to_string(),
            ])?;
            Ok(())
        };
        row(self.deployment()?)?;
        for (i, sc) in self.cfg.dataset.scenarios.iter().enumerate() {
            row(&build_scenario(&self.cfg, grid, &format!("train-{i}"), sc.seed, sc.rate_scale)?)?;
        }
        w.flush().map_err(|e| Error::io(self.path("mobility/stats.csv"), e))
    }

    fn stage_features(&mut self) -> Result<()> {
        self.forecast()?.write_csv(&self.path("features.csv"))
    }

    fn stage_dataset(&mut self) -> Result<()> {
        let grid = self.grid()?;
        let [h, w] = self.raster()?;
        let emb = grid.raster_embed(h, w, true)?;
        let mut dataset: Option<Dataset> = None;
        for (i, sc) in self.cfg.dataset.scenarios.iter().enumerate() {
            let scenario = build_scenario(&self.cfg, grid, &format!("train-{i}"), sc.seed, sc.rate_scale)?;
            let schemes = gen_random_schemes(
                self.cfg.dataset.schemes,
                &emb,
                self.cfg.intervals.len(),
                derive_seed(self.cfg.seed, 0x5c4e_0000 + i as u64),
                self.cfg.dataset.style,
            )?;
            let pairs = build_dataset(
                &scenario.ctx,
                grid,
                &scenario.info.id,
                &schemes,
                derive_seed(self.cfg.seed, 0xd5e7_0000 + i as u64),
            )?;
            dataset
                .get_or_insert_with(|| Dataset::new(grid, &scenario.ctx))
                .append(scenario.info.clone(), pairs)?;
        }
        let dataset = dataset.expect("validated: at least one scenario");
        log::info!("dataset: {} pairs, {} rows", dataset.pairs.len(), dataset.num_rows());
        dataset.save(&self.dir)
    }

    fn split(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream(self.cfg.seed, "test-split", 0));
        let k = ((n as f64) * self.cfg.dataset.test_fraction).round() as usize;
        let mut test = idx[..k].to_vec();
        let mut train = idx[k..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        (train, test)
    }

    fn stage_train(&mut self) -> Result<()> {
        self.require("pairs.csv", "dataset")?;
        let dataset = Dataset::load(&self.dir)?;
        let grid = self.grid()?;
        let [h, w] = self.raster()?;
        let emb = grid.raster_embed(h, w, true)?;
        let (train_idx, test_idx) = self.split(dataset.pairs.len());
        let pick = |idx: &[usize]| -> Vec<TrainingPair> { idx.iter().map(|&i| dataset.pairs[i].clone()).collect() };
        let (train, test) = (pick(&train_idx), pick(&test_idx));
        let (model, summary) = train_surrogate(&train, &emb, &self.cfg.model, derive_seed(self.cfg.seed, 0x7a1e))?;
        model.save(&self.path("model.bin"))?;

        let (test_mse, baseline_mse) = if test.is_empty() {
            (None, None)
        } else {
            let mean = mean_nc(&train);
            let base = test
                .iter()
                .flat_map(|p| p.comm.nc.iter())
                .map(|x| (x - mean).powi(2))
                .sum::<f64>()
                / test.iter().map(|p| p.comm.nc.len()).sum::<usize>() as f64;
            (Some(model.nc_mse(&test)?), Some(base))
        };

        // Feasibility classification on the held-out pairs.
        let zoi = self.cfg.zoi(grid);
        let alpha0 = self.cfg.request.alpha0;
        let mut w = csv::Writer::from_path(self.path("classification.csv"))?;
        w.write_record(["method", "f_score", "test_pairs", "positives"])?;
        if !test.is_empty() {
            let truth: Vec<bool> = test.iter().map(|p| pair_feasible(p, &zoi, alpha0)).collect();
            let positives = truth.iter().filter(|&&t| t).count().to_string();
            let df: Vec<bool> = test
                .iter()
                .map(|p| {
                    let pred = model.predict(&p.mobility, &p.scheme)?;
                    Ok(predicted_alphas(&pred, &p.mobility, &zoi)
                        .iter()
                        .all(|a| a.is_some_and(|a| a >= alpha0)))
                })
                .collect::<Result<_>>()?;
            w.write_record(["surrogate".to_string(), f_score(&df, &truth)?.to_string(), test.len().to_string(), positives.clone()])?;
            let x: Vec<Vec<f64>> = train.iter().map(pair_row).collect();
            let y: Vec<bool> = train.iter().map(|p| pair_feasible(p, &zoi, alpha0)).collect();
            let xt: Vec<Vec<f64>> = test.iter().map(pair_row).collect();
            for name in CLASSIFIERS {
                let mut c = classifier(name, &self.cfg.baselines, derive_seed(self.cfg.seed, 0xc1a5))?;
                c.fit(&x, &y)?;
                let pred: Vec<bool> = xt.iter().map(|r| c.predict(r)).collect();
                w.write_record([name.to_string(), f_score(&pred, &truth)?.to_string(), test.len().to_string(), positives.clone()])?;
            }
        }
        w.flush().map_err(|e| Error::io(self.path("classification.csv"), e))?;

        #[derive(Serialize)]
        struct Report<'a> {
            train_pairs: usize,
            test_pairs: usize,
            test_nc_mse: Option<f64>,
            mean_baseline_nc_mse: Option<f64>,
            summary: &'a crate::learn::TrainingSummary,
        }
        let report = Report {
            train_pairs: train.len(),
            test_pairs: test.len(),
            test_nc_mse: test_mse,
            mean_baseline_nc_mse: baseline_mse,
            summary: &summary,
        };
        self.write("training.json", &serde_json::to_string_pretty(&report)?)
    }

    fn plan_input_parts(&self) -> Result<(ServiceRequest, CostWeights, MobilityFeatures)> {
        let grid = self.grid()?;
        Ok((self.cfg.request(grid), self.cfg.cost_weights(grid.num_links()), self.forecast()?))
    }

    fn stage_bootstrap(&mut self) -> Result<()> {
        let model_path = self.require("model.bin", "train")?;
        let model = SurrogateModel::load(&model_path)?;
        let grid = self.grid()?;
        let (req, w, forecast) = self.plan_input_parts()?;
        let input = PlanInput {
            grid,
            model: Some(&model),
            forecast: &forecast,
            request: &req,
            weights: &w,
            verifier: &self.deployment()?.ctx,
            options: &self.cfg.planner,
            seed: derive_seed(self.cfg.seed, 0x91a4),
        };
        self.mkdir("plans")?;
        for name in PLANNERS {
            let result = planner(name)?.plan(&input)?;
            if name == "surrogate" {
                result.save(&self.dir, "plan")?;
                log::info!(
                    "plan: verified cost {:.3e} bits, fallback {}, {:.2} s",
                    result.verified_cost,
                    result.fallback,
                    result.duration_secs
                );
            } else {
                result.save(&self.path("plans"), name)?;
            }
        }
        Ok(())
    }

    fn evaluation_seeds(&self) -> Vec<u64> {
        (0..self.cfg.evaluation.seeds)
            .map(|j| derive_seed(self.cfg.seed, 0xe7a1_0000 + j as u64))
            .collect()
    }

    fn stage_evaluate(&mut self) -> Result<()> {
        let mut schemes = Vec::new();
        for (name, file) in EVALUATED {
            let p = self.require(file, "bootstrap")?;
            schemes.push((name, FcScheme::read_csv(&p)?));
        }
        self.mkdir("evaluation")?;
        let (req, w, _) = self.plan_input_parts()?;
        let ctx = &self.deployment()?.ctx;
        let seeds = self.evaluation_seeds();
        let mut costs = csv::Writer::from_path(self.path("evaluation/costs.csv"))?;
        costs.write_record(["strategy", "seed", "cost", "storage", "communication", "seeding", "feasible"])?;
        let mut alphas = csv::Writer::from_path(self.path("evaluation/alpha.csv"))?;
        alphas.write_record(["strategy", "seed", "t", "alpha"])?;
        for (name, scheme) in &schemes {
            for (j, &seed) in seeds.iter().enumerate() {
                let v = verify(ctx, scheme, &req, &w, &[seed], None)?;
                costs.write_record([
                    name.to_string(),
                    j.to_string(),
                    v.cost.to_string(),
                    v.breakdown.storage.to_string(),
                    v.breakdown.communication.to_string(),
                    v.breakdown.seeding.to_string(),
                    v.feasible.to_string(),
                ])?;
                for (t, a) in v.alpha.iter().enumerate() {
                    alphas.write_record([name.to_string(), j.to_string(), t.to_string(), a.map_or(String::new(), |a| a.to_string())])?;
                }
            }
        }
        costs.flush().map_err(|e| Error::io(self.path("evaluation/costs.csv"), e))?;
        alphas.flush().map_err(|e| Error::io(self.path("evaluation/alpha.csv"), e))?;
        Ok(())
    }

    /// Simulate one given scheme: outcome, per-interval ratios, verdict and cost.
    fn evaluate_custom(&mut self, scheme_path: &Path) -> Result<()> {
        let scheme = FcScheme::read_csv(scheme_path)?;
        let (req, w, _) = self.plan_input_parts()?;
        let ctx = &self.deployment()?.ctx;
        if scheme.dim() != (ctx.num_links(), ctx.num_intervals()) {
            return Err(Error::Shape(format!(
                "scheme is {:?}, the scenario has {} links and {} intervals",
                scheme.dim(),
                ctx.num_links(),
                ctx.num_intervals()
            )));
        }
        let seed = self.evaluation_seeds()[0];
        let dir = self.mkdir("evaluation/custom")?;
        let outcome = ctx.run(&scheme, Some(&req.zoi), seed)?;
        outcome.write_csv(&dir.join("outcome.csv"))?;
        let v = verify(ctx, &scheme, &req, &w, &[seed], None)?;
        outcome.write_alpha_csv(&dir.join("alpha.csv"), &v.alpha)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            feasible: bool,
            alpha0: f64,
            zoi: &'a [usize],
            cost: f64,
            breakdown: &'a crate::scheme::CostBreakdown,
            alpha: &'a [Option<f64>],
        }
        let summary = Summary {
            feasible: v.feasible,
            alpha0: req.alpha0,
            zoi: &req.zoi,
            cost: v.cost,
            breakdown: &v.breakdown,
            alpha: &v.alpha,
        };
        self.write("evaluation/custom/summary.json", &serde_json::to_string_pretty(&summary)?)
    }

    fn stage_report(&mut self) -> Result<()> {
        let costs_path = self.require("evaluation/costs.csv", "evaluate")?;
        let alpha_path = self.require("evaluation/alpha.csv", "evaluate")?;
        let plan = FcScheme::read_csv(&self.require("plan.csv", "bootstrap")?)?;
        self.mkdir("report")?;

        #[derive(Deserialize)]
        struct CostRow {
            strategy: String,
            seed: usize,
            cost: f64,
            feasible: bool,
        }
        #[derive(Deserialize)]
        struct AlphaRow {
            strategy: String,
            t: usize,
            alpha: Option<f64>,
        }
        let cost_rows: Vec<CostRow> = csv::Reader::from_path(&costs_path)?.deserialize().collect::<std::result::Result<_, _>>()?;
        let alpha_rows: Vec<AlphaRow> = csv::Reader::from_path(&alpha_path)?.deserialize().collect::<std::result::Result<_, _>>()?;

        // Success-ratio distributions.
        let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let order = |s: &str| EVALUATED.iter().position(|(n, _)| *n == s).unwrap_or(usize::MAX);
        for r in &alpha_rows {
            if let Some(a) = r.alpha {
                groups.entry((order(&r.strategy), r.t)).or_default().push(a);
            }
        }
        let mut w = csv::Writer::from_path(self.path("report/success_ratio_boxplot.csv"))?;
        w.write_record(["strategy", "t", "samples", "min", "q1", "median", "q3", "max", "iqr", "whisker_low", "whisker_high", "outliers"])?;
        for ((k, t), samples) in &groups {
            let b = BoxStats::from_samples(samples);
            let outliers: Vec<String> = b.outliers.iter().map(f64::to_string).collect();
            w.write_record([
                EVALUATED[*k].0.to_string(),
                t.to_string(),
                samples.len().to_string(),
                b.min.to_string(),
                b.q1.to_string(),
                b.median.to_string(),
                b.q3.to_string(),
                b.max.to_string(),
                b.iqr.to_string(),
                b.whisker_low.to_string(),
                b.whisker_high.to_string(),
                outliers.join(";"),
            ])?;
        }
        w.flush().map_err(|e| Error::io(self.path("report/success_ratio_boxplot.csv"), e))?;

        // Savings of the surrogate plan against each baseline, paired by seed.
        let by = |name: &str| -> BTreeMap<usize, (f64, bool)> {
            cost_rows
                .iter()
                .filter(|r| r.strategy == name)
                .map(|r| (r.seed, (r.cost, r.feasible)))
                .collect()
        };
        let ours = by("surrogate");
        let mut w = csv::Writer::from_path(self.path("report/savings.csv"))?;
        w.write_record(["baseline", "seeds", "mean_baseline_cost", "mean_plan_cost", "savings_pct", "share_cheaper", "baseline_feasible_share", "plan_feasible_share"])?;
        for (name, _) in &EVALUATED[1..] {
            let theirs = by(name);
            let paired: Vec<(f64, bool, f64, bool)> = ours
                .iter()
                .filter_map(|(s, &(c, f))| theirs.get(s).map(|&(bc, bf)| (c, f, bc, bf)))
                .collect();
            if paired.is_empty() {
                continue;
            }
            let n = paired.len() as f64;
            let mean_plan = paired.iter().map(|p| p.0).sum::<f64>() / n;
            let mean_base = paired.iter().map(|p| p.2).sum::<f64>() / n;
            let savings = if mean_base > 0.0 { 100.0 * (1.0 - mean_plan / mean_base) } else { 0.0 };
            let cheaper = paired.iter().filter(|p| p.0 < p.2).count() as f64 / n;
            let base_feasible = paired.iter().filter(|p| p.3).count() as f64 / n;
            let plan_feasible = paired.iter().filter(|p| p.1).count() as f64 / n;
            w.write_record([
                name.to_string(),
                paired.len().to_string(),
                mean_base.to_string(),
                mean_plan.to_string(),
                savings.to_string(),
                cheaper.to_string(),
                base_feasible.to_string(),
                plan_feasible.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(self.path("report/savings.csv"), e))?;

        // Strategy maps.
        let grid = self.grid()?;
        let stamp = (!self.deterministic_svg).then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        });
        for t in 0..plan.num_intervals() {
            for (label, plane) in [("a", &plan.a), ("b", &plan.b)] {
                let values: Vec<f64> = plane.column(t).to_vec();
                let stem = format!("report/heatmap_{label}_t{t}");
                let mut w = csv::Writer::from_path(self.path(&format!("{stem}.csv")))?;
                w.write_record(["link_id", "value"])?;
                for (l, v) in values.iter().enumerate() {
                    w.write_record([l.to_string(), v.to_string()])?;
                }
                w.flush().map_err(|e| Error::io(self.path(&format!("{stem}.csv")), e))?;
                let title = match label {
                    "a" => format!("replication a, interval {t}"),
                    _ => format!("storage b, interval {t}"),
                };
                self.write(&format!("{stem}.svg"), &link_heatmap_svg(grid, &values, &title, &self.cfg.zoi(grid), stamp))?;
            }
        }
        Ok(())
    }
}

fn mean_nc(pairs: &[TrainingPair]) -> f64 {
    let (s, n) = pairs
        .iter()
        .fold((0.0, 0usize), |(s, n), p| (s + p.comm.nc.sum(), n + p.comm.nc.len()));
    s / n.max(1) as f64
}

fn digest_artifacts(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("inside root").to_string_lossy().replace('\\', "/");
            let deterministic = matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "bin"))
                || rel == "grid.json"
                || rel == "dataset.json";
            if deterministic {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.insert(rel, hex(&Sha256::digest(&bytes)));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

// ---------------------------------------------------------------- report helpers

/// Box-plot summary with Tukey fences at 1.5 IQR.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub iqr: f64,
    /// Most extreme samples inside the fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty(), "box plot of no samples");
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = v.iter().copied().filter(|x| (lo..=hi).contains(x)).collect();
        Self {
            min: v[0],
            q1,
            median,
            q3,
            max: v[v.len() - 1],
            iqr,
            whisker_low: inside.first().copied().unwrap_or(q1),
            whisker_high: inside.last().copied().unwrap_or(q3),
            outliers: v.iter().copied().filter(|x| !(lo..=hi).contains(x)).collect(),
        }
    }
}

/// Links drawn over the grid geometry, shaded white (0) to dark blue (1).
/// ZOI links get a red outline. `stamp` adds a generation time comment.
pub fn link_heatmap_svg(grid: &RoadGrid, values: &[f64], title: &str, zoi: &[usize], stamp: Option<u64>) -> String {
    let b = grid.bbox();
    let pad = 40.0;
    let (w, h) = (b.width() + 2.0 * pad, b.height() + 2.0 * pad + 30.0);
    // SVG y grows downwards.
    let x = |p: &Point| p.x - b.min.x + pad;
    let y = |p: &Point| b.max.y - p.y + pad + 30.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.1} {h:.1}">"#);
    if let Some(t) = stamp {
        let _ = writeln!(s, "<!-- generated at unix time {t} -->");
    }
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{pad}" y="22" font-family="sans-serif" font-size="16">{title}</text>"#);
    for (l, link) in grid.links().iter().enumerate() {
        let v = values.get(l).copied().unwrap_or(0.0).clamp(0.0, 1.0);
        let shade = |full: f64, empty: f64| (empty + (full - empty) * v).round() as u8;
        let color = format!("#{:02x}{:02x}{:02x}", shade(8.0, 240.0), shade(48.0, 240.0), shade(107.0, 240.0));
        let (a, c) = (&link.ends[0], &link.ends[1]);
        if zoi.contains(&l) {
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#d62728" stroke-width="14" stroke-linecap="round"/>"##,
                x(a), y(a), x(c), y(c)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="8" stroke-linecap="round"><title>link {l}: {v:.3}</title></line>"#,
            x(a), y(a), x(c), y(c)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_empty_config_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
        assert_eq!(cfg.weights.content_bits, 67_108_864.0);
        assert_eq!(cfg.request.alpha0, 0.9);
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut cfg = ExperimentConfig { tick_secs: 0.0, ..Default::default() };
        cfg.request.alpha0 = 1.5;
        cfg.dataset.schemes = 0;
        cfg.grid = GridSpec::File { path: "/nonexistent/grid.json".into() };
        let e = cfg.validate();
        assert!(e.len() >= 4, "{e:?}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 3}"#).is_err());
    }

    #[test]
    fn degenerate_box_plot() {
        let b = BoxStats::from_samples(&[0.7; 9]);
        assert_eq!((b.q1, b.median, b.q3, b.iqr), (0.7, 0.7, 0.7, 0.0));
        assert!(b.outliers.is_empty());
    }

    #[test]
    fn box_plot_fences() {
        let b = BoxStats::from_samples(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]);
        assert_eq!(b.median, 3.5);
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!(b.whisker_high, 5.0);
    }

    #[test]
    fn default_zoi_is_central() {
        let cfg = ExperimentConfig::default();
        let g = cfg.build_grid().unwrap();
        let zoi = cfg.zoi(&g);
        let b = g.bbox();
        let m = g.link(zoi[0]).midpoint();
        assert!((m.x - (b.min.x + b.width() / 2.0)).abs() <= 75.0);
        assert!((m.y - (b.min.y + b.height() / 2.0)).abs() <= 75.0);
    }

    #[test]
    fn all_on_heatmap_is_uniform() {
        let g = build_manhattan(3, 3, 100.0).unwrap();
        let svg = link_heatmap_svg(&g, &vec![1.0; g.num_links()], "t", &[], None);
        assert_eq!(svg.matches("#08306b").count(), g.num_links());
        assert!(!svg.contains("generated"));
    }
}
