//! Training-set generation: random schemes, one simulation per scheme over a
//! shared scenario, z-score normalization and on-disk persistence.
//!
//! A dataset directory holds `dataset.json` and `pairs.csv`, one row per
//! (pair, link, interval). The manifest carries everything that is not
//! per-row: grid hash, channel, content size, interval partition,
//! provenance of measured pairs and the fitted normalizer.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcsim::{ChannelModel, SeedingMode, SimContext, SimOutcome};
use crate::mobility::{mobility_features, MobilityFeatures};
use crate::rng::{derive_seed, stream};
use crate::roadnet::{RasterEmbedding, RoadGrid};
use crate::scheme::{all_on, all_zero, FcScheme};

/// Measured communication features of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CommFeatures {
    pub nc: Array2<f64>,
    /// `(links, intervals, technologies)`.
    pub gamma: Array3<f64>,
}

impl CommFeatures {
    pub fn from_outcome(o: &SimOutcome) -> Self {
        Self {
            nc: o.nc.clone(),
            gamma: o.gamma.clone(),
        }
    }

    pub fn gamma_total(&self) -> Array2<f64> {
        self.gamma.sum_axis(ndarray::Axis(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Simulated,
    Measured,
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub pair_id: usize,
    pub scenario: String,
    pub seed: u64,
    pub provenance: Provenance,
    /// Shared by every pair of the same scenario.
    pub mobility: Arc<MobilityFeatures>,
    pub scheme: FcScheme,
    pub comm: CommFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeStyle {
    Iid,
    Smoothed,
    Zonal,
    #[default]
    Mixed,
}

impl std::str::FromStr for SchemeStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "smoothed" => Ok(Self::Smoothed),
            "zonal" => Ok(Self::Zonal),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Unknown {
                kind: "scheme style",
                name: other.to_string(),
                available: "iid, smoothed, zonal, mixed".into(),
            }),
        }
    }
}

/// `k` random schemes followed by all-on and all-zero.
///
/// Smoothed schemes draw one Gaussian random field per (parameter, interval)
/// over the raster, with a random length scale, gain and offset, squashed
/// through a logistic so both diffuse and near-binary blobs occur. Zonal
/// schemes switch a random disk of cells high and the rest low, so compact
/// zones of the kind the anchor-zone family uses are in distribution.
/// Mixed cycles through i.i.d., smoothed and zonal.
pub fn gen_random_schemes(
    k: usize,
    embedding: &RasterEmbedding,
    intervals: usize,
    seed: u64,
    style: SchemeStyle,
) -> Result<Vec<FcScheme>> {
    if k == 0 {
        return Err(Error::InvalidParameter("scheme count must be at least 1".into()));
    }
    let links = embedding.num_links();
    let mut out = Vec::with_capacity(k + 2);
    for i in 0..k {
        let mut rng = stream(seed, "schemes", i as u64);
        let style = match style {
            SchemeStyle::Mixed => [SchemeStyle::Iid, SchemeStyle::Smoothed, SchemeStyle::Zonal][i % 3],
            other => other,
        };
        if style == SchemeStyle::Zonal {
            out.push(zonal_scheme(embedding, intervals, &mut rng)?);
            continue;
        }
        let mut planes = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut plane = Array2::zeros((links, intervals));
            for t in 0..intervals {
                let values = if style == SchemeStyle::Smoothed {
                    embedding.gather(&smooth_field(embedding, &mut rng))
                } else {
                    (0..links).map(|_| rng.random::<f64>()).collect()
                };
                plane.column_mut(t).assign(&ndarray::Array1::from(values));
            }
            planes.push(plane);
        }
        let s = planes.pop().unwrap();
        let b = planes.pop().unwrap();
        let a = planes.pop().unwrap();
        out.push(FcScheme::new(a, b, s)?);
    }
    out.push(all_on(links, intervals));
    out.push(all_zero(links, intervals));
    Ok(out)
}

fn zonal_scheme(e: &RasterEmbedding, intervals: usize, rng: &mut impl Rng) -> Result<FcScheme> {
    let links = e.num_links();
    let mut planes = [Array2::zeros((links, intervals)), Array2::zeros((links, intervals)), Array2::zeros((links, intervals))];
    for t in 0..intervals {
        let (cr, cc) = (rng.random_range(0.0..e.h as f64), rng.random_range(0.0..e.w as f64));
        let radius: f64 = rng.random_range(0.5..0.6 * e.h.max(e.w) as f64);
        let inside: Vec<bool> = e
            .cell_of
            .iter()
            .map(|&(r, c)| (r as f64 + 0.5 - cr).hypot(c as f64 + 0.5 - cc) <= radius)
            .collect();
        for (k, plane) in planes.iter_mut().enumerate() {
            // Seeding targets inside the zone span the full range.
            let hi = rng.random_range(if k == 2 { 0.05 } else { 0.6 }..1.0);
            let lo = rng.random_range(0.0..0.3);
            for (l, &inn) in inside.iter().enumerate() {
                plane[[l, t]] = if inn { hi } else { lo * rng.random::<f64>() };
            }
        }
    }
    let [a, b, s] = planes;
    FcScheme::new(a, b, s)
}

fn smooth_field(e: &RasterEmbedding, rng: &mut impl Rng) -> Vec<f64> {
    let (h, w) = (e.h, e.w);
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let ell: f64 = rng.random_range(0.7..2.5);
    let gain: f64 = rng.random_range(1.0..6.0);
    let offset: f64 = rng.random_range(-1.5..1.5);
    let mut field = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for rr in 0..h {
                for cc in 0..w {
                    let d2 = ((r as f64 - rr as f64).powi(2) + (c as f64 - cc as f64).powi(2)) / (ell * ell);
                    acc += (-0.5 * d2).exp() * noise[rr * w + cc];
                }
            }
            field[r * w + c] = acc;
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let sd = (field.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / field.len() as f64)
        .sqrt()
        .max(1e-12);
    field
        .iter()
        .map(|x| 1.0 / (1.0 + (-(gain * (x - mean) / sd + offset * gain)).exp()))
        .collect()
}

/// Simulate every scheme over one scenario. Mobility features are computed
/// once and shared; scheme `k` runs with seed `derive_seed(seed, k)`.
pub fn build_dataset(
    ctx: &SimContext,
    grid: &RoadGrid,
    scenario: &str,
    schemes: &[FcScheme],
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let mobility = Arc::new(mobility_features(&ctx.traj, &ctx.contacts, grid, &ctx.intervals)?);
    let outcomes: Vec<Result<SimOutcome>> = schemes
        .par_iter()
        .enumerate()
        .map(|(k, s)| ctx.run(s, None, derive_seed(seed, k as u64)))
        .collect();
    outcomes
        .into_iter()
        .zip(schemes)
        .enumerate()
        .map(|(k, (o, s))| {
            let o = o?;
            Ok(TrainingPair {
                pair_id: k,
                scenario: scenario.to_string(),
                seed: o.seed,
                provenance: Provenance::Simulated,
                mobility: Arc::clone(&mobility),
                scheme: s.clone(),
                comm: CommFeatures::from_outcome(&o),
            })
        })
        .collect()
}

/// Names of the normalized columns, in order.
pub const FEATURES: [&str; 6] = ["n", "lambda", "tau", "nu", "n_c", "gamma"];
pub const TARGET_NC: usize = 4;
pub const TARGET_GAMMA: usize = 5;

/// Per-feature affine map `z = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; FEATURES.len()],
            scale: vec![1.0; FEATURES.len()],
        }
    }

    pub fn apply(&self, feature: usize, x: f64) -> f64 {
        (x - self.mean[feature]) / self.scale[feature]
    }

    pub fn invert(&self, feature: usize, z: f64) -> f64 {
        z * self.scale[feature] + self.mean[feature]
    }

    /// Normalized copies of the four mobility channels.
    pub fn apply_mobility(&self, m: &MobilityFeatures) -> MobilityFeatures {
        let mut out = m.clone();
        for c in 0..4 {
            out.channel_mut(c).mapv_inplace(|x| self.apply(c, x));
        }
        out
    }
}

fn row_values(p: &TrainingPair, gamma: &Array2<f64>, l: usize, t: usize) -> [f64; 6] {
    let m = &p.mobility;
    [
        m.n[[l, t]],
        m.lambda[[l, t]],
        m.tau[[l, t]],
        m.nu[[l, t]],
        p.comm.nc[[l, t]],
        gamma[[l, t]],
    ]
}

/// Z-score parameters over every (link, interval) row of `pairs[split]`.
/// Constant features get scale 1.
pub fn fit_normalizer(pairs: &[TrainingPair], split: &[usize]) -> Result<Normalizer> {
    if split.is_empty() {
        return Err(Error::Data("cannot fit a normalizer on an empty split".into()));
    }
    let f = FEATURES.len();
    let (mut sum, mut sq, mut count) = (vec![0.0; f], vec![0.0; f], 0.0);
    for &i in split {
        let p = pairs
            .get(i)
            .ok_or_else(|| Error::Data(format!("split index {i} is out of range")))?;
        let gamma = p.comm.gamma_total();
        let (links, nt) = p.comm.nc.dim();
        for l in 0..links {
            for t in 0..nt {
                for (j, v) in row_values(p, &gamma, l, t).into_iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1.0;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let scale = (0..f)
        .map(|j| {
            let var = (sq[j] / count - mean[j] * mean[j]).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean[j].abs()) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok(Normalizer { mean, scale })
}

/// Description of one scenario inside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub id: String,
    pub mobility_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub grid_hash: String,
    pub num_links: usize,
    pub durations: Vec<f64>,
    pub tick_secs: f64,
    pub channel: ChannelModel,
    pub seeding: SeedingMode,
    pub content_bits: f64,
    pub num_pairs: usize,
    pub scenarios: Vec<ScenarioInfo>,
    /// Pair ids whose communication features were measured rather than simulated.
    pub measured_pairs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<Normalizer>,
}

/// The training set with its metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<TrainingPair>,
}

pub const PAIRS_HEADER: [&str; 14] = [
    "pair_id", "scenario", "seed", "link_id", "t", "n", "lambda", "tau", "nu", "a", "b", "s", "n_c", "gamma",
];

impl Dataset {
    pub fn new(grid: &RoadGrid, ctx: &SimContext) -> Self {
        Self {
            manifest: DatasetManifest {
                format: 1,
                grid_hash: grid.content_hash(),
                num_links: grid.num_links(),
                durations: ctx.intervals.durations_secs(),
                tick_secs: ctx.intervals.tick_secs(),
                channel: ctx.channel,
                seeding: ctx.seeding,
                content_bits: ctx.content_bits,
                num_pairs: 0,
                scenarios: Vec::new(),
                measured_pairs: Vec::new(),
                normalizer: None,
            },
            pairs: Vec::new(),
        }
    }

    /// Append pairs of a new scenario, renumbering pair ids.
    pub fn append(&mut self, info: ScenarioInfo, pairs: Vec<TrainingPair>) -> Result<()> {
        if self.manifest.scenarios.iter().any(|s| s.id == info.id) {
            return Err(Error::Data(format!("scenario `{}` is already in the dataset", info.id)));
        }
        for mut p in pairs {
            if p.scenario != info.id {
                return Err(Error::Data(format!(
                    "pair from scenario `{}` appended under `{}`",
                    p.scenario, info.id
                )));
            }
            if p.scheme.dim() != (self.manifest.num_links, self.manifest.durations.len()) {
                return Err(Error::Shape(format!(
                    "pair has dimensions {:?}, dataset expects ({}, {})",
                    p.scheme.dim(),
                    self.manifest.num_links,
                    self.manifest.durations.len()
                )));
            }
            p.pair_id = self.pairs.len();
            if p.provenance == Provenance::Measured {
                self.manifest.measured_pairs.push(p.pair_id);
            }
            self.pairs.push(p);
        }
        self.manifest.scenarios.push(info);
        self.manifest.num_pairs = self.pairs.len();
        Ok(())
    }

    pub fn num_rows(&self) -> usize {
        self.pairs.len() * self.manifest.num_links * self.manifest.durations.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("pairs.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(PAIRS_HEADER)?;
        for p in &self.pairs {
            let gamma = p.comm.gamma_total();
            let (links, nt) = p.scheme.dim();
            for l in 0..links {
                for t in 0..nt {
                    let [n, lambda, tau, nu, nc, g] = row_values(p, &gamma, l, t);
                    w.write_record([
                        p.pair_id.to_string(),
                        p.scenario.clone(),
                        p.seed.to_string(),
                        l.to_string(),
                        t.to_string(),
                        n.to_string(),
                        lambda.to_string(),
                        tau.to_string(),
                        nu.to_string(),
                        p.scheme.a[[l, t]].to_string(),
                        p.scheme.b[[l, t]].to_string(),
                        p.scheme.s[[l, t]].to_string(),
                        nc.to_string(),
                        g.to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let manifest_path = dir.join("dataset.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("dataset.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let (links, nt) = (manifest.num_links, manifest.durations.len());

        #[derive(Deserialize)]
        struct Row {
            pair_id: usize,
            scenario: String,
            seed: u64,
            link_id: usize,
            t: usize,
            n: f64,
            lambda: f64,
            tau: f64,
            nu: f64,
            a: f64,
            b: f64,
            s: f64,
            n_c: f64,
            gamma: f64,
        }
        struct Partial {
            scenario: String,
            seed: u64,
            m: MobilityFeatures,
            a: Array2<f64>,
            b: Array2<f64>,
            s: Array2<f64>,
            nc: Array2<f64>,
            gamma: Array2<f64>,
            rows: usize,
        }
        let mut partial: BTreeMap<usize, Partial> = BTreeMap::new();
        let csv_path = dir.join("pairs.csv");
        let mut reader = csv::Reader::from_path(&csv_path)?;
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let r = row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            if r.link_id >= links || r.t >= nt {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("cell ({}, {}) outside ({links}, {nt})", r.link_id, r.t),
                });
            }
            let p = partial.entry(r.pair_id).or_insert_with(|| Partial {
                scenario: r.scenario.clone(),
                seed: r.seed,
                m: MobilityFeatures::zeros(links, nt),
                a: Array2::zeros((links, nt)),
                b: Array2::zeros((links, nt)),
                s: Array2::zeros((links, nt)),
                nc: Array2::zeros((links, nt)),
                gamma: Array2::zeros((links, nt)),
                rows: 0,
            });
            let c = [r.link_id, r.t];
            p.m.n[c] = r.n;
            p.m.lambda[c] = r.lambda;
            p.m.tau[c] = r.tau;
            p.m.nu[c] = r.nu;
            p.m.occupied[c] = r.n > 0.0;
            p.a[c] = r.a;
            p.b[c] = r.b;
            p.s[c] = r.s;
            p.nc[c] = r.n_c;
            p.gamma[c] = r.gamma;
            p.rows += 1;
        }

        let mut shared: BTreeMap<String, Arc<MobilityFeatures>> = BTreeMap::new();
        let mut pairs = Vec::with_capacity(partial.len());
        for (id, p) in partial {
            if id != pairs.len() || p.rows != links * nt {
                return Err(Error::Data(format!("pair {id} is incomplete or out of sequence")));
            }
            let mobility = shared
                .entry(p.scenario.clone())
                .or_insert_with(|| Arc::new(p.m.clone()))
                .clone();
            let provenance = if manifest.measured_pairs.contains(&id) {
                Provenance::Measured
            } else {
                Provenance::Simulated
            };
            pairs.push(TrainingPair {
                pair_id: id,
                scenario: p.scenario,
                seed: p.seed,
                provenance,
                mobility,
                scheme: FcScheme::new(p.a, p.b, p.s)?,
                comm: CommFeatures {
                    nc: p.nc,
                    gamma: p.gamma.into_shape_with_order((links, nt, 1)).expect("same size"),
                },
            });
        }
        if pairs.len() != manifest.num_pairs {
            return Err(Error::Data(format!(
                "manifest lists {} pairs, pairs.csv holds {}",
                manifest.num_pairs,
                pairs.len()
            )));
        }
        Ok(Self { manifest, pairs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::build_manhattan;

    #[test]
    fn extremes_are_appended() {
        let g = build_manhattan(5, 4, 150.0).unwrap();
        let e = g.raster_embed(9, 7, true).unwrap();
        let s = gen_random_schemes(10, &e, 2, 1, SchemeStyle::Mixed).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s[10], all_on(31, 2));
        assert_eq!(s[11], all_zero(31, 2));
        assert!(gen_random_schemes(0, &e, 1, 1, SchemeStyle::Iid).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let g = build_manhattan(5, 4, 150.0).unwrap();
        let e = g.raster_embed(9, 7, true).unwrap();
        for style in [SchemeStyle::Iid, SchemeStyle::Smoothed, SchemeStyle::Zonal] {
            let a = gen_random_schemes(1, &e, 1, 42, style).unwrap();
            let b = gen_random_schemes(1, &e, 1, 42, style).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, gen_random_schemes(1, &e, 1, 43, style).unwrap());
        }
    }

    #[test]
    fn smoothed_fields_are_spatially_coherent() {
        let g = build_manhattan(5, 4, 150.0).unwrap();
        let e = g.raster_embed(9, 7, true).unwrap();
        let mut rng = stream(3, "test", 0);
        // Neighbouring cells are closer in value than random pairs, on average.
        let (mut near, mut far) = (0.0, 0.0);
        for _ in 0..200 {
            let f = smooth_field(&e, &mut rng);
            near += (f[0] - f[1]).abs();
            far += (f[0] - f[e.h * e.w - 1]).abs();
        }
        assert!(near < far, "{near} vs {far}");
    }

    #[test]
    fn style_names_parse() {
        assert_eq!("mixed".parse::<SchemeStyle>().unwrap(), SchemeStyle::Mixed);
        assert!("gaussian".parse::<SchemeStyle>().is_err());
    }
}
