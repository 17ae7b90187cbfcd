//! Floating-content strategy arrays and the resource-cost objective.

use std::path::Path;

use ndarray::{s, Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcsim::{success_ratio, SimOutcome};

/// Content size used throughout the evaluation setup: 8 MB.
pub const DEFAULT_CONTENT_BITS: f64 = 8.0 * 1024.0 * 1024.0 * 8.0;
pub const DEFAULT_ALPHA0: f64 = 0.9;

/// Per-(link, interval) infectivity `a`, recovery `b` and seeding ratio `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcScheme {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub s: Array2<f64>,
}

impl FcScheme {
    /// Rejects mismatched shapes, empty dimensions and entries outside `[0, 1]`.
    pub fn new(a: Array2<f64>, b: Array2<f64>, s: Array2<f64>) -> Result<Self> {
        if a.dim() != b.dim() || a.dim() != s.dim() {
            return Err(Error::Shape(format!(
                "a, b, s shapes differ: {:?}, {:?}, {:?}",
                a.dim(),
                b.dim(),
                s.dim()
            )));
        }
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::Shape("scheme dimensions must be positive".into()));
        }
        for (name, arr) in [("a", &a), ("b", &b), ("s", &s)] {
            if let Some(((l, t), v)) = arr.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidParameter(format!(
                    "{name}[{l},{t}] = {v} is outside [0, 1]"
                )));
            }
        }
        Ok(Self { a, b, s })
    }

    pub fn uniform(links: usize, intervals: usize, a: f64, b: f64, s: f64) -> Result<Self> {
        let dim = (links, intervals);
        Self::new(
            Array2::from_elem(dim, a),
            Array2::from_elem(dim, b),
            Array2::from_elem(dim, s),
        )
    }

    /// Clamp arbitrary values into `[0, 1]` (NaN becomes 0).
    pub fn clamped(a: Array2<f64>, b: Array2<f64>, s: Array2<f64>) -> Result<Self> {
        let c = |m: Array2<f64>| m.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(c(a), c(b), c(s))
    }

    pub fn num_links(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_intervals(&self) -> usize {
        self.a.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.a.dim()
    }

    pub fn plane(&self, p: usize) -> &Array2<f64> {
        match p {
            0 => &self.a,
            1 => &self.b,
            2 => &self.s,
            _ => panic!("scheme plane {p} out of range"),
        }
    }

    /// `self >= other` componentwise in all three parameters.
    pub fn dominates(&self, other: &FcScheme) -> bool {
        self.dim() == other.dim()
            && (0..3).all(|p| Zip::from(self.plane(p)).and(other.plane(p)).all(|x, y| x >= y))
    }

    /// Intervals `from..`.
    pub fn tail(&self, from: usize) -> FcScheme {
        let sl = s![.., from..];
        FcScheme {
            a: self.a.slice(sl).to_owned(),
            b: self.b.slice(sl).to_owned(),
            s: self.s.slice(sl).to_owned(),
        }
    }

    /// Keep intervals `..from` of `self` and take the rest from `tail`.
    pub fn splice(&self, from: usize, tail: &FcScheme) -> Result<FcScheme> {
        if tail.num_links() != self.num_links() || from + tail.num_intervals() != self.num_intervals() {
            return Err(Error::Shape(format!(
                "cannot splice {:?} into {:?} at interval {from}",
                tail.dim(),
                self.dim()
            )));
        }
        let mut out = self.clone();
        out.a.slice_mut(s![.., from..]).assign(&tail.a);
        out.b.slice_mut(s![.., from..]).assign(&tail.b);
        out.s.slice_mut(s![.., from..]).assign(&tail.s);
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["link_id", "t", "a", "b", "s"])?;
        for ((l, t), a) in self.a.indexed_iter() {
            w.write_record([
                l.to_string(),
                t.to_string(),
                a.to_string(),
                self.b[[l, t]].to_string(),
                self.s[[l, t]].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<FcScheme> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("column {i} is not a number"),
                    })
            };
            rows.push((num(0)? as usize, num(1)? as usize, num(2)?, num(3)?, num(4)?));
        }
        let links = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let intervals = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != links * intervals {
            return Err(Error::Shape(format!(
                "scheme file has {} rows, expected {links} x {intervals}",
                rows.len()
            )));
        }
        let mut a = Array2::zeros((links, intervals));
        let mut b = a.clone();
        let mut s = a.clone();
        for (l, t, va, vb, vs) in rows {
            a[[l, t]] = va;
            b[[l, t]] = vb;
            s[[l, t]] = vs;
        }
        FcScheme::new(a, b, s)
    }
}

/// Every entry set to (1, 1, 1): replicate at every opportunity, never drop,
/// seed everyone. The maximal-availability reference.
pub fn all_on(links: usize, intervals: usize) -> FcScheme {
    FcScheme::uniform(links, intervals, 1.0, 1.0, 1.0).expect("valid dimensions")
}

pub fn all_zero(links: usize, intervals: usize) -> FcScheme {
    FcScheme::uniform(links, intervals, 0.0, 0.0, 0.0).expect("valid dimensions")
}

/// Coefficients of the cost function.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub beta: f64,
    pub delta: f64,
    /// Per-(link, interval, technology) communication cost; `None` means 1 everywhere.
    pub theta: Option<Array3<f64>>,
    /// Interval durations, s.
    pub durations: Vec<f64>,
    /// Content size, bits.
    pub content_bits: f64,
}

impl CostWeights {
    pub fn new(durations: Vec<f64>) -> Self {
        Self {
            beta: 1.0,
            delta: 1.0,
            theta: None,
            durations,
            content_bits: DEFAULT_CONTENT_BITS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.beta >= 0.0) {
            errors.push(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.delta >= 0.0) {
            errors.push(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.durations.iter().sum::<f64>() > 0.0) || self.durations.iter().any(|d| *d < 0.0) {
            errors.push("interval durations must be non-negative with a positive sum".into());
        }
        if !(self.content_bits > 0.0) {
            errors.push(format!("content size must be positive, got {}", self.content_bits));
        }
        if self.theta.as_ref().is_some_and(|t| t.iter().any(|v| !(*v >= 0.0))) {
            errors.push("theta must be non-negative".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Weights restricted to intervals `from..`.
    pub fn tail(&self, from: usize) -> Self {
        Self {
            theta: self.theta.as_ref().map(|t| t.slice(s![.., from.., ..]).to_owned()),
            durations: self.durations[from..].to_vec(),
            ..self.clone()
        }
    }
}

/// Cost split into its three components (all already multiplied by `D`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub storage: f64,
    pub communication: f64,
    pub seeding: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.storage + self.communication + self.seeding
    }
}

/// Cost from raw communication features.
///
/// `storage + communication = sum_{l,t} d_t D (nc + beta sum_u theta gamma) / sum_t d_t`
/// and `seeding = delta D sum_{l,t} [s - v]^+`, the seeding part left outside
/// the duration normalization.
pub fn cost_from_features(
    nc: &Array2<f64>,
    gamma: &Array3<f64>,
    v: &Array2<f64>,
    scheme: &FcScheme,
    w: &CostWeights,
) -> Result<CostBreakdown> {
    let dim = scheme.dim();
    if nc.dim() != dim || v.dim() != dim || (gamma.dim().0, gamma.dim().1) != dim || w.durations.len() != dim.1 {
        return Err(Error::Shape(format!(
            "cost inputs disagree: scheme {dim:?}, n_c {:?}, gamma {:?}, v {:?}, {} durations",
            nc.dim(),
            gamma.dim(),
            v.dim(),
            w.durations.len()
        )));
    }
    if let Some(theta) = &w.theta {
        if theta.dim() != gamma.dim() {
            return Err(Error::Shape(format!(
                "theta {:?} does not match gamma {:?}",
                theta.dim(),
                gamma.dim()
            )));
        }
    }
    let total_d: f64 = w.durations.iter().sum();
    let d = w.content_bits;
    let mut out = CostBreakdown::default();
    for ((l, t), &n) in nc.indexed_iter() {
        let weight = w.durations[t] * d / total_d;
        let comm: f64 = (0..gamma.dim().2)
            .map(|u| w.theta.as_ref().map_or(1.0, |th| th[[l, t, u]]) * gamma[[l, t, u]])
            .sum();
        out.storage += weight * n;
        out.communication += weight * w.beta * comm;
        out.seeding += w.delta * d * (scheme.s[[l, t]] - v[[l, t]]).max(0.0);
    }
    Ok(out)
}

pub fn cost_breakdown(outcome: &SimOutcome, scheme: &FcScheme, w: &CostWeights) -> Result<CostBreakdown> {
    cost_from_features(&outcome.nc, &outcome.gamma, &outcome.v, scheme, w)
}

/// Resource cost of running `scheme`, measured by `outcome`.
pub fn scheme_cost(outcome: &SimOutcome, scheme: &FcScheme, w: &CostWeights) -> Result<f64> {
    cost_breakdown(outcome, scheme, w).map(|c| c.total())
}

/// Zone of interest, target success ratio and floating period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub zoi: Vec<usize>,
    pub alpha0: f64,
    pub durations: Vec<f64>,
}

impl ServiceRequest {
    pub fn validate(&self, links: usize) -> Result<()> {
        let mut errors = Vec::new();
        if self.zoi.is_empty() {
            errors.push("zone of interest is empty".to_string());
        }
        if let Some(l) = self.zoi.iter().find(|&&l| l >= links) {
            errors.push(format!("zone of interest link {l} is not in the grid ({links} links)"));
        }
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            errors.push(format!("alpha0 must lie in (0, 1], got {}", self.alpha0));
        }
        if self.durations.is_empty() || self.durations.iter().any(|d| !(*d > 0.0)) {
            errors.push("floating period needs positive interval durations".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

/// Success ratio per interval over `zoi`; `None` where the zone was empty.
pub fn alphas(outcome: &SimOutcome, zoi: &[usize]) -> Vec<Option<f64>> {
    (0..outcome.num_intervals())
        .map(|t| success_ratio(outcome, zoi, t).ok())
        .collect()
}

/// `alpha_t >= alpha0` in every interval; an undefined ratio is infeasible.
pub fn is_feasible(outcome: &SimOutcome, req: &ServiceRequest) -> bool {
    alphas_feasible(&alphas(outcome, &req.zoi), req.alpha0)
}

pub fn alphas_feasible(alphas: &[Option<f64>], alpha0: f64) -> bool {
    alphas.iter().all(|a| a.is_some_and(|a| a >= alpha0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn outcome_with(nc: Array2<f64>, gamma: Array3<f64>, v: Array2<f64>) -> SimOutcome {
        let dim = nc.dim();
        SimOutcome {
            n: nc.mapv(|x| x + 1.0),
            nc,
            gamma,
            v,
            seeded: Array2::zeros(dim),
            dropped: Array2::zeros(dim),
            alpha: None,
            tick_secs: 1.0,
            seed: 0,
            events: Vec::new(),
        }
    }

    #[test]
    fn hand_evaluated_cost() {
        // L = 2, T = 1, n_c totals 12, gamma totals 3, v = 0, s = 1.
        let nc = Array2::from_shape_vec((2, 1), vec![7.0, 5.0]).unwrap();
        let gamma = Array3::from_shape_vec((2, 1, 1), vec![1.0, 2.0]).unwrap();
        let o = outcome_with(nc, gamma, Array2::zeros((2, 1)));
        let mut w = CostWeights::new(vec![3600.0]);
        w.content_bits = 10.0;
        let sch = all_on(2, 1);
        let c = scheme_cost(&o, &sch, &w).unwrap();
        assert!((c - 17.0 * 10.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_leave_storage_only() {
        let nc = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Array3::from_elem((2, 2, 1), 5.0);
        let o = outcome_with(nc, gamma, Array2::zeros((2, 2)));
        let mut w = CostWeights::new(vec![1000.0, 3000.0]);
        w.beta = 0.0;
        w.delta = 0.0;
        w.content_bits = 1.0;
        let c = cost_breakdown(&o, &all_on(2, 2), &w).unwrap();
        assert_eq!(c.communication, 0.0);
        assert_eq!(c.seeding, 0.0);
        // (1 + 3) * 0.25 + (2 + 4) * 0.75
        assert!((c.total() - 5.5).abs() < 1e-12);
    }

    #[test]
    fn seeding_vanishes_when_availability_covers_target() {
        let o = outcome_with(
            Array2::zeros((3, 2)),
            Array3::zeros((3, 2, 1)),
            Array2::from_elem((3, 2), 0.6),
        );
        let sch = FcScheme::uniform(3, 2, 1.0, 1.0, 0.6).unwrap();
        let c = cost_breakdown(&o, &sch, &CostWeights::new(vec![1.0, 1.0])).unwrap();
        assert_eq!(c.seeding, 0.0);
    }

    #[test]
    fn shape_errors() {
        let o = outcome_with(Array2::zeros((3, 1)), Array3::zeros((3, 1, 1)), Array2::zeros((3, 1)));
        assert!(matches!(
            scheme_cost(&o, &all_on(2, 1), &CostWeights::new(vec![1.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn constructor_rejects_out_of_range() {
        let ok = Array2::from_elem((2, 1), 0.5);
        let bad = Array2::from_elem((2, 1), 1.5);
        assert!(FcScheme::new(ok.clone(), ok.clone(), ok.clone()).is_ok());
        assert!(FcScheme::new(ok.clone(), bad.clone(), ok.clone()).is_err());
        assert!(FcScheme::new(ok.clone(), ok.clone(), -ok.clone()).is_err());
        assert!(FcScheme::new(ok.clone(), ok.clone(), Array2::zeros((3, 1))).is_err());
        let c = FcScheme::clamped(bad.clone(), -bad, ok).unwrap();
        assert!(c.a.iter().all(|&v| v == 1.0) && c.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_on_shape() {
        let s = all_on(31, 1);
        assert_eq!(s.dim(), (31, 1));
        assert!(s.a.iter().chain(s.b.iter()).chain(s.s.iter()).all(|&v| v == 1.0));
        assert!(s.dominates(&all_zero(31, 1)));
        assert!(!all_zero(31, 1).dominates(&s));
    }

    #[test]
    fn feasibility_verdicts() {
        let req = |a0| ServiceRequest {
            zoi: vec![0],
            alpha0: a0,
            durations: vec![1.0, 1.0],
        };
        assert!(alphas_feasible(&[Some(0.95), Some(0.92)], 0.9));
        assert!(!alphas_feasible(&[Some(0.95), Some(0.89)], 0.9));
        assert!(!alphas_feasible(&[Some(0.95), None], 0.9));
        assert!(req(DEFAULT_ALPHA0).validate(3).is_ok());
        assert!(req(0.0).validate(3).is_err());
        assert!(ServiceRequest { zoi: vec![], ..req(0.9) }.validate(3).is_err());
        assert!(ServiceRequest { zoi: vec![5], ..req(0.9) }.validate(3).is_err());
    }

    #[test]
    fn splice_and_tail() {
        let base = all_zero(2, 3);
        let tail = all_on(2, 2);
        let sp = base.splice(1, &tail).unwrap();
        assert_eq!(sp.a.column(0).sum(), 0.0);
        assert_eq!(sp.tail(1), tail);
        assert!(base.splice(2, &tail).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let sch = FcScheme::new(
            Array2::from_shape_fn((3, 2), |(l, t)| (l + t) as f64 / 10.0),
            Array2::from_elem((3, 2), 0.25),
            Array2::from_shape_fn((3, 2), |(l, _)| l as f64 / 3.0),
        )
        .unwrap();
        sch.write_csv(&p).unwrap();
        assert_eq!(FcScheme::read_csv(&p).unwrap(), sch);
    }
}
