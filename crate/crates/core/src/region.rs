//! Rate-region boundaries along rate profiles.
//!
//! A rate pair `(r_1, r_2)` is checked by fixing the private rates at the
//! vertices of the polyhedron of admissible `(r_11p, r_12p)` and solving the
//! power-minimization relaxation at each vertex.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{self, SolveOptions, SolveStatus};
use crate::error::{Error, Result};
use crate::model::{log2_1p, BeamformerSet, ChannelState, RateSplit, SystemConfig};

/// Minimum total private rate `c_j` each BS must carry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivateLoad {
    pub c: [f64; 2],
}

pub fn private_load(cfg: &SystemConfig, r_pair: [f64; 2]) -> PrivateLoad {
    let sum = r_pair[0] + r_pair[1];
    PrivateLoad { c: [(sum - cfg.c_bh[1]).max(0.0), (sum - cfg.c_bh[0]).max(0.0)] }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Full rate splitting.
    Frs,
    /// Private messages only from the serving BS.
    Ars,
    /// Interference channel: everything private to the serving BS.
    Ic,
    /// Network MIMO: everything shared.
    Nm,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [SchemeKind::Frs, SchemeKind::Ars, SchemeKind::Ic, SchemeKind::Nm];

    pub fn label(self) -> &'static str {
        match self {
            SchemeKind::Frs => "FRS",
            SchemeKind::Ars => "ARS",
            SchemeKind::Ic => "IC",
            SchemeKind::Nm => "NM",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FRS" => Ok(SchemeKind::Frs),
            "ARS" => Ok(SchemeKind::Ars),
            "IC" => Ok(SchemeKind::Ic),
            "NM" => Ok(SchemeKind::Nm),
            _ => Err(Error::InvalidConfig(format!("unknown scheme `{s}`"))),
        }
    }
}

/// Order in which polyhedron corners are tried. The first feasible corner
/// determines the reported split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CornerOrder {
    /// `SharedFirst` when `(0, 0)` lies in the polyhedron, else `PrivateFirst`.
    #[default]
    Auto,
    /// Ascending `x + y`.
    SharedFirst,
    /// Descending `x + y`.
    PrivateFirst,
}

const GEOM_TOL: f64 = 1e-12;

/// Keeps the part of a convex polygon where `a x + b y <= d`.
fn clip(poly: &[(f64, f64)], a: f64, b: f64, d: f64) -> Vec<(f64, f64)> {
    let f = |p: (f64, f64)| a * p.0 + b * p.1 - d;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let (fp, fq) = (f(p), f(q));
        if fp <= GEOM_TOL {
            out.push(p);
        }
        if (fp < -GEOM_TOL && fq > GEOM_TOL) || (fp > GEOM_TOL && fq < -GEOM_TOL) {
            let t = fp / (fp - fq);
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}

/// Vertices of `{0 <= x <= c_1, 0 <= y <= c_2, c_1 + c_2 - r_2 <= x + y <= r_1}`
/// in counterclockwise order; empty when the set is empty.
pub fn corner_points(load: &PrivateLoad, r_pair: [f64; 2]) -> Vec<(f64, f64)> {
    let [c1, c2] = load.c;
    let lower = c1 + c2 - r_pair[1];
    let upper = r_pair[0];
    if lower > upper + GEOM_TOL {
        return Vec::new();
    }
    let mut poly = vec![(0.0, 0.0), (c1, 0.0), (c1, c2), (0.0, c2)];
    poly = clip(&poly, 1.0, 1.0, upper);
    poly = clip(&poly, -1.0, -1.0, -lower);
    let scale = 1.0 + c1.max(c2);
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(poly.len());
    for p in poly {
        let p = (p.0.clamp(0.0, c1), p.1.clamp(0.0, c2));
        let dup = out.iter().any(|q| (q.0 - p.0).abs() <= 1e-10 * scale && (q.1 - p.1).abs() <= 1e-10 * scale);
        if !dup {
            out.push(p);
        }
    }
    out
}

fn in_polyhedron(load: &PrivateLoad, r_pair: [f64; 2], p: (f64, f64)) -> bool {
    let [c1, c2] = load.c;
    let s = p.0 + p.1;
    p.0 >= -GEOM_TOL
        && p.1 >= -GEOM_TOL
        && p.0 <= c1 + GEOM_TOL
        && p.1 <= c2 + GEOM_TOL
        && s <= r_pair[0] + GEOM_TOL
        && s >= c1 + c2 - r_pair[1] - GEOM_TOL
}

/// Sorts corners by the given policy; ties keep the lexicographic order.
pub fn order_corners(corners: &mut [(f64, f64)], load: &PrivateLoad, r_pair: [f64; 2], order: CornerOrder) {
    let order = match order {
        CornerOrder::Auto if in_polyhedron(load, r_pair, (0.0, 0.0)) => CornerOrder::SharedFirst,
        CornerOrder::Auto => CornerOrder::PrivateFirst,
        o => o,
    };
    corners.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    match order {
        CornerOrder::SharedFirst => corners.sort_by(|a, b| (a.0 + a.1).total_cmp(&(b.0 + b.1))),
        _ => corners.sort_by(|a, b| (b.0 + b.1).total_cmp(&(a.0 + a.1))),
    }
}

fn split_at(load: &PrivateLoad, r_pair: [f64; 2], p: (f64, f64)) -> RateSplit {
    let [c1, c2] = load.c;
    RateSplit { r: r_pair, r_p: [[p.0, p.1], [(c1 - p.0).max(0.0), (c2 - p.1).max(0.0)]] }
}

/// Candidate private splits of a scheme, in the order they are tried.
pub fn candidate_splits(cfg: &SystemConfig, r_pair: [f64; 2], scheme: SchemeKind, order: CornerOrder) -> Vec<RateSplit> {
    let load = private_load(cfg, r_pair);
    match scheme {
        SchemeKind::Frs => {
            let mut corners = corner_points(&load, r_pair);
            order_corners(&mut corners, &load, r_pair, order);
            corners.into_iter().map(|p| split_at(&load, r_pair, p)).collect()
        }
        SchemeKind::Ars => {
            // No cross private traffic: x = c_1, y = 0.
            let p = (load.c[0], 0.0);
            if in_polyhedron(&load, r_pair, p) {
                vec![split_at(&load, r_pair, p)]
            } else {
                Vec::new()
            }
        }
        SchemeKind::Ic => {
            if (0..2).all(|i| r_pair[i] <= cfg.c_bh[i] + GEOM_TOL) {
                vec![RateSplit { r: r_pair, r_p: [[r_pair[0], 0.0], [0.0, r_pair[1]]] }]
            } else {
                Vec::new()
            }
        }
        SchemeKind::Nm => {
            if load.c.iter().all(|&c| c <= GEOM_TOL) {
                vec![RateSplit { r: r_pair, r_p: [[0.0; 2]; 2] }]
            } else {
                Vec::new()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub solve: SolveOptions,
    pub corner_order: CornerOrder,
    /// Interior grid size `k` probed when every corner fails (FRS only).
    pub exhaustive_k: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { solve: SolveOptions::default(), corner_order: CornerOrder::Auto, exhaustive_k: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct PairCheck {
    pub feasible: bool,
    pub split: Option<RateSplit>,
    pub bf: Option<BeamformerSet>,
    pub solves: usize,
    pub numerical_failures: usize,
    /// Feasibility was only found at an interior grid point.
    pub interior_counterexample: Option<(f64, f64)>,
}

fn try_split(cfg: &SystemConfig, ch: &ChannelState, rs: &RateSplit, opts: &SolveOptions) -> Result<(Option<BeamformerSet>, bool)> {
    let prob = conic::build_relaxation(cfg, ch, rs)?;
    let res = conic::solve(&prob, opts);
    match res.status {
        SolveStatus::Optimal => {
            let ext_ok = res.extraction.as_ref().is_none_or(|e| e.valid);
            if !ext_ok {
                log::warn!("relaxation feasible but recovered beamformers fail validation at {rs:?}");
            }
            Ok((res.bf, false))
        }
        SolveStatus::Infeasible => Ok((None, false)),
        SolveStatus::NumericalFailure => {
            log::warn!("numerical failure while checking {rs:?}; treated as infeasible");
            Ok((None, true))
        }
    }
}

pub fn check_rate_pair(
    cfg: &SystemConfig,
    ch: &ChannelState,
    r_pair: [f64; 2],
    scheme: SchemeKind,
    opts: &CheckOptions,
) -> Result<PairCheck> {
    if r_pair.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::InvalidRates(format!("rate pair must be nonnegative, got {r_pair:?}")));
    }
    let mut out = PairCheck {
        feasible: false,
        split: None,
        bf: None,
        solves: 0,
        numerical_failures: 0,
        interior_counterexample: None,
    };
    for rs in candidate_splits(cfg, r_pair, scheme, opts.corner_order) {
        out.solves += 1;
        let (bf, failed) = try_split(cfg, ch, &rs, &opts.solve)?;
        out.numerical_failures += failed as usize;
        if let Some(bf) = bf {
            out.feasible = true;
            out.split = Some(rs);
            out.bf = Some(bf);
            return Ok(out);
        }
    }
    if scheme == SchemeKind::Frs && opts.exhaustive_k > 0 {
        let load = private_load(cfg, r_pair);
        let k = opts.exhaustive_k;
        for a in 1..=k {
            for b in 1..=k {
                let p = (load.c[0] * a as f64 / (k + 1) as f64, load.c[1] * b as f64 / (k + 1) as f64);
                if !in_polyhedron(&load, r_pair, p) {
                    continue;
                }
                let rs = split_at(&load, r_pair, p);
                out.solves += 1;
                let (bf, failed) = try_split(cfg, ch, &rs, &opts.solve)?;
                out.numerical_failures += failed as usize;
                if let Some(bf) = bf {
                    log::warn!("rate pair {r_pair:?} feasible at interior point {p:?} but at no corner");
                    out.feasible = true;
                    out.split = Some(rs);
                    out.bf = Some(bf);
                    out.interior_counterexample = Some(p);
                    return Ok(out);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BoundaryPoint {
    pub alpha: f64,
    pub scheme: SchemeKind,
    /// Sum rate `r` with `r_1 = alpha r`, `r_2 = (1 - alpha) r`.
    pub r: f64,
    pub r_pair: [f64; 2],
    pub split: RateSplit,
    pub bf: BeamformerSet,
    pub private_fraction: f64,
    pub numerical_failures: usize,
    pub interior_counterexamples: usize,
}

impl BoundaryPoint {
    pub fn csv_row(&self) -> CsvRow {
        CsvRow {
            alpha: self.alpha,
            r_pair: self.r_pair,
            r_p: self.split.r_p,
            private_fraction: self.private_fraction,
            scheme: self.scheme.label().to_string(),
        }
    }
}

fn profile(alpha: f64, r: f64) -> [f64; 2] {
    [alpha * r, (1.0 - alpha) * r]
}

/// Upper bound on the sum rate along profile `alpha` from the single-user
/// capacity of each user with both BSs transmitting at full power.
pub fn air_sum_rate_bound(cfg: &SystemConfig, ch: &ChannelState, alpha: f64) -> f64 {
    let cap = |i: usize| {
        let g = ch.h(i, 0).norm() * cfg.p[0].sqrt() + ch.h(i, 1).norm() * cfg.p[1].sqrt();
        log2_1p(g * g / cfg.noise_var)
    };
    let mut bound = f64::INFINITY;
    if alpha > 0.0 {
        bound = bound.min(cap(0) / alpha);
    }
    if alpha < 1.0 {
        bound = bound.min(cap(1) / (1.0 - alpha));
    }
    bound
}

/// Largest sum rate along profile `alpha` (within `tol_r`) at which the
/// scheme is feasible.
pub fn bisect_sum_rate(
    cfg: &SystemConfig,
    ch: &ChannelState,
    alpha: f64,
    scheme: SchemeKind,
    tol_r: f64,
    opts: &CheckOptions,
) -> Result<BoundaryPoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(tol_r > 0.0) {
        return Err(Error::InvalidConfig(format!("tol_r must be positive, got {tol_r}")));
    }
    let mut failures = 0;
    let mut counterexamples = 0;
    let mut best = (0.0, RateSplit::default(), BeamformerSet::zeros(cfg.n_t));
    let probe = |r: f64, failures: &mut usize, counterexamples: &mut usize| -> Result<Option<(RateSplit, BeamformerSet)>> {
        let chk = check_rate_pair(cfg, ch, profile(alpha, r), scheme, opts)?;
        *failures += chk.numerical_failures;
        *counterexamples += chk.interior_counterexample.is_some() as usize;
        Ok(match (chk.split, chk.bf) {
            (Some(s), Some(b)) if chk.feasible => Some((s, b)),
            _ => None,
        })
    };
    let mut lo = 0.0;
    let mut hi = (cfg.c_bh[0] + cfg.c_bh[1]).min(air_sum_rate_bound(cfg, ch, alpha));
    if hi > 0.0 {
        if let Some((s, b)) = probe(hi, &mut failures, &mut counterexamples)? {
            best = (hi, s, b);
            lo = hi;
        }
        while hi - lo > tol_r {
            let mid = 0.5 * (lo + hi);
            match probe(mid, &mut failures, &mut counterexamples)? {
                Some((s, b)) => {
                    best = (mid, s, b);
                    lo = mid;
                }
                None => hi = mid,
            }
        }
    }
    let (r, split, bf) = best;
    Ok(BoundaryPoint {
        alpha,
        scheme,
        r,
        r_pair: profile(alpha, r),
        private_fraction: if r > 0.0 { split.total_private() / r } else { 0.0 },
        split,
        bf,
        numerical_failures: failures,
        interior_counterexamples: counterexamples,
    })
}

/// `n` evenly spaced profile fractions from 0 to 1.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

/// One boundary point per `alpha`, computed in parallel.
pub fn region_boundary(
    cfg: &SystemConfig,
    ch: &ChannelState,
    scheme: SchemeKind,
    alphas: &[f64],
    tol_r: f64,
    opts: &CheckOptions,
) -> Result<Vec<BoundaryPoint>> {
    alphas.par_iter().map(|&a| bisect_sum_rate(cfg, ch, a, scheme, tol_r, opts)).collect()
}

/// One line of the boundary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub alpha: f64,
    pub r_pair: [f64; 2],
    pub r_p: [[f64; 2]; 2],
    pub private_fraction: f64,
    pub scheme: String,
}

pub const CSV_HEADER: &str = "alpha,r1,r2,r11p,r12p,r21p,r22p,private_fraction,scheme";

pub fn write_csv<W: Write>(mut w: W, rows: impl IntoIterator<Item = CsvRow>) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.alpha, r.r_pair[0], r.r_pair[1], r.r_p[0][0], r.r_p[0][1], r.r_p[1][0], r.r_p[1][1], r.private_fraction, r.scheme
        )?;
    }
    Ok(())
}

pub fn write_boundary_csv<W: Write>(w: W, points: &[BoundaryPoint]) -> Result<()> {
    write_csv(w, points.iter().map(BoundaryPoint::csv_row))
}
