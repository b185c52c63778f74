//! Quantized backhaul with oblivious base stations.
//!
//! The central processor designs joint precoders `w_k` and sends BS `j` a
//! quantized version of its transmit signal, modeled as `x_j + q_j` with
//! Gaussian `q_j`. Quantization noise reaches the users as extra noise.

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::BFGS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::conic::{principal_factor, solve_hermitian, IpmSettings, SolveOptions};
use crate::error::{Error, Result};
use crate::model::{exp2_m1, gain, log2_1p, other, CMat, CVec, ChannelState, SystemConfig, C64};
use crate::region::{self, air_sum_rate_bound, CheckOptions, CsvRow, SchemeKind};

/// Joint precoders and per-BS quantization noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct QnmDesign {
    /// `w[k] = [w_k1; w_k2]`, length `2 n_t`.
    pub w: [CVec; 2],
    /// `n_t x n_t` covariance of `q_j`.
    pub q_cov: [CMat; 2],
}

impl QnmDesign {
    pub fn zeros(n_t: usize) -> Self {
        Self { w: [CVec::zeros(2 * n_t), CVec::zeros(2 * n_t)], q_cov: [CMat::zeros(n_t, n_t), CMat::zeros(n_t, n_t)] }
    }

    pub fn n_t(&self) -> usize {
        self.q_cov[0].nrows()
    }

    /// `w_kj`, the block of user `k`'s precoder sent from BS `j`.
    pub fn block(&self, k: usize, j: usize) -> CVec {
        let n = self.n_t();
        self.w[k].rows(j * n, n).into_owned()
    }

    /// `C_{x_j} = w_1j w_1j^H + w_2j w_2j^H`.
    pub fn signal_cov(&self, j: usize) -> CMat {
        let (a, b) = (self.block(0, j), self.block(1, j));
        &a * a.adjoint() + &b * b.adjoint()
    }

    /// `Tr C_{x_j} + Tr C_{q_j}` per BS.
    pub fn power(&self) -> [f64; 2] {
        [0, 1].map(|j| self.block(0, j).norm_squared() + self.block(1, j).norm_squared() + self.q_cov[j].trace().re)
    }

    fn check_dims(&self) -> Result<()> {
        let n = self.n_t();
        let ok = self.w.iter().all(|w| w.len() == 2 * n) && self.q_cov.iter().all(|q| q.nrows() == n && q.ncols() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("precoders must have length 2 n_t and covariances n_t x n_t".into()))
        }
    }
}

/// Nonzero eigenmodes of one BS's signal covariance and the quantization
/// variance of each mode.
#[derive(Debug, Clone, PartialEq)]
pub struct QnmEigenState {
    /// `n_t x 2` basis of the signal eigenvectors.
    pub u1: CMat,
    pub lam: [f64; 2],
    pub q_var: [f64; 2],
}

/// Eigen-decomposition of `B B^H` for `B = [a, b]` through the 2x2 Gram
/// matrix `B^H B`.
pub fn rank2_eigen(a: &CVec, b: &CVec) -> (CMat, [f64; 2]) {
    let n = a.len();
    let g11 = a.norm_squared();
    let g22 = b.norm_squared();
    let g12 = a.dotc(b);
    let mid = 0.5 * (g11 + g22);
    let rad = (0.25 * (g11 - g22).powi(2) + g12.norm_sqr()).sqrt();
    let lam1 = mid - rad;
    // Cancellation leaves roundoff of order `1e-16 lam_0` in a rank-one `B`.
    let lam = [mid + rad, if lam1 > 1e-12 * (mid + rad) { lam1 } else { 0.0 }];
    let mut u = CMat::zeros(n, 2);
    for (k, &l) in lam.iter().enumerate() {
        if l <= 1e-300 {
            continue;
        }
        // Gram eigenvector for `l`, taken from the better-conditioned row.
        let (v1, v2) = if (l - g22).abs() >= (l - g11).abs() {
            (C64::from(l - g22), g12.conj())
        } else {
            (g12, C64::from(l - g11))
        };
        let (v1, v2) = if v1.norm_sqr() + v2.norm_sqr() > 0.0 {
            (v1, v2)
        } else if k == 0 {
            (C64::from(1.0), C64::from(0.0))
        } else {
            (C64::from(0.0), C64::from(1.0))
        };
        let col = a * v1 + b * v2;
        let norm = col.norm();
        if norm > 0.0 {
            u.set_column(k, &(col / C64::from(norm)));
        }
    }
    (u, lam)
}

impl QnmEigenState {
    /// Eigenmodes of BS `j` in `design`, with `q_var[i] = u_i^H C_q u_i`.
    pub fn from_design(design: &QnmDesign, j: usize) -> Self {
        let (u1, lam) = rank2_eigen(&design.block(0, j), &design.block(1, j));
        let q_var = [0, 1].map(|i| {
            let u = u1.column(i);
            (u.adjoint() * &design.q_cov[j] * u)[(0, 0)].re.max(0.0)
        });
        Self { u1, lam, q_var }
    }

    /// `sum_i log2(1 + lam_i / q_var_i)`.
    pub fn backhaul_rate(&self) -> f64 {
        self.lam
            .iter()
            .zip(&self.q_var)
            .map(|(&l, &q)| {
                if l <= 0.0 {
                    0.0
                } else if q <= 0.0 {
                    f64::INFINITY
                } else {
                    log2_1p(l / q)
                }
            })
            .sum()
    }

    /// `U diag(lam) U^H`.
    pub fn signal_cov(&self) -> CMat {
        let d = CMat::from_diagonal(&CVec::from_vec(self.lam.iter().map(|&l| C64::from(l)).collect()));
        &self.u1 * d * self.u1.adjoint()
    }
}

/// Per-user rate bounds achieved by a design.
pub fn qnm_rates(cfg: &SystemConfig, ch: &ChannelState, design: &QnmDesign) -> Result<[f64; 2]> {
    design.check_dims()?;
    if design.n_t() != ch.n_t() || ch.n_t() != cfg.n_t {
        return Err(Error::Dimension("design, channel and configuration disagree on n_t".into()));
    }
    let mut out = [0.0; 2];
    for (k, r) in out.iter_mut().enumerate() {
        let hk = ch.stacked(k);
        let useful = gain(&hk, &design.w[k]);
        let interf = gain(&hk, &design.w[other(k)]);
        let quant: f64 = (0..2)
            .map(|j| {
                let h = ch.h(k, j);
                (h.transpose() * &design.q_cov[j] * h.map(|z| z.conj()))[(0, 0)].re
            })
            .sum();
        *r = log2_1p(useful / (cfg.noise_var + interf + quant));
    }
    Ok(out)
}

/// Quantization noise variance that makes the single-antenna backhaul
/// constraint hold with equality for signal power `q`.
pub fn qnm_quantizer_nt1(q: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::InvalidConfig(format!("quantizer needs positive backhaul capacity, got {c}")));
    }
    if !(q >= 0.0) {
        return Err(Error::InvalidConfig(format!("signal power must be nonnegative, got {q}")));
    }
    Ok(q / exp2_m1(c))
}

/// Backhaul information rate of each BS.
pub fn qnm_backhaul(design: &QnmDesign) -> [f64; 2] {
    [0, 1].map(|j| QnmEigenState::from_design(design, j).backhaul_rate())
}

/// Checks the backhaul and power constraints of a design.
pub fn check_design(cfg: &SystemConfig, design: &QnmDesign, tol: f64) -> Result<()> {
    design.check_dims()?;
    let bh = qnm_backhaul(design);
    let pw = design.power();
    for j in 0..2 {
        if bh[j] > cfg.c_bh[j] + tol {
            return Err(Error::Infeasible(format!("backhaul of BS {}: {} > {}", j + 1, bh[j], cfg.c_bh[j])));
        }
        if pw[j] > cfg.p[j] * (1.0 + tol) {
            return Err(Error::Infeasible(format!("power of BS {}: {} > {}", j + 1, pw[j], cfg.p[j])));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct QnmOptions {
    pub random_starts: usize,
    pub seed: u64,
    /// Softmin sharpness schedule for the profile objective.
    pub betas: Vec<f64>,
    pub max_iters: u64,
    pub tol_cost: f64,
    /// Bisection tolerance of the single-antenna path.
    pub tol_r: f64,
    pub ipm: IpmSettings,
}

impl Default for QnmOptions {
    fn default() -> Self {
        Self {
            random_starts: 20,
            seed: 0x51_7a7e,
            betas: vec![4.0, 16.0, 64.0, 256.0],
            max_iters: 200,
            tol_cost: 1e-7,
            tol_r: 1e-4,
            ipm: IpmSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QnmPoint {
    pub alpha: f64,
    pub r: f64,
    pub r_pair: [f64; 2],
    /// Rates the design supports, at least `r_pair`.
    pub rates: [f64; 2],
    pub design: QnmDesign,
    pub eigen: [QnmEigenState; 2],
    /// Index of the winning start of the multi-start search.
    pub best_start: Option<usize>,
    pub diagnostic: Option<String>,
}

impl QnmPoint {
    pub fn csv_row(&self) -> CsvRow {
        CsvRow { alpha: self.alpha, r_pair: self.r_pair, r_p: [[0.0; 2]; 2], private_fraction: 0.0, scheme: "QNM".into() }
    }

    fn zero(alpha: f64, n_t: usize, diagnostic: &str) -> Self {
        let design = QnmDesign::zeros(n_t);
        let eigen = [0, 1].map(|j| QnmEigenState::from_design(&design, j));
        Self {
            alpha,
            r: 0.0,
            r_pair: [0.0; 2],
            rates: [0.0; 2],
            design,
            eigen,
            best_start: None,
            diagnostic: Some(diagnostic.into()),
        }
    }

    fn from_design(cfg: &SystemConfig, ch: &ChannelState, alpha: f64, design: QnmDesign, best_start: Option<usize>) -> Result<Self> {
        let rates = qnm_rates(cfg, ch, &design)?;
        let r = profile_rate(alpha, rates);
        let eigen = [0, 1].map(|j| QnmEigenState::from_design(&design, j));
        Ok(Self { alpha, r, r_pair: [alpha * r, (1.0 - alpha) * r], rates, design, eigen, best_start, diagnostic: None })
    }
}

/// Largest `r` with `r_1 >= alpha r` and `r_2 >= (1 - alpha) r`.
fn profile_rate(alpha: f64, rates: [f64; 2]) -> f64 {
    let mut r = f64::INFINITY;
    if alpha > 0.0 {
        r = r.min(rates[0] / alpha);
    }
    if alpha < 1.0 {
        r = r.min(rates[1] / (1.0 - alpha));
    }
    r
}

/// Maximizes the sum rate along profile `alpha`.
pub fn qnm_optimize(cfg: &SystemConfig, ch: &ChannelState, alpha: f64, opts: &QnmOptions) -> Result<QnmPoint> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if ch.n_t() != cfg.n_t {
        return Err(Error::Dimension("channel does not match n_t".into()));
    }
    if cfg.c_bh.iter().any(|&c| c <= 0.0) {
        return Ok(QnmPoint::zero(alpha, cfg.n_t, "a backhaul link has zero capacity"));
    }
    let point = if cfg.n_t == 1 { optimize_single_antenna(cfg, ch, alpha, opts)? } else { optimize_multi_start(cfg, ch, alpha, opts)? };
    check_design(cfg, &point.design, 1e-6)?;
    if point.r <= 0.0 {
        return Ok(QnmPoint { diagnostic: Some("no start reached a nonzero rate".into()), ..point });
    }
    Ok(point)
}

/// One point per `alpha`, computed in parallel.
pub fn qnm_boundary(cfg: &SystemConfig, ch: &ChannelState, alphas: &[f64], opts: &QnmOptions) -> Result<Vec<QnmPoint>> {
    alphas.par_iter().map(|&a| qnm_optimize(cfg, ch, a, opts)).collect()
}

/// Single-antenna BSs: with the closed-form quantizer every rate target is
/// a convex feasibility problem in `V_k = w_k w_k^H`, so the profile is
/// bisected exactly.
fn optimize_single_antenna(cfg: &SystemConfig, ch: &ChannelState, alpha: f64, opts: &QnmOptions) -> Result<QnmPoint> {
    let scale = [0, 1].map(|j| exp2_m1(cfg.c_bh[j]));
    let sel = |j: usize| CMat::from_diagonal(&CVec::from_fn(2, |k, _| C64::from(if k == j { 1.0 } else { 0.0 })));
    let d = [sel(0), sel(1)];
    let r_mat = [0, 1].map(|k| {
        let v = ch.stacked(k).map(|z| z.conj());
        &v * v.adjoint()
    });
    let feasible = |r: f64| -> Option<QnmDesign> {
        let gamma = [exp2_m1(alpha * r), exp2_m1((1.0 - alpha) * r)];
        let mut rows: Vec<(Vec<(usize, CMat)>, f64)> = Vec::new();
        for k in 0..2 {
            if gamma[k] == 0.0 {
                continue;
            }
            // Quantization noise seen by user k, linear in both V blocks.
            let noise = &d[0] * C64::from(ch.h(k, 0)[0].norm_sqr() / scale[0]) + &d[1] * C64::from(ch.h(k, 1)[0].norm_sqr() / scale[1]);
            let g = C64::from(gamma[k]);
            let mut own = -&r_mat[k] + &noise * g;
            let mut cross = &r_mat[k] * g + &noise * g;
            if k == 1 {
                std::mem::swap(&mut own, &mut cross);
            }
            rows.push((vec![(0, own), (1, cross)], -gamma[k] * cfg.noise_var));
        }
        for j in 0..2 {
            let f = C64::from(1.0 + 1.0 / scale[j]);
            rows.push((vec![(0, &d[j] * f), (1, &d[j] * f)], cfg.p[j]));
        }
        let v = solve_hermitian(&[2, 2], rows.iter().enumerate().map(|(k, (t, b))| (k, t.as_slice(), *b)), &opts.ipm).ok()?;
        let w = [principal_factor(&v[0]).0, principal_factor(&v[1]).0];
        let q_cov = [0, 1].map(|j| {
            let q = w[0][j].norm_sqr() + w[1][j].norm_sqr();
            CMat::from_element(1, 1, C64::from(q / scale[j]))
        });
        Some(QnmDesign { w, q_cov })
    };

    let (mut lo, mut hi) = (0.0, air_sum_rate_bound(cfg, ch, alpha));
    let mut best = QnmDesign::zeros(1);
    if hi.is_finite() && hi > 0.0 {
        while hi - lo > opts.tol_r {
            let mid = 0.5 * (lo + hi);
            match feasible(mid) {
                Some(d) => {
                    best = d;
                    lo = mid;
                }
                None => hi = mid,
            }
        }
    }
    QnmPoint::from_design(cfg, ch, alpha, best, None)
}

/// Unconstrained parametrization for `n_t >= 2`: both precoders, a bit-split
/// logit and a power logit per BS. Backhaul and power hold with equality
/// and `rho_j P_j` respectively by construction.
#[derive(Clone, Copy)]
struct Param<'a> {
    cfg: &'a SystemConfig,
    ch: &'a ChannelState,
    alpha: f64,
    beta: f64,
}

const LOGIT_CLAMP: f64 = 30.0;
/// Relative size below which a BS's second signal mode is removed.
const WEAK_MODE: f64 = 1e-9;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

impl Param<'_> {
    fn n(&self) -> usize {
        self.cfg.n_t
    }

    fn dim(&self) -> usize {
        8 * self.n() + 4
    }

    fn design(&self, theta: &[f64]) -> QnmDesign {
        let n = self.n();
        let mut w = [0, 1].map(|k| CVec::from_fn(2 * n, |e, _| C64::new(theta[k * 4 * n + 2 * e], theta[k * 4 * n + 2 * e + 1])));
        let mut q_cov = [CMat::zeros(n, n), CMat::zeros(n, n)];
        for j in 0..2 {
            let c = self.cfg.c_bh[j];
            let a = w[0].rows(j * n, n).into_owned();
            let b = w[1].rows(j * n, n).into_owned();
            let (u, mut lam) = rank2_eigen(&a, &b);
            let bits = if lam[1] <= WEAK_MODE * lam[0] {
                // Drop a negligible second mode so it carries no unquantized signal.
                let u0 = u.column(0).into_owned();
                for wk in w.iter_mut() {
                    let blk = wk.rows(j * n, n).into_owned();
                    let proj = &u0 * u0.dotc(&blk);
                    wk.rows_mut(j * n, n).copy_from(&proj);
                }
                lam[1] = 0.0;
                [c, 0.0]
            } else {
                let x = theta[8 * n + j];
                [c * sigmoid(x), c * sigmoid(-x)]
            };
            let var = [0, 1].map(|i| if lam[i] > 0.0 && bits[i] > 0.0 { lam[i] / exp2_m1(bits[i]) } else { 0.0 });
            let total = lam[0] + lam[1] + var[0] + var[1];
            let kappa2 = if total > 0.0 { sigmoid(theta[8 * n + 2 + j]) * self.cfg.p[j] / total } else { 0.0 };
            let kappa = C64::from(kappa2.sqrt());
            for wk in w.iter_mut() {
                let mut blk = wk.rows_mut(j * n, n);
                blk *= kappa;
            }
            for i in 0..2 {
                let ui = u.column(i);
                q_cov[j] += ui * ui.adjoint() * C64::from(var[i] * kappa2);
            }
        }
        QnmDesign { w, q_cov }
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let d = self.design(theta);
        let rates = qnm_rates(self.cfg, self.ch, &d).unwrap_or([0.0; 2]);
        let a = self.alpha;
        if a <= 0.0 {
            return rates[1];
        }
        if a >= 1.0 {
            return rates[0];
        }
        let (x, y) = (rates[0] / a, rates[1] / (1.0 - a));
        let m = x.min(y);
        m - ((-self.beta * (x - m)).exp() + (-self.beta * (y - m)).exp()).ln() / self.beta
    }

    fn encode(&self, w: &[CVec; 2], rho: [f64; 2]) -> Vec<f64> {
        let n = self.n();
        let mut theta = vec![0.0; self.dim()];
        for k in 0..2 {
            for e in 0..2 * n {
                theta[k * 4 * n + 2 * e] = w[k][e].re;
                theta[k * 4 * n + 2 * e + 1] = w[k][e].im;
            }
        }
        for j in 0..2 {
            theta[8 * n + 2 + j] = logit(rho[j]);
        }
        theta
    }
}

impl CostFunction for Param<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(-self.objective(theta))
    }
}

impl Gradient for Param<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, theta: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let mut x = theta.clone();
        let mut g = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let h = 1e-6 * theta[i].abs().max(1.0);
            x[i] = theta[i] + h;
            let up = self.objective(&x);
            x[i] = theta[i] - h;
            let down = self.objective(&x);
            x[i] = theta[i];
            g[i] = -(up - down) / (2.0 * h);
        }
        Ok(g)
    }
}

fn local_search(param: &mut Param<'_>, start: Vec<f64>, opts: &QnmOptions) -> Vec<f64> {
    let mut theta = start;
    for &beta in &opts.betas {
        param.beta = beta;
        let n = theta.len();
        let eye: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|k| if i == k { 1.0 } else { 0.0 }).collect()).collect();
        let Ok(solver) = BFGS::new(MoreThuenteLineSearch::new()).with_tolerance_cost(opts.tol_cost) else {
            break;
        };
        let run = Executor::new(*param, solver).configure(|s| s.param(theta.clone()).inv_hessian(eye).max_iters(opts.max_iters)).run();
        if let Ok(res) = run {
            if let Some(best) = res.state().get_best_param() {
                if param.objective(best) >= param.objective(&theta) {
                    theta = best.to_vec();
                }
            }
        }
    }
    theta
}

/// Start points: seeded random directions, then matched filtering, zero
/// forcing and the unquantized network-MIMO design for this profile.
fn starts(param: &Param<'_>, opts: &QnmOptions) -> Vec<Vec<f64>> {
    let (cfg, ch) = (param.cfg, param.ch);
    let n = cfg.n_t;
    let mut out = Vec::with_capacity(opts.random_starts + 3);
    for k in 0..opts.random_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(k as u64);
        let mut draw = || {
            let v = CVec::from_fn(2 * n, |_, _| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                C64::new(re, im)
            });
            let norm = v.norm();
            v / C64::from(norm)
        };
        let w = [draw(), draw()];
        let u: f64 = rand::Rng::gen_range(&mut rng, 0.5..0.99);
        out.push(param.encode(&w, [u, u]));
    }
    let unit = |v: CVec| {
        let norm = v.norm();
        if norm > 0.0 {
            v / C64::from(norm)
        } else {
            v
        }
    };
    let conj = |k: usize| ch.stacked(k).map(|z| z.conj());
    out.push(param.encode(&[unit(conj(0)), unit(conj(1))], [0.9, 0.9]));
    let zf = |k: usize| {
        let g = unit(conj(other(k)));
        let v = conj(k);
        let proj = &g * g.dotc(&v);
        unit(v - proj)
    };
    out.push(param.encode(&[zf(0), zf(1)], [0.9, 0.9]));

    let big = SystemConfig { c_bh: [1e6, 1e6], ..cfg.clone() };
    let chk = CheckOptions { solve: SolveOptions { ipm: opts.ipm, ..SolveOptions::default() }, ..CheckOptions::default() };
    if let Ok(nm) = region::bisect_sum_rate(&big, ch, param.alpha, SchemeKind::Nm, opts.tol_r, &chk) {
        let used = crate::model::power_usage(&nm.bf);
        let rho = [0, 1].map(|j| (used[j] / cfg.p[j]).min(1.0 - 1e-9));
        if nm.r > 0.0 {
            out.push(param.encode(&nm.bf.w_c, rho));
        }
    }
    out
}

fn optimize_multi_start(cfg: &SystemConfig, ch: &ChannelState, alpha: f64, opts: &QnmOptions) -> Result<QnmPoint> {
    let base = Param { cfg, ch, alpha, beta: opts.betas.first().copied().unwrap_or(16.0) };
    let starts = starts(&base, opts);
    let results: Vec<(usize, f64, QnmDesign)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut param = Param { cfg, ch, alpha, beta: base.beta };
            let theta = local_search(&mut param, s, opts);
            let design = param.design(&theta);
            let r = qnm_rates(cfg, ch, &design).map(|rates| profile_rate(alpha, rates)).unwrap_or(0.0);
            (k, r, design)
        })
        .collect();
    let best = results.into_iter().fold(None::<(usize, f64, QnmDesign)>, |acc, cur| match acc {
        Some(a) if a.1 >= cur.1 => Some(a),
        _ => Some(cur),
    });
    match best {
        Some((k, _, design)) => QnmPoint::from_design(cfg, ch, alpha, design, Some(k)),
        None => Ok(QnmPoint::zero(alpha, cfg.n_t, "no starts")),
    }
}
