//! Semidefinite relaxation of the fixed-rate power minimization.
//!
//! Every beamformer `w` is replaced by a Hermitian PSD matrix `V = w w^H`.
//! Rows are kept in the homogeneous form `sum <Q, V> <= rhs`; a rate row
//! `Gamma * (sigma^2 + interference) <= useful` becomes
//! `Gamma * interference - useful <= -Gamma * sigma^2`.
//!
//! Hermitian variables are solved as real symmetric matrices of twice the
//! dimension through `Z -> [Re Z, -Im Z; Im Z, Re Z]`, under which
//! `Re tr(Q Z) = tr(E(Q) E(Z)) / 2`.

pub(crate) mod ipm;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

pub use ipm::IpmSettings;
use ipm::{ConeProgram, IpmStatus, Row};

use crate::error::{Error, Result};
use crate::model::{self, exp2_m1, other, BeamformerSet, CMat, CVec, ChannelState, RateSplit, SystemConfig, C64};

/// SINR thresholds `2^rate - 1` for every rate row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinrTargets {
    pub gamma_p: [[f64; 2]; 2],
    pub gamma_sum_p: [f64; 2],
    pub gamma_tot: [f64; 2],
}

impl SinrTargets {
    pub fn from_split(rs: &RateSplit) -> Self {
        let g = exp2_m1;
        Self {
            gamma_p: [[g(rs.r_p[0][0]), g(rs.r_p[0][1])], [g(rs.r_p[1][0]), g(rs.r_p[1][1])]],
            gamma_sum_p: [g(rs.r_p[0][0] + rs.r_p[0][1]), g(rs.r_p[1][0] + rs.r_p[1][1])],
            gamma_tot: [g(rs.r[0]), g(rs.r[1])],
        }
    }

    pub fn all_zero(&self) -> bool {
        self.gamma_p.iter().flatten().chain(&self.gamma_sum_p).chain(&self.gamma_tot).all(|&g| g == 0.0)
    }
}

/// Matrix variable of the relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    /// `V_{i,c}`, dimension `2 n_t`.
    Shared(usize),
    /// `V_{ij,p}`, dimension `n_t`.
    Private(usize, usize),
}

impl Var {
    pub const ALL: [Var; 6] = [
        Var::Shared(0),
        Var::Shared(1),
        Var::Private(0, 0),
        Var::Private(0, 1),
        Var::Private(1, 0),
        Var::Private(1, 1),
    ];

    pub fn index(self) -> usize {
        match self {
            Var::Shared(i) => i,
            Var::Private(i, j) => 2 + 2 * i + j,
        }
    }

    fn user(self) -> usize {
        match self {
            Var::Shared(i) | Var::Private(i, _) => i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Private { user: usize, bs: usize },
    PrivateSum { user: usize },
    Total { user: usize },
    Power { bs: usize },
}

/// One relaxation row `sum_k <coef_k, V_k> <= rhs`.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub kind: RowKind,
    /// SINR threshold of a rate row; zero for power rows.
    pub gamma: f64,
    pub terms: Vec<(Var, CMat)>,
    pub rhs: f64,
}

impl TraceRow {
    fn is_rate(&self) -> bool {
        !matches!(self.kind, RowKind::Power { .. })
    }

    /// Left-hand side at the given variables.
    pub fn eval(&self, v: &VarSet) -> f64 {
        self.terms.iter().map(|(var, q)| trace_re(q, v.get(*var))).sum()
    }
}

/// The six matrix variables.
#[derive(Debug, Clone, PartialEq)]
pub struct VarSet {
    pub v_c: [CMat; 2],
    pub v_p: [[CMat; 2]; 2],
}

impl VarSet {
    pub fn zeros(n_t: usize) -> Self {
        let z = || CMat::zeros(n_t, n_t);
        Self { v_c: [CMat::zeros(2 * n_t, 2 * n_t), CMat::zeros(2 * n_t, 2 * n_t)], v_p: [[z(), z()], [z(), z()]] }
    }

    pub fn from_beamformers(bf: &BeamformerSet) -> Self {
        let outer = |w: &CVec| w * w.adjoint();
        Self {
            v_c: [outer(&bf.w_c[0]), outer(&bf.w_c[1])],
            v_p: [[outer(&bf.w_p[0][0]), outer(&bf.w_p[0][1])], [outer(&bf.w_p[1][0]), outer(&bf.w_p[1][1])]],
        }
    }

    pub fn get(&self, var: Var) -> &CMat {
        match var {
            Var::Shared(i) => &self.v_c[i],
            Var::Private(i, j) => &self.v_p[i][j],
        }
    }

    fn get_mut(&mut self, var: Var) -> &mut CMat {
        match var {
            Var::Shared(i) => &mut self.v_c[i],
            Var::Private(i, j) => &mut self.v_p[i][j],
        }
    }

    pub fn total_power(&self) -> f64 {
        Var::ALL.iter().map(|&v| self.get(v).trace().re).sum()
    }
}

/// `Re tr(Q V)`.
pub fn trace_re(q: &CMat, v: &CMat) -> f64 {
    q.iter().zip(v.transpose().iter()).map(|(a, b)| (a * b).re).sum()
}

/// The relaxation data for one rate split.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub n_t: usize,
    /// `R_i = h_i^H h_i`, `2 n_t x 2 n_t`.
    pub r_user: [CMat; 2],
    /// `R_ij = h_ij^H h_ij`, `n_t x n_t`.
    pub r_link: [[CMat; 2]; 2],
    /// Diagonal 0/1 selectors of each BS's antenna block.
    pub d_sel: [CMat; 2],
    pub targets: SinrTargets,
    pub p_lim: [f64; 2],
    pub noise_var: f64,
    pub channel: ChannelState,
    pub rates: RateSplit,
}

fn outer_conj(h: &CVec) -> CMat {
    // h is a row vector, so h^H h = conj(h) conj(h)^H.
    let v = h.map(|z| z.conj());
    &v * v.adjoint()
}

pub fn build_relaxation(cfg: &SystemConfig, ch: &ChannelState, rates: &RateSplit) -> Result<ConicProblem> {
    rates.validate(model::RATE_TOL)?;
    if ch.n_t() != cfg.n_t {
        return Err(Error::Dimension("channel does not match n_t".into()));
    }
    let targets = SinrTargets::from_split(rates);
    let all = targets.gamma_p.iter().flatten().chain(&targets.gamma_sum_p).chain(&targets.gamma_tot);
    if all.clone().any(|g| !g.is_finite()) {
        return Err(Error::InvalidRates("SINR target overflows".into()));
    }
    let n = cfg.n_t;
    let sel = |j: usize| {
        CMat::from_diagonal(&CVec::from_fn(2 * n, |k, _| if k / n == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }))
    };
    Ok(ConicProblem {
        n_t: n,
        r_user: [outer_conj(&ch.stacked(0)), outer_conj(&ch.stacked(1))],
        r_link: [
            [outer_conj(ch.h(0, 0)), outer_conj(ch.h(0, 1))],
            [outer_conj(ch.h(1, 0)), outer_conj(ch.h(1, 1))],
        ],
        d_sel: [sel(0), sel(1)],
        targets,
        p_lim: cfg.p,
        noise_var: cfg.noise_var,
        channel: ch.clone(),
        rates: *rates,
    })
}

impl ConicProblem {
    fn interference_terms(&self, user: usize, gamma: f64) -> Vec<(Var, CMat)> {
        let o = other(user);
        let mut terms = vec![(Var::Shared(o), &self.r_user[user] * C64::from(gamma))];
        for j in 0..2 {
            terms.push((Var::Private(o, j), &self.r_link[user][j] * C64::from(gamma)));
        }
        terms
    }

    fn rate_row(&self, kind: RowKind, user: usize, gamma: f64, useful: &[Var]) -> TraceRow {
        let mut terms = self.interference_terms(user, gamma);
        for &var in useful {
            let q = match var {
                Var::Shared(i) => &self.r_user[i],
                Var::Private(i, j) => &self.r_link[i][j],
            };
            terms.push((var, -q));
        }
        TraceRow { kind, gamma, terms, rhs: -gamma * self.noise_var }
    }

    /// All ten rows: four private, two private-sum, two total, two power.
    pub fn rows(&self) -> Vec<TraceRow> {
        let t = &self.targets;
        let mut rows = Vec::with_capacity(10);
        for i in 0..2 {
            for j in 0..2 {
                rows.push(self.rate_row(RowKind::Private { user: i, bs: j }, i, t.gamma_p[i][j], &[Var::Private(i, j)]));
            }
        }
        for i in 0..2 {
            let useful = [Var::Private(i, 0), Var::Private(i, 1)];
            rows.push(self.rate_row(RowKind::PrivateSum { user: i }, i, t.gamma_sum_p[i], &useful));
        }
        for i in 0..2 {
            let useful = [Var::Shared(i), Var::Private(i, 0), Var::Private(i, 1)];
            rows.push(self.rate_row(RowKind::Total { user: i }, i, t.gamma_tot[i], &useful));
        }
        for j in 0..2 {
            let eye = CMat::identity(self.n_t, self.n_t);
            let terms = vec![
                (Var::Shared(0), self.d_sel[j].clone()),
                (Var::Shared(1), self.d_sel[j].clone()),
                (Var::Private(0, j), eye.clone()),
                (Var::Private(1, j), eye),
            ];
            rows.push(TraceRow { kind: RowKind::Power { bs: j }, gamma: 0.0, terms, rhs: self.p_lim[j] });
        }
        rows
    }

    pub fn var_dim(&self, var: Var) -> usize {
        match var {
            Var::Shared(_) => 2 * self.n_t,
            Var::Private(..) => self.n_t,
        }
    }

    /// A rate row with a positive target but no useful channel can never be
    /// met; such problems are declared infeasible without running the solver.
    pub fn trivially_infeasible(&self) -> bool {
        self.rows().iter().filter(|r| r.is_rate() && r.gamma > 0.0).any(|r| {
            r.terms
                .iter()
                .filter(|(var, _)| var.user() == row_user(r.kind))
                .all(|(_, q)| q.iter().all(|z| z.norm_sqr() == 0.0))
        })
    }

    /// Debug dump with matrices as nested `[re, im]` arrays.
    pub fn to_json(&self) -> serde_json::Value {
        let m = |q: &CMat| -> Vec<Vec<[f64; 2]>> {
            (0..q.nrows()).map(|r| (0..q.ncols()).map(|c| [q[(r, c)].re, q[(r, c)].im]).collect()).collect()
        };
        let t = &self.targets;
        json!({
            "n_t": self.n_t,
            "noise_var": self.noise_var,
            "p_lim": self.p_lim,
            "rates": { "r": self.rates.r, "r_p": self.rates.r_p },
            "targets": { "gamma_p": t.gamma_p, "gamma_sum_p": t.gamma_sum_p, "gamma_tot": t.gamma_tot },
            "R_user": [m(&self.r_user[0]), m(&self.r_user[1])],
            "R_link": [[m(&self.r_link[0][0]), m(&self.r_link[0][1])], [m(&self.r_link[1][0]), m(&self.r_link[1][1])]],
            "D": [m(&self.d_sel[0]), m(&self.d_sel[1])],
        })
    }

    pub fn dump_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }
}

fn row_user(kind: RowKind) -> usize {
    match kind {
        RowKind::Private { user, .. } | RowKind::PrivateSum { user } | RowKind::Total { user } => user,
        RowKind::Power { bs } => bs,
    }
}

/// `[Re Z, -Im Z; Im Z, Re Z]`.
pub fn embed(z: &CMat) -> DMatrix<f64> {
    let n = z.nrows();
    DMatrix::from_fn(2 * n, 2 * n, |r, c| {
        let v = z[(r % n, c % n)];
        match (r < n, c < n) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    })
}

/// Hermitian matrix whose embedding is closest to the real symmetric `m`.
pub fn project_hermitian(m: &DMatrix<f64>) -> CMat {
    let n = m.nrows() / 2;
    CMat::from_fn(n, n, |r, c| {
        let re = 0.5 * (m[(r, c)] + m[(r + n, c + n)]);
        let im = 0.5 * (m[(r + n, c)] - m[(r, c + n)]);
        C64::new(re, im)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

/// Lagrange multipliers in the Gamma-normalized convention: the rate rows
/// are `sigma^2 + interference - useful / Gamma <= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DualCertificate {
    pub lambda_p: [[f64; 2]; 2],
    pub lambda_sum_p: [f64; 2],
    pub lambda_tot: [f64; 2],
    pub mu: [f64; 2],
    pub dual_obj: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub ipm: IpmSettings,
    pub tol_rank: f64,
    pub randomization_samples: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { ipm: IpmSettings::default(), tol_rank: 1e-6, randomization_samples: 64, seed: 0x5eed }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub v: VarSet,
    pub objective: f64,
    pub certificate: Option<DualCertificate>,
    /// Rank-one beamformers, present when the relaxation is optimal.
    pub bf: Option<BeamformerSet>,
    pub extraction: Option<Extraction>,
    pub iterations: usize,
}

impl SolveResult {
    pub fn is_feasible(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    fn without_solution(status: SolveStatus, n_t: usize, iterations: usize) -> Self {
        Self {
            status,
            v: VarSet::zeros(n_t),
            objective: f64::NAN,
            certificate: None,
            bf: None,
            extraction: None,
            iterations,
        }
    }
}

fn rows_equal(a: &Row, b: &Row) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs()));
    close(a.b, b.b)
        && a.blocks.len() == b.blocks.len()
        && a.blocks.iter().zip(&b.blocks).all(|((ka, ma), (kb, mb))| ka == kb && ma.iter().zip(mb.iter()).all(|(x, y)| close(*x, *y)))
}

/// Real cone program for `min sum_k Tr V_k` over Hermitian PSD blocks of the
/// given complex dimensions, subject to `sum <Q, V_k> <= rhs` rows. Rows are
/// scaled to unit size and exact duplicates dropped; returns, for every
/// program row, the index of its source row and its scale factor.
pub(crate) fn hermitian_program<'r>(
    dims: &[usize],
    rows: impl IntoIterator<Item = (usize, &'r [(usize, CMat)], f64)>,
) -> (ConeProgram, Vec<(usize, f64)>) {
    let block_dims: Vec<usize> = dims.iter().map(|&d| 2 * d).collect();
    let c_blocks = block_dims.iter().map(|&d| DMatrix::identity(d, d) * 0.5).collect();
    let mut out = Vec::new();
    let mut origin = Vec::new();
    for (k, terms, rhs) in rows {
        let mut blocks: Vec<(usize, DMatrix<f64>)> = terms
            .iter()
            .filter(|(_, q)| q.iter().any(|z| z.norm_sqr() > 0.0))
            .map(|(b, q)| (*b, embed(q) * 0.5))
            .collect();
        blocks.sort_by_key(|(b, _)| *b);
        let scale = blocks
            .iter()
            .flat_map(|(_, m)| m.iter())
            .fold(rhs.abs(), |acc, v| acc.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for (_, m) in &mut blocks {
            *m /= scale;
        }
        let candidate = Row { blocks, lp: vec![(out.len(), 1.0)], b: rhs / scale };
        let dup = out.iter().any(|r: &Row| rows_equal(r, &candidate));
        if !dup {
            out.push(candidate);
            origin.push((k, scale));
        }
    }
    let n_lp = out.len();
    (ConeProgram { block_dims, n_lp, c_blocks, c_lp: vec![0.0; n_lp], rows: out }, origin)
}

/// Solves a [`hermitian_program`] and returns the Hermitian blocks at the
/// optimum, or the solver status when it is not optimal.
pub(crate) fn solve_hermitian<'r>(
    dims: &[usize],
    rows: impl IntoIterator<Item = (usize, &'r [(usize, CMat)], f64)>,
    set: &IpmSettings,
) -> std::result::Result<Vec<CMat>, SolveStatus> {
    let (program, _) = hermitian_program(dims, rows);
    let sol = ipm::solve(&program, set);
    match sol.status {
        IpmStatus::Optimal => Ok(sol.x.blk.iter().map(project_hermitian).collect()),
        IpmStatus::PrimalInfeasible => Err(SolveStatus::Infeasible),
        _ => Err(SolveStatus::NumericalFailure),
    }
}

fn cone_program(prob: &ConicProblem, rows: &[TraceRow]) -> (ConeProgram, Vec<(usize, f64)>) {
    let dims: Vec<usize> = Var::ALL.iter().map(|&v| prob.var_dim(v)).collect();
    let terms: Vec<Vec<(usize, CMat)>> =
        rows.iter().map(|r| r.terms.iter().map(|(v, q)| (v.index(), q.clone())).collect()).collect();
    // Private-sum rows go first so that a private row identical to its sum
    // row (other private rate and its channel both zero) leaves its
    // multiplier on the sum.
    let mut order: Vec<usize> = (0..rows.len()).filter(|&k| !(rows[k].is_rate() && rows[k].gamma == 0.0)).collect();
    order.sort_by_key(|&k| !matches!(rows[k].kind, RowKind::PrivateSum { .. }));
    hermitian_program(&dims, order.into_iter().map(|k| (k, terms[k].as_slice(), rows[k].rhs)))
}

pub fn solve(prob: &ConicProblem, opts: &SolveOptions) -> SolveResult {
    let n_t = prob.n_t;
    if prob.targets.all_zero() {
        let mut res = SolveResult::without_solution(SolveStatus::Optimal, n_t, 0);
        res.objective = 0.0;
        res.certificate = Some(DualCertificate::default());
        res.bf = Some(BeamformerSet::zeros(n_t));
        return res;
    }
    if prob.trivially_infeasible() {
        return SolveResult::without_solution(SolveStatus::Infeasible, n_t, 0);
    }
    let rows = prob.rows();
    let (program, origin) = cone_program(prob, &rows);
    let sol = ipm::solve(&program, &opts.ipm);
    match sol.status {
        IpmStatus::Optimal => {}
        IpmStatus::PrimalInfeasible => return SolveResult::without_solution(SolveStatus::Infeasible, n_t, sol.iterations),
        other => {
            log::debug!("relaxation solve ended with {other:?} after {} iterations", sol.iterations);
            return SolveResult::without_solution(SolveStatus::NumericalFailure, n_t, sol.iterations);
        }
    }
    let mut v = VarSet::zeros(n_t);
    for &var in &Var::ALL {
        *v.get_mut(var) = project_hermitian(&sol.x.blk[var.index()]);
    }
    let objective = v.total_power();

    // Row `a(V) + t = rhs` has multiplier y <= 0; nu = -y is the Lagrange
    // multiplier of `a(V) <= rhs`, and lambda = Gamma * nu for rate rows.
    let mut cert = DualCertificate::default();
    for (&(k, scale), y) in origin.iter().zip(&sol.y) {
        let nu = (-y / scale).max(0.0);
        let row = &rows[k];
        match row.kind {
            RowKind::Private { user, bs } => cert.lambda_p[user][bs] = row.gamma * nu,
            RowKind::PrivateSum { user } => cert.lambda_sum_p[user] = row.gamma * nu,
            RowKind::Total { user } => cert.lambda_tot[user] = row.gamma * nu,
            RowKind::Power { bs } => cert.mu[bs] = nu,
        }
    }
    cert.dual_obj = dual_objective(prob, &cert);

    let mut res = SolveResult {
        status: SolveStatus::Optimal,
        v,
        objective,
        certificate: Some(cert),
        bf: None,
        extraction: None,
        iterations: sol.iterations,
    };
    let ext = extract_rank_one(prob, &res, opts);
    res.bf = Some(ext.bf.clone());
    res.extraction = Some(ext);
    res
}

fn dual_objective(prob: &ConicProblem, cert: &DualCertificate) -> f64 {
    let lam: f64 = cert.lambda_p.iter().flatten().chain(&cert.lambda_sum_p).chain(&cert.lambda_tot).sum();
    prob.noise_var * lam - cert.mu[0] * prob.p_lim[0] - cert.mu[1] * prob.p_lim[1]
}

/// Principal eigenvector scaled by the root of its eigenvalue, and the ratio
/// of the second to the first eigenvalue.
pub fn principal_factor(v: &CMat) -> (CVec, f64) {
    let n = v.nrows();
    let eig = SymmetricEigen::new(v.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = if n > 1 { eig.eigenvalues[order[1]].max(0.0) } else { 0.0 };
    let w = eig.eigenvectors.column(order[0]) * C64::from(l1.sqrt());
    let ratio = if l1 > 0.0 { l2 / l1 } else { 0.0 };
    (w, ratio)
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub bf: BeamformerSet,
    /// Worst second-to-first eigenvalue ratio over blocks carrying power.
    pub max_rank_ratio: f64,
    pub rank_ok: bool,
    pub fallback_used: bool,
    /// The vectors meet every unrelaxed rate row and power limit.
    pub valid: bool,
    pub objective: f64,
}

fn beamformers_from(vars: &[CVec; 6]) -> BeamformerSet {
    BeamformerSet {
        w_c: [vars[0].clone(), vars[1].clone()],
        w_p: [[vars[2].clone(), vars[3].clone()], [vars[4].clone(), vars[5].clone()]],
    }
}

/// Worst relative violation of the unrelaxed rows by a set of vectors.
fn vector_violation(rows: &[TraceRow], bf: &BeamformerSet) -> f64 {
    let v = VarSet::from_beamformers(bf);
    rows.iter()
        .map(|r| {
            let lhs = r.eval(&v);
            let scale = r.terms.iter().map(|(var, q)| trace_re(q, v.get(*var)).abs()).sum::<f64>().max(r.rhs.abs()).max(1e-300);
            ((lhs - r.rhs) / scale).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Recovers beamformers from an optimal relaxation. When some block is not
/// numerically rank one, Gaussian samples shaped by the blocks are rescaled
/// by an exact power-allocation program and the cheapest feasible draw kept.
pub fn extract_rank_one(prob: &ConicProblem, res: &SolveResult, opts: &SolveOptions) -> Extraction {
    let rows = prob.rows();
    // Blocks below this trace are interior-point residue of a zero block.
    let significant = 1e-7 * res.objective.max(1.0);
    let mut vectors: Vec<CVec> = Vec::with_capacity(6);
    let mut max_ratio = 0.0f64;
    for &var in &Var::ALL {
        let v = res.v.get(var);
        let (w, ratio) = principal_factor(v);
        if w.norm_squared() > significant {
            max_ratio = max_ratio.max(ratio);
        }
        vectors.push(w);
    }
    let vectors: [CVec; 6] = vectors.try_into().expect("six variables");
    let bf = beamformers_from(&vectors);
    let rank_ok = max_ratio <= opts.tol_rank;
    let violation = vector_violation(&rows, &bf);
    let tol = 1e-6;
    if rank_ok || opts.randomization_samples == 0 {
        let objective = VarSet::from_beamformers(&bf).total_power();
        return Extraction { bf, max_rank_ratio: max_ratio, rank_ok, fallback_used: false, valid: violation <= tol, objective };
    }

    log::warn!("relaxation solution not rank one (ratio {max_ratio:.3e}); using randomized recovery");
    let mut best: Option<(f64, BeamformerSet)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut candidates = vec![vectors.clone()];
    let factors: Vec<(DMatrix<C64>, nalgebra::DVector<f64>)> = Var::ALL
        .iter()
        .map(|&var| {
            let e = SymmetricEigen::new(res.v.get(var).clone());
            (e.eigenvectors, e.eigenvalues.map(|l| l.max(0.0).sqrt()))
        })
        .collect();
    for _ in 0..opts.randomization_samples {
        let draw: Vec<CVec> = factors
            .iter()
            .map(|(u, s)| {
                let xi = CVec::from_fn(s.len(), |k, _| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    C64::new(re, im) * (s[k] * std::f64::consts::FRAC_1_SQRT_2)
                });
                u * xi
            })
            .collect();
        candidates.push(draw.try_into().expect("six variables"));
    }
    for dirs in candidates {
        if let Some((power, bf)) = allocate_powers(&rows, &dirs, &opts.ipm) {
            if best.as_ref().is_none_or(|(p, _)| power < *p) {
                best = Some((power, bf));
            }
        }
    }
    match best {
        Some((objective, bf)) => {
            let valid = vector_violation(&rows, &bf) <= tol;
            Extraction { bf, max_rank_ratio: max_ratio, rank_ok, fallback_used: true, valid, objective }
        }
        None => {
            let objective = VarSet::from_beamformers(&bf).total_power();
            Extraction { bf, max_rank_ratio: max_ratio, rank_ok, fallback_used: true, valid: violation <= tol, objective }
        }
    }
}

/// Minimum-power scaling of fixed beam directions, or `None` if no scaling
/// meets every row.
fn allocate_powers(rows: &[TraceRow], dirs: &[CVec; 6], set: &IpmSettings) -> Option<(f64, BeamformerSet)> {
    let unit: Vec<CVec> = dirs.iter().map(|d| if d.norm() > 0.0 { d / C64::from(d.norm()) } else { d.clone() }).collect();
    let n_beams = unit.len();
    let mut lp_rows = Vec::new();
    for row in rows {
        if row.is_rate() && row.gamma == 0.0 {
            continue;
        }
        let mut coeffs: Vec<(usize, f64)> = row
            .terms
            .iter()
            .map(|(var, q)| {
                let u = &unit[var.index()];
                (var.index(), (u.adjoint() * q * u)[(0, 0)].re)
            })
            .filter(|(_, a)| *a != 0.0)
            .collect();
        let scale = coeffs.iter().fold(row.rhs.abs(), |m, (_, a)| m.max(a.abs())).max(f64::MIN_POSITIVE);
        for (_, a) in &mut coeffs {
            *a /= scale;
        }
        coeffs.push((n_beams + lp_rows.len(), 1.0));
        lp_rows.push(Row { blocks: vec![], lp: coeffs, b: row.rhs / scale });
    }
    let n_lp = n_beams + lp_rows.len();
    let mut c_lp = vec![0.0; n_lp];
    for (k, u) in unit.iter().enumerate() {
        if u.norm() > 0.0 {
            c_lp[k] = 1.0;
        }
    }
    let program = ConeProgram { block_dims: vec![], n_lp, c_blocks: vec![], c_lp, rows: lp_rows };
    let sol = ipm::solve(&program, set);
    if sol.status != IpmStatus::Optimal {
        return None;
    }
    let scaled: Vec<CVec> = unit.iter().enumerate().map(|(k, u)| u * C64::from(sol.x.lp[k].max(0.0).sqrt())).collect();
    let bf = beamformers_from(&scaled.try_into().expect("six variables"));
    let power = VarSet::from_beamformers(&bf).total_power();
    Some((power, bf))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualEvaluation {
    pub dual_obj: f64,
    /// Worst relative violation of the matrix-inverse dual constraints.
    pub max_violation: f64,
}

/// `1 / (h A^{-1} h^H)` for a Hermitian positive definite `A`; infinite when
/// `h = 0`.
fn inverse_quadratic(a: CMat, h: &CVec) -> Result<f64> {
    if h.iter().all(|z| z.norm_sqr() == 0.0) {
        return Ok(f64::INFINITY);
    }
    let chol = nalgebra::Cholesky::new(a).ok_or_else(|| Error::DualEvaluation("singular dual matrix".into()))?;
    let v = h.map(|z| z.conj());
    let z = chol.solve(&v);
    let q = v.dotc(&z).re;
    if q > 0.0 {
        Ok(1.0 / q)
    } else {
        Err(Error::DualEvaluation("dual matrix is not positive definite".into()))
    }
}

fn ratio(lambda: f64, gamma: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else if gamma == 0.0 {
        f64::INFINITY
    } else {
        lambda / gamma
    }
}

/// Per-user quantities of the inverse-form dual constraints.
struct DualTerms {
    /// `1 / (h_i A_i^{-1} h_i^H)`.
    shared: f64,
    /// `1 / (h_ij B_ij^{-1} h_ij^H)`.
    private: [f64; 2],
}

fn dual_terms(prob: &ConicProblem, cert: &DualCertificate, user: usize) -> Result<DualTerms> {
    let o = other(user);
    let s = cert.lambda_p[o][0] + cert.lambda_p[o][1] + cert.lambda_sum_p[o] + cert.lambda_tot[o];
    let n = prob.n_t;
    let a = CMat::identity(2 * n, 2 * n)
        + &prob.d_sel[0] * C64::from(cert.mu[0])
        + &prob.d_sel[1] * C64::from(cert.mu[1])
        + &prob.r_user[o] * C64::from(s);
    let shared = inverse_quadratic(a, &prob.channel.stacked(user))?;
    let mut private = [0.0; 2];
    for (j, p) in private.iter_mut().enumerate() {
        let b = CMat::identity(n, n) * C64::from(1.0 + cert.mu[j]) + &prob.r_link[o][j] * C64::from(s);
        *p = inverse_quadratic(b, prob.channel.h(user, j))?;
    }
    Ok(DualTerms { shared, private })
}

pub fn eval_dual(prob: &ConicProblem, cert: &DualCertificate) -> Result<DualEvaluation> {
    let all = cert.lambda_p.iter().flatten().chain(&cert.lambda_sum_p).chain(&cert.lambda_tot).chain(&cert.mu);
    if all.clone().any(|&v| !(v >= 0.0)) {
        return Err(Error::DualEvaluation("multipliers must be nonnegative".into()));
    }
    let t = &prob.targets;
    let mut worst = 0.0f64;
    let mut check = |lhs: f64, rhs: f64| {
        if rhs > lhs {
            worst = worst.max(if rhs.is_finite() { (rhs - lhs) / rhs.max(1.0) } else { f64::INFINITY });
        }
    };
    for i in 0..2 {
        let terms = dual_terms(prob, cert, i)?;
        let tot = ratio(cert.lambda_tot[i], t.gamma_tot[i]);
        check(terms.shared, tot);
        for j in 0..2 {
            let rhs = ratio(cert.lambda_p[i][j], t.gamma_p[i][j]) + ratio(cert.lambda_sum_p[i], t.gamma_sum_p[i]) + tot;
            check(terms.private[j], rhs);
        }
    }
    Ok(DualEvaluation { dual_obj: dual_objective(prob, cert), max_violation: worst })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    pub total_tight: [bool; 2],
    pub private_sum_tight: [bool; 2],
    /// Multiplier of the private row with the smaller dual margin vanishes;
    /// vacuous unless both private rates of the user are positive.
    pub jmin_multiplier_zero: [bool; 2],
    pub complementary_slackness: [bool; 2],
}

impl KktReport {
    pub fn all(&self) -> bool {
        [self.total_tight, self.private_sum_tight, self.jmin_multiplier_zero, self.complementary_slackness]
            .iter()
            .flatten()
            .all(|&b| b)
    }
}

pub fn kkt_structure_check(prob: &ConicProblem, res: &SolveResult, tol: f64) -> Result<KktReport> {
    let mut report = KktReport::default();
    let cert = match (&res.status, &res.certificate) {
        (SolveStatus::Optimal, Some(c)) => *c,
        _ => return Err(Error::DualEvaluation("KKT check needs an optimal solution with multipliers".into())),
    };
    let rows = prob.rows();
    let tight = |kind: RowKind| {
        let row = rows.iter().find(|r| r.kind == kind).expect("row present");
        if row.gamma == 0.0 {
            return true;
        }
        let lhs = row.eval(&res.v);
        let scale = row.terms.iter().map(|(v, q)| trace_re(q, res.v.get(*v)).abs()).sum::<f64>().max(row.rhs.abs()).max(1.0);
        (row.rhs - lhs) / scale <= tol
    };
    let used = {
        let mut p = [0.0; 2];
        for (j, pj) in p.iter_mut().enumerate() {
            let row = rows.iter().find(|r| r.kind == RowKind::Power { bs: j }).expect("power row");
            *pj = row.eval(&res.v);
        }
        p
    };
    for i in 0..2 {
        report.total_tight[i] = tight(RowKind::Total { user: i });
        report.private_sum_tight[i] = tight(RowKind::PrivateSum { user: i });
        let terms = dual_terms(prob, &cert, i)?;
        let margin = [terms.private[0] - terms.shared, terms.private[1] - terms.shared];
        let j_min = if margin[0] <= margin[1] { 0 } else { 1 };
        let lam_scale = (cert.lambda_tot[i] + cert.lambda_sum_p[i] + cert.lambda_p[i][0] + cert.lambda_p[i][1]).max(1.0);
        // With a single private stream the private and sum rows coincide at
        // the optimum and their multipliers are not unique.
        let two_streams = prob.targets.gamma_p[i].iter().all(|&g| g > 0.0);
        report.jmin_multiplier_zero[i] = !two_streams || cert.lambda_p[i][j_min] <= tol * lam_scale;
        let slack = (prob.p_lim[i] - used[i]).max(0.0);
        report.complementary_slackness[i] = cert.mu[i] * slack <= tol * (cert.mu[i] * prob.p_lim[i]).max(1.0);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_cfg(p: f64) -> SystemConfig {
        SystemConfig::new([p, p], [10.0, 10.0], 1.0, 1).unwrap()
    }

    fn single_link(h: f64) -> ChannelState {
        let s = |x: f64| CVec::from_element(1, C64::new(x, 0.0));
        ChannelState::new([[s(h), s(0.0)], [s(0.0), s(0.0)]]).unwrap()
    }

    fn single_user_split(r: f64) -> RateSplit {
        RateSplit { r: [r, 0.0], r_p: [[r, 0.0], [0.0, 0.0]] }
    }

    #[test]
    fn zero_rates_give_zero_power() {
        let cfg = SystemConfig::new([10.0, 10.0], [1.0, 1.0], 1.0, 2).unwrap();
        let prob = build_relaxation(&cfg, &ChannelState::reference(), &RateSplit::default()).unwrap();
        assert!(prob.targets.all_zero());
        let res = solve(&prob, &SolveOptions::default());
        assert_eq!(res.status, SolveStatus::Optimal);
        assert_eq!(res.objective, 0.0);
        assert_eq!(res.bf.clone().unwrap(), BeamformerSet::zeros(2));
        assert!(kkt_structure_check(&prob, &res, 1e-5).unwrap().all());
    }

    #[test]
    fn unit_private_rate_target() {
        let cfg = scalar_cfg(10.0);
        let prob = build_relaxation(&cfg, &single_link(1.0), &single_user_split(1.0)).unwrap();
        assert_eq!(prob.targets.gamma_p[0][0], 1.0);
    }

    #[test]
    fn ten_rows_over_six_variables() {
        let cfg = SystemConfig::new([10.0, 10.0], [1.0, 1.0], 1.0, 2).unwrap();
        let prob = build_relaxation(&cfg, &ChannelState::reference(), &RateSplit::default()).unwrap();
        let rows = prob.rows();
        assert_eq!(rows.len(), 10);
        let vars: std::collections::HashSet<Var> = rows.iter().flat_map(|r| r.terms.iter().map(|(v, _)| *v)).collect();
        assert_eq!(vars.len(), 6);
        assert_eq!(prob.d_sel[0].clone() + prob.d_sel[1].clone(), CMat::identity(4, 4));
    }

    #[test]
    fn matched_filter_closed_form() {
        for (h, r, expected) in [(1.0, 1.0, 1.0), (2.0, 2.0, 0.75)] {
            let prob = build_relaxation(&scalar_cfg(10.0), &single_link(h), &single_user_split(r)).unwrap();
            let res = solve(&prob, &SolveOptions::default());
            assert_eq!(res.status, SolveStatus::Optimal);
            assert!((res.objective - expected).abs() < 1e-7, "{} vs {expected}", res.objective);
            let cert = res.certificate.unwrap();
            let dual = eval_dual(&prob, &cert).unwrap();
            assert!((dual.dual_obj - expected).abs() < 1e-6);
            assert!(dual.max_violation < 1e-6);
            let kkt = kkt_structure_check(&prob, &res, 1e-5).unwrap();
            assert!(kkt.total_tight[0]);
        }
    }

    #[test]
    fn zero_multipliers_evaluate_to_zero() {
        let cfg = SystemConfig::new([10.0, 10.0], [1.0, 1.0], 1.0, 2).unwrap();
        let rs = RateSplit { r: [1.0, 1.0], r_p: [[0.5, 0.0], [0.0, 0.5]] };
        let prob = build_relaxation(&cfg, &ChannelState::reference(), &rs).unwrap();
        let ev = eval_dual(&prob, &DualCertificate::default()).unwrap();
        assert_eq!(ev.dual_obj, 0.0);
        assert_eq!(ev.max_violation, 0.0);
        let bad = DualCertificate { mu: [-1.0, 0.0], ..Default::default() };
        assert!(eval_dual(&prob, &bad).is_err());
    }

    #[test]
    fn missing_useful_channel_is_prescreened() {
        let prob = build_relaxation(&scalar_cfg(10.0), &single_link(0.0), &single_user_split(1.0)).unwrap();
        assert!(prob.trivially_infeasible());
        assert_eq!(solve(&prob, &SolveOptions::default()).status, SolveStatus::Infeasible);
    }

    #[test]
    fn power_limit_makes_problem_infeasible() {
        // Needs power 3 but only 1 is available.
        let prob = build_relaxation(&scalar_cfg(1.0), &single_link(1.0), &single_user_split(2.0)).unwrap();
        assert_eq!(solve(&prob, &SolveOptions::default()).status, SolveStatus::Infeasible);
    }

    #[test]
    fn rank_one_factor_up_to_phase() {
        let w = CVec::from_vec(vec![C64::new(0.3, -1.2), C64::new(-0.7, 0.4)]);
        let (f, ratio) = principal_factor(&(&w * w.adjoint()));
        assert!(ratio < 1e-12);
        let phase = w.dotc(&f) / C64::from(w.norm_squared());
        assert!((phase.norm() - 1.0).abs() < 1e-10);
        assert!((f - &w * phase).norm() < 1e-10);

        let v = CMat::from_diagonal(&CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(1e-12, 0.0)]));
        let (f, ratio) = principal_factor(&v);
        assert!(ratio <= 1e-6);
        assert!((f[0].norm() - 1.0).abs() < 1e-12 && f[1].norm() < 1e-12);
    }

    #[test]
    fn embedding_preserves_trace_products() {
        let q = CMat::from_row_slice(2, 2, &[C64::new(2.0, 0.0), C64::new(0.5, -1.0), C64::new(0.5, 1.0), C64::new(1.0, 0.0)]);
        let v = CMat::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(0.2, 0.3), C64::new(0.2, -0.3), C64::new(3.0, 0.0)]);
        let lhs = trace_re(&q, &v);
        let rhs = 0.5 * embed(&q).dot(&embed(&v));
        assert!((lhs - rhs).abs() < 1e-12);
        assert!((project_hermitian(&embed(&v)) - v).norm() < 1e-15);
    }
}
