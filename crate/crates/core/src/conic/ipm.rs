//! Primal-dual interior-point method for small problems of the form
//!
//! ```text
//! min  <C, X>          s.t.  <A_i, X> = b_i,   X = (X_1, .., X_K, x_lp) in K
//! ```
//!
//! where `K` is a product of real symmetric PSD cones and one nonnegative
//! orthant. The iterates live in the homogeneous self-dual embedding, so an
//! infeasible problem ends with a Farkas ray instead of diverging. Search
//! directions use Nesterov-Todd scaling with a Mehrotra predictor-corrector.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};

/// One equality row: sparse over PSD blocks, sparse over orthant entries.
#[derive(Debug, Clone)]
pub(crate) struct Row {
    pub blocks: Vec<(usize, DMatrix<f64>)>,
    pub lp: Vec<(usize, f64)>,
    pub b: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ConeProgram {
    pub block_dims: Vec<usize>,
    pub n_lp: usize,
    pub c_blocks: Vec<DMatrix<f64>>,
    pub c_lp: Vec<f64>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmSettings {
    pub max_iter: usize,
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub tol_infeas: f64,
    /// Looser tolerance accepted when progress stalls on degenerate problems.
    pub tol_stall: f64,
    pub step_fraction: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self { max_iter: 100, tol_feas: 1e-8, tol_gap: 1e-8, tol_infeas: 1e-8, tol_stall: 1e-6, step_fraction: 0.99 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum IpmStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
    NumericalError,
}

#[derive(Debug, Clone)]
pub(crate) struct IpmSolution {
    pub status: IpmStatus,
    /// Primal point, divided by `tau` when optimal.
    pub x: Point,
    /// Dual multipliers; a Farkas ray when primal infeasible.
    pub y: Vec<f64>,
    #[allow(dead_code)]
    pub s: Point,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Point {
    pub blk: Vec<DMatrix<f64>>,
    pub lp: Vec<f64>,
}

impl Point {
    fn zeros(prob: &ConeProgram) -> Self {
        Self { blk: prob.block_dims.iter().map(|&n| DMatrix::zeros(n, n)).collect(), lp: vec![0.0; prob.n_lp] }
    }

    fn identity(prob: &ConeProgram) -> Self {
        Self { blk: prob.block_dims.iter().map(|&n| DMatrix::identity(n, n)).collect(), lp: vec![1.0; prob.n_lp] }
    }

    fn dot(&self, other: &Point) -> f64 {
        let b: f64 = self.blk.iter().zip(&other.blk).map(|(a, b)| a.dot(b)).sum();
        b + self.lp.iter().zip(&other.lp).map(|(a, b)| a * b).sum::<f64>()
    }

    fn axpy(&mut self, alpha: f64, other: &Point) {
        for (a, b) in self.blk.iter_mut().zip(&other.blk) {
            a.zip_apply(b, |u, v| *u += alpha * v);
        }
        for (a, b) in self.lp.iter_mut().zip(&other.lp) {
            *a += alpha * b;
        }
    }

    fn scale(&mut self, alpha: f64) {
        for a in &mut self.blk {
            *a *= alpha;
        }
        for a in &mut self.lp {
            *a *= alpha;
        }
    }

    fn norm_inf(&self) -> f64 {
        let b = self.blk.iter().flat_map(|m| m.iter()).fold(0.0f64, |acc, v| acc.max(v.abs()));
        self.lp.iter().fold(b, |acc, v| acc.max(v.abs()))
    }
}

impl ConeProgram {
    fn m(&self) -> usize {
        self.rows.len()
    }

    fn degree(&self) -> f64 {
        (self.block_dims.iter().sum::<usize>() + self.n_lp + 1) as f64
    }

    fn c_point(&self) -> Point {
        Point { blk: self.c_blocks.clone(), lp: self.c_lp.clone() }
    }

    fn apply(&self, x: &Point) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| {
                let b: f64 = r.blocks.iter().map(|(k, a)| a.dot(&x.blk[*k])).sum();
                b + r.lp.iter().map(|&(l, a)| a * x.lp[l]).sum::<f64>()
            })
            .collect()
    }

    fn apply_t(&self, y: &[f64]) -> Point {
        let mut out = Point::zeros(self);
        for (r, &yi) in self.rows.iter().zip(y) {
            if yi == 0.0 {
                continue;
            }
            for (k, a) in &r.blocks {
                out.blk[*k].zip_apply(a, |u, v| *u += yi * v);
            }
            for &(l, a) in &r.lp {
                out.lp[l] += yi * a;
            }
        }
        out
    }

    fn b(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.b).collect()
    }
}

/// Nesterov-Todd scaling of one PSD block: `G^{-1} X G^{-T} = G^T S G = diag(lam)`.
struct BlockScaling {
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    w: DMatrix<f64>,
    lam: DVector<f64>,
}

impl BlockScaling {
    fn new(x: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<Self> {
        let lx = Cholesky::new(x.clone())?.unpack();
        let ls = Cholesky::new(s.clone())?.unpack();
        let svd = SVD::new(ls.transpose() * &lx, true, true);
        let v = svd.v_t?.transpose();
        let lam = svd.singular_values;
        if lam.iter().any(|&l| !(l > 0.0)) {
            return None;
        }
        let n = lam.len();
        let lx_inv = lx.solve_lower_triangular(&DMatrix::identity(n, n))?;
        let mut g = &lx * &v;
        let mut g_inv = v.transpose() * lx_inv;
        for k in 0..n {
            let r = lam[k].sqrt();
            g.column_mut(k).scale_mut(1.0 / r);
            g_inv.row_mut(k).scale_mut(r);
        }
        let w = &g * g.transpose();
        Some(Self { g, g_inv, w, lam })
    }

    fn to_scaled_x(&self, dx: &DMatrix<f64>) -> DMatrix<f64> {
        &self.g_inv * dx * self.g_inv.transpose()
    }

    fn to_scaled_s(&self, ds: &DMatrix<f64>) -> DMatrix<f64> {
        self.g.transpose() * ds * &self.g
    }

    fn sandwich_w(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.w * a * &self.w
    }

    fn lyapunov(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| 2.0 * r[(i, j)] / (self.lam[i] + self.lam[j]))
    }

    /// Largest `a` with `diag(lam) + a * d` PSD, where `d` is in scaled coordinates.
    fn max_step(&self, d: &DMatrix<f64>) -> f64 {
        let n = d.nrows();
        let m = DMatrix::from_fn(n, n, |i, j| d[(i, j)] / (self.lam[i] * self.lam[j]).sqrt());
        let min_eig = SymmetricEigen::new(m).eigenvalues.min();
        if min_eig < 0.0 {
            -1.0 / min_eig
        } else {
            f64::INFINITY
        }
    }
}

struct Scalings {
    blocks: Vec<BlockScaling>,
    /// Orthant scaling `w = sqrt(x/s)` and scaled point `lam = sqrt(x s)`.
    lp_w: Vec<f64>,
    lp_lam: Vec<f64>,
}

impl Scalings {
    fn new(x: &Point, s: &Point) -> Option<Self> {
        let blocks = x.blk.iter().zip(&s.blk).map(|(x, s)| BlockScaling::new(x, s)).collect::<Option<Vec<_>>>()?;
        if x.lp.iter().chain(&s.lp).any(|&v| !(v > 0.0)) {
            return None;
        }
        let lp_w = x.lp.iter().zip(&s.lp).map(|(x, s)| (x / s).sqrt()).collect();
        let lp_lam = x.lp.iter().zip(&s.lp).map(|(x, s)| (x * s).sqrt()).collect();
        Some(Self { blocks, lp_w, lp_lam })
    }

    /// `W a W` blockwise.
    fn sandwich(&self, a: &Point) -> Point {
        Point {
            blk: self.blocks.iter().zip(&a.blk).map(|(sc, a)| sc.sandwich_w(a)).collect(),
            lp: self.lp_w.iter().zip(&a.lp).map(|(w, a)| w * w * a).collect(),
        }
    }

    /// `G d G^T` blockwise, for `d` in scaled coordinates.
    fn unscale(&self, d: &Point) -> Point {
        Point {
            blk: self.blocks.iter().zip(&d.blk).map(|(sc, d)| &sc.g * d * sc.g.transpose()).collect(),
            lp: self.lp_w.iter().zip(&d.lp).map(|(w, d)| w * d).collect(),
        }
    }

    /// Scaled complementarity right-hand side `sigma mu e - lam o lam - corr`,
    /// already divided by `lam` (Lyapunov solve).
    fn complementarity_rhs(&self, sigma_mu: f64, corr: Option<(&Point, &Point)>) -> Point {
        let blk = self
            .blocks
            .iter()
            .enumerate()
            .map(|(k, sc)| {
                let n = sc.lam.len();
                let mut r = DMatrix::from_fn(n, n, |i, j| if i == j { sigma_mu - sc.lam[i] * sc.lam[i] } else { 0.0 });
                if let Some((dx, ds)) = corr {
                    let a = sc.to_scaled_x(&dx.blk[k]);
                    let b = sc.to_scaled_s(&ds.blk[k]);
                    let ab = &a * &b;
                    r -= (&ab + ab.transpose()) * 0.5;
                }
                sc.lyapunov(&r)
            })
            .collect();
        let lp = self
            .lp_lam
            .iter()
            .enumerate()
            .map(|(l, &lam)| {
                let mut r = sigma_mu - lam * lam;
                if let Some((dx, ds)) = corr {
                    r -= dx.lp[l] * ds.lp[l];
                }
                r / lam
            })
            .collect();
        Point { blk, lp }
    }
}

struct Direction {
    dx: Point,
    ds: Point,
    dy: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

struct Residuals {
    e1: Vec<f64>,
    e2: Point,
    e3: f64,
}

struct Kkt<'a> {
    prob: &'a ConeProgram,
    sc: Scalings,
    chol: Cholesky<f64, nalgebra::Dyn>,
    wcw: Point,
    q: DVector<f64>,
    c: Point,
    b: DVector<f64>,
}

impl<'a> Kkt<'a> {
    fn new(prob: &'a ConeProgram, sc: Scalings) -> Option<Self> {
        let m = prob.m();
        let mut mat = DMatrix::<f64>::zeros(m, m);
        // Schur complement M_ik = <A_i, W A_k W>.
        for (k, rk) in prob.rows.iter().enumerate() {
            for (blk, a) in &rk.blocks {
                let t = sc.blocks[*blk].sandwich_w(a);
                for (i, ri) in prob.rows.iter().enumerate().skip(k) {
                    if let Some((_, ai)) = ri.blocks.iter().find(|(b, _)| b == blk) {
                        mat[(i, k)] += ai.dot(&t);
                    }
                }
            }
            for &(l, a) in &rk.lp {
                let w2 = sc.lp_w[l] * sc.lp_w[l];
                for (i, ri) in prob.rows.iter().enumerate().skip(k) {
                    if let Some(&(_, ai)) = ri.lp.iter().find(|(ll, _)| *ll == l) {
                        mat[(i, k)] += ai * a * w2;
                    }
                }
            }
        }
        for k in 0..m {
            for i in (k + 1)..m {
                mat[(k, i)] = mat[(i, k)];
            }
        }
        let chol = Cholesky::new(mat.clone()).or_else(|| {
            let shift = 1e-13 * mat.diagonal().amax().max(1e-300);
            Cholesky::new(mat + DMatrix::identity(m, m) * shift)
        })?;
        let c = prob.c_point();
        let b = DVector::from_vec(prob.b());
        let wcw = sc.sandwich(&c);
        let q = chol.solve(&(DVector::from_vec(prob.apply(&wcw)) + &b));
        Some(Self { prob, sc, chol, wcw, q, c, b })
    }

    /// Solves the linearized embedding with residual reduction `eta` and
    /// scaled complementarity right-hand side `dc`.
    fn solve(&self, res: &Residuals, eta: f64, dc: &Point, r_tk: f64, tau: f64, kappa: f64) -> Direction {
        let prob = self.prob;
        let mut z = self.sc.unscale(dc);
        z.axpy(eta, &self.sc.sandwich(&res.e2));
        let az = prob.apply(&z);
        let rhs1 = DVector::from_iterator(az.len(), res.e1.iter().zip(&az).map(|(e, a)| -eta * e - a));
        let p = self.chol.solve(&rhs1);

        let mut x0 = z;
        x0.axpy(1.0, &self.sc.sandwich(&prob.apply_t(p.as_slice())));
        let mut x1 = self.sc.sandwich(&prob.apply_t(self.q.as_slice()));
        x1.axpy(-1.0, &self.wcw);

        let num = -eta * res.e3 + self.c.dot(&x0) - self.b.dot(&p) + r_tk / tau;
        let den = -self.c.dot(&x1) + self.b.dot(&self.q) + kappa / tau;
        let dtau = num / den;

        let dy: Vec<f64> = p.iter().zip(self.q.iter()).map(|(p, q)| p + q * dtau).collect();
        let mut dx = x0;
        dx.axpy(dtau, &x1);
        let mut ds = prob.apply_t(&dy);
        ds.scale(-1.0);
        ds.axpy(-eta, &res.e2);
        ds.axpy(dtau, &self.c);
        let dkappa = (r_tk - kappa * dtau) / tau;
        Direction { dx, ds, dy, dtau, dkappa }
    }

    fn max_step(&self, x: &Point, s: &Point, d: &Direction, tau: f64, kappa: f64) -> f64 {
        let mut alpha = f64::INFINITY;
        for (k, sc) in self.sc.blocks.iter().enumerate() {
            alpha = alpha.min(sc.max_step(&sc.to_scaled_x(&d.dx.blk[k])));
            alpha = alpha.min(sc.max_step(&sc.to_scaled_s(&d.ds.blk[k])));
        }
        let ratio = |v: f64, dv: f64| if dv < 0.0 { -v / dv } else { f64::INFINITY };
        for l in 0..x.lp.len() {
            alpha = alpha.min(ratio(x.lp[l], d.dx.lp[l])).min(ratio(s.lp[l], d.ds.lp[l]));
        }
        alpha.min(ratio(tau, d.dtau)).min(ratio(kappa, d.dkappa))
    }
}

pub(crate) fn solve(prob: &ConeProgram, set: &IpmSettings) -> IpmSolution {
    let m = prob.m();
    let mut x = Point::identity(prob);
    let mut s = Point::identity(prob);
    let mut y = vec![0.0; m];
    let (mut tau, mut kappa) = (1.0f64, 1.0f64);
    let nu = prob.degree();
    let b = prob.b();
    let c = prob.c_point();
    let b_norm = b.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let c_norm = c.norm_inf().max(1.0);

    let finish = |status, x: Point, y: Vec<f64>, s: Point, iterations| IpmSolution { status, x, y, s, iterations };

    for iter in 0..set.max_iter {
        let ax = prob.apply(&x);
        let aty = prob.apply_t(&y);
        let cx = c.dot(&x);
        let by: f64 = b.iter().zip(&y).map(|(b, y)| b * y).sum();
        let e1: Vec<f64> = ax.iter().zip(&b).map(|(a, b)| a - b * tau).collect();
        let mut e2 = aty.clone();
        e2.axpy(1.0, &s);
        e2.axpy(-tau, &c);
        let e3 = -cx + by - kappa;

        let pres = e1.iter().fold(0.0f64, |a, v| a.max(v.abs())) / tau / b_norm;
        let dres = e2.norm_inf() / tau / c_norm;
        let (pobj, dobj) = (cx / tau, by / tau);
        let gap = (pobj - dobj).abs();
        let gap_scale = pobj.abs().min(dobj.abs()).max(1.0);
        let optimal = |tol_feas: f64, tol_gap: f64| pres <= tol_feas && dres <= tol_feas && gap <= tol_gap * gap_scale;
        let ray_norm = if by > 0.0 {
            let mut ray = aty.clone();
            ray.axpy(1.0, &s);
            ray.norm_inf()
        } else {
            f64::INFINITY
        };
        let infeasible = |tol: f64| ray_norm <= tol * by;
        let finish_optimal = |mut x: Point, y: Vec<f64>, mut s: Point| {
            x.scale(1.0 / tau);
            s.scale(1.0 / tau);
            let y = y.iter().map(|v| v / tau).collect();
            finish(IpmStatus::Optimal, x, y, s, iter)
        };
        if optimal(set.tol_feas, set.tol_gap) {
            return finish_optimal(x, y, s);
        }
        if infeasible(set.tol_infeas) {
            return finish(IpmStatus::PrimalInfeasible, x, y, s, iter);
        }
        let stalled = |x: Point, y: Vec<f64>, s: Point| {
            if optimal(set.tol_stall, set.tol_stall) {
                finish_optimal(x, y, s)
            } else if infeasible(set.tol_stall) {
                finish(IpmStatus::PrimalInfeasible, x, y, s, iter)
            } else {
                finish(IpmStatus::NumericalError, x, y, s, iter)
            }
        };
        if cx < 0.0 {
            let ax_norm = ax.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if ax_norm <= set.tol_infeas * -cx {
                return finish(IpmStatus::DualInfeasible, x, y, s, iter);
            }
        }

        let mu = (x.dot(&s) + tau * kappa) / nu;
        let Some(sc) = Scalings::new(&x, &s) else {
            return stalled(x, y, s);
        };
        let Some(kkt) = Kkt::new(prob, sc) else {
            return stalled(x, y, s);
        };
        let res = Residuals { e1, e2, e3 };

        let dc_aff = kkt.sc.complementarity_rhs(0.0, None);
        let aff = kkt.solve(&res, 1.0, &dc_aff, -tau * kappa, tau, kappa);
        let alpha_aff = kkt.max_step(&x, &s, &aff, tau, kappa).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3);

        let dc = kkt.sc.complementarity_rhs(sigma * mu, Some((&aff.dx, &aff.ds)));
        let r_tk = sigma * mu - tau * kappa - aff.dtau * aff.dkappa;
        let dir = kkt.solve(&res, 1.0 - sigma, &dc, r_tk, tau, kappa);
        let alpha = (set.step_fraction * kkt.max_step(&x, &s, &dir, tau, kappa)).min(1.0);
        if !(alpha > 1e-12) {
            drop(kkt);
            return stalled(x, y, s);
        }

        x.axpy(alpha, &dir.dx);
        s.axpy(alpha, &dir.ds);
        for (yi, di) in y.iter_mut().zip(&dir.dy) {
            *yi += alpha * di;
        }
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;
        // Symmetrize against drift from the sandwich products.
        for blk in x.blk.iter_mut().chain(s.blk.iter_mut()) {
            let t = blk.transpose();
            *blk += t;
            *blk *= 0.5;
        }
        if !(tau.is_finite() && kappa.is_finite()) {
            return finish(IpmStatus::NumericalError, x, y, s, iter);
        }
    }
    finish(IpmStatus::MaxIterations, x, y, s, set.max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp_row(coeffs: &[(usize, f64)], b: f64) -> Row {
        Row { blocks: vec![], lp: coeffs.to_vec(), b }
    }

    #[test]
    fn small_lp() {
        // min x0 + 2 x1  s.t.  x0 + x1 - x2 = 1  ->  optimum 1 at x0 = 1.
        let prob = ConeProgram {
            block_dims: vec![],
            n_lp: 3,
            c_blocks: vec![],
            c_lp: vec![1.0, 2.0, 0.0],
            rows: vec![lp_row(&[(0, 1.0), (1, 1.0), (2, -1.0)], 1.0)],
        };
        let sol = solve(&prob, &IpmSettings::default());
        assert_eq!(sol.status, IpmStatus::Optimal);
        assert!((sol.x.lp[0] - 1.0).abs() < 1e-7);
        assert!((sol.y[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn infeasible_lp_gives_ray() {
        // x0 + x1 = -1 with x >= 0 has no solution.
        let prob = ConeProgram {
            block_dims: vec![],
            n_lp: 2,
            c_blocks: vec![],
            c_lp: vec![1.0, 1.0],
            rows: vec![lp_row(&[(0, 1.0), (1, 1.0)], -1.0)],
        };
        let sol = solve(&prob, &IpmSettings::default());
        assert_eq!(sol.status, IpmStatus::PrimalInfeasible);
        assert!(-sol.y[0] > 0.0);
    }

    #[test]
    fn min_eigenvalue_sdp() {
        // min <C, X>  s.t. tr X = 1  has value lambda_min(C).
        let cm = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let expected = SymmetricEigen::new(cm.clone()).eigenvalues.min();
        let prob = ConeProgram {
            block_dims: vec![3],
            n_lp: 0,
            c_blocks: vec![cm],
            c_lp: vec![],
            rows: vec![Row { blocks: vec![(0, DMatrix::identity(3, 3))], lp: vec![], b: 1.0 }],
        };
        let sol = solve(&prob, &IpmSettings::default());
        assert_eq!(sol.status, IpmStatus::Optimal);
        let val = prob.c_blocks[0].dot(&sol.x.blk[0]);
        assert!((val - expected).abs() < 1e-7, "{val} vs {expected}");
        let eig = SymmetricEigen::new(sol.x.blk[0].clone()).eigenvalues;
        let mut e: Vec<f64> = eig.iter().copied().collect();
        e.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(e[1] / e[0] < 1e-6);
    }
}
