//! System, channel, beamformer and rate-split data model together with the
//! over-the-air and backhaul constraint evaluators.
//!
//! Users and base stations are indexed `0` and `1` throughout. Channel
//! `h[i][j]` is the row vector from base station `j` to user `i`; products
//! `h * w` are plain (non-conjugating) sums.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CVec = DVector<C64>;
pub type CMat = DMatrix<C64>;

/// Default tolerance on rate inequalities, bits/s/Hz.
pub const RATE_TOL: f64 = 1e-7;
/// Default relative tolerance on per-BS power constraints.
pub const POWER_TOL: f64 = 1e-6;

/// Index of the other user / base station.
#[inline]
pub fn other(i: usize) -> usize {
    1 - i
}

pub fn log2_1p(x: f64) -> f64 {
    x.ln_1p() / std::f64::consts::LN_2
}

/// `2^r - 1`, accurate for small `r`.
pub fn exp2_m1(r: f64) -> f64 {
    (r * std::f64::consts::LN_2).exp_m1()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Per-BS power limits, linear units.
    pub p: [f64; 2],
    /// Backhaul capacities, bits/s/Hz.
    pub c_bh: [f64; 2],
    pub noise_var: f64,
    pub n_t: usize,
}

impl SystemConfig {
    pub fn new(p: [f64; 2], c_bh: [f64; 2], noise_var: f64, n_t: usize) -> Result<Self> {
        let cfg = Self { p, c_bh, noise_var, n_t };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Symmetric configuration with `P/σ²` given in dB and unit noise power.
    pub fn symmetric(snr_db: f64, c: f64, n_t: usize) -> Result<Self> {
        let p = 10f64.powf(snr_db / 10.0);
        Self::new([p, p], [c, c], 1.0, n_t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidConfig(format!("power limits must be positive, got {:?}", self.p)));
        }
        if self.c_bh.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidConfig(format!(
                "backhaul capacities must be nonnegative, got {:?}",
                self.c_bh
            )));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise variance must be positive, got {}", self.noise_var)));
        }
        if self.n_t == 0 {
            return Err(Error::InvalidConfig("n_t must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    h: [[CVec; 2]; 2],
}

impl ChannelState {
    pub fn new(h: [[CVec; 2]; 2]) -> Result<Self> {
        let n_t = h[0][0].len();
        if n_t == 0 {
            return Err(Error::Dimension("channel vectors must be nonempty".into()));
        }
        for (i, row) in h.iter().enumerate() {
            for (j, hij) in row.iter().enumerate() {
                if hij.len() != n_t {
                    return Err(Error::Dimension(format!(
                        "h[{i}][{j}] has length {}, expected {n_t}",
                        hij.len()
                    )));
                }
                if hij.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
                    return Err(Error::InvalidConfig(format!("h[{i}][{j}] has non-finite entries")));
                }
            }
        }
        Ok(Self { h })
    }

    /// Builds a channel from `[re, im]` rows ordered `h11, h12, h21, h22`.
    pub fn from_rows(rows: &[Vec<[f64; 2]>]) -> Result<Self> {
        if rows.len() != 4 {
            return Err(Error::Dimension(format!("expected 4 channel rows, got {}", rows.len())));
        }
        let v = |k: usize| CVec::from_iterator(rows[k].len(), rows[k].iter().map(|&[re, im]| C64::new(re, im)));
        Self::new([[v(0), v(1)], [v(2), v(3)]])
    }

    pub fn to_rows(&self) -> Vec<Vec<[f64; 2]>> {
        self.h
            .iter()
            .flat_map(|row| row.iter())
            .map(|hij| hij.iter().map(|z| [z.re, z.im]).collect())
            .collect()
    }

    pub fn n_t(&self) -> usize {
        self.h[0][0].len()
    }

    /// Channel from BS `j` to user `i`.
    pub fn h(&self, i: usize, j: usize) -> &CVec {
        &self.h[i][j]
    }

    /// Stacked channel `[h_i1 h_i2]` of user `i`.
    pub fn stacked(&self, i: usize) -> CVec {
        let n = self.n_t();
        let mut out = CVec::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&self.h[i][0]);
        out.rows_mut(n, n).copy_from(&self.h[i][1]);
        out
    }

    /// The sample channel used throughout the fixed-channel experiments
    /// (two antennas per BS).
    pub fn reference() -> Self {
        let row = |a: [(f64, f64); 2]| CVec::from_iterator(2, a.iter().map(|&(re, im)| C64::new(re, im)));
        Self::new([
            [
                row([(0.2939, -1.1488), (-1.5260, -0.3861)]),
                row([(0.3963, -0.2679), (0.8306, 0.6110)]),
            ],
            [
                row([(-0.7201, -0.3025), (-0.9658, -0.1754)]),
                row([(0.1952, -0.0026), (1.7096, 0.4040)]),
            ],
        ])
        .expect("reference channel is well formed")
    }
}

/// Shared beamformers `w_c[i]` (length `2 n_t`, block `j` transmitted by
/// BS `j`) and private beamformers `w_p[i][j]` (length `n_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub w_c: [CVec; 2],
    pub w_p: [[CVec; 2]; 2],
}

impl BeamformerSet {
    pub fn zeros(n_t: usize) -> Self {
        Self {
            w_c: [CVec::zeros(2 * n_t), CVec::zeros(2 * n_t)],
            w_p: [[CVec::zeros(n_t), CVec::zeros(n_t)], [CVec::zeros(n_t), CVec::zeros(n_t)]],
        }
    }

    pub fn n_t(&self) -> usize {
        self.w_p[0][0].len()
    }

    fn check_dims(&self, n_t: usize) -> Result<()> {
        let ok = self.w_c.iter().all(|w| w.len() == 2 * n_t)
            && self.w_p.iter().flatten().all(|w| w.len() == n_t);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!("beamformer set does not match n_t = {n_t}")))
        }
    }

    /// Block of the shared beamformer of user `i` owned by BS `j`.
    pub fn shared_block(&self, i: usize, j: usize) -> CVec {
        let n = self.n_t();
        self.w_c[i].rows(j * n, n).into_owned()
    }
}

/// Total and private rates of both users; the shared rate is the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateSplit {
    pub r: [f64; 2],
    /// `r_p[i][j]`: private rate of user `i` carried by BS `j`.
    pub r_p: [[f64; 2]; 2],
}

impl RateSplit {
    pub fn shared(&self, i: usize) -> f64 {
        self.r[i] - self.r_p[i][0] - self.r_p[i][1]
    }

    pub fn total_private(&self) -> f64 {
        self.r_p.iter().flatten().sum()
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.r.iter().chain(self.r_p.iter().flatten()).any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidRates(format!("negative or NaN rate in {self:?}")));
        }
        for i in 0..2 {
            if self.shared(i) < -tol {
                return Err(Error::InvalidRates(format!(
                    "private rates of user {} exceed its total rate",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// `|h w|^2` without conjugation of either factor.
#[inline]
pub fn gain(h: &CVec, w: &CVec) -> f64 {
    h.dot(w).norm_sqr()
}

/// Interference-plus-noise power seen by `user`.
pub fn interference_plus_noise(cfg: &SystemConfig, ch: &ChannelState, bf: &BeamformerSet, user: usize) -> Result<f64> {
    if user > 1 {
        return Err(Error::Dimension(format!("user index {user} out of range")));
    }
    bf.check_dims(cfg.n_t)?;
    if ch.n_t() != cfg.n_t {
        return Err(Error::Dimension("channel does not match n_t".into()));
    }
    let o = other(user);
    let private: f64 = (0..2).map(|j| gain(ch.h(user, j), &bf.w_p[o][j])).sum();
    Ok(cfg.noise_var + private + gain(&ch.stacked(user), &bf.w_c[o]))
}

/// Right-hand sides of the over-the-air rate inequalities for one beamformer set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirBounds {
    pub private: [[f64; 2]; 2],
    pub private_sum: [f64; 2],
    pub total: [f64; 2],
}

pub fn air_bounds(cfg: &SystemConfig, ch: &ChannelState, bf: &BeamformerSet) -> Result<AirBounds> {
    let mut out = AirBounds { private: [[0.0; 2]; 2], private_sum: [0.0; 2], total: [0.0; 2] };
    for i in 0..2 {
        let noise = interference_plus_noise(cfg, ch, bf, i)?;
        let useful = [gain(ch.h(i, 0), &bf.w_p[i][0]), gain(ch.h(i, 1), &bf.w_p[i][1])];
        let shared = gain(&ch.stacked(i), &bf.w_c[i]);
        out.private[i] = [log2_1p(useful[0] / noise), log2_1p(useful[1] / noise)];
        out.private_sum[i] = log2_1p((useful[0] + useful[1]) / noise);
        out.total[i] = log2_1p((shared + useful[0] + useful[1]) / noise);
    }
    Ok(out)
}

/// Per-BS transmit powers.
pub fn power_usage(bf: &BeamformerSet) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (j, pj) in out.iter_mut().enumerate() {
        for i in 0..2 {
            *pj += bf.shared_block(i, j).norm_squared() + bf.w_p[i][j].norm_squared();
        }
    }
    out
}

pub fn power_feasible(cfg: &SystemConfig, bf: &BeamformerSet, rel_tol: f64) -> bool {
    let used = power_usage(bf);
    (0..2).all(|j| used[j] <= cfg.p[j] * (1.0 + rel_tol))
}

/// Whether `rs` lies in the over-the-air region achieved by `bf`. Beamformer
/// sets exceeding a power limit (beyond [`POWER_TOL`]) are rejected.
pub fn air_region_check(
    cfg: &SystemConfig,
    ch: &ChannelState,
    bf: &BeamformerSet,
    rs: &RateSplit,
    tol: f64,
) -> Result<bool> {
    rs.validate(tol)?;
    if !power_feasible(cfg, bf, POWER_TOL) {
        return Ok(false);
    }
    let b = air_bounds(cfg, ch, bf)?;
    let ok = (0..2).all(|i| {
        (0..2).all(|j| rs.r_p[i][j] <= b.private[i][j] + tol)
            && rs.r_p[i][0] + rs.r_p[i][1] <= b.private_sum[i] + tol
            && rs.r[i] <= b.total[i] + tol
    });
    Ok(ok)
}

/// Backhaul constraints: link `j` carries every message except the private
/// traffic of the other BS, and the sum rate cannot exceed `C_1 + C_2`.
pub fn backhaul_check(cfg: &SystemConfig, rs: &RateSplit, tol: f64) -> Result<bool> {
    rs.validate(tol)?;
    let sum = rs.r[0] + rs.r[1];
    let links = (0..2).all(|j| {
        let o = other(j);
        sum - rs.r_p[0][o] - rs.r_p[1][o] <= cfg.c_bh[j] + tol
    });
    Ok(links && sum <= cfg.c_bh[0] + cfg.c_bh[1] + tol)
}

/// On-disk configuration document shared by the library and the CLI.
///
/// ```json
/// {"nt": 2, "sigma2": 1.0, "P": [10, 10], "C": [1, 1],
///  "H": [[[re, im], ...], [...], [...], [...]]}
/// ```
///
/// `H` holds the rows `h11, h12, h21, h22` (user-major, then BS), each a list
/// of `n_t` complex entries written as `[re, im]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    pub nt: usize,
    pub sigma2: f64,
    #[serde(rename = "P")]
    pub p: [f64; 2],
    #[serde(rename = "C")]
    pub c: [f64; 2],
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<[f64; 2]>>>,
}

impl ConfigDocument {
    pub fn from_parts(cfg: &SystemConfig, ch: Option<&ChannelState>) -> Self {
        Self { nt: cfg.n_t, sigma2: cfg.noise_var, p: cfg.p, c: cfg.c_bh, h: ch.map(ChannelState::to_rows) }
    }

    pub fn system(&self) -> Result<SystemConfig> {
        SystemConfig::new(self.p, self.c, self.sigma2, self.nt)
    }

    pub fn channel(&self) -> Result<Option<ChannelState>> {
        let Some(rows) = &self.h else { return Ok(None) };
        let ch = ChannelState::from_rows(rows)?;
        if ch.n_t() != self.nt {
            return Err(Error::Dimension(format!("channel has {} antennas, nt = {}", ch.n_t(), self.nt)));
        }
        Ok(Some(ch))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
