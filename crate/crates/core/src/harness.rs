//! Experiment drivers: fading channel generation, Monte Carlo sum-rate
//! sweeps and fixed-channel region comparisons.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CVec, ChannelState, ConfigDocument, SystemConfig, C64};
use crate::qnm::{qnm_boundary, QnmOptions};
use crate::region::{alpha_grid, bisect_sum_rate, region_boundary, write_csv, CheckOptions, CsvRow, SchemeKind};

/// Symmetric Rayleigh fading with cross-link strength `eps`.
///
/// Sample `k` is drawn from ChaCha8 stream `k` of `seed`, so any subset of
/// samples can be regenerated independently and in any order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadingModel {
    pub eps: f64,
    pub n_t: usize,
    pub seed: u64,
}

impl FadingModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps must be nonnegative, got {}", self.eps)));
        }
        if self.n_t == 0 {
            return Err(Error::InvalidConfig("n_t must be at least 1".into()));
        }
        Ok(())
    }

    /// Channel number `index` of this model.
    pub fn sample(&self, index: u64) -> Result<ChannelState> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let direct = Normal::new(0.0, 0.5f64.sqrt()).expect("valid deviation");
        let cross = Normal::new(0.0, (0.5 * self.eps).sqrt()).expect("valid deviation");
        let mut draw = |dist: &Normal<f64>| {
            CVec::from_iterator(
                self.n_t,
                (0..self.n_t).map(|_| {
                    let re = dist.sample(&mut rng);
                    let im = dist.sample(&mut rng);
                    C64::new(re, im)
                }),
            )
        };
        let h11 = draw(&direct);
        let h12 = draw(&cross);
        let h21 = draw(&cross);
        let h22 = draw(&direct);
        ChannelState::new([[h11, h12], [h21, h22]])
    }
}

pub fn generate_channels(model: &FadingModel, n: usize) -> Result<Vec<ChannelState>> {
    (0..n as u64).map(|k| model.sample(k)).collect()
}

pub fn snr_to_power(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

/// Monte Carlo sweep over an SNR x backhaul grid at `alpha = 0.5` (FRS).
/// SNR is `P / sigma^2` in dB with `sigma^2 = 1`; `-inf` dB means `P = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub snr_db: Vec<f64>,
    pub c: Vec<f64>,
    pub eps: f64,
    pub n_t: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub tol_r: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            c: vec![1.0, 5.0, 10.0],
            eps: 0.1,
            n_t: 2,
            n_samples: 100,
            seed: 1,
            tol_r: 1e-4,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        if self.snr_db.is_empty() || self.c.is_empty() {
            return Err(Error::InvalidConfig("SNR and backhaul grids must be nonempty".into()));
        }
        if self.snr_db.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
            return Err(Error::InvalidConfig(format!("invalid SNR grid {:?}", self.snr_db)));
        }
        if !(self.tol_r > 0.0) {
            return Err(Error::InvalidConfig(format!("tol_r must be positive, got {}", self.tol_r)));
        }
        self.fading().validate()
    }

    pub fn fading(&self) -> FadingModel {
        FadingModel { eps: self.eps, n_t: self.n_t, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub snr_db: f64,
    pub c: f64,
    pub mean_sum_rate: f64,
    pub mean_private_fraction: f64,
    /// Samples that entered the averages.
    pub samples: usize,
    /// Samples dropped after a solver error.
    pub failed_samples: usize,
    /// Individual solves treated as infeasible after a numerical failure.
    pub numerical_failures: usize,
}

pub const MC_CSV_HEADER: &str = "snr_db,c,mean_sum_rate,mean_private_fraction,samples,failed_samples,numerical_failures";

/// Averages the FRS maximum sum rate and private fraction per grid cell.
/// Every cell reuses the same channel draws.
pub fn monte_carlo_sum_rate(spec: &ExperimentSpec, opts: &CheckOptions) -> Result<Vec<McCell>> {
    spec.validate()?;
    let channels = generate_channels(&spec.fading(), spec.n_samples)?;
    let mut cells = Vec::with_capacity(spec.snr_db.len() * spec.c.len());
    for &snr in &spec.snr_db {
        let p = snr_to_power(snr);
        for &c in &spec.c {
            if p <= 0.0 {
                cells.push(McCell {
                    snr_db: snr,
                    c,
                    mean_sum_rate: 0.0,
                    mean_private_fraction: 0.0,
                    samples: spec.n_samples,
                    failed_samples: 0,
                    numerical_failures: 0,
                });
                continue;
            }
            let cfg = SystemConfig::new([p, p], [c, c], 1.0, spec.n_t)?;
            let results: Vec<_> = channels
                .par_iter()
                .enumerate()
                .map(|(k, ch)| {
                    let res = bisect_sum_rate(&cfg, ch, 0.5, SchemeKind::Frs, spec.tol_r, opts);
                    if let Err(e) = &res {
                        log::warn!("sample {k} at {snr} dB, C = {c}: {e}");
                    }
                    res
                })
                .collect();
            let mut cell = McCell {
                snr_db: snr,
                c,
                mean_sum_rate: 0.0,
                mean_private_fraction: 0.0,
                samples: 0,
                failed_samples: 0,
                numerical_failures: 0,
            };
            for res in results {
                match res {
                    Ok(pt) => {
                        cell.samples += 1;
                        cell.mean_sum_rate += pt.r;
                        cell.mean_private_fraction += pt.private_fraction;
                        cell.numerical_failures += pt.numerical_failures;
                    }
                    Err(_) => cell.failed_samples += 1,
                }
            }
            if cell.samples > 0 {
                cell.mean_sum_rate /= cell.samples as f64;
                cell.mean_private_fraction /= cell.samples as f64;
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub fn write_mc_csv<W: Write>(mut w: W, cells: &[McCell]) -> Result<()> {
    writeln!(w, "{MC_CSV_HEADER}")?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.snr_db, c.c, c.mean_sum_rate, c.mean_private_fraction, c.samples, c.failed_samples, c.numerical_failures
        )?;
    }
    Ok(())
}

/// Fixed-channel boundary computation for a list of schemes.
#[derive(Debug, Clone)]
pub struct RegionSpec {
    pub schemes: Vec<SchemeKind>,
    pub qnm: bool,
    pub alpha_points: usize,
    pub tol_r: f64,
    pub check: CheckOptions,
    pub qnm_opts: QnmOptions,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self {
            schemes: SchemeKind::ALL.to_vec(),
            qnm: true,
            alpha_points: 41,
            tol_r: 1e-4,
            check: CheckOptions::default(),
            qnm_opts: QnmOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchemeCurve {
    pub label: String,
    pub rows: Vec<CsvRow>,
    pub numerical_failures: usize,
    pub seconds: f64,
}

/// Boundary of every requested scheme on one channel, in request order with
/// QNM last.
pub fn fixed_channel_regions(cfg: &SystemConfig, ch: &ChannelState, spec: &RegionSpec) -> Result<Vec<SchemeCurve>> {
    let alphas = alpha_grid(spec.alpha_points);
    let mut out = Vec::new();
    for &scheme in &spec.schemes {
        let t = Instant::now();
        let pts = region_boundary(cfg, ch, scheme, &alphas, spec.tol_r, &spec.check)?;
        out.push(SchemeCurve {
            label: scheme.label().into(),
            numerical_failures: pts.iter().map(|p| p.numerical_failures).sum(),
            rows: pts.iter().map(|p| p.csv_row()).collect(),
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    if spec.qnm {
        let t = Instant::now();
        let pts = qnm_boundary(cfg, ch, &alphas, &spec.qnm_opts)?;
        for p in pts.iter().filter_map(|p| p.diagnostic.as_ref().map(|d| (p.alpha, d))) {
            log::info!("QNM at alpha = {}: {}", p.0, p.1);
        }
        out.push(SchemeCurve {
            label: "QNM".into(),
            numerical_failures: 0,
            rows: pts.iter().map(|p| p.csv_row()).collect(),
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTiming {
    pub name: String,
    pub seconds: f64,
}

/// Run description written next to the data files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub files: Vec<String>,
    pub timings: Vec<RunTiming>,
    pub failed_samples: usize,
    pub numerical_failures: usize,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            files: Vec::new(),
            timings: Vec::new(),
            failed_samples: 0,
            numerical_failures: 0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Writes one `<label>.csv` per curve and returns the manifest describing them.
pub fn write_region_outputs(
    dir: &Path,
    cfg: &SystemConfig,
    ch: &ChannelState,
    curves: &[SchemeCurve],
    seed: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut m = Manifest::new("region", seed, serde_json::to_value(ConfigDocument::from_parts(cfg, Some(ch)))?);
    for c in curves {
        let name = format!("{}.csv", c.label.to_lowercase());
        let file = std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?);
        write_csv(file, c.rows.iter().cloned())?;
        m.files.push(name);
        m.timings.push(RunTiming { name: c.label.clone(), seconds: c.seconds });
        m.numerical_failures += c.numerical_failures;
    }
    m.write(dir)?;
    Ok(m)
}
