use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use backhaul_coop::harness::{
    fixed_channel_regions, monte_carlo_sum_rate, write_mc_csv, write_region_outputs, ExperimentSpec, Manifest, RegionSpec,
    RunTiming,
};
use backhaul_coop::model::{ChannelState, ConfigDocument, SystemConfig};
use backhaul_coop::qnm::QnmOptions;
use backhaul_coop::region::{CheckOptions, SchemeKind};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bhcoop", version, about = "Two-cell cooperative beamforming with limited backhaul")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Rate-region boundaries on a fixed channel.
    Region {
        #[command(flatten)]
        common: Common,
        /// Comma-separated schemes among FRS, ARS, IC, NM, QNM.
        #[arg(long, default_value = "FRS,ARS,IC,NM,QNM", value_delimiter = ',')]
        scheme: Vec<String>,
        #[arg(long, default_value_t = 41)]
        alpha_points: usize,
    },
    /// Average FRS sum rate over fading samples.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        /// Comma-separated SNR grid in dB.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Option<Vec<f64>>,
        /// Comma-separated backhaul capacities.
        #[arg(long, value_delimiter = ',')]
        capacity: Option<Vec<f64>>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// QNM boundary on a fixed channel.
    Qnm {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 41)]
        alpha_points: usize,
    },
}

/// Completed with some samples skipped.
const EXIT_PARTIAL: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Region { common, scheme, alpha_points } => {
            init_threads(common.threads)?;
            let mut schemes = Vec::new();
            let mut qnm = false;
            for s in &scheme {
                if s.eq_ignore_ascii_case("qnm") {
                    qnm = true;
                } else {
                    schemes.push(s.parse::<SchemeKind>()?);
                }
            }
            region(&common, schemes, qnm, alpha_points, "region")
        }
        Command::Qnm { common, alpha_points } => {
            init_threads(common.threads)?;
            region(&common, Vec::new(), true, alpha_points, "qnm")
        }
        Command::Montecarlo { common, samples, snr, capacity, eps } => {
            init_threads(common.threads)?;
            let mut spec = match &common.config {
                Some(p) => serde_json::from_str::<ExperimentSpec>(&read(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => ExperimentSpec::default(),
            };
            spec.seed = common.seed;
            if let Some(n) = samples {
                spec.n_samples = n;
            }
            if let Some(s) = snr {
                spec.snr_db = s;
            }
            if let Some(c) = capacity {
                spec.c = c;
            }
            if let Some(e) = eps {
                spec.eps = e;
            }
            montecarlo(&common.out, &spec)
        }
    }
}

fn init_threads(n: usize) -> Result<()> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// System and channel from `--config`, defaulting to the reference channel
/// at 10 dB with unit backhaul.
fn load_system(config: Option<&Path>) -> Result<(SystemConfig, ChannelState)> {
    let Some(path) = config else {
        let ch = ChannelState::reference();
        return Ok((SystemConfig::new([10.0, 10.0], [1.0, 1.0], 1.0, ch.n_t())?, ch));
    };
    let doc = ConfigDocument::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let cfg = doc.system()?;
    let ch = match doc.channel()? {
        Some(ch) => ch,
        None if cfg.n_t == 2 => ChannelState::reference(),
        None => bail!("configuration has no channel and nt = {} differs from the reference channel", cfg.n_t),
    };
    Ok((cfg, ch))
}

fn region(common: &Common, schemes: Vec<SchemeKind>, qnm: bool, alpha_points: usize, command: &str) -> Result<u8> {
    if alpha_points == 0 {
        bail!("--alpha-points must be at least 1");
    }
    let (cfg, ch) = load_system(common.config.as_deref())?;
    let spec = RegionSpec {
        schemes,
        qnm,
        alpha_points,
        check: CheckOptions::default(),
        qnm_opts: QnmOptions { seed: common.seed, ..QnmOptions::default() },
        ..RegionSpec::default()
    };
    let curves = fixed_channel_regions(&cfg, &ch, &spec)?;
    let mut manifest = write_region_outputs(&common.out, &cfg, &ch, &curves, common.seed)?;
    manifest.command = command.into();
    manifest.write(&common.out)?;
    for c in &curves {
        let best = c.rows.iter().map(|r| r.r_pair[0] + r.r_pair[1]).fold(0.0, f64::max);
        println!("{:<4} max sum rate {:.4} ({:.2} s)", c.label, best, c.seconds);
    }
    Ok(0)
}

fn montecarlo(out: &Path, spec: &ExperimentSpec) -> Result<u8> {
    let t = Instant::now();
    let cells = monte_carlo_sum_rate(spec, &CheckOptions::default())?;
    std::fs::create_dir_all(out)?;
    let name = "montecarlo.csv";
    write_mc_csv(std::io::BufWriter::new(std::fs::File::create(out.join(name))?), &cells)?;
    let mut m = Manifest::new("montecarlo", spec.seed, serde_json::to_value(spec)?);
    m.files.push(name.into());
    m.timings.push(RunTiming { name: "montecarlo".into(), seconds: t.elapsed().as_secs_f64() });
    m.failed_samples = cells.iter().map(|c| c.failed_samples).sum();
    m.numerical_failures = cells.iter().map(|c| c.numerical_failures).sum();
    m.write(out)?;
    for c in &cells {
        println!("SNR {:>5} dB  C {:>4}  sum rate {:.4}  private {:.3}", c.snr_db, c.c, c.mean_sum_rate, c.mean_private_fraction);
    }
    if m.failed_samples > 0 {
        eprintln!("{} samples skipped after solver errors", m.failed_samples);
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}
