use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dynprobit::io::{
    assemble_batches, hash_files, load_run_config, period_report, read_dataset, read_membership_priors, read_pmf_csv, read_profiles,
    read_snapshot, read_stm_hyper, write_dataset, write_membership_priors, write_pmf_csv, write_report, write_report_at, write_snapshot,
    IoBlock, Manifest, ModelBlock, PeriodTiming, Report, RunConfig, Snapshot,
};
use dynprobit::model::{CoefficientArray, PeriodBatch};
use dynprobit::oracle::discrete_kl;
use dynprobit::predictive::{profile_predictive_detailed, Profile};
use dynprobit::smc::{step_period, FilterContext, PeriodState, PreparedBatch};
use dynprobit::synthetic::{generate_scenario, ScenarioSpec};

const THREADS_VAR: &str = "DYNPROBIT_THREADS";
const LOG_VAR: &str = "DYNPROBIT_LOG";

#[derive(Parser)]
#[command(version, about = "Online particle filtering for dynamic mixtures of ordered-probit regressions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter every period of a dataset from the initial prior.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `io.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `io.priors`.
        #[arg(long)]
        priors: Option<PathBuf>,
        /// Overrides `io.profiles`; risks are reported for every period.
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a run from a period-boundary snapshot with new periods.
    Step {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Risks and relative risks of profiles under a snapshot.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        /// Risk table; relative risks go to `<stem>_relative_risk.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Also write each profile's full predictive pmf here.
        #[arg(long)]
        pmf_dir: Option<PathBuf>,
    },
    /// Generate synthetic datasets with known truth.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// KL divergence KL(a || b) between two pmf files, in nats.
    Evaluate {
        #[arg(long)]
        pmf_a: PathBuf,
        #[arg(long)]
        pmf_b: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_VAR, "info")).init();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_VAR} must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match Cli::parse().command {
        Command::Fit { config, data, priors, profiles, out } => fit(&config, data, priors, profiles, &out),
        Command::Step { config, snapshot, batch, priors, profiles, out } => step(&config, &snapshot, &batch, &priors, profiles, &out),
        Command::Predict { config, snapshot, profiles, out, pmf_dir } => predict(&config, &snapshot, &profiles, &out, pmf_dir.as_deref()),
        Command::Simulate { scenario, out } => simulate(&scenario, &out),
        Command::Evaluate { pmf_a, pmf_b } => evaluate(&pmf_a, &pmf_b),
    }
}

fn report_rng(cfg: &RunConfig, period: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.filter.seed);
    rng.set_stream(1 << 32 | period as u64);
    rng
}

fn load_profiles(cfg: &RunConfig, path: Option<&Path>) -> Result<Vec<Profile>> {
    let Some(path) = path else { return Ok(Vec::new()) };
    let hyper = cfg.io.hyper.as_deref().map(read_stm_hyper).transpose()?;
    Ok(read_profiles(path, hyper.as_ref())?)
}

fn load_batches(cfg: &RunConfig, data: &Path, priors: &Path) -> Result<Vec<PeriodBatch>> {
    let spec = cfg.model.spec()?;
    let rows = read_dataset(data, &spec, &cfg.io)?;
    let priors = read_membership_priors(priors)?;
    Ok(assemble_batches(rows, priors, &spec)?)
}

/// Filters `batches` in order after `start`, writing one snapshot per period.
fn run_periods(
    cfg: &RunConfig,
    ctx: &FilterContext,
    start: Option<PeriodState>,
    batches: &[PeriodBatch],
    profiles: &[Profile],
    out: &Path,
    manifest: &mut Manifest,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let fingerprint = cfg.fingerprint();
    let mut state = start;
    let mut report = Report::default();
    for batch in batches {
        let prepared = PreparedBatch::new(batch, &ctx.spec)?;
        let t0 = Instant::now();
        let next = step_period(ctx, state.as_ref(), &prepared)?;
        manifest.periods.push(PeriodTiming {
            period: batch.period,
            observations: batch.len(),
            wall_clock_seconds: t0.elapsed().as_secs_f64(),
        });
        let path = out.join(format!("period_{:04}.snapshot", batch.period));
        let snap = Snapshot::new(fingerprint.clone(), next);
        write_snapshot(&path, &snap)?;
        manifest.outputs.push(path.display().to_string());
        report.extend(period_report(&snap.state, profiles, &ctx.spec, &cfg.report, &mut report_rng(cfg, batch.period))?);
        state = Some(snap.state);
    }
    for p in write_report(out, &report)? {
        manifest.outputs.push(p.display().to_string());
    }
    let m = manifest.write(out)?;
    log::info!("wrote {}", m.display());
    Ok(())
}

fn fit(config: &Path, data: Option<PathBuf>, priors: Option<PathBuf>, profiles: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    let Some(data) = data.or_else(|| cfg.io.data.clone()) else { bail!("no dataset: pass --data or set io.data") };
    let Some(priors) = priors.or_else(|| cfg.io.priors.clone()) else { bail!("no membership priors: pass --priors or set io.priors") };
    let profiles_path = profiles.or_else(|| cfg.io.profiles.clone());
    let batches = load_batches(&cfg, &data, &priors)?;
    let profiles = load_profiles(&cfg, profiles_path.as_deref())?;
    let ctx = cfg.context()?;
    let mut manifest = Manifest::new(cfg.filter.seed, cfg.fingerprint(), hash_files(&[&data, &priors])?);
    run_periods(&cfg, &ctx, None, &batches, &profiles, out, &mut manifest)
}

fn step(config: &Path, snapshot: &Path, batch: &Path, priors: &Path, profiles: Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = load_run_config(config)?;
    let snap = read_snapshot(snapshot)?;
    snap.check_fingerprint(&cfg.fingerprint())?;
    let batches = load_batches(&cfg, batch, priors)?;
    let profiles = load_profiles(&cfg, profiles.or_else(|| cfg.io.profiles.clone()).as_deref())?;
    let ctx = cfg.context()?;
    let mut manifest = Manifest::new(cfg.filter.seed, cfg.fingerprint(), hash_files(&[snapshot, batch, priors])?);
    run_periods(&cfg, &ctx, Some(snap.state), &batches, &profiles, out, &mut manifest)
}

fn predict(config: &Path, snapshot: &Path, profiles: &Path, out: &Path, pmf_dir: Option<&Path>) -> Result<()> {
    let cfg = load_run_config(config)?;
    let snap = read_snapshot(snapshot)?;
    snap.check_fingerprint(&cfg.fingerprint())?;
    let spec = cfg.model.spec()?;
    let profiles = load_profiles(&cfg, Some(profiles))?;
    let mut rng = report_rng(&cfg, snap.state.period);
    let report = period_report(&snap.state, &profiles, &spec, &cfg.report, &mut rng)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let rr = write_report_at(out, &report)?;
    log::info!("wrote {} and {}", out.display(), rr.display());
    if let Some(dir) = pmf_dir {
        std::fs::create_dir_all(dir)?;
        let pool = snap.state.merged();
        for (i, p) in profiles.iter().enumerate() {
            let pred = profile_predictive_detailed(p, &pool, &spec, cfg.report.draws_per_particle, &mut rng)?;
            write_pmf_csv(&dir.join(format!("profile_{i:03}.csv")), &pred.pmf, &spec)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TruthFile<'a> {
    scenario: &'a ScenarioSpec,
    coefficients: &'a [CoefficientArray],
    raw_coefficients: &'a [CoefficientArray],
    /// 1-based groups per period.
    memberships: Vec<Vec<usize>>,
    theta_bar: &'a [Vec<Vec<f64>>],
    eta_bar: &'a [Vec<Vec<f64>>],
}

fn simulate(scenario: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
    let spec: ScenarioSpec = toml::from_str(&text).with_context(|| format!("parsing {}", scenario.display()))?;
    let errs = spec.validation_errors();
    if !errs.is_empty() {
        return Err(dynprobit::Error::Config(errs).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (truth, reps) = generate_scenario(&spec, &mut rng)?;
    std::fs::create_dir_all(out)?;
    let truth_file = TruthFile {
        scenario: &spec,
        coefficients: &truth.coefficients,
        raw_coefficients: &truth.raw_coefficients,
        memberships: truth.memberships.iter().map(|m| m.iter().map(|s| s + 1).collect()).collect(),
        theta_bar: &truth.theta_bar,
        eta_bar: &truth.eta_bar,
    };
    std::fs::write(out.join("truth.json"), serde_json::to_string_pretty(&truth_file)?)?;
    let mut cfg = RunConfig {
        model: ModelBlock { groups: spec.k, covariates: spec.q, outcomes: spec.outcomes.clone() },
        prior: Default::default(),
        filter: Default::default(),
        io: IoBlock { data: Some("data.csv".into()), priors: Some("priors.json".into()), ..Default::default() },
        report: Default::default(),
    };
    cfg.fill_defaults();
    for (r, batches) in reps.iter().enumerate() {
        let dir = out.join(format!("rep_{r:03}"));
        std::fs::create_dir_all(&dir)?;
        write_dataset(&dir.join("data.csv"), batches, &cfg.io)?;
        let priors: Vec<_> = batches.iter().flat_map(|b| b.membership_priors.iter().cloned()).collect();
        write_membership_priors(&dir.join("priors.json"), &priors)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    log::info!("wrote {} replications to {}", reps.len(), out.display());
    Ok(())
}

fn evaluate(a: &Path, b: &Path) -> Result<()> {
    let (p, q) = (read_pmf_csv(a)?, read_pmf_csv(b)?);
    let d = discrete_kl(&p, &q)?;
    println!("{}", d.nats);
    if d.floored > 0 {
        log::warn!("{} cells of the second pmf were zero where the first is positive and were floored", d.floored);
    }
    Ok(())
}
