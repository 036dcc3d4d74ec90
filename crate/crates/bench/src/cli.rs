//! The `tierkv` command line.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tierkv_core::device::Area;
use tierkv_core::namespace::MIGRATING_SUFFIX;
use tierkv_core::profiler::{
    generate_scheme, profile_device, validate_generated, ConcurrencyDemand, DeviceProfilerOptions,
    Direction, SchemeOptions,
};
use tierkv_core::{DeviceProfile, PlacementScheme, Preset, Tier};
use tierkv_lsm::Store;

use crate::config::BenchConfig;
use crate::demand::profile_lsm;
use crate::harness::{load_phase, read_csv, run_experiment, RunOptions, RunReport, Summary};
use crate::plot::plot_series;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Runtime = 1,
    Usage = 2,
    Config = 3,
    CheckFailed = 4,
}

#[derive(Debug)]
struct Failure {
    code: Exit,
    err: anyhow::Error,
}

trait Classify<T> {
    fn code(self, code: Exit) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn code(self, code: Exit) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure { code, err: e.into() })
    }
}

type CliResult = std::result::Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "tierkv", version, about = "Tiered LSM storage: profiling, placement and benchmarks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Setting override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Data directory; same as `--set dir=...`.
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Measure a device's throughput at increasing concurrency.
    ProfileDevice {
        /// Device model to measure.
        #[arg(long, default_value = "nvmm")]
        preset: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        threads: Vec<u32>,
        /// `read`, `write` or `both`.
        #[arg(long, default_value = "both")]
        direction: String,
        #[arg(long, default_value_t = 500)]
        duration_ms: u64,
        /// Write the measured profile here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load the store, run the workload and record per-level writer demand.
    ProfileLsm {
        #[arg(long)]
        scheme: Option<PathBuf>,
        #[arg(long)]
        duration_s: Option<u64>,
        #[arg(long, default_value_t = 100)]
        interval_ms: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a placement scheme from a demand profile and the tiers.
    GenScheme {
        #[arg(long)]
        demand: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        reserve: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Insert the workload's records.
    Load {
        #[arg(long)]
        scheme: Option<PathBuf>,
    },
    /// Run the workload against loaded data.
    Run {
        #[arg(long)]
        scheme: Option<PathBuf>,
        #[arg(long)]
        duration_s: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        interval_ms: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Summarize a run CSV and redraw its plot.
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Mount after a crash and verify the recovered state.
    RecoverCheck {
        #[arg(long)]
        scheme: Option<PathBuf>,
        /// Fail unless the store holds exactly this many keys.
        #[arg(long)]
        expect_keys: Option<u64>,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Usage as i32 } else { Exit::Ok as i32 };
        }
    };
    match dispatch(cli) {
        Ok(()) => Exit::Ok as i32,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            f.code as i32
        }
    }
}

fn load_config(c: &Common) -> Result<BenchConfig> {
    let mut cfg = match &c.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    if let Some(d) = &c.dir {
        cfg.data_dir = d.clone();
    }
    for s in &c.sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn scheme_arg(cfg: &BenchConfig, flag: &Option<PathBuf>, cmd: &str) -> std::result::Result<PlacementScheme, Failure> {
    let path = flag.clone().or_else(|| cfg.scheme.clone()).ok_or_else(|| Failure {
        code: Exit::Usage,
        err: anyhow::anyhow!("{cmd} needs a placement scheme (--scheme FILE or scheme=FILE)"),
    })?;
    PlacementScheme::load(&path)
        .with_context(|| format!("scheme {}", path.display()))
        .code(Exit::Config)
}

fn dispatch(cli: Cli) -> CliResult {
    let cfg = load_config(&cli.common).code(Exit::Config)?;
    match cli.cmd {
        Command::ProfileDevice {
            preset,
            threads,
            direction,
            duration_ms,
            out,
        } => {
            let preset: Preset = preset.parse().code(Exit::Usage)?;
            let dirs = match direction.as_str() {
                "both" => vec![Direction::Write, Direction::Read],
                d => vec![d.parse().code(Exit::Usage)?],
            };
            profile_device_cmd(&cfg, preset, &threads, &dirs, duration_ms, out.as_deref()).code(Exit::Runtime)
        }
        Command::ProfileLsm {
            scheme,
            duration_s,
            interval_ms,
            out,
        } => {
            let scheme = match scheme.or_else(|| cfg.scheme.clone()) {
                Some(p) => PlacementScheme::load(&p).code(Exit::Config)?,
                None => PlacementScheme::baseline(3, cfg.lsm.num_levels, cfg.tiers.len().max(2)).code(Exit::Config)?,
            };
            profile_lsm_cmd(&cfg, scheme, duration_s, interval_ms, &out).code(Exit::Runtime)
        }
        Command::GenScheme { demand, reserve, out } => {
            let d = ConcurrencyDemand::load(&demand).code(Exit::Config)?;
            let profiles = cfg.profiles().code(Exit::Config)?;
            let opts = SchemeOptions {
                reserve_fraction: reserve,
                num_levels: cfg.lsm.num_levels,
                fanout: cfg.lsm.fanout,
            };
            let s = generate_scheme(&d, &profiles, &opts).code(Exit::Config)?;
            validate_generated(&s, &d, &profiles).code(Exit::CheckFailed)?;
            s.save(&out).code(Exit::Runtime)?;
            print!("{}", s.to_text());
            Ok(())
        }
        Command::Load { scheme } => {
            let scheme = scheme_arg(&cfg, &scheme, "load")?;
            load_cmd(&cfg, scheme).code(Exit::Runtime)
        }
        Command::Run {
            scheme,
            duration_s,
            interval_ms,
            csv,
            plot,
        } => {
            let scheme = scheme_arg(&cfg, &scheme, "run")?;
            let opts = RunOptions {
                duration: duration_s.map(Duration::from_secs),
                interval: Duration::from_millis(interval_ms.max(1)),
                scheme: None,
            };
            let report = run_cmd(&cfg, scheme, &opts).code(Exit::Runtime)?;
            if let Some(p) = &csv {
                report.write_csv(p).code(Exit::Runtime)?;
            }
            if let Some(p) = &plot {
                plot_series(&report.series, &report.workload, p).code(Exit::Runtime)?;
            }
            print_summary(&report.summary);
            match report.error {
                Some(e) => Err(Failure {
                    code: Exit::Runtime,
                    err: anyhow::anyhow!("run stopped early: {e}"),
                }),
                None => Ok(()),
            }
        }
        Command::Report { csv, plot } => {
            let series = read_csv(&csv).code(Exit::Runtime)?;
            print_summary(&Summary::from_series(&series));
            if let Some(p) = &plot {
                let title = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
                plot_series(&series, title, p).code(Exit::Runtime)?;
            }
            Ok(())
        }
        Command::RecoverCheck { scheme, expect_keys } => {
            let scheme = scheme_arg(&cfg, &scheme, "recover-check")?;
            let problems = recover_check(&cfg, scheme, expect_keys).code(Exit::Runtime)?;
            if problems.is_empty() {
                println!("recover-check: ok");
                Ok(())
            } else {
                for p in &problems {
                    println!("recover-check: {p}");
                }
                Err(Failure {
                    code: Exit::CheckFailed,
                    err: anyhow::anyhow!("{} recovery check(s) failed", problems.len()),
                })
            }
        }
    }
}

fn print_summary(s: &Summary) {
    println!(
        "ops={} duration_s={:.3} throughput_kops={:.3} p50_us={} p99_us={} errors={} cap_violations={}",
        s.ops, s.duration_s, s.throughput_kops, s.p50_us, s.p99_us, s.errors, s.cap_violations
    );
}

fn profile_device_cmd(
    cfg: &BenchConfig,
    preset: Preset,
    threads: &[u32],
    dirs: &[Direction],
    duration_ms: u64,
    out: Option<&Path>,
) -> Result<()> {
    let dir = cfg.data_dir.join(format!("profile-{preset:?}").to_lowercase());
    let capacity = cfg.tiers.first().and_then(|t| t.capacity).unwrap_or(1 << 30);
    let profile = preset.profile(0, capacity, &dir)?;
    let mw = &cfg.middleware;
    let tier = Arc::new(Tier::open(profile.clone(), mw.interpolation, mw.dilation, mw.fsync_real)?);
    let opts = DeviceProfilerOptions {
        duration: Duration::from_millis(duration_ms),
        ..DeviceProfilerOptions::default()
    };
    let mut write_curve = profile.write_curve.clone();
    let mut read_curve = profile.read_curve.clone();
    for &d in dirs {
        let r = profile_device(&tier, threads, d, &opts)?;
        println!("direction={d:?} knee={}", r.knee());
        for p in &r.points {
            println!(
                "  threads={:>3} ops_per_sec={:>12.0} ops={}{}",
                p.threads,
                p.ops_per_sec,
                p.ops,
                if p.low_confidence { " low-confidence" } else { "" }
            );
        }
        match d {
            Direction::Write => write_curve = r.curve()?,
            Direction::Read => read_curve = r.curve()?,
        }
    }
    drop(tier);
    std::fs::remove_dir_all(&dir).ok();
    if let Some(out) = out {
        let measured = DeviceProfile::new(0, capacity, write_curve, read_curve, PathBuf::from("."))?;
        measured.save(out)?;
    }
    Ok(())
}

fn open_store(cfg: &BenchConfig, scheme: PlacementScheme) -> Result<Store> {
    let fs = cfg.mount(scheme)?;
    Ok(Store::open(fs, cfg.lsm.clone())?)
}

fn profile_lsm_cmd(
    cfg: &BenchConfig,
    scheme: PlacementScheme,
    duration_s: Option<u64>,
    interval_ms: u64,
    out: &Path,
) -> Result<()> {
    let store = open_store(cfg, scheme)?;
    load_phase(&cfg.workload, &store, Duration::from_secs(cfg.settle_secs))?;
    let opts = RunOptions {
        duration: duration_s.map(Duration::from_secs),
        ..RunOptions::default()
    };
    let (demand, report) = profile_lsm(&cfg.workload, &store, &opts, Duration::from_millis(interval_ms.max(1)))?;
    store.close()?;
    demand.save(out)?;
    print!("{}", demand.to_text());
    print_summary(&report.summary);
    Ok(())
}

fn load_cmd(cfg: &BenchConfig, scheme: PlacementScheme) -> Result<()> {
    let store = open_store(cfg, scheme)?;
    let r = load_phase(&cfg.workload, &store, Duration::from_secs(cfg.settle_secs))?;
    let files = store.level_files();
    store.close()?;
    println!(
        "loaded records={} elapsed_s={:.3} quiesced={} level_files={files:?}",
        r.records,
        r.elapsed.as_secs_f64(),
        r.quiesced
    );
    Ok(())
}

fn run_cmd(cfg: &BenchConfig, scheme: PlacementScheme, opts: &RunOptions) -> Result<RunReport> {
    let store = open_store(cfg, scheme)?;
    let report = run_experiment(&cfg.workload, &store, opts)?;
    store.close()?;
    Ok(report)
}

/// Home files and cache residues present in a tier directory.
fn raw_listing(dir: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let list = |area: &str| -> Result<Vec<String>> {
        let p = dir.join(area);
        if !p.exists() {
            return Ok(Vec::new());
        }
        let mut v = Vec::new();
        for e in std::fs::read_dir(&p).with_context(|| format!("list {}", p.display()))? {
            let e = e?;
            if e.file_type()?.is_file() {
                v.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        v.sort();
        Ok(v)
    };
    Ok((list("data")?, list("cache")?))
}

/// Mounts the hierarchy, compares the rebuilt namespace with the durable
/// files found on disk beforehand, then reopens the store and reads every
/// key. Returns the problems found.
pub fn recover_check(cfg: &BenchConfig, scheme: PlacementScheme, expect_keys: Option<u64>) -> Result<Vec<String>> {
    let mut durable = BTreeSet::new();
    let mut residues = 0;
    for t in 0..cfg.tiers.len() {
        let (data, cache) = raw_listing(&cfg.tier_dir(t))?;
        residues += cache.len();
        durable.extend(data.into_iter().filter(|n| !n.ends_with(MIGRATING_SUFFIX)));
    }
    let mut cfg = cfg.clone();
    cfg.middleware.background = false;
    let fs = cfg.mount(scheme)?;
    let h = fs.hierarchy().clone();
    let mut problems = Vec::new();
    let rebuilt: BTreeSet<String> = h.namespace().paths().into_iter().collect();
    if rebuilt != durable {
        let missing: Vec<_> = durable.difference(&rebuilt).collect();
        let extra: Vec<_> = rebuilt.difference(&durable).collect();
        problems.push(format!("namespace differs from durable files: missing {missing:?}, extra {extra:?}"));
    }
    let removed = h.recovery_report().cache_removed.len();
    if removed != residues {
        problems.push(format!("{residues} cache residues on disk, {removed} removed"));
    }
    for t in h.tiers() {
        let left = t.list(Area::Cache);
        if !left.is_empty() {
            problems.push(format!("tier {} still holds cache files {left:?}", t.id()));
        }
    }
    println!(
        "files={} cache_removed={removed} partial_migrations_removed={}",
        rebuilt.len(),
        h.recovery_report().partial_migrations_removed.len()
    );

    let store = Store::open(fs, cfg.lsm.clone())?;
    if let Err(e) = store.check_invariants() {
        problems.push(format!("store invariants: {e}"));
    }
    let mut keys = 0u64;
    let mut cursor: Vec<u8> = Vec::new();
    let mut last: Option<Vec<u8>> = None;
    loop {
        let batch = store.scan(&cursor, 1024)?;
        let Some((k, _)) = batch.last() else { break };
        let mut next = k.clone();
        next.push(0);
        for (k, v) in &batch {
            if last.as_ref().is_some_and(|l| l >= k) {
                problems.push(format!("scan out of order at {}", String::from_utf8_lossy(k)));
            }
            if store.get(k)?.as_deref() != Some(v.as_slice()) {
                problems.push(format!("get disagrees with scan at {}", String::from_utf8_lossy(k)));
            }
            last = Some(k.clone());
            keys += 1;
        }
        cursor = next;
    }
    if let Some(n) = expect_keys {
        if n != keys {
            problems.push(format!("expected {n} keys, found {keys}"));
        }
    }
    println!("keys={keys}");
    store.close()?;
    if problems.len() > 20 {
        let n = problems.len();
        problems.truncate(20);
        problems.push(format!("... {} more", n - 20));
    }
    Ok(problems)
}
