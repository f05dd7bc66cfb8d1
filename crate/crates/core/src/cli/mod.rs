//! The `drivebaseline` command line.
//!
//! Exit codes: 0 on success, 1 on a validation error, 2 on an I/O failure,
//! 64 on a usage error. Failures print one `drivebaseline: error: ...` line
//! on stderr and leave no output files behind.

pub mod config;
pub mod output;
pub mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baseline::{
    build_baseline, compare_baselines, decel_samples, read_baseline, speed_samples, write_baseline,
    BaselineCurve, KpiSample, MetricKey,
};
use crate::classify::{
    evaluate_accuracy, optimize_percentile_range, screen_validation, LabeledCdf, PercentileRange,
};
use crate::error::{Error, Result};
use crate::geo::{
    compute_deceleration, extract_approach_traces, load_stop_intersections, read_decel_events,
    write_decel_events, write_stop_intersections, DecelEvent,
};
use crate::stats::EmpiricalCdf;
use crate::synthgen::{build_fixture, FixtureConfig};
use crate::telemetry::{
    clean, cohort_index, filter_select, parse_drive_records, parse_roster, split_trips,
    write_drive_csv, write_roster, Cohort, InputFormat, Participant,
};

pub use config::PipelineConfig;
use output::Staged;
use report::{RANGE_HEADER, SCATTER_HEADER};

pub const CONFIG_ENV: &str = "DRIVEBASELINE_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "drivebaseline",
    version,
    about = "Cohort driving-behavior baselines"
)]
struct Cli {
    /// Pipeline configuration (key=value). DRIVEBASELINE_CONFIG takes precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, clean and select drive records.
    Ingest {
        #[arg(long)]
        drives: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Roster files used to count points per cohort.
        #[arg(long)]
        roster: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract stop-intersection approaches and their decelerations.
    ExtractStops {
        #[arg(long)]
        drives: PathBuf,
        #[arg(long)]
        stops: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one cohort baseline curve with anomaly exclusion.
    Baseline {
        #[command(flatten)]
        input: MetricInput,
        #[arg(long)]
        cohort: String,
        /// Emit the baseline even when the surviving groups disagree.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-sample KS test between a senior and a young baseline.
    Kstest {
        #[arg(long)]
        senior: PathBuf,
        #[arg(long)]
        young: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the percentile range that best separates the baselines.
    OptimizeRange {
        #[command(flatten)]
        input: MetricInput,
        #[arg(long)]
        senior: PathBuf,
        #[arg(long)]
        young: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label held-out participants and measure accuracy.
    Classify {
        #[command(flatten)]
        input: MetricInput,
        #[arg(long)]
        senior: PathBuf,
        #[arg(long)]
        young: PathBuf,
        #[arg(long)]
        range: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic fixture.
    Synth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        baseline_participants: usize,
        #[arg(long, default_value_t = 5)]
        validation_participants: usize,
        #[arg(long, default_value_t = 10)]
        test_participants: usize,
        #[arg(long, default_value_t = 150)]
        points_per_trip: usize,
        #[arg(long, default_value_t = 20)]
        approaches_per_participant: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect stage artifacts into plot-data files.
    Report {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct MetricInput {
    /// `speed:<limit>` or `decel`.
    #[arg(long)]
    metric: String,
    #[arg(long)]
    roster: PathBuf,
    /// Drive CSV, for speed metrics.
    #[arg(long)]
    drives: Option<PathBuf>,
    /// Deceleration events CSV, for the decel metric.
    #[arg(long)]
    events: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(written) => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for path in written {
                let _ = writeln!(out, "{}", path.display());
            }
            EXIT_OK
        }
        Err(err) => {
            let kind = match &err {
                Error::Io(_) => "io",
                Error::Schema(_) => "schema",
                Error::Invalid { .. } => "validation",
                Error::Duplicate(_) => "duplicate",
                Error::EmptyBaseline(_) => "empty-baseline",
            };
            let msg = err.to_string().replace(['\n', '\r'], " ");
            eprintln!("drivebaseline: error: kind={kind}: {msg}");
            if err.is_io() {
                EXIT_IO
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

fn load_config(flag: Option<&Path>) -> Result<PipelineConfig> {
    let from_env = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty());
    match from_env.as_deref().map(Path::new).or(flag) {
        Some(path) => PipelineConfig::load(path),
        None => Ok(PipelineConfig::default()),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>> {
    let cfg = load_config(cli.config.as_deref())?;
    let echo = cfg.echo();
    match cli.command {
        Command::Ingest {
            drives,
            format,
            roster,
            out,
        } => {
            let mut staged = Staged::new(&out, "ingest", &echo);
            ingest(&cfg, &drives, format.parse()?, &roster, &mut staged)?;
            staged.commit()
        }
        Command::ExtractStops { drives, stops, out } => {
            let mut staged = Staged::new(&out, "extract-stops", &echo);
            extract_stops(&cfg, &drives, &stops, &mut staged)?;
            staged.commit()
        }
        Command::Baseline {
            input,
            cohort,
            force,
            out,
        } => {
            let mut staged = Staged::new(&out, "baseline", &echo);
            baseline(&cfg, &input, cohort.parse()?, force, &mut staged)?;
            staged.commit()
        }
        Command::Kstest { senior, young, out } => {
            let mut staged = Staged::new(&out, "kstest", &echo);
            kstest(&cfg, &senior, &young, &mut staged)?;
            staged.commit()
        }
        Command::OptimizeRange {
            input,
            senior,
            young,
            out,
        } => {
            let mut staged = Staged::new(&out, "optimize-range", &echo);
            optimize_range(&cfg, &input, &senior, &young, &mut staged)?;
            staged.commit()
        }
        Command::Classify {
            input,
            senior,
            young,
            range,
            out,
        } => {
            let mut staged = Staged::new(&out, "classify", &echo);
            classify(&cfg, &input, &senior, &young, &range, &mut staged)?;
            staged.commit()
        }
        Command::Synth {
            seed,
            baseline_participants,
            validation_participants,
            test_participants,
            points_per_trip,
            approaches_per_participant,
            out,
        } => {
            let fixture_cfg = FixtureConfig {
                seed,
                n_baseline: baseline_participants,
                n_validation: validation_participants,
                n_test: test_participants,
                points_per_trip,
                approaches_per_participant,
                buffer_radius_m: cfg.buffer_radius_m,
                ..FixtureConfig::default()
            };
            let mut echo = echo.clone();
            echo.push(("synth.seed".into(), seed.to_string()));
            let mut staged = Staged::new(&out, "synth", &echo);
            synth(&fixture_cfg, &mut staged)?;
            staged.commit()
        }
        Command::Report { from, out } => {
            let mut staged = Staged::new(&out, "report", &echo);
            report::emit_report(&from, &mut staged)?;
            staged.commit()
        }
    }
}

fn ingest(
    cfg: &PipelineConfig,
    drives: &Path,
    format: InputFormat,
    rosters: &[PathBuf],
    staged: &mut Staged,
) -> Result<()> {
    let parsed = parse_drive_records(open(drives)?, format)?;
    let mut roster = Vec::new();
    for path in rosters {
        roster.extend(parse_roster(open(path)?, cfg.senior_age_threshold)?);
    }
    let cohorts = cohort_index(&roster);
    let (cleaned, mut report) = clean(parsed.points);
    let (selected, summaries) = filter_select(cleaned.clone(), &cfg.selection, &cohorts);
    report.rows_dropped_filter = cleaned.len() - selected.len();
    report.rows_out = selected.len();
    debug_assert!(report.balances());

    staged.add("clean_drives.csv", |w| write_drive_csv(w, &cleaned))?;
    staged.add("selected_drives.csv", |w| write_drive_csv(w, &selected))?;
    staged.add("segments.csv", |w| {
        writeln!(
            w,
            "segment_id,posted_limit_mph,n_points,n_participants,n_points_senior,n_points_young"
        )?;
        for s in &summaries {
            let by = |c| s.points_by_cohort.get(&c).copied().unwrap_or(0);
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.segment_id,
                s.posted_limit_mph,
                s.n_points,
                s.n_participants,
                by(Cohort::Senior),
                by(Cohort::Young)
            )?;
        }
        Ok(())
    })?;
    staged.add("ingest_report.txt", |w| {
        writeln!(w, "rows_parsed={}", report.rows_in)?;
        writeln!(w, "parse_issues={}", parsed.issues.len())?;
        writeln!(w, "rows_dropped_missing={}", report.rows_dropped_missing)?;
        for (reason, n) in &report.reasons {
            writeln!(w, "dropped.{reason}={n}")?;
        }
        writeln!(w, "rows_dropped_filter={}", report.rows_dropped_filter)?;
        writeln!(w, "rows_out={}", report.rows_out)?;
        writeln!(w, "segments_retained={}", summaries.len())?;
        for issue in &parsed.issues {
            writeln!(w, "issue={issue}")?;
        }
        Ok(())
    })
}

fn extract_stops(
    cfg: &PipelineConfig,
    drives: &Path,
    stops: &Path,
    staged: &mut Staged,
) -> Result<()> {
    let parsed = parse_drive_records(open(drives)?, InputFormat::Csv)?;
    let (cleaned, _) = clean(parsed.points);
    let intersections = load_stop_intersections(open(stops)?, cfg.buffer_radius_m)?;
    let trips = split_trips(&cleaned);
    let traces = extract_approach_traces(&trips, &intersections, cfg.v_stop_mph);
    let mut events = Vec::new();
    for trace in &traces {
        events.extend(compute_deceleration(trace)?);
    }
    staged.add("approach_traces.csv", |w| {
        writeln!(
            w,
            "participant_id,trip_id,intersection_id,t_first,t_last,n_points"
        )?;
        for t in &traces {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                t.participant_id,
                t.trip_id,
                t.intersection_id,
                t.points[0].t,
                t.points[t.points.len() - 1].t,
                t.points.len()
            )?;
        }
        Ok(())
    })?;
    staged.add("decel_events.csv", |w| write_decel_events(w, &events))
}

fn load_roster(cfg: &PipelineConfig, path: &Path) -> Result<Vec<Participant>> {
    parse_roster(open(path)?, cfg.senior_age_threshold)
}

/// KPI samples for the metric from whichever input it needs.
fn metric_samples(
    metric: MetricKey,
    input: &MetricInput,
    keep: impl Fn(&str) -> bool,
) -> Result<Vec<KpiSample>> {
    match metric {
        MetricKey::SpeedAdherence { posted_limit_mph } => {
            let path = input.drives.as_deref().ok_or_else(|| {
                Error::invalid("drives", format!("--drives is required for {metric}"))
            })?;
            let parsed = parse_drive_records(open(path)?, InputFormat::Csv)?;
            let (cleaned, _) = clean(parsed.points);
            Ok(speed_samples(&cleaned, posted_limit_mph, keep))
        }
        MetricKey::StopDeceleration => {
            let path = input.events.as_deref().ok_or_else(|| {
                Error::invalid("events", format!("--events is required for {metric}"))
            })?;
            let events: Vec<DecelEvent> = read_decel_events(open(path)?)?;
            Ok(decel_samples(&events, keep))
        }
    }
}

fn baseline(
    cfg: &PipelineConfig,
    input: &MetricInput,
    cohort: Cohort,
    force: bool,
    staged: &mut Staged,
) -> Result<()> {
    let metric: MetricKey = input.metric.parse()?;
    let roster = load_roster(cfg, &input.roster)?;
    let members: BTreeSet<&str> = roster
        .iter()
        .filter(|p| p.cohort == cohort)
        .map(|p| p.participant_id.as_str())
        .collect();
    let samples = metric_samples(metric, input, |id| members.contains(id))?;
    let curve = build_baseline(&samples, metric, cohort, cfg.baseline)?;
    if !curve.identifiable && !force {
        return Err(Error::invalid(
            "baseline",
            format!(
                "{metric} {cohort} baseline is not identifiable (rerun with --force to emit it)"
            ),
        ));
    }
    let name = format!("{}_{}", metric.slug(), cohort);
    let echo = cfg.echo();
    let mut body = Vec::new();
    write_baseline(&mut body, &curve, &[])?;
    staged.add(format!("baseline_{name}.txt"), |w| {
        w.extend_from_slice(&body);
        Ok(())
    })?;
    let _ = echo;
    staged.add(format!("anomalies_{name}.csv"), |w| {
        writeln!(w, "level,iteration,group_id,ks_distance")?;
        for f in &curve.exclusions.flagged {
            writeln!(
                w,
                "{},{},{},{}",
                f.level.as_str(),
                f.iteration,
                f.group_id,
                f.ks_distance
            )?;
        }
        Ok(())
    })
}

fn read_curve(path: &Path) -> Result<BaselineCurve> {
    read_baseline(open(path)?)
}

fn check_pair(senior: &BaselineCurve, young: &BaselineCurve) -> Result<()> {
    if senior.cohort != Cohort::Senior || young.cohort != Cohort::Young {
        return Err(Error::invalid(
            "baseline",
            format!(
                "expected senior and young baselines, got {} and {}",
                senior.cohort, young.cohort
            ),
        ));
    }
    if senior.metric != young.metric {
        return Err(Error::invalid(
            "metric",
            format!("baselines disagree: {} vs {}", senior.metric, young.metric),
        ));
    }
    Ok(())
}

fn kstest(cfg: &PipelineConfig, senior: &Path, young: &Path, staged: &mut Staged) -> Result<()> {
    let (s, y) = (read_curve(senior)?, read_curve(young)?);
    check_pair(&s, &y)?;
    let cmp = compare_baselines(&s, &y, cfg.alpha)?;
    staged.add(format!("kstest_{}.txt", s.metric.slug()), |w| {
        writeln!(w, "metric={}", s.metric)?;
        writeln!(w, "d={}", cmp.ks.d)?;
        writeln!(w, "p_value={}", compact(cmp.ks.p_value))?;
        writeln!(w, "n_senior={}", cmp.ks.n1)?;
        writeln!(w, "n_young={}", cmp.ks.n2)?;
        writeln!(w, "alpha={}", cmp.alpha)?;
        writeln!(w, "significant={}", cmp.significant)?;
        Ok(())
    })
}

/// Shortest round-trip form, in scientific notation for tiny magnitudes.
fn compact(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-6 {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

/// Per-participant CDFs over every sample of the metric, in id order.
fn participant_cdfs(samples: &[KpiSample]) -> Result<BTreeMap<String, EmpiricalCdf>> {
    crate::baseline::group_cdfs(samples.iter().map(|s| (s.participant_id.as_str(), s.value)))
}

fn optimize_range(
    cfg: &PipelineConfig,
    input: &MetricInput,
    senior: &Path,
    young: &Path,
    staged: &mut Staged,
) -> Result<()> {
    let metric: MetricKey = input.metric.parse()?;
    let (s, y) = (read_curve(senior)?, read_curve(young)?);
    check_pair(&s, &y)?;
    if s.metric != metric {
        return Err(Error::invalid(
            "metric",
            format!(
                "--metric {metric} does not match baselines for {}",
                s.metric
            ),
        ));
    }
    let roster = load_roster(cfg, &input.roster)?;
    let seniors: BTreeSet<&str> = roster
        .iter()
        .filter(|p| p.cohort == Cohort::Senior)
        .map(|p| p.participant_id.as_str())
        .collect();
    let samples = metric_samples(metric, input, |id| seniors.contains(id))?;
    let cdfs = participant_cdfs(&samples)?;
    let (kept, excluded) = if cfg.screen_validation {
        screen_validation(&cdfs, &s.cdf, cfg.tau_validation)?
    } else {
        (cdfs.keys().cloned().collect(), Vec::new())
    };
    let validation: Vec<EmpiricalCdf> = kept.iter().map(|id| cdfs[id].clone()).collect();
    let range = optimize_percentile_range(&validation, &s.cdf, &y.cdf, cfg.range)?;

    let slug = metric.slug();
    staged.add(format!("range_{slug}.csv"), |w| {
        writeln!(w, "{RANGE_HEADER}")?;
        writeln!(w, "{},{},{}", range.lo, range.hi, range.objective)?;
        Ok(())
    })?;
    staged.add(format!("validation_{slug}.csv"), |w| {
        writeln!(w, "participant_id,status,ks_to_senior")?;
        let excluded: HashMap<&str, f64> =
            excluded.iter().map(|(id, d)| (id.as_str(), *d)).collect();
        for id in cdfs.keys() {
            match excluded.get(id.as_str()) {
                Some(d) => writeln!(w, "{id},excluded,{d}")?,
                None => writeln!(w, "{id},kept,")?,
            }
        }
        Ok(())
    })
}

fn read_range(path: &Path) -> Result<PercentileRange> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty());
    let bad = |m: &str| Error::Schema(format!("{}: {m}", path.display()));
    if lines.next() != Some(RANGE_HEADER) {
        return Err(bad("missing lo,hi,objective header"));
    }
    let row = lines.next().ok_or_else(|| bad("missing range row"))?;
    let parts: Vec<&str> = row.split(',').collect();
    let [lo, hi, objective] = parts[..] else {
        return Err(bad("expected three columns"));
    };
    let range = PercentileRange {
        lo: lo.parse().map_err(|_| bad("bad lo"))?,
        hi: hi.parse().map_err(|_| bad("bad hi"))?,
        objective: objective.parse().map_err(|_| bad("bad objective"))?,
    };
    crate::stats::PercentileGrid::new(range.lo, range.hi, 1)?;
    Ok(range)
}

fn classify(
    cfg: &PipelineConfig,
    input: &MetricInput,
    senior: &Path,
    young: &Path,
    range: &Path,
    staged: &mut Staged,
) -> Result<()> {
    let metric: MetricKey = input.metric.parse()?;
    let (s, y) = (read_curve(senior)?, read_curve(young)?);
    check_pair(&s, &y)?;
    let range = read_range(range)?;
    let roster = load_roster(cfg, &input.roster)?;
    let truth: HashMap<&str, Cohort> = roster
        .iter()
        .map(|p| (p.participant_id.as_str(), p.cohort))
        .collect();
    let samples = metric_samples(metric, input, |id| truth.contains_key(id))?;
    let cdfs = participant_cdfs(&samples)?;
    let test: Vec<LabeledCdf> = cdfs
        .into_iter()
        .map(|(id, cdf)| LabeledCdf {
            true_cohort: truth[id.as_str()],
            participant_id: id,
            cdf,
        })
        .collect();
    let skipped: Vec<&str> = roster
        .iter()
        .map(|p| p.participant_id.as_str())
        .filter(|id| !test.iter().any(|t| t.participant_id == *id))
        .collect();
    let report = evaluate_accuracy(&test, &s.cdf, &y.cdf, &range, cfg.range.step)?;

    let slug = metric.slug();
    staged.add(format!("scatter_{slug}.csv"), |w| {
        writeln!(w, "{SCATTER_HEADER}")?;
        for r in &report.results {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.participant_id, r.d_young, r.d_senior, r.label, r.true_cohort
            )?;
        }
        Ok(())
    })?;
    staged.add(format!("accuracy_{slug}.txt"), |w| {
        writeln!(w, "metric={metric}")?;
        writeln!(w, "lo={}", range.lo)?;
        writeln!(w, "hi={}", range.hi)?;
        writeln!(w, "n_total={}", report.n_total)?;
        writeln!(w, "n_correct={}", report.n_correct)?;
        writeln!(w, "accuracy={}", report.accuracy)?;
        for id in &skipped {
            writeln!(w, "skipped={id}")?;
        }
        Ok(())
    })
}

fn synth(fixture_cfg: &FixtureConfig, staged: &mut Staged) -> Result<()> {
    let fixture = build_fixture(fixture_cfg)?;
    staged.add("drives.csv", |w| write_drive_csv(w, &fixture.drives))?;
    staged.add("stops.csv", |w| write_stop_intersections(w, &fixture.stops))?;
    staged.add("roster_baseline.csv", |w| {
        write_roster(w, &fixture.roster_baseline)
    })?;
    staged.add("roster_validation.csv", |w| {
        write_roster(w, &fixture.roster_validation)
    })?;
    staged.add("roster_test.csv", |w| write_roster(w, &fixture.roster_test))
}

/// Test hook: the parsed subcommand name, if argv is valid.
#[doc(hidden)]
pub fn parse_only<I, T>(argv: I) -> std::result::Result<String, String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
        .map(|c| {
            format!("{:?}", c.command)
                .split([' ', '{'])
                .next()
                .unwrap_or("")
                .to_string()
        })
        .map_err(|e| e.to_string())
}
