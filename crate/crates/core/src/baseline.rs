//! Cohort baseline curves.
//!
//! KPI samples are grouped by segment (or intersection) and by participant.
//! Groups whose CDF sits too far from the pooled remainder are removed, first
//! at segment level and then at participant level, and the survivors are
//! pooled into one baseline CDF per cohort and metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geo::DecelEvent;
use crate::stats::{ks_statistic, ks_test, EmpiricalCdf, KsResult};
use crate::telemetry::{Cohort, DrivePoint};

pub const DEFAULT_TAU: f64 = 0.25;
pub const DEFAULT_MAX_ITER: usize = 10;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kpi {
    SpeedAdherence,
    StopDeceleration,
}

/// Which KPI a sample belongs to. Speed adherence is always tied to one
/// posted limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricKey {
    SpeedAdherence { posted_limit_mph: f64 },
    StopDeceleration,
}

impl MetricKey {
    pub fn speed(posted_limit_mph: f64) -> Result<Self> {
        if !(posted_limit_mph.is_finite() && posted_limit_mph > 0.0) {
            return Err(Error::invalid(
                "metric",
                format!("posted limit must be positive, got {posted_limit_mph}"),
            ));
        }
        Ok(MetricKey::SpeedAdherence { posted_limit_mph })
    }

    pub fn kpi(&self) -> Kpi {
        match self {
            MetricKey::SpeedAdherence { .. } => Kpi::SpeedAdherence,
            MetricKey::StopDeceleration => Kpi::StopDeceleration,
        }
    }

    pub fn posted_limit_mph(&self) -> Option<f64> {
        match *self {
            MetricKey::SpeedAdherence { posted_limit_mph } => Some(posted_limit_mph),
            MetricKey::StopDeceleration => None,
        }
    }

    /// File-name friendly form, e.g. `speed75` or `decel`.
    pub fn slug(&self) -> String {
        match self {
            MetricKey::SpeedAdherence { posted_limit_mph } => format!("speed{posted_limit_mph}"),
            MetricKey::StopDeceleration => "decel".to_string(),
        }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKey::SpeedAdherence { posted_limit_mph } => write!(f, "speed:{posted_limit_mph}"),
            MetricKey::StopDeceleration => f.write_str("decel"),
        }
    }
}

impl FromStr for MetricKey {
    type Err = Error;

    /// Accepts `speed:<limit>` or `decel`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("speed", limit)) => MetricKey::speed(
                limit
                    .parse()
                    .map_err(|_| Error::invalid("metric", format!("bad posted limit in {s:?}")))?,
            ),
            None if s == "decel" => Ok(MetricKey::StopDeceleration),
            _ => Err(Error::invalid(
                "metric",
                format!("expected speed:<limit> or decel, got {s:?}"),
            )),
        }
    }
}

/// One KPI value with its grouping keys. For deceleration the segment is the
/// intersection id.
#[derive(Debug, Clone, PartialEq)]
pub struct KpiSample {
    pub segment_id: String,
    pub participant_id: String,
    pub value: f64,
}

/// Speeds recorded under the metric's posted limit, for participants accepted
/// by `keep`.
pub fn speed_samples(
    points: &[DrivePoint],
    posted_limit_mph: f64,
    keep: impl Fn(&str) -> bool,
) -> Vec<KpiSample> {
    points
        .iter()
        .filter(|p| p.posted_limit_mph == Some(posted_limit_mph) && keep(&p.participant_id))
        .filter_map(|p| {
            Some(KpiSample {
                segment_id: p.segment_id.clone(),
                participant_id: p.participant_id.clone(),
                value: p.speed_mph?,
            })
        })
        .collect()
}

/// Deceleration magnitudes `|a|`, grouped by intersection.
pub fn decel_samples(events: &[DecelEvent], keep: impl Fn(&str) -> bool) -> Vec<KpiSample> {
    events
        .iter()
        .filter(|e| e.a < 0.0 && keep(&e.participant_id))
        .map(|e| KpiSample {
            segment_id: e.intersection_id.clone(),
            participant_id: e.participant_id.clone(),
            value: e.magnitude(),
        })
        .collect()
}

/// One CDF per distinct group id.
pub fn group_cdfs<'a, I>(samples: I) -> Result<BTreeMap<String, EmpiricalCdf>>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, v) in samples {
        groups.entry(id.to_string()).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(id, values)| Ok((id, EmpiricalCdf::from_samples(&values)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Segment,
    Participant,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Segment => "segment",
            Level::Participant => "participant",
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segment" => Ok(Level::Segment),
            "participant" => Ok(Level::Participant),
            _ => Err(Error::invalid("level", format!("unknown level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyFlag {
    pub group_id: String,
    pub level: Level,
    /// Leave-one-out KS distance when flagged.
    pub ks_distance: f64,
    /// 1-based iteration of the greedy loop.
    pub iteration: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnomalyReport {
    pub flagged: Vec<AnomalyFlag>,
}

impl AnomalyReport {
    pub fn flagged_ids(&self, level: Level) -> BTreeSet<&str> {
        self.flagged
            .iter()
            .filter(|f| f.level == level)
            .map(|f| f.group_id.as_str())
            .collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid("tau", format!("{tau} is outside (0, 1]")));
    }
    Ok(())
}

/// Greedy leave-one-out anomaly removal.
///
/// Each iteration compares every surviving group with the pooled CDF of the
/// other survivors. The group with the largest distance is flagged if that
/// distance exceeds `tau` (ties go to the lexicographically smallest id).
/// The loop stops when no distance exceeds `tau`, when fewer than two groups
/// survive, or after `max_iter` iterations.
pub fn detect_anomalies(
    cdfs: &BTreeMap<String, EmpiricalCdf>,
    level: Level,
    tau: f64,
    max_iter: usize,
) -> Result<AnomalyReport> {
    check_tau(tau)?;
    if cdfs.len() < 2 {
        return Err(Error::invalid(
            "groups",
            format!(
                "anomaly detection needs at least 2 groups, got {}",
                cdfs.len()
            ),
        ));
    }
    let mut survivors: Vec<(&String, &EmpiricalCdf)> = cdfs.iter().collect();
    let mut report = AnomalyReport::default();
    for iteration in 1..=max_iter {
        if survivors.len() < 2 {
            break;
        }
        let mut worst: Option<(usize, f64)> = None;
        for (i, (_, cdf)) in survivors.iter().enumerate() {
            let rest = EmpiricalCdf::pooled(
                survivors
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, (_, c))| *c),
            )
            .expect("at least one other survivor");
            let d = ks_statistic(cdf, &rest);
            if worst.is_none_or(|(_, best)| d > best) {
                worst = Some((i, d));
            }
        }
        let (i, d) = worst.expect("survivors is non-empty");
        if d <= tau {
            break;
        }
        let (id, _) = survivors.remove(i);
        report.flagged.push(AnomalyFlag {
            group_id: id.clone(),
            level,
            ks_distance: d,
            iteration,
        });
    }
    Ok(report)
}

/// Largest pairwise KS distance among the given CDFs, 0 for fewer than two.
pub fn max_pairwise_ks(cdfs: &[&EmpiricalCdf]) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in cdfs.iter().enumerate() {
        for b in &cdfs[i + 1..] {
            worst = worst.max(ks_statistic(a, b));
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineParams {
    pub tau_segment: f64,
    pub tau_participant: f64,
    pub max_iter: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            tau_segment: DEFAULT_TAU,
            tau_participant: DEFAULT_TAU,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineCurve {
    pub metric: MetricKey,
    pub cohort: Cohort,
    pub params: BaselineParams,
    pub cdf: EmpiricalCdf,
    pub segments: BTreeSet<String>,
    pub participants: BTreeSet<String>,
    pub exclusions: AnomalyReport,
    /// False when surviving groups still disagree by more than their level's
    /// threshold pairwise, i.e. no single curve describes them.
    pub identifiable: bool,
}

/// Two-pass anomaly removal followed by pooling.
///
/// A level with fewer than two groups cannot be checked and passes through
/// unchanged.
pub fn build_baseline(
    samples: &[KpiSample],
    metric: MetricKey,
    cohort: Cohort,
    params: BaselineParams,
) -> Result<BaselineCurve> {
    check_tau(params.tau_segment)?;
    check_tau(params.tau_participant)?;
    if samples.is_empty() {
        return Err(Error::EmptyBaseline(format!(
            "no {metric} samples for {cohort}"
        )));
    }

    let by_segment = group_cdfs(samples.iter().map(|s| (s.segment_id.as_str(), s.value)))?;
    let mut exclusions = AnomalyReport::default();
    if by_segment.len() >= 2 {
        exclusions = detect_anomalies(
            &by_segment,
            Level::Segment,
            params.tau_segment,
            params.max_iter,
        )?;
    }
    let bad_segments: BTreeSet<String> = exclusions
        .flagged_ids(Level::Segment)
        .into_iter()
        .map(String::from)
        .collect();
    let remaining: Vec<&KpiSample> = samples
        .iter()
        .filter(|s| !bad_segments.contains(&s.segment_id))
        .collect();
    if remaining.is_empty() {
        return Err(Error::EmptyBaseline(format!(
            "every segment was flagged for {metric} {cohort}"
        )));
    }

    let by_participant = group_cdfs(
        remaining
            .iter()
            .map(|s| (s.participant_id.as_str(), s.value)),
    )?;
    if by_participant.len() >= 2 {
        let report = detect_anomalies(
            &by_participant,
            Level::Participant,
            params.tau_participant,
            params.max_iter,
        )?;
        exclusions.flagged.extend(report.flagged);
    }
    let bad_participants: BTreeSet<String> = exclusions
        .flagged_ids(Level::Participant)
        .into_iter()
        .map(String::from)
        .collect();
    let kept: Vec<&KpiSample> = remaining
        .into_iter()
        .filter(|s| !bad_participants.contains(&s.participant_id))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyBaseline(format!(
            "every participant was flagged for {metric} {cohort}"
        )));
    }

    let values: Vec<f64> = kept.iter().map(|s| s.value).collect();
    let cdf = EmpiricalCdf::from_samples(&values)?;
    let segments: BTreeSet<String> = kept.iter().map(|s| s.segment_id.clone()).collect();
    let participants: BTreeSet<String> = kept.iter().map(|s| s.participant_id.clone()).collect();

    let seg_cdfs = group_cdfs(kept.iter().map(|s| (s.segment_id.as_str(), s.value)))?;
    let part_cdfs = group_cdfs(kept.iter().map(|s| (s.participant_id.as_str(), s.value)))?;
    let identifiable = max_pairwise_ks(&seg_cdfs.values().collect::<Vec<_>>())
        <= params.tau_segment
        && max_pairwise_ks(&part_cdfs.values().collect::<Vec<_>>()) <= params.tau_participant;

    Ok(BaselineCurve {
        metric,
        cohort,
        params,
        cdf,
        segments,
        participants,
        exclusions,
        identifiable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineComparison {
    pub ks: KsResult,
    pub alpha: f64,
    pub significant: bool,
}

pub fn compare_baselines(
    senior: &BaselineCurve,
    young: &BaselineCurve,
    alpha: f64,
) -> Result<BaselineComparison> {
    if senior.metric != young.metric {
        return Err(Error::invalid(
            "metric",
            format!("cannot compare {} with {}", senior.metric, young.metric),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(
            "alpha",
            format!("{alpha} is outside (0, 1)"),
        ));
    }
    let ks = ks_test(&senior.cdf, &young.cdf);
    Ok(BaselineComparison {
        ks,
        alpha,
        significant: ks.p_value < alpha,
    })
}

const ARTIFACT_MAGIC: &str = "drivebaseline-baseline v1";

fn check_id(kind: &str, id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\n', '\r']) {
        return Err(Error::invalid(kind, format!("{id:?} cannot be serialized")));
    }
    Ok(())
}

/// Writes a baseline artifact: `#` comment lines (the caller's echo), a
/// magic line, `key=value` metadata, then the CDF steps as
/// `value,count,cum_prob` CSV. Floats use shortest round-trip formatting.
pub fn write_baseline<W: Write>(
    mut w: W,
    curve: &BaselineCurve,
    echo: &[(String, String)],
) -> Result<()> {
    for (k, v) in echo {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "{ARTIFACT_MAGIC}")?;
    writeln!(w, "metric={}", curve.metric)?;
    writeln!(w, "cohort={}", curve.cohort)?;
    writeln!(w, "tau_segment={}", curve.params.tau_segment)?;
    writeln!(w, "tau_participant={}", curve.params.tau_participant)?;
    writeln!(w, "max_iter={}", curve.params.max_iter)?;
    writeln!(w, "identifiable={}", curve.identifiable)?;
    writeln!(w, "n={}", curve.cdf.n())?;
    for s in &curve.segments {
        check_id("segment_id", s)?;
        writeln!(w, "segment={s}")?;
    }
    for p in &curve.participants {
        check_id("participant_id", p)?;
        writeln!(w, "participant={p}")?;
    }
    for f in &curve.exclusions.flagged {
        check_id("group_id", &f.group_id)?;
        writeln!(
            w,
            "flagged={},{},{},{}",
            f.level.as_str(),
            f.iteration,
            f.ks_distance,
            f.group_id
        )?;
    }
    writeln!(w, "value,count,cum_prob")?;
    for ((v, count), (_, prob)) in curve.cdf.steps().zip(curve.cdf.cum_probs()) {
        writeln!(w, "{v},{count},{prob}")?;
    }
    Ok(())
}

pub fn read_baseline<R: Read>(r: R) -> Result<BaselineCurve> {
    let bad = |msg: String| Error::Schema(format!("baseline artifact: {msg}"));
    let mut lines = BufReader::new(r)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.starts_with('#')));
    match lines.next().transpose()? {
        Some(l) if l == ARTIFACT_MAGIC => {}
        other => return Err(bad(format!("unexpected first line {other:?}"))),
    }

    let mut metric = None;
    let mut cohort = None;
    let mut params = BaselineParams::default();
    let mut identifiable = true;
    let mut n = None;
    let mut segments = BTreeSet::new();
    let mut participants = BTreeSet::new();
    let mut flagged = Vec::new();
    loop {
        let line = lines
            .next()
            .transpose()?
            .ok_or_else(|| bad("missing cdf table".into()))?;
        if line == "value,count,cum_prob" {
            break;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        let num = |what: &str| bad(format!("bad {what} {value:?}"));
        match key {
            "metric" => metric = Some(value.parse::<MetricKey>()?),
            "cohort" => cohort = Some(value.parse::<Cohort>()?),
            "tau_segment" => params.tau_segment = value.parse().map_err(|_| num(key))?,
            "tau_participant" => params.tau_participant = value.parse().map_err(|_| num(key))?,
            "max_iter" => params.max_iter = value.parse().map_err(|_| num(key))?,
            "identifiable" => identifiable = value.parse().map_err(|_| num(key))?,
            "n" => n = Some(value.parse::<u64>().map_err(|_| num(key))?),
            "segment" => {
                segments.insert(value.to_string());
            }
            "participant" => {
                participants.insert(value.to_string());
            }
            "flagged" => {
                let parts: Vec<&str> = value.splitn(4, ',').collect();
                let [level, iteration, ks, id] = parts[..] else {
                    return Err(bad(format!("bad flagged entry {value:?}")));
                };
                flagged.push(AnomalyFlag {
                    group_id: id.to_string(),
                    level: level.parse()?,
                    ks_distance: ks.parse().map_err(|_| num("ks distance"))?,
                    iteration: iteration.parse().map_err(|_| num("iteration"))?,
                });
            }
            _ => return Err(bad(format!("unknown key {key:?}"))),
        }
    }

    let mut values = Vec::new();
    let mut cum_counts = Vec::new();
    let mut total = 0u64;
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(v), Some(c)) = (parts.next(), parts.next()) else {
            return Err(bad(format!("bad cdf row {line:?}")));
        };
        values.push(
            v.parse::<f64>()
                .map_err(|_| bad(format!("bad value {v:?}")))?,
        );
        total += c
            .parse::<u64>()
            .map_err(|_| bad(format!("bad count {c:?}")))?;
        cum_counts.push(total);
    }
    let cdf = EmpiricalCdf::from_steps(values, cum_counts)?;
    if n.is_some_and(|n| n != cdf.n()) {
        return Err(bad(format!(
            "n={} but steps sum to {}",
            n.unwrap(),
            cdf.n()
        )));
    }
    Ok(BaselineCurve {
        metric: metric.ok_or_else(|| bad("missing metric".into()))?,
        cohort: cohort.ok_or_else(|| bad("missing cohort".into()))?,
        params,
        cdf,
        segments,
        participants,
        exclusions: AnomalyReport { flagged },
        identifiable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(seg: &str, pid: &str, value: f64) -> KpiSample {
        KpiSample {
            segment_id: seg.into(),
            participant_id: pid.into(),
            value,
        }
    }

    fn base_values() -> Vec<f64> {
        (0..50).map(|i| 60.0 + f64::from(i) * 0.3).collect()
    }

    #[test]
    fn metric_key_parse_and_display() {
        let m: MetricKey = "speed:75".parse().unwrap();
        assert_eq!(
            m,
            MetricKey::SpeedAdherence {
                posted_limit_mph: 75.0
            }
        );
        assert_eq!(m.to_string(), "speed:75");
        assert_eq!(m.slug(), "speed75");
        assert_eq!(m.posted_limit_mph(), Some(75.0));
        assert_eq!(
            "decel".parse::<MetricKey>().unwrap().posted_limit_mph(),
            None
        );
        assert!("speed:-1".parse::<MetricKey>().is_err());
        assert!("speed".parse::<MetricKey>().is_err());
        assert!("accel".parse::<MetricKey>().is_err());
    }

    #[test]
    fn grouping() {
        let samples = [("A", 1.0), ("B", 2.0), ("A", 3.0)];
        let groups = group_cdfs(samples.iter().copied()).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups.values().map(|c| c.n()).sum::<u64>(), 3);

        let single = group_cdfs([("A", 3.0), ("A", 1.0)]).unwrap();
        assert_eq!(
            single["A"],
            EmpiricalCdf::from_samples(&[1.0, 3.0]).unwrap()
        );
    }

    #[test]
    fn shifted_group_is_flagged() {
        let mut groups = BTreeMap::new();
        for id in ["A", "B", "C"] {
            groups.insert(
                id.to_string(),
                EmpiricalCdf::from_samples(&base_values()).unwrap(),
            );
        }
        let shifted: Vec<f64> = base_values().iter().map(|v| v + 50.0).collect();
        groups.insert("D".into(), EmpiricalCdf::from_samples(&shifted).unwrap());
        let report =
            detect_anomalies(&groups, Level::Segment, DEFAULT_TAU, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(report.flagged.len(), 1);
        assert_eq!(report.flagged[0].group_id, "D");
        assert_eq!(report.flagged[0].iteration, 1);
        assert_eq!(report.flagged[0].ks_distance, 1.0);
    }

    #[test]
    fn identical_groups_and_unit_tau() {
        let mut groups = BTreeMap::new();
        for id in ["A", "B", "C"] {
            groups.insert(
                id.to_string(),
                EmpiricalCdf::from_samples(&base_values()).unwrap(),
            );
        }
        assert!(detect_anomalies(&groups, Level::Segment, 0.1, 10)
            .unwrap()
            .flagged
            .is_empty());

        let mut overlapping = BTreeMap::new();
        overlapping.insert(
            "A".to_string(),
            EmpiricalCdf::from_samples(&[1.0, 2.0, 3.0]).unwrap(),
        );
        overlapping.insert(
            "B".to_string(),
            EmpiricalCdf::from_samples(&[2.0, 3.0, 40.0]).unwrap(),
        );
        assert!(detect_anomalies(&overlapping, Level::Segment, 1.0, 10)
            .unwrap()
            .flagged
            .is_empty());
    }

    #[test]
    fn detect_validates() {
        let mut one = BTreeMap::new();
        one.insert("A".to_string(), EmpiricalCdf::from_samples(&[1.0]).unwrap());
        assert!(detect_anomalies(&one, Level::Segment, 0.2, 10).is_err());
        one.insert("B".to_string(), EmpiricalCdf::from_samples(&[1.0]).unwrap());
        assert!(detect_anomalies(&one, Level::Segment, 0.0, 10).is_err());
        assert!(detect_anomalies(&one, Level::Segment, 1.5, 10).is_err());
    }

    #[test]
    fn tie_goes_to_smallest_id_and_max_iter_bounds() {
        // Z and Q both sit at distance 1 from the rest; M straddles them at 0.5.
        let mut groups = BTreeMap::new();
        groups.insert("Z".to_string(), EmpiricalCdf::from_samples(&[1.0]).unwrap());
        groups.insert("M".to_string(), EmpiricalCdf::from_samples(&[9.0]).unwrap());
        groups.insert(
            "Q".to_string(),
            EmpiricalCdf::from_samples(&[50.0]).unwrap(),
        );
        let report = detect_anomalies(&groups, Level::Segment, 0.5, 1).unwrap();
        assert_eq!(report.flagged.len(), 1);
        assert_eq!(report.flagged[0].group_id, "Q");
        let full = detect_anomalies(&groups, Level::Segment, 0.5, 10).unwrap();
        // Z and M then tie at 1; the loop stops once a single group survives.
        let ids: Vec<&str> = full.flagged.iter().map(|f| f.group_id.as_str()).collect();
        assert_eq!(ids, ["Q", "M"]);
    }

    #[test]
    fn baseline_without_anomalies_is_plain_cdf() {
        let mut samples = Vec::new();
        for (seg, pid) in [("S1", "P1"), ("S1", "P2"), ("S2", "P1"), ("S2", "P2")] {
            samples.extend(base_values().into_iter().map(|v| sample(seg, pid, v)));
        }
        let curve = build_baseline(
            &samples,
            MetricKey::speed(75.0).unwrap(),
            Cohort::Senior,
            BaselineParams::default(),
        )
        .unwrap();
        let all: Vec<f64> = samples.iter().map(|s| s.value).collect();
        assert_eq!(curve.cdf, EmpiricalCdf::from_samples(&all).unwrap());
        assert!(curve.exclusions.flagged.is_empty());
        assert!(curve.identifiable);
    }

    #[test]
    fn planted_segment_is_excluded() {
        let mut samples = Vec::new();
        for seg in ["S1", "S2", "S3"] {
            for pid in ["P1", "P2", "P3"] {
                samples.extend(base_values().into_iter().map(|v| sample(seg, pid, v)));
            }
        }
        for pid in ["P1", "P2", "P3"] {
            samples.extend(
                base_values()
                    .into_iter()
                    .map(|v| sample("BAD", pid, v + 50.0)),
            );
        }
        let curve = build_baseline(
            &samples,
            MetricKey::speed(75.0).unwrap(),
            Cohort::Senior,
            BaselineParams::default(),
        )
        .unwrap();
        assert_eq!(
            curve.exclusions.flagged_ids(Level::Segment),
            BTreeSet::from(["BAD"])
        );
        assert!(!curve.segments.contains("BAD"));
        assert_eq!(curve.cdf.n() as usize, samples.len() - 150);
        assert!(curve.cdf.values().iter().all(|&v| v < 100.0));
    }

    #[test]
    fn senior_fixture_provenance() {
        // Four segments (two anomalous) and four participants (one anomalous):
        // the surviving composition is 2 segments and 3 participants.
        let mut samples = Vec::new();
        for seg in ["110443561583", "110444000000", "S-KEEP-1", "S-KEEP-2"] {
            let offset = if seg.starts_with("1104") { 40.0 } else { 0.0 };
            for pid in ["SSS-DM-084", "SSS-DM-001", "SSS-DM-002", "SSS-DM-003"] {
                let p_off = if pid == "SSS-DM-084" { 20.0 } else { 0.0 };
                samples.extend(
                    base_values()
                        .into_iter()
                        .map(|v| sample(seg, pid, v + offset + p_off)),
                );
            }
        }
        let curve = build_baseline(
            &samples,
            MetricKey::speed(75.0).unwrap(),
            Cohort::Senior,
            BaselineParams::default(),
        )
        .unwrap();
        assert_eq!(curve.segments.len(), 2);
        assert_eq!(curve.participants.len(), 3);
        assert_eq!(
            curve.exclusions.flagged_ids(Level::Segment),
            BTreeSet::from(["110443561583", "110444000000"])
        );
        assert_eq!(
            curve.exclusions.flagged_ids(Level::Participant),
            BTreeSet::from(["SSS-DM-084"])
        );
        assert_eq!(curve.cdf.n(), 2 * 3 * 50);
    }

    #[test]
    fn empty_baseline_errors() {
        let metric = MetricKey::StopDeceleration;
        assert!(matches!(
            build_baseline(&[], metric, Cohort::Young, BaselineParams::default()),
            Err(Error::EmptyBaseline(_))
        ));
    }

    #[test]
    fn non_identifiable_when_survivors_disagree() {
        // Two participants far apart: with max_iter 0 nothing is removed and
        // the pairwise check reports the disagreement.
        let mut samples: Vec<KpiSample> = base_values()
            .into_iter()
            .map(|v| sample("S", "P1", v))
            .collect();
        samples.extend(
            base_values()
                .into_iter()
                .map(|v| sample("S", "P2", v + 100.0)),
        );
        let params = BaselineParams {
            max_iter: 0,
            ..Default::default()
        };
        let curve = build_baseline(
            &samples,
            MetricKey::speed(70.0).unwrap(),
            Cohort::Young,
            params,
        )
        .unwrap();
        assert!(!curve.identifiable);
    }

    fn curve_from(values: &[f64], metric: MetricKey, cohort: Cohort) -> BaselineCurve {
        let samples: Vec<KpiSample> = values.iter().map(|&v| sample("S", "P", v)).collect();
        build_baseline(&samples, metric, cohort, BaselineParams::default()).unwrap()
    }

    #[test]
    fn comparison_examples() {
        let m = MetricKey::speed(75.0).unwrap();
        let a = curve_from(&base_values(), m, Cohort::Senior);
        let b = curve_from(&base_values(), m, Cohort::Young);
        let same = compare_baselines(&a, &b, DEFAULT_ALPHA).unwrap();
        assert_eq!(same.ks.d, 0.0);
        assert_eq!(same.ks.p_value, 1.0);
        assert!(!same.significant);

        let far: Vec<f64> = base_values().iter().map(|v| v + 100.0).collect();
        let c = curve_from(&far, m, Cohort::Young);
        let apart = compare_baselines(&a, &c, DEFAULT_ALPHA).unwrap();
        assert_eq!(apart.ks.d, 1.0);
        assert!(apart.ks.p_value < 1e-10);
        assert!(apart.significant);
        assert_eq!(
            compare_baselines(&c, &a, DEFAULT_ALPHA).unwrap().ks.d,
            apart.ks.d
        );

        let d = curve_from(&base_values(), MetricKey::StopDeceleration, Cohort::Young);
        assert!(compare_baselines(&a, &d, DEFAULT_ALPHA).is_err());
    }

    #[test]
    fn artifact_roundtrip_is_bit_identical() {
        let mut samples = Vec::new();
        for seg in ["S1", "S2", "S3"] {
            samples.extend(
                base_values()
                    .into_iter()
                    .map(|v| sample(seg, "P1", v / 3.0)),
            );
            samples.extend(
                base_values()
                    .into_iter()
                    .map(|v| sample(seg, "P2", v / 3.0 + 0.1)),
            );
        }
        samples.extend(
            base_values()
                .into_iter()
                .map(|v| sample("S,4", "P1", v + 99.0)),
        );
        let curve = build_baseline(
            &samples,
            MetricKey::speed(75.0).unwrap(),
            Cohort::Senior,
            BaselineParams::default(),
        )
        .unwrap();
        assert!(!curve.exclusions.flagged.is_empty());
        let echo = vec![("baseline.tau_segment".to_string(), "0.25".to_string())];
        let mut first = Vec::new();
        write_baseline(&mut first, &curve, &echo).unwrap();
        let reread = read_baseline(first.as_slice()).unwrap();
        assert_eq!(reread, curve);
        let mut second = Vec::new();
        write_baseline(&mut second, &reread, &echo).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn artifact_rejects_garbage() {
        assert!(read_baseline("hello\n".as_bytes()).is_err());
        let truncated = format!("{ARTIFACT_MAGIC}\nmetric=decel\ncohort=young\n");
        assert!(read_baseline(truncated.as_bytes()).is_err());
        let bad_n = format!(
            "{ARTIFACT_MAGIC}\nmetric=decel\ncohort=young\nn=5\nvalue,count,cum_prob\n1,2,1\n"
        );
        assert!(read_baseline(bad_n.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn accounting_and_determinism(seed in 0u64..1000, n_seg in 2usize..5, n_part in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = Vec::new();
            for s in 0..n_seg {
                for p in 0..n_part {
                    let shift = if rng.random_bool(0.3) { 30.0 } else { 0.0 };
                    for _ in 0..20 {
                        samples.push(sample(&format!("S{s}"), &format!("P{p}"), rng.random_range(0.0..10.0) + shift));
                    }
                }
            }
            let metric = MetricKey::StopDeceleration;
            let params = BaselineParams::default();
            match build_baseline(&samples, metric, Cohort::Young, params) {
                Ok(curve) => {
                    let bad_s = curve.exclusions.flagged_ids(Level::Segment);
                    let bad_p = curve.exclusions.flagged_ids(Level::Participant);
                    let expected = samples.iter().filter(|s| {
                        !bad_s.contains(s.segment_id.as_str()) && !bad_p.contains(s.participant_id.as_str())
                    }).count();
                    prop_assert_eq!(curve.cdf.n() as usize, expected);
                    prop_assert!(curve.segments.iter().all(|s| !bad_s.contains(s.as_str())));
                    prop_assert!(curve.participants.iter().all(|p| !bad_p.contains(p.as_str())));
                    let above_tau = curve.exclusions.flagged.iter().all(|f| {
                        let tau = match f.level { Level::Segment => params.tau_segment, Level::Participant => params.tau_participant };
                        f.ks_distance > tau
                    });
                    prop_assert!(above_tau);
                    let again = build_baseline(&samples, metric, Cohort::Young, params).unwrap();
                    prop_assert_eq!(again, curve);
                }
                Err(Error::EmptyBaseline(_)) => {}
                Err(other) => prop_assert!(false, "unexpected error {other}"),
            }
        }

        #[test]
        fn unit_tau_keeps_overlapping_groups(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<KpiSample> = (0..120).map(|i| {
                sample(&format!("S{}", i % 3), &format!("P{}", i % 4), rng.random_range(0.0..10.0))
            }).collect();
            let params = BaselineParams { tau_segment: 1.0, tau_participant: 1.0, max_iter: 10 };
            let curve = build_baseline(&samples, MetricKey::StopDeceleration, Cohort::Senior, params).unwrap();
            let all: Vec<f64> = samples.iter().map(|s| s.value).collect();
            prop_assert_eq!(curve.cdf, EmpiricalCdf::from_samples(&all).unwrap());
        }
    }
}
