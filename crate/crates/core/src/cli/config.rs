//! Flat `key=value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! out-of-range values are rejected with the offending key named.

use std::path::Path;

use crate::baseline::{BaselineParams, DEFAULT_ALPHA, DEFAULT_TAU};
use crate::classify::RangeSearch;
use crate::error::{Error, Result};
use crate::geo::{DEFAULT_BUFFER_RADIUS_M, DEFAULT_V_STOP_MPH};
use crate::telemetry::{RoadClass, SelectionCriteria, DEFAULT_SENIOR_AGE, MIN_DRIVING_AGE};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub senior_age_threshold: u32,
    pub selection: SelectionCriteria,
    pub buffer_radius_m: f64,
    pub v_stop_mph: f64,
    pub baseline: BaselineParams,
    pub alpha: f64,
    pub range: RangeSearch,
    pub screen_validation: bool,
    pub tau_validation: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            senior_age_threshold: DEFAULT_SENIOR_AGE,
            selection: SelectionCriteria::default(),
            buffer_radius_m: DEFAULT_BUFFER_RADIUS_M,
            v_stop_mph: DEFAULT_V_STOP_MPH,
            baseline: BaselineParams::default(),
            alpha: DEFAULT_ALPHA,
            range: RangeSearch::default(),
            screen_validation: true,
            tau_validation: DEFAULT_TAU,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(key, format!("cannot parse {value:?}")))
}

fn ensure(key: &str, ok: bool, bound: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("must be {bound}")))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}", i + 1), "expected key=value"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "senior_age_threshold" => self.senior_age_threshold = parse(key, value)?,
            "telemetry.min_limit_mph" => self.selection.min_limit_mph = parse(key, value)?,
            "telemetry.road_class" => self.selection.road_class = parse::<RoadClass>(key, value)?,
            "telemetry.min_points_per_segment" => {
                self.selection.min_points_per_segment = parse(key, value)?
            }
            "telemetry.min_participants_per_segment" => {
                self.selection.min_participants_per_segment = parse(key, value)?
            }
            "geo.buffer_radius_m" => self.buffer_radius_m = parse(key, value)?,
            "geo.v_stop_mph" => self.v_stop_mph = parse(key, value)?,
            "baseline.tau_segment" => self.baseline.tau_segment = parse(key, value)?,
            "baseline.tau_participant" => self.baseline.tau_participant = parse(key, value)?,
            "baseline.max_iter" => self.baseline.max_iter = parse(key, value)?,
            "kstest.alpha" => self.alpha = parse(key, value)?,
            "classify.min_width" => self.range.min_width = parse(key, value)?,
            "classify.grid_step" => self.range.step = parse(key, value)?,
            "classify.screen_validation" => self.screen_validation = parse(key, value)?,
            "classify.tau_validation" => self.tau_validation = parse(key, value)?,
            _ => return Err(Error::invalid(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            "senior_age_threshold",
            self.senior_age_threshold >= MIN_DRIVING_AGE,
            "at least 16",
        )?;
        ensure(
            "telemetry.min_limit_mph",
            self.selection.min_limit_mph.is_finite() && self.selection.min_limit_mph > 0.0,
            "a positive number",
        )?;
        ensure(
            "telemetry.min_points_per_segment",
            self.selection.min_points_per_segment >= 1,
            "at least 1",
        )?;
        ensure(
            "telemetry.min_participants_per_segment",
            self.selection.min_participants_per_segment >= 1,
            "at least 1",
        )?;
        ensure(
            "geo.buffer_radius_m",
            self.buffer_radius_m.is_finite() && self.buffer_radius_m > 0.0,
            "a positive number",
        )?;
        ensure(
            "geo.v_stop_mph",
            self.v_stop_mph.is_finite() && self.v_stop_mph >= 0.0,
            "a non-negative number",
        )?;
        let tau_ok = |t: f64| t > 0.0 && t <= 1.0;
        ensure(
            "baseline.tau_segment",
            tau_ok(self.baseline.tau_segment),
            "in (0, 1]",
        )?;
        ensure(
            "baseline.tau_participant",
            tau_ok(self.baseline.tau_participant),
            "in (0, 1]",
        )?;
        ensure(
            "baseline.max_iter",
            self.baseline.max_iter >= 1,
            "at least 1",
        )?;
        ensure(
            "kstest.alpha",
            self.alpha > 0.0 && self.alpha < 1.0,
            "in (0, 1)",
        )?;
        ensure(
            "classify.min_width",
            (1..=98).contains(&self.range.min_width),
            "in [1, 98]",
        )?;
        ensure("classify.grid_step", self.range.step >= 1, "at least 1")?;
        ensure(
            "classify.tau_validation",
            tau_ok(self.tau_validation),
            "in (0, 1]",
        )?;
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        [
            (
                "senior_age_threshold",
                self.senior_age_threshold.to_string(),
            ),
            (
                "telemetry.min_limit_mph",
                self.selection.min_limit_mph.to_string(),
            ),
            (
                "telemetry.road_class",
                self.selection.road_class.to_string(),
            ),
            (
                "telemetry.min_points_per_segment",
                self.selection.min_points_per_segment.to_string(),
            ),
            (
                "telemetry.min_participants_per_segment",
                self.selection.min_participants_per_segment.to_string(),
            ),
            ("geo.buffer_radius_m", self.buffer_radius_m.to_string()),
            ("geo.v_stop_mph", self.v_stop_mph.to_string()),
            (
                "baseline.tau_segment",
                self.baseline.tau_segment.to_string(),
            ),
            (
                "baseline.tau_participant",
                self.baseline.tau_participant.to_string(),
            ),
            ("baseline.max_iter", self.baseline.max_iter.to_string()),
            ("kstest.alpha", self.alpha.to_string()),
            ("classify.min_width", self.range.min_width.to_string()),
            ("classify.grid_step", self.range.step.to_string()),
            (
                "classify.screen_validation",
                self.screen_validation.to_string(),
            ),
            ("classify.tau_validation", self.tau_validation.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
