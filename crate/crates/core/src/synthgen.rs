//! Seeded synthetic cohorts.
//!
//! All randomness comes from ChaCha8 seeded with `seed_from_u64`, and normal
//! draws use `rand_distr::Normal`. The same spec and seed always produce the
//! same points on every platform. Other implementations should share
//! fixtures through the emitted CSVs rather than reproduce the stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geo::{StopIntersection, EARTH_RADIUS_M, MPH_TO_FTPS};
use crate::telemetry::{Cohort, DrivePoint, Participant, RoadClass, Sex};

/// Normal model truncated below at zero (speeds, mph).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedModel {
    pub mean_mph: f64,
    pub sd_mph: f64,
}

/// Normal model of per-step deceleration magnitude (ft/s²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecelModel {
    pub mean_ftps2: f64,
    pub sd_ftps2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLayout {
    pub segment_id: String,
    pub posted_limit_mph: f64,
    /// Start of the straight stretch the synthetic trips drive along.
    pub origin: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub cohort: Cohort,
    /// Participant ids are `<id_prefix>-<nnn>`.
    pub id_prefix: String,
    pub n_participants: usize,
    pub trips_per_participant: usize,
    pub points_per_trip: usize,
    pub speed: SpeedModel,
    pub decel: DecelModel,
    pub segments: Vec<SegmentLayout>,
    pub seed: u64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_participants == 0 || self.trips_per_participant == 0 || self.points_per_trip == 0
        {
            return Err(Error::invalid(
                "cohort spec",
                "all counts must be at least 1",
            ));
        }
        if !(self.speed.mean_mph.is_finite()
            && self.speed.sd_mph.is_finite()
            && self.speed.sd_mph >= 0.0)
        {
            return Err(Error::invalid(
                "speed model",
                "mean must be finite and sd >= 0",
            ));
        }
        if !(self.decel.mean_ftps2.is_finite()
            && self.decel.sd_ftps2.is_finite()
            && self.decel.sd_ftps2 >= 0.0)
        {
            return Err(Error::invalid(
                "decel model",
                "mean must be finite and sd >= 0",
            ));
        }
        if self.segments.is_empty() {
            return Err(Error::invalid(
                "segments",
                "at least one segment is required",
            ));
        }
        Ok(())
    }

    pub fn participant_id(&self, index: usize) -> String {
        format!("{}-{:03}", self.id_prefix, index + 1)
    }

    /// Roster rows for this cohort: seniors aged 65..=88, young 21..=64.
    pub fn roster(&self) -> Vec<Participant> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x526f_7374_6572);
        let ages = match self.cohort {
            Cohort::Senior => 65..=88,
            Cohort::Young => 21..=64,
        };
        (0..self.n_participants)
            .map(|i| Participant {
                participant_id: self.participant_id(i),
                age: rng.random_range(ages.clone()),
                sex: if rng.random_bool(0.5) {
                    Sex::Female
                } else {
                    Sex::Male
                },
                cohort: self.cohort,
            })
            .collect()
    }
}

/// Moves `(lat, lon)` by `north_m` and `east_m` with a local flat-earth
/// offset, accurate to well under a meter at trip scale.
fn offset(origin: (f64, f64), north_m: f64, east_m: f64) -> (f64, f64) {
    let lat = origin.0 + (north_m / EARTH_RADIUS_M).to_degrees();
    let lon = origin.1 + (east_m / (EARTH_RADIUS_M * origin.0.to_radians().cos())).to_degrees();
    (lat, lon)
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("sd validated as finite and non-negative")
}

/// Rejection sampling from a normal truncated below at zero.
fn truncated_speed(rng: &mut ChaCha8Rng, dist: &Normal<f64>) -> f64 {
    for _ in 0..10_000 {
        let v = dist.sample(rng);
        if v >= 0.0 {
            return v;
        }
    }
    0.0
}

/// Interstate speed traces: one trip per `(participant, trip)` on the
/// segments in round-robin order, one point per second driving east.
pub fn generate_speed_traces(spec: &CohortSpec) -> Result<Vec<DrivePoint>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dist = normal(spec.speed.mean_mph, spec.speed.sd_mph);
    let mut out =
        Vec::with_capacity(spec.n_participants * spec.trips_per_participant * spec.points_per_trip);
    for p in 0..spec.n_participants {
        let participant_id = spec.participant_id(p);
        for trip in 0..spec.trips_per_participant {
            let seg = &spec.segments[(p + trip) % spec.segments.len()];
            let trip_id = format!("HW{:02}", trip + 1);
            let mut east_m = 0.0;
            for t in 0..spec.points_per_trip {
                let speed = truncated_speed(&mut rng, &dist);
                let (lat, lon) = offset(seg.origin, 0.0, east_m);
                east_m += speed * MPH_TO_FTPS * 0.3048;
                out.push(DrivePoint {
                    participant_id: participant_id.clone(),
                    trip_id: trip_id.clone(),
                    t: t as u32,
                    lat: Some(lat),
                    lon: Some(lon),
                    speed_mph: Some(speed),
                    road_class: RoadClass::Interstate,
                    segment_id: seg.segment_id.clone(),
                    posted_limit_mph: Some(seg.posted_limit_mph),
                    accel_ftps2: None,
                });
            }
        }
    }
    Ok(out)
}

/// Geometry of a synthetic stop approach.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproachShape {
    pub cruise_mph: f64,
    /// Seconds of cruising before braking starts.
    pub cruise_s: u32,
    /// Seconds spent stationary after the stop.
    pub dwell_s: u32,
    /// Where the vehicle comes to rest, measured before the intersection center.
    pub stop_short_m: f64,
    pub v_stop_mph: f64,
    /// Smallest per-step deceleration magnitude drawn, ft/s².
    pub min_decel_ftps2: f64,
}

impl Default for ApproachShape {
    fn default() -> Self {
        ApproachShape {
            cruise_mph: 30.0,
            cruise_s: 6,
            dwell_s: 3,
            stop_short_m: 5.0,
            v_stop_mph: crate::geo::DEFAULT_V_STOP_MPH,
            min_decel_ftps2: 0.5,
        }
    }
}

/// Straight-line approaches that brake into a stop intersection.
///
/// Each trip of each participant approaches one intersection (round-robin)
/// from the south, cruises, then brakes with per-step decelerations drawn
/// from the decel model (absolute value, floored at
/// `shape.min_decel_ftps2`) until the speed is at or below `v_stop`, and
/// dwells at rest. Samples are one second apart.
pub fn generate_stop_approaches(
    spec: &CohortSpec,
    intersections: &[StopIntersection],
    shape: ApproachShape,
) -> Result<Vec<DrivePoint>> {
    spec.validate()?;
    if intersections.is_empty() {
        return Err(Error::invalid("intersections", "at least one is required"));
    }
    if !(shape.min_decel_ftps2 > 0.0
        && shape.v_stop_mph >= 0.0
        && shape.cruise_mph > shape.v_stop_mph)
    {
        return Err(Error::invalid(
            "approach shape",
            "need min_decel > 0 and cruise > v_stop",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5354_4f50));
    let dist = normal(spec.decel.mean_ftps2, spec.decel.sd_ftps2);
    let v_stop_ftps = shape.v_stop_mph * MPH_TO_FTPS;
    let mut out = Vec::new();
    for p in 0..spec.n_participants {
        let participant_id = spec.participant_id(p);
        for trip in 0..spec.trips_per_participant {
            let stop = &intersections[(p + trip) % intersections.len()];

            // Speed profile in ft/s, one entry per second.
            let mut speeds = vec![shape.cruise_mph * MPH_TO_FTPS; shape.cruise_s as usize + 1];
            let mut v = *speeds.last().unwrap();
            while v > v_stop_ftps {
                let a = dist.sample(&mut rng).abs().max(shape.min_decel_ftps2);
                v = (v - a).max(0.0);
                speeds.push(v);
            }
            speeds.extend(std::iter::repeat_n(0.0, shape.dwell_s as usize));

            // Place the first at-or-below-v_stop sample `stop_short_m` before
            // the center and integrate positions backwards from there.
            let stop_idx = speeds.iter().position(|&s| s <= v_stop_ftps).unwrap();
            let mut north = vec![0.0; speeds.len()];
            north[stop_idx] = -shape.stop_short_m;
            for i in (0..stop_idx).rev() {
                let mean_ftps = 0.5 * (speeds[i] + speeds[i + 1]);
                north[i] = north[i + 1] - mean_ftps * 0.3048;
            }
            for i in stop_idx + 1..speeds.len() {
                let mean_ftps = 0.5 * (speeds[i - 1] + speeds[i]);
                north[i] = (north[i - 1] + mean_ftps * 0.3048).min(0.0);
            }

            let trip_id = format!("ST{:02}", trip + 1);
            for (t, (&s, &y)) in speeds.iter().zip(&north).enumerate() {
                let (lat, lon) = offset((stop.lat, stop.lon), y, 0.0);
                out.push(DrivePoint {
                    participant_id: participant_id.clone(),
                    trip_id: trip_id.clone(),
                    t: t as u32,
                    lat: Some(lat),
                    lon: Some(lon),
                    speed_mph: Some(s / MPH_TO_FTPS),
                    road_class: RoadClass::Other,
                    segment_id: format!("approach-{}", stop.intersection_id),
                    posted_limit_mph: Some(25.0),
                    accel_ftps2: None,
                });
            }
        }
    }
    Ok(out)
}

/// A grid of intersections spaced 2 km apart, south-west corner at `origin`.
pub fn intersection_grid(
    n: usize,
    origin: (f64, f64),
    radius_m: f64,
) -> Result<Vec<StopIntersection>> {
    (0..n)
        .map(|i| {
            let (lat, lon) = offset(origin, 2000.0 * (i / 5) as f64, 2000.0 * (i % 5) as f64);
            StopIntersection::new(format!("X{:03}", i + 1), lat, lon, radius_m)
        })
        .collect()
}

/// Interstate stretches spaced 5 km apart.
pub fn segment_layout(ids_and_limits: &[(&str, f64)], origin: (f64, f64)) -> Vec<SegmentLayout> {
    ids_and_limits
        .iter()
        .enumerate()
        .map(|(i, &(id, limit))| SegmentLayout {
            segment_id: id.to_string(),
            posted_limit_mph: limit,
            origin: offset(origin, 5000.0 * i as f64, 0.0),
        })
        .collect()
}

/// Parameters of the standard two-cohort fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub posted_limit_mph: f64,
    pub senior_speed: SpeedModel,
    pub young_speed: SpeedModel,
    pub senior_decel: DecelModel,
    pub young_decel: DecelModel,
    /// Participants per cohort used to build baselines.
    pub n_baseline: usize,
    /// Senior participants used to pick the percentile range.
    pub n_validation: usize,
    /// Held-out participants per cohort used to measure accuracy.
    pub n_test: usize,
    pub trips_per_participant: usize,
    pub points_per_trip: usize,
    /// Stop approaches driven by each participant.
    pub approaches_per_participant: usize,
    pub n_segments: usize,
    pub n_intersections: usize,
    pub buffer_radius_m: f64,
    pub origin: (f64, f64),
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 1,
            posted_limit_mph: 75.0,
            senior_speed: SpeedModel {
                mean_mph: 72.0,
                sd_mph: 2.0,
            },
            young_speed: SpeedModel {
                mean_mph: 76.0,
                sd_mph: 4.0,
            },
            senior_decel: DecelModel {
                mean_ftps2: 4.0,
                sd_ftps2: 1.0,
            },
            young_decel: DecelModel {
                mean_ftps2: 6.0,
                sd_ftps2: 1.5,
            },
            n_baseline: 10,
            n_validation: 5,
            n_test: 10,
            trips_per_participant: 2,
            points_per_trip: 150,
            approaches_per_participant: 20,
            n_segments: 3,
            n_intersections: 5,
            buffer_radius_m: crate::geo::DEFAULT_BUFFER_RADIUS_M,
            origin: (41.2565, -95.9345),
        }
    }
}

/// Which part of the fixture a participant belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Baseline,
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub drives: Vec<DrivePoint>,
    pub stops: Vec<StopIntersection>,
    pub roster_baseline: Vec<Participant>,
    pub roster_validation: Vec<Participant>,
    pub roster_test: Vec<Participant>,
}

impl FixtureConfig {
    fn cohort_spec(&self, cohort: Cohort, role: Role, index: u64) -> CohortSpec {
        let (speed, decel) = match cohort {
            Cohort::Senior => (self.senior_speed, self.senior_decel),
            Cohort::Young => (self.young_speed, self.young_decel),
        };
        let n_participants = match role {
            Role::Baseline => self.n_baseline,
            Role::Validation => self.n_validation,
            Role::Test => self.n_test,
        };
        let role_tag = match role {
            Role::Baseline => "B",
            Role::Validation => "V",
            Role::Test => "T",
        };
        let cohort_tag = match cohort {
            Cohort::Senior => "SEN",
            Cohort::Young => "YNG",
        };
        let ids: Vec<(String, f64)> = (0..self.n_segments)
            .map(|i| (format!("I80-{:02}", i + 1), self.posted_limit_mph))
            .collect();
        let refs: Vec<(&str, f64)> = ids.iter().map(|(id, l)| (id.as_str(), *l)).collect();
        CohortSpec {
            cohort,
            id_prefix: format!("{cohort_tag}-{role_tag}"),
            n_participants,
            trips_per_participant: self.trips_per_participant,
            points_per_trip: self.points_per_trip,
            speed,
            decel,
            segments: segment_layout(&refs, self.origin),
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(index),
        }
    }
}

/// Baseline cohorts of both ages, senior validation participants, and
/// held-out test participants of both ages, each with interstate trips and
/// stop approaches.
pub fn build_fixture(cfg: &FixtureConfig) -> Result<Fixture> {
    let stop_origin = offset(cfg.origin, -20_000.0, 0.0);
    let stops = intersection_grid(cfg.n_intersections, stop_origin, cfg.buffer_radius_m)?;
    let groups = [
        (Cohort::Senior, Role::Baseline),
        (Cohort::Young, Role::Baseline),
        (Cohort::Senior, Role::Validation),
        (Cohort::Senior, Role::Test),
        (Cohort::Young, Role::Test),
    ];
    let mut fixture = Fixture {
        drives: Vec::new(),
        stops,
        roster_baseline: Vec::new(),
        roster_validation: Vec::new(),
        roster_test: Vec::new(),
    };
    for (k, &(cohort, role)) in groups.iter().enumerate() {
        let spec = cfg.cohort_spec(cohort, role, k as u64);
        if spec.n_participants == 0 {
            continue;
        }
        fixture.drives.extend(generate_speed_traces(&spec)?);
        let approach_spec = CohortSpec {
            trips_per_participant: cfg.approaches_per_participant,
            ..spec.clone()
        };
        fixture.drives.extend(generate_stop_approaches(
            &approach_spec,
            &fixture.stops,
            ApproachShape::default(),
        )?);
        let roster = spec.roster();
        match role {
            Role::Baseline => fixture.roster_baseline.extend(roster),
            Role::Validation => fixture.roster_validation.extend(roster),
            Role::Test => fixture.roster_test.extend(roster),
        }
    }
    Ok(fixture)
}
