//! Stop-intersection buffers, approach-trace extraction and per-step
//! deceleration.
//!
//! Buffers are circles around each intersection center. Speeds are stored in
//! mph; accelerations are reported in ft/s².

use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::telemetry::DrivePoint;

/// Mean Earth radius of the spherical model used for all distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// mph to ft/s: 5280 ft per mile over 3600 s per hour.
pub const MPH_TO_FTPS: f64 = 5280.0 / 3600.0;
pub const DEFAULT_BUFFER_RADIUS_M: f64 = 60.0;
pub const DEFAULT_V_STOP_MPH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct StopIntersection {
    pub intersection_id: String,
    pub lat: f64,
    pub lon: f64,
    pub buffer_radius_m: f64,
}

impl StopIntersection {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64, buffer_radius_m: f64) -> Result<Self> {
        let intersection_id = id.into();
        check_coords(lat, lon)?;
        if !(buffer_radius_m.is_finite() && buffer_radius_m > 0.0) {
            return Err(Error::invalid(
                "radius_m",
                format!("{intersection_id}: radius must be positive, got {buffer_radius_m}"),
            ));
        }
        Ok(StopIntersection {
            intersection_id,
            lat,
            lon,
            buffer_radius_m,
        })
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        geodesic_distance((self.lat, self.lon), (lat, lon)) <= self.buffer_radius_m
    }
}

fn check_coords(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::invalid("lat", format!("{lat} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::invalid("lon", format!("{lon} outside [-180, 180]")));
    }
    Ok(())
}

/// Reads a stops CSV (`intersection_id, lat, lon, radius_m?`). Rows without a
/// radius get `default_radius_m`.
pub fn load_stop_intersections<R: Read>(
    reader: R,
    default_radius_m: f64,
) -> Result<Vec<StopIntersection>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| Error::Schema(format!("stops header is missing column {name:?}")))
    };
    let (id_col, lat_col, lon_col) = (
        required("intersection_id")?,
        required("lat")?,
        required("lon")?,
    );
    let radius_col = col("radius_m");

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        let real = |i: usize, name: &str| -> Result<f64> {
            get(i).parse::<f64>().map_err(|_| {
                Error::invalid(name, format!("{:?} on line {line} is not a number", get(i)))
            })
        };
        let id = get(id_col).to_string();
        if id.is_empty() {
            return Err(Error::invalid(
                "intersection_id",
                format!("empty on line {line}"),
            ));
        }
        let radius = match radius_col.map(get) {
            None | Some("") => default_radius_m,
            Some(_) => real(radius_col.unwrap(), "radius_m")?,
        };
        let stop = StopIntersection::new(id, real(lat_col, "lat")?, real(lon_col, "lon")?, radius)?;
        if !seen.insert(stop.intersection_id.clone()) {
            return Err(Error::Duplicate(stop.intersection_id));
        }
        out.push(stop);
    }
    Ok(out)
}

pub fn write_stop_intersections<W: Write>(writer: W, stops: &[StopIntersection]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["intersection_id", "lat", "lon", "radius_m"])?;
    for s in stops {
        wtr.write_record([
            s.intersection_id.as_str(),
            &s.lat.to_string(),
            &s.lon.to_string(),
            &s.buffer_radius_m.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Great-circle (haversine) distance in meters on a sphere of radius
/// [`EARTH_RADIUS_M`]. Arguments are `(lat, lon)` in degrees.
pub fn geodesic_distance(p1: (f64, f64), p2: (f64, f64)) -> f64 {
    let (lat1, lon1) = (p1.0.to_radians(), p1.1.to_radians());
    let (lat2, lon2) = (p2.0.to_radians(), p2.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// The in-buffer portion of one trip's pass by one intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproachTrace {
    pub participant_id: String,
    pub trip_id: String,
    pub intersection_id: String,
    pub points: Vec<DrivePoint>,
}

/// Finds approach traces for every `(trip, intersection)` pair.
///
/// Each maximal run of consecutive in-buffer points yields at most one trace:
/// from buffer entry to the first point at or below `v_stop_mph`, or to buffer
/// exit if the trip never slows that far. Traces shorter than two points are
/// dropped. Points without position or speed break a run.
pub fn extract_approach_traces(
    trips: &[Vec<DrivePoint>],
    intersections: &[StopIntersection],
    v_stop_mph: f64,
) -> Vec<ApproachTrace> {
    let mut traces = Vec::new();
    for trip in trips {
        for stop in intersections {
            let inside = |p: &DrivePoint| match (p.lat, p.lon, p.speed_mph) {
                (Some(lat), Some(lon), Some(_)) => stop.contains(lat, lon),
                _ => false,
            };
            let mut i = 0;
            while i < trip.len() {
                if !inside(&trip[i]) {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < trip.len() && inside(&trip[i]) {
                    i += 1;
                }
                let run = &trip[start..i];
                if run.len() < 2 {
                    continue;
                }
                let end = run
                    .iter()
                    .position(|p| p.speed_mph.is_some_and(|v| v <= v_stop_mph))
                    .unwrap_or(run.len() - 1);
                if end >= 1 {
                    traces.push(ApproachTrace {
                        participant_id: run[0].participant_id.clone(),
                        trip_id: run[0].trip_id.clone(),
                        intersection_id: stop.intersection_id.clone(),
                        points: run[..=end].to_vec(),
                    });
                }
            }
        }
    }
    traces
}

/// Speed change between two consecutive samples, in ft/s and ft/s².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedStep {
    pub t_start: u32,
    pub dt: f64,
    pub v1: f64,
    pub v2: f64,
    /// `(v2 - v1) / dt`.
    pub a: f64,
}

/// A consecutive pair inside an approach whose speed dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct DecelEvent {
    pub participant_id: String,
    pub trip_id: String,
    pub intersection_id: String,
    pub t_start: u32,
    pub dt: f64,
    pub v1: f64,
    pub v2: f64,
    pub a: f64,
}

impl DecelEvent {
    pub fn magnitude(&self) -> f64 {
        -self.a
    }
}

/// `a = (v2 - v1) / dt` for every consecutive pair, speeds in ft/s.
pub fn speed_steps(points: &[DrivePoint]) -> Result<Vec<SpeedStep>> {
    points
        .windows(2)
        .map(|w| {
            let (p, q) = (&w[0], &w[1]);
            if q.t <= p.t {
                return Err(Error::invalid(
                    "t",
                    format!("timestamps must increase, got {} then {}", p.t, q.t),
                ));
            }
            let speed = |d: &DrivePoint| {
                d.speed_mph
                    .map(|v| v * MPH_TO_FTPS)
                    .ok_or_else(|| Error::invalid("speed_mph", format!("absent at t={}", d.t)))
            };
            let (v1, v2) = (speed(p)?, speed(q)?);
            let dt = f64::from(q.t - p.t);
            Ok(SpeedStep {
                t_start: p.t,
                dt,
                v1,
                v2,
                a: (v2 - v1) / dt,
            })
        })
        .collect()
}

/// Deceleration events (`a < 0`) of one approach trace.
pub fn compute_deceleration(trace: &ApproachTrace) -> Result<Vec<DecelEvent>> {
    if trace.points.len() < 2 {
        return Err(Error::invalid("trace", "needs at least two points"));
    }
    Ok(speed_steps(&trace.points)?
        .into_iter()
        .filter(|s| s.a < 0.0)
        .map(|s| DecelEvent {
            participant_id: trace.participant_id.clone(),
            trip_id: trace.trip_id.clone(),
            intersection_id: trace.intersection_id.clone(),
            t_start: s.t_start,
            dt: s.dt,
            v1: s.v1,
            v2: s.v2,
            a: s.a,
        })
        .collect())
}

/// Fills absent `accel_ftps2` values of a time-ordered trip with the
/// backward difference from the previous sample. The first sample of a trip
/// has no predecessor and stays absent.
pub fn fill_missing_accel(trip: &mut [DrivePoint]) {
    for i in 1..trip.len() {
        if trip[i].accel_ftps2.is_some() {
            continue;
        }
        let (prev, cur) = (&trip[i - 1], &trip[i]);
        if let (Some(v1), Some(v2)) = (prev.speed_mph, cur.speed_mph) {
            if cur.t > prev.t {
                let dt = f64::from(cur.t - prev.t);
                trip[i].accel_ftps2 = Some((v2 - v1) * MPH_TO_FTPS / dt);
            }
        }
    }
}

pub const DECEL_COLUMNS: [&str; 8] = [
    "participant_id",
    "trip_id",
    "intersection_id",
    "t_start",
    "dt",
    "v1_ftps",
    "v2_ftps",
    "a_ftps2",
];

pub fn write_decel_events<W: Write>(writer: W, events: &[DecelEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(DECEL_COLUMNS)?;
    for e in events {
        wtr.write_record([
            e.participant_id.as_str(),
            e.trip_id.as_str(),
            e.intersection_id.as_str(),
            &e.t_start.to_string(),
            &e.dt.to_string(),
            &e.v1.to_string(),
            &e.v2.to_string(),
            &e.a.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_decel_events<R: Read>(reader: R) -> Result<Vec<DecelEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; DECEL_COLUMNS.len()];
    for (slot, name) in idx.iter_mut().zip(DECEL_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("events header is missing column {name:?}")))?;
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |k: usize| record.get(idx[k]).unwrap_or("").trim();
        let real = |k: usize| -> Result<f64> {
            get(k).parse::<f64>().map_err(|_| {
                Error::invalid(
                    DECEL_COLUMNS[k],
                    format!("bad value {:?} on line {line}", get(k)),
                )
            })
        };
        out.push(DecelEvent {
            participant_id: get(0).to_string(),
            trip_id: get(1).to_string(),
            intersection_id: get(2).to_string(),
            t_start: get(3).parse().map_err(|_| {
                Error::invalid("t_start", format!("bad value {:?} on line {line}", get(3)))
            })?,
            dt: real(4)?,
            v1: real(5)?,
            v2: real(6)?,
            a: real(7)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::RoadClass;
    use proptest::prelude::*;

    const ORIGIN: (f64, f64) = (41.25, -96.0);

    /// A point `north_m` meters north of ORIGIN.
    fn north(pid: &str, t: u32, north_m: f64, speed: f64) -> DrivePoint {
        DrivePoint {
            participant_id: pid.into(),
            trip_id: "T1".into(),
            t,
            lat: Some(ORIGIN.0 + (north_m / EARTH_RADIUS_M).to_degrees()),
            lon: Some(ORIGIN.1),
            speed_mph: Some(speed),
            road_class: RoadClass::Other,
            segment_id: "R1".into(),
            posted_limit_mph: Some(25.0),
            accel_ftps2: None,
        }
    }

    fn stop_at(id: &str, north_m: f64) -> StopIntersection {
        StopIntersection::new(
            id,
            ORIGIN.0 + (north_m / EARTH_RADIUS_M).to_degrees(),
            ORIGIN.1,
            60.0,
        )
        .unwrap()
    }

    #[test]
    fn distance_anchors() {
        assert_eq!(geodesic_distance((0.0, 0.0), (0.0, 0.0)), 0.0);
        let one_degree = std::f64::consts::PI * EARTH_RADIUS_M / 180.0;
        assert!((one_degree - 111_194.9).abs() < 0.1);
        assert!((geodesic_distance((0.0, 0.0), (0.0, 1.0)) - one_degree).abs() < 1e-6);
        assert!((geodesic_distance((0.0, 0.0), (1.0, 0.0)) - one_degree).abs() < 1e-6);
        let antipode = geodesic_distance((0.0, 0.0), (0.0, 180.0));
        assert!((antipode - std::f64::consts::PI * EARTH_RADIUS_M).abs() < 1e-3);
    }

    #[test]
    fn load_stops() {
        let csv = "intersection_id,lat,lon,radius_m\nA,41.2,-96.0,\nB,41.3,-96.1,25\n";
        let stops = load_stop_intersections(csv.as_bytes(), 60.0).unwrap();
        assert_eq!(stops.len(), 2);
        assert_eq!(stops[0].buffer_radius_m, 60.0);
        assert_eq!(stops[1].buffer_radius_m, 25.0);

        let empty = load_stop_intersections("intersection_id,lat,lon\n".as_bytes(), 60.0).unwrap();
        assert!(empty.is_empty());

        let dup = "intersection_id,lat,lon\nA,41.2,-96.0\nA,41.3,-96.0\n";
        match load_stop_intersections(dup.as_bytes(), 60.0) {
            Err(Error::Duplicate(id)) => assert_eq!(id, "A"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
        let bad = "intersection_id,lat,lon,radius_m\nA,41.2,-96.0,0\n";
        assert!(load_stop_intersections(bad.as_bytes(), 60.0).is_err());
        let bad = "intersection_id,lat,lon\nA,95,-96.0\n";
        assert!(load_stop_intersections(bad.as_bytes(), 60.0).is_err());
    }

    #[test]
    fn load_many_stops() {
        let mut csv = String::from("intersection_id,lat,lon\n");
        for i in 0..75 {
            csv.push_str(&format!("X{i},41.{i:02},-96.0\n"));
        }
        assert_eq!(
            load_stop_intersections(csv.as_bytes(), 60.0).unwrap().len(),
            75
        );
    }

    #[test]
    fn trace_ends_at_first_stop_point() {
        // Drive north through a buffer at 0 m, slowing to a halt at -10 m.
        let speeds = [30.0, 30.0, 25.0, 18.0, 12.0, 6.0, 3.0, 0.0, 0.0];
        let positions = [
            -150.0, -100.0, -55.0, -40.0, -28.0, -18.0, -12.0, -10.0, -10.0,
        ];
        let trip: Vec<DrivePoint> = speeds
            .iter()
            .zip(positions)
            .enumerate()
            .map(|(t, (&v, y))| north("P1", t as u32, y, v))
            .collect();
        let traces = extract_approach_traces(&[trip], &[stop_at("S", 0.0)], 5.0);
        assert_eq!(traces.len(), 1);
        let ts: Vec<u32> = traces[0].points.iter().map(|p| p.t).collect();
        assert_eq!(ts, [2, 3, 4, 5, 6]);
    }

    #[test]
    fn trip_outside_buffers_yields_nothing() {
        let trip: Vec<DrivePoint> = (0..10)
            .map(|t| north("P1", t, 500.0 + 20.0 * t as f64, 30.0))
            .collect();
        assert!(extract_approach_traces(&[trip], &[stop_at("S", 0.0)], 5.0).is_empty());
    }

    #[test]
    fn two_buffers_two_traces() {
        // 10 m/s straight north from -195 m, buffers at 0 and 1000 m.
        let trip: Vec<DrivePoint> = (0..140)
            .map(|t| north("P1", t, -195.0 + 10.0 * t as f64, 22.0))
            .collect();
        let stops = [stop_at("A", 0.0), stop_at("B", 1000.0)];
        let traces = extract_approach_traces(&[trip], &stops, 5.0);
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].intersection_id, "A");
        assert_eq!(traces[1].intersection_id, "B");
        // Never slowed down: each trace spans the whole run of 12 points (-55..=55 m).
        for (trace, stop) in traces.iter().zip(&stops) {
            assert_eq!(trace.points.len(), 12);
            for p in &trace.points {
                let d = geodesic_distance((stop.lat, stop.lon), (p.lat.unwrap(), p.lon.unwrap()));
                assert!(d <= stop.buffer_radius_m);
            }
        }
    }

    #[test]
    fn run_stopping_on_entry_is_dropped() {
        let trip = vec![north("P1", 0, -10.0, 2.0), north("P1", 1, -9.0, 1.0)];
        assert!(extract_approach_traces(&[trip], &[stop_at("S", 0.0)], 5.0).is_empty());
    }

    #[test]
    fn deceleration_example() {
        let mph = |ftps: f64| ftps / MPH_TO_FTPS;
        let trace = ApproachTrace {
            participant_id: "P1".into(),
            trip_id: "T1".into(),
            intersection_id: "S".into(),
            points: vec![
                north("P1", 0, 0.0, mph(30.0)),
                north("P1", 2, 0.0, mph(20.0)),
                north("P1", 3, 0.0, mph(20.0)),
            ],
        };
        let events = compute_deceleration(&trace).unwrap();
        assert_eq!(events.len(), 1);
        assert!((events[0].a + 5.0).abs() < 1e-9);
        assert_eq!(events[0].dt, 2.0);
        assert!((events[0].magnitude() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn deceleration_rejects_bad_time() {
        let trace = ApproachTrace {
            participant_id: "P1".into(),
            trip_id: "T1".into(),
            intersection_id: "S".into(),
            points: vec![north("P1", 3, 0.0, 20.0), north("P1", 3, 0.0, 10.0)],
        };
        assert!(compute_deceleration(&trace).is_err());
        let short = ApproachTrace {
            points: vec![north("P1", 3, 0.0, 20.0)],
            ..trace
        };
        assert!(compute_deceleration(&short).is_err());
    }

    #[test]
    fn fill_accel_backward_difference() {
        let mut trip = vec![north("P1", 0, 0.0, 30.0), north("P1", 2, 0.0, 15.0)];
        trip[0].accel_ftps2 = None;
        fill_missing_accel(&mut trip);
        assert_eq!(trip[0].accel_ftps2, None);
        assert!((trip[1].accel_ftps2.unwrap() + 15.0 * MPH_TO_FTPS / 2.0).abs() < 1e-12);
    }

    #[test]
    fn decel_events_roundtrip() {
        let events = vec![DecelEvent {
            participant_id: "P1".into(),
            trip_id: "T1".into(),
            intersection_id: "S,1".into(),
            t_start: 4,
            dt: 1.0,
            v1: 0.1 + 0.2,
            v2: 0.1,
            a: 0.1 - (0.1 + 0.2),
        }];
        let mut buf = Vec::new();
        write_decel_events(&mut buf, &events).unwrap();
        assert_eq!(read_decel_events(buf.as_slice()).unwrap(), events);
    }

    fn coord() -> impl Strategy<Value = (f64, f64)> {
        (-89.0f64..89.0, -179.0f64..179.0)
    }

    proptest! {
        #[test]
        fn distance_symmetric_nonnegative(a in coord(), b in coord()) {
            let d = geodesic_distance(a, b);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, geodesic_distance(b, a));
        }

        #[test]
        fn distance_triangle(a in coord(), b in coord(), c in coord()) {
            let ab = geodesic_distance(a, b);
            let bc = geodesic_distance(b, c);
            let ac = geodesic_distance(a, c);
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-6) + 1e-6);
        }

        #[test]
        fn telescoping_sum(
            speeds in prop::collection::vec(0.0f64..80.0, 2..40),
            gaps in prop::collection::vec(1u32..4, 40),
        ) {
            let mut t = 0;
            let points: Vec<DrivePoint> = speeds.iter().zip(&gaps).map(|(&v, &g)| {
                t += g;
                north("P1", t, 0.0, v)
            }).collect();
            let steps = speed_steps(&points).unwrap();
            let total: f64 = steps.iter().map(|s| s.a * s.dt).sum();
            let expected = (speeds[speeds.len() - 1] - speeds[0]) * MPH_TO_FTPS;
            prop_assert!((total - expected).abs() < 1e-9);
            for s in &steps {
                prop_assert!((s.a * s.dt - (s.v2 - s.v1)).abs() < 1e-9);
            }
        }

        #[test]
        fn extraction_order_independent(offsets in prop::collection::vec(-300.0f64..300.0, 1..6)) {
            let trips: Vec<Vec<DrivePoint>> = offsets.iter().enumerate().map(|(k, &off)| {
                (0..40).map(|t| {
                    let mut p = north(&format!("P{k}"), t, off + 8.0 * t as f64, 20.0);
                    p.trip_id = format!("T{k}");
                    p
                }).collect()
            }).collect();
            let stops = [stop_at("A", 0.0), stop_at("B", 200.0)];
            let forward = extract_approach_traces(&trips, &stops, 5.0);
            let mut rev = trips.clone();
            rev.reverse();
            let backward = extract_approach_traces(&rev, &stops, 5.0);
            prop_assert_eq!(forward.len(), backward.len());
            for t in &forward {
                prop_assert!(backward.contains(t));
                let stop = stops.iter().find(|s| s.intersection_id == t.intersection_id).unwrap();
                for p in &t.points {
                    let d = geodesic_distance((stop.lat, stop.lon), (p.lat.unwrap(), p.lon.unwrap()));
                    prop_assert!(d <= stop.buffer_radius_m);
                }
            }
        }
    }
}
