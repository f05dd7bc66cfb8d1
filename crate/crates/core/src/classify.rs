//! Percentile-range search and the nearest-baseline rule.
//!
//! A participant's distance to a baseline is the mean absolute quantile gap
//! over a percentile range (see [`crate::stats::range_distance`]). Plotting
//! `x = distance to young` against `y = distance to senior`, a participant
//! strictly below `y = x` is labeled senior.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::stats::{ks_statistic, range_distance, EmpiricalCdf, PercentileGrid, QuantileTable};
use crate::telemetry::Cohort;

pub const DEFAULT_MIN_WIDTH: u32 = 10;
pub const DEFAULT_GRID_STEP: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PercentileRange {
    pub lo: u32,
    pub hi: u32,
    /// Mean separation margin at this range.
    pub objective: f64,
}

impl PercentileRange {
    pub fn width(&self) -> u32 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeSearch {
    pub min_width: u32,
    pub step: u32,
}

impl Default for RangeSearch {
    fn default() -> Self {
        RangeSearch {
            min_width: DEFAULT_MIN_WIDTH,
            step: DEFAULT_GRID_STEP,
        }
    }
}

/// Separation objective: mean over participants of
/// `d(P, young) - d(P, senior)` on the range `[lo, hi]`.
pub fn range_objective(
    validation: &[EmpiricalCdf],
    senior: &EmpiricalCdf,
    young: &EmpiricalCdf,
    lo: u32,
    hi: u32,
    step: u32,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::invalid(
            "validation",
            "at least one participant is required",
        ));
    }
    let mut sum = 0.0;
    for p in validation {
        sum += range_distance(p, young, lo, hi, step)? - range_distance(p, senior, lo, hi, step)?;
    }
    Ok(sum / validation.len() as f64)
}

/// Exhaustive search over integer `(lo, hi)` with `1 <= lo < hi <= 99` and
/// `hi - lo >= min_width`, maximizing [`range_objective`]. Ties go to the
/// wider range, then the smaller `lo`.
pub fn optimize_percentile_range(
    validation: &[EmpiricalCdf],
    senior: &EmpiricalCdf,
    young: &EmpiricalCdf,
    search: RangeSearch,
) -> Result<PercentileRange> {
    if validation.is_empty() {
        return Err(Error::invalid(
            "validation",
            "at least one participant is required",
        ));
    }
    if search.step == 0 {
        return Err(Error::invalid("grid_step", "must be at least 1"));
    }
    if search.min_width == 0 || search.min_width > 98 {
        return Err(Error::invalid(
            "min_width",
            format!("{} leaves no feasible range in [1, 99]", search.min_width),
        ));
    }

    let senior_q = QuantileTable::new(senior);
    let young_q = QuantileTable::new(young);
    let tables: Vec<QuantileTable> = validation.iter().map(QuantileTable::new).collect();

    let mut best: Option<PercentileRange> = None;
    for lo in 1..=(99 - search.min_width) {
        for hi in (lo + search.min_width)..=99 {
            let grid = PercentileGrid::new(lo, hi, search.step)?;
            let mut sum = 0.0;
            for t in &tables {
                sum += t.range_distance(&young_q, grid) - t.range_distance(&senior_q, grid);
            }
            let candidate = PercentileRange {
                lo,
                hi,
                objective: sum / tables.len() as f64,
            };
            if best.is_none_or(|b| beats(&candidate, &b)) {
                best = Some(candidate);
            }
        }
    }
    Ok(best.expect("min_width <= 98 leaves at least one cell"))
}

fn beats(a: &PercentileRange, b: &PercentileRange) -> bool {
    if a.objective != b.objective {
        return a.objective > b.objective;
    }
    if a.width() != b.width() {
        return a.width() > b.width();
    }
    a.lo < b.lo
}

/// `(d_senior, d_young)` of one participant over `range`.
pub fn participant_distances(
    participant: &EmpiricalCdf,
    senior: &EmpiricalCdf,
    young: &EmpiricalCdf,
    range: &PercentileRange,
    step: u32,
) -> Result<(f64, f64)> {
    Ok((
        range_distance(participant, senior, range.lo, range.hi, step)?,
        range_distance(participant, young, range.lo, range.hi, step)?,
    ))
}

/// Senior iff strictly closer to the senior baseline. Points on `y = x` are
/// young.
pub fn classify_label(d_senior: f64, d_young: f64) -> Cohort {
    if d_senior < d_young {
        Cohort::Senior
    } else {
        Cohort::Young
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub participant_id: String,
    pub d_young: f64,
    pub d_senior: f64,
    pub label: Cohort,
    pub true_cohort: Cohort,
}

impl ClassificationResult {
    pub fn is_correct(&self) -> bool {
        self.label == self.true_cohort
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub n_total: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub results: Vec<ClassificationResult>,
    pub range: PercentileRange,
}

impl AccuracyReport {
    pub fn from_results(
        results: Vec<ClassificationResult>,
        range: PercentileRange,
    ) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::invalid(
                "test set",
                "at least one participant is required",
            ));
        }
        let n_total = results.len();
        let n_correct = results.iter().filter(|r| r.is_correct()).count();
        Ok(AccuracyReport {
            n_total,
            n_correct,
            accuracy: accuracy(n_correct, n_total),
            results,
            range,
        })
    }
}

pub fn accuracy(n_correct: usize, n_total: usize) -> f64 {
    n_correct as f64 / n_total as f64
}

/// A held-out participant with a known cohort.
#[derive(Debug, Clone)]
pub struct LabeledCdf {
    pub participant_id: String,
    pub cdf: EmpiricalCdf,
    pub true_cohort: Cohort,
}

pub fn evaluate_accuracy(
    test: &[LabeledCdf],
    senior: &EmpiricalCdf,
    young: &EmpiricalCdf,
    range: &PercentileRange,
    step: u32,
) -> Result<AccuracyReport> {
    let results = test
        .iter()
        .map(|p| {
            let (d_senior, d_young) = participant_distances(&p.cdf, senior, young, range, step)?;
            Ok(ClassificationResult {
                participant_id: p.participant_id.clone(),
                d_young,
                d_senior,
                label: classify_label(d_senior, d_young),
                true_cohort: p.true_cohort,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AccuracyReport::from_results(results, *range)
}

/// Participant ids kept, and excluded ids with their KS distance.
pub type Screened = (Vec<String>, Vec<(String, f64)>);

/// Splits validation participants into those within `tau` KS distance of the
/// senior baseline and those beyond it. Returns `(kept, excluded)` ids with
/// the excluded distances.
pub fn screen_validation(
    validation: &BTreeMap<String, EmpiricalCdf>,
    senior: &EmpiricalCdf,
    tau: f64,
) -> Result<Screened> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid("tau", format!("{tau} is outside (0, 1]")));
    }
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (id, cdf) in validation {
        let d = ks_statistic(cdf, senior);
        if d > tau {
            excluded.push((id.clone(), d));
        } else {
            kept.push(id.clone());
        }
    }
    Ok((kept, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cdf(xs: &[f64]) -> EmpiricalCdf {
        EmpiricalCdf::from_samples(xs).unwrap()
    }

    fn ramp(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn labels() {
        assert_eq!(classify_label(0.2, 0.5), Cohort::Senior);
        assert_eq!(classify_label(0.5, 0.2), Cohort::Young);
        assert_eq!(classify_label(0.3, 0.3), Cohort::Young);
    }

    #[test]
    fn equal_baselines_pick_widest_range() {
        let base = cdf(&ramp(40, 60.0, 80.0));
        let validation = vec![cdf(&ramp(25, 55.0, 85.0))];
        let r =
            optimize_percentile_range(&validation, &base, &base, RangeSearch::default()).unwrap();
        assert_eq!((r.lo, r.hi), (1, 99));
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn optimizer_is_exhaustive_argmax() {
        let senior = cdf(&[60.0, 62.0, 65.0, 70.0, 71.0, 72.0, 74.0, 75.0, 79.0]);
        let young = cdf(&[61.0, 66.0, 70.0, 73.0, 77.0, 80.0, 84.0]);
        let validation = vec![
            cdf(&[59.0, 63.0, 70.0, 74.0, 76.0]),
            cdf(&[61.0, 64.0, 69.0, 72.0, 73.0, 78.0]),
        ];
        let search = RangeSearch {
            min_width: 5,
            step: 2,
        };
        let best = optimize_percentile_range(&validation, &senior, &young, search).unwrap();
        for lo in 1..=94u32 {
            for hi in lo + 5..=99 {
                let j = range_objective(&validation, &senior, &young, lo, hi, 2).unwrap();
                assert!(best.objective >= j, "({lo},{hi}) beats the optimum");
            }
        }
        let direct = range_objective(&validation, &senior, &young, best.lo, best.hi, 2).unwrap();
        assert_eq!(best.objective.to_bits(), direct.to_bits());
    }

    #[test]
    fn optimizer_validates() {
        let a = cdf(&[1.0]);
        assert!(optimize_percentile_range(&[], &a, &a, RangeSearch::default()).is_err());
        let v = vec![a.clone()];
        assert!(optimize_percentile_range(
            &v,
            &a,
            &a,
            RangeSearch {
                min_width: 99,
                step: 1
            }
        )
        .is_err());
        assert!(optimize_percentile_range(
            &v,
            &a,
            &a,
            RangeSearch {
                min_width: 10,
                step: 0
            }
        )
        .is_err());
        let r = optimize_percentile_range(
            &v,
            &a,
            &a,
            RangeSearch {
                min_width: 98,
                step: 1,
            },
        )
        .unwrap();
        assert_eq!((r.lo, r.hi), (1, 99));
    }

    #[test]
    fn distance_identities() {
        let senior = cdf(&ramp(30, 60.0, 75.0));
        let young = cdf(&ramp(30, 65.0, 85.0));
        let range = PercentileRange {
            lo: 20,
            hi: 90,
            objective: 0.0,
        };
        let (ds, _) = participant_distances(&senior, &senior, &young, &range, 1).unwrap();
        assert_eq!(ds, 0.0);
        let (_, dy) = participant_distances(&young, &senior, &young, &range, 1).unwrap();
        assert_eq!(dy, 0.0);
    }

    #[test]
    fn accuracy_fractions() {
        assert!((accuracy(14, 18) - 0.778).abs() < 1e-3);
        assert!((accuracy(8, 18) - 0.444).abs() < 1e-3);
        assert!((accuracy(5, 12) - 0.4166).abs() < 1e-3);
    }

    #[test]
    fn evaluate_counts() {
        let senior = cdf(&ramp(30, 60.0, 75.0));
        let young = cdf(&ramp(30, 70.0, 85.0));
        let range = PercentileRange {
            lo: 10,
            hi: 90,
            objective: 0.0,
        };
        let test = vec![
            LabeledCdf {
                participant_id: "a".into(),
                cdf: senior.clone(),
                true_cohort: Cohort::Senior,
            },
            LabeledCdf {
                participant_id: "b".into(),
                cdf: young.clone(),
                true_cohort: Cohort::Young,
            },
            LabeledCdf {
                participant_id: "c".into(),
                cdf: young.clone(),
                true_cohort: Cohort::Senior,
            },
        ];
        let report = evaluate_accuracy(&test, &senior, &young, &range, 1).unwrap();
        assert_eq!(report.n_total, 3);
        assert_eq!(report.n_correct, 2);
        assert_eq!(report.accuracy, 2.0 / 3.0);
        assert_eq!(report.results[2].label, Cohort::Young);
        assert!(evaluate_accuracy(&[], &senior, &young, &range, 1).is_err());
    }

    #[test]
    fn screening() {
        let senior = cdf(&ramp(30, 60.0, 75.0));
        let mut validation = BTreeMap::new();
        validation.insert("near".to_string(), cdf(&ramp(20, 60.5, 75.5)));
        validation.insert("far".to_string(), cdf(&ramp(20, 90.0, 95.0)));
        let (kept, excluded) = screen_validation(&validation, &senior, 0.25).unwrap();
        assert_eq!(kept, ["near"]);
        assert_eq!(excluded, [("far".to_string(), 1.0)]);
        assert!(screen_validation(&validation, &senior, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn label_scale_invariant(ds in 0.0f64..100.0, dy in 0.0f64..100.0, c in 0.001f64..1000.0) {
            prop_assert_eq!(classify_label(ds, dy), classify_label(ds * c, dy * c));
        }

        #[test]
        fn shift_bound(xs in prop::collection::vec(0.0f64..50.0, 2..30), c in 0.0f64..20.0, lo in 1u32..50, w in 1u32..49) {
            let senior = cdf(&ramp(25, 10.0, 30.0));
            let young = cdf(&ramp(25, 20.0, 45.0));
            let p = cdf(&xs);
            let shifted = cdf(&xs.iter().map(|v| v + c).collect::<Vec<_>>());
            let range = PercentileRange { lo, hi: lo + w, objective: 0.0 };
            let (s0, y0) = participant_distances(&p, &senior, &young, &range, 1).unwrap();
            let (s1, y1) = participant_distances(&shifted, &senior, &young, &range, 1).unwrap();
            prop_assert!(s1 - s0 <= c + 1e-9);
            prop_assert!(y1 - y0 <= c + 1e-9);
        }

        #[test]
        fn accuracy_permutation_invariant(labels in prop::collection::vec(any::<(bool, bool)>(), 1..30), rot in 0usize..30) {
            let range = PercentileRange { lo: 1, hi: 99, objective: 0.0 };
            let results: Vec<ClassificationResult> = labels.iter().enumerate().map(|(i, &(l, t))| ClassificationResult {
                participant_id: i.to_string(),
                d_young: 1.0,
                d_senior: if l { 0.5 } else { 2.0 },
                label: if l { Cohort::Senior } else { Cohort::Young },
                true_cohort: if t { Cohort::Senior } else { Cohort::Young },
            }).collect();
            let mut rotated = results.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let a = AccuracyReport::from_results(results, range).unwrap();
            let b = AccuracyReport::from_results(rotated, range).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.accuracy, a.n_correct as f64 / a.n_total as f64);
        }
    }
}
