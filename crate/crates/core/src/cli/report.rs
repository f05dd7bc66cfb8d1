//! Collects stage artifacts from a directory into plot-ready files:
//! `cdf_curves.csv`, `scatter.csv`, `range.csv` and `summary.txt`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::baseline::read_baseline;
use crate::error::{Error, Result};

use super::output::Staged;

/// Artifact files in `dir` named `<prefix><slug>.<ext>`, sorted by name.
fn artifacts(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(slug) = name
            .strip_prefix(prefix)
            .and_then(|rest| rest.strip_suffix(ext))
        {
            found.push((slug.to_string(), entry.path()));
        }
    }
    found.sort();
    Ok(found)
}

/// Non-comment lines of a text artifact.
fn body_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Data rows of a CSV artifact with the header row stripped.
fn csv_rows(path: &Path, expected_header: &str) -> Result<Vec<String>> {
    let mut lines = body_lines(path)?.into_iter();
    match lines.next() {
        Some(h) if h == expected_header => Ok(lines.filter(|l| !l.is_empty()).collect()),
        other => Err(Error::Schema(format!(
            "{}: expected header {expected_header:?}, found {other:?}",
            path.display()
        ))),
    }
}

pub fn emit_report(from: &Path, staged: &mut Staged) -> Result<()> {
    let baselines = artifacts(from, "baseline_", ".txt")?;
    if baselines.is_empty() {
        return Err(Error::invalid(
            "artifacts",
            format!("missing artifact baseline_*.txt in {}", from.display()),
        ));
    }
    let mut curves = Vec::new();
    for (_, path) in &baselines {
        curves.push(read_baseline(fs::File::open(path)?)?);
    }
    staged.add("cdf_curves.csv", |w| {
        writeln!(w, "metric,curve,value,cum_prob")?;
        for c in &curves {
            for (v, p) in c.cdf.cum_probs() {
                writeln!(w, "{},{},{v},{p}", c.metric, c.cohort)?;
            }
        }
        Ok(())
    })?;

    let scatters = artifacts(from, "scatter_", ".csv")?;
    let ranges = artifacts(from, "range_", ".csv")?;
    if !scatters.is_empty() {
        let mut rows = Vec::new();
        for (slug, path) in &scatters {
            for row in csv_rows(path, SCATTER_HEADER)? {
                rows.push(format!("{slug},{row}"));
            }
        }
        staged.add("scatter.csv", |w| {
            writeln!(w, "metric,{SCATTER_HEADER}")?;
            for r in &rows {
                writeln!(w, "{r}")?;
            }
            Ok(())
        })?;
    }
    if !ranges.is_empty() {
        let mut rows = Vec::new();
        for (slug, path) in &ranges {
            for row in csv_rows(path, RANGE_HEADER)? {
                rows.push(format!("{slug},{row}"));
            }
        }
        staged.add("range.csv", |w| {
            writeln!(w, "metric,{RANGE_HEADER}")?;
            for r in &rows {
                writeln!(w, "{r}")?;
            }
            Ok(())
        })?;
    }

    if !scatters.is_empty() && !ranges.is_empty() {
        let mut sections: Vec<(String, Vec<String>)> = Vec::new();
        for (prefix, ext) in [("kstest_", ".txt"), ("accuracy_", ".txt")] {
            for (slug, path) in artifacts(from, prefix, ext)? {
                sections.push((
                    format!("{prefix}{slug}"),
                    body_lines(&path)?,
                ));
            }
        }
        let identifiable: Vec<String> = baselines
            .iter()
            .zip(&curves)
            .map(|((slug, _), c)| {
                format!(
                    "{slug}: n={} segments={} participants={} flagged={} identifiable={}",
                    c.cdf.n(),
                    c.segments.len(),
                    c.participants.len(),
                    c.exclusions.flagged.len(),
                    c.identifiable
                )
            })
            .collect();
        staged.add("summary.txt", |w| {
            writeln!(w, "[baselines]")?;
            for line in &identifiable {
                writeln!(w, "{line}")?;
            }
            for (title, lines) in &sections {
                writeln!(w, "[{title}]")?;
                for l in lines {
                    writeln!(w, "{l}")?;
                }
            }
            Ok(())
        })?;
    }
    Ok(())
}

pub const SCATTER_HEADER: &str = "participant_id,d_young,d_senior,label,true_cohort";
pub const RANGE_HEADER: &str = "lo,hi,objective";
