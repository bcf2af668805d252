//! Event-history files.
//!
//! A cohort is stored as two CSV files. The event file has header
//! `id,time,module,mark,delta` preceded by `#` metadata lines
//! (`scenario_digest`, `seed`, `regime`, `ids`); the baseline file, at
//! [`baseline_path`], has header `id,variable,value`. Times are written with
//! 17 significant digits so reading reproduces them bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{validate_path_against, Cohort, Event, Path, Regime};
use crate::scenario::ScenarioSpec;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

/// Location of the baseline file belonging to an event file.
pub fn baseline_path(events: &FsPath) -> PathBuf {
    let stem = events
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    events.with_file_name(format!("{stem}.baseline.csv"))
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    id: u64,
    time: String,
    module: String,
    mark: u32,
    delta: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BaselineRow {
    id: u64,
    variable: String,
    value: i64,
}

/// Formats a time with 17 significant digits.
pub fn format_time(t: f64) -> String {
    format!("{t:.16e}")
}

fn format_ids(ids: &[u64]) -> String {
    let mut parts = Vec::new();
    let mut k = 0;
    while k < ids.len() {
        let start = ids[k];
        let mut end = start;
        while k + 1 < ids.len() && ids[k + 1] == end + 1 {
            k += 1;
            end = ids[k];
        }
        parts.push(if start == end {
            start.to_string()
        } else {
            format!("{start}-{end}")
        });
        k += 1;
    }
    parts.join(",")
}

fn parse_ids(s: &str) -> Option<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
                out.extend(a..=b);
            }
            None => out.push(part.trim().parse().ok()?),
        }
    }
    Some(out)
}

fn csv_err(path: &FsPath) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn file_err(path: &FsPath) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes the event file to a string.
pub fn events_to_string(cohort: &Cohort) -> Result<String, IoError> {
    let mut out = String::new();
    out.push_str(&format!("# scenario_digest={}\n", cohort.scenario_digest));
    out.push_str(&format!("# seed={}\n", cohort.seed));
    out.push_str(&format!("# regime={}\n", cohort.regime));
    let ids: Vec<u64> = cohort.paths.iter().map(|p| p.id).collect();
    out.push_str(&format!("# ids={}\n", format_ids(&ids)));
    let mut w = csv::Writer::from_writer(Vec::new());
    let here = FsPath::new("<events>");
    if cohort.paths.iter().all(|p| p.events.is_empty()) {
        w.write_record(["id", "time", "module", "mark", "delta"])
            .map_err(csv_err(here))?;
    }
    for p in &cohort.paths {
        for e in &p.events {
            w.serialize(EventRow {
                id: p.id,
                time: format_time(e.time),
                module: cohort.alphabet.modules[e.module].name.clone(),
                mark: e.mark,
                delta: e.delta,
            })
            .map_err(csv_err(here))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| IoError::Format {
        path: here.display().to_string(),
        msg: e.to_string(),
    })?;
    out.push_str(&String::from_utf8(bytes).expect("utf-8 csv"));
    Ok(out)
}

pub fn baseline_to_string(cohort: &Cohort) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let here = FsPath::new("<baseline>");
    w.write_record(["id", "variable", "value"]).map_err(csv_err(here))?;
    for p in &cohort.paths {
        for (k, name) in cohort.alphabet.baseline.iter().enumerate() {
            w.write_record([p.id.to_string(), name.clone(), p.baseline[k].to_string()])
                .map_err(csv_err(here))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| IoError::Format {
        path: here.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

/// Writes the event file at `path` and the baseline file next to it.
pub fn write_cohort(cohort: &Cohort, path: &FsPath) -> Result<(), IoError> {
    fs::write(path, events_to_string(cohort)?).map_err(file_err(path))?;
    let bpath = baseline_path(path);
    fs::write(&bpath, baseline_to_string(cohort)?).map_err(file_err(&bpath))?;
    Ok(())
}

/// Reads a cohort written by [`write_cohort`] and validates every path
/// against the scenario.
pub fn read_cohort(path: &FsPath, scenario: &ScenarioSpec) -> Result<Cohort, IoError> {
    let events_text = fs::read_to_string(path).map_err(file_err(path))?;
    let bpath = baseline_path(path);
    let baseline_text = fs::read_to_string(&bpath).map_err(file_err(&bpath))?;
    cohort_from_strings(&events_text, &baseline_text, scenario, path)
}

pub fn cohort_from_strings(
    events_text: &str,
    baseline_text: &str,
    scenario: &ScenarioSpec,
    origin: &FsPath,
) -> Result<Cohort, IoError> {
    let fmt = |msg: String| IoError::Format {
        path: origin.display().to_string(),
        msg,
    };
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    for line in events_text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| fmt(format!("missing `# {k}=` line")))
    };
    let scenario_digest = get("scenario_digest")?;
    if scenario_digest != scenario.digest() {
        log::warn!("{}: cohort was generated by a different scenario", origin.display());
    }
    let seed: u64 = get("seed")?.parse().map_err(|_| fmt("invalid seed".into()))?;
    let regime_text = get("regime")?;
    let regime = match regime_text.split_once(':') {
        None if regime_text == "factual" => Regime::Factual,
        Some(("counterfactual", d)) => Regime::Counterfactual {
            intervention_digest: d.to_string(),
        },
        _ => return Err(fmt(format!("invalid regime `{regime_text}`"))),
    };
    let ids = parse_ids(&get("ids")?).ok_or_else(|| fmt("invalid ids line".into()))?;
    let alphabet = scenario.alphabet().clone();
    let position: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    if position.len() != ids.len() {
        return Err(fmt("duplicate ids".into()));
    }

    let nb = alphabet.baseline.len();
    let mut baselines: Vec<Vec<Option<i64>>> = vec![vec![None; nb]; ids.len()];
    let mut rdr = csv::ReaderBuilder::new().from_reader(baseline_text.as_bytes());
    for row in rdr.deserialize::<BaselineRow>() {
        let row = row.map_err(csv_err(origin))?;
        let k = *position
            .get(&row.id)
            .ok_or_else(|| fmt(format!("baseline row for unknown id {}", row.id)))?;
        let v = alphabet
            .baseline_index(&row.variable)
            .ok_or_else(|| fmt(format!("unknown baseline variable `{}`", row.variable)))?;
        baselines[k][v] = Some(row.value);
    }

    let mut events: Vec<Vec<Event>> = vec![Vec::new(); ids.len()];
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(events_text.as_bytes());
    for row in rdr.deserialize::<EventRow>() {
        let row = row.map_err(csv_err(origin))?;
        let k = *position
            .get(&row.id)
            .ok_or_else(|| fmt(format!("event for unknown id {}", row.id)))?;
        let module = alphabet
            .module_index(&row.module)
            .ok_or_else(|| fmt(format!("unknown module `{}`", row.module)))?;
        let time: f64 = row
            .time
            .parse()
            .map_err(|_| fmt(format!("invalid time `{}`", row.time)))?;
        events[k].push(Event {
            time,
            module,
            mark: row.mark,
            delta: row.delta,
        });
    }

    let mut paths = Vec::with_capacity(ids.len());
    for ((id, base), ev) in ids.iter().zip(baselines).zip(events) {
        let base = base
            .into_iter()
            .enumerate()
            .map(|(v, x)| x.ok_or_else(|| fmt(format!("id {id}: missing `{}`", alphabet.baseline[v]))))
            .collect::<Result<Vec<_>, _>>()?;
        let path = Path::new_unchecked(*id, alphabet.clone(), base, ev);
        if let Some(v) = validate_path_against(&path, &alphabet).first() {
            return Err(fmt(format!("id {id}: {v}")));
        }
        paths.push(path);
    }
    Ok(Cohort {
        alphabet,
        paths,
        scenario_digest,
        seed,
        regime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_ranges_round_trip() {
        let ids = vec![0, 1, 2, 3, 7, 9, 10];
        let s = format_ids(&ids);
        assert_eq!(s, "0-3,7,9-10");
        assert_eq!(parse_ids(&s).unwrap(), ids);
        assert_eq!(parse_ids("").unwrap(), Vec::<u64>::new());
    }

    #[test]
    fn times_round_trip_exactly() {
        for t in [0.1, 1.0 / 3.0, 0.7000000000000001, 1e-300, 0.9999999999999999] {
            assert_eq!(format_time(t).parse::<f64>().unwrap(), t);
        }
    }

    #[test]
    fn baseline_path_replaces_extension() {
        assert_eq!(
            baseline_path(FsPath::new("/x/c.csv")),
            PathBuf::from("/x/c.baseline.csv")
        );
        assert_eq!(baseline_path(FsPath::new("c")), PathBuf::from("c.baseline.csv"));
    }
}
