//! Record CSV: one row per date × station × hour.
//!
//! ```text
//! date_idx,station_id,hour_idx,role,f1,...,fN,t1,...,tM
//! ```
//!
//! `hour_idx` runs over `0..history_len + horizon`; the first `history_len`
//! hours carry `role = obs` with the observed features in `f1..`, the rest
//! carry `role = fcst` with NWP features in `f1..` and targets in `t1..`.
//! `N = max(n_obs, n_nwp)`; cells beyond a role's width are left empty, as are
//! the target cells of `obs` rows. An empty cell means missing.
//! Hours absent from the file are treated as missing.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use super::records::{is_missing, Channel, RecordSchema, StationRecords};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

const FIXED: [&str; 4] = ["date_idx", "station_id", "hour_idx", "role"];

struct Row {
    line: u64,
    date: usize,
    station: usize,
    hour: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

fn malformed(line: u64, message: impl Into<String>) -> Error {
    Error::Malformed {
        line,
        message: message.into(),
    }
}

fn parse_cell(line: u64, column: &str, raw: &str) -> Result<f64> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(f64::NAN);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| malformed(line, format!("column {column}: cannot parse `{raw}` as a number")))?;
    if !v.is_finite() {
        return Err(malformed(line, format!("column {column}: non-finite value `{raw}`")));
    }
    Ok(v)
}

fn parse_index(line: u64, column: &str, raw: &str) -> Result<usize> {
    raw.trim()
        .parse()
        .map_err(|_| malformed(line, format!("column {column}: `{raw}` is not a non-negative integer")))
}

pub fn load_records(path: impl AsRef<Path>, schema: &RecordSchema) -> Result<StationRecords> {
    let path = path.as_ref();
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let width = schema.n_obs.max(schema.n_nwp);
    let expected: Vec<String> = FIXED
        .iter()
        .map(|s| s.to_string())
        .chain((1..=width).map(|k| format!("f{k}")))
        .chain((1..=schema.n_targets).map(|k| format!("t{k}")))
        .collect();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(malformed(
            1,
            format!("header {got:?} does not match schema {expected:?}"),
        ));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(malformed(
                line,
                format!("expected {} fields, found {}", expected.len(), record.len()),
            ));
        }
        let date = parse_index(line, "date_idx", &record[0])?;
        let station = parse_index(line, "station_id", &record[1])?;
        let hour = parse_index(line, "hour_idx", &record[2])?;
        if station >= schema.stations {
            return Err(Error::UnknownStation {
                line,
                station,
                stations: schema.stations,
            });
        }
        let total_hours = schema.history_len + schema.horizon;
        if hour >= total_hours {
            return Err(malformed(line, format!("hour_idx {hour} outside 0..{total_hours}")));
        }
        let role = record[3].trim();
        let (expected_role, used) = if hour < schema.history_len {
            ("obs", schema.n_obs)
        } else {
            ("fcst", schema.n_nwp)
        };
        if role != expected_role {
            return Err(malformed(
                line,
                format!("role `{role}` at hour {hour}; expected `{expected_role}`"),
            ));
        }
        let mut features = Vec::with_capacity(used);
        for k in 0..width {
            let v = parse_cell(line, &expected[4 + k], &record[4 + k])?;
            if k < used {
                features.push(v);
            } else if !is_missing(v) {
                return Err(malformed(
                    line,
                    format!("column f{} must be empty for role {role}", k + 1),
                ));
            }
        }
        let mut targets = Vec::with_capacity(schema.n_targets);
        for k in 0..schema.n_targets {
            let v = parse_cell(line, &expected[4 + width + k], &record[4 + width + k])?;
            if role == "obs" && !is_missing(v) {
                return Err(malformed(line, "target cells must be empty on obs rows"));
            }
            targets.push(v);
        }
        rows.push(Row {
            line,
            date,
            station,
            hour,
            features,
            targets,
        });
    }

    let date_ids: Vec<usize> = rows
        .iter()
        .map(|r| r.date)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let position = |id: usize| date_ids.binary_search(&id).expect("date collected above");
    let mut out = StationRecords::empty_grid(schema.clone(), date_ids.clone());
    let mut seen = HashSet::new();
    for row in rows {
        if !seen.insert((row.date, row.station, row.hour)) {
            return Err(malformed(
                row.line,
                format!(
                    "duplicate row for date {} station {} hour {}",
                    row.date, row.station, row.hour
                ),
            ));
        }
        let d = position(row.date);
        if row.hour < schema.history_len {
            out.row_mut(Channel::Obs, d, row.station, row.hour)
                .copy_from_slice(&row.features);
        } else {
            let step = row.hour - schema.history_len;
            out.row_mut(Channel::Nwp, d, row.station, step)
                .copy_from_slice(&row.features);
            out.row_mut(Channel::Target, d, row.station, step)
                .copy_from_slice(&row.targets);
        }
    }
    Ok(out)
}

pub fn save_records(path: impl AsRef<Path>, r: &StationRecords) -> Result<()> {
    let path = path.as_ref();
    let s = r.schema();
    let width = s.n_obs.max(s.n_nwp);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = FIXED
        .iter()
        .map(|s| s.to_string())
        .chain((1..=width).map(|k| format!("f{k}")))
        .chain((1..=s.n_targets).map(|k| format!("t{k}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_error(path, e))?;

    let cell = |v: f64| if is_missing(v) { String::new() } else { v.to_string() };
    let mut fields: Vec<String> = Vec::with_capacity(header.len());
    for d in 0..r.dates() {
        for st in 0..s.stations {
            for hour in 0..s.history_len + s.horizon {
                fields.clear();
                fields.push(r.date_ids()[d].to_string());
                fields.push(st.to_string());
                fields.push(hour.to_string());
                let (role, feats, targets): (&str, &[f64], Option<&[f64]>) = if hour < s.history_len {
                    ("obs", r.row(Channel::Obs, d, st, hour), None)
                } else {
                    let step = hour - s.history_len;
                    (
                        "fcst",
                        r.row(Channel::Nwp, d, st, step),
                        Some(r.row(Channel::Target, d, st, step)),
                    )
                };
                fields.push(role.to_string());
                for k in 0..width {
                    fields.push(feats.get(k).map_or(String::new(), |&v| cell(v)));
                }
                for k in 0..s.n_targets {
                    fields.push(targets.map_or(String::new(), |t| cell(t[k])));
                }
                w.write_record(&fields).map_err(|e| csv_error(path, e))?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed {
            line,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> RecordSchema {
        RecordSchema {
            stations: 2,
            history_len: 2,
            horizon: 1,
            n_obs: 2,
            n_nwp: 1,
            n_targets: 1,
        }
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn grid(missing_target: bool) -> String {
        let mut s = String::from("date_idx,station_id,hour_idx,role,f1,f2,t1\n");
        for d in 0..2 {
            for st in 0..2 {
                s += &format!("{d},{st},0,obs,1.5,2,\n{d},{st},1,obs,1,2.25,\n");
                let t = if missing_target && d == 1 && st == 0 {
                    String::new()
                } else {
                    "7".into()
                };
                s += &format!("{d},{st},2,fcst,0.5,,{t}\n");
            }
        }
        s
    }

    #[test]
    fn full_grid_loads_with_expected_shape() {
        let f = write(&grid(false));
        let r = load_records(f.path(), &schema()).unwrap();
        assert_eq!(r.dates(), 2);
        assert_eq!(r.schema().stations, 2);
        assert_eq!(r.missing_count(), 0);
        assert_eq!(r.row(Channel::Obs, 1, 1, 1), &[1.0, 2.25]);
    }

    #[test]
    fn empty_target_cell_is_missing() {
        let f = write(&grid(true));
        let r = load_records(f.path(), &schema()).unwrap();
        assert!(is_missing(r.get(Channel::Target, 1, 0, 0, 0)));
        assert_eq!(r.missing_count(), 1);
    }

    #[test]
    fn malformed_row_reports_line() {
        let mut s = grid(false);
        s = s.replacen("0,1,0,obs,1.5,2,", "0,1,0,obs,abc,2,", 1);
        let f = write(&s);
        match load_records(f.path(), &schema()) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_station_rejected() {
        let s = grid(false) + "0,5,0,obs,1,1,\n";
        let f = write(&s);
        assert!(matches!(
            load_records(f.path(), &schema()),
            Err(Error::UnknownStation { station: 5, .. })
        ));
    }

    #[test]
    fn role_mismatch_rejected() {
        let s = grid(false).replacen("0,0,2,fcst", "0,0,2,obs", 1);
        let f = write(&s);
        assert!(matches!(
            load_records(f.path(), &schema()),
            Err(Error::Malformed { .. })
        ));
    }
}
