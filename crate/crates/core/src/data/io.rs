use std::collections::BTreeSet;
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{TrafficSeries, TravelTimeSeries};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graphops::TravelTimeMatrix;
use crate::scalar::Scalar;

/// Longest run of absent slots that is filled instead of rejected.
pub const MAX_GAP_SLOTS: i64 = 3;
const UNREACHABLE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub nodes: usize,
    pub channels: usize,
    pub slot_minutes: u32,
}

/// What had to be filled while loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub steps: usize,
    /// Grid steps with no rows in either file.
    pub inserted_steps: usize,
    pub missing_volume_cells: usize,
    pub volume_missing_fraction: f64,
    /// Missing fraction per `(channel, node)`, channel-major.
    pub per_cell_missing_fraction: Vec<f64>,
    pub missing_travel_entries: usize,
    pub travel_missing_fraction: f64,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let got: Vec<String> = rd
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_ascii_lowercase)
        .collect();
    if got != header {
        return Err(parse_err(path, 1, format!("expected header {}, got {}", header.join(","), got.join(","))));
    }
    Ok(rd)
}

fn records(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut rd = open(path, header)?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(path, line, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn parse_time(path: &Path, line: u64, s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| parse_err(path, line, format!("bad RFC 3339 timestamp '{s}': {e}")))
}

fn parse_index(path: &Path, line: u64, s: &str, what: &str, bound: usize) -> Result<usize> {
    let v: usize = s
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} '{s}'")))?;
    if v >= bound {
        return Err(parse_err(path, line, format!("{what} {v} out of range (< {bound})")));
    }
    Ok(v)
}

struct VolumeRow {
    time: DateTime<Utc>,
    cell: usize,
    value: f64,
}

struct TravelRow {
    time: DateTime<Utc>,
    pair: usize,
    seconds: Option<f64>,
}

/// Sorted, gap-checked time grid over every timestamp seen.
fn time_grid(stamps: &BTreeSet<DateTime<Utc>>, slot_minutes: u32) -> Result<Vec<DateTime<Utc>>> {
    let slot = Duration::minutes(i64::from(slot_minutes));
    let mut grid = Vec::new();
    let mut prev: Option<DateTime<Utc>> = None;
    for &t in stamps {
        if let Some(p) = prev {
            let d = t - p;
            if d.num_seconds() % slot.num_seconds() != 0 {
                return Err(Error::Data(format!("timestamp {t} is off the {slot_minutes}-minute grid")));
            }
            let missing = d.num_seconds() / slot.num_seconds() - 1;
            if missing > MAX_GAP_SLOTS {
                return Err(Error::Data(format!(
                    "gap of {missing} slots between {p} and {t} exceeds {MAX_GAP_SLOTS}"
                )));
            }
            for k in 1..=missing {
                grid.push(p + slot * k as i32);
            }
        }
        grid.push(t);
        prev = Some(t);
    }
    Ok(grid)
}

/// Fills each column forward; leading holes take the first observation.
fn fill_locf(cells: &mut [Vec<Option<f64>>]) {
    for col in cells.iter_mut() {
        let Some(first) = col.iter().flatten().next().copied() else {
            continue;
        };
        let mut last = first;
        for v in col.iter_mut() {
            match v {
                Some(x) => last = *x,
                None => *v = Some(last),
            }
        }
    }
}

/// Reads a volume file and a travel-time file onto one uniform time grid.
pub fn load_series<S: Scalar>(
    volume_path: &Path,
    travel_path: &Path,
    schema: &DatasetSchema,
) -> Result<(TrafficSeries<S>, TravelTimeSeries<S>, LoadReport)> {
    let (n, c) = (schema.nodes, schema.channels);
    if n == 0 || c == 0 {
        return Err(Error::Config("schema needs nodes >= 1 and channels >= 1".into()));
    }
    let mut vols = Vec::new();
    for (line, r) in records(volume_path, &["timestamp", "node_id", "channel", "value"])? {
        let time = parse_time(volume_path, line, &r[0])?;
        let node = parse_index(volume_path, line, &r[1], "node_id", n)?;
        let ch = parse_index(volume_path, line, &r[2], "channel", c)?;
        let value: f64 = r[3]
            .parse()
            .map_err(|_| parse_err(volume_path, line, format!("bad value '{}'", &r[3])))?;
        if !value.is_finite() {
            return Err(parse_err(volume_path, line, format!("non-finite volume {value}")));
        }
        if value < 0.0 {
            return Err(parse_err(volume_path, line, format!("negative volume {value}")));
        }
        vols.push(VolumeRow {
            time,
            cell: ch * n + node,
            value,
        });
    }
    let mut trav = Vec::new();
    for (line, r) in records(travel_path, &["timestamp", "from_node", "to_node", "seconds"])? {
        let time = parse_time(travel_path, line, &r[0])?;
        let i = parse_index(travel_path, line, &r[1], "from_node", n)?;
        let j = parse_index(travel_path, line, &r[2], "to_node", n)?;
        let s = &r[3];
        let seconds = if s.is_empty() || s.eq_ignore_ascii_case("inf") {
            None
        } else {
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(travel_path, line, format!("bad travel time '{s}'")))?;
            if v.is_nan() || v < 0.0 {
                return Err(parse_err(travel_path, line, format!("invalid travel time {v}")));
            }
            v.is_finite().then_some(v)
        };
        trav.push(TravelRow {
            time,
            pair: i * n + j,
            seconds,
        });
    }
    if vols.is_empty() {
        return Err(Error::Data(format!("{} has no rows", volume_path.display())));
    }
    vols.sort_by_key(|r| r.time);
    trav.sort_by_key(|r| r.time);

    let stamps: BTreeSet<_> = vols.iter().map(|r| r.time).chain(trav.iter().map(|r| r.time)).collect();
    let grid = time_grid(&stamps, schema.slot_minutes)?;
    let steps = grid.len();
    let index = |t: &DateTime<Utc>| grid.binary_search(t).expect("timestamp on grid");

    let mut vcells = vec![vec![None; steps]; c * n];
    for r in &vols {
        vcells[r.cell][index(&r.time)] = Some(r.value);
    }
    let mut tcells = vec![vec![None; steps]; n * n];
    let mut tseen = vec![vec![false; steps]; n * n];
    for r in &trav {
        let k = index(&r.time);
        tcells[r.pair][k] = r.seconds;
        tseen[r.pair][k] = true;
    }

    let volume_present: BTreeSet<usize> = vols.iter().map(|r| index(&r.time)).collect();
    let travel_present: BTreeSet<usize> = trav.iter().map(|r| index(&r.time)).collect();
    let inserted_steps = (0..steps)
        .filter(|k| !volume_present.contains(k) && !travel_present.contains(k))
        .count();
    let per_cell: Vec<usize> = vcells.iter().map(|col| col.iter().filter(|v| v.is_none()).count()).collect();
    if let Some(cell) = per_cell.iter().position(|&m| m == steps) {
        return Err(Error::Data(format!(
            "channel {} node {} has no observations",
            cell / n,
            cell % n
        )));
    }
    let missing_volume_cells: usize = per_cell.iter().sum();
    let missing_travel_entries = (0..n * n)
        .filter(|p| p / n != p % n)
        .map(|p| tseen[p].iter().filter(|s| !**s).count())
        .sum();
    fill_locf(&mut vcells);
    // carry observed travel times forward; a pair never observed stays unreachable
    for (p, col) in tcells.iter_mut().enumerate() {
        let mut last = None;
        for (k, v) in col.iter_mut().enumerate() {
            if tseen[p][k] {
                last = *v;
            } else {
                *v = last;
            }
        }
    }

    let mut vdata = vec![S::zero(); steps * c * n];
    for (cell, col) in vcells.iter().enumerate() {
        for (k, v) in col.iter().enumerate() {
            vdata[k * c * n + cell] = S::lit(v.expect("filled"));
        }
    }
    let traffic = TrafficSeries::new(Tensor::new(vec![steps, c, n], vdata)?, grid, schema.slot_minutes)?;
    let mut mats = Vec::with_capacity(steps);
    for k in 0..steps {
        let raw: Vec<Option<S>> = (0..n * n).map(|p| tcells[p][k].map(S::lit)).collect();
        mats.push(TravelTimeMatrix::with_unreachable(
            n,
            &raw,
            S::lit(UNREACHABLE_FACTOR),
            S::lit(1.0),
        )?);
    }
    let travel = TravelTimeSeries::new(mats)?;
    let cells = (steps * c * n) as f64;
    let pairs = (steps * n * (n - 1)).max(1) as f64;
    let report = LoadReport {
        steps,
        inserted_steps,
        missing_volume_cells,
        volume_missing_fraction: missing_volume_cells as f64 / cells,
        per_cell_missing_fraction: per_cell.iter().map(|&m| m as f64 / steps as f64).collect(),
        missing_travel_entries,
        travel_missing_fraction: missing_travel_entries as f64 / pairs,
    };
    Ok((traffic, travel, report))
}

fn stamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_volume_csv<S: Scalar>(path: &Path, series: &TrafficSeries<S>) -> Result<()> {
    let mut w = writer(path)?;
    let e = |err| csv_err(path, err);
    w.write_record(["timestamp", "node_id", "channel", "value"]).map_err(e)?;
    for t in 0..series.steps() {
        let ts = stamp(&series.timestamps()[t]);
        for n in 0..series.nodes() {
            for c in 0..series.channels() {
                let v = series.value(t, c, n);
                w.write_record([ts.as_str(), &n.to_string(), &c.to_string(), &v.to_string()])
                    .map_err(e)?;
            }
        }
    }
    w.flush().map_err(|err| Error::io(path, err))
}

pub fn write_travel_csv<S: Scalar>(path: &Path, timestamps: &[DateTime<Utc>], series: &TravelTimeSeries<S>) -> Result<()> {
    if timestamps.len() != series.steps() {
        return Err(Error::Data(format!(
            "{} timestamps for {} travel-time steps",
            timestamps.len(),
            series.steps()
        )));
    }
    let mut w = writer(path)?;
    let e = |err| csv_err(path, err);
    w.write_record(["timestamp", "from_node", "to_node", "seconds"]).map_err(e)?;
    let n = series.nodes();
    for (t, ts) in timestamps.iter().enumerate() {
        let ts = stamp(ts);
        let m = series.matrix(t);
        for i in 0..n {
            for j in 0..n {
                w.write_record([ts.as_str(), &i.to_string(), &j.to_string(), &m.get(i, j).to_string()])
                    .map_err(e)?;
            }
        }
    }
    w.flush().map_err(|err| Error::io(path, err))
}

pub fn write_regime_labels(path: &Path, timestamps: &[DateTime<Utc>], labels: &[u8]) -> Result<()> {
    let mut w = writer(path)?;
    let e = |err| csv_err(path, err);
    w.write_record(["timestamp", "regime"]).map_err(e)?;
    for (ts, l) in timestamps.iter().zip(labels) {
        w.write_record([stamp(ts), l.to_string()]).map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    const SCHEMA: DatasetSchema = DatasetSchema {
        nodes: 2,
        channels: 1,
        slot_minutes: 15,
    };

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn ts(k: usize) -> String {
        format!("2024-03-04T{:02}:{:02}:00Z", k * 15 / 60, k * 15 % 60)
    }

    fn files(dir: &Path, steps: usize, skip: Option<(usize, usize)>, shuffle: bool) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut rows = Vec::new();
        for k in 0..steps {
            for n in 0..2 {
                if skip != Some((k, n)) {
                    rows.push(format!("{},{n},0,{}", ts(k), 10 * k + n));
                }
            }
        }
        if shuffle {
            rows.reverse();
            rows.swap(1, 5);
        }
        let vol = format!("timestamp,node_id,channel,value\n{}\n", rows.join("\n"));
        let mut trows = Vec::new();
        for k in 0..steps {
            trows.push(format!("{},0,1,{}", ts(k), 100 + k));
            trows.push(format!("{},1,0,{}", ts(k), 100 + k));
        }
        let tt = format!("timestamp,from_node,to_node,seconds\n{}\n", trows.join("\n"));
        (write(dir, "v.csv", &vol), write(dir, "t.csv", &tt))
    }

    #[test]
    fn well_formed_file_loads() {
        let d = tempfile::tempdir().unwrap();
        let (v, t) = files(d.path(), 10, None, false);
        let (s, tt, rep) = load_series::<f64>(&v, &t, &SCHEMA).unwrap();
        assert_eq!(s.steps(), 10);
        assert_eq!(tt.steps(), 10);
        assert_eq!(rep.missing_volume_cells, 0);
        assert_eq!(s.value(4, 0, 1), 41.0);
        assert_eq!(tt.matrix(3).get(1, 0), 103.0);
    }

    #[test]
    fn missing_cell_is_carried_forward() {
        let d = tempfile::tempdir().unwrap();
        let (v, t) = files(d.path(), 10, Some((5, 1)), false);
        let (s, _, rep) = load_series::<f64>(&v, &t, &SCHEMA).unwrap();
        assert_eq!(s.value(5, 0, 1), s.value(4, 0, 1));
        assert_eq!(rep.volume_missing_fraction, 1.0 / 20.0);
    }

    #[test]
    fn shuffled_rows_are_sorted() {
        let d = tempfile::tempdir().unwrap();
        let (v, t) = files(d.path(), 10, None, true);
        let (s, _, _) = load_series::<f64>(&v, &t, &SCHEMA).unwrap();
        for k in 0..10 {
            assert_eq!(s.value(k, 0, 0), (10 * k) as f64);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let d = tempfile::tempdir().unwrap();
        let (_, t) = files(d.path(), 3, None, false);
        let v = write(
            d.path(),
            "bad.csv",
            "timestamp,node_id,channel,value\n2024-03-04T00:00:00Z,0,0,1\n2024-03-04T00:00:00Z,1,0,oops\n",
        );
        let e = load_series::<f64>(&v, &t, &SCHEMA).unwrap_err().to_string();
        assert!(e.contains(":3:"), "{e}");
        let v = write(
            d.path(),
            "neg.csv",
            "timestamp,node_id,channel,value\n2024-03-04T00:00:00Z,0,0,-1\n",
        );
        let e = load_series::<f64>(&v, &t, &SCHEMA).unwrap_err().to_string();
        assert!(e.contains("negative"), "{e}");
    }

    #[test]
    fn long_gap_is_rejected_short_gap_filled() {
        let d = tempfile::tempdir().unwrap();
        let (_, t) = files(d.path(), 1, None, false);
        let body = |last: usize| {
            format!(
                "timestamp,node_id,channel,value\n{a},0,0,1\n{a},1,0,2\n{b},0,0,3\n{b},1,0,4\n",
                a = ts(0),
                b = ts(last)
            )
        };
        let v = write(d.path(), "g.csv", &body(4));
        let (s, _, rep) = load_series::<f64>(&v, &t, &SCHEMA).unwrap();
        assert_eq!((s.steps(), rep.inserted_steps), (5, 3));
        assert_eq!(s.value(3, 0, 1), 2.0);
        let v = write(d.path(), "g2.csv", &body(5));
        assert!(load_series::<f64>(&v, &t, &SCHEMA).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let d = tempfile::tempdir().unwrap();
        let (v, _) = files(d.path(), 3, None, false);
        let missing = d.path().join("nope.csv");
        let e = load_series::<f64>(&v, &missing, &SCHEMA).unwrap_err().to_string();
        assert!(e.contains("nope.csv"), "{e}");
    }
}
