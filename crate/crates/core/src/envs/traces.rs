//! Timestamped disturbance traces: synthesis, CSV round-trip, and the
//! forecast accessor used by the constraint builders.
//!
//! CSV format: header `timestamp,<col>...`, ISO-8601 timestamps at a
//! fixed cadence.

use crate::error::{CoreError, Result};
use crate::rng;
use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TraceSet {
    pub start: NaiveDateTime,
    pub cadence_secs: u64,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    len: usize,
}

impl TraceSet {
    pub fn new(start: NaiveDateTime, cadence_secs: u64, len: usize) -> Self {
        TraceSet {
            start,
            cadence_secs,
            names: Vec::new(),
            columns: Vec::new(),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn push_column(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        if data.len() != self.len {
            return Err(CoreError::Trace(format!(
                "column {name} has {} rows, trace has {}",
                data.len(),
                self.len
            )));
        }
        self.names.push(name.to_string());
        self.columns.push(data);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| CoreError::Trace(format!("no column named {name}")))
    }

    pub fn timestamp(&self, k: usize) -> NaiveDateTime {
        self.start + chrono::Duration::seconds((k as i64) * self.cadence_secs as i64)
    }

    /// Values of `name` over steps `[k, k + horizon)`. Perfect
    /// foresight: past and present entries are the stored truth, and so
    /// are future ones. The final value is held beyond the trace end.
    pub fn forecast(&self, name: &str, k: usize, horizon: usize) -> Result<Vec<f64>> {
        let col = self.column(name)?;
        Ok((k..k + horizon)
            .map(|i| col[i.min(self.len - 1)])
            .collect())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "timestamp")?;
        for n in &self.names {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for k in 0..self.len {
            write!(w, "{}", self.timestamp(k).format("%Y-%m-%dT%H:%M:%S"))?;
            for c in &self.columns {
                write!(w, ",{}", format_value(c[k]))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        // `#` lines carry provenance (config hash, seed, version)
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() || &headers[0] != "timestamp" {
            return Err(CoreError::Trace(
                "first CSV column must be `timestamp`".into(),
            ));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut stamps: Vec<NaiveDateTime> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let ts = NaiveDateTime::parse_from_str(&rec[0], "%Y-%m-%dT%H:%M:%S")
                .map_err(|e| CoreError::Trace(format!("bad timestamp {}: {e}", &rec[0])))?;
            stamps.push(ts);
            for (i, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|e| CoreError::Trace(format!("bad value {field}: {e}")))?;
                columns[i].push(v);
            }
        }
        if stamps.is_empty() {
            return Err(CoreError::Trace("empty trace".into()));
        }
        let cadence = if stamps.len() > 1 {
            (stamps[1] - stamps[0]).num_seconds()
        } else {
            1
        };
        if cadence <= 0 {
            return Err(CoreError::Trace("non-monotone timestamps".into()));
        }
        for i in 1..stamps.len() {
            if (stamps[i] - stamps[i - 1]).num_seconds() != cadence {
                return Err(CoreError::Trace(format!(
                    "gap or cadence change at row {i}"
                )));
            }
        }
        let mut t = TraceSet::new(stamps[0], cadence as u64, stamps.len());
        for (n, c) in names.iter().zip(columns) {
            t.push_column(n, c)?;
        }
        Ok(t)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

fn format_value(v: f64) -> String {
    // Shortest representation that round-trips.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

pub const BUILDING_CADENCE_SECS: u64 = 300;
pub const FEEDER_CADENCE_SECS: u64 = 1;

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2017, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
}

/// Smoothed positive noise in [lo, 1]: an AR(1) process squashed
/// through a logistic, giving slow "cloud" style variation.
fn smooth_noise(rng: &mut impl Rng, len: usize, lo: f64, rate: f64) -> Vec<f64> {
    let mut z = 0.0_f64;
    (0..len)
        .map(|_| {
            z = (1.0 - rate) * z + rate * rng.gen_range(-3.0..3.0);
            let s = 1.0 / (1.0 + (-2.0 * z).exp());
            lo + (1.0 - lo) * s
        })
        .collect()
}

/// Weather and occupancy at 5-minute cadence for the building task.
/// Winter profile: seasonal base around 0 degC with a diurnal swing.
pub fn synth_building_traces(seed: u64, days: usize) -> TraceSet {
    assert!(days >= 1);
    let len = days * 86400 / BUILDING_CADENCE_SECS as usize;
    let start = default_start();
    let mut rng = rng::stream(seed, "traces/building");
    let noise = smooth_noise(&mut rng, len, 0.0, 0.02);
    let mut outdoor = Vec::with_capacity(len);
    let mut occupancy = Vec::with_capacity(len);
    for k in 0..len {
        let ts = start + chrono::Duration::seconds((k as i64) * BUILDING_CADENCE_SECS as i64);
        let day = ts.ordinal() as f64;
        let hour = ts.hour() as f64 + ts.minute() as f64 / 60.0;
        let seasonal = -2.0 + 3.0 * (2.0 * std::f64::consts::PI * (day - 30.0) / 365.0).sin();
        let diurnal = 4.0 * (2.0 * std::f64::consts::PI * (hour - 15.0) / 24.0).cos();
        outdoor.push(seasonal + diurnal + 4.0 * (noise[k] - 0.5));
        let weekday = ts.weekday().num_days_from_monday() < 5;
        let occ = weekday && (8.0..18.0).contains(&hour);
        occupancy.push(if occ { 1.0 } else { 0.0 });
    }
    let mut t = TraceSet::new(start, BUILDING_CADENCE_SECS, len);
    t.push_column("outdoor_temp", outdoor).unwrap();
    t.push_column("occupancy", occupancy).unwrap();
    t
}

/// Irradiance and per-bus loads at 1-second cadence for the feeder
/// task. Irradiance is a clipped diurnal sinusoid modulated by smooth
/// cloud noise; loads are base + diurnal + noise, as fractions of each
/// bus's nominal load.
pub fn synth_feeder_traces(seed: u64, days: usize, n_bus: usize) -> TraceSet {
    assert!(days >= 1);
    let len = days * 86400 / FEEDER_CADENCE_SECS as usize;
    let start = default_start();
    let mut rng = rng::stream(seed, "traces/feeder");
    let cloud = smooth_noise(&mut rng, len, 0.35, 0.002);
    let mut irradiance = Vec::with_capacity(len);
    for k in 0..len {
        let hour = (k as f64 * FEEDER_CADENCE_SECS as f64) / 3600.0 % 24.0;
        let sun = (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().max(0.0);
        let raw = if (6.0..18.0).contains(&hour) { sun } else { 0.0 };
        irradiance.push(raw * cloud[k]);
    }
    let mut t = TraceSet::new(start, FEEDER_CADENCE_SECS, len);
    t.push_column("irradiance", irradiance).unwrap();
    for bus in 0..n_bus {
        let mut lrng = rng::stream(seed, &format!("traces/feeder/load{bus}"));
        let noise = smooth_noise(&mut lrng, len, 0.0, 0.001);
        let phase: f64 = lrng.gen_range(-1.0..1.0);
        let col: Vec<f64> = (0..len)
            .map(|k| {
                let hour = (k as f64 * FEEDER_CADENCE_SECS as f64) / 3600.0 % 24.0;
                let diurnal =
                    0.3 * (2.0 * std::f64::consts::PI * (hour - 19.0 + phase) / 24.0).cos();
                (0.7 + diurnal + 0.2 * (noise[k] - 0.5)).max(0.1)
            })
            .collect();
        t.push_column(&format!("load_{bus}"), col).unwrap();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_building_traces(7, 2);
        let b = synth_building_traces(7, 2);
        assert_eq!(a.column("outdoor_temp").unwrap(), b.column("outdoor_temp").unwrap());
        let c = synth_building_traces(8, 2);
        assert_ne!(a.column("outdoor_temp").unwrap(), c.column("outdoor_temp").unwrap());
    }

    #[test]
    fn irradiance_nonnegative_and_zero_at_night() {
        let t = synth_feeder_traces(3, 1, 2);
        let irr = t.column("irradiance").unwrap();
        assert_eq!(irr.len(), 86400);
        assert!(irr.iter().all(|&v| v >= 0.0));
        // midnight to 5am
        assert!(irr[..5 * 3600].iter().all(|&v| v == 0.0));
        // some sun at noon
        assert!(irr[12 * 3600] > 0.2);
    }

    #[test]
    fn daily_irradiance_peaks_in_bounds() {
        let t = synth_feeder_traces(5, 3, 1);
        let irr = t.column("irradiance").unwrap();
        for d in 0..3 {
            let day = &irr[d * 86400..(d + 1) * 86400];
            let peak = day.iter().cloned().fold(0.0, f64::max);
            assert!((0.3..=1.0).contains(&peak), "day {d} peak {peak}");
        }
    }

    #[test]
    fn csv_roundtrip() {
        let t = synth_building_traces(1, 1);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let t2 = TraceSet::read_csv(&buf[..]).unwrap();
        assert_eq!(t2.len(), t.len());
        assert_eq!(t2.cadence_secs, t.cadence_secs);
        assert_eq!(t2.column("outdoor_temp").unwrap(), t.column("outdoor_temp").unwrap());
        let mut buf2 = Vec::new();
        t2.write_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn forecast_of_present_equals_truth() {
        let t = synth_building_traces(2, 1);
        let col = t.column("outdoor_temp").unwrap();
        let f = t.forecast("outdoor_temp", 10, 4).unwrap();
        assert_eq!(f[0], col[10]);
        assert_eq!(f[3], col[13]);
    }

    #[test]
    fn gap_detection() {
        let bad = "timestamp,a\n2017-01-01T00:00:00,1.0\n2017-01-01T00:05:00,2.0\n2017-01-01T00:15:00,3.0\n";
        assert!(TraceSet::read_csv(bad.as_bytes()).is_err());
    }
}
