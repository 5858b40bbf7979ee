use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::TelemetryPoint;
use crate::canonical::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum TelemetryIoError {
    #[error("telemetry i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("telemetry csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("telemetry json at line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("unsupported telemetry file extension {0:?} (expected .csv or .jsonl)")]
    UnknownFormat(String),
}

/// `timestamp,customer,rack,channel,sensor,value`
pub fn write_csv<W: Write>(points: &[TelemetryPoint], w: W) -> Result<(), TelemetryIoError> {
    let mut writer = csv::Writer::from_writer(w);
    for p in points {
        writer.serialize(p)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<TelemetryPoint>, TelemetryIoError> {
    let mut reader = csv::Reader::from_reader(r);
    reader.deserialize().map(|row| row.map_err(TelemetryIoError::from)).collect()
}

pub fn write_jsonl<W: Write>(points: &[TelemetryPoint], mut w: W) -> Result<(), TelemetryIoError> {
    for p in points {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: Read>(r: R) -> Result<Vec<TelemetryPoint>, TelemetryIoError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| TelemetryIoError::Json { line: i + 1, source })?,
        );
    }
    Ok(out)
}

/// Read a `.csv` or `.jsonl` telemetry file.
pub fn read_points(path: &Path) -> Result<Vec<TelemetryPoint>, TelemetryIoError> {
    let file = std::fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(file),
        Some("jsonl") | Some("ndjson") => read_jsonl(file),
        other => Err(TelemetryIoError::UnknownFormat(other.unwrap_or("").to_string())),
    }
}

/// Order-independent digest of a point set: SHA-256 of the CSV encoding of
/// the points sorted by every field.
pub fn telemetry_digest(points: &[TelemetryPoint]) -> String {
    let mut sorted: Vec<&TelemetryPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        (a.timestamp, &a.customer, &a.rack_id, a.channel, &a.sensor_id)
            .cmp(&(b.timestamp, &b.customer, &b.rack_id, b.channel, &b.sensor_id))
            .then_with(|| a.value.total_cmp(&b.value))
    });
    let mut buf = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut buf);
        for p in sorted {
            writer.serialize(p).expect("in-memory csv write");
        }
        writer.flush().expect("in-memory csv flush");
    }
    sha256_hex(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rulesdb::Metric;

    fn sample() -> Vec<TelemetryPoint> {
        (0..5)
            .map(|i| TelemetryPoint {
                timestamp: 1_700_000_000 + i * 30,
                customer: "Customer_A".into(),
                rack_id: "R1".into(),
                channel: if i % 2 == 0 { Metric::PowerKw } else { Metric::HumidityRh },
                sensor_id: format!("s{i}"),
                value: 0.1 * i as f64 + 1.0 / 3.0,
            })
            .collect()
    }

    #[test]
    fn csv_header_and_round_trip() {
        let pts = sample();
        let mut buf = Vec::new();
        write_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,customer,rack,channel,sensor,value\n"));
        assert_eq!(read_csv(&buf[..]).unwrap(), pts);
    }

    #[test]
    fn jsonl_round_trip() {
        let pts = sample();
        let mut buf = Vec::new();
        write_jsonl(&pts, &mut buf).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), pts);
    }

    #[test]
    fn digest_is_order_independent() {
        let pts = sample();
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(telemetry_digest(&pts), telemetry_digest(&rev));
        let mut changed = pts.clone();
        changed[2].value += 1e-12;
        assert_ne!(telemetry_digest(&pts), telemetry_digest(&changed));
    }
}
