use std::io::{Read, Write};
use std::path::Path;

use super::{IdentError, MeasurementSample};

/// Exact header of a measurement log.
pub const LOG_HEADER: [&str; 8] = ["t", "x_ips", "y_ips", "psi_ips", "v_odo", "m", "d", "u"];

pub fn read_measurement_log<R: Read>(reader: R) -> Result<Vec<MeasurementSample>, IdentError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| IdentError::Log {
        line: 1,
        msg: e.to_string(),
    })?;
    if headers.iter().ne(LOG_HEADER) {
        return Err(IdentError::Log {
            line: 1,
            msg: format!(
                "expected header {}, got {}",
                LOG_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out: Vec<MeasurementSample> = Vec::new();
    for rec in rdr.deserialize::<MeasurementSample>() {
        let line = out.len() as u64 + 2;
        let s = rec.map_err(|e| IdentError::Log {
            line: e.position().map(|p| p.line()).unwrap_or(line),
            msg: e.to_string(),
        })?;
        if !s.is_finite() {
            return Err(IdentError::Log {
                line,
                msg: "non-finite field".into(),
            });
        }
        if let Some(prev) = out.last() {
            if !(s.t > prev.t) {
                return Err(IdentError::Log {
                    line,
                    msg: format!("timestamp {} does not follow {}", s.t, prev.t),
                });
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Load a log. Rows must be strictly increasing in time.
pub fn load_measurement_log(path: impl AsRef<Path>) -> Result<Vec<MeasurementSample>, IdentError> {
    read_measurement_log(std::fs::File::open(path)?)
}

pub fn write_measurement_log<W: Write>(
    samples: &[MeasurementSample],
    writer: W,
) -> Result<(), IdentError> {
    let mut w = csv::Writer::from_writer(writer);
    if samples.is_empty() {
        w.write_record(LOG_HEADER).map_err(|e| IdentError::Log {
            line: 1,
            msg: e.to_string(),
        })?;
    }
    for s in samples {
        w.serialize(s).map_err(|e| IdentError::Log {
            line: 0,
            msg: e.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}
