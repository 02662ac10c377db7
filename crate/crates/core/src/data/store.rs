//! Dataset directories.
//!
//! ```text
//! points.csv   domain,x0,x1[,x2]           one row per node
//! times.csv    t                           one row per timestamp
//! mask.csv     present                     1 or 0 per timestamp
//! values.bin   "OPVL" | u8 version=1 | u32 ndim=3 | u64 n_t | u64 n_s | u64 c
//!              | n_t·n_s·c f64, row-major (time, node, channel)
//! meta.toml    key = "value" lines
//! ```
//!
//! All integers and floats are little-endian.

use super::ObservationSeries;
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const VALUES_MAGIC: &[u8; 4] = b"OPVL";
pub const VALUES_VERSION: u8 = 1;

pub type DatasetMeta = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub series: ObservationSeries,
    pub meta: DatasetMeta,
}

pub fn write_values_bin<W: Write>(mut w: W, shape: [usize; 3], values: &[f64]) -> std::io::Result<()> {
    w.write_all(VALUES_MAGIC)?;
    w.write_all(&[VALUES_VERSION])?;
    w.write_all(&3u32.to_le_bytes())?;
    for d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_values_bin<R: Read>(mut r: R) -> Result<([usize; 3], Vec<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Data(format!("values.bin: {e}")))?;
    let bad = |msg: &str| Error::Data(format!("values.bin: {msg}"));
    if bytes.len() < 9 + 24 || &bytes[..4] != VALUES_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    if bytes[4] != VALUES_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    if u32::from_le_bytes(bytes[5..9].try_into().unwrap()) != 3 {
        return Err(bad("expected three dimensions"));
    }
    let mut shape = [0usize; 3];
    for (i, d) in shape.iter_mut().enumerate() {
        let at = 9 + 8 * i;
        *d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("shape overflows"))?;
    let body = &bytes[33..];
    if Some(body.len()) != n.checked_mul(8) {
        return Err(bad(&format!("expected {n} values, found {} bytes", body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

pub fn write_dataset(dir: &Path, series: &ObservationSeries, meta: &DatasetMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    series.points().write_csv(&dir.join("points.csv"))?;

    let mut times = String::from("t\n");
    for t in series.times() {
        times.push_str(&format!("{t}\n"));
    }
    write_text(&dir.join("times.csv"), &times)?;

    let mut mask = String::from("present\n");
    for m in series.mask() {
        mask.push_str(if *m { "1\n" } else { "0\n" });
    }
    write_text(&dir.join("mask.csv"), &mask)?;

    let path = dir.join("values.bin");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_values_bin(
        std::io::BufWriter::new(file),
        [series.n_t(), series.n_s(), series.channels()],
        series.values(),
    )
    .map_err(|e| Error::io(&path, e))?;

    let meta_text = toml::to_string(meta).map_err(|e| Error::Data(format!("meta.toml: {e}")))?;
    write_text(&dir.join("meta.toml"), &meta_text)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let points = PointSet::read_csv(&dir.join("points.csv"))?;

    let times = read_column(&dir.join("times.csv"), "t")?
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("times.csv: bad timestamp {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mask_path = dir.join("mask.csv");
    let mask = if mask_path.exists() {
        read_column(&mask_path, "present")?
            .iter()
            .map(|s| match s.as_str() {
                "1" => Ok(true),
                "0" => Ok(false),
                _ => Err(Error::Data(format!("mask.csv: expected 0 or 1, got {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![true; times.len()]
    };

    let path = dir.join("values.bin");
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let (shape, values) = read_values_bin(std::io::BufReader::new(file))?;
    if shape[0] != times.len() || shape[1] != points.len() {
        return Err(Error::Data(format!(
            "values.bin has shape {shape:?} but the directory lists {} timestamps and {} nodes",
            times.len(),
            points.len()
        )));
    }

    let meta_path = dir.join("meta.toml");
    let meta = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("meta.toml: {e}")))?
    } else {
        DatasetMeta::new()
    };

    let series = ObservationSeries::with_mask(points, times, shape[2], values, mask).map_err(|e| match e {
        Error::Data(_) | Error::NonFinite(_) => e,
        other => Error::Data(other.to_string()),
    })?;
    Ok(Dataset { series, meta })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_column(path: &Path, header: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Data(format!("{}: expected header {header:?}", path.display())));
    }
    Ok(lines
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;

    #[test]
    fn values_header_layout() {
        let mut buf = Vec::new();
        write_values_bin(&mut buf, [1, 2, 1], &[1.5, -2.0]).unwrap();
        assert_eq!(&buf[..4], b"OPVL");
        assert_eq!(buf[4], 1);
        assert_eq!(&buf[5..9], &3u32.to_le_bytes());
        assert_eq!(&buf[17..25], &2u64.to_le_bytes());
        assert_eq!(buf.len(), 33 + 16);
        assert_eq!(read_values_bin(&buf[..]).unwrap(), ([1, 2, 1], vec![1.5, -2.0]));
        assert!(read_values_bin(&buf[..40]).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = PointSet::new(Domain::Plane, &[vec![0.25, 0.5], vec![0.75, 0.125]]).unwrap();
        let series = ObservationSeries::with_mask(
            pts,
            vec![0.0, 0.1, 0.30000000000000004],
            1,
            vec![1.0, 2.0, f64::NAN, f64::NAN, 0.1, 1e-300],
            vec![true, false, true],
        )
        .unwrap();
        let mut meta = DatasetMeta::new();
        meta.insert("kind".into(), "heat".into());
        write_dataset(dir.path(), &series, &meta).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.series.times(), series.times());
        assert_eq!(back.series.mask(), series.mask());
        let bits = |s: &ObservationSeries| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.series), bits(&series));
    }
}
