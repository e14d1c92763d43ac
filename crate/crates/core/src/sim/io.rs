//! Dataset files.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic      8 bytes  "ADPSDSET"
//! version    u32
//! a_max      u32
//! taps       u32
//! channels   u32
//! records    u64
//! record*    u32 byte length, then
//!            u32 antenna_id, f64 timestamp, f64 true_x, f64 true_y,
//!            channels × taps f64 values (channel-major)
//! ```
//!
//! The CSV mirror carries the same fields, one record per line, with floats
//! printed in shortest round-trip form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CirSample, Dataset, CHANNELS, TAPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ADPSDSET";
pub const DATASET_VERSION: u32 = 1;
const RECORD_LEN: u32 = (4 + 3 * 8 + CHANNELS * TAPS * 8) as u32;

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&DATASET_VERSION.to_le_bytes())?;
    put(&(ds.a_max as u32).to_le_bytes())?;
    put(&(TAPS as u32).to_le_bytes())?;
    put(&(CHANNELS as u32).to_le_bytes())?;
    put(&(ds.samples.len() as u64).to_le_bytes())?;
    for s in &ds.samples {
        put(&RECORD_LEN.to_le_bytes())?;
        put(&(s.antenna_id as u32).to_le_bytes())?;
        put(&s.timestamp.to_le_bytes())?;
        put(&s.true_position[0].to_le_bytes())?;
        put(&s.true_position[1].to_le_bytes())?;
        for v in s.taps.data() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if c.take(8)? != MAGIC {
        return Err(Error::format(path, "not a dataset file"));
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let a_max = c.u32()? as usize;
    let (taps, channels) = (c.u32()? as usize, c.u32()? as usize);
    if taps != TAPS || channels != CHANNELS {
        return Err(Error::format(
            path,
            format!("expected {CHANNELS}×{TAPS} taps, found {channels}×{taps}"),
        ));
    }
    let n = c.u64()? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        if c.u32()? != RECORD_LEN {
            return Err(Error::format(path, "bad record length"));
        }
        let antenna_id = c.u32()? as usize;
        if antenna_id >= a_max {
            return Err(Error::format(path, format!("antenna id {antenna_id} ≥ a_max {a_max}")));
        }
        let timestamp = c.f64()?;
        let true_position = [c.f64()?, c.f64()?];
        let values = (0..CHANNELS * TAPS)
            .map(|_| c.f64())
            .collect::<Result<Vec<_>>>()?;
        samples.push(CirSample {
            taps: Tensor::new([CHANNELS, TAPS], values)?,
            antenna_id,
            timestamp,
            true_position,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last record"));
    }
    Ok(Dataset { a_max, samples })
}

pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("antenna_id,timestamp,true_x,true_y");
    for ch in 0..CHANNELS {
        for t in 0..TAPS {
            header.push_str(&format!(",c{ch}_t{t}"));
        }
    }
    writeln!(w, "# a_max={} taps={TAPS} channels={CHANNELS} version={DATASET_VERSION}", ds.a_max)
        .and_then(|_| writeln!(w, "{header}"))
        .map_err(|e| Error::io(path, e))?;
    for s in &ds.samples {
        let mut line = format!(
            "{},{},{},{}",
            s.antenna_id, s.timestamp, s.true_position[0], s.true_position[1]
        );
        for v in s.taps.data() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<Option<String>> {
        lines.next().transpose().map_err(|e| Error::io(path, e))
    };
    let meta = next()?.ok_or_else(|| Error::format(path, "empty file"))?;
    let a_max = meta
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("a_max="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, "missing a_max in metadata line"))?;
    next()?.ok_or_else(|| Error::format(path, "missing header"))?;
    let mut samples = Vec::new();
    while let Some(line) = next()? {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + CHANNELS * TAPS {
            return Err(Error::format(path, format!("record {} has {} fields", samples.len(), fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::format(path, format!("bad number {s:?}")))
        };
        let antenna_id = fields[0]
            .parse()
            .map_err(|_| Error::format(path, format!("bad antenna id {:?}", fields[0])))?;
        let values = fields[4..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        samples.push(CirSample {
            taps: Tensor::new([CHANNELS, TAPS], values)?,
            antenna_id,
            timestamp: num(fields[1])?,
            true_position: [num(fields[2])?, num(fields[3])?],
        });
    }
    Ok(Dataset { a_max, samples })
}
