use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{EcgRecord, RecordMeta};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ECGB";
const VERSION: u32 = 1;

/// Writes waveforms as `ECGB` v1: header, then per record the id, L, T,
/// rate and `L·T` little-endian f32 samples.
pub fn write_archive(path: &Path, records: &[EcgRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(records.len()).map_err(|_| Error::Data("too many records".into()))?.to_le_bytes())?;
    for r in records {
        r.check()?;
        let id = r.id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(r.leads as u32).to_le_bytes())?;
        w.write_all(&(r.samples as u32).to_le_bytes())?;
        w.write_all(&(r.sample_rate_hz as f32).to_le_bytes())?;
        for v in &r.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Integrity("waveform archive is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Reads an archive and attaches labels from `meta` by record id.
pub fn read_archive(path: &Path, meta: &[RecordMeta]) -> Result<Vec<EcgRecord>> {
    let by_id: HashMap<&str, &RecordMeta> = meta.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Integrity(format!("{} is not a waveform archive", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported waveform archive version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(truncated)?;
        let id = String::from_utf8(id).map_err(|_| Error::Integrity("record id is not UTF-8".into()))?;
        let leads = read_u32(&mut r)? as usize;
        let samples = read_u32(&mut r)? as usize;
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(truncated)?;
        let rate = f32::from_le_bytes(b) as f64;
        let mut raw = vec![0u8; 4 * leads * samples];
        r.read_exact(&mut raw).map_err(truncated)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let m = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("archive record {id} has no metadata")))?;
        let rec = EcgRecord {
            id,
            subject_id: m.subject_id.clone(),
            leads,
            samples,
            sample_rate_hz: rate,
            values,
            conditions: m.conditions.clone(),
            stratum: m.stratum,
        };
        rec.check()?;
        out.push(rec);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Integrity(format!("{} trailing bytes after waveform archive", rest.len())));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}
