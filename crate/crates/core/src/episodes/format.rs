//! PFEB binary embeddings and CSV ingestion.
//!
//! PFEB layout, little-endian: `b"PFEB"`, `u32` version (1), `u32` dim,
//! `u64` record count, then per record a `u32` class id and `dim` `f64`s.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::dataset::{EmbeddingDataset, Split};
use crate::error::{Error, Result};

pub const PFEB_MAGIC: &[u8; 4] = b"PFEB";
pub const PFEB_VERSION: u32 = 1;

pub fn to_pfeb_bytes(dataset: &EmbeddingDataset) -> Vec<u8> {
    let dim = dataset.dim();
    let mut out = Vec::with_capacity(20 + dataset.len() * (4 + 8 * dim));
    out.extend_from_slice(PFEB_MAGIC);
    out.extend_from_slice(&PFEB_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for (class, v) in dataset.records() {
        out.extend_from_slice(&class.to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn truncated(what: &str) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("truncated PFEB file while reading {what}"),
    ))
}

fn read_exact<const N: usize>(r: &mut &[u8], what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| truncated(what))?;
    Ok(buf)
}

pub fn from_pfeb_bytes(bytes: &[u8], split: Split) -> Result<EmbeddingDataset> {
    let mut r = bytes;
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != PFEB_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"PFEB\"")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != PFEB_VERSION {
        return Err(Error::Format(format!("unsupported PFEB version {version}")));
    }
    let dim = u32::from_le_bytes(read_exact(&mut r, "dim")?) as usize;
    let count = u64::from_le_bytes(read_exact(&mut r, "record count")?);
    if count == 0 {
        return Err(Error::Format("no records".into()));
    }
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    let mut dataset = EmbeddingDataset::new(dim, split);
    let mut vector = vec![0.0; dim];
    for i in 0..count {
        let class = u32::from_le_bytes(read_exact(&mut r, &format!("record {i}"))?);
        for v in vector.iter_mut() {
            *v = f64::from_le_bytes(read_exact(&mut r, &format!("record {i}"))?);
        }
        dataset.push(class, &vector)?;
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after the last record", r.len())));
    }
    Ok(dataset)
}

pub fn save_pfeb(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_pfeb_bytes(dataset))?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return load_csv(path);
    }
    from_pfeb_bytes(&fs::read(path)?, Split::Train)
}

/// Reads `class_id,e0,...,e{dim-1}` rows.
pub fn load_csv(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let dim = headers.len().saturating_sub(1);
    if headers.get(0) != Some("class_id") || dim == 0 {
        return Err(Error::Format("CSV header must be class_id,e0,...".into()));
    }
    for (i, h) in headers.iter().skip(1).enumerate() {
        if h != format!("e{i}") {
            return Err(Error::Format(format!("CSV column {} should be e{i}, found {h}", i + 1)));
        }
    }
    let mut dataset = EmbeddingDataset::new(dim, Split::Train);
    let mut vector = vec![0.0; dim];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let class: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("row {row}: bad class id {:?}", &record[0])))?;
        for (v, field) in vector.iter_mut().zip(record.iter().skip(1)) {
            *v = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {row}: bad value {field:?}")))?;
        }
        dataset.push(class, &vector)?;
    }
    if dataset.is_empty() {
        return Err(Error::Format("no records".into()));
    }
    Ok(dataset)
}

pub fn save_csv(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    let mut header = vec!["class_id".to_string()];
    header.extend((0..dataset.dim()).map(|i| format!("e{i}")));
    writer.write_record(&header).map_err(csv_err)?;
    for (c, v) in dataset.records() {
        let mut row = vec![c.to_string()];
        row.extend(v.iter().map(|x| format!("{x:?}")));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
