//! Binary interchange formats and TSV tables.
//!
//! All multi-byte fields are little-endian. An activation file is a 28-byte
//! header `"NTPS" | version u32 | d u32 | c u32 | n u64 | layer u32` followed
//! by `n` records `ℓ u32 | label u32 | ℓ·d f32` with tokens row-major. A stats
//! file is `"NTSS" | version u32 | d u32 | c u32 | layer u32 | n u64` followed
//! by the raw sums as f64 in [`RawSums`](ntps_core::stats::RawSums) order, each
//! matrix row-major.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ntps_core::stats::{SentenceSample, StatsMeta, SufficientStats};
use thiserror::Error;

pub const ACTIVATION_MAGIC: [u8; 4] = *b"NTPS";
pub const ACTIVATION_VERSION: u32 = 1;
pub const ACTIVATION_HEADER_BYTES: u64 = 28;
pub const STATS_MAGIC: [u8; 4] = *b"NTSS";
pub const STATS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("truncated at byte offset {offset}: {what} needs {needed} bytes, {available} available")]
    Truncated { offset: u64, what: String, needed: u64, available: u64 },
    #[error("trailing bytes after the last record at byte offset {offset}")]
    TrailingBytes { offset: u64 },
    #[error("record {index} at byte offset {offset}: {reason}")]
    InvalidRecord { index: u64, offset: u64, reason: String },
    #[error("{0}")]
    Mismatch(String),
    #[error("table {path}: {reason}")]
    Table { path: String, reason: String },
}

pub type FormatResult<T> = std::result::Result<T, FormatError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationHeader {
    pub version: u32,
    pub d: u32,
    pub c: u32,
    pub n: u64,
    pub layer: u32,
}

impl ActivationHeader {
    pub fn new(d: usize, c: usize, n: u64, layer: u32) -> FormatResult<Self> {
        let header = Self { version: ACTIVATION_VERSION, d: to_u32(d, "d")?, c: to_u32(c, "c")?, n, layer };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> FormatResult<()> {
        if self.version != ACTIVATION_VERSION {
            return Err(FormatError::UnsupportedVersion(self.version));
        }
        if self.d == 0 || self.c == 0 {
            return Err(FormatError::InvalidHeader(format!("d = {} and c = {} must be positive", self.d, self.c)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; 28] {
        let mut out = [0u8; 28];
        out[0..4].copy_from_slice(&ACTIVATION_MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.d.to_le_bytes());
        out[12..16].copy_from_slice(&self.c.to_le_bytes());
        out[16..24].copy_from_slice(&self.n.to_le_bytes());
        out[24..28].copy_from_slice(&self.layer.to_le_bytes());
        out
    }
}

fn to_u32(value: usize, name: &str) -> FormatResult<u32> {
    u32::try_from(value).map_err(|_| FormatError::InvalidHeader(format!("{name} = {value} does not fit in u32")))
}

/// Reads exactly `needed` bytes, reporting the offset of the field on a short read.
/// The buffer grows with the data actually present, so a corrupt length cannot force a huge allocation.
fn read_field<R: Read>(reader: &mut R, offset: &mut u64, needed: u64, what: &str) -> FormatResult<Vec<u8>> {
    let mut buf = Vec::new();
    reader.by_ref().take(needed).read_to_end(&mut buf)?;
    if (buf.len() as u64) < needed {
        return Err(FormatError::Truncated { offset: *offset, what: what.to_string(), needed, available: buf.len() as u64 });
    }
    *offset += needed;
    Ok(buf)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

/// Streaming reader that validates every record and rejects trailing bytes.
pub struct ActivationReader<R: Read> {
    inner: R,
    header: ActivationHeader,
    offset: u64,
    read: u64,
    finished: bool,
}

impl ActivationReader<BufReader<File>> {
    pub fn open(path: &Path) -> FormatResult<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> ActivationReader<R> {
    pub fn new(mut inner: R) -> FormatResult<Self> {
        let mut offset = 0;
        let bytes = read_field(&mut inner, &mut offset, ACTIVATION_HEADER_BYTES, "header")?;
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
        if magic != ACTIVATION_MAGIC {
            return Err(FormatError::BadMagic { found: magic, expected: ACTIVATION_MAGIC });
        }
        let header = ActivationHeader {
            version: u32_at(&bytes, 4),
            d: u32_at(&bytes, 8),
            c: u32_at(&bytes, 12),
            n: u64_at(&bytes, 16),
            layer: u32_at(&bytes, 24),
        };
        header.validate()?;
        Ok(Self { inner, header, offset, read: 0, finished: false })
    }

    pub fn header(&self) -> ActivationHeader {
        self.header
    }

    /// Byte offset of the next unread field.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn next_record(&mut self) -> FormatResult<Option<SentenceSample<f32>>> {
        if self.read == self.header.n {
            if !self.finished {
                self.finished = true;
                let mut probe = [0u8; 1];
                if self.inner.read(&mut probe)? > 0 {
                    return Err(FormatError::TrailingBytes { offset: self.offset });
                }
            }
            return Ok(None);
        }
        let index = self.read;
        let start = self.offset;
        let prefix = read_field(&mut self.inner, &mut self.offset, 8, &format!("record {index} prefix"))?;
        let len = u32_at(&prefix, 0);
        let label = u32_at(&prefix, 4);
        let invalid = |reason: String| FormatError::InvalidRecord { index, offset: start, reason };
        if len < 2 {
            return Err(invalid(format!("sentence length {len} is below 2")));
        }
        if label >= self.header.c {
            return Err(invalid(format!("label {label} is not below c = {}", self.header.c)));
        }
        let d = self.header.d as usize;
        let count = len as u64 * d as u64;
        let body = read_field(&mut self.inner, &mut self.offset, count * 4, &format!("record {index} tokens"))?;
        let values: Vec<f32> = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk"))).collect();
        let tokens = DMatrix::from_row_slice(len as usize, d, &values);
        let sample = SentenceSample::new(tokens, label as usize).map_err(|e| invalid(e.to_string()))?;
        self.read += 1;
        Ok(Some(sample))
    }
}

impl<R: Read> Iterator for ActivationReader<R> {
    type Item = FormatResult<SentenceSample<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_record() {
            Ok(Some(s)) => Some(Ok(s)),
            Ok(None) => None,
            Err(e) => {
                self.read = self.header.n;
                self.finished = true;
                Some(Err(e))
            }
        }
    }
}

/// Writes the header eagerly; [`ActivationWriter::finish`] checks that exactly `n` records followed.
pub struct ActivationWriter<W: Write> {
    inner: W,
    header: ActivationHeader,
    written: u64,
}

impl ActivationWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: ActivationHeader) -> FormatResult<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> ActivationWriter<W> {
    pub fn new(mut inner: W, header: ActivationHeader) -> FormatResult<Self> {
        header.validate()?;
        inner.write_all(&header.to_bytes())?;
        Ok(Self { inner, header, written: 0 })
    }

    pub fn write(&mut self, sample: &SentenceSample<f32>) -> FormatResult<()> {
        let index = self.written;
        let reject = |reason: String| FormatError::InvalidRecord { index, offset: 0, reason };
        if self.written == self.header.n {
            return Err(reject(format!("header declares only {} records", self.header.n)));
        }
        if sample.dim() != self.header.d as usize {
            return Err(reject(format!("sample has d = {}, header has {}", sample.dim(), self.header.d)));
        }
        if sample.label() >= self.header.c as usize {
            return Err(reject(format!("label {} is not below c = {}", sample.label(), self.header.c)));
        }
        let len = to_u32(sample.len(), "sentence length")?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(&(sample.label() as u32).to_le_bytes())?;
        let tokens = sample.tokens();
        let mut row = Vec::with_capacity(tokens.ncols() * 4);
        for i in 0..tokens.nrows() {
            row.clear();
            for j in 0..tokens.ncols() {
                row.extend_from_slice(&tokens[(i, j)].to_le_bytes());
            }
            self.inner.write_all(&row)?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> FormatResult<W> {
        if self.written != self.header.n {
            return Err(FormatError::Mismatch(format!(
                "header declares {} records, {} written",
                self.header.n, self.written
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_activation_file<'a, I>(path: &Path, header: ActivationHeader, samples: I) -> FormatResult<()>
where
    I: IntoIterator<Item = &'a SentenceSample<f32>>,
{
    let mut writer = ActivationWriter::create(path, header)?;
    for s in samples {
        writer.write(s)?;
    }
    writer.finish()?;
    Ok(())
}

pub fn read_activation_file(path: &Path) -> FormatResult<(ActivationHeader, Vec<SentenceSample<f32>>)> {
    let mut reader = ActivationReader::open(path)?;
    let header = reader.header();
    let samples = reader.by_ref().collect::<FormatResult<Vec<_>>>()?;
    Ok((header, samples))
}

fn push_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

pub fn stats_to_bytes(stats: &SufficientStats<f64>) -> FormatResult<Vec<u8>> {
    let meta = stats.meta();
    let raw = stats.raw();
    let mut out = Vec::with_capacity(28 + 8 * (4 * meta.d * meta.d + 2 * meta.d * meta.c + 2));
    out.extend_from_slice(&STATS_MAGIC);
    out.extend_from_slice(&STATS_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(meta.d, "d")?.to_le_bytes());
    out.extend_from_slice(&to_u32(meta.c, "c")?.to_le_bytes());
    out.extend_from_slice(&meta.layer.to_le_bytes());
    out.extend_from_slice(&stats.n().to_le_bytes());
    for m in [raw.mean_xx, raw.mean_xy, raw.cov0, raw.cov1, raw.sum_xx, raw.sum_xy] {
        push_matrix(&mut out, m);
    }
    out.extend_from_slice(&raw.yy_trace.to_le_bytes());
    out.extend_from_slice(&raw.next_sq.to_le_bytes());
    Ok(out)
}

pub fn stats_from_bytes(bytes: &[u8]) -> FormatResult<SufficientStats<f64>> {
    let mut cursor = bytes;
    let mut offset = 0;
    let head = read_field(&mut cursor, &mut offset, 28, "stats header")?;
    let magic: [u8; 4] = head[0..4].try_into().expect("4-byte slice");
    if magic != STATS_MAGIC {
        return Err(FormatError::BadMagic { found: magic, expected: STATS_MAGIC });
    }
    let version = u32_at(&head, 4);
    if version != STATS_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (d, c, layer, n) = (u32_at(&head, 8) as usize, u32_at(&head, 12) as usize, u32_at(&head, 16), u64_at(&head, 20));
    if d == 0 || c == 0 {
        return Err(FormatError::InvalidHeader(format!("d = {d} and c = {c} must be positive")));
    }
    let mut matrix = |rows: usize, cols: usize, name: &str| -> FormatResult<DMatrix<f64>> {
        let body = read_field(&mut cursor, &mut offset, (rows * cols * 8) as u64, name)?;
        let values: Vec<f64> = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    };
    let mean_xx = matrix(d, d, "mean_xx")?;
    let mean_xy = matrix(d, c, "mean_xy")?;
    let cov0 = matrix(d, d, "cov0")?;
    let cov1 = matrix(d, d, "cov1")?;
    let sum_xx = matrix(d, d, "sum_xx")?;
    let sum_xy = matrix(d, c, "sum_xy")?;
    let scalars = matrix(1, 2, "scalar sums")?;
    if !cursor.is_empty() {
        return Err(FormatError::TrailingBytes { offset });
    }
    SufficientStats::from_raw_parts(
        StatsMeta { d, c, layer },
        n,
        mean_xx,
        mean_xy,
        cov0,
        cov1,
        sum_xx,
        sum_xy,
        scalars[(0, 0)],
        scalars[(0, 1)],
    )
    .map_err(|e| FormatError::InvalidHeader(e.to_string()))
}

pub fn write_stats_file(path: &Path, stats: &SufficientStats<f64>) -> FormatResult<()> {
    let bytes = stats_to_bytes(stats)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_stats_file(path: &Path) -> FormatResult<SufficientStats<f64>> {
    stats_from_bytes(&std::fs::read(path)?)
}

/// One row of a `dataset / metric_name / value` table.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub metric_name: String,
    pub value: f64,
}

pub fn read_metrics_table(path: &Path) -> FormatResult<Vec<MetricRow>> {
    let table_err = |reason: String| FormatError::Table { path: path.display().to_string(), reason };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_path(path)
        .map_err(|e| table_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| table_err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["dataset", "metric_name", "value"] {
        return Err(table_err(format!("header must be dataset, metric_name, value; got {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize::<MetricRow>().enumerate() {
        let row = row.map_err(|e| table_err(format!("row {}: {e}", i + 1)))?;
        if !row.value.is_finite() {
            return Err(table_err(format!("row {}: value {} is not finite", i + 1, row.value)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Selects one metric per dataset. `name` may be omitted when the table holds a single metric.
pub fn select_metric(rows: &[MetricRow], name: Option<&str>) -> FormatResult<BTreeMap<String, f64>> {
    let names: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.metric_name.as_str()).collect();
    let chosen = match name {
        Some(n) => n,
        None if names.len() == 1 => *names.iter().next().expect("one name"),
        None => return Err(FormatError::Mismatch(format!("table holds metrics {names:?}; pick one by name"))),
    };
    let mut out = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric_name == chosen) {
        if out.insert(r.dataset.clone(), r.value).is_some() {
            return Err(FormatError::Mismatch(format!("dataset '{}' has metric '{chosen}' twice", r.dataset)));
        }
    }
    if out.is_empty() {
        return Err(FormatError::Mismatch(format!("no rows for metric '{chosen}'")));
    }
    Ok(out)
}

/// Tab-separated writer with a mandatory header and `\n` line endings.
pub struct TsvWriter<W: Write> {
    inner: W,
    columns: usize,
}

impl<W: Write> TsvWriter<W> {
    pub fn new(mut inner: W, header: &[&str]) -> io::Result<Self> {
        writeln!(inner, "{}", header.join("\t"))?;
        Ok(Self { inner, columns: header.len() })
    }

    pub fn row(&mut self, fields: &[String]) -> io::Result<()> {
        debug_assert_eq!(fields.len(), self.columns);
        writeln!(self.inner, "{}", fields.join("\t"))
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}
