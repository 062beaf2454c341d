//! The `RISD` fingerprint file.
//!
//! ```text
//! "RISD" | u32 version | u32 header_len | header JSON (header_len bytes) | records
//! record = M × (f32 re, f32 im) y | N × (f32 re, f32 im) y_r | 3 × f64 p_u
//! ```
//! All integers and floats are little-endian. Records are stored in sample
//! index order; the index itself is implicit.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{Position, Region, ScenarioConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RISD";
pub const FORMAT_VERSION: u32 = 1;

/// How RIS phase shifts are chosen for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// Fresh uniform phases per sample.
    RandomPerSample,
    /// SNR-maximizing phases computed from each sample's channel.
    OptimizedPerSample,
    /// One uniform random profile drawn from the dataset seed, shared by all samples.
    Fixed,
}

impl fmt::Display for PhaseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseMode::RandomPerSample => "random_per_sample",
            PhaseMode::OptimizedPerSample => "optimized_per_sample",
            PhaseMode::Fixed => "fixed",
        })
    }
}

impl FromStr for PhaseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_per_sample" | "random" => Ok(PhaseMode::RandomPerSample),
            "optimized_per_sample" | "optimized" | "opt" => Ok(PhaseMode::OptimizedPerSample),
            "fixed" => Ok(PhaseMode::Fixed),
            other => Err(Error::Config(format!("unknown phase mode '{other}'"))),
        }
    }
}

/// JSON header following the binary prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    /// Hex SHA-256 of `scenario`.
    pub scenario_digest: String,
    /// Canonical scenario JSON, embedded verbatim.
    pub scenario: String,
    pub m: usize,
    pub n: usize,
    pub sample_count: u64,
    /// [x_min, y_min, z_min, x_max, y_max, z_max]
    pub region: [f64; 6],
    pub phase_mode: PhaseMode,
    pub master_seed: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetHeader {
    pub fn new(
        scenario: &ScenarioConfig,
        m: usize,
        n: usize,
        sample_count: u64,
        region: &Region,
        phase_mode: PhaseMode,
        master_seed: u64,
    ) -> Self {
        let scenario = scenario.to_canonical_json();
        DatasetHeader {
            format_version: FORMAT_VERSION,
            scenario_digest: sha256_hex(scenario.as_bytes()),
            scenario,
            m,
            n,
            sample_count,
            region: region.bounds(),
            phase_mode,
            master_seed,
        }
    }

    pub fn record_size(&self) -> usize {
        record_size(self.m, self.n)
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        ScenarioConfig::from_json(&self.scenario)
    }

    pub fn region(&self) -> Region {
        let r = self.region;
        Region {
            min: Position::new(r[0], r[1], r[2]),
            max: Position::new(r[3], r[4], r[5]),
        }
    }

    pub fn verify_digest(&self) -> Result<()> {
        let actual = sha256_hex(self.scenario.as_bytes());
        if actual != self.scenario_digest {
            return Err(Error::DigestMismatch {
                expected: self.scenario_digest.clone(),
                actual,
            });
        }
        Ok(())
    }
}

/// Bytes per record: `8M + 8N + 24`.
pub fn record_size(m: usize, n: usize) -> usize {
    8 * m + 8 * n + 24
}

/// One fingerprint: BS signal, noiseless RIS signal, and true MU position.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub y: Vec<Complex32>,
    pub y_r: Vec<Complex32>,
    pub p_u: Position,
    pub sample_index: u64,
}

impl SampleRecord {
    pub fn encode(&self, out: &mut Vec<u8>) {
        for v in self.y.iter().chain(&self.y_r) {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }
        for c in self.p_u.to_array() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }

    pub fn decode(bytes: &[u8], m: usize, n: usize, sample_index: u64) -> SampleRecord {
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let complex_at = |k: usize| Complex32::new(f32_at(8 * k), f32_at(8 * k + 4));
        let y = (0..m).map(complex_at).collect();
        let y_r = (m..m + n).map(complex_at).collect();
        let base = 8 * (m + n);
        let f64_at = |i: usize| f64::from_le_bytes(bytes[base + 8 * i..base + 8 * i + 8].try_into().expect("8 bytes"));
        SampleRecord {
            y,
            y_r,
            p_u: Position::new(f64_at(0), f64_at(1), f64_at(2)),
            sample_index,
        }
    }
}

/// Writes a header followed by records, in order.
pub struct DatasetWriter {
    out: BufWriter<File>,
    path: PathBuf,
    header: DatasetHeader,
    written: u64,
    buf: Vec<u8>,
}

impl DatasetWriter {
    pub fn create(path: &Path, header: DatasetHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io(path, e);
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        Ok(DatasetWriter {
            out,
            path: path.to_path_buf(),
            header,
            written: 0,
            buf: Vec::new(),
        })
    }

    pub fn write(&mut self, record: &SampleRecord) -> Result<()> {
        if record.y.len() != self.header.m || record.y_r.len() != self.header.n {
            return Err(Error::Shape(format!(
                "record has |y| = {}, |y_r| = {}; header says M = {}, N = {}",
                record.y.len(),
                record.y_r.len(),
                self.header.m,
                self.header.n
            )));
        }
        self.buf.clear();
        record.encode(&mut self.buf);
        self.out.write_all(&self.buf).map_err(|e| Error::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetHeader> {
        if self.written != self.header.sample_count {
            return Err(Error::Header(format!(
                "wrote {} records, header declares {}",
                self.written, self.header.sample_count
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.header)
    }
}

/// Streaming reader; yields records in index order without loading the file.
pub struct DatasetReader {
    header: DatasetHeader,
    input: BufReader<File>,
    path: PathBuf,
    next_index: u64,
    buf: Vec<u8>,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut input = BufReader::new(file);
        let truncated = |expected: u64| Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: file_len,
        };
        let mut prefix = [0u8; 12];
        if file_len < 12 {
            return Err(if file_len >= 4 && !Self::magic_ok(path)? {
                Error::BadMagic(path.to_path_buf())
            } else {
                truncated(12)
            });
        }
        input.read_exact(&mut prefix).map_err(|e| Error::io(path, e))?;
        if &prefix[..4] != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let version = u32::from_le_bytes(prefix[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(prefix[8..12].try_into().expect("4 bytes")) as u64;
        if file_len < 12 + header_len {
            return Err(truncated(12 + header_len));
        }
        let mut json = vec![0u8; header_len as usize];
        input.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Header(format!("{}: {e}", path.display())))?;
        header.verify_digest()?;
        let expected = 12 + header_len + header.sample_count * header.record_size() as u64;
        if file_len < expected {
            return Err(truncated(expected));
        }
        if file_len > expected {
            return Err(Error::Header(format!(
                "{} has {} trailing bytes after the declared records",
                path.display(),
                file_len - expected
            )));
        }
        let buf = vec![0u8; header.record_size()];
        Ok(DatasetReader {
            header,
            input,
            path: path.to_path_buf(),
            next_index: 0,
            buf,
        })
    }

    fn magic_ok(path: &Path) -> Result<bool> {
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut m = [0u8; 4];
        f.read_exact(&mut m).map_err(|e| Error::io(path, e))?;
        Ok(&m == MAGIC)
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_index >= self.header.sample_count {
            return None;
        }
        if let Err(e) = self.input.read_exact(&mut self.buf) {
            self.next_index = self.header.sample_count;
            return Some(Err(if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Truncated {
                    path: self.path.clone(),
                    expected: self.header.sample_count,
                    found: self.next_index,
                }
            } else {
                Error::io(&self.path, e)
            }));
        }
        let record = SampleRecord::decode(&self.buf, self.header.m, self.header.n, self.next_index);
        self.next_index += 1;
        Some(Ok(record))
    }
}

/// Opens a dataset: header plus a streaming record iterator.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, DatasetReader)> {
    let reader = DatasetReader::open(path)?;
    Ok((reader.header().clone(), reader))
}

/// Reads every record into memory.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    let (header, reader) = read_dataset(path)?;
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}
