//! Activation record container ("MACT1") and contrastive pairing.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes   4D 41 43 54 31 00 00 00  ("MACT1\0\0\0")
//! header_len     u32
//! header         header_len bytes of UTF-8 JSON
//!                {"model_id","concept","d","L","dtype":"f32le","count"}
//! count records, each:
//!   query_id           u64
//!   truncation_index   u32
//!   layer_index        u32
//!   variant            u8   0 = Reference, 1 = Experimental
//!   role               u8   0 = TrainContrastive, 1 = InferenceFirstToken
//!   first_token_len    u16  followed by that many UTF-8 bytes
//!   vector             d x f32
//! ```
//!
//! The debug alternative is JSON lines: the header object on the first line,
//! then one record object per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 8] = [0x4D, 0x41, 0x43, 0x54, 0x31, 0x00, 0x00, 0x00];
/// Bytes of a record before its token text and vector.
pub const RECORD_FIXED_BYTES: usize = 8 + 4 + 4 + 1 + 1 + 2;
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a MACT container: bad magic bytes")]
    BadMagic,
    #[error("unsupported MACT format version byte 0x{0:02x}")]
    UnsupportedVersion(u8),
    #[error("invalid container header: {0}")]
    Header(String),
    #[error("record {index} rejected: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("corrupt container at byte offset {offset} (record {record}): {reason}")]
    Corrupt {
        offset: u64,
        record: u64,
        reason: String,
    },
    #[error("debug line {line}: {reason}")]
    DebugLine { line: usize, reason: String },
    #[error(
        "ambiguous records: duplicate (query {query_id}, k {truncation_index}, layer {layer_index}, {variant:?})"
    )]
    DuplicateArm {
        query_id: u64,
        truncation_index: u32,
        layer_index: u32,
        variant: Variant,
    },
    #[error("record {index} has role {found:?}, expected {expected:?}")]
    RoleMismatch {
        index: usize,
        expected: Role,
        found: Role,
    },
    #[error(
        "arms of (query {query_id}, k {truncation_index}) differ in dimension: {plus} vs {minus}"
    )]
    ArmDimensionMismatch {
        query_id: u64,
        truncation_index: u32,
        plus: usize,
        minus: usize,
    },
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: i64, layers: u32 },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Which instruction arm produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Reference,
    Experimental,
}

impl Variant {
    fn to_byte(self) -> u8 {
        match self {
            Variant::Reference => 0,
            Variant::Experimental => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Variant::Reference),
            1 => Some(Variant::Experimental),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    TrainContrastive,
    InferenceFirstToken,
}

impl Role {
    fn to_byte(self) -> u8 {
        match self {
            Role::TrainContrastive => 0,
            Role::InferenceFirstToken => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::TrainContrastive),
            1 => Some(Role::InferenceFirstToken),
            _ => None,
        }
    }
}

/// Hidden state at the last token position of one (query, prefix, layer, arm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub query_id: u64,
    pub variant: Variant,
    pub truncation_index: u32,
    pub layer_index: u32,
    pub role: Role,
    #[serde(
        default,
        rename = "first_token",
        skip_serializing_if = "Option::is_none"
    )]
    pub first_token_text: Option<String>,
    pub vector: Vec<f32>,
}

impl ActivationRecord {
    pub fn contrastive(
        query_id: u64,
        truncation_index: u32,
        layer_index: u32,
        variant: Variant,
        vector: Vec<f32>,
    ) -> Self {
        Self {
            query_id,
            variant,
            truncation_index,
            layer_index,
            role: Role::TrainContrastive,
            first_token_text: None,
            vector,
        }
    }

    pub fn first_token(
        query_id: u64,
        layer_index: u32,
        first_token_text: impl Into<String>,
        vector: Vec<f32>,
    ) -> Self {
        Self {
            query_id,
            variant: Variant::Experimental,
            truncation_index: 1,
            layer_index,
            role: Role::InferenceFirstToken,
            first_token_text: Some(first_token_text.into()),
            vector,
        }
    }

    /// Serialized size of this record in a MACT1 body.
    pub fn encoded_len(&self) -> usize {
        RECORD_FIXED_BYTES
            + self.first_token_text.as_ref().map_or(0, String::len)
            + 4 * self.vector.len()
    }

    fn check(&self, header: &ContainerHeader) -> std::result::Result<(), String> {
        if self.vector.len() != header.d {
            return Err(format!(
                "vector has dimension {}, container declares {}",
                self.vector.len(),
                header.d
            ));
        }
        if self.layer_index >= header.layers {
            return Err(format!(
                "layer_index {} >= layer count {}",
                self.layer_index, header.layers
            ));
        }
        if self.truncation_index < 1 {
            return Err("truncation_index must be >= 1".into());
        }
        match (self.role, &self.first_token_text) {
            (Role::InferenceFirstToken, None) => {
                return Err("InferenceFirstToken record without first_token text".into())
            }
            (Role::TrainContrastive, Some(_)) => {
                return Err("TrainContrastive record carries first_token text".into())
            }
            (_, Some(t)) if t.len() > usize::from(u16::MAX) => {
                return Err(format!(
                    "first_token text is {} bytes, limit 65535",
                    t.len()
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

/// JSON header of a MACT1 container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub model_id: String,
    pub concept: String,
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: u32,
    pub dtype: String,
    pub count: u64,
}

impl ContainerHeader {
    pub fn new(
        model_id: impl Into<String>,
        concept: impl Into<String>,
        d: usize,
        layers: u32,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            concept: concept.into(),
            d,
            layers,
            dtype: DTYPE_F32LE.to_string(),
            count: 0,
        }
    }

    fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("header serializes")
    }

    /// Bytes taken by magic, length prefix and JSON header.
    pub fn encoded_len(&self) -> usize {
        MAGIC.len() + 4 + self.to_json().len()
    }

    fn validate(&self) -> Result<()> {
        if self.dtype != DTYPE_F32LE {
            return Err(StoreError::Header(format!(
                "unsupported dtype {:?}",
                self.dtype
            )));
        }
        if self.d == 0 {
            return Err(StoreError::Header("dimension d must be positive".into()));
        }
        if self.layers == 0 {
            return Err(StoreError::Header("layer count L must be positive".into()));
        }
        Ok(())
    }
}

/// Maps a possibly negative layer index (`-1` is the last layer) onto `0..layers`.
pub fn resolve_layer(index: i64, layers: u32) -> Result<u32> {
    let resolved = if index < 0 {
        i64::from(layers) + index
    } else {
        index
    };
    if resolved < 0 || resolved >= i64::from(layers) {
        return Err(StoreError::LayerOutOfRange {
            layer: index,
            layers,
        });
    }
    Ok(resolved as u32)
}

/// Inverse of [`resolve_layer`] for display: layer `L - j` becomes `-j`.
pub fn layer_from_end(layer_index: u32, layers: u32) -> i64 {
    i64::from(layer_index) - i64::from(layers)
}

fn validate_all(header: &ContainerHeader, records: &[ActivationRecord]) -> Result<()> {
    header.validate()?;
    for (index, record) in records.iter().enumerate() {
        record
            .check(header)
            .map_err(|reason| StoreError::InvalidRecord { index, reason })?;
    }
    Ok(())
}

/// Writes a MACT1 stream. Every record is validated before the first byte is
/// written; the header's `count` is taken from `records`.
pub fn write_records<W: Write>(
    header: &ContainerHeader,
    records: &[ActivationRecord],
    sink: W,
) -> Result<usize> {
    validate_all(header, records)?;
    let header = ContainerHeader {
        count: records.len() as u64,
        ..header.clone()
    };
    let json = header.to_json();
    let json_len =
        u32::try_from(json.len()).map_err(|_| StoreError::Header("header exceeds 4 GiB".into()))?;

    let mut out = BufWriter::new(sink);
    out.write_all(&MAGIC)?;
    out.write_all(&json_len.to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for record in records {
        buf.clear();
        encode_record(record, &mut buf);
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(records.len())
}

fn encode_record(record: &ActivationRecord, buf: &mut Vec<u8>) {
    buf.reserve(record.encoded_len());
    buf.extend_from_slice(&record.query_id.to_le_bytes());
    buf.extend_from_slice(&record.truncation_index.to_le_bytes());
    buf.extend_from_slice(&record.layer_index.to_le_bytes());
    buf.push(record.variant.to_byte());
    buf.push(record.role.to_byte());
    let text = record.first_token_text.as_deref().unwrap_or("");
    buf.extend_from_slice(&(text.len() as u16).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    for v in &record.vector {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes a container file atomically: data goes to a temporary sibling that
/// is renamed into place only after a successful flush and sync.
pub fn write_container(
    path: &Path,
    header: &ContainerHeader,
    records: &[ActivationRecord],
) -> Result<usize> {
    validate_all(header, records)?;
    crate::io::write_atomic(path, |file| {
        let n = write_records(header, records, &mut *file)?;
        Ok::<_, StoreError>(n)
    })
}

/// Streaming MACT1 reader. Records come back in file order; a truncated or
/// malformed record ends iteration with a [`StoreError::Corrupt`] naming the
/// byte offset where that record starts.
pub struct RecordReader<R> {
    source: R,
    header: ContainerHeader,
    offset: u64,
    next_record: u64,
    failed: bool,
    vector_buf: Vec<u8>,
}

impl<R: Read> RecordReader<R> {
    pub fn new(mut source: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_prefix(&mut source, &mut magic)?;
        if magic[..4] != MAGIC[..4] || magic[5..] != MAGIC[5..] {
            return Err(StoreError::BadMagic);
        }
        if magic[4] != MAGIC[4] {
            return Err(StoreError::UnsupportedVersion(magic[4]));
        }
        let mut len = [0u8; 4];
        read_prefix(&mut source, &mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        read_prefix(&mut source, &mut json)?;
        let header: ContainerHeader =
            serde_json::from_slice(&json).map_err(|e| StoreError::Header(e.to_string()))?;
        header.validate()?;
        Ok(Self {
            source,
            offset: (MAGIC.len() + 4 + len) as u64,
            vector_buf: vec![0u8; header.d * 4],
            header,
            next_record: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    fn corrupt(&mut self, start: u64, reason: impl Into<String>) -> StoreError {
        self.failed = true;
        StoreError::Corrupt {
            offset: start,
            record: self.next_record,
            reason: reason.into(),
        }
    }

    fn read_one(&mut self) -> Result<ActivationRecord> {
        let start = self.offset;
        let mut fixed = [0u8; RECORD_FIXED_BYTES];
        if let Err(e) = self.source.read_exact(&mut fixed) {
            return Err(self.eof_or_io(start, e, "record header"));
        }
        let query_id = u64::from_le_bytes(fixed[0..8].try_into().unwrap());
        let truncation_index = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        let layer_index = u32::from_le_bytes(fixed[12..16].try_into().unwrap());
        let variant = Variant::from_byte(fixed[16])
            .ok_or_else(|| self.corrupt(start, format!("invalid variant byte {}", fixed[16])))?;
        let role = Role::from_byte(fixed[17])
            .ok_or_else(|| self.corrupt(start, format!("invalid role byte {}", fixed[17])))?;
        let text_len = usize::from(u16::from_le_bytes([fixed[18], fixed[19]]));
        let mut text = vec![0u8; text_len];
        if let Err(e) = self.source.read_exact(&mut text) {
            return Err(self.eof_or_io(start, e, "first token text"));
        }
        let mut vector_buf = std::mem::take(&mut self.vector_buf);
        let read = self.source.read_exact(&mut vector_buf);
        let vector: Vec<f32> = vector_buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.vector_buf = vector_buf;
        if let Err(e) = read {
            return Err(self.eof_or_io(start, e, "vector"));
        }

        let first_token_text = match role {
            Role::TrainContrastive if text_len > 0 => {
                return Err(self.corrupt(start, "TrainContrastive record carries token text"))
            }
            Role::TrainContrastive => None,
            Role::InferenceFirstToken => match String::from_utf8(text) {
                Ok(s) => Some(s),
                Err(_) => return Err(self.corrupt(start, "first token text is not UTF-8")),
            },
        };
        if layer_index >= self.header.layers {
            return Err(self.corrupt(
                start,
                format!("layer_index {layer_index} >= L {}", self.header.layers),
            ));
        }
        if truncation_index < 1 {
            return Err(self.corrupt(start, "truncation_index is 0"));
        }
        self.offset += (RECORD_FIXED_BYTES + text_len + 4 * self.header.d) as u64;
        self.next_record += 1;
        Ok(ActivationRecord {
            query_id,
            variant,
            truncation_index,
            layer_index,
            role,
            first_token_text,
            vector,
        })
    }

    fn eof_or_io(&mut self, start: u64, err: io::Error, part: &str) -> StoreError {
        if err.kind() == io::ErrorKind::UnexpectedEof {
            self.corrupt(start, format!("truncated record ({part} incomplete)"))
        } else {
            self.failed = true;
            StoreError::Io(err)
        }
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        loop {
            match self.source.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => {
                    let offset = self.offset;
                    return Err(self.corrupt(offset, "trailing bytes after declared record count"));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    self.failed = true;
                    return Err(StoreError::Io(e));
                }
            }
        }
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.next_record == self.header.count {
            self.failed = true;
            return self.check_trailing().err().map(Err);
        }
        Some(self.read_one())
    }
}

fn read_prefix<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<()> {
    source.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StoreError::BadMagic
        } else {
            StoreError::Io(e)
        }
    })
}

/// Reads a whole MACT1 stream.
pub fn read_records<R: Read>(source: R) -> Result<(ContainerHeader, Vec<ActivationRecord>)> {
    let mut reader = RecordReader::new(source)?;
    let mut records = Vec::with_capacity(reader.header().count.min(1 << 20) as usize);
    for record in reader.by_ref() {
        records.push(record?);
    }
    Ok((reader.header.clone(), records))
}

pub fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<ActivationRecord>)> {
    read_records(BufReader::new(File::open(path)?))
}

/// Writes the JSON-lines debug form: header object first, then one record per line.
pub fn write_debug_jsonl<W: Write>(
    header: &ContainerHeader,
    records: &[ActivationRecord],
    sink: W,
) -> Result<usize> {
    validate_all(header, records)?;
    let header = ContainerHeader {
        count: records.len() as u64,
        ..header.clone()
    };
    let mut out = BufWriter::new(sink);
    serde_json::to_writer(&mut out, &header).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

pub fn read_debug_jsonl<R: BufRead>(source: R) -> Result<(ContainerHeader, Vec<ActivationRecord>)> {
    let mut lines = source.lines().enumerate();
    let (_, first) = lines.next().ok_or(StoreError::DebugLine {
        line: 1,
        reason: "missing header line".into(),
    })?;
    let header: ContainerHeader =
        serde_json::from_str(&first?).map_err(|e| StoreError::DebugLine {
            line: 1,
            reason: e.to_string(),
        })?;
    header.validate()?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ActivationRecord =
            serde_json::from_str(&line).map_err(|e| StoreError::DebugLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
        record
            .check(&header)
            .map_err(|reason| StoreError::DebugLine {
                line: i + 1,
                reason,
            })?;
        records.push(record);
    }
    if records.len() as u64 != header.count {
        return Err(StoreError::Header(format!(
            "declared count {} but {} records present",
            header.count,
            records.len()
        )));
    }
    Ok((header, records))
}

/// The `(A+, A-)` element for one `(query, k, layer)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub query_id: u64,
    pub truncation_index: u32,
    pub layer_index: u32,
    /// Experimental arm.
    pub plus: Vec<f32>,
    /// Reference arm.
    pub minus: Vec<f32>,
    pub ordinal: usize,
}

/// A record whose partner arm is missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Orphan {
    pub query_id: u64,
    pub truncation_index: u32,
    pub layer_index: u32,
    pub present: Variant,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<ContrastivePair>,
    pub orphans: Vec<Orphan>,
}

type ArmSlots<'a> = (Option<&'a ActivationRecord>, Option<&'a ActivationRecord>);
/// `(layer, query, truncation)`.
type ArmKey = (u32, u64, u32);

fn collect_arms<'a>(
    records: &'a [ActivationRecord],
    layer: Option<u32>,
) -> Result<BTreeMap<ArmKey, ArmSlots<'a>>> {
    let mut slots: BTreeMap<ArmKey, ArmSlots<'a>> = BTreeMap::new();
    for (index, record) in records.iter().enumerate() {
        if record.role != Role::TrainContrastive {
            return Err(StoreError::RoleMismatch {
                index,
                expected: Role::TrainContrastive,
                found: record.role,
            });
        }
        if layer.is_some_and(|l| l != record.layer_index) {
            continue;
        }
        let slot = slots
            .entry((record.layer_index, record.query_id, record.truncation_index))
            .or_default();
        let arm = match record.variant {
            Variant::Experimental => &mut slot.0,
            Variant::Reference => &mut slot.1,
        };
        if arm.is_some() {
            return Err(StoreError::DuplicateArm {
                query_id: record.query_id,
                truncation_index: record.truncation_index,
                layer_index: record.layer_index,
                variant: record.variant,
            });
        }
        *arm = Some(record);
    }
    Ok(slots)
}

fn build_pairing<'a>(slots: impl Iterator<Item = (ArmKey, ArmSlots<'a>)>) -> Result<Pairing> {
    let mut pairing = Pairing::default();
    for ((layer_index, query_id, truncation_index), arms) in slots {
        match arms {
            (Some(plus), Some(minus)) => {
                if plus.vector.len() != minus.vector.len() {
                    return Err(StoreError::ArmDimensionMismatch {
                        query_id,
                        truncation_index,
                        plus: plus.vector.len(),
                        minus: minus.vector.len(),
                    });
                }
                let ordinal = pairing.pairs.len();
                pairing.pairs.push(ContrastivePair {
                    query_id,
                    truncation_index,
                    layer_index,
                    plus: plus.vector.clone(),
                    minus: minus.vector.clone(),
                    ordinal,
                });
            }
            (Some(_), None) | (None, Some(_)) => pairing.orphans.push(Orphan {
                query_id,
                truncation_index,
                layer_index,
                present: if arms.0.is_some() {
                    Variant::Experimental
                } else {
                    Variant::Reference
                },
            }),
            (None, None) => unreachable!("slots are created on insert"),
        }
    }
    Ok(pairing)
}

/// Pairs Experimental and Reference arms at one layer. Pairs are ordered by
/// `(query_id, truncation_index)` and numbered from zero in that order.
pub fn pair_contrastive(records: &[ActivationRecord], layer: u32) -> Result<Pairing> {
    build_pairing(collect_arms(records, Some(layer))?.into_iter())
}

/// [`pair_contrastive`] for every layer present, in one pass.
pub fn pair_all_layers(records: &[ActivationRecord]) -> Result<BTreeMap<u32, Pairing>> {
    let slots = collect_arms(records, None)?;
    let mut by_layer: BTreeMap<u32, Vec<(ArmKey, ArmSlots<'_>)>> = BTreeMap::new();
    for (key, arms) in slots {
        by_layer.entry(key.0).or_default().push((key, arms));
    }
    by_layer
        .into_iter()
        .map(|(layer, entries)| Ok((layer, build_pairing(entries.into_iter())?)))
        .collect()
}
