//! Volume ingestion: a minimal NIfTI-1 reader, the RAWVOL fixture container,
//! and the JSON-lines subject manifest.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("bad magic: not a recognised volume stream")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated data: need {needed} bytes, have {available}")]
    TruncatedData { needed: usize, available: usize },
    #[error("not a 3D volume (dim[0] = {0})")]
    NonVolumetric(i16),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate subject id {0:?}")]
    DuplicateSubject(String),
    #[error("CDR {0} outside [0, 2]")]
    CdrOutOfRange(f64),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// A 3D scalar field stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f64>,
    value_range: (f64, f64),
    source_id: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!("zero extent in dims {dims:?}")));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(VolumeError::Invalid(format!(
                "{} voxels for dims {dims:?} (expected {expected})",
                voxels.len()
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &voxels {
            if !v.is_finite() {
                return Err(VolumeError::Invalid("non-finite voxel value".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok(Self {
            dims,
            voxels,
            value_range: (lo, hi),
            source_id: source_id.into(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.value_range
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }
}

// ---------------------------------------------------------------------------
// NIfTI-1
// ---------------------------------------------------------------------------

const NIFTI1_HEADER_SIZE: usize = 348;
const NIFTI1_DEFAULT_VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const MAGIC: usize = 344;
}

/// NIfTI-1 datatypes this reader accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    UInt8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::UInt8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::UInt8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(VolumeError::UnsupportedDatatype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            NiftiDatatype::UInt8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[at..at + N]);
        out
    }

    fn i16(&self, at: usize) -> i16 {
        let b = self.arr::<2>(at);
        match self.order {
            ByteOrder::Little => i16::from_le_bytes(b),
            ByteOrder::Big => i16::from_be_bytes(b),
        }
    }

    fn i32(&self, at: usize) -> i32 {
        let b = self.arr::<4>(at);
        match self.order {
            ByteOrder::Little => i32::from_le_bytes(b),
            ByteOrder::Big => i32::from_be_bytes(b),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_bits(self.i32(at) as u32)
    }
}

/// The header fields the reader inspects. Orientation codes are carried
/// along but never applied to the voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub byte_order: ByteOrder,
    pub dim: [i16; 8],
    pub datatype: NiftiDatatype,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
}

pub fn parse_nifti_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < NIFTI1_HEADER_SIZE {
        return Err(VolumeError::BadMagic);
    }
    if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != b"n+1\0" {
        return Err(VolumeError::BadMagic);
    }
    let sizeof_hdr = [
        (ByteOrder::Little, i32::from_le_bytes(bytes[0..4].try_into().unwrap())),
        (ByteOrder::Big, i32::from_be_bytes(bytes[0..4].try_into().unwrap())),
    ];
    let byte_order = sizeof_hdr
        .iter()
        .find(|(_, v)| *v == NIFTI1_HEADER_SIZE as i32)
        .map(|(o, _)| *o)
        .ok_or(VolumeError::BadMagic)?;
    let r = Reader { bytes, order: byte_order };
    debug_assert_eq!(r.i32(offsets::SIZEOF_HDR), NIFTI1_HEADER_SIZE as i32);

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16(offsets::DIM + 2 * i);
    }
    if dim[0] != 3 {
        return Err(VolumeError::NonVolumetric(dim[0]));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(VolumeError::Invalid(format!("non-positive extent in dim {dim:?}")));
    }
    let datatype = NiftiDatatype::from_code(r.i16(offsets::DATATYPE))?;
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(offsets::PIXDIM + 4 * i);
    }
    let vox_offset = r.f32(offsets::VOX_OFFSET);
    let vox_offset = if vox_offset.is_finite() && vox_offset >= NIFTI1_HEADER_SIZE as f32 {
        vox_offset as usize
    } else {
        NIFTI1_DEFAULT_VOX_OFFSET
    };
    Ok(NiftiHeader {
        byte_order,
        dim,
        datatype,
        bitpix: r.i16(offsets::BITPIX),
        pixdim,
        vox_offset,
        scl_slope: r.f32(offsets::SCL_SLOPE),
        scl_inter: r.f32(offsets::SCL_INTER),
        qform_code: r.i16(offsets::QFORM_CODE),
        sform_code: r.i16(offsets::SFORM_CODE),
    })
}

/// Parse a single-file NIfTI-1 image (`.nii`) into a [`Volume`].
///
/// Accepts uint8, int16 and float32 data in either byte order. A nonzero
/// `scl_slope` is applied as `slope * v + inter`.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    let hdr = parse_nifti_header(bytes)?;
    let dims = [hdr.dim[1] as usize, hdr.dim[2] as usize, hdr.dim[3] as usize];
    let count = dims[0] * dims[1] * dims[2];
    let needed = hdr.vox_offset + count * hdr.datatype.size();
    if bytes.len() < needed {
        return Err(VolumeError::TruncatedData {
            needed,
            available: bytes.len(),
        });
    }
    let r = Reader {
        bytes,
        order: hdr.byte_order,
    };
    let base = hdr.vox_offset;
    let raw: Vec<f64> = match hdr.datatype {
        NiftiDatatype::UInt8 => bytes[base..base + count].iter().map(|&b| b as f64).collect(),
        NiftiDatatype::Int16 => (0..count).map(|i| r.i16(base + 2 * i) as f64).collect(),
        NiftiDatatype::Float32 => (0..count).map(|i| r.f32(base + 4 * i) as f64).collect(),
    };
    let voxels = if hdr.scl_slope != 0.0 && hdr.scl_slope.is_finite() {
        let (m, b) = (hdr.scl_slope as f64, hdr.scl_inter as f64);
        if m == 1.0 && b == 0.0 {
            raw
        } else {
            raw.into_iter().map(|v| m * v + b).collect()
        }
    } else {
        raw
    };
    Volume::new(dims, voxels, "")
}

/// Serialize a volume as single-file NIfTI-1. Values are cast to the target
/// datatype (rounded and saturated for integer types).
pub fn write_nifti(volume: &Volume, datatype: NiftiDatatype, order: ByteOrder) -> Vec<u8> {
    let [nx, ny, nz] = volume.dims();
    let mut out = vec![0u8; NIFTI1_DEFAULT_VOX_OFFSET];
    let put16 = |buf: &mut [u8], at: usize, v: i16| {
        let b = match order {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        };
        buf[at..at + 2].copy_from_slice(&b);
    };
    let put32 = |buf: &mut [u8], at: usize, v: u32| {
        let b = match order {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        };
        buf[at..at + 4].copy_from_slice(&b);
    };
    put32(&mut out, offsets::SIZEOF_HDR, NIFTI1_HEADER_SIZE as u32);
    let dim = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put16(&mut out, offsets::DIM + 2 * i, *d);
    }
    put16(&mut out, offsets::DATATYPE, datatype.code());
    put16(&mut out, offsets::BITPIX, (datatype.size() * 8) as i16);
    for i in 0..8 {
        put32(&mut out, offsets::PIXDIM + 4 * i, 1.0f32.to_bits());
    }
    put32(&mut out, offsets::VOX_OFFSET, (NIFTI1_DEFAULT_VOX_OFFSET as f32).to_bits());
    put32(&mut out, offsets::SCL_SLOPE, 1.0f32.to_bits());
    out[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");

    out.reserve(volume.voxels().len() * datatype.size());
    for &v in volume.voxels() {
        match datatype {
            NiftiDatatype::UInt8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            NiftiDatatype::Int16 => {
                let q = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.extend_from_slice(&match order {
                    ByteOrder::Little => q.to_le_bytes(),
                    ByteOrder::Big => q.to_be_bytes(),
                });
            }
            NiftiDatatype::Float32 => {
                let bits = (v as f32).to_bits();
                out.extend_from_slice(&match order {
                    ByteOrder::Little => bits.to_le_bytes(),
                    ByteOrder::Big => bits.to_be_bytes(),
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// RAWVOL
// ---------------------------------------------------------------------------

const RAWVOL_MAGIC: &[u8; 4] = b"RVOL";
const RAWVOL_VERSION: u8 = 1;
const RAWVOL_HEADER_SIZE: usize = 4 + 1 + 1 + 12;

/// Layout: `"RVOL" | u8 version | u8 endianness (0) | u32 nx, ny, nz |
/// f32 voxels`, x-fastest, all little-endian.
///
/// Voxels are stored as f32; volumes whose values are f32-representable
/// roundtrip bit-exactly.
pub fn write_raw_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAWVOL_HEADER_SIZE + 4 * volume.voxels().len());
    out.extend_from_slice(RAWVOL_MAGIC);
    out.push(RAWVOL_VERSION);
    out.push(0);
    for d in volume.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in volume.voxels() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn parse_raw_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 6 || &bytes[..4] != RAWVOL_MAGIC || bytes[4] != RAWVOL_VERSION || bytes[5] != 0 {
        return Err(VolumeError::BadMagic);
    }
    if bytes.len() < RAWVOL_HEADER_SIZE {
        return Err(VolumeError::TruncatedData {
            needed: RAWVOL_HEADER_SIZE,
            available: bytes.len(),
        });
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let dims = [u32_at(6), u32_at(10), u32_at(14)];
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| VolumeError::Invalid(format!("dims {dims:?} overflow")))?;
    let needed = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(RAWVOL_HEADER_SIZE))
        .ok_or_else(|| VolumeError::Invalid(format!("dims {dims:?} overflow")))?;
    if bytes.len() < needed {
        return Err(VolumeError::TruncatedData {
            needed,
            available: bytes.len(),
        });
    }
    let voxels = bytes[RAWVOL_HEADER_SIZE..needed]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::new(dims, voxels, "")
}

/// Dispatch on the leading magic bytes: RAWVOL or NIfTI-1.
pub fn parse_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(RAWVOL_MAGIC) {
        parse_raw_volume(bytes)
    } else {
        parse_nifti(bytes)
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    HC,
    AD,
}

impl Label {
    pub const COUNT: usize = 2;

    pub fn class_index(self) -> usize {
        match self {
            Label::HC => 0,
            Label::AD => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::HC),
            1 => Some(Label::AD),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::HC => "HC",
            Label::AD => "AD",
        })
    }
}

pub fn label_from_cdr(cdr: f64) -> Result<Label> {
    if !(0.0..=2.0).contains(&cdr) {
        return Err(VolumeError::CdrOutOfRange(cdr));
    }
    Ok(if cdr == 0.0 { Label::HC } else { Label::AD })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub cdr: f64,
    pub label: Label,
    pub volume_path: String,
}

impl SubjectRecord {
    pub fn new(subject_id: impl Into<String>, cdr: f64, volume_path: impl Into<String>) -> Result<Self> {
        Ok(Self {
            subject_id: subject_id.into(),
            cdr,
            label: label_from_cdr(cdr)?,
            volume_path: volume_path.into(),
        })
    }
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    subject_id: String,
    cdr: f64,
    volume_path: String,
}

/// Parse a JSON-lines manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<SubjectRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| VolumeError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.subject_id.is_empty() {
            return Err(VolumeError::MalformedLine {
                line: line_no,
                message: "empty subject_id".into(),
            });
        }
        let label = label_from_cdr(parsed.cdr)?;
        if !seen.insert(parsed.subject_id.clone()) {
            return Err(VolumeError::DuplicateSubject(parsed.subject_id));
        }
        records.push(SubjectRecord {
            subject_id: parsed.subject_id,
            cdr: parsed.cdr,
            label,
            volume_path: parsed.volume_path,
        });
    }
    Ok(records)
}

pub fn write_manifest(records: &[SubjectRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = ManifestLine {
            subject_id: r.subject_id.clone(),
            cdr: r.cdr,
            volume_path: r.volume_path.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
        out.push('\n');
    }
    out
}
