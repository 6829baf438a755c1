//! Single-file uncompressed NIfTI-1 reader and writer.
//!
//! Endianness is auto-detected from `sizeof_hdr`; supported on-disk element
//! types are uint8 (code 2), int16 (code 4), and float32 (code 16). The
//! scaling `scl_slope` / `scl_inter` is applied when the slope is nonzero.
//! Data is returned in `(x, y, z[, t])` index order.

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

use crate::tensor::Tensor;

pub const HEADER_SIZE: usize = 348;
/// Smallest well-formed single-file NIfTI-1: header + 4 padding bytes.
pub const MIN_FILE_SIZE: usize = 352;

pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("truncated stream: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic {0:?} (expected \"n+1\\0\" or \"ni1\\0\")")]
    BadMagic([u8; 4]),
    #[error("sizeof_hdr is {0} under both byte orders (expected 348)")]
    BadHeaderSize(i32),
    #[error("unsupported datatype code {0} (supported: 2=uint8, 4=int16, 16=float32)")]
    UnsupportedDatatype(i16),
    #[error("invalid dim[0] = {0} (must be in 1..=7)")]
    BadDimCount(i16),
    #[error("non-positive extent {extent} at dim[{axis}]")]
    BadExtent { axis: usize, extent: i16 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nifti1Header {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    /// Detected byte order of the source stream.
    pub big_endian: bool,
}

impl Nifti1Header {
    /// Extents of the data array (dim[1..=dim[0]]).
    pub fn shape(&self) -> Vec<usize> {
        (1..=self.dim[0] as usize)
            .map(|i| self.dim[i] as usize)
            .collect()
    }

    /// Voxel spacing in mm for the first three axes.
    pub fn spacing(&self) -> (f32, f32, f32) {
        (self.pixdim[1], self.pixdim[2], self.pixdim[3])
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl<'a> Reader<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        if self.big {
            BigEndian::read_i16(&self.bytes[off..])
        } else {
            LittleEndian::read_i16(&self.bytes[off..])
        }
    }
    fn f32_at(&self, off: usize) -> f32 {
        if self.big {
            BigEndian::read_f32(&self.bytes[off..])
        } else {
            LittleEndian::read_f32(&self.bytes[off..])
        }
    }
}

/// Parse header and payload from a full in-memory NIfTI-1 stream.
pub fn parse_nifti1(bytes: &[u8]) -> Result<(Nifti1Header, Tensor<f32>), NiftiError> {
    if bytes.len() < MIN_FILE_SIZE {
        return Err(NiftiError::Truncated {
            need: MIN_FILE_SIZE,
            have: bytes.len(),
        });
    }
    let le = LittleEndian::read_i32(&bytes[0..4]);
    let be = BigEndian::read_i32(&bytes[0..4]);
    let big = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(NiftiError::BadHeaderSize(le)),
    };
    let r = Reader { bytes, big };

    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[344..348]);
    if &magic != MAGIC_SINGLE && &magic != MAGIC_PAIR {
        return Err(NiftiError::BadMagic(magic));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16_at(40 + 2 * i);
    }
    if !(1..=7).contains(&dim[0]) {
        return Err(NiftiError::BadDimCount(dim[0]));
    }
    for axis in 1..=dim[0] as usize {
        if dim[axis] <= 0 {
            return Err(NiftiError::BadExtent {
                axis,
                extent: dim[axis],
            });
        }
    }
    let datatype = r.i16_at(70);
    let bitpix = r.i16_at(72);
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32_at(76 + 4 * i);
    }
    let header = Nifti1Header {
        sizeof_hdr: 348,
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset: r.f32_at(108),
        scl_slope: r.f32_at(112),
        scl_inter: r.f32_at(116),
        magic,
        big_endian: big,
    };

    let elem_size = match datatype {
        DT_UINT8 => 1usize,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let shape = header.shape();
    let n: usize = shape.iter().product();
    let offset = (header.vox_offset.max(MIN_FILE_SIZE as f32)) as usize;
    let need = offset + n * elem_size;
    if bytes.len() < need {
        return Err(NiftiError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let payload = &bytes[offset..offset + n * elem_size];

    let apply_scale = header.scl_slope != 0.0
        && !(header.scl_slope == 1.0 && header.scl_inter == 0.0);
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let v = match datatype {
            DT_UINT8 => payload[i] as f32,
            DT_INT16 => {
                if big {
                    BigEndian::read_i16(&payload[2 * i..]) as f32
                } else {
                    LittleEndian::read_i16(&payload[2 * i..]) as f32
                }
            }
            _ => {
                if big {
                    BigEndian::read_f32(&payload[4 * i..])
                } else {
                    LittleEndian::read_f32(&payload[4 * i..])
                }
            }
        };
        raw.push(if apply_scale {
            v * header.scl_slope + header.scl_inter
        } else {
            v
        });
    }

    // Source order is x-fastest; our row-major tensors vary the last axis
    // fastest, so transpose into (x, y, z[, t]) index order.
    let mut data = vec![0f32; n];
    let rank = shape.len();
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * shape[i + 1];
    }
    let mut coord = vec![0usize; rank];
    for (src_idx, &v) in raw.iter().enumerate() {
        let mut rem = src_idx;
        for (i, c) in coord.iter_mut().enumerate() {
            *c = rem % shape[i];
            rem /= shape[i];
        }
        let dst: usize = coord.iter().zip(&out_strides).map(|(c, s)| c * s).sum();
        data[dst] = v;
    }

    Ok((header, Tensor::from_vec(data, &shape)))
}

/// Raw element values accepted by [`write_nifti1`].
pub enum NiftiPayload<'a> {
    Uint8(&'a [u8]),
    Int16(&'a [i16]),
    Float32(&'a [f32]),
}

impl NiftiPayload<'_> {
    fn datatype(&self) -> (i16, i16) {
        match self {
            NiftiPayload::Uint8(_) => (DT_UINT8, 8),
            NiftiPayload::Int16(_) => (DT_INT16, 16),
            NiftiPayload::Float32(_) => (DT_FLOAT32, 32),
        }
    }
    fn len(&self) -> usize {
        match self {
            NiftiPayload::Uint8(v) => v.len(),
            NiftiPayload::Int16(v) => v.len(),
            NiftiPayload::Float32(v) => v.len(),
        }
    }
}

/// Serialize a single-file NIfTI-1 stream. `values` must be in x-fastest
/// order (the on-disk convention) and match the product of `shape`.
pub fn write_nifti1(
    shape: &[usize],
    pixdim: (f32, f32, f32),
    scl_slope: f32,
    scl_inter: f32,
    big_endian: bool,
    values: NiftiPayload<'_>,
) -> Vec<u8> {
    assert!((1..=7).contains(&shape.len()), "rank must be 1..=7");
    let n: usize = shape.iter().product();
    assert_eq!(values.len(), n, "payload length does not match shape");
    let (datatype, bitpix) = values.datatype();

    let mut out = vec![0u8; MIN_FILE_SIZE];
    let w_i32 = |buf: &mut [u8], v: i32| {
        if big_endian {
            BigEndian::write_i32(buf, v)
        } else {
            LittleEndian::write_i32(buf, v)
        }
    };
    let w_i16 = |buf: &mut [u8], v: i16| {
        if big_endian {
            BigEndian::write_i16(buf, v)
        } else {
            LittleEndian::write_i16(buf, v)
        }
    };
    let w_f32 = |buf: &mut [u8], v: f32| {
        if big_endian {
            BigEndian::write_f32(buf, v)
        } else {
            LittleEndian::write_f32(buf, v)
        }
    };

    w_i32(&mut out[0..4], 348);
    w_i16(&mut out[40..42], shape.len() as i16);
    for (i, &s) in shape.iter().enumerate() {
        w_i16(&mut out[42 + 2 * i..44 + 2 * i], s as i16);
    }
    for i in shape.len()..7 {
        w_i16(&mut out[42 + 2 * i..44 + 2 * i], 1);
    }
    w_i16(&mut out[70..72], datatype);
    w_i16(&mut out[72..74], bitpix);
    w_f32(&mut out[76..80], 1.0); // pixdim[0]
    w_f32(&mut out[80..84], pixdim.0);
    w_f32(&mut out[84..88], pixdim.1);
    w_f32(&mut out[88..92], pixdim.2);
    for i in 4..8 {
        w_f32(&mut out[76 + 4 * i..80 + 4 * i], 1.0);
    }
    w_f32(&mut out[108..112], MIN_FILE_SIZE as f32);
    w_f32(&mut out[112..116], scl_slope);
    w_f32(&mut out[116..120], scl_inter);
    out[344..348].copy_from_slice(MAGIC_SINGLE);

    match values {
        NiftiPayload::Uint8(v) => out.extend_from_slice(v),
        NiftiPayload::Int16(v) => {
            let mut buf = [0u8; 2];
            for &x in v {
                w_i16(&mut buf, x);
                out.extend_from_slice(&buf);
            }
        }
        NiftiPayload::Float32(v) => {
            let mut buf = [0u8; 4];
            for &x in v {
                w_f32(&mut buf, x);
                out.extend_from_slice(&buf);
            }
        }
    }
    out
}
