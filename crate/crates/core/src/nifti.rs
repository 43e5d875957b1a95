//! NIfTI-1 header parsing and scan validation.
//!
//! Only the fields needed to type and route an upload are decoded:
//! `sizeof_hdr` (offset 0), `dim` (40..56), `datatype` (70), `bitpix` (72)
//! and `magic` (344..348). Nothing past byte 348 is ever read.

use std::io::Read;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Modality, ScanRef};

pub const HEADER_SIZE: usize = 348;
const NIFTI2_HEADER_SIZE: i32 = 540;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_VOX_OFFSET: usize = 108;
const OFF_MAGIC: usize = 344;

pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NiftiError {
    #[error("header needs {HEADER_SIZE} bytes, got {0}")]
    TooShort(usize),
    #[error("unrecognized magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("NIfTI-2 headers (sizeof_hdr=540) are not supported; convert to NIfTI-1")]
    Nifti2Unsupported,
    #[error("sizeof_hdr is {0}, expected 348 in either byte order")]
    BadSizeofHdr(i32),
    #[error("invalid dim field {0:?}")]
    BadDims([i16; 8]),
    #[error("scan has {0} dimension(s); at least 3 spatial dimensions are required")]
    NotVolumetric(i16),
    #[error("gzip stream is corrupt: {0}")]
    BadGzip(String),
}

impl NiftiError {
    /// Stable error name, used in client-facing payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            NiftiError::TooShort(_) => "TooShort",
            NiftiError::BadMagic(_) => "BadMagic",
            NiftiError::Nifti2Unsupported | NiftiError::BadSizeofHdr(_) => "BadSizeofHdr",
            NiftiError::BadDims(_) => "BadDims",
            NiftiError::NotVolumetric(_) => "NotVolumetric",
            NiftiError::BadGzip(_) => "BadGzip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype_code: i16,
    pub bitpix: i16,
    pub magic: [u8; 4],
    pub endianness: Endianness,
}

struct Reader<'a> {
    buf: &'a [u8],
    endianness: Endianness,
}

impl Reader<'_> {
    fn i16_at(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        match self.endianness {
            Endianness::Little => i16::from_le_bytes(b),
            Endianness::Big => i16::from_be_bytes(b),
        }
    }
}

/// Parses the first 348 bytes of an uncompressed NIfTI-1 file.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TooShort(bytes.len()));
    }
    let buf = &bytes[..HEADER_SIZE];
    let first: [u8; 4] = buf[0..4].try_into().expect("4 bytes");
    let endianness = match (i32::from_le_bytes(first), i32::from_be_bytes(first)) {
        (348, _) => Endianness::Little,
        (_, 348) => Endianness::Big,
        (NIFTI2_HEADER_SIZE, _) | (_, NIFTI2_HEADER_SIZE) => {
            return Err(NiftiError::Nifti2Unsupported)
        }
        (le, _) => return Err(NiftiError::BadSizeofHdr(le)),
    };

    let magic: [u8; 4] = buf[OFF_MAGIC..OFF_MAGIC + 4].try_into().expect("4 bytes");
    if magic != MAGIC_SINGLE && magic != MAGIC_PAIR {
        return Err(NiftiError::BadMagic(magic));
    }

    let r = Reader { buf, endianness };
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16_at(OFF_DIM + 2 * i);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) || dim[1..=ndim as usize].iter().any(|&d| d < 1) {
        return Err(NiftiError::BadDims(dim));
    }

    Ok(NiftiHeader {
        sizeof_hdr: HEADER_SIZE as i32,
        dim,
        datatype_code: r.i16_at(OFF_DATATYPE),
        bitpix: r.i16_at(OFF_BITPIX),
        magic,
        endianness,
    })
}

/// Parses a `.nii` or `.nii.gz` file body. Gzip input is detected by its
/// magic bytes and only the first 348 decompressed bytes are inflated.
pub fn parse_file_bytes(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut header = Vec::with_capacity(HEADER_SIZE);
        GzDecoder::new(bytes)
            .take(HEADER_SIZE as u64)
            .read_to_end(&mut header)
            .map_err(|e| NiftiError::BadGzip(e.to_string()))?;
        parse_header(&header)
    } else {
        parse_header(bytes)
    }
}

impl NiftiHeader {
    /// A minimal valid single-file header.
    pub fn new(dim: [i16; 8], datatype_code: i16, bitpix: i16, endianness: Endianness) -> Self {
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            dim,
            datatype_code,
            bitpix,
            magic: MAGIC_SINGLE,
            endianness,
        }
    }

    pub fn ndim(&self) -> i16 {
        self.dim[0]
    }

    /// Serializes to a 348-byte header. Fields not modeled here are zero,
    /// except `vox_offset`, which is set to 352 for single-file headers.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        let le = self.endianness == Endianness::Little;
        let put16 = |out: &mut [u8], off: usize, v: i16| {
            let b = if le { v.to_le_bytes() } else { v.to_be_bytes() };
            out[off..off + 2].copy_from_slice(&b);
        };
        let size = if le {
            self.sizeof_hdr.to_le_bytes()
        } else {
            self.sizeof_hdr.to_be_bytes()
        };
        out[0..4].copy_from_slice(&size);
        for (i, &d) in self.dim.iter().enumerate() {
            put16(&mut out, OFF_DIM + 2 * i, d);
        }
        put16(&mut out, OFF_DATATYPE, self.datatype_code);
        put16(&mut out, OFF_BITPIX, self.bitpix);
        if self.magic == MAGIC_SINGLE {
            let v = 352f32;
            let b = if le { v.to_le_bytes() } else { v.to_be_bytes() };
            out[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4].copy_from_slice(&b);
        }
        out[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(&self.magic);
        out
    }
}

/// Turns a parsed header into a validated [`ScanRef`]. The modality comes
/// from the uploader; the header has no notion of it.
pub fn validate_scan(
    header: &NiftiHeader,
    declared: Modality,
    id: impl Into<String>,
    source_uri: impl Into<String>,
) -> Result<ScanRef, NiftiError> {
    if header.ndim() < 3 {
        return Err(NiftiError::NotVolumetric(header.ndim()));
    }
    let spatial = |i: usize| -> Result<u32, NiftiError> {
        u32::try_from(header.dim[i])
            .ok()
            .filter(|&d| d >= 1)
            .ok_or(NiftiError::BadDims(header.dim))
    };
    Ok(ScanRef {
        id: id.into(),
        modality: declared,
        source_uri: source_uri.into(),
        dims: [spatial(1)?, spatial(2)?, spatial(3)?],
        datatype_code: header.datatype_code,
        validated: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(dim: [i16; 8], endianness: Endianness) -> NiftiHeader {
        NiftiHeader::new(dim, 16, 32, endianness)
    }

    // Independent of the parser: reverse the bytes by hand.
    fn swap32(v: u32) -> u32 {
        ((v & 0xff) << 24) | ((v & 0xff00) << 8) | ((v >> 8) & 0xff00) | (v >> 24)
    }

    #[test]
    fn little_endian_example() {
        let bytes = header([3, 64, 64, 64, 1, 1, 1, 1], Endianness::Little).to_bytes();
        assert_eq!(&bytes[0..4], &[0x5c, 0x01, 0, 0]);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.endianness, Endianness::Little);
        assert_eq!(h.ndim(), 3);
        assert_eq!(h.dim, [3, 64, 64, 64, 1, 1, 1, 1]);
    }

    #[test]
    fn bad_magic_example() {
        let mut bytes = header([3, 64, 64, 64, 1, 1, 1, 1], Endianness::Little).to_bytes();
        bytes[344..348].copy_from_slice(b"xyz\0");
        assert_eq!(parse_header(&bytes), Err(NiftiError::BadMagic(*b"xyz\0")));
    }

    #[test]
    fn swapped_sizeof_hdr_means_big_endian() {
        assert_eq!(swap32(348), 1_543_569_408);
        let mut bytes = header([3, 10, 11, 12, 1, 1, 1, 1], Endianness::Big).to_bytes();
        assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 1_543_569_408);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.endianness, Endianness::Big);
        assert_eq!(h.sizeof_hdr, 348);
        assert_eq!(&h.dim[..4], &[3, 10, 11, 12]);

        bytes[0..4].copy_from_slice(&349i32.to_le_bytes());
        assert_eq!(parse_header(&bytes), Err(NiftiError::BadSizeofHdr(349)));
    }

    #[test]
    fn nifti2_rejected_distinctly() {
        let mut bytes = header([3, 2, 2, 2, 1, 1, 1, 1], Endianness::Little).to_bytes();
        bytes[0..4].copy_from_slice(&540i32.to_le_bytes());
        let err = parse_header(&bytes).unwrap_err();
        assert_eq!(err, NiftiError::Nifti2Unsupported);
        assert!(err.to_string().contains("NIfTI-2"));
    }

    #[test]
    fn too_short_and_bad_dims() {
        assert_eq!(parse_header(&[0u8; 10]), Err(NiftiError::TooShort(10)));
        let bytes = header([0, 1, 1, 1, 1, 1, 1, 1], Endianness::Little).to_bytes();
        assert!(matches!(parse_header(&bytes), Err(NiftiError::BadDims(_))));
        let bytes = header([8, 1, 1, 1, 1, 1, 1, 1], Endianness::Little).to_bytes();
        assert!(matches!(parse_header(&bytes), Err(NiftiError::BadDims(_))));
        let bytes = header([3, 64, 0, 64, 1, 1, 1, 1], Endianness::Little).to_bytes();
        assert!(matches!(parse_header(&bytes), Err(NiftiError::BadDims(_))));
        // Unused trailing dims may be anything.
        let bytes = header([2, 5, 5, 0, -3, 0, 0, 0], Endianness::Little).to_bytes();
        assert!(parse_header(&bytes).is_ok());
    }

    #[test]
    fn pair_magic_accepted() {
        let mut h = header([3, 4, 4, 4, 1, 1, 1, 1], Endianness::Little);
        h.magic = MAGIC_PAIR;
        assert_eq!(parse_header(&h.to_bytes()).unwrap(), h);
    }

    #[test]
    fn trailing_bytes_ignored() {
        let mut bytes = header([3, 4, 4, 4, 1, 1, 1, 1], Endianness::Little).to_bytes().to_vec();
        bytes.extend(std::iter::repeat(0xAB).take(4096));
        assert!(parse_header(&bytes).is_ok());
    }

    #[test]
    fn gzip_input() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let h = header([3, 91, 109, 91, 1, 1, 1, 1], Endianness::Little);
        let mut body = h.to_bytes().to_vec();
        body.extend(vec![0u8; 1000]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&body).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_file_bytes(&gz).unwrap(), h);
        assert!(matches!(parse_file_bytes(&gz[..20]), Err(_)));
    }

    #[test]
    fn validate_scan_examples() {
        let h = header([3, 64, 64, 64, 1, 1, 1, 1], Endianness::Little);
        let s = validate_scan(&h, Modality::Mri, "s1", "file:///a.nii").unwrap();
        assert_eq!(s.modality, Modality::Mri);
        assert_eq!(s.dims, [64, 64, 64]);
        assert!(s.validated);
        assert_eq!(s.datatype_code, 16);

        let h = header([1, 100, 1, 1, 1, 1, 1, 1], Endianness::Little);
        assert_eq!(
            validate_scan(&h, Modality::Pet, "s2", "x"),
            Err(NiftiError::NotVolumetric(1))
        );

        // 4-D time series: dim[4] is time, the first three are spatial.
        let h = header([4, 91, 109, 91, 30, 1, 1, 1], Endianness::Little);
        let s = validate_scan(&h, Modality::Pet, "s3", "x").unwrap();
        assert_eq!(s.dims, [91, 109, 91]);
    }

    fn arb_header() -> impl Strategy<Value = NiftiHeader> {
        (1i16..=7, prop::array::uniform7(1i16..=512), any::<i16>(), any::<i16>(), any::<bool>(), any::<bool>())
            .prop_map(|(n, rest, datatype, bitpix, big, pair)| {
                let mut dim = [n, 0, 0, 0, 0, 0, 0, 0];
                dim[1..].copy_from_slice(&rest);
                NiftiHeader {
                    sizeof_hdr: 348,
                    dim,
                    datatype_code: datatype,
                    bitpix,
                    magic: if pair { MAGIC_PAIR } else { MAGIC_SINGLE },
                    endianness: if big { Endianness::Big } else { Endianness::Little },
                }
            })
    }

    proptest! {
        #[test]
        fn round_trip(h in arb_header()) {
            prop_assert_eq!(parse_header(&h.to_bytes()).unwrap(), h);
        }

        #[test]
        fn random_buffers_never_yield_invalid_headers(bytes in prop::collection::vec(any::<u8>(), 348)) {
            if let Ok(h) = parse_header(&bytes) {
                prop_assert_eq!(h.sizeof_hdr, 348);
                prop_assert!(h.magic == MAGIC_SINGLE || h.magic == MAGIC_PAIR);
                prop_assert!((1..=7).contains(&h.dim[0]));
                for i in 1..=h.dim[0] as usize {
                    prop_assert!(h.dim[i] >= 1);
                }
            }
        }
    }
}
