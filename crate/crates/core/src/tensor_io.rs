//! Dense `f32` matrices and the `.trimt` tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                                |
//! |--------------|--------------------------------------|
//! | 0..8         | magic `TRIMTNSR`                     |
//! | 8..12        | version, `u32` (= 1)                 |
//! | 12           | dtype code, `u8` (0 = float32)       |
//! | 13           | ndim, `u8` (1 or 2)                  |
//! | 14..16       | reserved, zero                       |
//! | 16..16+8*nd  | dims, `u64` each                     |
//! | ...          | row-major `f32` payload              |
//!
//! One-dimensional tensors load as a single-row matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"TRIMTNSR";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

const FIXED_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"TRIMTNSR\"")]
    BadMagic([u8; 8]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported ndim {0}, expected 1 or 2")]
    UnsupportedRank(u8),
    #[error("reserved header bytes must be zero, found {0:?}")]
    ReservedNonZero([u8; 2]),
    #[error("dimension {axis} is zero")]
    ZeroDim { axis: usize },
    #[error("dims {0:?} overflow the addressable element count")]
    DimsOverflow(Vec<u64>),
    #[error("header truncated")]
    TruncatedHeader,
    #[error("payload holds {actual} bytes, header declares {expected}")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("matrix shape {rows}x{cols} does not match data length {len}")]
    Shape { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major matrix of token embeddings: one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix, checking shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows.checked_mul(cols) != Some(data.len()) {
            return Err(TensorError::Shape { rows, cols, len: data.len() });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::Shape { rows: rows.len(), cols, len: data.len() + r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn row_vector(data: Vec<f32>) -> Result<Self> {
        Self::new(1, data.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index, value: data[index] }),
        None => Ok(()),
    }
}

/// Header fields as they appear on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorFileHeader {
    pub version: u32,
    pub dtype_code: u8,
    pub dims: Vec<u64>,
}

impl TensorFileHeader {
    pub fn for_matrix(m: &Matrix) -> Self {
        Self {
            version: FORMAT_VERSION,
            dtype_code: DTYPE_F32,
            dims: vec![m.rows as u64, m.cols as u64],
        }
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + 8 * self.dims.len()
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.dtype_code);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    fn decode<R: Read>(r: &mut R) -> Result<Self> {
        let mut fixed = [0u8; FIXED_HEADER_LEN];
        read_exact_or(r, &mut fixed, TensorError::TruncatedHeader)?;
        let magic: [u8; 8] = fixed[0..8].try_into().unwrap();
        if magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let dtype_code = fixed[12];
        if dtype_code != DTYPE_F32 {
            return Err(TensorError::UnsupportedDtype(dtype_code));
        }
        let ndim = fixed[13];
        if !(1..=2).contains(&ndim) {
            return Err(TensorError::UnsupportedRank(ndim));
        }
        if fixed[14..16] != [0, 0] {
            return Err(TensorError::ReservedNonZero([fixed[14], fixed[15]]));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for axis in 0..ndim as usize {
            let mut b = [0u8; 8];
            read_exact_or(r, &mut b, TensorError::TruncatedHeader)?;
            let d = u64::from_le_bytes(b);
            if d == 0 {
                return Err(TensorError::ZeroDim { axis });
            }
            dims.push(d);
        }
        Ok(Self { version, dtype_code, dims })
    }

    /// Payload size in bytes, or `DimsOverflow` if it does not fit in memory.
    pub fn payload_len(&self) -> Result<usize> {
        self.dims
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= isize::MAX as u64)
            .map(|n| n as usize)
            .ok_or_else(|| TensorError::DimsOverflow(self.dims.clone()))
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], short: TensorError) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(short),
        Err(e) => Err(e.into()),
    }
}

/// Serializes `m` as a 2-D tensor.
pub fn write_to<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    check_finite(&m.data)?;
    w.write_all(&TensorFileHeader::for_matrix(m).encode())?;
    let mut payload = Vec::with_capacity(m.data.len() * 4);
    for v in &m.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Reads one tensor from `r`. The stream must end exactly at the payload end.
pub fn read_from<R: Read>(r: &mut R) -> Result<Matrix> {
    let header = TensorFileHeader::decode(r)?;
    let expected = header.payload_len()?;

    // Read at most one byte past the declared payload so trailing garbage is detected
    // without trusting the header for the allocation size.
    let mut payload = Vec::new();
    r.take(expected as u64 + 1).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(TensorError::PayloadLength {
            expected: expected as u64,
            actual: payload.len() as u64,
        });
    }

    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    check_finite(&data)?;
    let (rows, cols) = match header.dims[..] {
        [n] => (1, n as usize),
        [r, c] => (r as usize, c as usize),
        _ => unreachable!("rank validated in decode"),
    };
    Ok(Matrix { rows, cols, data })
}

pub fn write_tensor(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| TensorError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, m)?;
    w.flush().map_err(io_err)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TensorError::Io { path: path.to_path_buf(), source })?;
    read_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(m: &Matrix) -> Vec<u8> {
        let mut buf = Vec::new();
        write_to(&mut buf, m).unwrap();
        buf
    }

    fn raw_file(ndim: u8, dims: &[u64], values: &[f32]) -> Vec<u8> {
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&[0, ndim, 0, 0]);
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let m = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let buf = encode(&m);
        assert_eq!(&buf[0..8], b"TRIMTNSR");
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(buf[12], 0);
        assert_eq!(buf[13], 2);
        assert_eq!(&buf[14..16], &[0, 0]);
        assert_eq!(&buf[16..24], &3u64.to_le_bytes());
        assert_eq!(&buf[24..32], &2u64.to_le_bytes());
        assert_eq!(&buf[32..36], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 32 + 6 * 4);
    }

    #[test]
    fn single_zero_round_trip() {
        let m = Matrix::new(1, 1, vec![0.0]).unwrap();
        let back = read_from(&mut encode(&m).as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn small_matrix_round_trip() {
        let m = Matrix::new(2, 3, vec![0.5, -1.25, 3.0, 1e-30, -0.0, 7.75]).unwrap();
        let back = read_from(&mut encode(&m).as_slice()).unwrap();
        assert_eq!(back.rows(), 2);
        assert_eq!(back.cols(), 3);
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn valid_3x2_echoes_header() {
        let buf = raw_file(2, &[3, 2], &[0.0; 6]);
        let m = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 2));
    }

    #[test]
    fn one_dimensional_loads_as_row() {
        let buf = raw_file(1, &[4], &[1.0, 2.0, 3.0, 4.0]);
        let m = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 4));
        assert_eq!(m.row(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = raw_file(2, &[1, 1], &[0.0]);
        buf[0..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(read_from(&mut buf.as_slice()), Err(TensorError::BadMagic(_))));
    }

    #[test]
    fn short_payload_rejected() {
        let buf = raw_file(2, &[2, 2], &[1.0, 2.0, 3.0]);
        assert!(matches!(
            read_from(&mut buf.as_slice()),
            Err(TensorError::PayloadLength { expected: 16, actual: 12 })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut buf = raw_file(2, &[1, 2], &[1.0, 2.0]);
        buf.push(0);
        assert!(matches!(read_from(&mut buf.as_slice()), Err(TensorError::PayloadLength { .. })));
    }

    #[test]
    fn header_field_errors() {
        let good = raw_file(2, &[1, 1], &[0.0]);

        let mut v = good.clone();
        v[8] = 2;
        assert!(matches!(read_from(&mut v.as_slice()), Err(TensorError::UnsupportedVersion(2))));

        let mut v = good.clone();
        v[12] = 1;
        assert!(matches!(read_from(&mut v.as_slice()), Err(TensorError::UnsupportedDtype(1))));

        let mut v = good.clone();
        v[13] = 3;
        assert!(matches!(read_from(&mut v.as_slice()), Err(TensorError::UnsupportedRank(3))));

        let mut v = good.clone();
        v[15] = 9;
        assert!(matches!(read_from(&mut v.as_slice()), Err(TensorError::ReservedNonZero(_))));

        let v = raw_file(2, &[0, 1], &[]);
        assert!(matches!(read_from(&mut v.as_slice()), Err(TensorError::ZeroDim { axis: 0 })));

        let v = raw_file(2, &[u64::MAX, 2], &[]);
        assert!(matches!(read_from(&mut v.as_slice()), Err(TensorError::DimsOverflow(_))));

        assert!(matches!(read_from(&mut &good[..10]), Err(TensorError::TruncatedHeader)));
    }

    #[test]
    fn non_finite_rejected_on_load_and_write() {
        let buf = raw_file(2, &[1, 2], &[1.0, f32::NAN]);
        assert!(matches!(read_from(&mut buf.as_slice()), Err(TensorError::NonFinite { index: 1, .. })));
        let buf = raw_file(1, &[1], &[f32::INFINITY]);
        assert!(matches!(read_from(&mut buf.as_slice()), Err(TensorError::NonFinite { index: 0, .. })));
        assert!(Matrix::new(1, 1, vec![f32::NEG_INFINITY]).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_tensor("/nonexistent/dir/x.trimt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.trimt"));
    }

    #[test]
    fn matrix_shape_checks() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..=1024, 1usize..=1024, any::<u64>()).prop_map(|(r, c, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..r * c).map(|_| rng.gen_range(-1e6f32..1e6)).collect();
            Matrix::new(r, c, data).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn round_trip_is_identity(m in arb_matrix()) {
            let bytes = encode(&m);
            prop_assert_eq!(bytes.len(), 32 + 4 * m.rows() * m.cols());
            let back = read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode(&back), bytes);
        }

        #[test]
        fn wrong_payload_length_always_rejected(
            r in 1u64..16, c in 1u64..16, delta in -8i64..8
        ) {
            prop_assume!(delta != 0);
            let n = (r * c) as i64 * 4 + delta;
            prop_assume!(n >= 0);
            let mut buf = raw_file(2, &[r, c], &[]);
            buf.extend(std::iter::repeat_n(0u8, n as usize));
            let is_length_error = matches!(
                read_from(&mut buf.as_slice()),
                Err(TensorError::PayloadLength { .. })
            );
            prop_assert!(is_length_error);
        }
    }
}
