//! Binary artifact formats. All integers and doubles are little-endian.
//!
//! Feature-stream file (`MMTTA1`):
//! ```text
//! magic   6 bytes  "MMTTA1"
//! classes u32
//! dim_m1  u32
//! dim_m2  u32
//! count   u64
//! then per sample:
//!   label u32
//!   m1    dim_m1 f64
//!   m2    dim_m2 f64
//! ```
//!
//! Bank checkpoint (`GDABANK1`):
//! ```text
//! magic       8 bytes  "GDABANK1"
//! perspective u32      (0 = m1, 1 = m2, 2 = fused)
//! dim         u32
//! classes     u32
//! alpha       f64
//! eps_shrink  f64
//! then per class (stats):  count f64, first_moment dim f64,
//!                          second_moment dim*dim f64 row-major
//! then per class (params): log_prior f64, mean dim f64,
//!                          covariance dim*dim f64 row-major, log_det f64,
//!                          chol_lower dim*dim f64 row-major
//! ```
//!
//! Covariance-deviation dump (`GDACOV1`):
//! ```text
//! magic   7 bytes  "GDACOV1"
//! dim     u32
//! classes u32
//! mean covariance dim*dim f64 row-major,
//! then classes deviation matrices dim*dim f64 row-major
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussian::{ClassGaussian, Perspective, PerspectiveBank, SufficientStats};
use crate::synth::Sample;

const STREAM_MAGIC: &[u8; 6] = b"MMTTA1";
const BANK_MAGIC: &[u8; 8] = b"GDABANK1";
const COV_MAGIC: &[u8; 7] = b"GDACOV1";

/// Header of a feature-stream file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub num_classes: u32,
    pub dim_m1: u32,
    pub dim_m2: u32,
    pub count: u64,
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Write a feature stream in the `MMTTA1` format.
pub fn write_stream(
    path: &Path,
    header: StreamHeader,
    samples: impl IntoIterator<Item = Sample>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    w.write_all(STREAM_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(header.num_classes).map_err(io_err)?;
    w.write_u32::<LittleEndian>(header.dim_m1).map_err(io_err)?;
    w.write_u32::<LittleEndian>(header.dim_m2).map_err(io_err)?;
    w.write_u64::<LittleEndian>(header.count).map_err(io_err)?;
    let mut written = 0u64;
    for sample in samples {
        w.write_u32::<LittleEndian>(sample.label as u32).map_err(io_err)?;
        for &x in sample.m1.iter() {
            w.write_f64::<LittleEndian>(x).map_err(io_err)?;
        }
        for &x in sample.m2.iter() {
            w.write_f64::<LittleEndian>(x).map_err(io_err)?;
        }
        written += 1;
    }
    if written != header.count {
        return Err(Error::Format {
            path: path_str(path),
            offset: 0,
            message: format!("header count {} but {written} samples written", header.count),
        });
    }
    w.flush().map_err(io_err)
}

/// In-memory cursor with offset-tracked primitive reads.
struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Cursor {
            bytes,
            offset: 0,
            path: path_str(path),
        }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::format(self.path.clone(), self.offset as u64, message)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(self.fail(format!(
                "unexpected end of file (needed {n} bytes, {} remain)",
                self.bytes.len() - self.offset
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let got = self.take(expected.len())?;
        if got != expected {
            return Err(Error::format(
                self.path.clone(),
                0,
                format!("bad magic: expected {expected:?}, got {got:?}"),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut s = self.take(4)?;
        s.read_u32::<LittleEndian>()
            .map_err(|e| self.fail(e.to_string()))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut s = self.take(8)?;
        s.read_u64::<LittleEndian>()
            .map_err(|e| self.fail(e.to_string()))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut s = self.take(8)?;
        s.read_f64::<LittleEndian>()
            .map_err(|e| self.fail(e.to_string()))
    }

    fn vector(&mut self, len: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(len);
        for i in 0..len {
            v[i] = self.f64()?;
        }
        Ok(v)
    }

    fn matrix_row_major(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn done(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after the documented layout",
                self.bytes.len() - self.offset
            )));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path_str(path), e))?;
    Ok(bytes)
}

/// Read a full `MMTTA1` stream file.
pub fn read_stream(path: &Path) -> Result<(StreamHeader, Vec<Sample>)> {
    let bytes = read_file(path)?;
    let mut cursor = Cursor::new(&bytes, path);
    cursor.magic(STREAM_MAGIC)?;
    let header = StreamHeader {
        num_classes: cursor.u32()?,
        dim_m1: cursor.u32()?,
        dim_m2: cursor.u32()?,
        count: cursor.u64()?,
    };
    let mut samples = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        let label = cursor.u32()?;
        if label >= header.num_classes {
            return Err(cursor.fail(format!(
                "label {label} out of range for {} classes",
                header.num_classes
            )));
        }
        let m1 = cursor.vector(header.dim_m1 as usize)?;
        let m2 = cursor.vector(header.dim_m2 as usize)?;
        samples.push(Sample {
            label: label as usize,
            m1,
            m2,
        });
    }
    cursor.done()?;
    Ok((header, samples))
}

/// CSV export of a stream for inspection: `label,m1_0..,m2_0..`.
pub fn write_stream_csv(path: &Path, header: StreamHeader, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    let mut columns = vec!["label".to_string()];
    columns.extend((0..header.dim_m1).map(|j| format!("m1_{j}")));
    columns.extend((0..header.dim_m2).map(|j| format!("m2_{j}")));
    writeln!(w, "{}", columns.join(",")).map_err(io_err)?;
    for sample in samples {
        let mut fields = vec![sample.label.to_string()];
        fields.extend(sample.m1.iter().map(|x| format!("{x}")));
        fields.extend(sample.m2.iter().map(|x| format!("{x}")));
        writeln!(w, "{}", fields.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Write a bank checkpoint in the `GDABANK1` format.
pub fn write_bank(path: &Path, bank: &PerspectiveBank, alpha: f64, epsilon_shrink: f64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    w.write_all(BANK_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(bank.perspective().code()).map_err(io_err)?;
    w.write_u32::<LittleEndian>(bank.dim() as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(bank.num_classes() as u32).map_err(io_err)?;
    w.write_f64::<LittleEndian>(alpha).map_err(io_err)?;
    w.write_f64::<LittleEndian>(epsilon_shrink).map_err(io_err)?;
    let write_matrix = |w: &mut BufWriter<File>, m: &DMatrix<f64>| -> Result<()> {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_f64::<LittleEndian>(m[(i, j)])
                    .map_err(|e| Error::io(path_str(path), e))?;
            }
        }
        Ok(())
    };
    for stats in bank.stats() {
        w.write_f64::<LittleEndian>(stats.count()).map_err(io_err)?;
        for &x in stats.first_moment().iter() {
            w.write_f64::<LittleEndian>(x).map_err(io_err)?;
        }
        write_matrix(&mut w, stats.second_moment())?;
    }
    for params in bank.params() {
        w.write_f64::<LittleEndian>(params.log_prior()).map_err(io_err)?;
        for &x in params.mean().iter() {
            w.write_f64::<LittleEndian>(x).map_err(io_err)?;
        }
        write_matrix(&mut w, params.covariance())?;
        w.write_f64::<LittleEndian>(params.log_det()).map_err(io_err)?;
        write_matrix(&mut w, params.chol_lower())?;
    }
    w.flush().map_err(io_err)
}

/// Read a `GDABANK1` checkpoint: the bank plus the (alpha, epsilon) metadata
/// it was written with.
pub fn read_bank(path: &Path) -> Result<(PerspectiveBank, f64, f64)> {
    let bytes = read_file(path)?;
    let mut cursor = Cursor::new(&bytes, path);
    cursor.magic(BANK_MAGIC)?;
    let code = cursor.u32()?;
    let perspective = Perspective::from_code(code)
        .ok_or_else(|| cursor.fail(format!("unknown perspective code {code}")))?;
    let dim = cursor.u32()? as usize;
    let classes = cursor.u32()? as usize;
    let alpha = cursor.f64()?;
    let epsilon_shrink = cursor.f64()?;
    let mut stats = Vec::with_capacity(classes);
    for _ in 0..classes {
        let count = cursor.f64()?;
        let first = cursor.vector(dim)?;
        let second = cursor.matrix_row_major(dim, dim)?;
        stats.push(SufficientStats::from_parts(count, first, second));
    }
    let mut params = Vec::with_capacity(classes);
    for _ in 0..classes {
        let log_prior = cursor.f64()?;
        let mean = cursor.vector(dim)?;
        let covariance = cursor.matrix_row_major(dim, dim)?;
        let log_det = cursor.f64()?;
        let chol_lower = cursor.matrix_row_major(dim, dim)?;
        params.push(ClassGaussian::from_cached(
            log_prior, mean, covariance, log_det, chol_lower,
        ));
    }
    cursor.done()?;
    Ok((
        PerspectiveBank::new(perspective, dim, stats, params),
        alpha,
        epsilon_shrink,
    ))
}

/// Write a covariance-deviation dump in the `GDACOV1` format.
pub fn write_cov_dump(
    path: &Path,
    mean_covariance: &DMatrix<f64>,
    deviations: &[DMatrix<f64>],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    w.write_all(COV_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(mean_covariance.nrows() as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(deviations.len() as u32).map_err(io_err)?;
    for m in std::iter::once(mean_covariance).chain(deviations) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_f64::<LittleEndian>(m[(i, j)]).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Read a `GDACOV1` dump back: (mean covariance, deviations).
pub fn read_cov_dump(path: &Path) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let bytes = read_file(path)?;
    let mut cursor = Cursor::new(&bytes, path);
    cursor.magic(COV_MAGIC)?;
    let dim = cursor.u32()? as usize;
    let classes = cursor.u32()? as usize;
    let mean = cursor.matrix_row_major(dim, dim)?;
    let mut deviations = Vec::with_capacity(classes);
    for _ in 0..classes {
        deviations.push(cursor.matrix_row_major(dim, dim)?);
    }
    cursor.done()?;
    Ok((mean, deviations))
}

/// Plain-text variant of the covariance dump, one matrix block per section,
/// rows space-separated — convenient for external plotting.
pub fn write_cov_dump_text(
    path: &Path,
    mean_covariance: &DMatrix<f64>,
    deviations: &[DMatrix<f64>],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path_str(path), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path_str(path), e);
    let mut block = |w: &mut BufWriter<File>, name: String, m: &DMatrix<f64>| -> Result<()> {
        writeln!(w, "# {name}").map_err(|e| Error::io(path_str(path), e))?;
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
            writeln!(w, "{}", row.join(" ")).map_err(|e| Error::io(path_str(path), e))?;
        }
        Ok(())
    };
    block(&mut w, "mean_covariance".to_string(), mean_covariance)?;
    for (c, d) in deviations.iter().enumerate() {
        block(&mut w, format!("deviation_class_{c}"), d)?;
    }
    w.flush().map_err(io_err)
}

/// SHA-256 of a file, hex-encoded; used by run manifests to pin inputs.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
