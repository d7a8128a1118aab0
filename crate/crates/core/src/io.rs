//! File formats.
//!
//! Dense matrices:
//! * CSV: first line `rows,cols` (the two dimensions), then one comma-separated
//!   row per line.
//! * Binary: magic `OTM1`, two little-endian `u64` dimensions (rows, cols),
//!   then `rows * cols` little-endian IEEE-754 `f64` values in row-major order.
//!
//! Sparse matrices are triplet CSV `i,j,value` with an optional `i,j,value`
//! header. Label files hold one non-negative integer per line.
//!
//! Writers go through [`AtomicWriter`]: content lands in a temporary file in
//! the destination directory and is renamed into place on commit.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"OTM1";

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("line {line}: {msg}"))
}

pub fn parse_matrix_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let dims: Vec<&str> = header.split(',').map(str::trim).collect();
    if dims.len() != 2 {
        return Err(parse_err(1, "header must be `rows,cols`"));
    }
    let rows: usize = dims[0]
        .parse()
        .map_err(|e| parse_err(1, format!("bad row count: {e}")))?;
    let cols: usize = dims[1]
        .parse()
        .map_err(|e| parse_err(1, format!("bad column count: {e}")))?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines {
        seen += 1;
        if seen > rows {
            return Err(parse_err(idx + 1, "more rows than declared"));
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| parse_err(idx + 1, format!("`{}`: {e}", field.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(idx + 1, "non-finite value"));
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(
                idx + 1,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
    }
    if seen != rows {
        return Err(Error::Parse(format!("expected {rows} rows, found {seen}")));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(e.to_string()))
}

pub fn format_matrix_csv(m: &Array2<f64>) -> String {
    let mut s = format!("{},{}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        // Debug formatting is shortest round-trip and switches to exponents for tiny values
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub fn decode_matrix_binary(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 20 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Parse("missing OTM1 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Parse("dimension overflow".into()))?;
    let body = &bytes[20..];
    if body.len() != n * 8 {
        return Err(Error::Parse(format!(
            "expected {} payload bytes, found {}",
            n * 8,
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse("non-finite value in binary matrix".into()));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(e.to_string()))
}

pub fn encode_matrix_binary(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * m.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a dense matrix, detecting the binary format by its magic bytes.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(BINARY_MAGIC) {
        decode_matrix_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Parse(format!("{} is neither CSV nor OTM1", path.display())))?;
        parse_matrix_csv(&text)
    }
}

/// Binary when the extension is `otm` or `bin`, CSV otherwise.
pub fn matrix_bytes_for_path(path: &Path, m: &Array2<f64>) -> Vec<u8> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("otm") | Some("bin") => encode_matrix_binary(m),
        _ => format_matrix_csv(m).into_bytes(),
    }
}

pub type Triplet = (usize, usize, f64);

pub fn parse_triplets(text: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && line.replace(' ', "") == "i,j,value" {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(parse_err(idx + 1, "expected `i,j,value`"));
        }
        let i = f[0].parse().map_err(|e| parse_err(idx + 1, e))?;
        let j = f[1].parse().map_err(|e| parse_err(idx + 1, e))?;
        let v: f64 = f[2].parse().map_err(|e| parse_err(idx + 1, e))?;
        if !v.is_finite() {
            return Err(parse_err(idx + 1, "non-finite value"));
        }
        out.push((i, j, v));
    }
    Ok(out)
}

pub fn format_triplets(triplets: impl IntoIterator<Item = Triplet>) -> String {
    let mut s = String::from("i,j,value\n");
    for (i, j, v) in triplets {
        s.push_str(&format!("{i},{j},{v:?}\n"));
    }
    s
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    parse_triplets(&fs::read_to_string(path)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|e| parse_err(idx + 1, e))?);
    }
    Ok(out)
}

/// Stages several output files and publishes them together.
///
/// Nothing is visible at the destination paths until [`AtomicWriter::commit`];
/// dropping the writer without committing removes the staged files.
#[derive(Debug, Default)]
pub struct AtomicWriter {
    staged: Vec<(PathBuf, PathBuf)>,
}

impl AtomicWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage(&mut self, dest: &Path, bytes: &[u8]) -> Result<()> {
        let dir = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&dir)?;
        let name = dest
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file", dest.display())))?;
        let tmp = dir.join(format!(
            ".{}.tmp-{}-{}",
            name.to_string_lossy(),
            std::process::id(),
            self.staged.len()
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        self.staged.push((tmp, dest.to_path_buf()));
        Ok(())
    }

    pub fn commit(mut self) -> Result<()> {
        for (tmp, dest) in std::mem::take(&mut self.staged) {
            fs::rename(&tmp, &dest)?;
        }
        Ok(())
    }
}

impl Drop for AtomicWriter {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn csv_reads_header_and_rows() {
        let m = parse_matrix_csv("2,3\n1,2,3\n4,5,6.5\n").unwrap();
        assert_eq!(m, array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]]);
    }

    #[test]
    fn csv_rejects_ragged_and_short_input() {
        assert!(parse_matrix_csv("2,2\n1,2\n3\n").is_err());
        assert!(parse_matrix_csv("3,2\n1,2\n3,4\n").is_err());
        assert!(parse_matrix_csv("1,2\n1,x\n").is_err());
        assert!(parse_matrix_csv("1,1\nNaN\n").is_err());
        assert!(parse_matrix_csv("").is_err());
    }

    #[test]
    fn binary_layout_is_exact() {
        let m = array![[1.0, -2.0]];
        let bytes = encode_matrix_binary(&m);
        assert_eq!(&bytes[..4], b"OTM1");
        assert_eq!(&bytes[4..12], &1u64.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[28..36], &(-2.0f64).to_le_bytes());
        assert!(decode_matrix_binary(&bytes[..30]).is_err());
    }

    #[test]
    fn triplets_accept_optional_header() {
        let t = parse_triplets("i,j,value\n0,1,0.5\n1,0,0.25\n").unwrap();
        assert_eq!(t, vec![(0, 1, 0.5), (1, 0, 0.25)]);
        assert_eq!(parse_triplets("2,3,1\n").unwrap(), vec![(2, 3, 1.0)]);
        assert!(parse_triplets("0,1\n").is_err());
    }

    #[test]
    fn uncommitted_writer_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out.csv");
        {
            let mut w = AtomicWriter::new();
            w.stage(&dest, b"data").unwrap();
        }
        assert!(!dest.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        let mut w = AtomicWriter::new();
        w.stage(&dest, b"data").unwrap();
        w.commit().unwrap();
        assert_eq!(fs::read(&dest).unwrap(), b"data");
    }

    proptest! {
        #[test]
        fn both_formats_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 11) as f64) * 1e-12 - 3.3)
                .collect();
            let m = Array2::from_shape_vec((rows, cols), data).unwrap();
            prop_assert_eq!(&parse_matrix_csv(&format_matrix_csv(&m)).unwrap(), &m);
            prop_assert_eq!(&decode_matrix_binary(&encode_matrix_binary(&m)).unwrap(), &m);
        }
    }
}
