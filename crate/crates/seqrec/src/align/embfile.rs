//! Versioned binary matrix files for cached item embeddings.
//!
//! Layout: 8-byte magic `EMBMAT01`, then rows and cols as little-endian
//! u64, then rows*cols f64 entries (little-endian, row-major). Bit-exact by
//! construction, unlike any decimal text format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"EMBMAT01";

pub fn save_embeddings(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(
        File::open(path)
            .map_err(|e| Error::Data(format!("cannot open embeddings {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("{}: truncated header: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: not an embedding file (magic {:?})",
            path.display(),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let cols = u64::from_le_bytes(u64buf) as usize;

    let mut data = vec![0.0f64; rows * cols];
    let mut f64buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut f64buf)
            .map_err(|e| Error::Data(format!("{}: truncated data: {e}", path.display())))?;
        *v = f64::from_le_bytes(f64buf);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Data(format!("{}: trailing bytes", path.display())));
    }
    Matrix::from_vec(rows, cols, data)
}
