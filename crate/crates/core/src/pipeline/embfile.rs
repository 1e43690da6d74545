//! `EMB1` embedding files: magic, u32 rows, u32 columns, row-major f32 LE.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const HEADER: usize = 12;

/// Values are stored as f32; anything finer than f32 is rounded.
pub fn embeddings_to_bytes(e: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * e.as_slice().len());
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(e.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(e.dim() as u32).to_le_bytes());
    for &v in e.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn embeddings_from_bytes(buf: &[u8]) -> Result<EmbeddingMatrix> {
    if buf.len() < 4 {
        return Err(Error::Format {
            offset: buf.len() as u64,
            reason: "truncated magic".into(),
        });
    }
    if &buf[..4] != EMB_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    if buf.len() < HEADER {
        return Err(Error::Format {
            offset: buf.len() as u64,
            reason: "truncated header".into(),
        });
    }
    let rows = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let want = HEADER + 4 * rows * cols;
    if buf.len() < want {
        return Err(Error::Format {
            offset: buf.len() as u64,
            reason: format!("truncated data: {rows}x{cols} needs {want} bytes"),
        });
    }
    if buf.len() > want {
        return Err(Error::Format {
            offset: want as u64,
            reason: "trailing bytes".into(),
        });
    }
    let data = buf[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    EmbeddingMatrix::new(rows, cols, data)
}

pub fn save_embeddings(e: &EmbeddingMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_to_bytes(e)).map_err(|err| Error::io(path, err))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let buf = std::fs::read(path).map_err(|err| Error::io(path, err))?;
    embeddings_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-3.0f32..3.0) as f64).collect();
        EmbeddingMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let e = random(37, 11, 1);
        let back = embeddings_from_bytes(&embeddings_to_bytes(&e)).unwrap();
        assert_eq!(back, e);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        save_embeddings(&e, &p).unwrap();
        assert_eq!(load_embeddings(&p).unwrap(), e);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = embeddings_to_bytes(&random(4, 3, 2));
        for cut in [2usize, 7, 30] {
            match embeddings_from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(embeddings_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn ten_megabyte_round_trip_checksum() {
        use sha2::{Digest, Sha256};
        let e = random(20_000, 128, 3);
        let bytes = embeddings_to_bytes(&e);
        assert!(bytes.len() >= 10_000_000);
        let back = embeddings_from_bytes(&bytes).unwrap();
        let again = embeddings_to_bytes(&back);
        assert_eq!(Sha256::digest(&bytes), Sha256::digest(&again));
    }
}
