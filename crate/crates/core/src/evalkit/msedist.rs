use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseBin {
    pub lo: f64,
    /// `None` for the open last bin.
    pub hi: Option<f64>,
    pub count: usize,
    /// Share of tokens with MSE below `hi`.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseDistribution {
    /// Mean over dimensions of the squared difference, per row.
    pub per_token: Vec<f64>,
    pub bins: Vec<MseBin>,
    /// Lower bounds of the index bands; band `i` covers
    /// `[bands[i], bands[i+1])`, the last one is open.
    pub bands: Vec<usize>,
    /// `band_counts[band][bin]`.
    pub band_counts: Vec<Vec<usize>>,
}

fn check_edges<T: PartialOrd + Copy + std::fmt::Debug>(xs: &[T], what: &str, zero: T) -> Result<()> {
    if xs.first() != Some(&zero) {
        return Err(Error::InvalidArgument(format!("{what} must start at 0, got {xs:?}")));
    }
    if xs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(format!("{what} must be strictly increasing")));
    }
    Ok(())
}

/// Last `i` with `edges[i] <= x`.
fn bucket<T: PartialOrd>(edges: &[T], x: &T) -> usize {
    edges.partition_point(|e| e <= x) - 1
}

/// Histogram of per-token MSE between two embedding matrices. Index bands
/// use each token's pretraining rank when `vocab` is given, otherwise the
/// row id.
pub fn mse_distribution(
    pre: &EmbeddingMatrix,
    def: &EmbeddingMatrix,
    bin_edges: &[f64],
    index_bands: &[usize],
    vocab: Option<&Vocabulary>,
) -> Result<MseDistribution> {
    if pre.rows() != def.rows() || pre.dim() != def.dim() {
        return Err(Error::shape(
            format!("{}x{}", pre.rows(), pre.dim()),
            format!("{}x{}", def.rows(), def.dim()),
        ));
    }
    if let Some(v) = vocab {
        if v.len() != pre.rows() {
            return Err(Error::shape(format!("{} vocabulary entries", pre.rows()), v.len()));
        }
    }
    check_edges(bin_edges, "bin edges", 0.0)?;
    check_edges(index_bands, "index bands", 0)?;
    pre.check_finite()?;
    def.check_finite()?;
    let d = pre.dim().max(1) as f64;
    let per_token: Vec<f64> = (0..pre.rows())
        .map(|i| {
            pre.row(i)
                .iter()
                .zip(def.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d
        })
        .collect();
    let mut counts = vec![0usize; bin_edges.len()];
    let mut band_counts = vec![vec![0usize; bin_edges.len()]; index_bands.len()];
    for (i, m) in per_token.iter().enumerate() {
        let b = bucket(bin_edges, m);
        counts[b] += 1;
        let idx = vocab.map_or(i, |v| v.rank_of(i as u32));
        band_counts[bucket(index_bands, &idx)][b] += 1;
    }
    let n = per_token.len().max(1) as f64;
    let mut acc = 0usize;
    let bins = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            acc += count;
            MseBin {
                lo: bin_edges[i],
                hi: bin_edges.get(i + 1).copied(),
                count,
                cumulative: acc as f64 / n,
            }
        })
        .collect();
    Ok(MseDistribution {
        per_token,
        bins,
        bands: index_bands.to_vec(),
        band_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_matrices_fill_first_bin() {
        let e = EmbeddingMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let d = mse_distribution(&e, &e, &[0.0, 1.0, 2.0], &[0], None).unwrap();
        assert_eq!(d.bins[0].count, 3);
        assert_eq!(d.bins[0].cumulative, 1.0);
        assert_eq!(d.band_counts, vec![vec![3, 0, 0]]);
    }

    #[test]
    fn hand_computed_two_tokens() {
        // row 0: ((0-1)^2 + (0-1)^2)/2 = 1.0 ; row 1: ((0-3)^2 + 0)/2 = 4.5
        let pre = EmbeddingMatrix::new(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let def = EmbeddingMatrix::new(2, 2, vec![1.0, 1.0, 3.0, 0.0]).unwrap();
        let d = mse_distribution(&pre, &def, &[0.0, 1.0, 4.0, 5.0], &[0, 1], None).unwrap();
        assert_eq!(d.per_token, vec![1.0, 4.5]);
        let counts: Vec<usize> = d.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![0, 1, 1, 0]);
        assert_eq!(d.band_counts, vec![vec![0, 1, 0, 0], vec![0, 0, 1, 0]]);
        let cum: Vec<f64> = d.bins.iter().map(|b| b.cumulative).collect();
        assert_eq!(cum, vec![0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn bad_edges_and_shapes() {
        let e = EmbeddingMatrix::zeros(2, 2);
        assert!(mse_distribution(&e, &e, &[0.5, 1.0], &[0], None).is_err());
        assert!(mse_distribution(&e, &e, &[0.0, 0.0], &[0], None).is_err());
        assert!(mse_distribution(&e, &EmbeddingMatrix::zeros(3, 2), &[0.0], &[0], None).is_err());
    }
}
