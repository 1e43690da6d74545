//! Embedding-matrix geometry: the partition-function isotropy score, mean and
//! dominant-direction removal, 2-D singular-vector projections, and drift
//! statistics between two snapshots of the same vocabulary.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;
use crate::vocab::{Group, GroupAssignment};

/// Row `i` is the embedding of token id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols}"), format!("{} values", data.len())));
        }
        Ok(EmbeddingMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        EmbeddingMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape(format!("rows of length {cols}"), r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Embedding dimension.
    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn select_rows(&self, ids: &[TokenId]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &id in ids {
            data.extend_from_slice(self.row(id as usize));
        }
        EmbeddingMatrix {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(Error::NonFinite {
                row: p / self.cols,
                col: p % self.cols,
            }),
            None => Ok(()),
        }
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        EmbeddingMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn max_row_norm(&self) -> f64 {
        self.iter_rows().map(norm).fold(0.0, f64::max)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| dot(a, b) / (na * nb))
}

/// Relative size below which a signed sum of projections counts as zero.
const ORIENT_TOL: f64 = 1e-9;

/// Orients `v` by the rows' projections onto it: positive summed
/// projection, else positive summed cube, else first nonzero component
/// positive. The first two rules only see projections, so rotating the rows
/// and `v` together leaves the choice unchanged.
fn orient(v: &mut [f64], m: &DMatrix<f64>) {
    let p = m * nalgebra::DVector::from_column_slice(v);
    let s1: f64 = p.iter().sum();
    let a1: f64 = p.iter().map(|x| x.abs()).sum();
    let s3: f64 = p.iter().map(|x| x.powi(3)).sum();
    let a3: f64 = p.iter().map(|x| x.abs().powi(3)).sum();
    let negative = if s1.abs() > ORIENT_TOL * a1 {
        s1 < 0.0
    } else if s3.abs() > ORIENT_TOL * a3 {
        s3 < 0.0
    } else {
        v.iter().find(|x| **x != 0.0).is_some_and(|&x| x < 0.0)
    };
    if negative {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Relative gap below which adjacent eigenvalues count as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct IsotropyBreakdown {
    /// Unit eigenvectors of `EᵀE`, by descending eigenvalue, each oriented so
    /// the rows project onto it with a positive sum (see `orient`).
    pub eigenvectors: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `log Z(b)` per eigenvector, same order.
    pub log_partition: Vec<f64>,
    pub score: f64,
    /// Set when two eigenvalues are within [`DEGENERACY_GAP`] of each other,
    /// in which case the eigenvectors (and the score) are not unique.
    pub degenerate: bool,
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = SymmetricEigen::new(m.transpose() * m);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = idx
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            orient(&mut v, m);
            v
        })
        .collect();
    (values, vectors)
}

/// `I(E) = min_b Z(b) / max_b Z(b)` over the eigenvectors `b` of `EᵀE`, with
/// `Z(b) = Σ_i exp(bᵀe_i)` evaluated in the log domain.
pub fn isotropy(e: &EmbeddingMatrix) -> Result<IsotropyBreakdown> {
    e.check_finite()?;
    if e.dim() == 0 || e.rows() == 0 {
        return Err(Error::InvalidArgument("isotropy needs a nonempty matrix".into()));
    }
    let m = e.to_dmatrix();
    let (eigenvalues, eigenvectors) = sorted_eigen(&m);
    let log_partition: Vec<f64> = eigenvectors
        .iter()
        .map(|b| log_sum_exp(e.iter_rows().map(|row| dot(b, row))))
        .collect();
    let lo = log_partition.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = log_partition.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let degenerate = eigenvalues
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() / scale < DEGENERACY_GAP);
    Ok(IsotropyBreakdown {
        eigenvectors,
        eigenvalues,
        log_partition,
        score: (lo - hi).exp(),
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelDirectionConfig {
    pub beta: usize,
}

impl DelDirectionConfig {
    /// `max(1, ⌊h_e / 100⌋)`.
    pub fn for_dim(dim: usize) -> Self {
        DelDirectionConfig {
            beta: (dim / 100).max(1),
        }
    }
}

/// Top right-singular vectors of a matrix, descending, oriented.
fn right_singular_vectors(m: &DMatrix<f64>, count: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    idx.truncate(count);
    let values = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let vectors = idx
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = v_t.row(i).iter().copied().collect();
            orient(&mut v, m);
            v
        })
        .collect();
    (values, vectors)
}

/// Subtracts the mean row, then projects out the top `beta` principal
/// directions of the centered matrix.
pub fn del_direction(e: &EmbeddingMatrix, cfg: DelDirectionConfig) -> Result<EmbeddingMatrix> {
    e.check_finite()?;
    if cfg.beta > e.dim() {
        return Err(Error::InvalidArgument(format!(
            "beta {} exceeds embedding dimension {}",
            cfg.beta,
            e.dim()
        )));
    }
    let mut centered = e.to_dmatrix();
    if e.rows() == 0 {
        return Ok(e.clone());
    }
    let mean = centered.row_mean();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    if cfg.beta > 0 {
        let k = cfg.beta.min(e.rows().min(e.dim()));
        let (_, dirs) = right_singular_vectors(&centered, k);
        for u in &dirs {
            let u = nalgebra::DVector::from_column_slice(u);
            let proj = &centered * &u;
            centered -= proj * u.transpose();
        }
    }
    Ok(EmbeddingMatrix::from_dmatrix(&centered))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2d {
    /// `(x, y)` per row.
    pub coords: Vec<[f64; 2]>,
    pub singular_values: [f64; 2],
    pub directions: [Vec<f64>; 2],
}

/// Projects rows onto the right singular vectors of the two largest
/// singular values (no centering).
pub fn svd_project2d(e: &EmbeddingMatrix) -> Result<Projection2d> {
    e.check_finite()?;
    if e.dim() < 2 {
        return Err(Error::InvalidArgument("projection needs h_e >= 2".into()));
    }
    let m = e.to_dmatrix();
    let (mut values, mut dirs) = right_singular_vectors(&m, 2);
    // Fewer than two singular vectors only when there is a single row.
    while dirs.len() < 2 {
        let mut v = vec![0.0; e.dim()];
        v[dirs.len()] = 1.0;
        dirs.push(v);
        values.push(0.0);
    }
    let coords = e
        .iter_rows()
        .map(|row| [dot(row, &dirs[0]), dot(row, &dirs[1])])
        .collect();
    let [v1, v2]: [Vec<f64>; 2] = dirs.try_into().expect("two directions");
    Ok(Projection2d {
        coords,
        singular_values: [values[0], values[1]],
        directions: [v1, v2],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupScore {
    pub group: &'static str,
    pub members: usize,
    /// `None` for an empty group.
    pub score: Option<f64>,
}

/// Isotropy of frequent, medium and rare row subsets, then all rows.
pub fn group_isotropy(e: &EmbeddingMatrix, groups: &GroupAssignment) -> Result<Vec<GroupScore>> {
    if groups.labels.len() != e.rows() {
        return Err(Error::shape(format!("{} labels", e.rows()), groups.labels.len()));
    }
    let mut out = Vec::with_capacity(4);
    for g in Group::APPEARING {
        let ids = groups.members(g);
        let score = if ids.is_empty() {
            None
        } else {
            Some(isotropy(&e.select_rows(&ids))?.score)
        };
        out.push(GroupScore {
            group: g.name(),
            members: ids.len(),
            score,
        });
    }
    out.push(GroupScore {
        group: "all",
        members: e.rows(),
        score: Some(isotropy(e)?.score),
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRow {
    pub group: Group,
    pub members: usize,
    pub mean_displacement: Option<f64>,
    pub mean_cosine: Option<f64>,
    /// Members left out of the cosine mean because a row had zero norm.
    pub zero_norm_excluded: usize,
}

/// Per-group mean displacement norm and mean cosine between snapshots.
pub fn drift_stats(
    before: &EmbeddingMatrix,
    after: &EmbeddingMatrix,
    groups: &GroupAssignment,
) -> Result<Vec<DriftRow>> {
    if before.rows() != after.rows() || before.dim() != after.dim() {
        return Err(Error::shape(
            format!("{}x{}", before.rows(), before.dim()),
            format!("{}x{}", after.rows(), after.dim()),
        ));
    }
    if groups.labels.len() != before.rows() {
        return Err(Error::shape(format!("{} labels", before.rows()), groups.labels.len()));
    }
    let all = [Group::Frequent, Group::Medium, Group::Rare, Group::NonAppearing];
    Ok(all
        .into_iter()
        .map(|g| {
            let ids = groups.members(g);
            let mut disp = 0.0;
            let mut cos = 0.0;
            let mut cos_n = 0usize;
            for &id in &ids {
                let (a, b) = (before.row(id as usize), after.row(id as usize));
                disp += a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
                if let Some(c) = cosine(a, b) {
                    cos += c;
                    cos_n += 1;
                }
            }
            DriftRow {
                group: g,
                members: ids.len(),
                mean_displacement: (!ids.is_empty()).then(|| disp / ids.len() as f64),
                mean_cosine: (cos_n > 0).then(|| cos / cos_n as f64),
                zero_norm_excluded: ids.len() - cos_n,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseCosine {
    pub mean: f64,
    pub pairs: usize,
    pub exhaustive: bool,
    pub zero_rows_excluded: usize,
}

/// Mean cosine over unordered pairs of `subset`. When `sample_pairs` covers
/// every pair the mean is exact; otherwise pairs are drawn uniformly with
/// replacement from a seeded generator.
pub fn mean_pairwise_cosine(
    e: &EmbeddingMatrix,
    subset: &[TokenId],
    sample_pairs: usize,
    seed: u64,
) -> Result<PairwiseCosine> {
    let rows: Vec<&[f64]> = subset
        .iter()
        .map(|&id| e.row(id as usize))
        .filter(|r| norm(r) > 0.0)
        .collect();
    let excluded = subset.len() - rows.len();
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two nonzero rows, have {n}"
        )));
    }
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let l = norm(r);
            r.iter().map(|x| x / l).collect()
        })
        .collect();
    let total = n * (n - 1) / 2;
    if sample_pairs >= total {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += dot(&unit[i], &unit[j]);
            }
        }
        return Ok(PairwiseCosine {
            mean: sum / total as f64,
            pairs: total,
            exhaustive: true,
            zero_rows_excluded: excluded,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..sample_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        sum += dot(&unit[i], &unit[j]);
    }
    Ok(PairwiseCosine {
        mean: sum / sample_pairs.max(1) as f64,
        pairs: sample_pairs,
        exhaustive: false,
        zero_rows_excluded: excluded,
    })
}
