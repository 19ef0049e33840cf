//! ICL sequence generation.
//!
//! A sequence presents N item-label pairs followed by a query item. Items,
//! labels, and positional embeddings each live in their own R^D. Row 2i-1
//! holds `[a_i | p_i]`, row 2i holds `[b_i | p_i M]` where M is the fixed
//! block anti-diagonal rotation, and the final row holds the query
//! `[a_q | 0]`. The target is `b_q`.
//!
//! Two distributions are supported: i.i.d. Gaussian entries with a uniform
//! (or last) query, and exactly orthonormal inputs with the query fixed to
//! the last pair. The orthonormal mode either places vectors on canonical
//! basis axes or applies a random rotation that preserves every inner
//! product (orthogonal on the token space, block-orthogonal on the
//! positional space so that the rotation commutes with M).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeding::stream_rng;

/// The fixed rotation linking an item's positional embedding to its label's.
///
/// `m[i][j] = 1` iff `|i - j| = d/2`; a symmetric involution.
#[derive(Debug, Clone)]
pub struct RotationMatrix {
    d: usize,
    m: Matrix,
}

impl RotationMatrix {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    /// Apply to a vector (M is symmetric, so left and right application agree).
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.d);
        let half = self.d / 2;
        let mut out = vec![0.0; self.d];
        out[..half].copy_from_slice(&v[half..]);
        out[half..].copy_from_slice(&v[..half]);
        out
    }
}

pub fn make_rotation(d: usize) -> Result<RotationMatrix> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "rotation dimension must be even and >= 2, got {d}"
        )));
    }
    let half = d / 2;
    let mut m = Matrix::zeros(d, d);
    for i in 0..half {
        m.set(i, i + half, 1.0);
        m.set(i + half, i, 1.0);
    }
    Ok(RotationMatrix { d, m })
}

/// Which pair the query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// q ~ uniform{1..N}
    Uniform,
    /// q = N
    Last,
}

/// Basis choice for orthonormal inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMode {
    Canonical,
    RandomRotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DataMode {
    Gaussian {
        query: QueryMode,
        /// Entry standard deviation (1.0 reproduces the N(0,1) sampling).
        scale: f64,
    },
    Orthonormal {
        basis: BasisMode,
    },
}

impl DataMode {
    pub fn gaussian() -> Self {
        DataMode::Gaussian {
            query: QueryMode::Uniform,
            scale: 1.0,
        }
    }

    pub fn orthonormal() -> Self {
        DataMode::Orthonormal {
            basis: BasisMode::Canonical,
        }
    }

    /// Stable small integer for binary file headers.
    pub fn tag(&self) -> u8 {
        match self {
            DataMode::Gaussian {
                query: QueryMode::Uniform,
                ..
            } => 0,
            DataMode::Gaussian {
                query: QueryMode::Last,
                ..
            } => 1,
            DataMode::Orthonormal {
                basis: BasisMode::Canonical,
            } => 2,
            DataMode::Orthonormal {
                basis: BasisMode::RandomRotation,
            } => 3,
        }
    }
}

/// A batch of ICL sequences.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub n_pairs: usize,
    pub dim: usize,
    /// One `(2N+1) x 2D` matrix per sample.
    pub inputs: Vec<Matrix>,
    /// One length-D target per sample.
    pub targets: Vec<Vec<f64>>,
    /// 1-based query indices, q in {1..N}.
    pub queries: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        2 * self.n_pairs + 1
    }
}

/// Assemble one input matrix from per-pair vectors.
fn assemble(
    n: usize,
    d: usize,
    items: &[Vec<f64>],
    labels: &[Vec<f64>],
    positions: &[Vec<f64>],
    rot: &RotationMatrix,
    q: usize,
) -> (Matrix, Vec<f64>) {
    let mut x = Matrix::zeros(2 * n + 1, 2 * d);
    for i in 0..n {
        let item_row = x.row_mut(2 * i);
        item_row[..d].copy_from_slice(&items[i]);
        item_row[d..].copy_from_slice(&positions[i]);
        let rotated = rot.apply(&positions[i]);
        let label_row = x.row_mut(2 * i + 1);
        label_row[..d].copy_from_slice(&labels[i]);
        label_row[d..].copy_from_slice(&rotated);
    }
    // Query row: no positional embedding.
    x.row_mut(2 * n)[..d].copy_from_slice(&items[q - 1]);
    (x, labels[q - 1].clone())
}

/// Gaussian ICL batch: all item, label, and position entries i.i.d.
/// `N(0, scale^2)`; deterministic given the seed (sample i uses stream i).
pub fn gen_gaussian(
    n: usize,
    d: usize,
    b: usize,
    seed: u64,
    query: QueryMode,
    scale: f64,
) -> Result<SequenceBatch> {
    if n < 1 {
        return Err(Error::Invalid("n_pairs must be >= 1".into()));
    }
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "dim must be even and >= 2, got {d}"
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Invalid(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let rot = make_rotation(d)?;
    let mut inputs = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut queries = Vec::with_capacity(b);
    for sample in 0..b {
        let mut rng = stream_rng(seed, sample as u64);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let items: Vec<_> = (0..n).map(|_| draw(&mut rng)).collect();
        let labels: Vec<_> = (0..n).map(|_| draw(&mut rng)).collect();
        let positions: Vec<_> = (0..n).map(|_| draw(&mut rng)).collect();
        let q = match query {
            QueryMode::Uniform => rng.gen_range(1..=n),
            QueryMode::Last => n,
        };
        let (x, y) = assemble(n, d, &items, &labels, &positions, &rot, q);
        inputs.push(x);
        targets.push(y);
        queries.push(q);
    }
    Ok(SequenceBatch {
        n_pairs: n,
        dim: d,
        inputs,
        targets,
        queries,
    })
}

/// Random orthogonal matrix via modified Gram-Schmidt on a Gaussian draw,
/// with the sign convention that makes the factorization unique.
fn random_orthogonal(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    for j in 0..d {
        // Two orthogonalization passes keep the result orthogonal to ~1e-15.
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let prev = cols[k].clone();
                for (v, p) in cols[j].iter_mut().zip(&prev) {
                    *v -= dot * p;
                }
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        let sign = if cols[j][j] < 0.0 { -1.0 } else { 1.0 };
        for v in cols[j].iter_mut() {
            *v *= sign / norm;
        }
    }
    let mut m = Matrix::zeros(d, d);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

fn rotate_row(v: &[f64], e: &Matrix) -> Vec<f64> {
    // Row-vector convention: v' = v E.
    let d = v.len();
    let mut out = vec![0.0; d];
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (o, &ekj) in out.iter_mut().zip(e.row(k)) {
            *o += vk * ekj;
        }
    }
    out
}

/// Orthonormal ICL batch (query fixed to the last pair).
///
/// Canonical basis: `a_i = e_{2i-1}`, `b_i = e_{2i}` in token space;
/// `p_i = e_i` in the first half of positional space so `p_i M = e_{i+D/2}`.
/// Requires `d >= 2n`. The random-rotation basis applies a fresh orthogonal
/// map per sample to the token space and a block-orthogonal map
/// `diag(E, E)` to the positional space, which commutes with M and therefore
/// preserves all the orthonormality identities.
pub fn gen_orthonormal(
    n: usize,
    d: usize,
    b: usize,
    seed: u64,
    basis: BasisMode,
) -> Result<SequenceBatch> {
    if n < 1 {
        return Err(Error::Invalid("n_pairs must be >= 1".into()));
    }
    if !d.is_multiple_of(2) || d < 2 * n {
        return Err(Error::Invalid(format!(
            "orthonormal inputs need an even dim >= 2*n_pairs (2N basis vectors per space); got d={d}, n={n}"
        )));
    }
    let rot = make_rotation(d)?;
    let half = d / 2;

    let mut base_items = Vec::with_capacity(n);
    let mut base_labels = Vec::with_capacity(n);
    let mut base_positions = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = vec![0.0; d];
        a[2 * i] = 1.0;
        let mut bvec = vec![0.0; d];
        bvec[2 * i + 1] = 1.0;
        let mut p = vec![0.0; d];
        p[i] = 1.0;
        debug_assert!(i < half);
        base_items.push(a);
        base_labels.push(bvec);
        base_positions.push(p);
    }

    let mut inputs = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut queries = Vec::with_capacity(b);
    for sample in 0..b {
        let (items, labels, positions) = match basis {
            BasisMode::Canonical => (
                base_items.clone(),
                base_labels.clone(),
                base_positions.clone(),
            ),
            BasisMode::RandomRotation => {
                let mut rng = stream_rng(seed, sample as u64);
                let e_tok = random_orthogonal(d, &mut rng);
                let e_half = random_orthogonal(half, &mut rng);
                // diag(E, E) on the positional space.
                let mut e_pos = Matrix::zeros(d, d);
                for i in 0..half {
                    for j in 0..half {
                        let v = e_half.at(i, j);
                        e_pos.set(i, j, v);
                        e_pos.set(i + half, j + half, v);
                    }
                }
                let items = base_items.iter().map(|v| rotate_row(v, &e_tok)).collect();
                let labels = base_labels.iter().map(|v| rotate_row(v, &e_tok)).collect();
                let positions = base_positions
                    .iter()
                    .map(|v| rotate_row(v, &e_pos))
                    .collect();
                (items, labels, positions)
            }
        };
        let (x, y) = assemble(n, d, &items, &labels, &positions, &rot, n);
        inputs.push(x);
        targets.push(y);
        queries.push(n);
    }
    Ok(SequenceBatch {
        n_pairs: n,
        dim: d,
        inputs,
        targets,
        queries,
    })
}

/// Dispatch on the configured mode.
pub fn generate(mode: &DataMode, n: usize, d: usize, b: usize, seed: u64) -> Result<SequenceBatch> {
    match mode {
        DataMode::Gaussian { query, scale } => gen_gaussian(n, d, b, seed, *query, *scale),
        DataMode::Orthonormal { basis } => gen_orthonormal(n, d, b, seed, *basis),
    }
}

const BATCH_MAGIC: &[u8; 4] = b"ICLD";
const BATCH_VERSION: u32 = 1;

impl SequenceBatch {
    /// Flat binary layout: magic, version, N, D, B (u32 LE), mode tag (u8),
    /// then per the whole batch: all inputs row-major f64 LE, all targets,
    /// all query indices (u32 LE).
    pub fn write_binary<W: std::io::Write>(&self, mode: &DataMode, out: &mut W) -> Result<()> {
        out.write_all(BATCH_MAGIC)?;
        out.write_all(&BATCH_VERSION.to_le_bytes())?;
        for v in [self.n_pairs, self.dim, self.len()] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&[mode.tag()])?;
        for x in &self.inputs {
            for v in x.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for y in &self.targets {
            for v in y {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for &q in &self.queries {
            out.write_all(&(q as u32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`SequenceBatch::write_binary`]; returns the mode tag.
    pub fn read_binary<R: std::io::Read>(input: &mut R) -> Result<(SequenceBatch, u8)> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != BATCH_MAGIC {
            return Err(Error::Format("not a batch file (bad magic)".into()));
        }
        let mut buf4 = [0u8; 4];
        input.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != BATCH_VERSION {
            return Err(Error::Format(format!(
                "unsupported batch file version {version}"
            )));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            input.read_exact(&mut buf4)?;
            *d = u32::from_le_bytes(buf4) as usize;
        }
        let [n, d, b] = dims;
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag)?;
        let mut buf8 = [0u8; 8];
        let mut inputs = Vec::with_capacity(b);
        for _ in 0..b {
            let mut m = Matrix::zeros(2 * n + 1, 2 * d);
            for v in m.data_mut() {
                input.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            inputs.push(m);
        }
        let mut targets = Vec::with_capacity(b);
        for _ in 0..b {
            let mut y = vec![0.0; d];
            for v in &mut y {
                input.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            targets.push(y);
        }
        let mut queries = Vec::with_capacity(b);
        for _ in 0..b {
            input.read_exact(&mut buf4)?;
            queries.push(u32::from_le_bytes(buf4) as usize);
        }
        Ok((
            SequenceBatch {
                n_pairs: n,
                dim: d,
                inputs,
                targets,
                queries,
            },
            tag[0],
        ))
    }
}
