//! The 19-dimensional structured weight subspace.
//!
//! Training from zero init on isotropic data keeps the three weight matrices
//! inside a fixed subspace spanned by 19 basis matrices: per structured block
//! a multiple of the identity, and for positional blocks additionally a
//! multiple of the rotation M. This module projects arbitrary weights onto
//! that subspace, materializes weights from the 19 coefficients, and builds
//! gradient masks that confine training to a chosen sub-subspace.
//!
//! Block layout (indices are 1-based, matching the coefficient names):
//!
//! ```text
//! W1 = [ a1*I   0          ]      W3 = [ g1*I  0  g2*I  0  g3*I  0  g4*I  0 ]^T
//!      [ 0      a2*I+a3*M  ]
//!
//! W2 = [ b1*I   0           b2*I   0          ]
//!      [ 0      b3*I+b4*M   0      b5*I+b6*M  ]
//!      [ b7*I   0           b8*I   0          ]
//!      [ 0      b9*I+b10*M  0      b11*I+b12*M ]
//! ```
//!
//! Beta indexing reads the 4x4 block grid row-major, identity coefficient
//! before rotation coefficient. Coefficients are orthogonal projection
//! coefficients under the trace inner product: the I-coefficient of a block
//! is trace(B)/D and the M-coefficient is trace(M B)/D (I and M are
//! orthogonal since trace(M) = 0, and both have squared Frobenius norm D).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Gradients, WeightSet};

pub const NUM_PSEUDO: usize = 19;

/// One of the 19 pseudo-parameters, 1-based within its group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PseudoIndex {
    Alpha(u8),
    Beta(u8),
    Gamma(u8),
}

impl PseudoIndex {
    pub fn alpha(i: u8) -> Result<Self> {
        if (1..=3).contains(&i) {
            Ok(PseudoIndex::Alpha(i))
        } else {
            Err(Error::Invalid(format!(
                "alpha index must be 1..=3, got {i}"
            )))
        }
    }

    pub fn beta(i: u8) -> Result<Self> {
        if (1..=12).contains(&i) {
            Ok(PseudoIndex::Beta(i))
        } else {
            Err(Error::Invalid(format!(
                "beta index must be 1..=12, got {i}"
            )))
        }
    }

    pub fn gamma(i: u8) -> Result<Self> {
        if (1..=4).contains(&i) {
            Ok(PseudoIndex::Gamma(i))
        } else {
            Err(Error::Invalid(format!(
                "gamma index must be 1..=4, got {i}"
            )))
        }
    }

    /// Flat position in 0..19: alphas, then betas, then gammas.
    pub fn flat(&self) -> usize {
        match self {
            PseudoIndex::Alpha(i) => (*i as usize) - 1,
            PseudoIndex::Beta(i) => 3 + (*i as usize) - 1,
            PseudoIndex::Gamma(i) => 15 + (*i as usize) - 1,
        }
    }

    pub fn from_flat(flat: usize) -> Result<Self> {
        match flat {
            0..=2 => Ok(PseudoIndex::Alpha(flat as u8 + 1)),
            3..=14 => Ok(PseudoIndex::Beta((flat - 3) as u8 + 1)),
            15..=18 => Ok(PseudoIndex::Gamma((flat - 15) as u8 + 1)),
            _ => Err(Error::Invalid(format!(
                "flat pseudo index out of range: {flat}"
            ))),
        }
    }

    /// Parse the short form used on the command line: `a3`, `b2`, `g3`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, num) = s.split_at(1.min(s.len()));
        let i: u8 = num
            .parse()
            .map_err(|_| Error::Invalid(format!("bad pseudo-parameter name '{s}'")))?;
        match kind {
            "a" => PseudoIndex::alpha(i),
            "b" => PseudoIndex::beta(i),
            "g" => PseudoIndex::gamma(i),
            _ => Err(Error::Invalid(format!(
                "bad pseudo-parameter name '{s}' (want a#, b#, or g#)"
            ))),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Self::parse)
            .collect()
    }

    pub fn all() -> Vec<Self> {
        (0..NUM_PSEUDO)
            .map(|i| Self::from_flat(i).unwrap())
            .collect()
    }

    /// The three-parameter induction-head subspace.
    pub fn induction_head() -> Vec<Self> {
        vec![
            PseudoIndex::Alpha(3),
            PseudoIndex::Beta(2),
            PseudoIndex::Gamma(3),
        ]
    }
}

impl std::fmt::Display for PseudoIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PseudoIndex::Alpha(i) => write!(f, "a{i}"),
            PseudoIndex::Beta(i) => write!(f, "b{i}"),
            PseudoIndex::Gamma(i) => write!(f, "g{i}"),
        }
    }
}

impl Serialize for PseudoIndex {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PseudoIndex {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        PseudoIndex::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// The 19 scalars indexing the structured subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoParams {
    pub alpha: [f64; 3],
    pub beta: [f64; 12],
    pub gamma: [f64; 4],
}

impl PseudoParams {
    pub fn zeros() -> Self {
        PseudoParams {
            alpha: [0.0; 3],
            beta: [0.0; 12],
            gamma: [0.0; 4],
        }
    }

    pub fn get(&self, idx: PseudoIndex) -> f64 {
        match idx {
            PseudoIndex::Alpha(i) => self.alpha[i as usize - 1],
            PseudoIndex::Beta(i) => self.beta[i as usize - 1],
            PseudoIndex::Gamma(i) => self.gamma[i as usize - 1],
        }
    }

    pub fn set(&mut self, idx: PseudoIndex, v: f64) {
        match idx {
            PseudoIndex::Alpha(i) => self.alpha[i as usize - 1] = v,
            PseudoIndex::Beta(i) => self.beta[i as usize - 1] = v,
            PseudoIndex::Gamma(i) => self.gamma[i as usize - 1] = v,
        }
    }

    pub fn flat(&self) -> [f64; NUM_PSEUDO] {
        let mut out = [0.0; NUM_PSEUDO];
        out[..3].copy_from_slice(&self.alpha);
        out[3..15].copy_from_slice(&self.beta);
        out[15..].copy_from_slice(&self.gamma);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

/// Projection result: coefficients plus off-structure residuals per matrix.
#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub params: PseudoParams,
    /// Frobenius norms of `w_k - materialize(params)_k` for k = 1, 2, 3.
    pub residual_fro: [f64; 3],
    /// `residual_fro / ||w_k||_F`, zero for an all-zero matrix.
    pub relative_residual: [f64; 3],
}

/// Structured blocks of W2: (block_row, block_col, I-coefficient index,
/// M-coefficient index if the block is positional). Indices are 1-based betas.
const W2_BLOCKS: [(usize, usize, u8, Option<u8>); 8] = [
    (0, 0, 1, None),
    (0, 2, 2, None),
    (1, 1, 3, Some(4)),
    (1, 3, 5, Some(6)),
    (2, 0, 7, None),
    (2, 2, 8, None),
    (3, 1, 9, Some(10)),
    (3, 3, 11, Some(12)),
];

fn check_dim(d: usize) -> Result<()> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "structured weights need an even dim >= 2, got {d}"
        )));
    }
    Ok(())
}

/// trace of the DxD block starting at (r0, c0), divided by D.
fn block_identity_coeff(m: &Matrix, r0: usize, c0: usize, d: usize) -> f64 {
    let mut tr = 0.0;
    for i in 0..d {
        tr += m.at(r0 + i, c0 + i);
    }
    tr / d as f64
}

/// trace(M * block) / D: picks out entries where the row is the M-partner of
/// the column, i.e. B[(j + d/2) mod d][j].
fn block_rotation_coeff(m: &Matrix, r0: usize, c0: usize, d: usize) -> f64 {
    let half = d / 2;
    let mut tr = 0.0;
    for j in 0..d {
        let partner = (j + half) % d;
        tr += m.at(r0 + partner, c0 + j);
    }
    tr / d as f64
}

fn add_identity_block(m: &mut Matrix, r0: usize, c0: usize, d: usize, c: f64) {
    if c == 0.0 {
        return;
    }
    for i in 0..d {
        let v = m.at(r0 + i, c0 + i) + c;
        m.set(r0 + i, c0 + i, v);
    }
}

fn add_rotation_block(m: &mut Matrix, r0: usize, c0: usize, d: usize, c: f64) {
    if c == 0.0 {
        return;
    }
    let half = d / 2;
    for j in 0..d {
        let partner = (j + half) % d;
        let v = m.at(r0 + partner, c0 + j) + c;
        m.set(r0 + partner, c0 + j, v);
    }
}

/// Read the 19 projection coefficients off a (W1, W2, W3)-shaped triple.
pub fn extract_coeffs(w1: &Matrix, w2: &Matrix, w3: &Matrix) -> Result<PseudoParams> {
    let d = w3.cols();
    check_dim(d)?;
    if w1.rows() != 2 * d
        || w1.cols() != 2 * d
        || w2.rows() != 4 * d
        || w2.cols() != 4 * d
        || w3.rows() != 8 * d
    {
        return Err(Error::Shape(
            "weight matrices inconsistent with a single D".into(),
        ));
    }
    let mut p = PseudoParams::zeros();
    p.alpha[0] = block_identity_coeff(w1, 0, 0, d);
    p.alpha[1] = block_identity_coeff(w1, d, d, d);
    p.alpha[2] = block_rotation_coeff(w1, d, d, d);
    for &(br, bc, bi, bm) in &W2_BLOCKS {
        p.beta[bi as usize - 1] = block_identity_coeff(w2, br * d, bc * d, d);
        if let Some(bm) = bm {
            p.beta[bm as usize - 1] = block_rotation_coeff(w2, br * d, bc * d, d);
        }
    }
    for k in 0..4 {
        p.gamma[k] = block_identity_coeff(w3, 2 * k * d, 0, d);
    }
    Ok(p)
}

/// Build the exact structured block layout from the 19 coefficients.
pub fn materialize(p: &PseudoParams, d: usize) -> Result<WeightSet> {
    check_dim(d)?;
    let mut w1 = Matrix::zeros(2 * d, 2 * d);
    add_identity_block(&mut w1, 0, 0, d, p.alpha[0]);
    add_identity_block(&mut w1, d, d, d, p.alpha[1]);
    add_rotation_block(&mut w1, d, d, d, p.alpha[2]);

    let mut w2 = Matrix::zeros(4 * d, 4 * d);
    for &(br, bc, bi, bm) in &W2_BLOCKS {
        add_identity_block(&mut w2, br * d, bc * d, d, p.beta[bi as usize - 1]);
        if let Some(bm) = bm {
            add_rotation_block(&mut w2, br * d, bc * d, d, p.beta[bm as usize - 1]);
        }
    }

    let mut w3 = Matrix::zeros(8 * d, d);
    for k in 0..4 {
        add_identity_block(&mut w3, 2 * k * d, 0, d, p.gamma[k]);
    }

    WeightSet::new(w1, w2, w3)
}

/// Project weights onto the structured subspace and report residuals.
pub fn project(w: &WeightSet) -> Result<StructureReport> {
    let params = extract_coeffs(&w.w1, &w.w2, &w.w3)?;
    let fit = materialize(&params, w.dim())?;
    let residual_fro = [
        w.w1.sub(&fit.w1).frob_norm(),
        w.w2.sub(&fit.w2).frob_norm(),
        w.w3.sub(&fit.w3).frob_norm(),
    ];
    let totals = [w.w1.frob_norm(), w.w2.frob_norm(), w.w3.frob_norm()];
    let mut relative_residual = [0.0; 3];
    for k in 0..3 {
        relative_residual[k] = if totals[k] > 0.0 {
            residual_fro[k] / totals[k]
        } else {
            0.0
        };
    }
    Ok(StructureReport {
        params,
        residual_fro,
        relative_residual,
    })
}

/// Gradient transformer that keeps only the chosen pseudo-coefficients.
///
/// Applying it projects each gradient matrix onto the structured subspace,
/// zeroes coefficients outside the active set, and materializes back. The
/// full 19-index set reduces to plain structure projection.
#[derive(Debug, Clone)]
pub struct AblationMask {
    active: [bool; NUM_PSEUDO],
}

impl AblationMask {
    pub fn new(active: &[PseudoIndex]) -> Result<Self> {
        if active.is_empty() {
            return Err(Error::Invalid(
                "ablation mask needs a non-empty index set".into(),
            ));
        }
        let mut mask = [false; NUM_PSEUDO];
        for idx in active {
            mask[idx.flat()] = true;
        }
        Ok(AblationMask { active: mask })
    }

    pub fn all() -> Self {
        AblationMask {
            active: [true; NUM_PSEUDO],
        }
    }

    pub fn is_active(&self, idx: PseudoIndex) -> bool {
        self.active[idx.flat()]
    }

    pub fn mask_params(&self, p: &PseudoParams) -> PseudoParams {
        let mut out = *p;
        for flat in 0..NUM_PSEUDO {
            if !self.active[flat] {
                out.set(PseudoIndex::from_flat(flat).unwrap(), 0.0);
            }
        }
        out
    }

    pub fn apply(&self, g: &Gradients) -> Result<Gradients> {
        let coeffs = extract_coeffs(&g.g1, &g.g2, &g.g3)?;
        let masked = self.mask_params(&coeffs);
        let w = materialize(&masked, g.g3.cols())?;
        Ok(Gradients {
            g1: w.w1,
            g2: w.w2,
            g3: w.w3,
        })
    }
}
