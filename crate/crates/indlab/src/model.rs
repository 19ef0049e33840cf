//! The two-layer disentangled attention-only transformer.
//!
//! Forward pass (row-vector convention, X is (2N+1) x 2D):
//!
//! ```text
//! U = H1 = [ X | softmax(X W1 X^T) X ]
//! V = H2 = [ U | softmax(U W2 U^T) U ]
//! Y~ = V W3,    prediction = last row of Y~
//! ```
//!
//! The loss is the plain squared error `||y - y_hat||^2` at the query
//! position (no normalization by D; the closed-form constants depend on
//! this). The backward pass is manual reverse-mode differentiation; only
//! the last output row receives a loss signal, and an all-zero attention
//! row (exclusive masking, row 0) contributes zero gradient.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::matrix::{masked_softmax, MaskMode, Matrix};

const WEIGHTS_MAGIC: &[u8; 4] = b"ICLW";
const WEIGHTS_VERSION: u32 = 1;

/// The three dense weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Matrix,
}

impl WeightSet {
    pub fn new(w1: Matrix, w2: Matrix, w3: Matrix) -> Result<Self> {
        let d = w3.cols();
        if d == 0
            || w1.rows() != 2 * d
            || w1.cols() != 2 * d
            || w2.rows() != 4 * d
            || w2.cols() != 4 * d
            || w3.rows() != 8 * d
        {
            return Err(Error::Shape(format!(
                "inconsistent weight shapes: w1 {}x{}, w2 {}x{}, w3 {}x{}",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols(),
                w3.rows(),
                w3.cols()
            )));
        }
        Ok(WeightSet { w1, w2, w3 })
    }

    pub fn zeros(d: usize) -> Result<Self> {
        WeightSet::new(
            Matrix::zeros(2 * d, 2 * d),
            Matrix::zeros(4 * d, 4 * d),
            Matrix::zeros(8 * d, d),
        )
    }

    pub fn dim(&self) -> usize {
        self.w3.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite() && self.w3.is_finite()
    }

    /// `w -= lr * g`
    pub fn step(&mut self, g: &Gradients, lr: f64) {
        self.w1.add_scaled(&g.g1, -lr);
        self.w2.add_scaled(&g.g2, -lr);
        self.w3.add_scaled(&g.g3, -lr);
    }

    /// Binary layout: magic, version, D, then w1, w2, w3 row-major f64 LE.
    pub fn save<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        for m in [&self.w1, &self.w2, &self.w3] {
            for v in m.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let mut buf4 = [0u8; 4];
        input.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight file version {version}"
            )));
        }
        input.read_exact(&mut buf4)?;
        let d = u32::from_le_bytes(buf4) as usize;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            let mut data = vec![0.0; rows * cols];
            let mut buf8 = [0u8; 8];
            for v in &mut data {
                input.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            Matrix::from_vec(rows, cols, data)
        };
        let w1 = read_matrix(2 * d, 2 * d)?;
        let w2 = read_matrix(4 * d, 4 * d)?;
        let w3 = read_matrix(8 * d, d)?;
        WeightSet::new(w1, w2, w3)
    }

    pub fn load_from(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut f)
    }

    /// CSV export for inspection: one file per matrix is overkill, so the
    /// three matrices are concatenated with name/row markers.
    pub fn export_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        for (name, m) in [("w1", &self.w1), ("w2", &self.w2), ("w3", &self.w3)] {
            for i in 0..m.rows() {
                write!(out, "{name},{i}")?;
                for v in m.row(i) {
                    write!(out, ",{}", crate::format_f64(*v))?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Gradients with the same shapes as [`WeightSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub g1: Matrix,
    pub g2: Matrix,
    pub g3: Matrix,
}

impl Gradients {
    pub fn zeros(d: usize) -> Self {
        Gradients {
            g1: Matrix::zeros(2 * d, 2 * d),
            g2: Matrix::zeros(4 * d, 4 * d),
            g3: Matrix::zeros(8 * d, d),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.g1.add_scaled(&other.g1, 1.0);
        self.g2.add_scaled(&other.g2, 1.0);
        self.g3.add_scaled(&other.g3, 1.0);
    }

    pub fn scale(&mut self, c: f64) {
        self.g1.scale(c);
        self.g2.scale(c);
        self.g3.scale(c);
    }

    pub fn is_finite(&self) -> bool {
        self.g1.is_finite() && self.g2.is_finite() && self.g3.is_finite()
    }
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Matrix,
    pub s1: Matrix,
    pub t1: Matrix,
    pub u: Matrix,
    pub s2: Matrix,
    pub t2: Matrix,
    pub v: Matrix,
    pub y_hat: Vec<f64>,
}

/// Forward pass for one sequence.
pub fn forward(x: &Matrix, w: &WeightSet, mode: MaskMode) -> Result<ForwardCache> {
    let d = w.dim();
    if x.cols() != 2 * d {
        return Err(Error::Shape(format!(
            "input has {} columns but weights expect {}",
            x.cols(),
            2 * d
        )));
    }
    let s1 = x.mul(&w.w1).mul_bt(x);
    let t1 = masked_softmax(&s1, mode)?;
    let u = x.hcat(&t1.mul(x));
    let s2 = u.mul(&w.w2).mul_bt(&u);
    let t2 = masked_softmax(&s2, mode)?;
    let v = u.hcat(&t2.mul(&u));
    let last = v.row(v.rows() - 1);
    let mut y_hat = vec![0.0; d];
    for (k, &vk) in last.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (o, &w3kj) in y_hat.iter_mut().zip(w.w3.row(k)) {
            *o += vk * w3kj;
        }
    }
    Ok(ForwardCache {
        x: x.clone(),
        s1,
        t1,
        u,
        s2,
        t2,
        v,
        y_hat,
    })
}

/// Squared error at the query position.
pub fn loss(cache: &ForwardCache, y: &[f64]) -> f64 {
    cache
        .y_hat
        .iter()
        .zip(y)
        .map(|(p, t)| {
            let e = t - p;
            e * e
        })
        .sum()
}

/// Row-wise softmax backward. Masked entries of `t` are exactly zero, which
/// zeroes their gradient, so no mask argument is needed; an all-zero row
/// (exclusive mode, row 0) produces an all-zero gradient row.
fn softmax_backward(t: &Matrix, dt: &Matrix) -> Matrix {
    let n = t.rows();
    let mut ds = Matrix::zeros(n, n);
    for i in 0..n {
        let t_row = t.row(i);
        let dt_row = dt.row(i);
        let dot: f64 = t_row.iter().zip(dt_row).map(|(a, b)| a * b).sum();
        let ds_row = ds.row_mut(i);
        for j in 0..n {
            ds_row[j] = t_row[j] * (dt_row[j] - dot);
        }
    }
    ds
}

/// Exact gradients of `||y - y_hat||^2` with respect to the three weight
/// matrices. Only the last output row contributes.
pub fn backward(cache: &ForwardCache, w: &WeightSet, y: &[f64]) -> Gradients {
    let mut grads = Gradients::zeros(w.dim());
    backward_into(cache, w, y, &mut grads);
    grads
}

/// Accumulating form of [`backward`]; the hot path for batch averaging.
pub fn backward_into(cache: &ForwardCache, w: &WeightSet, y: &[f64], grads: &mut Gradients) {
    let d = w.dim();
    let l = cache.x.rows();
    assert_eq!(y.len(), d, "target length");

    // d loss / d y_hat
    let dz: Vec<f64> = cache
        .y_hat
        .iter()
        .zip(y)
        .map(|(p, t)| 2.0 * (p - t))
        .collect();

    // W3: y_hat = v_last * W3  =>  g3 += v_last^T (outer) dz
    let v_last = cache.v.row(l - 1);
    for (k, &vk) in v_last.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        let row = grads.g3.row_mut(k);
        for (o, &dzj) in row.iter_mut().zip(&dz) {
            *o += vk * dzj;
        }
    }

    // dV: only the last row is reached by the loss.
    let mut dv = Matrix::zeros(l, 8 * d);
    {
        let dv_last = dv.row_mut(l - 1);
        for (k, slot) in dv_last.iter_mut().enumerate() {
            let w3_row = w.w3.row(k);
            *slot = w3_row.iter().zip(&dz).map(|(a, b)| a * b).sum();
        }
    }

    // V = [U | Q U] with Q = t2.
    let (dv_a, dv_b) = split_cols(&dv, 4 * d);
    let mut du = dv_a;
    du.add_scaled(&cache.t2.mul_at(&dv_b), 1.0);
    let dq = dv_b.mul_bt(&cache.u);
    let dp = softmax_backward(&cache.t2, &dq);
    // P = U W2 U^T
    let dp_u = dp.mul(&cache.u);
    grads.g2.add_scaled(&cache.u.mul_at(&dp_u), 1.0);
    du.add_scaled(&dp_u.mul_bt(&w.w2), 1.0);
    du.add_scaled(&dp.mul_at(&cache.u).mul(&w.w2), 1.0);

    // U = [X | T X] with T = t1.
    let (_dx_direct, du_b) = split_cols(&du, 2 * d);
    let dt = du_b.mul_bt(&cache.x);
    let ds = softmax_backward(&cache.t1, &dt);
    // S = X W1 X^T
    grads.g1.add_scaled(&cache.x.mul_at(&ds.mul(&cache.x)), 1.0);
}

fn split_cols(m: &Matrix, left: usize) -> (Matrix, Matrix) {
    let right = m.cols() - left;
    let mut a = Matrix::zeros(m.rows(), left);
    let mut b = Matrix::zeros(m.rows(), right);
    for i in 0..m.rows() {
        a.row_mut(i).copy_from_slice(&m.row(i)[..left]);
        b.row_mut(i).copy_from_slice(&m.row(i)[left..]);
    }
    (a, b)
}

/// Fixed chunk width for deterministic parallel batch reduction. Chunk
/// boundaries do not depend on the worker count, so results are
/// bit-identical no matter how many threads run.
const GRAD_CHUNK: usize = 32;

/// Mean loss and mean gradients over a batch.
pub fn batch_grad(
    batch: &SequenceBatch,
    w: &WeightSet,
    mode: MaskMode,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Invalid("batch_grad: empty batch".into()));
    }
    let d = w.dim();
    if batch.dim != d {
        return Err(Error::Shape(format!(
            "batch dim {} vs weight dim {}",
            batch.dim, d
        )));
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    use rayon::prelude::*;
    let partials: Vec<Result<(f64, Gradients)>> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss_sum = 0.0;
            let mut grad_sum = Gradients::zeros(d);
            for &i in chunk {
                let cache = forward(&batch.inputs[i], w, mode)?;
                loss_sum += loss(&cache, &batch.targets[i]);
                backward_into(&cache, w, &batch.targets[i], &mut grad_sum);
            }
            Ok((loss_sum, grad_sum))
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut grad_sum = Gradients::zeros(d);
    for partial in partials {
        let (l, g) = partial?;
        loss_sum += l;
        grad_sum.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad_sum.scale(inv);
    Ok((loss_sum * inv, grad_sum))
}

/// Per-sample losses (used for the input-independence check on orthonormal
/// data, where the variance must vanish).
pub fn batch_losses(batch: &SequenceBatch, w: &WeightSet, mode: MaskMode) -> Result<Vec<f64>> {
    (0..batch.len())
        .map(|i| {
            let cache = forward(&batch.inputs[i], w, mode)?;
            Ok(loss(&cache, &batch.targets[i]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian, gen_orthonormal, BasisMode, QueryMode};
    use crate::pseudo::{materialize, PseudoParams};
    use crate::seeding::stream_rng;
    use rand::Rng;

    fn random_weights(d: usize, seed: u64, scale: f64) -> WeightSet {
        let mut rng = stream_rng(seed, 9);
        let mut w = WeightSet::zeros(d).unwrap();
        for m in [&mut w.w1, &mut w.w2, &mut w.w3] {
            for v in m.data_mut() {
                *v = scale * rng.gen_range(-1.0..1.0);
            }
        }
        w
    }

    #[test]
    fn zero_final_layer_kills_output() {
        let batch = gen_gaussian(3, 4, 2, 1, QueryMode::Uniform, 1.0).unwrap();
        let mut w = random_weights(4, 2, 0.3);
        w.w3 = Matrix::zeros(8 * 4, 4);
        for x in &batch.inputs {
            let cache = forward(x, &w, MaskMode::CausalInclusiveSelf).unwrap();
            assert!(cache.y_hat.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_w1_inclusive_gives_running_means() {
        let d = 4;
        let batch = gen_gaussian(2, d, 1, 5, QueryMode::Uniform, 1.0).unwrap();
        let x = &batch.inputs[0];
        let w = WeightSet::zeros(d).unwrap();
        let cache = forward(x, &w, MaskMode::CausalInclusiveSelf).unwrap();
        for i in 0..x.rows() {
            for j in 0..x.rows() {
                let expect = if j <= i { 1.0 / (i as f64 + 1.0) } else { 0.0 };
                assert!((cache.t1.at(i, j) - expect).abs() < 1e-15);
            }
            // Retrieved half of U row i is the running mean of X rows 0..=i.
            let mut mean = vec![0.0; 2 * d];
            for k in 0..=i {
                for (m, &v) in mean.iter_mut().zip(x.row(k)) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= (i + 1) as f64;
            }
            for (a, b) in cache.u.row(i)[2 * d..].iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_basic_cases() {
        let d = 4;
        let x = gen_gaussian(2, d, 1, 3, QueryMode::Uniform, 1.0)
            .unwrap()
            .inputs[0]
            .clone();
        let w = WeightSet::zeros(d).unwrap();
        let cache = forward(&x, &w, MaskMode::CausalInclusiveSelf).unwrap();
        // zero prediction, unit target
        let mut y = vec![0.0; d];
        y[1] = 1.0;
        assert_eq!(loss(&cache, &y), 1.0);
        // perfect prediction
        assert_eq!(loss(&cache, &cache.y_hat.clone()), 0.0);
    }

    #[test]
    fn mean_loss_at_zero_weights_approximates_dim() {
        let d = 8;
        let batch = gen_gaussian(2, d, 10_000, 77, QueryMode::Uniform, 1.0).unwrap();
        let w = WeightSet::zeros(d).unwrap();
        let (mean_loss, _) = batch_grad(&batch, &w, MaskMode::CausalInclusiveSelf).unwrap();
        assert!(
            (mean_loss - d as f64).abs() < 0.05 * d as f64,
            "expected about {d}, got {mean_loss}"
        );
    }

    #[test]
    fn g3_at_zero_weights_is_the_stated_outer_product() {
        let d = 4;
        let batch = gen_gaussian(2, d, 1, 11, QueryMode::Uniform, 1.0).unwrap();
        let x = &batch.inputs[0];
        let y = &batch.targets[0];
        let w = WeightSet::zeros(d).unwrap();
        let cache = forward(x, &w, MaskMode::CausalInclusiveSelf).unwrap();
        let g = backward(&cache, &w, y);
        let v_last = cache.v.row(x.rows() - 1);
        for (k, &vk) in v_last.iter().enumerate() {
            for (j, &yj) in y.iter().enumerate() {
                let expect = vk * 2.0 * (0.0 - yj);
                assert!((g.g3.at(k, j) - expect).abs() < 1e-14);
            }
        }
        // Nothing flows past the zero W3.
        assert_eq!(g.g1.frob_norm(), 0.0);
        assert_eq!(g.g2.frob_norm(), 0.0);
    }

    /// Central finite differences over every weight entry.
    fn finite_diff(x: &Matrix, w: &WeightSet, y: &[f64], mode: MaskMode, h: f64) -> Gradients {
        let d = w.dim();
        let mut g = Gradients::zeros(d);
        let eval = |w: &WeightSet| loss(&forward(x, w, mode).unwrap(), y);
        fn pick(ws: &mut WeightSet, which: usize) -> &mut Matrix {
            match which {
                0 => &mut ws.w1,
                1 => &mut ws.w2,
                _ => &mut ws.w3,
            }
        }
        let mats: [(usize, usize); 3] = [(2 * d, 2 * d), (4 * d, 4 * d), (8 * d, d)];
        for (which, (rows, cols)) in mats.iter().enumerate() {
            for i in 0..*rows {
                for j in 0..*cols {
                    let base = match which {
                        0 => w.w1.at(i, j),
                        1 => w.w2.at(i, j),
                        _ => w.w3.at(i, j),
                    };
                    let mut wp = w.clone();
                    let mut wm = w.clone();
                    pick(&mut wp, which).set(i, j, base + h);
                    pick(&mut wm, which).set(i, j, base - h);
                    let grad = (eval(&wp) - eval(&wm)) / (2.0 * h);
                    match which {
                        0 => g.g1.set(i, j, grad),
                        1 => g.g2.set(i, j, grad),
                        _ => g.g3.set(i, j, grad),
                    }
                }
            }
        }
        g
    }

    fn max_rel_err(a: &Gradients, b: &Gradients) -> f64 {
        let mut worst: f64 = 0.0;
        for (ma, mb) in [(&a.g1, &b.g1), (&a.g2, &b.g2), (&a.g3, &b.g3)] {
            for (x, y) in ma.data().iter().zip(mb.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                worst = worst.max((x - y).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        let d = 4;
        let n = 2;
        for seed in 0..20u64 {
            let batch = gen_gaussian(n, d, 1, 100 + seed, QueryMode::Uniform, 1.0).unwrap();
            let x = &batch.inputs[0];
            let y = &batch.targets[0];
            let w = random_weights(d, seed, 0.4);
            for mode in [MaskMode::CausalInclusiveSelf, MaskMode::CausalExclusiveSelf] {
                let cache = forward(x, &w, mode).unwrap();
                let analytic = backward(&cache, &w, y);
                let numeric = finite_diff(x, &w, y, mode, 1e-5);
                let err = max_rel_err(&analytic, &numeric);
                assert!(err < 1e-4, "seed {seed}, {mode:?}: max rel err {err}");
            }
        }
    }

    #[test]
    fn structured_loss_matches_closed_form_example() {
        // alpha3=0, beta2=0, gamma3=1, N=2 -> closed-form loss 0.75
        let n = 2;
        let d = 4;
        let mut p = PseudoParams::zeros();
        p.gamma[2] = 1.0;
        let w = materialize(&p, d).unwrap();
        let batch = gen_orthonormal(n, d, 1, 0, BasisMode::Canonical).unwrap();
        let cache = forward(&batch.inputs[0], &w, MaskMode::CausalExclusiveSelf).unwrap();
        let l = loss(&cache, &batch.targets[0]);
        assert!((l - 0.75).abs() < 1e-10, "loss {l}");
    }

    #[test]
    fn closed_form_loss_grid() {
        for &n in &[2usize, 4, 8] {
            let d = 2 * n;
            let batch = gen_orthonormal(n, d, 1, 0, BasisMode::Canonical).unwrap();
            for &a in &[0.0, 0.5, 1.0, 2.0] {
                for &b in &[0.0, 0.5, 1.0, 2.0] {
                    for &g in &[0.0, 0.5, 1.0] {
                        let mut p = PseudoParams::zeros();
                        p.alpha[2] = a;
                        p.beta[1] = b;
                        p.gamma[2] = g;
                        let w = materialize(&p, d).unwrap();
                        let cache =
                            forward(&batch.inputs[0], &w, MaskMode::CausalExclusiveSelf).unwrap();
                        let model_loss = loss(&cache, &batch.targets[0]);
                        let closed = crate::flow::closed_loss(a, b, g, n).unwrap();
                        assert!(
                            (model_loss - closed).abs() < 1e-9,
                            "a={a} b={b} g={g} n={n}: {model_loss} vs {closed}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn directional_grads_match_closed_form() {
        // Gradient projected onto the three induction-head directions equals
        // the closed-form partial derivatives.
        for &n in &[2usize, 4] {
            let d = 2 * n;
            let batch = gen_orthonormal(n, d, 1, 0, BasisMode::Canonical).unwrap();
            for &(a, b, g) in &[(0.3, 0.2, 0.4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.5)] {
                let mut p = PseudoParams::zeros();
                p.alpha[2] = a;
                p.beta[1] = b;
                p.gamma[2] = g;
                let w = materialize(&p, d).unwrap();
                let cache = forward(&batch.inputs[0], &w, MaskMode::CausalExclusiveSelf).unwrap();
                let grads = backward(&cache, &w, &batch.targets[0]);
                let coeffs =
                    crate::pseudo::extract_coeffs(&grads.g1, &grads.g2, &grads.g3).unwrap();
                // Directional gradient = D * projection coefficient.
                let da = coeffs.alpha[2] * d as f64;
                let db = coeffs.beta[1] * d as f64;
                let dg = coeffs.gamma[2] * d as f64;
                let (ca, cb, cg) = crate::flow::closed_grad(a, b, g, n).unwrap();
                for (got, want) in [(da, ca), (db, cb), (dg, cg)] {
                    let scale = want.abs().max(1.0);
                    assert!(
                        (got - want).abs() / scale < 1e-6,
                        "n={n} a={a} b={b} g={g}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_of_one_equals_single_sample() {
        let d = 4;
        let batch = gen_gaussian(2, d, 1, 55, QueryMode::Uniform, 1.0).unwrap();
        let w = random_weights(d, 5, 0.2);
        let (l, g) = batch_grad(&batch, &w, MaskMode::CausalInclusiveSelf).unwrap();
        let cache = forward(&batch.inputs[0], &w, MaskMode::CausalInclusiveSelf).unwrap();
        assert_eq!(l, loss(&cache, &batch.targets[0]));
        let single = backward(&cache, &w, &batch.targets[0]);
        assert_eq!(g, single);
    }

    #[test]
    fn batch_grad_averaging_is_linear() {
        let d = 4;
        let w = random_weights(d, 6, 0.2);
        let full = gen_gaussian(2, d, 6, 77, QueryMode::Uniform, 1.0).unwrap();
        let mut first = full.clone();
        let mut second = full.clone();
        first.inputs.truncate(2);
        first.targets.truncate(2);
        first.queries.truncate(2);
        second.inputs.drain(..2);
        second.targets.drain(..2);
        second.queries.drain(..2);
        let (lf, gf) = batch_grad(&full, &w, MaskMode::CausalInclusiveSelf).unwrap();
        let (l1, g1) = batch_grad(&first, &w, MaskMode::CausalInclusiveSelf).unwrap();
        let (l2, g2) = batch_grad(&second, &w, MaskMode::CausalInclusiveSelf).unwrap();
        let merged_loss = (2.0 * l1 + 4.0 * l2) / 6.0;
        assert!((lf - merged_loss).abs() < 1e-12);
        for (whole, part_a, part_b) in [
            (&gf.g1, &g1.g1, &g2.g1),
            (&gf.g2, &g1.g2, &g2.g2),
            (&gf.g3, &g1.g3, &g2.g3),
        ] {
            for (i, v) in whole.data().iter().enumerate() {
                let merged = (2.0 * part_a.data()[i] + 4.0 * part_b.data()[i]) / 6.0;
                assert!((v - merged).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let d = 4;
        let mut batch = gen_gaussian(2, d, 1, 3, QueryMode::Uniform, 1.0).unwrap();
        batch.inputs.clear();
        batch.targets.clear();
        batch.queries.clear();
        let w = WeightSet::zeros(d).unwrap();
        assert!(batch_grad(&batch, &w, MaskMode::CausalInclusiveSelf).is_err());
    }

    #[test]
    fn gradient_variance_shrinks_with_batch_size() {
        // Variance across seeds of a projected gradient coefficient should
        // scale roughly like 1/B.
        let d = 4;
        let n = 2;
        let w = random_weights(d, 8, 0.2);
        let estimate = |b: usize, seed: u64| -> f64 {
            let batch = gen_gaussian(n, d, b, seed, QueryMode::Uniform, 1.0).unwrap();
            let (_, g) = batch_grad(&batch, &w, MaskMode::CausalInclusiveSelf).unwrap();
            crate::pseudo::extract_coeffs(&g.g1, &g.g2, &g.g3)
                .unwrap()
                .gamma[2]
        };
        let variance = |b: usize| -> f64 {
            let vals: Vec<f64> = (0..24).map(|s| estimate(b, 1000 + s)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        };
        let v_small = variance(16);
        let v_large = variance(256);
        let ratio = v_small / v_large;
        // Expected 16.0; accept a generous Monte Carlo window.
        assert!((4.0..64.0).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn weight_roundtrip_through_file() {
        let w = random_weights(4, 10, 0.5);
        let mut buf = Vec::new();
        w.save(&mut buf).unwrap();
        let back = WeightSet::load(&mut buf.as_slice()).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn weight_csv_export_is_lossless() {
        let w = random_weights(2, 12, 0.5);
        let mut buf = Vec::new();
        w.export_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4 + 8 + 16);
        let first = text.lines().next().unwrap();
        let mut fields = first.split(',');
        assert_eq!(fields.next(), Some("w1"));
        assert_eq!(fields.next(), Some("0"));
        let v: f64 = fields.next().unwrap().parse().unwrap();
        assert_eq!(v.to_bits(), w.w1.at(0, 0).to_bits());
    }

    #[test]
    fn loss_invariant_under_data_rotation_with_structured_weights() {
        // Rotating tokens by any orthogonal map and positions by a
        // block-orthogonal map leaves the loss unchanged when the weights
        // are structured.
        let n = 3;
        let d = 6;
        let mut p = PseudoParams::zeros();
        p.alpha = [0.3, -0.2, 0.8];
        p.beta = [
            0.1, 0.7, -0.3, 0.2, 0.05, -0.1, 0.4, 0.0, 0.2, -0.2, 0.1, 0.3,
        ];
        p.gamma = [0.2, -0.1, 0.9, 0.05];
        let w = materialize(&p, d).unwrap();
        let plain = gen_orthonormal(n, d, 1, 42, BasisMode::Canonical).unwrap();
        let rotated = gen_orthonormal(n, d, 4, 42, BasisMode::RandomRotation).unwrap();
        let base = loss(
            &forward(&plain.inputs[0], &w, MaskMode::CausalExclusiveSelf).unwrap(),
            &plain.targets[0],
        );
        for (x, y) in rotated.inputs.iter().zip(&rotated.targets) {
            let l = loss(&forward(x, &w, MaskMode::CausalExclusiveSelf).unwrap(), y);
            assert!((l - base).abs() < 1e-9, "{l} vs {base}");
        }
    }
}
