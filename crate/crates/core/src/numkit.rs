//! Deterministic numeric kernel.
//!
//! Dense vector helpers, a row-major [`Matrix`], stable softmax, cosine
//! similarity with its gradient, a seeded [`Rng`] with Gaussian/Gamma/Beta
//! samplers, and the central-difference gradient oracle used by the test
//! suites of every other module.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Floor applied to log arguments and denominators once strict positivity
/// has been checked.
pub const EPS: f64 = 1e-12;

/// Tolerance on `Σp = 1` for a vector to count as a simplex point.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex, the output coding of a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector(Vec<f64>);

impl PredictionVector {
    /// Validates nonnegativity and unit mass (within [`SIMPLEX_TOL`]).
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if is_on_simplex(&p) {
            Ok(Self(p))
        } else {
            Err(Error::OffSimplex)
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for PredictionVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn is_on_simplex(p: &[f64]) -> bool {
    !p.is_empty()
        && p.iter().all(|&v| v.is_finite() && v >= 0.0)
        && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Result<PredictionVector> {
    if z.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(PredictionVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Pulls a gradient with respect to `p = softmax(z)` back to the logits:
/// `dz = p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let inner = dot(grad_p, p);
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - inner)).collect()
}

/// Cosine similarity `⟨a,b⟩ / (‖a‖‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine_sim(a, b)` with respect to `a`:
/// `b / (‖a‖‖b‖) − s · a / ‖a‖²`.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let s = cosine_sim(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    let inv_ab = 1.0 / (na * nb);
    let inv_aa = s / (na * na);
    Ok(a.iter()
        .zip(b)
        .map(|(ai, bi)| bi * inv_ab - ai * inv_aa)
        .collect())
}

/// Central-difference gradient `(f(x+h·e_j) − f(x−h·e_j)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let up = f(&probe);
        probe[j] = orig - h;
        let down = f(&probe);
        probe[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteEvaluation { coord: j });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, 1e-10)`.
///
/// This is the comparison used by every gradient audit in the crate.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-10)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(yr, self.row(r), &mut out);
        }
        out
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let scale = alpha * ur;
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            axpy(scale, v, row);
        }
    }
}

/// Seeded pseudo-random generator.
///
/// Backed by ChaCha8, whose output stream is specified independently of
/// platform and word size. All distribution samplers are implemented here
/// on top of uniform draws so their streams are fixed by this crate.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator derived from this generator's seed and a
    /// component name: the first eight bytes of `SHA-256(seed_le ‖ name)`.
    /// Does not depend on (or advance) the current stream position.
    pub fn substream(&self, name: &str) -> Rng {
        Rng::new(derive_seed(self.seed, name))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `(0, 1]`, safe as a log argument.
    fn uniform_open0(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Standard normal draw (Marsaglia polar method).
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Gamma(shape, 1). Marsaglia–Tsang for `shape ≥ 1`, Jöhnk below.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::InvalidGammaShape(shape));
        }
        if shape >= 1.0 {
            Ok(self.gamma_marsaglia_tsang(shape))
        } else {
            Ok(self.gamma_johnk(shape))
        }
    }

    fn gamma_marsaglia_tsang(&mut self, shape: f64) -> f64 {
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let (x, v) = loop {
                let x = self.normal();
                let v = 1.0 + c * x;
                if v > 0.0 {
                    break (x, v * v * v);
                }
            };
            let u = self.uniform_open0();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    // Jöhnk: X = U^(1/a), Y = V^(1/(1-a)); on X + Y ≤ 1 return E · X/(X+Y)
    // with E ~ Exp(1). Carried out in log space so tiny shapes do not
    // underflow both powers to zero.
    fn gamma_johnk(&mut self, shape: f64) -> f64 {
        loop {
            let log_x = self.uniform_open0().ln() / shape;
            let log_y = self.uniform_open0().ln() / (1.0 - shape);
            let hi = log_x.max(log_y);
            let log_sum = hi + ((log_x - hi).exp() + (log_y - hi).exp()).ln();
            if log_sum <= 0.0 {
                let e = -self.uniform_open0().ln();
                return e * (log_x - log_sum).exp();
            }
        }
    }

    /// Beta(a, b) via the Gamma sum-ratio construction.
    pub fn beta(&mut self, a: f64, b: f64) -> Result<f64> {
        if !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidBetaParameter(if a > 0.0 { b } else { a }));
        }
        loop {
            let x = self.gamma(a)?;
            let y = self.gamma(b)?;
            let total = x + y;
            if total > 0.0 && total.is_finite() {
                return Ok((x / total).clamp(0.0, 1.0));
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Seed derivation used by [`Rng::substream`].
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Symmetric Beta(ρ, ρ) draw, the mixup coefficient distribution.
pub fn sample_beta(rng: &mut Rng, rho: f64) -> Result<f64> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidBetaParameter(rho));
    }
    rng.beta(rho, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for v in p.as_slice() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }

        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!(close(p.as_slice()[0], 0.25, 1e-15));
        assert!(close(p.as_slice()[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert_eq!(softmax(&[1.0, f64::NAN]), Err(Error::NonFiniteLogits));
        assert_eq!(softmax(&[f64::INFINITY]), Err(Error::NonFiniteLogits));
    }

    #[test]
    fn softmax_normalization_many_random() {
        let mut rng = Rng::new(11);
        for _ in 0..10_000 {
            let k = 2 + rng.below(9);
            let z: Vec<f64> = (0..k).map(|_| rng.uniform_range(-50.0, 50.0)).collect();
            let p = softmax(&z).unwrap();
            let total: f64 = p.as_slice().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let g = [0.5, -0.25, 1.5, 2.0];
        let f = |zz: &[f64]| dot(softmax(zz).unwrap().as_slice(), &g);
        let p = softmax(&z).unwrap();
        let analytic = softmax_backward(p.as_slice(), &g);
        let numeric = finite_diff_grad(f, &z, DEFAULT_FD_STEP).unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-8);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_sim(&[0.9, 0.1], &[0.1, 0.9]).unwrap();
        assert!(close(s, 0.18 / 0.82, 1e-15));
        assert!(close(s, 0.219512, 1e-6));
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        );
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let a = [0.2, 0.5, 0.3];
        let b = [0.6, 0.1, 0.3];
        let analytic = cosine_grad(&a, &b).unwrap();
        let numeric = finite_diff_grad(|x| cosine_sim(x, &b).unwrap(), &a, 1e-6).unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-8);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!(close(g[0], 2.0, 1e-6) && close(g[1], 4.0, 1e-6));

        let g = finite_diff_grad(|x| x.iter().sum(), &[3.0, -7.5, 0.25], 1e-5).unwrap();
        assert!(g.iter().all(|v| close(*v, 1.0, 1e-9)));
    }

    #[test]
    fn finite_diff_reports_coordinate() {
        let f = |x: &[f64]| if x[1] > 1.0 { f64::NAN } else { x[0] };
        assert_eq!(
            finite_diff_grad(f, &[0.0, 1.0], 1e-5),
            Err(Error::NonFiniteEvaluation { coord: 1 })
        );
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn substreams_depend_on_name_and_seed_only() {
        let mut base = Rng::new(5);
        let s1 = base.substream("mining").next_u64();
        base.next_u64();
        let s2 = base.substream("mining").next_u64();
        assert_eq!(s1, s2);
        assert_ne!(s1, Rng::new(5).substream("batches").next_u64());
    }

    #[test]
    fn beta_rejects_bad_parameter() {
        let mut rng = Rng::new(0);
        assert_eq!(
            sample_beta(&mut rng, 0.0),
            Err(Error::InvalidBetaParameter(0.0))
        );
        assert!(sample_beta(&mut rng, -1.0).is_err());
    }

    #[test]
    fn beta_uniform_at_rho_one() {
        let mut rng = Rng::new(7);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| sample_beta(&mut rng, 1.0).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
        draws.sort_by(f64::total_cmp);
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = (x - i as f64 / n as f64).abs();
                let hi = ((i + 1) as f64 / n as f64 - x).abs();
                lo.max(hi)
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn beta_small_rho_concentrates_at_edges() {
        // Reference: 2·I_{0.1}(0.2, 0.2) ≈ 0.6734 from the regularized
        // incomplete Beta function.
        let reference = 2.0 * statrs::function::beta::beta_reg(0.2, 0.2, 0.1);
        assert!(reference > 0.5);
        let mut rng = Rng::new(8);
        let n = 100_000;
        let edge = (0..n)
            .map(|_| sample_beta(&mut rng, 0.2).unwrap())
            .filter(|&l| !(0.1..=0.9).contains(&l))
            .count() as f64
            / n as f64;
        assert!(edge > 0.5);
        assert!((edge - reference).abs() < 0.01, "{edge} vs {reference}");
    }

    #[test]
    fn beta_variance_shrinks_with_rho() {
        let var = |rho: f64, seed: u64| {
            let mut rng = Rng::new(seed);
            let xs: Vec<f64> = (0..100_000).map(|_| sample_beta(&mut rng, rho).unwrap()).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            (m, v)
        };
        let (m1, v1) = var(1.0, 1);
        let (m5, v5) = var(5.0, 2);
        assert!((m5 - 0.5).abs() < 0.01 && (m1 - 0.5).abs() < 0.01);
        assert!(v5 < v1);
        assert!((v5 - 1.0 / 44.0).abs() < 0.002);
    }

    #[test]
    fn gamma_moments() {
        for &shape in &[0.3, 0.9, 1.0, 2.5, 7.0] {
            let mut rng = Rng::new(99);
            let n = 100_000;
            let xs: Vec<f64> = (0..n).map(|_| rng.gamma(shape).unwrap()).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            assert!((m - shape).abs() < 0.03 * shape.max(1.0), "shape {shape} mean {m}");
        }
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        let mut z = Matrix::zeros(2, 2);
        z.add_outer(2.0, &[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(z.data(), &[6.0, 8.0, 12.0, 16.0]);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in proptest::collection::vec(0.001f64..1.0, 2..9),
                               seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.uniform_range(0.001, 1.0)).collect();
            let s1 = cosine_sim(&a, &b).unwrap();
            let s2 = cosine_sim(&b, &a).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&s1));
            prop_assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        }

        #[test]
        fn softmax_is_shift_invariant(z in proptest::collection::vec(-50.0f64..50.0, 2..9),
                                      c in -100.0f64..100.0) {
            let p = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
