//! Loss mathematics: cosine similarity losses, batch similarity matrix and
//! its normalization, temperature softmax, soft-target propagation (iterative
//! and closed form), KL self-distillation, and the weighted total loss.
//!
//! The affinity side (similarity matrix, soft targets) is computed on
//! detached values and carries no gradient; only the probability tensor `A`
//! stays in the graph.

use crate::error::{Error, Result};
use crate::tensor::{scalar_from, Scalar, Tensor};

/// Loss combination weights: `L = L_CV + L_CM + lambda * tau^2 * L_SKD`.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda: f64,
    pub tau: f64,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            tau: 4.0,
            omega: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Contract(format!("tau {} must be positive", self.tau)));
        }
        if !(0.0..1.0).contains(&self.omega) {
            return Err(Error::Contract(format!(
                "omega {} outside [0, 1); the propagation series diverges at 1",
                self.omega
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Contract(format!("lambda {} negative", self.lambda)));
        }
        Ok(())
    }
}

/// Row-stochastic (after normalization) batch affinity matrix with a zero
/// diagonal. Always detached from the gradient graph.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix<S: Scalar> {
    values: Vec<S>,
    n: usize,
    normalized: bool,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Build directly from a row-major matrix; used by tests and the
    /// propagation oracle. The diagonal must already be zero.
    pub fn from_values(values: Vec<S>, n: usize, normalized: bool) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Contract(format!("{} values for {n}x{n}", values.len())));
        }
        for i in 0..n {
            if values[i * n + i] != S::zero() {
                return Err(Error::Contract(format!("nonzero diagonal at row {i}")));
            }
        }
        Ok(SimilarityMatrix {
            values,
            n,
            normalized,
        })
    }
}

/// Softmax probabilities of the distillation head, still attached to the
/// gradient graph through its logits.
#[derive(Clone, Debug)]
pub struct BatchProbabilities<S: Scalar> {
    tensor: Tensor<S>,
}

impl<S: Scalar> BatchProbabilities<S> {
    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn values(&self) -> &[S] {
        self.tensor.values()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.tensor.shape()[0], self.tensor.shape()[1])
    }
}

/// How soft targets are produced from the affinity graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropagationMode {
    /// `t` explicit propagation steps.
    Iterative(usize),
    /// The fixed point `(1-omega) (I - omega S)^-1 A` via a linear solve.
    ClosedForm,
}

/// Propagated soft-target matrix `B`; detached by construction.
#[derive(Clone, Debug)]
pub struct SoftTargets<S: Scalar> {
    values: Vec<S>,
    n: usize,
    k: usize,
    pub omega: f64,
    pub mode: PropagationMode,
}

impl<S: Scalar> SoftTargets<S> {
    /// Wrap externally produced targets (tests, oracles). Rows must be
    /// nonnegative and sum to one.
    pub fn from_values(values: Vec<S>, n: usize, k: usize) -> Result<Self> {
        if values.len() != n * k {
            return Err(Error::Contract(format!(
                "{} values for {n}x{k} soft targets",
                values.len()
            )));
        }
        check_row_stochastic::<S>("soft targets", &values, k)?;
        Ok(SoftTargets {
            values,
            n,
            k,
            omega: 0.0,
            mode: PropagationMode::Iterative(1),
        })
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.k)
    }
}

/// Row-sum validation tolerance, scaled to the element type's precision.
fn row_sum_tol<S: Scalar>() -> f64 {
    let eps = S::epsilon().to_f64().unwrap_or(f64::EPSILON);
    (eps * 1e6).clamp(2e-10, 1e-4)
}

fn check_row_stochastic<S: Scalar>(what: &str, values: &[S], cols: usize) -> Result<()> {
    let tol = row_sum_tol::<S>();
    for (r, row) in values.chunks_exact(cols).enumerate() {
        let sum = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Contract(format!(
                "{what} row {r} sums to {sum}, expected 1 within {tol:e}"
            )));
        }
        if row.iter().any(|&v| v < S::zero()) {
            return Err(Error::Contract(format!("{what} row {r} has negative entries")));
        }
    }
    Ok(())
}

/// Mean over rows of `2 - 2 cos(a_i, b_i)`; value in [0, 4]. Differentiable
/// in both arguments unless detached upstream.
pub fn cosine_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape(
            "cosine_loss",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.shape()[0] as f64;
    let dot = a.l2_normalize()?.mul(&b.l2_normalize()?)?.sum()?;
    Tensor::scalar(scalar_from::<S>(2.0)).sub(&dot.mul_scalar(scalar_from::<S>(2.0 / n))?)
}

/// Pairwise cosine similarities of L2-normalized feature rows with the
/// diagonal forced to zero. Computed on detached features: the affinity
/// graph never carries gradients.
pub fn similarity_matrix<S: Scalar>(features: &Tensor<S>) -> Result<SimilarityMatrix<S>> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::shape("similarity_matrix", format!("{shape:?}")));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Contract(
            "similarity matrix needs at least 2 samples; no off-diagonal knowledge exists".into(),
        ));
    }
    let normalized = features.detach().l2_normalize()?;
    let gram = normalized.matmul(&normalized.transpose()?)?;
    let mut values = gram.values().to_vec();
    for i in 0..n {
        values[i * n + i] = S::zero();
    }
    Ok(SimilarityMatrix {
        values,
        n,
        normalized: false,
    })
}

/// Row softmax over the off-diagonal entries only (Eq. 4 shape): the diagonal
/// stays exactly zero and every row sums to one.
pub fn normalize_similarity<S: Scalar>(s: &SimilarityMatrix<S>) -> Result<SimilarityMatrix<S>> {
    if s.normalized {
        return Err(Error::Contract("similarity matrix already normalized".into()));
    }
    let n = s.n;
    let mut values = vec![S::zero(); n * n];
    for i in 0..n {
        let row = &s.values[i * n..(i + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for j in 0..n {
            if j != i {
                denom += (row[j] - max).exp();
            }
        }
        for j in 0..n {
            if j != i {
                values[i * n + j] = (row[j] - max).exp() / denom;
            }
        }
    }
    Ok(SimilarityMatrix {
        values,
        n,
        normalized: true,
    })
}

/// Temperature-scaled row softmax of the logits (Eq. 5 shape), max-subtracted
/// for stability. Stays in the gradient graph.
pub fn temperature_softmax<S: Scalar>(logits: &Tensor<S>, tau: f64) -> Result<BatchProbabilities<S>> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    if logits.shape().len() != 2 {
        return Err(Error::shape("temperature_softmax", format!("{:?}", logits.shape())));
    }
    let tensor = logits
        .mul_scalar(scalar_from::<S>(1.0 / tau))?
        .softmax_last_dim()?;
    Ok(BatchProbabilities { tensor })
}

fn propagation_inputs<S: Scalar>(
    s_hat: &SimilarityMatrix<S>,
    a: &BatchProbabilities<S>,
    omega: f64,
) -> Result<(usize, usize)> {
    if !s_hat.normalized {
        return Err(Error::Contract("propagation requires a normalized similarity matrix".into()));
    }
    if !(0.0..1.0).contains(&omega) {
        return Err(Error::Contract(format!("omega {omega} outside [0, 1)")));
    }
    let (n, k) = a.shape();
    if n != s_hat.n {
        return Err(Error::Contract(format!(
            "similarity matrix is {}x{} but probabilities have {n} rows",
            s_hat.n, s_hat.n
        )));
    }
    Ok((n, k))
}

/// Iterated propagation `B_t = omega * S_hat B_(t-1) + (1-omega) * A`
/// starting from `B_0 = A`. The result is detached.
pub fn propagate_iterative<S: Scalar>(
    s_hat: &SimilarityMatrix<S>,
    a: &BatchProbabilities<S>,
    omega: f64,
    steps: usize,
) -> Result<SoftTargets<S>> {
    let (n, k) = propagation_inputs(s_hat, a, omega)?;
    if steps == 0 {
        return Err(Error::Contract("propagation needs at least one step".into()));
    }
    let a_vals = a.values();
    let w = scalar_from::<S>(omega);
    let one_minus = scalar_from::<S>(1.0 - omega);
    let mut b = a_vals.to_vec();
    let mut scratch = vec![S::zero(); n * k];
    for _ in 0..steps {
        crate::tensor::ops_gemm_rm(n, n, k, &s_hat.values, &b, k as isize, 1, &mut scratch);
        for ((dst, &sa), &av) in b.iter_mut().zip(&scratch).zip(a_vals) {
            *dst = w * sa + one_minus * av;
        }
    }
    check_row_stochastic::<S>("soft targets", &b, k)?;
    Ok(SoftTargets {
        values: b,
        n,
        k,
        omega,
        mode: PropagationMode::Iterative(steps),
    })
}

/// Fixed point of the propagation recurrence: solves
/// `(I - omega S_hat) X = (1-omega) A` directly instead of forming the
/// inverse. The result is detached.
pub fn propagate_closed_form<S: Scalar>(
    s_hat: &SimilarityMatrix<S>,
    a: &BatchProbabilities<S>,
    omega: f64,
) -> Result<SoftTargets<S>> {
    let (n, k) = propagation_inputs(s_hat, a, omega)?;
    let w = scalar_from::<S>(omega);
    let one_minus = scalar_from::<S>(1.0 - omega);
    let mut system = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let id = if i == j { S::one() } else { S::zero() };
            system[i * n + j] = id - w * s_hat.values[i * n + j];
        }
    }
    let rhs: Vec<S> = a.values().iter().map(|&v| one_minus * v).collect();
    let values = solve_linear(n, k, system, rhs)?;
    check_row_stochastic::<S>("soft targets", &values, k)?;
    Ok(SoftTargets {
        values,
        n,
        k,
        omega,
        mode: PropagationMode::ClosedForm,
    })
}

/// LU factorization with partial pivoting; solves for `k` right-hand-side
/// columns at once. `a` is consumed as the factorization workspace.
fn solve_linear<S: Scalar>(n: usize, k: usize, mut a: Vec<S>, mut b: Vec<S>) -> Result<Vec<S>> {
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap();
        if pivot_abs < scalar_from::<S>(1e-10) {
            return Err(Error::numeric(format!(
                "linear solve: pivot {pivot_abs} at column {col} below tolerance"
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..k {
                b.swap(col * k + j, pivot_row * k + j);
            }
        }
        let pivot = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / pivot;
            if factor == S::zero() {
                continue;
            }
            a[r * n + col] = S::zero();
            for j in col + 1..n {
                let v = a[col * n + j];
                a[r * n + j] = a[r * n + j] - factor * v;
            }
            for j in 0..k {
                let v = b[col * k + j];
                b[r * k + j] = b[r * k + j] - factor * v;
            }
        }
    }
    // Back substitution.
    for col in (0..n).rev() {
        let pivot = a[col * n + col];
        for j in 0..k {
            let mut acc = b[col * k + j];
            for m in col + 1..n {
                acc = acc - a[col * n + m] * b[m * k + j];
            }
            b[col * k + j] = acc / pivot;
        }
    }
    Ok(b)
}

/// Mean over rows of `KL(B_i || A_i)` with the `0 ln 0 := 0` convention.
/// Differentiable with respect to `A`'s logits only; `B` is a constant.
pub fn kl_divergence<S: Scalar>(
    b: &SoftTargets<S>,
    a: &BatchProbabilities<S>,
) -> Result<Tensor<S>> {
    let (n, k) = a.shape();
    if (b.n, b.k) != (n, k) {
        return Err(Error::shape(
            "kl_divergence",
            format!("targets {}x{} vs probabilities {n}x{k}", b.n, b.k),
        ));
    }
    check_row_stochastic::<S>("kl targets", &b.values, k)?;
    check_row_stochastic::<S>("kl probabilities", a.values(), k)?;

    // Constant part: sum of B ln B.
    let mut b_entropy = S::zero();
    for &v in &b.values {
        if v > S::zero() {
            b_entropy += v * v.ln();
        }
    }
    let inv_n = scalar_from::<S>(1.0 / n as f64);
    let b_const = Tensor::new(b.values.clone(), &[n, k])?;
    let cross = a.tensor().log()?.mul(&b_const)?.sum()?;
    Tensor::scalar(b_entropy * inv_n).sub(&cross.mul_scalar(inv_n)?)
}

/// `L = L_CV + L_CM + lambda * tau^2 * L_SKD`. With `lambda == 0` the
/// distillation term is omitted entirely, reproducing the cross-only
/// objective without touching its graph.
pub fn total_loss<S: Scalar>(
    l_cv: &Tensor<S>,
    l_cm: &Tensor<S>,
    l_skd: &Tensor<S>,
    w: &LossWeights,
) -> Result<Tensor<S>> {
    w.validate()?;
    let base = l_cv.add(l_cm)?;
    let coeff = w.lambda * w.tau * w.tau;
    if coeff == 0.0 {
        return Ok(base);
    }
    base.add(&l_skd.mul_scalar(scalar_from::<S>(coeff))?)
}

/// Softmax cross-entropy against integer labels, the fine-tuning objective.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    let (n, k) = (shape[0], shape[1]);
    let mut onehot = vec![S::zero(); n * k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Contract(format!("label {label} out of range for {k} classes")));
        }
        onehot[i * k + label] = S::one();
    }
    let picked = logits
        .log_softmax_last_dim()?
        .mul(&Tensor::new(onehot, &[n, k])?)?
        .sum()?;
    picked.mul_scalar(scalar_from::<S>(-1.0 / n as f64))
}
