//! Training objectives with analytic gradients.
//!
//! * [`info_nce`]: cross-modal contrastive alignment; row `i` of the structured
//!   and note embeddings is the positive pair, every other in-batch note row is
//!   a negative.
//! * [`ckd_loss`]: contrastive knowledge distillation on scalar logits; the
//!   positive score is `−KL(p(tᵢ)‖p(sᵢ))/τ`, negatives are `−|sᵢ − sⱼ|/τ`.
//! * [`bce_loss`]: task supervision.
//! * [`combined_loss`]: the λ-weighted sum of the three.
//!
//! Every softmax-shaped denominator goes through [`logsumexp`]. Teacher logits
//! are constants: no gradient is ever propagated to them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::{axpy, dot, Matrix};
use crate::numerics::vector::{l2_norm, logsumexp, sigmoid, softmax, softplus, MIN_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub tau_contrastive: f64,
    pub tau_ckd: f64,
    pub lambda_ckd: f64,
    pub lambda_contrastive: f64,
    pub lambda_bce: f64,
    pub eps_clamp: f64,
    pub symmetric_infonce: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau_contrastive: 0.5,
            tau_ckd: 0.5,
            lambda_ckd: 1.0,
            lambda_contrastive: 1.0,
            lambda_bce: 1.0,
            eps_clamp: 1e-7,
            symmetric_infonce: false,
        }
    }
}

impl LossWeights {
    pub fn with_lambdas(self, ckd: f64, contrastive: f64, bce: f64) -> Self {
        Self {
            lambda_ckd: ckd,
            lambda_contrastive: contrastive,
            lambda_bce: bce,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_contrastive > 0.0) || !(self.tau_ckd > 0.0) {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        for (name, l) in [
            ("lambda_ckd", self.lambda_ckd),
            ("lambda_contrastive", self.lambda_contrastive),
            ("lambda_bce", self.lambda_bce),
        ] {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.eps_clamp > 0.0 && self.eps_clamp <= 0.01) {
            return Err(Error::Config("eps_clamp must lie in (0, 0.01]".into()));
        }
        if self.lambda_ckd == 0.0 && self.lambda_contrastive == 0.0 && self.lambda_bce == 0.0 {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }

    /// Whether any active term needs in-batch negatives.
    pub fn needs_pairs(&self) -> bool {
        self.lambda_ckd > 0.0 || self.lambda_contrastive > 0.0
    }
}

/// Paired structured/note embeddings for one batch.
///
/// Holds the raw (pre-normalization) rows and their unit-norm versions so that
/// [`info_nce`] can return gradients with respect to the raw encoder outputs.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    zx: Matrix,
    zy: Matrix,
    norms_x: Vec<f64>,
    norms_y: Vec<f64>,
}

impl ContrastiveBatch {
    /// Normalizes each row of `fx` and `gy`.
    pub fn from_embeddings(fx: &Matrix, gy: &Matrix) -> Result<Self> {
        if fx.shape() != gy.shape() {
            return Err(Error::invalid(format!(
                "structured embeddings {:?} and note embeddings {:?} differ in shape",
                fx.shape(),
                gy.shape()
            )));
        }
        let (zx, norms_x) = normalize_rows(fx)?;
        let (zy, norms_y) = normalize_rows(gy)?;
        Ok(Self {
            zx,
            zy,
            norms_x,
            norms_y,
        })
    }

    pub fn len(&self) -> usize {
        self.zx.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zx(&self) -> &Matrix {
        &self.zx
    }

    pub fn zy(&self) -> &Matrix {
        &self.zy
    }
}

fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = l2_norm(m.row(r));
        if !(n >= MIN_NORM) {
            return Err(Error::DegenerateVector {
                norm: n,
                threshold: MIN_NORM,
            });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Back-propagates dL/dz through `z = v/‖v‖`: `(dz − z⟨z, dz⟩)/‖v‖`.
fn normalization_backward(z: &Matrix, norms: &[f64], dz: &Matrix) -> Matrix {
    let mut out = dz.clone();
    for (r, &n) in norms.iter().enumerate() {
        let zr = z.row(r);
        let proj = dot(zr, dz.row(r));
        for (o, zv) in out.row_mut(r).iter_mut().zip(zr) {
            *o = (*o - zv * proj) / n;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Matrix,
    pub tau: f64,
}

/// `S[i][j] = exp(⟨zx_i, zy_j⟩ / τ)`.
pub fn similarity_matrix(zx: &Matrix, zy: &Matrix, tau: f64) -> Result<SimilarityMatrix> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let mut s = zx.matmul_transpose_b(zy)?;
    s.data_mut().iter_mut().for_each(|v| *v = (*v / tau).exp());
    Ok(SimilarityMatrix { s, tau })
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient with respect to the raw structured embeddings.
    pub d_x: Matrix,
    /// Gradient with respect to the raw note embeddings.
    pub d_y: Matrix,
}

/// InfoNCE over the batch; symmetric when `weights.symmetric_infonce`.
pub fn info_nce(batch: &ContrastiveBatch, weights: &LossWeights) -> Result<ContrastiveOutput> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let tau = weights.tau_contrastive;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let mut logits = batch.zx.matmul_transpose_b(&batch.zy)?;
    logits.scale(1.0 / tau);
    let inv_n = 1.0 / n as f64;

    // dL/dlogits accumulated per direction.
    let mut d_logits = Matrix::zeros(n, n);
    let mut loss = 0.0;
    let direction_weight = if weights.symmetric_infonce { 0.5 } else { 1.0 };

    for i in 0..n {
        let row = logits.row(i);
        loss += direction_weight * (logsumexp(row)? - row[i]);
        let p = softmax(row)?;
        let d_row = d_logits.row_mut(i);
        for (j, pj) in p.into_iter().enumerate() {
            d_row[j] += direction_weight * inv_n * (pj - if i == j { 1.0 } else { 0.0 });
        }
    }
    if weights.symmetric_infonce {
        let cols = logits.transpose();
        for j in 0..n {
            let col = cols.row(j);
            loss += direction_weight * (logsumexp(col)? - col[j]);
            let q = softmax(col)?;
            for (i, qi) in q.into_iter().enumerate() {
                let v = d_logits.get(i, j) + direction_weight * inv_n * (qi - if i == j { 1.0 } else { 0.0 });
                d_logits.set(i, j, v);
            }
        }
    }
    loss *= inv_n;

    d_logits.scale(1.0 / tau);
    let dzx = d_logits.matmul(&batch.zy)?;
    let dzy = d_logits.transpose_a_matmul(&batch.zx)?;
    Ok(ContrastiveOutput {
        loss,
        d_x: normalization_backward(&batch.zx, &batch.norms_x, &dzx),
        d_y: normalization_backward(&batch.zy, &batch.norms_y, &dzy),
    })
}

pub fn clamp_probability(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// `KL(Bernoulli(pt) ‖ Bernoulli(ps))` in nats, after clamping both to `[ε, 1−ε]`.
pub fn bernoulli_kl(pt: f64, ps: f64, eps: f64) -> f64 {
    let pt = clamp_probability(pt, eps);
    let ps = clamp_probability(ps, eps);
    let kl = pt * (pt / ps).ln() + (1.0 - pt) * ((1.0 - pt) / (1.0 - ps)).ln();
    kl.max(0.0)
}

/// ∂KL/∂ps at clamped arguments (zero where `ps` was clamped).
fn bernoulli_kl_dps(pt: f64, ps_raw: f64, eps: f64) -> f64 {
    if ps_raw < eps || ps_raw > 1.0 - eps {
        return 0.0;
    }
    let pt = clamp_probability(pt, eps);
    -pt / ps_raw + (1.0 - pt) / (1.0 - ps_raw)
}

/// Aligned teacher and student logits for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub teacher_logits: Vec<f64>,
    pub student_logits: Vec<f64>,
}

impl DistillBatch {
    pub fn new(teacher_logits: Vec<f64>, student_logits: Vec<f64>) -> Result<Self> {
        if teacher_logits.len() != student_logits.len() {
            return Err(Error::invalid(format!(
                "{} teacher logits vs {} student logits",
                teacher_logits.len(),
                student_logits.len()
            )));
        }
        if teacher_logits.iter().chain(&student_logits).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("distillation logits must be finite".into()));
        }
        Ok(Self {
            teacher_logits,
            student_logits,
        })
    }

    pub fn len(&self) -> usize {
        self.student_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.student_logits.is_empty()
    }

    pub fn teacher_probabilities(&self, eps: f64) -> Vec<f64> {
        probs(&self.teacher_logits, eps)
    }

    pub fn student_probabilities(&self, eps: f64) -> Vec<f64> {
        probs(&self.student_logits, eps)
    }
}

fn probs(logits: &[f64], eps: f64) -> Vec<f64> {
    logits
        .iter()
        .map(|&l| clamp_probability(sigmoid(l), eps))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutput {
    pub loss: f64,
    pub d_student_logits: Vec<f64>,
    /// Always zero: teacher logits are precomputed constants.
    pub d_teacher_logits: Vec<f64>,
}

/// Contrastive knowledge distillation on binary logits.
pub fn ckd_loss(batch: &DistillBatch, weights: &LossWeights) -> Result<DistillOutput> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let tau = weights.tau_ckd;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let eps = weights.eps_clamp;
    let s = &batch.student_logits;
    let pt = batch.teacher_probabilities(eps);
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let ps_raw = sigmoid(s[i]);
        let kl = bernoulli_kl(pt[i], ps_raw, eps);
        let positive = -kl / tau;
        scores.clear();
        scores.push(positive);
        scores.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| -(s[i] - s[j]).abs() / tau),
        );
        loss += logsumexp(&scores)? - positive;
        let w = softmax(&scores)?;

        // Positive term: ∂/∂positive = w₀ − 1, ∂positive/∂sᵢ = −(∂KL/∂ps · σ')/τ.
        let dkl_ds = bernoulli_kl_dps(pt[i], ps_raw, eps) * ps_raw * (1.0 - ps_raw);
        grad[i] += inv_n * (w[0] - 1.0) * (-dkl_ds / tau);

        // Negative terms: ∂/∂b_ij = w_j, b_ij = −|sᵢ − sⱼ|/τ.
        for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
            let sign = (s[i] - s[j]).signum() * f64::from(s[i] != s[j]);
            let g = inv_n * w[k + 1] * sign / tau;
            grad[i] -= g;
            grad[j] += g;
        }
    }
    Ok(DistillOutput {
        loss: loss * inv_n,
        d_student_logits: grad,
        d_teacher_logits: vec![0.0; n],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BceOutput {
    pub loss: f64,
    pub d_logits: Vec<f64>,
}

/// Mean binary cross-entropy from logits; labels must be 0 or 1.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> Result<BceOutput> {
    if logits.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("BCE over an empty batch"));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!("label {y} is not binary")));
    }
    let inv_n = 1.0 / logits.len() as f64;
    let loss = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| softplus(l) - y * l)
        .sum::<f64>()
        * inv_n;
    let d_logits = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| (sigmoid(l) - y) * inv_n)
        .collect();
    Ok(BceOutput { loss, d_logits })
}

/// Inputs for [`combined_loss`]. Only the fields needed by active terms are read.
#[derive(Debug, Clone, Copy)]
pub struct CombinedInputs<'a> {
    pub student_logits: &'a [f64],
    pub teacher_logits: Option<&'a [f64]>,
    pub labels: Option<&'a [f64]>,
    pub contrastive: Option<&'a ContrastiveBatch>,
}

/// Unweighted component values; `None` when the component was not evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub ckd: Option<f64>,
    pub contrastive: Option<f64>,
    pub bce: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CombinedOutput {
    pub loss: f64,
    pub components: LossComponents,
    pub d_student_logits: Vec<f64>,
    pub d_x: Option<Matrix>,
    pub d_y: Option<Matrix>,
}

/// `λ_CKD·L_CKD + λ_Contrastive·L_Contrastive + λ_BCE·L_BCE`; zero-weight terms are skipped.
pub fn combined_loss(inputs: CombinedInputs<'_>, weights: &LossWeights) -> Result<CombinedOutput> {
    let n = inputs.student_logits.len();
    let mut loss = 0.0;
    let mut components = LossComponents::default();
    let mut d_logits = vec![0.0; n];
    let (mut d_x, mut d_y) = (None, None);

    if weights.lambda_ckd > 0.0 {
        let teacher = inputs
            .teacher_logits
            .ok_or_else(|| Error::invalid("CKD term active but no teacher logits given"))?;
        let batch = DistillBatch::new(teacher.to_vec(), inputs.student_logits.to_vec())?;
        let out = ckd_loss(&batch, weights)?;
        loss += weights.lambda_ckd * out.loss;
        axpy(weights.lambda_ckd, &out.d_student_logits, &mut d_logits);
        components.ckd = Some(out.loss);
    }
    if weights.lambda_contrastive > 0.0 {
        let batch = inputs
            .contrastive
            .ok_or_else(|| Error::invalid("contrastive term active but no embeddings given"))?;
        let mut out = info_nce(batch, weights)?;
        loss += weights.lambda_contrastive * out.loss;
        out.d_x.scale(weights.lambda_contrastive);
        out.d_y.scale(weights.lambda_contrastive);
        components.contrastive = Some(out.loss);
        d_x = Some(out.d_x);
        d_y = Some(out.d_y);
    }
    if weights.lambda_bce > 0.0 {
        let labels = inputs
            .labels
            .ok_or_else(|| Error::invalid("BCE term active but no labels given"))?;
        let out = bce_loss(inputs.student_logits, labels)?;
        loss += weights.lambda_bce * out.loss;
        axpy(weights.lambda_bce, &out.d_logits, &mut d_logits);
        components.bce = Some(out.loss);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("combined loss is {loss}")));
    }
    Ok(CombinedOutput {
        loss,
        components,
        d_student_logits: d_logits,
        d_x,
        d_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::gradient_check;
    use crate::numerics::rng::SeededRng;
    use std::f64::consts::{E, LN_2};

    fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn one_directional() -> LossWeights {
        LossWeights::default()
    }

    #[test]
    fn similarity_examples() {
        let eye = Matrix::identity(2);
        let s = similarity_matrix(&eye, &eye, 1.0).unwrap().s;
        let expected = [E, 1.0, 1.0, E];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut rng = SeededRng::new(1);
        let zx = normalize_rows(&random_matrix(3, 4, &mut rng)).unwrap().0;
        let zy = normalize_rows(&random_matrix(3, 4, &mut rng)).unwrap().0;
        let washed = similarity_matrix(&zx, &zy, 1e6).unwrap().s;
        assert!(washed.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
        assert!(similarity_matrix(&zx, &zy, 0.0).is_err());

        let swapped = eye.select_rows(&[1, 0]);
        let st = similarity_matrix(&eye, &swapped, 1.0).unwrap().s;
        assert_eq!(st.data(), &[1.0, E, E, 1.0]);
    }

    #[test]
    fn similarity_entries_are_bounded() {
        let mut rng = SeededRng::new(2);
        let zx = normalize_rows(&random_matrix(5, 3, &mut rng)).unwrap().0;
        let zy = normalize_rows(&random_matrix(5, 3, &mut rng)).unwrap().0;
        let tau = 0.3;
        let s = similarity_matrix(&zx, &zy, tau).unwrap().s;
        assert!(s.data().iter().all(|&v| v > 0.0 && v <= (1.0 / tau).exp() + 1e-9));
    }

    #[test]
    fn info_nce_uniform_similarities_give_ln_n() {
        for n in [2, 8, 64] {
            let rows = vec![vec![0.6, 0.8, 0.0]; n];
            let m = Matrix::from_rows(&rows).unwrap();
            let batch = ContrastiveBatch::from_embeddings(&m, &m).unwrap();
            for symmetric in [false, true] {
                let w = LossWeights {
                    symmetric_infonce: symmetric,
                    ..Default::default()
                };
                let out = info_nce(&batch, &w).unwrap();
                assert!((out.loss - (n as f64).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn info_nce_orthonormal_pair() {
        let eye = Matrix::identity(2);
        let batch = ContrastiveBatch::from_embeddings(&eye, &eye).unwrap();
        let w = LossWeights {
            tau_contrastive: 1.0,
            ..Default::default()
        };
        let out = info_nce(&batch, &w).unwrap();
        assert!((out.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((out.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn info_nce_rejects_single_pair() {
        let m = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let batch = ContrastiveBatch::from_embeddings(&m, &m).unwrap();
        assert!(matches!(info_nce(&batch, &one_directional()), Err(Error::BatchTooSmall(1))));
    }

    fn info_nce_gradcheck(symmetric: bool, seed: u64) -> f64 {
        let mut rng = SeededRng::new(seed);
        let (n, d) = (8, 5);
        let fx = random_matrix(n, d, &mut rng);
        let gy = random_matrix(n, d, &mut rng);
        let w = LossWeights {
            symmetric_infonce: symmetric,
            tau_contrastive: 0.7,
            ..Default::default()
        };
        let mut params = fx.data().to_vec();
        params.extend_from_slice(gy.data());
        let loss = |flat: &[f64]| {
            let fx = Matrix::from_vec(n, d, flat[..n * d].to_vec()).unwrap();
            let gy = Matrix::from_vec(n, d, flat[n * d..].to_vec()).unwrap();
            let batch = ContrastiveBatch::from_embeddings(&fx, &gy).unwrap();
            let out = info_nce(&batch, &w).unwrap();
            let mut g = out.d_x.into_data();
            g.extend(out.d_y.into_data());
            (out.loss, g)
        };
        gradient_check(loss, &params, 1e-5, 100, &mut rng)
    }

    #[test]
    fn info_nce_gradients_match_finite_differences() {
        assert!(info_nce_gradcheck(false, 3) < 1e-5);
        assert!(info_nce_gradcheck(true, 4) < 1e-5);
    }

    #[test]
    fn bernoulli_kl_examples() {
        assert_eq!(bernoulli_kl(0.5, 0.5, 1e-7), 0.0);
        let direct = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((bernoulli_kl(0.9, 0.5, 1e-7) - direct).abs() < 1e-15);
        assert!((bernoulli_kl(0.9, 0.5, 1e-7) - 0.368064).abs() < 1e-6);
        let saturated = bernoulli_kl(1.0, 0.5, 1e-7);
        let expected = bernoulli_kl(1.0 - 1e-7, 0.5, 1e-7);
        assert!(saturated.is_finite());
        assert_eq!(saturated, expected);
    }

    #[test]
    fn bernoulli_kl_nonnegative_on_grid() {
        let eps = 1e-7;
        for i in 0..100 {
            for j in 0..100 {
                let p = (i as f64 + 0.5) / 100.0;
                let q = (j as f64 + 0.5) / 100.0;
                let kl = bernoulli_kl(p, q, eps);
                assert!(kl >= 0.0);
                if i == j {
                    assert_eq!(kl, 0.0);
                } else {
                    assert!(kl > 0.0, "KL({p}, {q}) = {kl}");
                }
            }
        }
    }

    #[test]
    fn ckd_degenerate_batch_gives_ln_n() {
        for n in [2, 5] {
            let batch = DistillBatch::new(vec![0.3; n], vec![0.3; n]).unwrap();
            let out = ckd_loss(&batch, &LossWeights::default()).unwrap();
            assert!((out.loss - (n as f64).ln()).abs() < 1e-12);
        }
        let batch = DistillBatch::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!((ckd_loss(&batch, &LossWeights::default()).unwrap().loss - LN_2).abs() < 1e-12);
    }

    #[test]
    fn ckd_two_point_closed_form() {
        let batch = DistillBatch::new(vec![0.0, 2.0], vec![0.0, 2.0]).unwrap();
        let w = LossWeights {
            tau_ckd: 1.0,
            ..Default::default()
        };
        let out = ckd_loss(&batch, &w).unwrap();
        assert!((out.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((out.loss - 0.126928).abs() < 1e-6);
        assert!(out.d_teacher_logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ckd_rejects_single_record() {
        let batch = DistillBatch::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            ckd_loss(&batch, &LossWeights::default()),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn ckd_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let teacher: Vec<f64> = (0..8).map(|_| 3.0 * rng.normal()).collect();
        let student: Vec<f64> = (0..8).map(|_| 2.0 * rng.normal()).collect();
        let w = LossWeights::default();
        let loss = |s: &[f64]| {
            let out = ckd_loss(&DistillBatch::new(teacher.clone(), s.to_vec()).unwrap(), &w).unwrap();
            (out.loss, out.d_student_logits)
        };
        assert!(gradient_check(loss, &student, 1e-5, 8, &mut rng) < 1e-5);
    }

    #[test]
    fn ckd_kl_term_is_stationary_when_student_matches_teacher() {
        // With one record the negatives vanish, isolating the KL term; evaluate
        // the gradient by hand instead of via the N ≥ 2 API.
        let eps = 1e-7;
        for t in [-3.0, 0.0, 1.5] {
            let p = sigmoid(t);
            assert_eq!(bernoulli_kl_dps(p, p, eps) * p * (1.0 - p), 0.0);
        }
    }

    #[test]
    fn bce_examples() {
        let out = bce_loss(&[0.0], &[1.0]).unwrap();
        assert!((out.loss - LN_2).abs() < 1e-15);
        let out = bce_loss(&[20.0], &[1.0]).unwrap();
        assert!((out.loss - 2.061e-9).abs() < 1e-12);
        let out = bce_loss(&[1.0, -1.0], &[1.0, 0.0]).unwrap();
        let expected = 0.5 * (softplus(-1.0) + softplus(-1.0));
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 0.313262).abs() < 1e-6);
        assert!(bce_loss(&[0.0, 1.0], &[1.0]).is_err());
        assert!(bce_loss(&[0.0], &[2.0]).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(6);
        let logits: Vec<f64> = (0..10).map(|_| 3.0 * rng.normal()).collect();
        let labels: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let loss = |l: &[f64]| {
            let out = bce_loss(l, &labels).unwrap();
            (out.loss, out.d_logits)
        };
        assert!(gradient_check(loss, &logits, 1e-5, 10, &mut rng) < 1e-5);
    }

    struct Fixture {
        student: Vec<f64>,
        teacher: Vec<f64>,
        labels: Vec<f64>,
        batch: ContrastiveBatch,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = SeededRng::new(seed);
        let n = 6;
        Fixture {
            student: (0..n).map(|_| rng.normal()).collect(),
            teacher: (0..n).map(|_| 2.0 * rng.normal()).collect(),
            labels: (0..n).map(|i| (i % 2) as f64).collect(),
            batch: ContrastiveBatch::from_embeddings(
                &random_matrix(n, 4, &mut rng),
                &random_matrix(n, 4, &mut rng),
            )
            .unwrap(),
        }
    }

    fn inputs(f: &Fixture) -> CombinedInputs<'_> {
        CombinedInputs {
            student_logits: &f.student,
            teacher_logits: Some(&f.teacher),
            labels: Some(&f.labels),
            contrastive: Some(&f.batch),
        }
    }

    #[test]
    fn combined_selects_and_adds_components() {
        let f = fixture(7);
        let base = LossWeights::default();

        let ckd_only = combined_loss(inputs(&f), &base.with_lambdas(1.0, 0.0, 0.0)).unwrap();
        let ckd = ckd_loss(&DistillBatch::new(f.teacher.clone(), f.student.clone()).unwrap(), &base).unwrap();
        assert_eq!(ckd_only.loss, ckd.loss);
        assert_eq!(ckd_only.d_student_logits, ckd.d_student_logits);
        assert!(ckd_only.d_x.is_none());

        let con_bce = combined_loss(inputs(&f), &base.with_lambdas(0.0, 1.0, 1.0)).unwrap();
        let con = info_nce(&f.batch, &base).unwrap();
        let bce = bce_loss(&f.student, &f.labels).unwrap();
        assert!((con_bce.loss - (con.loss + bce.loss)).abs() < 1e-12);
        assert_eq!(con_bce.components.ckd, None);

        let mixed = combined_loss(inputs(&f), &base.with_lambdas(0.5, 0.5, 1.0)).unwrap();
        let expected = 0.5 * ckd.loss + 0.5 * con.loss + bce.loss;
        assert!((mixed.loss - expected).abs() < 1e-12);
        for i in 0..f.student.len() {
            let g = 0.5 * ckd.d_student_logits[i] + bce.d_logits[i];
            assert!((mixed.d_student_logits[i] - g).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_is_linear_in_lambda() {
        let f = fixture(8);
        let base = LossWeights::default();
        let a = combined_loss(inputs(&f), &base.with_lambdas(1.0, 0.0, 0.0)).unwrap();
        let b = combined_loss(inputs(&f), &base.with_lambdas(2.0, 0.0, 0.0)).unwrap();
        assert!((b.loss - 2.0 * a.loss).abs() < 1e-12);
        for (x, y) in a.d_student_logits.iter().zip(&b.d_student_logits) {
            assert!((y - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_requires_inputs_for_active_terms() {
        let f = fixture(9);
        let no_teacher = CombinedInputs {
            teacher_logits: None,
            ..inputs(&f)
        };
        assert!(combined_loss(no_teacher, &LossWeights::default()).is_err());
        let zero_ckd = LossWeights::default().with_lambdas(0.0, 1.0, 1.0);
        assert!(combined_loss(no_teacher, &zero_ckd).is_ok());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights::default().with_lambdas(0.0, 0.0, 0.0).validate().is_err());
        let bad_tau = LossWeights {
            tau_ckd: 0.0,
            ..Default::default()
        };
        assert!(bad_tau.validate().is_err());
        let bad_eps = LossWeights {
            eps_clamp: 0.5,
            ..Default::default()
        };
        assert!(bad_eps.validate().is_err());
    }
}
