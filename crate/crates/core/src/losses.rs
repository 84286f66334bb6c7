//! Contrastive objectives over a pair of view embeddings.
//!
//! Batch-direction losses treat each row of `za`/`zb` as a query/key vector;
//! dimension-direction losses (DimCL, AbsCL) treat each column as one. Both
//! share the same negative-set convention: for query `i` the negatives are
//! every other query and every other key, `2M − 2` vectors in total, listed
//! as `[q_j for j ≠ i] ++ [k_j for j ≠ i]`.

use crate::error::{Error, Result};
use crate::numcore::{log_sum_exp, Axis, Graph, Matrix, NodeId, NORM_EPS};

/// Two views' representations, `N × D` each.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    za: Matrix,
    zb: Matrix,
}

impl EmbeddingPair {
    pub fn new(za: Matrix, zb: Matrix) -> Result<Self> {
        if za.shape() != zb.shape() {
            return Err(Error::ShapeMismatch { op: "embedding pair", left: za.shape(), right: zb.shape() });
        }
        if za.rows() < 2 {
            return Err(Error::NeedsNegative(za.rows()));
        }
        if za.cols() < 2 {
            return Err(Error::NeedsNegativeColumn(za.cols()));
        }
        Ok(Self { za, zb })
    }

    /// Query / online view.
    pub fn za(&self) -> &Matrix {
        &self.za
    }

    /// Key / target view.
    pub fn zb(&self) -> &Matrix {
        &self.zb
    }

    pub fn batch_size(&self) -> usize {
        self.za.rows()
    }

    pub fn dim(&self) -> usize {
        self.za.cols()
    }

    pub fn transposed(&self) -> Result<Self> {
        Self::new(self.za.transpose(), self.zb.transpose())
    }

    pub fn swapped(&self) -> Self {
        Self { za: self.zb.clone(), zb: self.za.clone() }
    }
}

/// Loss value plus per-query diagnostics.
///
/// `alpha_pos[i]` is the softmax weight of the positive key of query `i`,
/// `alpha_neg[i][j]` the weight of its `j`-th negative; the two sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub per_query_pos_sim: Vec<f64>,
    pub alpha_pos: Vec<f64>,
    pub alpha_neg: Vec<Vec<f64>>,
    /// Raw similarities of each query to its negatives, aligned with `alpha_neg`.
    pub neg_sim: Vec<Vec<f64>>,
}

/// Balance weight between the regularizer and the base loss, plus the
/// regularizer's temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossMixConfig {
    lambda: f64,
    tau: f64,
}

impl Default for LossMixConfig {
    fn default() -> Self {
        Self { lambda: 0.1, tau: 0.1 }
    }
}

impl LossMixConfig {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::LambdaOutOfRange(lambda));
        }
        check_tau(tau)?;
        Ok(Self { lambda, tau })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// How negative logits are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeLogit {
    /// `g·h⁻ / τ` (DimCL).
    #[default]
    Dot,
    /// `|g·h⁻| / τ` (AbsCL).
    AbsDot,
}

/// Options of the dimension-direction loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionalConfig {
    pub tau: f64,
    pub negatives: NegativeLogit,
    /// Subtract each column's batch mean before normalizing.
    pub center: bool,
}

impl Default for DimensionalConfig {
    fn default() -> Self {
        Self { tau: 0.1, negatives: NegativeLogit::Dot, center: false }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::NonpositiveTemperature(tau));
    }
    Ok(())
}

fn check_index(i: usize, len: usize) -> Result<()> {
    if i >= len {
        return Err(Error::IndexOutOfRange { index: i, len });
    }
    Ok(())
}

/// Indices into the stacked `[queries; keys]` list that form query `i`'s negatives.
fn negative_indices(i: usize, m: usize) -> impl Iterator<Item = usize> {
    (0..m).filter(move |&j| j != i).chain((0..m).filter(move |&j| j != i).map(move |j| m + j))
}

/// InfoNCE over unit-norm row vectors. `q` and `k` are `M × L`.
fn infonce_rows(q: &Matrix, k: &Matrix, tau: f64, negatives: NegativeLogit) -> Result<LossReport> {
    let m = q.rows();
    let s_qq = q.matmul_t(q)?;
    let s_qk = q.matmul_t(k)?;
    let sim = |i: usize, idx: usize| if idx < m { s_qq.get(i, idx) } else { s_qk.get(i, idx - m) };

    let mut report = LossReport {
        value: 0.0,
        per_query_pos_sim: Vec::with_capacity(m),
        alpha_pos: Vec::with_capacity(m),
        alpha_neg: Vec::with_capacity(m),
        neg_sim: Vec::with_capacity(m),
    };
    let mut logits = Vec::with_capacity(2 * m - 1);
    let mut total = 0.0;
    for i in 0..m {
        let pos = s_qk.get(i, i);
        let negs: Vec<f64> = negative_indices(i, m).map(|idx| sim(i, idx)).collect();
        logits.clear();
        logits.push(pos / tau);
        logits.extend(negs.iter().map(|&s| match negatives {
            NegativeLogit::Dot => s / tau,
            NegativeLogit::AbsDot => s.abs() / tau,
        }));
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];
        report.per_query_pos_sim.push(pos);
        report.alpha_pos.push((logits[0] - lse).exp());
        report.alpha_neg.push(logits[1..].iter().map(|l| (l - lse).exp()).collect());
        report.neg_sim.push(negs);
    }
    report.value = total / m as f64;
    Ok(report)
}

/// Simple (linear) contrastive loss over rows: attraction to the positive
/// key minus the mean similarity to the `2N − 2` negatives.
pub fn simple_cl_loss(pair: &EmbeddingPair) -> Result<LossReport> {
    let n = pair.batch_size();
    if n < 2 {
        return Err(Error::NeedsNegative(n));
    }
    let q = pair.za.l2_normalize(Axis::Rows, NORM_EPS)?;
    let k = pair.zb.l2_normalize(Axis::Rows, NORM_EPS)?;
    let s_qq = q.matmul_t(&q)?;
    let s_qk = q.matmul_t(&k)?;
    let weight = 1.0 / (2 * n - 2) as f64;
    let mut report = LossReport {
        value: 0.0,
        per_query_pos_sim: Vec::with_capacity(n),
        alpha_pos: Vec::with_capacity(n),
        alpha_neg: Vec::with_capacity(n),
        neg_sim: Vec::with_capacity(n),
    };
    let mut total = 0.0;
    for i in 0..n {
        let pos = s_qk.get(i, i);
        let negs: Vec<f64> =
            negative_indices(i, n).map(|idx| if idx < n { s_qq.get(i, idx) } else { s_qk.get(i, idx - n) }).collect();
        total += -pos + weight * negs.iter().sum::<f64>();
        report.per_query_pos_sim.push(pos);
        // gradient weights in the form −(1 − α')k⁺ + Σ α_j k_j⁻: uniform over
        // negatives, no saturation on the positive
        report.alpha_pos.push(0.0);
        report.alpha_neg.push(vec![weight; 2 * n - 2]);
        report.neg_sim.push(negs);
    }
    report.value = total / n as f64;
    Ok(report)
}

/// Gradient of the simple loss of query `i` with respect to the normalized
/// query, keys held fixed: `−k_i⁺ + mean(k⁻)`. Returned as `1 × D`.
pub fn simple_cl_grad(pair: &EmbeddingPair, i: usize) -> Result<Matrix> {
    let n = pair.batch_size();
    check_index(i, n)?;
    if n < 2 {
        return Err(Error::NeedsNegative(n));
    }
    let q = pair.za.l2_normalize(Axis::Rows, NORM_EPS)?;
    let k = pair.zb.l2_normalize(Axis::Rows, NORM_EPS)?;
    let weight = 1.0 / (2 * n - 2) as f64;
    let mut grad = Matrix::zeros(1, pair.dim());
    for idx in negative_indices(i, n) {
        let v = if idx < n { q.row(idx) } else { k.row(idx - n) };
        grad.row_mut(0).iter_mut().zip(v).for_each(|(g, x)| *g += weight * x);
    }
    grad.row_mut(0).iter_mut().zip(k.row(i)).for_each(|(g, x)| *g -= x);
    Ok(grad)
}

/// Batch-direction InfoNCE over row vectors.
pub fn batch_infonce(pair: &EmbeddingPair, tau: f64) -> Result<LossReport> {
    check_tau(tau)?;
    let q = pair.za.l2_normalize(Axis::Rows, NORM_EPS)?;
    let k = pair.zb.l2_normalize(Axis::Rows, NORM_EPS)?;
    infonce_rows(&q, &k, tau, NegativeLogit::Dot)
}

/// Normalized column vectors of both views, stored as rows (`D × N`).
fn column_queries(pair: &EmbeddingPair, center: bool) -> Result<(Matrix, Matrix)> {
    let prep = |m: &Matrix| -> Result<Matrix> {
        let t = if center { center_columns(m) } else { m.clone() }.transpose();
        t.l2_normalize(Axis::Rows, NORM_EPS)
    };
    Ok((prep(&pair.za)?, prep(&pair.zb)?))
}

fn center_columns(m: &Matrix) -> Matrix {
    let means: Vec<f64> = (0..m.cols()).map(|c| m.col(c).iter().sum::<f64>() / m.rows() as f64).collect();
    Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) - means[c])
}

/// Dimension-direction contrastive loss with explicit options.
pub fn dimensional_loss(pair: &EmbeddingPair, cfg: &DimensionalConfig) -> Result<LossReport> {
    check_tau(cfg.tau)?;
    if pair.dim() < 2 {
        return Err(Error::NeedsNegativeColumn(pair.dim()));
    }
    let (g, h) = column_queries(pair, cfg.center)?;
    infonce_rows(&g, &h, cfg.tau, cfg.negatives)
}

/// DimCL: InfoNCE whose queries and keys are the batch-normalized columns.
pub fn dimcl_loss(pair: &EmbeddingPair, tau: f64) -> Result<LossReport> {
    dimensional_loss(pair, &DimensionalConfig { tau, negatives: NegativeLogit::Dot, center: false })
}

/// AbsCL: DimCL with absolute-valued negative logits.
pub fn abscl_loss(pair: &EmbeddingPair, tau: f64) -> Result<LossReport> {
    dimensional_loss(pair, &DimensionalConfig { tau, negatives: NegativeLogit::AbsDot, center: false })
}

/// Gradient of the DimCL term of column `i` with respect to the normalized
/// query column `g_i`, keys held fixed:
/// `−(1/τ)(1 − α'_i) h_i⁺ + (1/τ) Σ_j α_j h_j⁻`. Returned as `N × 1`.
pub fn dimcl_grad(pair: &EmbeddingPair, tau: f64, i: usize) -> Result<Matrix> {
    check_tau(tau)?;
    let d = pair.dim();
    check_index(i, d)?;
    let (g, h) = column_queries(pair, false)?;
    let report = infonce_rows(&g, &h, tau, NegativeLogit::Dot)?;
    let n = pair.batch_size();
    let mut grad = Matrix::zeros(n, 1);
    let pos_weight = -(1.0 - report.alpha_pos[i]) / tau;
    for (r, x) in h.row(i).iter().enumerate() {
        grad.data_mut()[r] += pos_weight * x;
    }
    for (alpha, idx) in report.alpha_neg[i].iter().zip(negative_indices(i, d)) {
        let v = if idx < d { g.row(idx) } else { h.row(idx - d) };
        for (r, x) in v.iter().enumerate() {
            grad.data_mut()[r] += alpha / tau * x;
        }
    }
    Ok(grad)
}

/// `λ·dim + (1 − λ)·base`.
pub fn combined_loss(base: f64, dim: f64, mix: &LossMixConfig) -> Result<f64> {
    let lambda = mix.lambda;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    Ok(lambda * dim + (1.0 - lambda) * base)
}

/// The same objectives recorded on a [`Graph`] so gradients reach encoders.
pub mod graph {
    use super::*;

    /// InfoNCE over unit-norm rows of `q` and `k` (both `M × L` nodes).
    pub fn infonce_rows(g: &mut Graph, q: NodeId, k: NodeId, tau: f64, negatives: NegativeLogit) -> Result<NodeId> {
        check_tau(tau)?;
        let m = g.value(q).rows();
        if m < 2 {
            return Err(Error::NeedsNegative(m));
        }
        let s_qq = g.matmul_t(q, q)?;
        let s_qk = g.matmul_t(q, k)?;
        let qk = g.mul(q, k)?;
        let pos = g.row_sum(qk);
        let mut negs = g.concat_cols(s_qq, s_qk)?;
        if negatives == NegativeLogit::AbsDot {
            negs = g.abs(negs);
        }
        let all = g.concat_cols(pos, negs)?;
        let logits = g.scale(all, 1.0 / tau);
        let width = 2 * m + 1;
        let mut mask = vec![true; m * width];
        for i in 0..m {
            mask[i * width + 1 + i] = false;
            mask[i * width + 1 + m + i] = false;
        }
        let lse = g.row_log_sum_exp(logits, Some(mask))?;
        let pos_logit = g.scale(pos, 1.0 / tau);
        let per_query = g.sub(lse, pos_logit)?;
        Ok(g.mean(per_query))
    }

    /// Batch InfoNCE on `N × D` embedding nodes.
    pub fn batch_infonce(g: &mut Graph, za: NodeId, zb: NodeId, tau: f64) -> Result<NodeId> {
        let q = g.l2_normalize(za, Axis::Rows, NORM_EPS)?;
        let k = g.l2_normalize(zb, Axis::Rows, NORM_EPS)?;
        infonce_rows(g, q, k, tau, NegativeLogit::Dot)
    }

    fn prepare_columns(g: &mut Graph, z: NodeId, center: bool) -> Result<NodeId> {
        let mut z = z;
        if center {
            let n = g.value(z).rows();
            let centering = g.constant(Matrix::from_fn(n, n, |r, c| {
                (if r == c { 1.0 } else { 0.0 }) - 1.0 / n as f64
            }));
            z = g.matmul(centering, z)?;
        }
        let t = g.transpose(z);
        g.l2_normalize(t, Axis::Rows, NORM_EPS)
    }

    /// Dimension-direction loss on `N × D` embedding nodes.
    pub fn dimensional_loss(g: &mut Graph, za: NodeId, zb: NodeId, cfg: &DimensionalConfig) -> Result<NodeId> {
        let d = g.value(za).cols();
        if d < 2 {
            return Err(Error::NeedsNegativeColumn(d));
        }
        let q = prepare_columns(g, za, cfg.center)?;
        let k = prepare_columns(g, zb, cfg.center)?;
        infonce_rows(g, q, k, cfg.tau, cfg.negatives)
    }

    pub fn dimcl_loss(g: &mut Graph, za: NodeId, zb: NodeId, tau: f64) -> Result<NodeId> {
        dimensional_loss(g, za, zb, &DimensionalConfig { tau, ..Default::default() })
    }

    /// `λ·dim + (1 − λ)·base` as a node. The endpoints return one of the
    /// inputs unchanged so λ ∈ {0, 1} reproduces the single-term objective.
    pub fn combined(g: &mut Graph, base: NodeId, dim: NodeId, mix: &LossMixConfig) -> Result<NodeId> {
        if mix.lambda == 0.0 {
            return Ok(base);
        }
        if mix.lambda == 1.0 {
            return Ok(dim);
        }
        let a = g.scale(dim, mix.lambda);
        let b = g.scale(base, 1.0 - mix.lambda);
        g.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn pair_from(za: &[&[f64]], zb: &[&[f64]]) -> EmbeddingPair {
        EmbeddingPair::new(Matrix::from_rows(za).unwrap(), Matrix::from_rows(zb).unwrap()).unwrap()
    }

    fn random_pair(rng: &mut Rng, n: usize, d: usize) -> EmbeddingPair {
        let za = Matrix::from_fn(n, d, |_, _| rng.normal());
        let zb = Matrix::from_fn(n, d, |_, _| rng.normal());
        EmbeddingPair::new(za, zb).unwrap()
    }

    fn orthonormal_columns() -> EmbeddingPair {
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
        EmbeddingPair::new(z.clone(), z).unwrap()
    }

    #[test]
    fn pair_validation() {
        assert!(matches!(
            EmbeddingPair::new(Matrix::zeros(1, 3), Matrix::zeros(1, 3)),
            Err(Error::NeedsNegative(1))
        ));
        assert!(matches!(
            EmbeddingPair::new(Matrix::zeros(3, 1), Matrix::zeros(3, 1)),
            Err(Error::NeedsNegativeColumn(1))
        ));
        assert!(EmbeddingPair::new(Matrix::zeros(3, 2), Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn simple_cl_orthogonal_positives() {
        let p = pair_from(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(simple_cl_loss(&p).unwrap().value, -1.0);
    }

    #[test]
    fn simple_cl_collapsed_rows_is_zero() {
        let r: &[f64] = &[0.6, 0.8];
        let p = pair_from(&[r, r, r], &[r, r, r]);
        assert_eq!(simple_cl_loss(&p).unwrap().value, 0.0);
    }

    #[test]
    fn simple_cl_grad_hand_value() {
        let p = pair_from(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let g = simple_cl_grad(&p, 0).unwrap();
        assert_eq!(g.row(0), &[-1.0, 1.0]);
        assert!(matches!(simple_cl_grad(&p, 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn simple_cl_grad_vanishes_when_all_keys_equal() {
        let r: &[f64] = &[0.0, 1.0, 0.0];
        let p = pair_from(&[r, r, r], &[r, r, r]);
        let g = simple_cl_grad(&p, 1).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn batch_infonce_hand_values() {
        let p = pair_from(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = batch_infonce(&p, 1.0).unwrap().value;
        assert!((v - (1.0 + 2.0 * (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 0.5514).abs() < 1e-4);
        let v = batch_infonce(&p, 0.1).unwrap().value;
        assert!((v - (1.0 + 2.0 * (-10f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 9.08e-5).abs() < 1e-7);
        assert!(matches!(batch_infonce(&p, 0.0), Err(Error::NonpositiveTemperature(_))));
    }

    #[test]
    fn dimcl_hand_values() {
        let p = orthonormal_columns();
        let v = dimcl_loss(&p, 1.0).unwrap().value;
        assert!((v - (1.0 + 2.0 * (-1f64).exp()).ln()).abs() < 1e-15);
        let v = dimcl_loss(&p, 0.1).unwrap().value;
        assert!((v - 9.08e-5).abs() < 1e-7);
        assert!(dimcl_loss(&p, -0.5).is_err());
    }

    #[test]
    fn abscl_equals_dimcl_when_negatives_orthogonal() {
        let p = orthonormal_columns();
        assert_eq!(abscl_loss(&p, 0.1).unwrap(), dimcl_loss(&p, 0.1).unwrap());
    }

    #[test]
    fn abscl_dominates_with_negative_similarities() {
        let za = Matrix::from_rows(&[[1.0, -1.0], [1.0, -0.5], [0.5, -1.0]]).unwrap();
        let zb = Matrix::from_rows(&[[1.0, -1.0], [0.8, -0.4], [0.5, -0.9]]).unwrap();
        let p = EmbeddingPair::new(za, zb).unwrap();
        let d = dimcl_loss(&p, 0.1).unwrap();
        assert!(d.neg_sim.iter().flatten().any(|&s| s < 0.0));
        assert!(abscl_loss(&p, 0.1).unwrap().value >= d.value);
    }

    #[test]
    fn transpose_duality_is_exact() {
        let mut rng = Rng::new(9);
        let p = random_pair(&mut rng, 8, 6);
        let a = dimcl_loss(&p, 0.1).unwrap().value;
        let b = batch_infonce(&p.transposed().unwrap(), 0.1).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn dimcl_grad_small_when_aligned() {
        let p = orthonormal_columns();
        let g = dimcl_grad(&p, 0.1, 0).unwrap();
        assert!(g.frobenius_norm() < 2e-3);
        let r = dimcl_loss(&p, 0.1).unwrap();
        assert!((r.alpha_pos[0] + r.alpha_neg[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(dimcl_grad(&p, 0.1, 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn combined_loss_endpoints() {
        let mix = |l| LossMixConfig::new(l, 0.1).unwrap();
        assert_eq!(combined_loss(2.0, 4.0, &mix(0.0)).unwrap(), 2.0);
        assert_eq!(combined_loss(2.0, 4.0, &mix(1.0)).unwrap(), 4.0);
        assert!((combined_loss(2.0, 4.0, &LossMixConfig::default()).unwrap() - 2.2).abs() < 1e-15);
        assert!(matches!(LossMixConfig::new(1.5, 0.1), Err(Error::LambdaOutOfRange(_))));
        assert!(LossMixConfig::new(-0.1, 0.1).is_err());
        assert!(LossMixConfig::new(0.5, 0.0).is_err());
    }

    #[test]
    fn graph_losses_match_direct_values() {
        let mut rng = Rng::new(31);
        let p = random_pair(&mut rng, 7, 5);
        for (center, negatives) in [(false, NegativeLogit::Dot), (true, NegativeLogit::Dot), (false, NegativeLogit::AbsDot)] {
            let cfg = DimensionalConfig { tau: 0.2, negatives, center };
            let mut g = Graph::new();
            let a = g.param(p.za().clone());
            let b = g.param(p.zb().clone());
            let out = graph::dimensional_loss(&mut g, a, b, &cfg).unwrap();
            let direct = dimensional_loss(&p, &cfg).unwrap().value;
            assert!((g.scalar(out) - direct).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let a = g.param(p.za().clone());
        let b = g.param(p.zb().clone());
        let out = graph::batch_infonce(&mut g, a, b, 0.5).unwrap();
        assert!((g.scalar(out) - batch_infonce(&p, 0.5).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn upper_bound_for_normalized_inputs() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let p = random_pair(&mut rng, 5, 4);
            for tau in [1.0, 0.1] {
                let v = dimcl_loss(&p, tau).unwrap().value;
                assert!(v.is_finite());
                assert!(v <= (2.0 * 4.0 - 1.0f64).ln() + 2.0 / tau);
            }
        }
    }
}
