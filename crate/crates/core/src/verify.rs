//! Self-checks against independent reference implementations.
//!
//! [`reference`] recomputes every loss and the diversity metric with plain
//! nested loops and naive exponentials, with no shared helpers. The check
//! functions compare the library against those references, against
//! central finite differences, and against the documented properties of
//! the softmax weights.

use crate::error::Result;
use crate::losses::{self, EmbeddingPair};
use crate::metrics::feature_diversity;
use crate::numcore::{Graph, Matrix, Rng};

/// Straightforward loop implementations used as test oracles.
pub mod reference {
    use crate::numcore::Matrix;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    }

    pub fn unit_rows(m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.rows()).map(|r| unit(m.row(r).to_vec())).collect()
    }

    pub fn unit_cols(m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.cols()).map(|c| unit(m.col(c))).collect()
    }

    /// `−log e^{q_i·k_i/τ} / (e^{q_i·k_i/τ} + Σ_{j≠i} e^{s(q_i,q_j)/τ} + e^{s(q_i,k_j)/τ})`
    /// of query `i`, where `s` is the dot product or its absolute value.
    pub fn query_term(q: &[Vec<f64>], k: &[Vec<f64>], i: usize, query: &[f64], tau: f64, abs: bool) -> f64 {
        let s = |a: &[f64], b: &[f64]| if abs { dot(a, b).abs() } else { dot(a, b) };
        let pos = (dot(query, &k[i]) / tau).exp();
        let mut den = pos;
        for j in 0..q.len() {
            if j != i {
                den += (s(query, &q[j]) / tau).exp();
                den += (s(query, &k[j]) / tau).exp();
            }
        }
        -(pos / den).ln()
    }

    pub fn infonce(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64, abs: bool) -> f64 {
        let mut total = 0.0;
        for i in 0..q.len() {
            total += query_term(q, k, i, &q[i], tau, abs);
        }
        total / q.len() as f64
    }

    pub fn batch_infonce(za: &Matrix, zb: &Matrix, tau: f64) -> f64 {
        infonce(&unit_rows(za), &unit_rows(zb), tau, false)
    }

    pub fn dimcl(za: &Matrix, zb: &Matrix, tau: f64) -> f64 {
        infonce(&unit_cols(za), &unit_cols(zb), tau, false)
    }

    pub fn abscl(za: &Matrix, zb: &Matrix, tau: f64) -> f64 {
        infonce(&unit_cols(za), &unit_cols(zb), tau, true)
    }

    /// Per-query term of the simple loss: `−q·k_i + mean_{negatives} q·v`.
    pub fn simple_term(q: &[Vec<f64>], k: &[Vec<f64>], i: usize, query: &[f64]) -> f64 {
        let n = q.len();
        let mut neg = 0.0;
        for j in 0..n {
            if j != i {
                neg += dot(query, &q[j]) + dot(query, &k[j]);
            }
        }
        -dot(query, &k[i]) + neg / (2 * n - 2) as f64
    }

    pub fn simple_cl(za: &Matrix, zb: &Matrix) -> f64 {
        let (q, k) = (unit_rows(za), unit_rows(zb));
        let mut total = 0.0;
        for i in 0..q.len() {
            total += simple_term(&q, &k, i, &q[i]);
        }
        total / q.len() as f64
    }

    pub fn feature_diversity(za: &Matrix, zb: &Matrix) -> f64 {
        let d = za.cols();
        let mut total = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let (a, b) = (za.col(i), zb.col(j));
                    total += (dot(&a, &b) / (dot(&a, &a).sqrt() * dot(&b, &b).sqrt())).abs();
                }
            }
        }
        1.0 - total / (d * (d - 1)) as f64
    }
}

/// Result of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

pub const TEMPERATURES: [f64; 3] = [1.0, 0.5, 0.1];

/// A random `(za, zb)` with `N, D ∈ [2, 16]` and standard normal entries.
pub fn random_pair(rng: &mut Rng) -> EmbeddingPair {
    let n = 2 + rng.below(15);
    let d = 2 + rng.below(15);
    let za = Matrix::from_fn(n, d, |_, _| rng.normal());
    let zb = Matrix::from_fn(n, d, |_, _| rng.normal());
    EmbeddingPair::new(za, zb).expect("sizes at least 2")
}

/// Library losses against the loop references on `cases` random pairs.
pub fn oracle_equivalence(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let p = random_pair(&mut rng);
        let tau = TEMPERATURES[c % TEMPERATURES.len()];
        let (za, zb) = (p.za(), p.zb());
        let diffs = [
            losses::batch_infonce(&p, tau)?.value - reference::batch_infonce(za, zb, tau),
            losses::dimcl_loss(&p, tau)?.value - reference::dimcl(za, zb, tau),
            losses::abscl_loss(&p, tau)?.value - reference::abscl(za, zb, tau),
            losses::simple_cl_loss(&p)?.value - reference::simple_cl(za, zb),
        ];
        worst = diffs.iter().fold(worst, |w, d| w.max(d.abs()));
    }
    Ok(CheckOutcome::new("oracle equivalence", worst < 1e-10, format!("{cases} pairs, max abs error {worst:.3e}")))
}

/// `dimcl_loss(Za, Zb) == batch_infonce(Zaᵀ, Zbᵀ)`.
pub fn transpose_duality(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let p = random_pair(&mut rng);
        let tau = TEMPERATURES[c % TEMPERATURES.len()];
        let d = losses::dimcl_loss(&p, tau)?.value - losses::batch_infonce(&p.transposed()?, tau)?.value;
        worst = worst.max(d.abs());
    }
    Ok(CheckOutcome::new("transpose duality", worst < 1e-12, format!("{cases} pairs, max abs error {worst:.3e}")))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst relative errors of (analytic DimCL gradient, simple-loss gradient,
/// autodiff through the DimCL loss) against central differences.
pub fn gradient_errors(seed: u64, cases: usize) -> Result<[f64; 3]> {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 3];
    for c in 0..cases {
        let p = random_pair(&mut rng);
        let tau = TEMPERATURES[c % TEMPERATURES.len()];

        // per-column term, differentiated in the normalized query column
        let (g, h) = (reference::unit_cols(p.za()), reference::unit_cols(p.zb()));
        let i = rng.below(p.dim());
        let analytic = losses::dimcl_grad(&p, tau, i)?;
        let fd = central_difference(&g[i], 1e-6, |q| reference::query_term(&g, &h, i, q, tau, false));
        worst[0] = worst[0].max(rel_err(analytic.data(), &fd));

        // per-row simple loss, differentiated in the normalized query row
        let (q, k) = (reference::unit_rows(p.za()), reference::unit_rows(p.zb()));
        let r = rng.below(p.batch_size());
        let analytic = losses::simple_cl_grad(&p, r)?;
        let fd = central_difference(&q[r], 1e-6, |x| reference::simple_term(&q, &k, r, x));
        worst[1] = worst[1].max(rel_err(analytic.data(), &fd));

        // reverse mode through normalization and the full loss, w.r.t. za
        let mut graph = Graph::new();
        let za = graph.param(p.za().clone());
        let zb = graph.constant(p.zb().clone());
        let loss = losses::graph::dimcl_loss(&mut graph, za, zb, tau)?;
        let grad = graph.backward(loss)?.take(za).expect("za is trainable");
        let (n, d) = (p.batch_size(), p.dim());
        let fd = central_difference(p.za().data(), 1e-6, |x| {
            reference::dimcl(&Matrix::from_vec(n, d, x.to_vec()).expect("shape"), p.zb(), tau)
        });
        worst[2] = worst[2].max(rel_err(grad.data(), &fd));
    }
    Ok(worst)
}

pub fn gradient_fidelity(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let [dimcl, simple, autodiff] = gradient_errors(seed, cases)?;
    Ok(CheckOutcome::new(
        "gradient fidelity",
        dimcl < 1e-5 && simple < 1e-5 && autodiff < 1e-5,
        format!("{cases} instances, rel err dimcl {dimcl:.2e}, simple {simple:.2e}, autodiff {autodiff:.2e}"),
    ))
}

/// Worst deviations of (weight normalization, ratio law) and whether the
/// weights were strictly ordered by negative similarity everywhere.
pub fn alpha_errors(seed: u64, cases: usize) -> Result<(f64, f64, bool)> {
    let mut rng = Rng::new(seed);
    let (mut norm_err, mut ratio_err, mut ordered) = (0.0f64, 0.0f64, true);
    for c in 0..cases {
        let p = random_pair(&mut rng);
        let tau = TEMPERATURES[c % TEMPERATURES.len()];
        for report in [losses::dimcl_loss(&p, tau)?, losses::batch_infonce(&p, tau)?] {
            for (i, negs) in report.alpha_neg.iter().enumerate() {
                let sum = report.alpha_pos[i] + negs.iter().sum::<f64>();
                norm_err = norm_err.max((sum - 1.0).abs());
                ordered &= report.alpha_pos[i] > 0.0 && negs.iter().all(|&a| a > 0.0);
                let sims = &report.neg_sim[i];
                for a in 0..negs.len() {
                    for b in 0..negs.len() {
                        if sims[a] > sims[b] {
                            ordered &= negs[a] > negs[b];
                            let expected = ((sims[a] - sims[b]) / tau).exp();
                            ratio_err = ratio_err.max((negs[a] / negs[b] / expected - 1.0).abs());
                        }
                    }
                }
            }
        }
    }
    Ok((norm_err, ratio_err, ordered))
}

pub fn alpha_diagnostics(seed: u64, cases: usize) -> Result<CheckOutcome> {
    let (norm, ratio, ordered) = alpha_errors(seed, cases)?;
    Ok(CheckOutcome::new(
        "alpha diagnostics",
        norm < 1e-9 && ratio < 1e-6 && ordered,
        format!("{cases} pairs, sum err {norm:.2e}, ratio rel err {ratio:.2e}, strictly ordered {ordered}"),
    ))
}

/// Diversity at its endpoints and under column permutation / scaling.
pub fn diversity_endpoints(seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::new(seed);
    let base: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let same = Matrix::from_fn(8, 5, |r, _| base[r]);
    let identical = feature_diversity(&EmbeddingPair::new(same.clone(), same)?)?.value();
    let eye = Matrix::from_fn(6, 4, |r, c| if r == c { 1.0 } else { 0.0 });
    let orthogonal = feature_diversity(&EmbeddingPair::new(eye.clone(), eye)?)?.value();

    let p = random_pair(&mut rng);
    let d0 = feature_diversity(&p)?.value();
    let perm = rng.permutation(p.dim());
    let scales: Vec<f64> = (0..p.dim()).map(|_| rng.uniform_range(0.1, 10.0)).collect();
    let permuted = EmbeddingPair::new(p.za().select_cols(&perm), p.zb().select_cols(&perm))?;
    let scaled = EmbeddingPair::new(
        Matrix::from_fn(p.batch_size(), p.dim(), |r, c| p.za().get(r, c) * scales[c]),
        Matrix::from_fn(p.batch_size(), p.dim(), |r, c| p.zb().get(r, c) * scales[(c + 1) % p.dim()]),
    )?;
    let inv = (feature_diversity(&permuted)?.value() - d0).abs().max((feature_diversity(&scaled)?.value() - d0).abs());
    let oracle = (d0 - reference::feature_diversity(p.za(), p.zb())).abs();
    Ok(CheckOutcome::new(
        "feature diversity endpoints",
        identical == 0.0 && orthogonal == 1.0 && inv < 1e-9 && oracle < 1e-12,
        format!("identical {identical}, orthogonal {orthogonal}, invariance err {inv:.2e}, oracle err {oracle:.2e}"),
    ))
}

/// Every check with the case counts used by the acceptance suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        oracle_equivalence(seed, 200)?,
        transpose_duality(seed.wrapping_add(1), 100)?,
        gradient_fidelity(seed.wrapping_add(2), 50)?,
        alpha_diagnostics(seed.wrapping_add(3), 100)?,
        diversity_endpoints(seed.wrapping_add(4))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_a_small_budget() {
        for check in [
            oracle_equivalence(1, 20).unwrap(),
            transpose_duality(2, 20).unwrap(),
            gradient_fidelity(3, 5).unwrap(),
            alpha_diagnostics(4, 10).unwrap(),
            diversity_endpoints(5).unwrap(),
        ] {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn reference_detects_a_wrong_loss() {
        let mut rng = Rng::new(9);
        let p = random_pair(&mut rng);
        // batch and dimensional losses are different functions
        let a = reference::batch_infonce(p.za(), p.zb(), 0.5);
        let b = reference::dimcl(p.za(), p.zb(), 0.5);
        assert!((a - b).abs() > 1e-6 || p.batch_size() == p.dim());
    }
}
