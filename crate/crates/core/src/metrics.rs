//! Representation quality metrics: column diversity, KNN and linear-probe
//! accuracy, and centroid-based class distances.

use crate::error::{Error, Result};
use crate::losses::EmbeddingPair;
use crate::numcore::{log_sum_exp, Axis, Matrix, Rng, NORM_EPS};

/// Embeddings with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Matrix,
    labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} embeddings",
                labels.len(),
                embeddings.rows()
            )));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn distinct_classes(&self) -> usize {
        let mut seen = vec![false; self.num_classes()];
        self.labels.iter().for_each(|&l| seen[l] = true);
        seen.into_iter().filter(|&s| s).count()
    }
}

/// Feature diversity in `[0, 1]`; 1 means every cross-view column pair is orthogonal.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DiversityScore(pub f64);

impl DiversityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `1 − mean_{i≠j} |cos(g_i, h_j)|` over the columns `g` of `za` and `h` of `zb`.
pub fn feature_diversity(pair: &EmbeddingPair) -> Result<DiversityScore> {
    let (za, zb) = (pair.za(), pair.zb());
    let d = pair.dim();
    if d < 2 {
        return Err(Error::NeedsNegativeColumn(d));
    }
    let sq = |m: &Matrix| -> Result<Vec<f64>> {
        let mut norms = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (n, x) in norms.iter_mut().zip(m.row(r)) {
                *n += x * x;
            }
        }
        match norms.iter().position(|&n| n == 0.0) {
            Some(c) => Err(Error::DegenerateColumn(c)),
            None => Ok(norms),
        }
    };
    let (na, nb) = (sq(za)?, sq(zb)?);
    // accumulated in the same row order as the norms, so identical columns
    // produce a dot product bit-equal to their squared norm
    let mut dots = Matrix::zeros(d, d);
    for r in 0..pair.batch_size() {
        let (ra, rb) = (za.row(r), zb.row(r));
        for (i, a) in ra.iter().enumerate() {
            for (o, b) in dots.row_mut(i).iter_mut().zip(rb) {
                *o += a * b;
            }
        }
    }
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                // sqrt(a·b) keeps |cos| exactly 1 for identical columns
                total += dots.get(i, j).abs() / (na[i] * nb[j]).sqrt();
            }
        }
    }
    Ok(DiversityScore(1.0 - total / (d * (d - 1)) as f64))
}

/// Top-1 KNN accuracy (percent) with cosine similarity and majority vote;
/// vote ties go to the smaller class id, similarity ties to the earlier
/// training example.
pub fn knn_accuracy(train: &EmbeddingSet, test: &EmbeddingSet, k: usize) -> Result<f64> {
    if k == 0 || k > train.len() {
        return Err(Error::InvalidArgument(format!("k = {k} with {} training points", train.len())));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let a = train.embeddings.l2_normalize(Axis::Rows, NORM_EPS)?;
    let b = test.embeddings.l2_normalize(Axis::Rows, NORM_EPS)?;
    let sims = b.matmul_t(&a)?;
    let classes = train.num_classes().max(test.num_classes());
    let mut correct = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(train.len());
    let mut votes = vec![0usize; classes];
    for t in 0..test.len() {
        let row = sims.row(t);
        order.clear();
        order.extend(0..train.len());
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        votes.iter_mut().for_each(|v| *v = 0);
        for &idx in &order[..k] {
            votes[train.labels[idx]] += 1;
        }
        let best = votes.iter().enumerate().max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(&x.0))).map(|(c, _)| c);
        if best == Some(test.labels[t]) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Linear-probe hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 0.3, batch_size: 256, momentum: 0.9, seed: 0 }
    }
}

/// Affine softmax classifier trained on frozen, standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    weight: Matrix,
    bias: Vec<f64>,
    /// Training-set accuracy (percent) after each epoch.
    pub history: Vec<f64>,
}

impl LinearProbe {
    /// SGD with momentum and a cosine-decayed learning rate on softmax
    /// cross-entropy. Features are standardized with training statistics.
    pub fn fit(train: &EmbeddingSet, cfg: &ProbeConfig) -> Result<Self> {
        if train.distinct_classes() < 2 {
            return Err(Error::InvalidArgument("linear probe needs at least two classes".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("probe batch size must be positive".into()));
        }
        let x = train.embeddings();
        let (n, d) = x.shape();
        let classes = train.num_classes();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let inv_std = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
        let mut probe = Self {
            mean,
            inv_std,
            weight: Matrix::zeros(d, classes),
            bias: vec![0.0; classes],
            history: Vec::with_capacity(cfg.epochs),
        };
        let feats = probe.standardize(x);
        let mut vel_w = Matrix::zeros(d, classes);
        let mut vel_b = vec![0.0; classes];
        let mut rng = Rng::new(cfg.seed).split(crate::numcore::rng::streams::PROBE);
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = (cfg.epochs * steps_per_epoch).max(1);
        let mut step = 0usize;
        for _ in 0..cfg.epochs {
            let perm = rng.permutation(n);
            for chunk in perm.chunks(cfg.batch_size) {
                let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
                step += 1;
                let xb = feats.select_rows(chunk);
                let logits = probe.logits_standardized(&xb)?;
                // softmax − onehot, averaged over the batch
                let mut dlog = Matrix::zeros(chunk.len(), classes);
                for (r, &idx) in chunk.iter().enumerate() {
                    let lse = log_sum_exp(logits.row(r));
                    for c in 0..classes {
                        let p = (logits.get(r, c) - lse).exp();
                        let y = if train.labels[idx] == c { 1.0 } else { 0.0 };
                        dlog.set(r, c, (p - y) / chunk.len() as f64);
                    }
                }
                let gw = xb.t_matmul(&dlog)?;
                for (v, g) in vel_w.data_mut().iter_mut().zip(gw.data()) {
                    *v = cfg.momentum * *v + g;
                }
                for c in 0..classes {
                    let gb: f64 = (0..chunk.len()).map(|r| dlog.get(r, c)).sum();
                    vel_b[c] = cfg.momentum * vel_b[c] + gb;
                }
                probe.weight.axpy(-lr, &vel_w)?;
                probe.bias.iter_mut().zip(&vel_b).for_each(|(b, v)| *b -= lr * v);
            }
            let acc = probe.accuracy(train)?;
            probe.history.push(acc);
        }
        Ok(probe)
    }

    fn standardize(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mean[c]) * self.inv_std[c])
    }

    fn logits_standardized(&self, xs: &Matrix) -> Result<Matrix> {
        let mut l = xs.matmul(&self.weight)?;
        for r in 0..l.rows() {
            l.row_mut(r).iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Ok(l)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        if x.cols() != self.mean.len() {
            return Err(Error::ShapeMismatch { op: "probe predict", left: x.shape(), right: self.weight.shape() });
        }
        let l = self.logits_standardized(&self.standardize(x))?;
        Ok((0..l.rows())
            .map(|r| {
                l.row(r)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map_or(0, |(c, _)| c)
            })
            .collect())
    }

    /// Top-1 accuracy in percent.
    pub fn accuracy(&self, set: &EmbeddingSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::InvalidArgument("empty evaluation set".into()));
        }
        let pred = self.predict(set.embeddings())?;
        let hits = pred.iter().zip(set.labels()).filter(|(p, l)| p == l).count();
        Ok(100.0 * hits as f64 / set.len() as f64)
    }
}

/// Trains a probe on `train` and returns its top-1 accuracy (percent) on `test`.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, cfg: &ProbeConfig) -> Result<f64> {
    LinearProbe::fit(train, cfg)?.accuracy(test)
}

/// Mean member-to-centroid distance (averaged over classes) and mean
/// pairwise centroid distance.
pub fn class_distances(set: &EmbeddingSet) -> Result<(f64, f64)> {
    if set.distinct_classes() < 2 {
        return Err(Error::InvalidArgument("class distances need at least two classes".into()));
    }
    let x = set.embeddings();
    let d = x.cols();
    let k = set.num_classes();
    let mut counts = vec![0usize; k];
    let mut centroids = Matrix::zeros(k, d);
    for (r, &l) in set.labels.iter().enumerate() {
        counts[l] += 1;
        centroids.row_mut(l).iter_mut().zip(x.row(r)).for_each(|(c, v)| *c += v);
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    for &c in &present {
        let n = counts[c] as f64;
        centroids.row_mut(c).iter_mut().for_each(|v| *v /= n);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut intra_sum = vec![0.0; k];
    for (r, &l) in set.labels.iter().enumerate() {
        intra_sum[l] += dist(x.row(r), centroids.row(l));
    }
    let intra = present.iter().map(|&c| intra_sum[c] / counts[c] as f64).sum::<f64>() / present.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            inter += dist(centroids.row(a), centroids.row(b));
            pairs += 1;
        }
    }
    Ok((intra, inter / pairs as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]], labels: &[usize]) -> EmbeddingSet {
        EmbeddingSet::new(Matrix::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn diversity_endpoints() {
        let same = Matrix::from_rows(&[[0.3, 0.3, 0.3], [-1.7, -1.7, -1.7], [2.0, 2.0, 2.0]]).unwrap();
        let p = EmbeddingPair::new(same.clone(), same).unwrap();
        assert_eq!(feature_diversity(&p).unwrap().value(), 0.0);
        let ortho = Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 0.5], [0.0, 0.0, 0.0]]).unwrap();
        let p = EmbeddingPair::new(ortho.clone(), ortho).unwrap();
        assert_eq!(feature_diversity(&p).unwrap().value(), 1.0);
    }

    #[test]
    fn diversity_rejects_zero_column() {
        let za = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0]]).unwrap();
        let p = EmbeddingPair::new(za.clone(), za).unwrap();
        assert!(matches!(feature_diversity(&p), Err(Error::DegenerateColumn(1))));
    }

    #[test]
    fn knn_exact_match_and_nearest() {
        let train = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        let test = set(&[&[0.0, 1.0]], &[1]);
        assert_eq!(knn_accuracy(&train, &test, 1).unwrap(), 100.0);
        let test = set(&[&[0.9, 0.1]], &[0]);
        assert_eq!(knn_accuracy(&train, &test, 1).unwrap(), 100.0);
        assert!(knn_accuracy(&train, &test, 3).is_err());
    }

    #[test]
    fn knn_vote_tie_goes_to_smaller_class() {
        let train = set(&[&[1.0, 0.1], &[1.0, -0.1]], &[1, 0]);
        let test = set(&[&[1.0, 0.0]], &[0]);
        assert_eq!(knn_accuracy(&train, &test, 2).unwrap(), 100.0);
    }

    #[test]
    fn probe_separates_two_blobs() {
        let train = set(&[&[1.0, 1.0], &[1.2, 0.8], &[-1.0, -1.1], &[-0.9, -1.3]], &[0, 0, 1, 1]);
        let acc = linear_probe(&train, &train, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 100.0);
    }

    #[test]
    fn probe_needs_two_classes() {
        let train = set(&[&[1.0], &[2.0]], &[3, 3]);
        assert!(LinearProbe::fit(&train, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn class_distance_trivial_cases() {
        let s = set(&[&[0.0, 0.0], &[3.0, 4.0]], &[0, 1]);
        assert_eq!(class_distances(&s).unwrap(), (0.0, 5.0));
        let s = set(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]], &[0, 1, 1]);
        assert_eq!(class_distances(&s).unwrap(), (0.0, 0.0));
        let s = set(&[&[1.0, 1.0]], &[0]);
        assert!(class_distances(&s).is_err());
    }
}
