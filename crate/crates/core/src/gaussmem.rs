//! Stored per-class feature statistics and likelihood-ranked Gaussian
//! sampling of old-class features.
//!
//! Each class learned in task `p` is summarised once, with the extractor as
//! it stood at the end of `p`, by its empirical mean and population
//! covariance. Sampling draws `K` candidates from the (regularised)
//! Gaussian and keeps the most likely one.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::numerics::{cholesky, forward_substitution, log_det_from_cholesky, math, Tensor};
use crate::{Error, Result, Rng};

/// Default number of candidates ranked per generated feature.
pub const DEFAULT_CANDIDATES: usize = 1000;

/// Diagonal loading added before factorisation:
/// `max(1e-6, 1e-4 * trace(cov) / m)`.
pub fn regularization(covariance: &Tensor) -> f64 {
    let m = covariance.rows();
    let trace: f64 = (0..m).map(|i| covariance.get(i, i)).sum();
    (1e-4 * trace / m as f64).max(1e-6)
}

/// Gaussian parameters ready for sampling: mean, Cholesky factor of the
/// regularised covariance and its log-determinant.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian<'a> {
    pub mean: &'a [f64],
    pub chol: &'a Tensor,
    pub log_det: f64,
}

/// Result of the instrumented best-of-`K` draw.
#[derive(Debug, Clone)]
pub struct RankedDraw {
    /// `K x m` candidates in draw order.
    pub candidates: Tensor,
    pub log_likelihoods: Vec<f64>,
    pub selected: usize,
}

impl Gaussian<'_> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn draw_eps(&self, rng: &mut Rng, eps: &mut [f64]) {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
    }

    fn transform(&self, eps: &[f64], out: &mut [f64]) {
        let m = self.dim();
        let l = self.chol.data();
        for i in 0..m {
            let row = &l[i * m..i * m + i + 1];
            out[i] = self.mean[i] + row.iter().zip(&eps[..=i]).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `count` i.i.d. draws `mu + L eps`, one per row.
    pub fn sample_raw(&self, count: usize, rng: &mut Rng) -> Tensor {
        let m = self.dim();
        let mut data = vec![0.0; count * m];
        let mut eps = vec![0.0; m];
        for row in data.chunks_exact_mut(m.max(1)).take(count) {
            self.draw_eps(rng, &mut eps);
            self.transform(&eps, row);
        }
        Tensor::matrix(count, m, data).expect("sized")
    }

    /// `(x - mu)^T Sigma^-1 (x - mu)` via a triangular solve.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(self.mean).map(|(a, b)| a - b).collect();
        forward_substitution(self.chol.data(), &d).iter().map(|v| v * v).sum()
    }

    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim("log_likelihood", format!("{} values for dimension {}", x.len(), self.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite feature".into()));
        }
        let m = self.dim() as f64;
        Ok(-0.5 * (m * math::ln(2.0 * PI) + self.log_det + self.mahalanobis_sq(x)))
    }

    /// Most likely of `k` fresh candidates.
    ///
    /// A candidate `mu + L eps` has squared Mahalanobis distance exactly
    /// `|eps|^2`, so ranking by the standard-normal draws selects the same
    /// candidate as ranking by density while transforming only the winner.
    /// The draws consumed match [`Gaussian::ranked_draw`].
    pub fn mgs_sample(&self, k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::Argument("K must be at least 1".into()));
        }
        let m = self.dim();
        let mut eps = vec![0.0; m];
        let mut best = vec![0.0; m];
        let mut best_norm = f64::INFINITY;
        for _ in 0..k {
            self.draw_eps(rng, &mut eps);
            let norm: f64 = eps.iter().map(|e| e * e).sum();
            if norm < best_norm {
                best_norm = norm;
                best.copy_from_slice(&eps);
            }
        }
        let mut out = vec![0.0; m];
        self.transform(&best, &mut out);
        Ok(out)
    }

    /// Materialises all `k` candidates and their log-densities, selecting the
    /// argmax (ties to the lowest index).
    pub fn ranked_draw(&self, k: usize, rng: &mut Rng) -> Result<RankedDraw> {
        if k == 0 {
            return Err(Error::Argument("K must be at least 1".into()));
        }
        let candidates = self.sample_raw(k, rng);
        let log_likelihoods = (0..k)
            .map(|i| self.log_likelihood(candidates.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let selected = crate::model::argmax(&log_likelihoods);
        Ok(RankedDraw {
            candidates,
            log_likelihoods,
            selected,
        })
    }
}

/// Stored statistics of one learned class.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassStats {
    pub class_id: usize,
    pub mean: Vec<f64>,
    /// Population covariance, exactly symmetric.
    pub covariance: Tensor,
    /// Diagonal loading applied before factorisation.
    pub lambda: f64,
    /// Lower Cholesky factor of `covariance + lambda I`.
    pub chol: Tensor,
    pub log_det: f64,
    pub sample_count: usize,
    pub learned_at_task: usize,
}

impl ClassStats {
    /// Finalises stats from a mean and covariance (regularises and factors).
    pub fn from_moments(
        class_id: usize,
        mean: Vec<f64>,
        covariance: Tensor,
        sample_count: usize,
        learned_at_task: usize,
    ) -> Result<Self> {
        let m = mean.len();
        if covariance.shape() != [m, m] {
            return Err(Error::dim("ClassStats", format!("covariance {:?} for dimension {}", covariance.shape(), m)));
        }
        let (lambda, chol, log_det) = factor_regularized(&covariance)?;
        Ok(Self {
            class_id,
            mean,
            covariance,
            lambda,
            chol,
            log_det,
            sample_count,
            learned_at_task,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn gaussian(&self) -> Gaussian<'_> {
        Gaussian {
            mean: &self.mean,
            chol: &self.chol,
            log_det: self.log_det,
        }
    }

    /// Regularised covariance `covariance + lambda I`.
    pub fn regularized_covariance(&self) -> Tensor {
        let mut c = self.covariance.clone();
        for i in 0..self.dim() {
            c.set(i, i, c.get(i, i) + self.lambda);
        }
        c
    }
}

fn factor_regularized(covariance: &Tensor) -> Result<(f64, Tensor, f64)> {
    let lambda = regularization(covariance);
    let mut reg = covariance.clone();
    for i in 0..reg.rows() {
        reg.set(i, i, reg.get(i, i) + lambda);
    }
    let chol = cholesky(&reg)?;
    let log_det = log_det_from_cholesky(&chol);
    Ok((lambda, chol, log_det))
}

/// Empirical mean and population (divide-by-`N`) covariance of `N x m`
/// features.
pub fn estimate_class_stats(features: &Tensor, class_id: usize, task: usize) -> Result<ClassStats> {
    if !features.is_matrix() {
        return Err(Error::dim("estimate_class_stats", "features must be N x m"));
    }
    let (n, m) = (features.rows(), features.cols());
    if n < 2 {
        return Err(Error::InsufficientSamples { class_id, count: n });
    }
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (acc, v) in mean.iter_mut().zip(features.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut cov = Tensor::zeros(&[m, m]);
    let mut dev = vec![0.0; m];
    for i in 0..n {
        for ((d, x), mu) in dev.iter_mut().zip(features.row(i)).zip(&mean) {
            *d = x - mu;
        }
        let c = cov.data_mut();
        for a in 0..m {
            for b in a..m {
                c[a * m + b] += dev[a] * dev[b];
            }
        }
    }
    {
        let c = cov.data_mut();
        for a in 0..m {
            for b in a..m {
                let v = c[a * m + b] / n as f64;
                c[a * m + b] = v;
                c[b * m + a] = v;
            }
        }
    }
    ClassStats::from_moments(class_id, mean, cov, n, task)
}

/// Which covariance backs sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CovarianceMode {
    #[default]
    PerClass,
    /// One covariance pooled over all stored classes, weighted by `N^k`.
    Tied,
}

#[derive(Debug, Clone, PartialEq)]
struct Pooled {
    chol: Tensor,
    log_det: f64,
}

/// Write-once map from class id to [`ClassStats`].
#[derive(Debug, Clone, PartialEq)]
pub struct StatsStore {
    feature_dim: usize,
    mode: CovarianceMode,
    entries: BTreeMap<usize, ClassStats>,
    pooled: Option<Pooled>,
}

impl StatsStore {
    pub fn new(feature_dim: usize, mode: CovarianceMode) -> Self {
        Self {
            feature_dim,
            mode,
            entries: BTreeMap::new(),
            pooled: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class_id: usize) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn get(&self, class_id: usize) -> Result<&ClassStats> {
        self.entries.get(&class_id).ok_or(Error::Lookup(class_id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassStats> {
        self.entries.values()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Inserts new statistics; an existing class is never overwritten.
    pub fn insert(&mut self, stats: ClassStats) -> Result<()> {
        if stats.dim() != self.feature_dim {
            return Err(Error::dim(
                "StatsStore::insert",
                format!("stats of dimension {} in a store of dimension {}", stats.dim(), self.feature_dim),
            ));
        }
        if self.entries.contains_key(&stats.class_id) {
            return Err(Error::WriteOnce(stats.class_id));
        }
        self.entries.insert(stats.class_id, stats);
        if self.mode == CovarianceMode::Tied {
            self.pooled = Some(self.pool()?);
        }
        Ok(())
    }

    fn pool(&self) -> Result<Pooled> {
        let m = self.feature_dim;
        let mut acc = Tensor::zeros(&[m, m]);
        let mut total = 0usize;
        for s in self.entries.values() {
            for (a, c) in acc.data_mut().iter_mut().zip(s.covariance.data()) {
                *a += s.sample_count as f64 * c;
            }
            total += s.sample_count;
        }
        acc.data_mut().iter_mut().for_each(|v| *v /= total.max(1) as f64);
        let (_, chol, log_det) = factor_regularized(&acc)?;
        Ok(Pooled { chol, log_det })
    }

    /// Sampling distribution of `class_id` under the store's covariance mode.
    pub fn gaussian(&self, class_id: usize) -> Result<Gaussian<'_>> {
        let s = self.get(class_id)?;
        match (&self.mode, &self.pooled) {
            (CovarianceMode::Tied, Some(p)) => Ok(Gaussian {
                mean: &s.mean,
                chol: &p.chol,
                log_det: p.log_det,
            }),
            _ => Ok(s.gaussian()),
        }
    }
}

/// Old-class labels for one synthetic batch of size `batch`.
///
/// Fewer slots than classes: distinct classes drawn uniformly. Equal: every
/// class once. More: every class once, then further rounds of distinct draws
/// until the batch is full.
pub fn select_old_batch(old_classes: &[usize], batch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = old_classes.len();
    if n == 0 {
        return Err(Error::Protocol("no old classes to replay".into()));
    }
    let mut draw_distinct = |count: usize, out: &mut Vec<usize>| {
        let mut pool = old_classes.to_vec();
        for i in 0..count {
            let j = rng.random_range(i..n);
            pool.swap(i, j);
            out.push(pool[i]);
        }
    };
    let mut out = Vec::with_capacity(batch);
    if batch < n {
        draw_distinct(batch, &mut out);
    } else {
        out.extend_from_slice(old_classes);
        while out.len() < batch {
            let count = (batch - out.len()).min(n);
            draw_distinct(count, &mut out);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn two_symmetric_points() {
        let f = Tensor::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let s = estimate_class_stats(&f, 3, 0).unwrap();
        assert_eq!(s.mean, [1.0, 1.0]);
        assert_eq!(s.covariance.data(), &[1.0, 1.0, 1.0, 1.0]);
        let rec = s.chol.matmul(&s.chol.transpose()).unwrap();
        let reg = s.regularized_covariance();
        for (a, b) in rec.data().iter().zip(reg.data()) {
            assert!((a - b).abs() < 1e-10 * 2.0);
        }
    }

    #[test]
    fn repeated_point_regularizes_to_lambda_identity() {
        let f = Tensor::from_rows(&[[1.5, -2.0, 0.5]; 5]).unwrap();
        let s = estimate_class_stats(&f, 0, 1).unwrap();
        assert_eq!(s.mean, [1.5, -2.0, 0.5]);
        assert!(s.covariance.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.lambda, 1e-6);
        let mut rng = seeded_rng(0);
        let draws = s.gaussian().sample_raw(200, &mut rng);
        for i in 0..200 {
            for (x, mu) in draws.row(i).iter().zip(&s.mean) {
                assert!((x - mu).abs() < 10.0 * 1e-3);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let f = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(
            estimate_class_stats(&f, 4, 0),
            Err(Error::InsufficientSamples { class_id: 4, count: 1 })
        ));
    }

    #[test]
    fn standard_normal_density_at_mode() {
        let s = ClassStats::from_moments(0, vec![0.0], Tensor::from_rows(&[[1.0]]).unwrap(), 10, 0).unwrap();
        let g = s.gaussian();
        // lambda = 1e-4 inflates the variance slightly.
        let expected = -0.5 * ((2.0 * PI).ln() + (1.0 + 1e-4f64).ln());
        assert!((g.log_likelihood(&[0.0]).unwrap() - expected).abs() < 1e-14);
        assert!((g.log_likelihood(&[0.0]).unwrap() + 0.9189).abs() < 1e-3);
        assert!(g.log_likelihood(&[f64::NAN]).is_err());
        assert!(g.log_likelihood(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn write_once_store() {
        let f = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]]).unwrap();
        let mut store = StatsStore::new(2, CovarianceMode::PerClass);
        store.insert(estimate_class_stats(&f, 1, 0).unwrap()).unwrap();
        assert_eq!(store.insert(estimate_class_stats(&f, 1, 0).unwrap()), Err(Error::WriteOnce(1)));
        assert!(matches!(store.gaussian(9), Err(Error::Lookup(9))));
        let wrong = Tensor::from_rows(&[[0.0, 1.0, 2.0], [1.0, 0.0, 2.0]]).unwrap();
        assert!(store.insert(estimate_class_stats(&wrong, 2, 0).unwrap()).is_err());
    }

    #[test]
    fn tied_mode_pools_covariance() {
        let a = Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 0.0], [0.0, 4.0]]).unwrap();
        let mut store = StatsStore::new(2, CovarianceMode::Tied);
        store.insert(estimate_class_stats(&a, 0, 0).unwrap()).unwrap();
        store.insert(estimate_class_stats(&b, 1, 0).unwrap()).unwrap();
        let g0 = store.gaussian(0).unwrap();
        let g1 = store.gaussian(1).unwrap();
        assert_eq!(g0.chol, g1.chol);
        assert_eq!(g0.mean, &[1.0, 0.0]);
        // pooled diag = (1 + 0)/2, (0 + 4)/2
        let l = g0.chol;
        assert!((l.get(0, 0).powi(2) - (0.5 + regularization(&Tensor::from_rows(&[[0.5, 0.0], [0.0, 2.0]]).unwrap()))).abs() < 1e-12);
    }

    #[test]
    fn old_batch_cases() {
        let mut rng = seeded_rng(1);
        let classes: Vec<usize> = (0..10).collect();
        let four = select_old_batch(&classes, 4, &mut rng).unwrap();
        let mut d = four.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 4);
        assert_eq!(select_old_batch(&classes, 10, &mut rng).unwrap(), classes);
        let five = select_old_batch(&[0, 1], 5, &mut rng).unwrap();
        assert_eq!(five.len(), 5);
        assert!(five.contains(&0) && five.contains(&1));
        assert!(matches!(select_old_batch(&[], 3, &mut rng), Err(Error::Protocol(_))));
    }

    #[test]
    fn fast_and_ranked_selection_agree() {
        let f = Tensor::from_rows(&[[0.0, 1.0, 0.3], [1.0, 0.0, -0.2], [2.0, 2.5, 0.1], [0.4, -1.0, 1.0]]).unwrap();
        let s = estimate_class_stats(&f, 0, 0).unwrap();
        let g = s.gaussian();
        for seed in 0..20 {
            let fast = g.mgs_sample(50, &mut seeded_rng(seed)).unwrap();
            let ranked = g.ranked_draw(50, &mut seeded_rng(seed)).unwrap();
            let chosen = ranked.candidates.row(ranked.selected);
            for (a, b) in fast.iter().zip(chosen) {
                assert!((a - b).abs() < 1e-12);
            }
            let best = ranked.log_likelihoods[ranked.selected];
            assert!(ranked.log_likelihoods.iter().all(|&l| l <= best));
        }
    }
}
