//! Gaussian and Gaussian-mixture density modelling of latent embeddings,
//! the equal-displacement decay inequality, PCA and image entropy.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Relative tolerance on `| |x-μ₁| - |x-μ₂| |` for the displacement precondition.
pub const DISPLACEMENT_TOL: f64 = 1e-6;
const EMPTY_COMPONENT_MASS: f64 = 1e-10;

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianModel {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Density {
    pub density: f64,
    pub log_density: f64,
}

impl Density {
    fn from_log(log_density: f64) -> Self {
        Density {
            density: log_density.exp(),
            log_density,
        }
    }
}

impl GaussianModel {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() || mean.is_empty() {
            return Err(Error::Dimension(format!(
                "mean has {} dims, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if variance.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("variances must be positive".into()));
        }
        Ok(GaussianModel { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        diag_log_pdf(x, &self.mean, &self.variance)
    }
}

fn diag_log_pdf(x: &[f64], mean: &[f64], variance: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(variance)
        .map(|((x, m), v)| -0.5 * (2.0 * PI * v).ln() - (x - m) * (x - m) / (2.0 * v))
        .sum()
}

fn check_rows(x: &Tensor, min: usize) -> Result<()> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!("expected n × d samples, got {:?}", x.shape())));
    }
    if x.rows() < min {
        return Err(Error::InsufficientData(format!(
            "{} samples, need at least {min}",
            x.rows()
        )));
    }
    Ok(())
}

fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / n).max(VARIANCE_FLOOR));
    (mean, var)
}

/// Maximum-likelihood diagonal Gaussian over the rows of `x` (n × d).
pub fn fit_gaussian(x: &Tensor) -> Result<GaussianModel> {
    check_rows(x, 2)?;
    let (mean, variance) = column_moments(x);
    Ok(GaussianModel { mean, variance })
}

pub fn gaussian_pdf(x: &[f64], model: &GaussianModel) -> Density {
    Density::from_log(model.log_pdf(x))
}

/// Outcome of comparing the exponential decay terms of two 1-d Gaussians at `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InequalityCheck {
    /// `exp(-(x-μ₁)²/2σ₁²) < exp(-(x-μ₂)²/2σ₂²)`, decided on the exponents.
    pub holds: bool,
    pub term_single: f64,
    pub term_multi: f64,
    /// `| |x-μ₁| - |x-μ₂| |`.
    pub displacement_gap: f64,
    /// σ₂² > σ₁² and the displacements agree within [`DISPLACEMENT_TOL`].
    pub precondition_met: bool,
}

pub fn boundary_inequality_check(x: f64, single: &GaussianModel, multi: &GaussianModel) -> Result<InequalityCheck> {
    if single.dim() != 1 || multi.dim() != 1 {
        return Err(Error::Dimension("inequality check needs 1-d models".into()));
    }
    let (d1, d2) = ((x - single.mean[0]).abs(), (x - multi.mean[0]).abs());
    let e1 = -d1 * d1 / (2.0 * single.variance[0]);
    let e2 = -d2 * d2 / (2.0 * multi.variance[0]);
    let gap = (d1 - d2).abs();
    let precondition_met = multi.variance[0] > single.variance[0] && gap <= DISPLACEMENT_TOL * d1.max(d2).max(1.0);
    if !precondition_met {
        log::warn!("inequality precondition violated: gap {gap}, variances {} vs {}", single.variance[0], multi.variance[0]);
    }
    Ok(InequalityCheck {
        holds: e1 < e2,
        term_single: e1.exp(),
        term_multi: e2.exp(),
        displacement_gap: gap,
        precondition_met,
    })
}

/// Mixture of diagonal Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianModel>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianModel>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::Config(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture weights must be positive and sum to 1".into()));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::Dimension("components differ in dimension".into()));
        }
        Ok(GaussianMixture { weights, components })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_pdf(x))
            .collect();
        log_sum_exp(&terms)
    }
}

pub fn gmm_pdf(x: &[f64], mixture: &GaussianMixture) -> Density {
    Density::from_log(mixture.log_pdf(x))
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions { max_iter: 200, tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub mixture: GaussianMixture,
    /// Mean per-sample log-likelihood before each M-step, ending with the
    /// value of the returned mixture.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub reseeds: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp<R: Rng>(x: &Tensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(x.row(pick).to_vec());
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centers.last().unwrap()));
        }
    }
    centers
}

/// EM for a `k`-component diagonal mixture over the rows of `x`, seeded by
/// k-means++.
pub fn fit_gmm<R: Rng>(x: &Tensor, k: usize, options: GmmOptions, rng: &mut R) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    check_rows(x, 2 * k)?;
    let (n, d) = (x.rows(), x.cols());
    let (_, global_var) = column_moments(x);
    let mut weights = vec![1.0 / k as f64; k];
    let mut means = kmeans_pp(x, k, rng);
    let mut vars = vec![global_var.clone(); k];

    let mut history = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut reseeds = 0;
    let mut converged = false;
    for iter in 0..=options.max_iter {
        // E-step
        let mut ll = 0.0;
        let mut sample_ll = vec![0.0; n];
        for i in 0..n {
            let row = x.row(i);
            let r = &mut resp[i * k..(i + 1) * k];
            for c in 0..k {
                r[c] = weights[c].ln() + diag_log_pdf(row, &means[c], &vars[c]);
            }
            let lse = log_sum_exp(r);
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
            sample_ll[i] = lse;
            ll += lse;
        }
        ll /= n as f64;
        let gain = history.last().map(|prev| ll - prev);
        history.push(ll);
        if gain.is_some_and(|g| g.abs() < options.tol) {
            converged = true;
            break;
        }
        if iter == options.max_iter {
            break;
        }

        // M-step
        for c in 0..k {
            let mass: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if mass < EMPTY_COMPONENT_MASS {
                let far = (0..n)
                    .min_by(|&a, &b| sample_ll[a].total_cmp(&sample_ll[b]))
                    .unwrap();
                log::warn!("mixture component {c} emptied at iteration {iter}; reseeding from sample {far}");
                means[c] = x.row(far).to_vec();
                vars[c] = global_var.clone();
                weights[c] = 1.0 / n as f64;
                reseeds += 1;
                continue;
            }
            weights[c] = mass / n as f64;
            let mut mean = vec![0.0; d];
            for i in 0..n {
                let w = resp[i * k + c];
                for (m, v) in mean.iter_mut().zip(x.row(i)) {
                    *m += w * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= mass);
            let mut var = vec![0.0; d];
            for i in 0..n {
                let w = resp[i * k + c];
                for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                    *s += w * (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s = (*s / mass).max(VARIANCE_FLOOR));
            means[c] = mean;
            vars[c] = var;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }

    let components = means
        .into_iter()
        .zip(vars)
        .map(|(mean, variance)| GaussianModel { mean, variance })
        .collect();
    Ok(GmmFit {
        mixture: GaussianMixture { weights, components },
        log_likelihood: history,
        converged,
        reseeds,
    })
}

/// Principal-component projection fitted on a reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `d × r`, columns ordered by decreasing explained variance.
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Keeps `min(dims, d)` components.
    pub fn fit(x: &Tensor, dims: usize) -> Result<Self> {
        check_rows(x, 2)?;
        if dims == 0 {
            return Err(Error::Config("PCA needs at least one output dimension".into()));
        }
        let (n, d) = (x.rows(), x.cols());
        let r = dims.min(d);
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| x.at(i, j) - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut comp = vec![0.0; d * r];
        for (c, &idx) in order.iter().take(r).enumerate() {
            let v = eig.eigenvectors.column(idx);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                comp[j * r + c] = sign * v[j];
            }
        }
        Ok(Pca {
            mean,
            components: Tensor::new(vec![d, r], comp)?,
            explained_variance: order.iter().take(r).map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
        })
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.rank() != 2 || x.cols() != d {
            return Err(Error::Dimension(format!("PCA fitted on {d} dims, got {:?}", x.shape())));
        }
        let centered = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .chunks(d)
                .flat_map(|row| row.iter().zip(&self.mean).map(|(v, m)| v - m))
                .collect(),
        )?;
        centered.matmul(&self.components)
    }
}

/// Shannon entropy in bits of the histogram of a grayscale image with pixel
/// values in `[0, 1]`, quantized to 256 levels and grouped into `bins`.
pub fn image_entropy(pixels: &[f64], bins: usize) -> Result<f64> {
    if bins == 0 || bins > 256 {
        return Err(Error::Config(format!("bins = {bins} outside 1..=256")));
    }
    if pixels.is_empty() {
        return Err(Error::InsufficientData("empty image".into()));
    }
    let mut hist = vec![0usize; bins];
    for &p in pixels {
        let level = (p * 255.0).round().clamp(0.0, 255.0) as usize;
        hist[level * bins / 256] += 1;
    }
    let n = pixels.len() as f64;
    Ok(hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        + 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryOptions {
    /// Project onto this many principal components of the normal data first.
    pub pca_dims: Option<usize>,
    pub gmm: GmmOptions,
}

impl Default for BoundaryOptions {
    fn default() -> Self {
        BoundaryOptions {
            pca_dims: Some(16),
            gmm: GmmOptions::default(),
        }
    }
}

/// Anomaly densities under a single-class Gaussian and a multi-class mixture.
#[derive(Clone, Debug)]
pub struct DensityReport {
    pub single: Vec<Density>,
    pub multi: Vec<Density>,
    pub mean_single_density: f64,
    pub mean_multi_density: f64,
    pub mean_single_log_density: f64,
    pub mean_multi_log_density: f64,
    /// Mean anomaly log-density is higher under the multi-class model.
    pub multi_exceeds_single: bool,
    pub components: usize,
    pub dims: usize,
}

pub fn boundary_report<R: Rng>(
    normal_single: &Tensor,
    normal_multi: &Tensor,
    anomalies: &Tensor,
    k: usize,
    options: &BoundaryOptions,
    rng: &mut R,
) -> Result<DensityReport> {
    let d = normal_multi.cols();
    if normal_single.cols() != d || anomalies.cols() != d {
        return Err(Error::Dimension(format!(
            "embedding widths {}, {}, {} differ",
            normal_single.cols(),
            d,
            anomalies.cols()
        )));
    }
    let (single_x, multi_x, anom_x) = match options.pca_dims {
        Some(r) => {
            let pca = Pca::fit(normal_multi, r)?;
            (pca.project(normal_single)?, pca.project(normal_multi)?, pca.project(anomalies)?)
        }
        None => (normal_single.clone(), normal_multi.clone(), anomalies.clone()),
    };
    let single_model = fit_gaussian(&single_x)?;
    let mixture = fit_gmm(&multi_x, k, options.gmm, rng)?.mixture;

    let rows: Vec<&[f64]> = (0..anom_x.rows()).map(|i| anom_x.row(i)).collect();
    let single: Vec<Density> = rows.iter().map(|r| gaussian_pdf(r, &single_model)).collect();
    let multi: Vec<Density> = rows.iter().map(|r| gmm_pdf(r, &mixture)).collect();
    let mean = |v: &[Density], f: fn(&Density) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let mean_single_log_density = mean(&single, |d| d.log_density);
    let mean_multi_log_density = mean(&multi, |d| d.log_density);
    Ok(DensityReport {
        mean_single_density: mean(&single, |d| d.density),
        mean_multi_density: mean(&multi, |d| d.density),
        mean_single_log_density,
        mean_multi_log_density,
        multi_exceeds_single: mean_multi_log_density > mean_single_log_density,
        single,
        multi,
        components: k,
        dims: anom_x.cols(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::SeedStream;
    use rand_distr::{Distribution, Normal};

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn gaussian_fit_examples() {
        let m = fit_gaussian(&column(&[1.0, 2.0, 3.0])).unwrap();
        assert!((m.mean[0] - 2.0).abs() < 1e-15);
        assert!((m.variance[0] - 2.0 / 3.0).abs() < 1e-15);
        let flat = fit_gaussian(&column(&[4.0; 5])).unwrap();
        assert_eq!(flat.variance[0], VARIANCE_FLOOR);
        let shifted = fit_gaussian(&column(&[11.0, 12.0, 13.0])).unwrap();
        assert!((shifted.mean[0] - 12.0).abs() < 1e-12);
        assert!((shifted.variance[0] - m.variance[0]).abs() < 1e-12);
        assert!(matches!(fit_gaussian(&column(&[1.0])), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn gaussian_pdf_examples() {
        let m = GaussianModel::new(vec![0.5], vec![1.0]).unwrap();
        let at_mode = gaussian_pdf(&[0.5], &m);
        assert!((at_mode.density - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!((at_mode.density - at_mode.log_density.exp()).abs() < 1e-15);
        for x in [-1.0, 0.0, 0.49, 0.51, 3.0] {
            assert!(gaussian_pdf(&[x], &m).density < at_mode.density);
        }
        let m = GaussianModel::new(vec![1.3], vec![0.7]).unwrap();
        let sd = 0.7f64.sqrt();
        let integral = simpson(|x| gaussian_pdf(&[x], &m).density, 1.3 - 8.0 * sd, 1.3 + 8.0 * sd, 4000);
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn inequality_worked_instance() {
        let m1 = GaussianModel::new(vec![0.0], vec![1.0]).unwrap();
        let m2 = GaussianModel::new(vec![0.0], vec![4.0]).unwrap();
        let c = boundary_inequality_check(3.0, &m1, &m2).unwrap();
        assert!(c.holds && c.precondition_met);
        assert!((c.term_single - (-4.5f64).exp()).abs() < 1e-15);
        assert!((c.term_single - 0.01111).abs() < 1e-5);
        assert!((c.term_multi - 0.32465).abs() < 1e-5);

        let same = boundary_inequality_check(3.0, &m1, &m1).unwrap();
        assert!(!same.holds && !same.precondition_met);
        assert_eq!(same.term_single, same.term_multi);
    }

    #[test]
    fn gmm_pdf_examples() {
        let a = GaussianModel::new(vec![-1.0], vec![0.5]).unwrap();
        let b = GaussianModel::new(vec![1.0], vec![0.5]).unwrap();
        let mix = GaussianMixture::new(vec![0.5, 0.5], vec![a.clone(), b.clone()]).unwrap();
        let mid = gmm_pdf(&[0.0], &mix).density;
        let expected = 0.5 * (gaussian_pdf(&[0.0], &a).density + gaussian_pdf(&[0.0], &b).density);
        assert!((mid - expected).abs() < 1e-15);
        let one = GaussianMixture::new(vec![1.0], vec![a.clone()]).unwrap();
        assert!((gmm_pdf(&[0.3], &one).log_density - gaussian_pdf(&[0.3], &a).log_density).abs() < 1e-15);

        let skew = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![a, GaussianModel::new(vec![2.0], vec![1.5]).unwrap()],
        )
        .unwrap();
        let integral = simpson(|x| gmm_pdf(&[x], &skew).density, -12.0, 14.0, 8000);
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
        assert!(GaussianMixture::new(vec![0.5, 0.6], skew.components.clone()).is_err());
    }

    #[test]
    fn gmm_single_component_matches_gaussian() {
        let mut rng = SeedStream::new(3).rng("x");
        let x = Tensor::randn(&[50, 3], 2.0, &mut rng);
        let fit = fit_gmm(&x, 1, GmmOptions::default(), &mut rng).unwrap();
        let g = fit_gaussian(&x).unwrap();
        let c = &fit.mixture.components[0];
        for j in 0..3 {
            assert!((c.mean[j] - g.mean[j]).abs() < 1e-9);
            assert!((c.variance[j] - g.variance[j]).abs() < 1e-9);
        }
        assert!(matches!(fit_gmm(&x, 30, GmmOptions::default(), &mut rng), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn gmm_recovers_two_modes() {
        let mut rng = SeedStream::new(7).rng("sample");
        let unit = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..5000)
            .map(|i| unit.sample(&mut rng) + if i % 2 == 0 { 0.0 } else { 5.0 })
            .collect();
        let fit = fit_gmm(&column(&data), 2, GmmOptions::default(), &mut SeedStream::new(7).rng("init")).unwrap();
        let mut means: Vec<f64> = fit.mixture.components.iter().map(|c| c.mean[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!(means[0].abs() < 0.15 && (means[1] - 5.0).abs() < 0.15, "{means:?}");
        assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!((fit.mixture.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pca_orders_components_by_variance() {
        let mut rng = SeedStream::new(5).rng("x");
        let unit = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..400)
            .flat_map(|_| {
                let (a, b) = (unit.sample(&mut rng) * 3.0, unit.sample(&mut rng) * 0.5);
                [a + b, a - b, 0.1 * unit.sample(&mut rng)]
            })
            .collect();
        let x = Tensor::new(vec![400, 3], data).unwrap();
        let pca = Pca::fit(&x, 2).unwrap();
        assert!(pca.explained_variance[0] > pca.explained_variance[1]);
        let first: Vec<f64> = (0..3).map(|j| pca.components.at(j, 0)).collect();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((first[0] - s).abs() < 0.05 && (first[1] - s).abs() < 0.05);
        let proj = pca.project(&x).unwrap();
        assert_eq!(proj.shape(), &[400, 2]);
        let col_mean: f64 = (0..400).map(|i| proj.at(i, 0)).sum::<f64>() / 400.0;
        assert!(col_mean.abs() < 1e-10);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(image_entropy(&[0.3; 64], 256).unwrap(), 0.0);
        let two_tone: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        assert_eq!(image_entropy(&two_tone, 256).unwrap(), 1.0);
        let uniform: Vec<f64> = (0..512).map(|i| (i % 256) as f64 / 255.0).collect();
        assert_eq!(image_entropy(&uniform, 256).unwrap(), 8.0);
        assert!(image_entropy(&uniform, 0).is_err());
    }

    #[test]
    fn boundary_report_separates_broad_mixture() {
        let mut rng = SeedStream::new(11).rng("x");
        let unit = Normal::new(0.0, 1.0).unwrap();
        let cluster = |centre: f64, n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..n).flat_map(|_| [centre + unit.sample(rng), unit.sample(rng)]).collect::<Vec<_>>()
        };
        let single = Tensor::new(vec![100, 2], cluster(0.0, 100, &mut rng)).unwrap();
        let mut multi_data = single.data().to_vec();
        for c in 1..3 {
            multi_data.extend(cluster(6.0 * c as f64, 100, &mut rng));
        }
        let multi = Tensor::new(vec![300, 2], multi_data).unwrap();
        let anomalies = Tensor::new(vec![50, 2], cluster(9.0, 50, &mut rng)).unwrap();
        let opts = BoundaryOptions { pca_dims: None, ..Default::default() };
        let r = boundary_report(&single, &multi, &anomalies, 3, &opts, &mut rng).unwrap();
        assert!(r.multi_exceeds_single);
        for d in r.single.iter().chain(&r.multi) {
            if d.density > 1e-300 {
                assert!((d.density - d.log_density.exp()).abs() <= 1e-9 * d.density);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn equal_displacement_favours_wider_variance(
                d in 1e-3f64..20.0,
                s1 in 0.05f64..5.0,
                ratio in 1.001f64..10.0,
                mu in -10.0f64..10.0,
            ) {
                let m1 = GaussianModel::new(vec![mu], vec![s1 * s1]).unwrap();
                let m2 = GaussianModel::new(vec![mu], vec![(s1 * ratio).powi(2)]).unwrap();
                prop_assert!(boundary_inequality_check(mu + d, &m1, &m2).unwrap().holds);
            }

            #[test]
            fn entropy_bounded_and_label_invariant(
                levels in proptest::collection::vec(0u8..=255, 1..300),
            ) {
                let px: Vec<f64> = levels.iter().map(|&l| l as f64 / 255.0).collect();
                let inv: Vec<f64> = levels.iter().map(|&l| (255 - l) as f64 / 255.0).collect();
                let h = image_entropy(&px, 256).unwrap();
                prop_assert!((0.0..=8.0).contains(&h));
                prop_assert!((h - image_entropy(&inv, 256).unwrap()).abs() < 1e-12);
            }
        }
    }
}
