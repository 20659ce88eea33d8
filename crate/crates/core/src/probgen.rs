//! Synthetic production-distribution instances and Gaussian-mixture demand data.
//!
//! Gamma variates use Marsaglia and Tsang's squeeze method; Dirichlet weights
//! are normalized unit-rate Gammas; Wishart covariances use the Bartlett
//! decomposition. Every generator takes an explicit seed.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_psd, DenseMatrix};
use crate::lp::Instance;
use crate::rng::{derive_seed, stream};

pub const N_COMPONENTS: usize = 3;
pub const UNMET_DEMAND_COST: f64 = 5.0;
pub const SHIP_COST_BALL_RADIUS: f64 = 1.5;

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `Gamma(shape, 1)`.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    assert!(shape > 0.0, "gamma shape must be positive");
    if shape < 1.0 {
        // Gamma(a) = Gamma(a + 1) · U^(1/a)
        let u: f64 = rng.random();
        return sample_gamma(rng, shape + 1.0) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let (x, v) = loop {
            let x = standard_normal(rng);
            let v = 1.0 + c * x;
            if v > 0.0 {
                break (x, v * v * v);
            }
        };
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x * x * x * x || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = alpha.iter().map(|&a| sample_gamma(rng, a)).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// `Wishart(df, I_dim)` by Bartlett: `A Aᵀ` with `A` lower triangular,
/// `A_ii = sqrt(χ²(df − i))` and standard normal entries below the diagonal.
pub fn sample_wishart_identity<R: Rng + ?Sized>(rng: &mut R, dim: usize, df: f64) -> DenseMatrix {
    assert!(df > (dim as f64) - 1.0, "Wishart needs df > dim - 1");
    let mut a = DenseMatrix::zeros(dim, dim);
    for i in 0..dim {
        a[(i, i)] = (2.0 * sample_gamma(rng, (df - i as f64) / 2.0)).sqrt();
        for j in 0..i {
            a[(i, j)] = standard_normal(rng);
        }
    }
    let mut w = a.matmul(&a.transpose());
    // exact symmetry
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (w[(i, j)] + w[(j, i)]);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    w
}

/// Uniform draw from the open Euclidean ball of `radius` in `dim` dimensions:
/// uniform direction times `radius · U^(1/dim)`.
pub fn sample_uniform_ball<R: Rng + ?Sized>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let mut norm = crate::linalg::norm2(&dir);
    while norm == 0.0 {
        dir = (0..dim).map(|_| standard_normal(rng)).collect();
        norm = crate::linalg::norm2(&dir);
    }
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / dim as f64);
    dir.into_iter().map(|v| v * r / norm).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DenseMatrix>,
}

impl MixtureParams {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::Dimension("mixture component counts disagree".into()));
        }
        let d = self.dim();
        if self.means.iter().any(|m| m.len() != d)
            || self
                .covariances
                .iter()
                .any(|c| c.rows() != d || c.cols() != d)
        {
            return Err(Error::Dimension(
                "mixture component dimensions disagree".into(),
            ));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "mixture weights must lie on the simplex".into(),
            ));
        }
        Ok(())
    }
}

/// Three-component mixture: `ζ ~ Dir(1,1,1)`, `μᵏ ~ N(0, J·I)`,
/// `Σᵏ ~ Wishart(J, I)`.
pub fn sample_mixture_params(dim: usize, seed: u64) -> MixtureParams {
    assert!(dim >= 1);
    let mut rng = stream(seed, "mixture-params", &[]);
    let weights = sample_dirichlet(&mut rng, &[1.0; N_COMPONENTS]);
    let sd = (dim as f64).sqrt();
    let means = (0..N_COMPONENTS)
        .map(|_| (0..dim).map(|_| sd * standard_normal(&mut rng)).collect())
        .collect();
    let covariances = (0..N_COMPONENTS)
        .map(|_| sample_wishart_identity(&mut rng, dim, dim as f64))
        .collect();
    MixtureParams {
        weights,
        means,
        covariances,
    }
}

/// Row ranges of the four disjoint data splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub vae_train: Range<usize>,
    pub vae_val: Range<usize>,
    pub calibration: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Sequential 800/200/500/1000 out of 2500, scaled proportionally for other `n`.
    pub fn proportional(n: usize) -> Self {
        let cut = |num: usize| (n * num + 1250) / 2500;
        let (a, b, c) = (cut(800), cut(1000), cut(1500));
        Self {
            vae_train: 0..a,
            vae_val: a..b,
            calibration: b..c,
            test: c..n,
        }
    }

    pub fn total(&self) -> usize {
        self.test.end
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let ok = self.vae_train.start == 0
            && self.vae_train.end == self.vae_val.start
            && self.vae_val.end == self.calibration.start
            && self.calibration.end == self.test.start
            && self.test.end == n
            && [
                &self.vae_train,
                &self.vae_val,
                &self.calibration,
                &self.test,
            ]
            .iter()
            .all(|r| r.start <= r.end);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "splits do not partition {n} rows"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandDataset {
    pub data: DenseMatrix,
    pub split: Splits,
}

impl DemandDataset {
    pub fn new(data: DenseMatrix, split: Splits) -> Result<Self> {
        split.validate(data.rows())?;
        Ok(Self { data, split })
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn rows(&self, range: &Range<usize>) -> DenseMatrix {
        let d = self.dim();
        DenseMatrix::from_row_major(
            range.len(),
            d,
            self.data.as_slice()[range.start * d..range.end * d].to_vec(),
        )
        .expect("range within dataset")
    }

    pub fn train(&self) -> DenseMatrix {
        self.rows(&self.split.vae_train)
    }

    pub fn val(&self) -> DenseMatrix {
        self.rows(&self.split.vae_val)
    }

    /// Training plus validation rows, i.e. everything the generative model sees.
    pub fn fit_rows(&self) -> DenseMatrix {
        self.rows(&(self.split.vae_train.start..self.split.vae_val.end))
    }

    pub fn calibration(&self) -> DenseMatrix {
        self.rows(&self.split.calibration)
    }

    pub fn test(&self) -> DenseMatrix {
        self.rows(&self.split.test)
    }
}

/// Draw `n` i.i.d. mixture samples and assign sequential splits.
pub fn sample_demands(params: &MixtureParams, n: usize, seed: u64) -> Result<DemandDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    params.validate()?;
    let d = params.dim();
    let factors = params
        .covariances
        .iter()
        .map(cholesky_psd)
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream(seed, "demands", &[]);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = params.weights.len() - 1;
        for (idx, w) in params.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = idx;
                break;
            }
        }
        // Skip zero-weight tail components if rounding left u ≥ acc.
        while params.weights[k] == 0.0 && k > 0 {
            k -= 1;
        }
        let g: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let lg = factors[k].mul_vec(&g);
        data.extend(params.means[k].iter().zip(lg).map(|(m, v)| m + v));
    }
    DemandDataset::new(
        DenseMatrix::from_row_major(n, d, data)?,
        Splits::proportional(n),
    )
}

/// Random production-distribution instance.
///
/// Each facility row of shipping costs is drawn uniformly from the open ball
/// of radius 1.5 around `d̄_i·1`, with `d̄_i ~ U(2, 22)`.
pub fn sample_instance_params(n_facilities: usize, n_destinations: usize, seed: u64) -> Instance {
    assert!(n_facilities >= 1 && n_destinations >= 1);
    let mut rng = stream(seed, "instance", &[]);
    let mut d1 = DenseMatrix::zeros(n_facilities, n_destinations);
    for i in 0..n_facilities {
        let center: f64 = rng.random_range(2.0..22.0);
        let offset = sample_uniform_ball(&mut rng, n_destinations, SHIP_COST_BALL_RADIUS);
        for (dst, o) in d1.row_mut(i).iter_mut().zip(offset) {
            *dst = center + o;
        }
    }
    let p = (0..n_facilities)
        .map(|_| rng.random_range(8.0..18.0))
        .collect();
    let c = (0..n_facilities)
        .map(|_| rng.random_range(2.0..4.0))
        .collect();
    Instance::new(c, d1, UNMET_DEMAND_COST, p).expect("generated instance is valid")
}

/// Everything a trial needs, derived from one root seed.
#[derive(Debug, Clone)]
pub struct GeneratedProblem {
    pub instance: Instance,
    pub mixture: MixtureParams,
    pub dataset: DemandDataset,
}

pub fn generate_problem(
    n_facilities: usize,
    n_destinations: usize,
    n_samples: usize,
    seed: u64,
) -> Result<GeneratedProblem> {
    let mixture = sample_mixture_params(n_destinations, derive_seed(seed, "params", &[]));
    let dataset = sample_demands(&mixture, n_samples, derive_seed(seed, "demands", &[]))?;
    let instance = sample_instance_params(
        n_facilities,
        n_destinations,
        derive_seed(seed, "instance", &[]),
    );
    Ok(GeneratedProblem {
        instance,
        mixture,
        dataset,
    })
}
