use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Layer, Mlp, MlpTrace};
use super::train::{TrainingRecord, VaeConfig};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const MODEL_VERSION: u32 = 1;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Per-dimension z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics per column; a constant column gets unit scale.
    pub fn fit(data: &DenseMatrix) -> Result<Self> {
        let n = data.rows();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "cannot fit a standardizer on zero rows".into(),
            ));
        }
        let d = data.cols();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            crate::linalg::axpy(1.0 / n as f64, data.row(i), &mut mean);
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (k, v) in data.row(i).iter().enumerate() {
                var[k] += (v - mean[k]).powi(2) / n as f64;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, xi: &[f64]) -> Vec<f64> {
        xi.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((u, m), s)| m + s * u)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.std.len() != self.mean.len() {
            return Err(Error::Dimension(
                "standardizer mean and std lengths differ".into(),
            ));
        }
        if self.mean.iter().any(|v| !v.is_finite())
            || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::InvalidArgument(
                "standardizer needs finite means and positive scales".into(),
            ));
        }
        Ok(())
    }
}

/// `KL(N(m, diag(exp(logvar))) ‖ N(0, I))`.
pub fn kl_divergence(mean: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Encoder trunk with mean and log-variance heads, decoder, and the data
/// standardizer. Parameters are only mutable through methods that invalidate
/// outstanding [`DecodeCache`]s.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct VaeModel {
    encoder: Mlp,
    mean_head: Layer,
    logvar_head: Layer,
    decoder: Mlp,
    standardizer: Standardizer,
    config: Option<VaeConfig>,
    training: Option<TrainingRecord>,
    id: u64,
}

impl PartialEq for VaeModel {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder
            && self.mean_head == other.mean_head
            && self.logvar_head == other.logvar_head
            && self.decoder == other.decoder
            && self.standardizer == other.standardizer
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRepr {
    version: u32,
    input_dim: usize,
    latent_dim: usize,
    encoder: Mlp,
    mean_head: Layer,
    logvar_head: Layer,
    decoder: Mlp,
    standardizer: Standardizer,
    #[serde(default)]
    config: Option<VaeConfig>,
    #[serde(default)]
    training: Option<TrainingRecord>,
}

impl TryFrom<ModelRepr> for VaeModel {
    type Error = Error;
    fn try_from(r: ModelRepr) -> Result<Self> {
        if r.version != MODEL_VERSION {
            return Err(Error::Parse(format!(
                "unsupported model version {}",
                r.version
            )));
        }
        let mut m = VaeModel::from_parts(
            r.encoder,
            r.mean_head,
            r.logvar_head,
            r.decoder,
            r.standardizer,
        )?;
        if m.input_dim() != r.input_dim || m.latent_dim() != r.latent_dim {
            return Err(Error::Dimension(
                "declared model dimensions do not match the layers".into(),
            ));
        }
        m.config = r.config;
        m.training = r.training;
        Ok(m)
    }
}

impl From<VaeModel> for ModelRepr {
    fn from(m: VaeModel) -> Self {
        ModelRepr {
            version: MODEL_VERSION,
            input_dim: m.input_dim(),
            latent_dim: m.latent_dim(),
            encoder: m.encoder,
            mean_head: m.mean_head,
            logvar_head: m.logvar_head,
            decoder: m.decoder,
            standardizer: m.standardizer,
            config: m.config,
            training: m.training,
        }
    }
}

/// Decoder activations at one latent point, tied to the model that made them.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    model_id: u64,
    pub(crate) trace: MlpTrace,
}

/// Encoder activations for one standardized input.
#[derive(Debug, Clone)]
pub(crate) struct EncodeTrace {
    pub trunk: MlpTrace,
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
    pub mean_pre: Vec<f64>,
    pub logvar_pre: Vec<f64>,
}

impl VaeModel {
    pub fn from_parts(
        encoder: Mlp,
        mean_head: Layer,
        logvar_head: Layer,
        decoder: Mlp,
        standardizer: Standardizer,
    ) -> Result<Self> {
        encoder.validate()?;
        decoder.validate()?;
        standardizer.validate()?;
        let d = standardizer.dim();
        let h = encoder.output_dim();
        let l = mean_head.outputs();
        if encoder.input_dim() != d || decoder.output_dim() != d {
            return Err(Error::Dimension(format!(
                "encoder input {} and decoder output {} must both equal the data dimension {d}",
                encoder.input_dim(),
                decoder.output_dim()
            )));
        }
        if mean_head.inputs() != h
            || logvar_head.inputs() != h
            || logvar_head.outputs() != l
            || decoder.input_dim() != l
        {
            return Err(Error::Dimension(
                "encoder heads and decoder input must agree on the latent dimension".into(),
            ));
        }
        Ok(Self {
            encoder,
            mean_head,
            logvar_head,
            decoder,
            standardizer,
            config: None,
            training: None,
            id: fresh_id(),
        })
    }

    /// Fresh random network `D → H → H → (L, L)` and `L → H → H → D`.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        standardizer: Standardizer,
        latent_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        if latent_dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "latent and hidden widths must be positive".into(),
            ));
        }
        let d = standardizer.dim();
        let encoder = Mlp::init(rng, &[d, hidden, hidden]);
        // `Mlp::init` leaves the last layer affine; the trunk needs ReLU throughout.
        let encoder = Mlp {
            layers: encoder
                .layers
                .into_iter()
                .map(|mut l| {
                    l.activation = super::Activation::Relu;
                    l
                })
                .collect(),
        };
        let mean_head = Layer::init(rng, hidden, latent_dim, super::Activation::Identity);
        let logvar_head = Layer::init(rng, hidden, latent_dim, super::Activation::Identity);
        let decoder = Mlp::init(rng, &[latent_dim, hidden, hidden, d]);
        Self::from_parts(encoder, mean_head, logvar_head, decoder, standardizer)
    }

    pub fn input_dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.outputs()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn config(&self) -> Option<&VaeConfig> {
        self.config.as_ref()
    }

    pub fn training(&self) -> Option<&TrainingRecord> {
        self.training.as_ref()
    }

    pub(crate) fn set_training(&mut self, config: VaeConfig, record: TrainingRecord) {
        self.config = Some(config);
        self.training = Some(record);
    }

    /// Layers in a fixed order: encoder trunk, mean head, log-variance head, decoder.
    pub(crate) fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.encoder.layers.iter().collect();
        v.push(&self.mean_head);
        v.push(&self.logvar_head);
        v.extend(self.decoder.layers.iter());
        v
    }

    /// Mutable view of every layer; invalidates caches.
    pub(crate) fn layers_mut(&mut self) -> Vec<&mut Layer> {
        self.id = fresh_id();
        let mut v: Vec<&mut Layer> = self.encoder.layers.iter_mut().collect();
        v.push(&mut self.mean_head);
        v.push(&mut self.logvar_head);
        v.extend(self.decoder.layers.iter_mut());
        v
    }

    pub(crate) fn encode_standardized(&self, u: &[f64]) -> EncodeTrace {
        let trunk = self.encoder.forward_cached(u);
        let (mean_pre, mean) = self.mean_head.forward(&trunk.output);
        let (logvar_pre, logvar) = self.logvar_head.forward(&trunk.output);
        EncodeTrace {
            trunk,
            mean,
            logvar,
            mean_pre,
            logvar_pre,
        }
    }

    /// Posterior mean of the latent code.
    pub fn encode(&self, xi: &[f64]) -> Result<Vec<f64>> {
        self.check_input(xi)?;
        Ok(self.encode_standardized(&self.standardizer.apply(xi)).mean)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        Ok(self.standardizer.invert(&self.decoder.forward(z)))
    }

    pub fn decode_cached(&self, z: &[f64]) -> Result<(Vec<f64>, DecodeCache)> {
        self.check_latent(z)?;
        let trace = self.decoder.forward_cached(z);
        let xi = self.standardizer.invert(&trace.output);
        Ok((
            xi,
            DecodeCache {
                model_id: self.id,
                trace,
            },
        ))
    }

    /// `upstreamᵀ · ∂decode/∂z` at the cached point.
    pub fn decoder_vjp(&self, cache: &DecodeCache, upstream: &[f64]) -> Result<Vec<f64>> {
        if cache.model_id != self.id {
            return Err(Error::StaleCache);
        }
        if upstream.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "upstream has length {}, expected {}",
                upstream.len(),
                self.input_dim()
            )));
        }
        let scaled: Vec<f64> = upstream
            .iter()
            .zip(&self.standardizer.std)
            .map(|(g, s)| g * s)
            .collect();
        Ok(self.decoder.backward(&cache.trace, &scaled, None))
    }

    fn check_input(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {}, expected {}",
                xi.len(),
                self.input_dim()
            )));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("input must be finite".into()));
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "latent has length {}, expected {}",
                z.len(),
                self.latent_dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent point must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::neuralgen::Activation;
    use crate::rng::stream;
    use proptest::prelude::{prop_assert, proptest};

    pub(crate) fn linear_layer(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Layer {
        Layer {
            weight: DenseMatrix::from_rows(&rows).unwrap(),
            bias,
            activation: Activation::Identity,
        }
    }

    /// Encoder `ξ ↦ ξ` with unit variance, decoder given by `decoder`.
    pub(crate) fn model_with_decoder(decoder: Mlp, standardizer: Standardizer) -> VaeModel {
        let d = standardizer.dim();
        let l = decoder.input_dim();
        let eye = |n: usize, m: usize| {
            (0..n)
                .map(|i| (0..m).map(|j| f64::from(i == j)).collect())
                .collect()
        };
        let encoder = Mlp {
            layers: vec![linear_layer(eye(d, d), vec![0.0; d])],
        };
        VaeModel::from_parts(
            encoder,
            linear_layer(eye(l, d), vec![0.0; l]),
            linear_layer(vec![vec![0.0; d]; l], vec![0.0; l]),
            decoder,
            standardizer,
        )
        .unwrap()
    }

    fn random_model(seed: u64, d: usize, l: usize, h: usize) -> VaeModel {
        let mut rng = stream(seed, "test-model", &[]);
        let std = Standardizer {
            mean: (0..d).map(|k| k as f64).collect(),
            std: (0..d).map(|k| 1.0 + k as f64).collect(),
        };
        VaeModel::init(&mut rng, std, l, h).unwrap()
    }

    #[test]
    fn identity_decoder_decodes_and_pulls_back_identically() {
        let m = model_with_decoder(
            Mlp {
                layers: vec![linear_layer(
                    vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    vec![0.0, 0.0],
                )],
            },
            Standardizer::identity(2),
        );
        let (xi, cache) = m.decode_cached(&[0.3, -2.0]).unwrap();
        assert_eq!(xi, vec![0.3, -2.0]);
        assert_eq!(m.decoder_vjp(&cache, &[1.5, 4.0]).unwrap(), vec![1.5, 4.0]);
    }

    #[test]
    fn linear_decoder_vjp_is_scaled_transpose() {
        let w = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let std = Standardizer {
            mean: vec![1.0, 1.0, 1.0],
            std: vec![2.0, 0.5, 1.0],
        };
        let m = model_with_decoder(
            Mlp {
                layers: vec![linear_layer(w, vec![0.1, 0.2, 0.3])],
            },
            std,
        );
        let (_, cache) = m.decode_cached(&[0.0, 0.0]).unwrap();
        // Wᵀ (s ⊙ u) with u = (1, 2, 3), s ⊙ u = (2, 1, 3).
        assert_eq!(
            m.decoder_vjp(&cache, &[1.0, 2.0, 3.0]).unwrap(),
            vec![2.0 + 3.0 + 15.0, 4.0 + 4.0 + 18.0]
        );
        // decode(0) is the de-standardized bias.
        assert_eq!(
            m.decode(&[0.0, 0.0]).unwrap(),
            vec![1.0 + 0.2, 1.0 + 0.1, 1.3]
        );
    }

    #[test]
    fn stale_cache_rejected() {
        let m = random_model(3, 2, 1, 4);
        let (_, cache) = m.decode_cached(&[0.2]).unwrap();
        let other = random_model(4, 2, 1, 4);
        assert!(matches!(
            other.decoder_vjp(&cache, &[1.0, 1.0]),
            Err(Error::StaleCache)
        ));
        let mut changed = m.clone();
        changed.layers_mut()[0].bias[0] += 1.0;
        assert!(matches!(
            changed.decoder_vjp(&cache, &[1.0, 1.0]),
            Err(Error::StaleCache)
        ));
        assert!(m.decoder_vjp(&cache, &[1.0, 1.0]).is_ok());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = random_model(5, 3, 2, 8);
        let a = m.encode(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, m.encode(&[1.0, 2.0, 3.0]).unwrap());
        assert_eq!(m.decode(&a).unwrap().len(), 3);
        assert!(m.encode(&[1.0, 2.0]).is_err());
        assert!(m.decode(&[f64::NAN, 0.0]).is_err());
    }

    /// Relative error of the VJP against central differences of `uᵀ decode(z)`.
    fn vjp_error(m: &VaeModel, z: &[f64], u: &[f64]) -> Option<f64> {
        let (_, cache) = m.decode_cached(z).unwrap();
        // Skip points within reach of a ReLU kink.
        let h = 1e-6;
        let near_kink = cache
            .trace
            .pre
            .iter()
            .take(cache.trace.pre.len() - 1)
            .flatten()
            .any(|p| p.abs() < 1e-4);
        if near_kink {
            return None;
        }
        let g = m.decoder_vjp(&cache, u).unwrap();
        let f = |z: &[f64]| crate::linalg::dot(&m.decode(z).unwrap(), u);
        let fd: Vec<f64> = (0..z.len())
            .map(|k| {
                let mut p = z.to_vec();
                p[k] += h;
                let mut q = z.to_vec();
                q[k] -= h;
                (f(&p) - f(&q)) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = fd.iter().zip(&g).map(|(a, b)| a - b).collect();
        Some(crate::linalg::norm2(&diff) / crate::linalg::norm2(&g).max(1e-8))
    }

    #[test]
    fn vjp_matches_finite_differences_on_random_models() {
        let mut rng = stream(11, "vjp-triples", &[]);
        let mut checked = 0;
        for t in 0..100u64 {
            let d = rng.random_range(1..5);
            let l = rng.random_range(1..4);
            let m = random_model(100 + t, d, l, 6);
            let z: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Some(err) = vjp_error(&m, &z, &u) {
                assert!(err <= 1e-5, "triple {t}: relative error {err}");
                checked += 1;
            }
        }
        assert!(checked >= 80, "only {checked} triples away from kinks");
    }

    #[test]
    fn decode_is_exactly_linear_within_a_cell() {
        let m = random_model(21, 3, 2, 16);
        let mut rng = stream(22, "cells", &[]);
        for _ in 0..50 {
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let dir: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let at = |t: f64| m.decode(&[z[0] + t * dir[0], z[1] + t * dir[1]]).unwrap();
            let pre_pattern = |t: f64| {
                let trace = m
                    .decoder()
                    .forward_cached(&[z[0] + t * dir[0], z[1] + t * dir[1]]);
                trace
                    .pre
                    .iter()
                    .flatten()
                    .map(|p| *p > 0.0)
                    .collect::<Vec<_>>()
            };
            let (h1, h2) = (1e-3, 2e-3);
            // Cells are convex, so equal patterns at both ends cover the segment.
            if pre_pattern(0.0) != pre_pattern(h2) {
                continue;
            }
            let base = at(0.0);
            let (a, b) = (at(h1), at(h2));
            for k in 0..3 {
                let s1 = (a[k] - base[k]) / h1;
                let s2 = (b[k] - base[k]) / h2;
                assert!((s1 - s2).abs() <= 1e-10 * s1.abs().max(1.0), "{s1} vs {s2}");
            }
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = random_model(31, 2, 1, 4);
        let text = serde_json::to_string(&m).unwrap();
        let back: VaeModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.decode(&[0.4]).unwrap(), m.decode(&[0.4]).unwrap());

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["version"] = 2.into();
        assert!(serde_json::from_value::<VaeModel>(v.clone()).is_err());
        v["version"] = 1.into();
        v["latent_dim"] = 3.into();
        assert!(serde_json::from_value::<VaeModel>(v.clone()).is_err());
        v["latent_dim"] = 1.into();
        v["standardizer"]["std"][0] = 0.0.into();
        assert!(serde_json::from_value::<VaeModel>(v).is_err());
    }

    #[test]
    fn kl_zero_only_at_standard_normal() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(kl_divergence(&[0.1, 0.0], &[0.0, 0.0]) > 0.0);
        assert!(kl_divergence(&[0.0], &[0.2]) > 0.0);
        // Closed form for one dimension: ½(m² + s² − ln s² − 1).
        let (m, s2) = (0.7f64, 2.5f64);
        assert!(
            (kl_divergence(&[m], &[s2.ln()]) - 0.5 * (m * m + s2 - s2.ln() - 1.0)).abs() < 1e-15
        );
    }

    proptest! {
        #[test]
        fn kl_nonnegative(m in proptest::collection::vec(-5.0..5.0f64, 1..5), lv in proptest::collection::vec(-5.0..5.0f64, 5)) {
            let lv = &lv[..m.len()];
            prop_assert!(kl_divergence(&m, lv) >= 0.0);
        }

        #[test]
        fn standardizer_round_trips(x in proptest::collection::vec(-1e3..1e3f64, 3), mean in proptest::collection::vec(-10.0..10.0f64, 3), std in proptest::collection::vec(0.1..10.0f64, 3)) {
            let s = Standardizer { mean, std };
            let back = s.invert(&s.apply(&x));
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
