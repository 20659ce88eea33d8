use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::LayerGrad;
use super::model::{kl_divergence, Standardizer, VaeModel};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::probgen::standard_normal;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight on the KL term.
    pub beta: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden_width: 64,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            beta: 0.1,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_width == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "latent_dim, hidden_width and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument("beta must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when the initialization was never beaten.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Loss on one standardized row and, when `grads` is given, its gradient.
fn sample_loss(
    model: &VaeModel,
    u: &[f64],
    noise: &[f64],
    beta: f64,
    grads: Option<&mut [LayerGrad]>,
) -> f64 {
    let enc = model.encode_standardized(u);
    let z: Vec<f64> = enc
        .mean
        .iter()
        .zip(&enc.logvar)
        .zip(noise)
        .map(|((m, lv), g)| m + (0.5 * lv).exp() * g)
        .collect();
    let dec = model.decoder().forward_cached(&z);
    let d = u.len() as f64;
    let recon: f64 = dec
        .output
        .iter()
        .zip(u)
        .map(|(o, x)| (o - x).powi(2))
        .sum::<f64>()
        / d;
    let loss = recon + beta * kl_divergence(&enc.mean, &enc.logvar);
    let Some(grads) = grads else {
        return loss;
    };

    let n_enc = model.encoder().layers.len();
    let (enc_grads, rest) = grads.split_at_mut(n_enc);
    let (head_grads, dec_grads) = rest.split_at_mut(2);
    let g_out: Vec<f64> = dec
        .output
        .iter()
        .zip(u)
        .map(|(o, x)| 2.0 * (o - x) / d)
        .collect();
    let g_z = model.decoder().backward(&dec, &g_out, Some(dec_grads));
    let g_mean: Vec<f64> = g_z
        .iter()
        .zip(&enc.mean)
        .map(|(gz, m)| gz + beta * m)
        .collect();
    let g_logvar: Vec<f64> = g_z
        .iter()
        .zip(&enc.logvar)
        .zip(noise)
        .map(|((gz, lv), g)| gz * g * 0.5 * (0.5 * lv).exp() + beta * 0.5 * (lv.exp() - 1.0))
        .collect();
    let layers = model.layers();
    let (mean_head, logvar_head) = (layers[n_enc], layers[n_enc + 1]);
    let (hm, hl) = head_grads.split_at_mut(1);
    let mut g_h = mean_head.backward(&enc.trunk.output, &enc.mean_pre, &g_mean, Some(&mut hm[0]));
    let g_h2 = logvar_head.backward(
        &enc.trunk.output,
        &enc.logvar_pre,
        &g_logvar,
        Some(&mut hl[0]),
    );
    crate::linalg::axpy(1.0, &g_h2, &mut g_h);
    model.encoder().backward(&enc.trunk, &g_h, Some(enc_grads));
    loss
}

fn draw_noise<R: Rng + ?Sized>(rng: &mut R, l: usize) -> Vec<f64> {
    (0..l).map(|_| standard_normal(rng)).collect()
}

/// Mean loss over rows with fixed per-row noise.
fn mean_loss(model: &VaeModel, rows: &[Vec<f64>], noise: &[Vec<f64>], beta: f64) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter()
        .zip(noise)
        .map(|(u, g)| sample_loss(model, u, g, beta, None))
        .sum::<f64>()
        / rows.len() as f64
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut VaeModel, grads: &[LayerGrad], scale: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut idx = 0;
        for (layer, g) in model.layers_mut().into_iter().zip(grads) {
            let params = layer
                .weight
                .as_mut_slice()
                .iter_mut()
                .chain(layer.bias.iter_mut());
            for (p, gv) in params.zip(g.flat()) {
                let gv = gv * scale;
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                *m = Self::B1 * *m + (1.0 - Self::B1) * gv;
                *v = Self::B2 * *v + (1.0 - Self::B2) * gv * gv;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                idx += 1;
            }
        }
    }
}

/// Minibatch training with the reparameterized ELBO-style loss
/// `‖u − dec(z̃)‖²/D + β·KL` on standardized rows. The standardizer is fit on
/// `train` only. Returns the parameters with the lowest validation loss.
pub fn train_vae(train: &DenseMatrix, val: &DenseMatrix, config: &VaeConfig) -> Result<VaeModel> {
    config.validate()?;
    if train.rows() == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if val.rows() > 0 && val.cols() != train.cols() {
        return Err(Error::Dimension(
            "validation and training dimensions differ".into(),
        ));
    }
    let standardizer = Standardizer::fit(train)?;
    let mut init_rng = stream(config.seed, "vae-init", &[]);
    let mut model = VaeModel::init(
        &mut init_rng,
        standardizer,
        config.latent_dim,
        config.hidden_width,
    )?;
    let l = config.latent_dim;

    let train_rows: Vec<Vec<f64>> = (0..train.rows())
        .map(|i| model.standardizer().apply(train.row(i)))
        .collect();
    let val_rows: Vec<Vec<f64>> = (0..val.rows())
        .map(|i| model.standardizer().apply(val.row(i)))
        .collect();
    // Validation uses the same noise every epoch so losses are comparable.
    let mut val_rng = stream(config.seed, "vae-val-noise", &[]);
    let val_noise: Vec<Vec<f64>> = (0..val_rows.len())
        .map(|_| draw_noise(&mut val_rng, l))
        .collect();
    let (sel_rows, sel_noise) = if val_rows.is_empty() {
        let mut r = stream(config.seed, "vae-val-noise", &[1]);
        let noise = (0..train_rows.len())
            .map(|_| draw_noise(&mut r, l))
            .collect();
        (&train_rows, noise)
    } else {
        (&val_rows, val_noise)
    };

    let initial_val_loss = mean_loss(&model, sel_rows, &sel_noise, config.beta);
    let mut best = model.clone();
    let mut best_loss = initial_val_loss;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(config.epochs);

    let n_params: usize = model.layers().iter().map(|l| l.n_params()).sum();
    let mut adam = Adam::new(config.learning_rate, n_params);
    let mut rng = stream(config.seed, "vae-train", &[]);
    let mut order: Vec<usize> = (0..train_rows.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads: Vec<LayerGrad> = model
                .layers()
                .into_iter()
                .map(LayerGrad::zeros_like)
                .collect();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let noise = draw_noise(&mut rng, l);
                batch_loss += sample_loss(
                    &model,
                    &train_rows[i],
                    &noise,
                    config.beta,
                    Some(&mut grads),
                );
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            total += batch_loss;
            adam.step(&mut model, &grads, 1.0 / chunk.len() as f64);
        }
        let train_loss = total / train_rows.len() as f64;
        let val_loss = mean_loss(&model, sel_rows, &sel_noise, config.beta);
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = model.clone();
        }
    }

    best.set_training(
        config.clone(),
        TrainingRecord {
            initial_val_loss,
            epochs,
            best_epoch,
            best_val_loss: best_loss,
        },
    );
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probgen::{sample_demands, sample_mixture_params};

    fn small_data(seed: u64) -> (DenseMatrix, DenseMatrix) {
        let params = sample_mixture_params(2, seed);
        let ds = sample_demands(&params, 300, seed).unwrap();
        (ds.rows(&(0..200)), ds.rows(&(200..300)))
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (train, _) = small_data(1);
        let mut rng = stream(2, "grad", &[]);
        let model = VaeModel::init(&mut rng, Standardizer::fit(&train).unwrap(), 2, 5).unwrap();
        let u = model.standardizer().apply(train.row(0));
        let noise = [0.4, -1.1];
        let beta = 0.7;
        let mut grads: Vec<LayerGrad> = model
            .layers()
            .into_iter()
            .map(LayerGrad::zeros_like)
            .collect();
        sample_loss(&model, &u, &noise, beta, Some(&mut grads));
        let h = 1e-6;
        let n_layers = model.layers().len();
        for k in 0..n_layers {
            let (rows, cols) = (grads[k].weight.rows(), grads[k].weight.cols());
            for i in 0..rows {
                for j in 0..cols.min(3) {
                    let mut p = model.clone();
                    p.layers_mut()[k].weight[(i, j)] += h;
                    let mut m = model.clone();
                    m.layers_mut()[k].weight[(i, j)] -= h;
                    let fd = (sample_loss(&p, &u, &noise, beta, None)
                        - sample_loss(&m, &u, &noise, beta, None))
                        / (2.0 * h);
                    let g = grads[k].weight[(i, j)];
                    assert!(
                        (fd - g).abs() <= 1e-5 * g.abs().max(1.0),
                        "layer {k} ({i},{j}): {fd} vs {g}"
                    );
                }
                let mut p = model.clone();
                p.layers_mut()[k].bias[i] += h;
                let mut m = model.clone();
                m.layers_mut()[k].bias[i] -= h;
                let fd = (sample_loss(&p, &u, &noise, beta, None)
                    - sample_loss(&m, &u, &noise, beta, None))
                    / (2.0 * h);
                assert!(
                    (fd - grads[k].bias[i]).abs() <= 1e-5 * fd.abs().max(1.0),
                    "layer {k} bias {i}"
                );
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (train, val) = small_data(3);
        let cfg = VaeConfig {
            epochs: 0,
            hidden_width: 8,
            seed: 9,
            ..Default::default()
        };
        let trained = train_vae(&train, &val, &cfg).unwrap();
        let mut rng = stream(9, "vae-init", &[]);
        let init = VaeModel::init(&mut rng, Standardizer::fit(&train).unwrap(), 2, 8).unwrap();
        assert_eq!(trained, init);
        let rec = trained.training().unwrap();
        assert!(rec.epochs.is_empty());
        assert_eq!(rec.best_epoch, 0);
    }

    #[test]
    fn seeded_training_is_deterministic_and_improves() {
        let (train, val) = small_data(4);
        let cfg = VaeConfig {
            epochs: 15,
            hidden_width: 16,
            seed: 5,
            ..Default::default()
        };
        let a = train_vae(&train, &val, &cfg).unwrap();
        let b = train_vae(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        let rec = a.training().unwrap();
        assert_eq!(rec.epochs.len(), 15);
        assert!(rec.best_val_loss < rec.initial_val_loss);
        assert_eq!(
            rec.best_val_loss,
            rec.epochs
                .iter()
                .map(|e| e.val_loss)
                .fold(rec.initial_val_loss, f64::min)
        );
    }

    #[test]
    fn non_finite_data_aborts_with_location() {
        let (train, val) = small_data(6);
        let cfg = VaeConfig {
            epochs: 2,
            hidden_width: 4,
            learning_rate: 1e300,
            ..Default::default()
        };
        match train_vae(&train, &val, &cfg) {
            Err(Error::NonFiniteLoss { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let (train, val) = small_data(7);
        assert!(train_vae(
            &train,
            &val,
            &VaeConfig {
                latent_dim: 0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(train_vae(
            &train,
            &val,
            &VaeConfig {
                beta: -1.0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
