use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Aenet;
use crate::error::{Error, Result};
use crate::ops::NormMode;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// First epoch of the halved learning rate.
    pub halve_epoch: usize,
    /// First epoch of the poly decay.
    pub poly_epoch: usize,
    pub poly_power: f64,
    /// Loss weights of the cell and background classes.
    pub class_weights: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 6e-4,
            max_epochs: 150,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            halve_epoch: 50,
            poly_epoch: 80,
            poly_power: 0.9,
            class_weights: [1.0, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "learning rate must be > 0, epochs and batch size >= 1",
            ));
        }
        if self.halve_epoch > self.poly_epoch {
            return Err(Error::invalid("halving must start before the poly phase"));
        }
        Ok(())
    }
}

/// Constant, then halved, then poly decay
/// `initial_lr · (1 − iter/total_iter)^poly_power`. `iter` and `total_iter`
/// count optimizer steps over the whole run.
pub fn lr_schedule(epoch: usize, iter: u64, total_iter: u64, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.halve_epoch {
        cfg.initial_lr
    } else if epoch < cfg.poly_epoch {
        cfg.initial_lr / 2.0
    } else {
        let progress = if total_iter == 0 {
            0.0
        } else {
            (iter as f64 / total_iter as f64).clamp(0.0, 1.0)
        };
        cfg.initial_lr * libm::pow(1.0 - progress, cfg.poly_power)
    }
}

/// Class-weighted mean pixel cross-entropy of `[N, 2, H, W]` logits against
/// labels in `{0 = cell, 1 = background}`. Returns the loss and its gradient
/// with respect to the logits.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    class_weights: [f64; 2],
) -> Result<(T, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4()?;
    if c != 2 || labels.len() != n * h * w {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("mask label {bad} outside {{0, 1}}")));
    }
    let hw = h * w;
    let weights = [T::from_f64(class_weights[0]), T::from_f64(class_weights[1])];
    let total_weight: T = labels.iter().map(|&l| weights[l as usize]).sum();
    if !(total_weight > T::zero()) {
        return Err(Error::invalid("class weights sum to zero over the batch"));
    }
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for b in 0..n {
        for i in 0..hw {
            let idx = [b * 2 * hw + i, b * 2 * hw + hw + i];
            let (z0, z1) = (logits[idx[0]], logits[idx[1]]);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let label = labels[b * hw + i] as usize;
            let wt = weights[label] / total_weight;
            loss += wt * (lse - logits[idx[label]]);
            for (k, &j) in idx.iter().enumerate() {
                let p = (logits[j] - lse).exp();
                let target = if k == label { T::one() } else { T::zero() };
                grad[j] = wt * (p - target);
            }
        }
    }
    Ok((loss, grad))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Applies one update to `params` in place. Moments are created lazily on
    /// the first call and must keep the same layout afterwards.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("parameter and gradient counts differ"));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::invalid(
                "optimizer state does not match the parameters",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 - libm::pow(self.beta1, t as f64));
        let c2 = T::from_f64(1.0 - libm::pow(self.beta2, t as f64));
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(lr);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.expect_same_shape(g, "adam")?;
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            m.expect_same_shape(g, "adam state")?;
            for j in 0..g.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn update_model(&mut self, model: &mut Aenet<T>, grads: &Aenet<T>, lr: f64) -> Result<()> {
        let g: Vec<&Tensor<T>> = grads.params().into_iter().map(|(_, t)| t).collect();
        let mut p: Vec<&mut Tensor<T>> = model.params_mut().into_iter().map(|(_, t)| t).collect();
        self.update(&mut p, &g, lr)
    }
}

/// One optimizer step on a batch. `images` is `[N, 3, H, W]`, `labels` holds
/// `N·H·W` mask values. Returns the batch loss; a non-finite loss aborts
/// before any parameter changes.
pub fn train_step<T: Scalar>(
    model: &mut Aenet<T>,
    optimizer: &mut Adam<T>,
    images: &Tensor<T>,
    labels: &[u8],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (logits, cache) = model.forward(images, NormMode::Train)?;
    let (loss, d_logits) = cross_entropy(&logits, labels, cfg.class_weights)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let (grads, _) = model.backward(&cache, &d_logits)?;
    for (_, g) in grads.params() {
        g.check_finite("gradients")?;
    }
    optimizer.update_model(model, &grads, lr)?;
    model.update_running_stats(&cache);
    Ok(loss.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_phases() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(10, 0, 100, &cfg), 0.0006);
        assert_eq!(lr_schedule(60, 0, 100, &cfg), 0.0003);
        assert_eq!(
            lr_schedule(49, 0, 100, &cfg),
            2.0 * lr_schedule(50, 0, 100, &cfg)
        );
        let expect = 0.0006 * libm::pow(0.5, 0.9);
        assert!((lr_schedule(100, 500, 1000, &cfg) - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::<f64>::full([1, 2, 2, 2], 0.3);
        for labels in [[0u8, 0, 0, 0], [1, 0, 1, 1]] {
            let (loss, _) = cross_entropy(&logits, &labels, [1.0, 1.0]).unwrap();
            assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_loss_vanishes() {
        let labels = [0u8, 1, 1, 0];
        let logits = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| {
            let (class, pix) = (i / 4, i % 4);
            if labels[pix] as usize == class {
                40.0
            } else {
                -40.0
            }
        });
        let (loss, _) = cross_entropy(&logits, &labels, [1.0, 1.0]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn loss_matches_pixel_enumeration() {
        let z = [0.3, -1.2, 2.0, 0.1, -0.4, 0.8, 1.1, -2.0];
        let logits = Tensor::<f64>::new([1, 2, 2, 2], z.to_vec()).unwrap();
        let labels = [0u8, 1, 1, 0];
        let (loss, _) = cross_entropy(&logits, &labels, [1.0, 1.0]).unwrap();
        let mut expect = 0.0;
        for i in 0..4 {
            let (a, b) = (z[i], z[4 + i]);
            let p = if labels[i] == 0 {
                libm::exp(a) / (libm::exp(a) + libm::exp(b))
            } else {
                libm::exp(b) / (libm::exp(a) + libm::exp(b))
            };
            expect -= libm::log(p);
        }
        assert!((loss - expect / 4.0).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 2, 0, 0], [1.0, 1.0]).is_err());
        assert!(cross_entropy(&logits, &[0, 1], [1.0, 1.0]).is_err());
    }

    #[test]
    fn adam_zero_lr_and_stationary_point() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::<f64>::new(&cfg);
        let mut p = Tensor::new([2], vec![1.5, -2.0]).unwrap();
        let g = Tensor::new([2], vec![0.3, 0.7]).unwrap();
        adam.update(&mut [&mut p], &[&g], 0.0).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);

        let mut adam = Adam::<f64>::new(&cfg);
        let mut p = Tensor::new([1], vec![4.0]).unwrap();
        let zero = Tensor::zeros([1]);
        adam.update(&mut [&mut p], &[&zero], 0.1).unwrap();
        assert_eq!(p.data(), &[4.0]);
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        // minimise (x - 1)^2 from x = 3 with lr 0.1
        let cfg = TrainConfig::default();
        let mut adam = Adam::<f64>::new(&cfg);
        let mut p = Tensor::new([1], vec![3.0]).unwrap();
        let (mut x, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (x - 1.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - libm::pow(0.9, t as f64));
            let vh = v / (1.0 - libm::pow(0.999, t as f64));
            x -= 0.1 * mh / (libm::sqrt(vh) + 1e-8);

            let grad = Tensor::new([1], vec![2.0 * (p[0] - 1.0)]).unwrap();
            adam.update(&mut [&mut p], &[&grad], 0.1).unwrap();
            assert!((p[0] - x).abs() < 1e-14, "step {t}");
        }
    }
}
