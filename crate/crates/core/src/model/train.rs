//! Stream-order training with Dice loss and AdamW.
//!
//! Each epoch visits the training videos in a seeded order and streams every
//! video from its first frame, so both memories hold what inference would
//! hold. A seeded subset of frames with a full local clip are training
//! targets; the rest only advance the memories.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, StreamState};
use crate::blocks::{dice_loss, Ctx, ParamStore};
use crate::data::{Mask, VideoSample};
use crate::error::{Error, Result};
use crate::memory::Calibration;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Target frames per optimizer step.
    pub batch_size: usize,
    /// Target frames drawn from each video per epoch.
    pub clips_per_video: usize,
    /// Fraction of epochs after which the learning rate drops.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    /// Reset `alpha` and `beta` to the epoch's mean `r` and `s` after every
    /// epoch (models reading the global memory only).
    pub recalibrate: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 4,
            clips_per_video: 8,
            lr_drop_at: 0.7,
            lr_drop_factor: 0.1,
            recalibrate: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("adam_eps", self.adam_eps), ("lr_drop_factor", self.lr_drop_factor)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return Err(Error::Config(format!("lr_drop_at must lie in [0, 1], got {}", self.lr_drop_at)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.clips_per_video == 0 {
            return Err(Error::Config("epochs, batch_size and clips_per_video must be positive".into()));
        }
        Ok(())
    }

    /// First epoch index (from 0) trained at the reduced rate.
    pub fn drop_epoch(&self) -> usize {
        (self.lr_drop_at * self.epochs as f64).round() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch() {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: ParamStore<T>,
    v: ParamStore<T>,
    steps: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        AdamW {
            m: zero_grads(params),
            v: zero_grads(params),
            steps: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// `p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) -> Result<()> {
        self.steps += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.steps));
        let c2 = T::of(1.0 - self.beta2.powi(self.steps));
        let (lr, eps, wd) = (T::of(lr), T::of(self.eps), T::of(self.weight_decay));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::Contract(format!("no gradient slot for {name}")))?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::Contract(format!("no moment for {name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::Contract(format!("no moment for {name}")))?;
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in iter {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p;
                *p -= lr * update;
            }
        }
        Ok(())
    }
}

fn zero_grads<T: Scalar>(params: &ParamStore<T>) -> ParamStore<T> {
    let mut z = ParamStore::new();
    for (name, t) in params.iter() {
        z.insert(name, Tensor::zeros(t.shape()));
    }
    z
}

fn norm_report<T: Scalar>(params: &ParamStore<T>) -> String {
    let mut norms: Vec<(f64, &String)> = params.iter().map(|(n, t)| (t.norm_sq().sqrt(), n)).collect();
    norms.sort_by(|a, b| b.0.total_cmp(&a.0));
    norms.iter().take(3).map(|(v, n)| format!("{n}={v:.4e}")).collect::<Vec<_>>().join(", ")
}

impl<T: Scalar> Model<T> {
    /// Loss and gradient for the next frame of `state`, added into `grads`.
    /// The memories then take the frame as inference would.
    pub fn accumulate_gradient(
        &self,
        state: &mut StreamState<T>,
        img: &Tensor<T>,
        target: &Mask,
        grads: &mut ParamStore<T>,
    ) -> Result<f64> {
        let onehot = target.one_hot::<T>(self.config.classes)?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.params);
        let fw = self.forward(&mut cx, state, img)?;
        let loss = dice_loss(cx.g, fw.probs, &onehot)?;
        let bound = cx.bound().clone();
        let value = g.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at frame {}; largest parameter norms: {}",
                state.frame_index(),
                norm_report(&self.params)
            )));
        }
        let probs = g.value(fw.probs).clone();
        let feature = g.value(fw.feature).clone();
        let mut gr = g.backward(loss)?;
        for (name, var) in bound {
            if let (Some(d), Some(acc)) = (gr.take(var), grads.get_mut(&name)) {
                for (a, &d) in acc.data_mut().iter_mut().zip(d.data()) {
                    *a += d;
                }
            }
        }
        self.commit(state, feature, &probs)?;
        Ok(value)
    }

    /// One optimizer step on a single target frame.
    pub fn train_step(
        &mut self,
        state: &mut StreamState<T>,
        img: &Tensor<T>,
        target: &Mask,
        opt: &mut AdamW<T>,
        lr: f64,
    ) -> Result<f64> {
        let mut grads = zero_grads(&self.params);
        let loss = self.accumulate_gradient(state, img, target, &mut grads)?;
        opt.step(&mut self.params, &grads, lr)?;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
    pub val_miou: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
}

/// Trains in place. `on_epoch` sees each epoch's log row as it completes.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let tau = model.config.tau;
    if train_set.iter().all(|v| v.len() <= tau) {
        return Err(Error::Config(format!("no training video is longer than tau = {tau} frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut grads = zero_grads(&model.params);
    let mut state = model.new_stream()?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut targets, mut pending) = (0.0, 0usize, 0usize);
        let mut stats = Calibration::new();
        for &vi in &order {
            let video = &train_set[vi];
            if video.len() <= tau {
                continue;
            }
            let span = video.len() - tau;
            let mut picks: Vec<usize> =
                index::sample(&mut rng, span, cfg.clips_per_video.min(span)).into_iter().map(|i| i + tau).collect();
            picks.sort_unstable();
            state.reset();
            state.begin(&format!("train video {vi}"))?;
            let mut next = 0;
            for (t, (frame, mask)) in video.frames.iter().zip(&video.masks).enumerate() {
                if next == picks.len() {
                    break;
                }
                let img = frame.cast();
                if t == picks[next] {
                    let loss = model.accumulate_gradient(&mut state, &img, mask, &mut grads).map_err(|e| match e {
                        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, video {vi}: {m}")),
                        other => other,
                    })?;
                    loss_sum += loss;
                    targets += 1;
                    pending += 1;
                    next += 1;
                    if pending == cfg.batch_size {
                        apply(&mut opt, model, &mut grads, pending, lr)?;
                        pending = 0;
                    }
                } else {
                    model.observe_frame(&mut state, &img)?;
                }
            }
            stats.merge(&state.stats);
        }
        if pending > 0 {
            apply(&mut opt, model, &mut grads, pending, lr)?;
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}: {}", norm_report(&model.params))));
        }
        if cfg.recalibrate && model.config.use_aga {
            if let Ok((alpha, beta)) = stats.finish() {
                model.config.alpha = alpha;
                model.config.beta = beta;
                state = model.new_stream()?;
            }
        }
        let val_miou = if val_set.is_empty() { None } else { Some(model.evaluate(val_set, false)?.miou) };
        let row = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / targets.max(1) as f64,
            steps: targets,
            val_miou,
            alpha: model.config.alpha,
            beta: model.config.beta,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(log)
}

fn apply<T: Scalar>(
    opt: &mut AdamW<T>,
    model: &mut Model<T>,
    grads: &mut ParamStore<T>,
    batch: usize,
    lr: f64,
) -> Result<()> {
    let scale = T::one() / T::of(batch as f64);
    for (_, g) in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    opt.step(&mut model.params, grads, lr)?;
    for (_, g) in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
    Ok(())
}
