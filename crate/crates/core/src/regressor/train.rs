use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossConfig, Mode, Regressor, RegressorParams};
use crate::dataset::ImageBuffer;
use crate::error::{Error, Result};
use crate::sampling::{pair_rng, PairOutcome, PairSampler, Policy, TrainingPair};

/// Optimization schedule: step decay of the learning rate, and the switch of
/// normalization and dropout to eval behaviour after the first decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub eval_after_first_decay: bool,
    /// Before this epoch a synthetic view may take the query role.
    pub swap_until_epoch: Option<usize>,
    /// Brightness and contrast jitter amplitude (fraction).
    pub color_jitter: f64,
    pub seed: u64,
}

impl Schedule {
    pub fn full_scale() -> Self {
        Self {
            epochs: 1200,
            batch_size: 16,
            lr: 1e-4,
            decay_rate: 0.1,
            decay_every: 500,
            eval_after_first_decay: true,
            swap_until_epoch: Some(700),
            color_jitter: 0.05,
            seed: 0,
        }
    }

    /// 200 epochs, decay at 100; swap window scaled like 700/1200.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            decay_every: 100,
            swap_until_epoch: Some(117),
            ..Self::full_scale()
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    /// Same schedule shape over a different length: the decay point and the
    /// end of the swap window move proportionally.
    pub fn rescaled(self, epochs: usize) -> Self {
        let scale = |e: usize| (e * epochs).div_ceil(self.epochs.max(1)).max(1);
        Self {
            decay_every: scale(self.decay_every),
            swap_until_epoch: self.swap_until_epoch.map(scale),
            epochs,
            ..self
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.lr * self.decay_rate.powi(drops as i32)
    }

    pub fn mode_at(&self, epoch: usize) -> Mode {
        if self.eval_after_first_decay && self.decay_every > 0 && epoch >= self.decay_every {
            Mode::Eval
        } else {
            Mode::Train
        }
    }

    pub fn swap_at(&self, epoch: usize) -> bool {
        self.swap_until_epoch.is_some_and(|e| epoch < e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.decay_rate > 0.0) || !(self.color_jitter >= 0.0) {
            return Err(Error::InvalidConfig(format!("schedule {self:?}")));
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::desk()
    }
}

/// Adam with the usual defaults (0.9, 0.999, 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &RegressorParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut RegressorParams, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, p) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (j, w) in p.value.data.iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Random brightness and contrast change of up to `amount` each.
pub fn color_jitter<R: Rng + ?Sized>(img: &ImageBuffer, amount: f64, rng: &mut R) -> ImageBuffer {
    if amount <= 0.0 {
        return img.clone();
    }
    let brightness = 1.0 + rng.gen_range(-amount..=amount);
    let contrast = 1.0 + rng.gen_range(-amount..=amount);
    let n = img.len().max(1) as f64;
    let mean = img.data.iter().map(|p| p.iter().sum::<f64>()).sum::<f64>() / (3.0 * n);
    let mut out = img.clone();
    for px in &mut out.data {
        for c in px.iter_mut() {
            *c = (((*c - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
        }
    }
    out
}

/// Supplies the training pairs of each epoch.
pub trait PairSource {
    fn epoch_pairs(&mut self, epoch: usize, swap_synthetic: bool) -> Result<Cow<'_, [TrainingPair]>>;
}

/// The same pairs every epoch.
#[derive(Debug, Clone)]
pub struct StaticPairs(pub Vec<TrainingPair>);

impl PairSource for StaticPairs {
    fn epoch_pairs(&mut self, _epoch: usize, _swap: bool) -> Result<Cow<'_, [TrainingPair]>> {
        Ok(Cow::Borrowed(&self.0))
    }
}

/// Freshly sampled pairs for a set of train queries every epoch; skipped
/// renders are dropped.
pub struct SampledPairs<'a> {
    pub sampler: PairSampler<'a>,
    pub queries: Vec<usize>,
    pub policy: Policy,
    pub seed: u64,
    pub last_skipped: usize,
}

impl<'a> SampledPairs<'a> {
    pub fn new(sampler: PairSampler<'a>, queries: Vec<usize>, policy: Policy, seed: u64) -> Self {
        Self {
            sampler,
            queries,
            policy,
            seed,
            last_skipped: 0,
        }
    }
}

impl PairSource for SampledPairs<'_> {
    fn epoch_pairs(&mut self, epoch: usize, swap: bool) -> Result<Cow<'_, [TrainingPair]>> {
        let mut out = Vec::with_capacity(self.queries.len());
        self.last_skipped = 0;
        for &q in &self.queries {
            let mut rng = pair_rng(self.seed, epoch, q);
            match self.sampler.sample(q, self.policy, swap, &mut rng)? {
                PairOutcome::Pair(p) => out.push(p),
                PairOutcome::Skipped { .. } => self.last_skipped += 1,
            }
        }
        Ok(Cow::Owned(out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.log.first().map(|l| l.mean_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|l| l.mean_loss)
    }
}

/// Trains `model` in place with Adam under `schedule`.
pub fn train(
    model: &mut Regressor,
    source: &mut dyn PairSource,
    loss_cfg: &LossConfig,
    schedule: &Schedule,
) -> Result<TrainReport> {
    schedule.validate()?;
    let mut adam = Adam::new(model.params());
    let mut log = Vec::with_capacity(schedule.epochs);
    let mut steps = 0;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mode = schedule.mode_at(epoch);
        let pairs = source.epoch_pairs(epoch, schedule.swap_at(epoch))?;
        if pairs.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let qs: Vec<ImageBuffer> = batch
                .iter()
                .map(|&i| color_jitter(&pairs[i].query.image, schedule.color_jitter, &mut rng))
                .collect();
            let ns: Vec<ImageBuffer> = batch
                .iter()
                .map(|&i| color_jitter(&pairs[i].neighbour.image, schedule.color_jitter, &mut rng))
                .collect();
            let targets: Vec<_> = batch.iter().map(|&i| pairs[i].target).collect();
            let q_refs: Vec<&ImageBuffer> = qs.iter().collect();
            let n_refs: Vec<&ImageBuffer> = ns.iter().collect();
            let step = model.loss_and_grads(&q_refs, &n_refs, &targets, loss_cfg, mode, &mut rng)?;
            if !step.loss.is_finite() {
                return Err(Error::DivergedLoss {
                    epoch,
                    loss: step.loss,
                });
            }
            adam.step(model.params_mut(), &step.grads, lr);
            if let Some(bn) = &step.bn {
                model.update_running_stats(bn, 2 * batch.len());
            }
            total += step.loss * batch.len() as f64;
            steps += 1;
        }
        let mean_loss = total / pairs.len() as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.5} lr {lr:.2e} pairs {}", pairs.len());
        log.push(EpochLog {
            epoch,
            mean_loss,
            lr,
            pairs: pairs.len(),
        });
    }
    Ok(TrainReport { log, steps })
}
