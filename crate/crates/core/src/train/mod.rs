//! Desk-scale optimization of the network under the L1 objective.

mod optim;

pub use optim::{check_finite, clip_global_norm, AdamW, LrSchedule, OptimizerState};

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{crop_patch, random_flip, Pair};
use crate::autodiff::{Backend, Tape};
use crate::error::{arg_err, Error, Result};
use crate::image::Image;
use crate::metrics::{psnr_y, ssim_y};
use crate::network::{forward, restore, Model};
use crate::tensor::Tensor;

/// Run parameters that are not part of the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub iterations: u64,
    pub batch: usize,
    pub patch: usize,
    /// Held-out evaluation every this many iterations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub optimizer: AdamW,
}

impl TrainSettings {
    /// Batch 4 of 32×32 patches for 2000 iterations at 2e-4.
    pub fn desk(seed: u64) -> Self {
        Self {
            iterations: 2000,
            batch: 4,
            patch: 32,
            eval_interval: 500,
            seed,
            schedule: LrSchedule::desk(2000, 2e-4),
            clip: Some(1.0),
            optimizer: AdamW::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("batch and patch size must be positive".into()));
        }
        if self.patch % crate::network::SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "patch size {} must be a multiple of {}",
                self.patch,
                crate::network::SIZE_MULTIPLE
            )));
        }
        let s = &self.schedule;
        if !(s.start > 0.0 && s.floor > 0.0 && s.floor <= s.start) {
            return Err(Error::Config(
                "learning rates must satisfy 0 < floor <= start".into(),
            ));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// What one iteration did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// Zero-based index of the completed iteration.
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Mean Y-channel scores over a set of images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
}

/// Receives every step and every held-out evaluation.
pub trait Observer {
    fn on_step(&mut self, trainer: &Trainer, log: &StepLog, eval: Option<&Scores>) -> Result<()>;
}

impl Observer for () {
    fn on_step(&mut self, _: &Trainer, _: &StepLog, _: Option<&Scores>) -> Result<()> {
        Ok(())
    }
}

/// Model, optimizer state and position in the run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub state: OptimizerState,
    /// Number of completed iterations.
    pub iteration: u64,
    pub settings: TrainSettings,
}

/// Mean L1 loss and its parameter gradients for one pair.
pub fn sample_gradients(model: &Model<f32>, pair: &Pair) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut tape = Tape::new(&model.store);
    let x = tape.constant(pair.rainy.clone());
    let y = forward(&mut tape, &model.layout, &x)?;
    let t = tape.constant(pair.clean.clone());
    let loss = tape.l1_loss(&y, &t)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    Ok((value, tape.backward(loss)?.into_param_grads()))
}

impl Trainer {
    pub fn new(model: Model<f32>, settings: TrainSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            state: OptimizerState::new(&model.store),
            model,
            iteration: 0,
            settings,
        })
    }

    /// Continues a run from saved state.
    pub fn resume(
        model: Model<f32>,
        state: OptimizerState,
        iteration: u64,
        settings: TrainSettings,
    ) -> Result<Self> {
        settings.validate()?;
        if !state.matches(&model.store) {
            return Err(Error::Config("optimizer state does not match the model".into()));
        }
        Ok(Self {
            model,
            state,
            iteration,
            settings,
        })
    }

    /// The generator for iteration `i`: independent of how the run got there.
    fn rng(&self, i: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed);
        rng.set_stream(i);
        rng
    }

    /// Crops and flips for the next iteration, in batch order.
    pub fn sample_batch(&self, data: &[Pair]) -> Result<Vec<Pair>> {
        if data.is_empty() {
            return Err(arg_err("train", "no training pairs"));
        }
        let mut rng = self.rng(self.iteration);
        (0..self.settings.batch)
            .map(|_| {
                let p = &data[rng.random_range(0..data.len())];
                let c = crop_patch(p, self.settings.patch, &mut rng)?;
                Ok(random_flip(&c, &mut rng))
            })
            .collect()
    }

    /// One optimization step. On error the model and optimizer are untouched.
    pub fn step(&mut self, data: &[Pair]) -> Result<StepLog> {
        let batch = self.sample_batch(data)?;
        let mut total: Option<Vec<Option<Tensor<f32>>>> = None;
        let mut loss = 0.0;
        for pair in &batch {
            let (l, g) = sample_gradients(&self.model, pair)?;
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(g) {
                        match (a.as_mut(), g) {
                            (Some(a), Some(g)) => a.add_assign(&g),
                            (None, Some(g)) => *a = Some(g),
                            _ => {}
                        }
                    }
                }
            }
        }
        let mut grads = total.expect("batch is non-empty");
        let inv = 1.0 / batch.len() as f32;
        for g in grads.iter_mut().flatten() {
            g.scale_in_place(inv);
        }
        check_finite(&self.model.store, &grads)?;
        let grad_norm = match self.settings.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        let lr = self.settings.schedule.lr_at(self.iteration);
        self.settings
            .optimizer
            .step(&mut self.model.store, &mut self.state, &grads, lr)?;
        let log = StepLog {
            iteration: self.iteration,
            loss: loss / batch.len() as f64,
            lr,
            grad_norm,
        };
        self.iteration += 1;
        Ok(log)
    }

    /// Runs to `settings.iterations`, evaluating on `test` at the configured
    /// interval and after the final iteration.
    pub fn run(&mut self, train: &[Pair], test: &[Pair], observer: &mut dyn Observer) -> Result<()> {
        while self.iteration < self.settings.iterations {
            let log = self.step(train)?;
            let done = self.iteration;
            let every = self.settings.eval_interval;
            let due = done == self.settings.iterations || (every > 0 && done % every == 0);
            let scores = if due && !test.is_empty() {
                Some(evaluate(&self.model, test)?)
            } else {
                None
            };
            observer.on_step(self, &log, scores.as_ref())?;
        }
        Ok(())
    }
}

fn mean_scores(pairs: impl Iterator<Item = Result<(f64, f64)>>) -> Result<Scores> {
    let (mut p, mut s, mut n) = (0.0, 0.0, 0usize);
    for r in pairs {
        let (a, b) = r?;
        p += a;
        s += b;
        n += 1;
    }
    if n == 0 {
        return Err(arg_err("evaluate", "no pairs"));
    }
    Ok(Scores {
        psnr: p / n as f64,
        ssim: s / n as f64,
    })
}

/// Mean PSNR and SSIM of derained outputs against the clean images.
pub fn evaluate(model: &Model<f32>, pairs: &[Pair]) -> Result<Scores> {
    mean_scores(pairs.iter().map(|p| {
        let out = restore(model, &Image::from_tensor(&p.rainy)?)?;
        let clean = Image::from_tensor(&p.clean)?;
        Ok((psnr_y(&out, &clean)?, ssim_y(&out, &clean)?))
    }))
}

/// Scores of the rainy inputs themselves.
pub fn baseline(pairs: &[Pair]) -> Result<Scores> {
    mean_scores(pairs.iter().map(|p| {
        let (r, c) = (Image::from_tensor(&p.rainy)?, Image::from_tensor(&p.clean)?);
        Ok((psnr_y(&r, &c)?, ssim_y(&r, &c)?))
    }))
}
