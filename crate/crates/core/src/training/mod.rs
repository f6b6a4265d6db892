//! Rectified-flow training: joint noising of both target domains,
//! condition dropout, Adam updates, CSV logging and resumable checkpoints.

mod adam;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};

use crate::dataset::TrainingSample;
use crate::error::{Error, Result};
use crate::model::{patchify, viewset_patches, Model, ModelInput, ViewPatches};
use crate::numerics::{checkpoint, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per update; gradients are accumulated in a fixed order.
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine decay to `lr * min_lr_fraction` after warm-up; off keeps `lr`.
    pub cosine_decay: bool,
    pub min_lr_fraction: f64,
    /// Probability of dropping the text, and independently the reference views.
    pub dropout: f64,
    pub seed: u64,
    pub rgb_weight: f64,
    pub pm_weight: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    /// After this many steps only the LoRA adapters keep training.
    pub freeze_base_after: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch: 8,
            lr: 1e-3,
            warmup_steps: 100,
            cosine_decay: false,
            min_lr_fraction: 0.1,
            dropout: 0.1,
            seed: 0,
            rgb_weight: 1.0,
            pm_weight: 1.0,
            grad_clip: 1.0,
            checkpoint_every: 1000,
            freeze_base_after: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.rgb_weight < 0.0 || self.pm_weight < 0.0 || self.rgb_weight + self.pm_weight <= 0.0 {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / (self.warmup_steps + 1) as f64;
        }
        if !self.cosine_decay || self.steps <= self.warmup_steps {
            return self.lr;
        }
        let p = ((step - self.warmup_steps) as f64 / (self.steps - self.warmup_steps) as f64).min(1.0);
        let lo = self.lr * self.min_lr_fraction;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// A training sample converted to patch space.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub target_rgb: Tensor,
    pub target_pm: Tensor,
    pub views: Vec<ViewPatches>,
    pub caption: u32,
}

impl PreparedSample {
    pub fn new(sample: &TrainingSample, patch: usize) -> Result<Self> {
        Ok(Self {
            target_rgb: patchify(&sample.target_rgb, patch)?,
            target_pm: patchify(&sample.target_pointmap, patch)?,
            views: viewset_patches(&sample.views, patch)?,
            caption: sample.caption_id,
        })
    }
}

/// Clean data, noise and their interpolation for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainFlow {
    pub x0: Tensor,
    pub noise: Tensor,
    pub xt: Tensor,
}

impl DomainFlow {
    /// `x_t = (1 - t) x0 + t noise`.
    pub fn new(x0: Tensor, noise: Tensor, t: f32) -> Result<Self> {
        if x0.shape() != noise.shape() {
            return Err(Error::shape("flow", format!("{:?} vs {:?}", x0.shape(), noise.shape())));
        }
        let xt = x0.data().iter().zip(noise.data()).map(|(a, e)| (1.0 - t) * a + t * e).collect();
        let xt = Tensor::new(x0.shape().to_vec(), xt)?;
        Ok(Self { x0, noise, xt })
    }

    /// Velocity target `noise - x0`.
    pub fn velocity(&self) -> Tensor {
        let v = self.noise.data().iter().zip(self.x0.data()).map(|(e, a)| e - a).collect();
        Tensor::new(self.x0.shape().to_vec(), v).expect("same shape")
    }
}

/// Diffusion state of both target domains at one shared timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub t: f32,
    pub rgb: DomainFlow,
    pub pointmap: Option<DomainFlow>,
}

pub fn gaussian_like(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f32, _>(StandardNormal))
}

impl FlowSample {
    /// Draw `t ~ U[0, 1]` and independent noise for each domain.
    pub fn draw(rng: &mut impl Rng, rgb: &Tensor, pointmap: Option<&Tensor>) -> Result<Self> {
        let t: f32 = rng.random();
        let e_rgb = gaussian_like(rng, rgb.shape());
        let e_pm = pointmap.map(|p| gaussian_like(rng, p.shape()));
        Self::at(t, rgb, e_rgb, pointmap.zip(e_pm))
    }

    pub fn at(t: f32, rgb: &Tensor, noise_rgb: Tensor, pointmap: Option<(&Tensor, Tensor)>) -> Result<Self> {
        Ok(Self {
            t,
            rgb: DomainFlow::new(rgb.clone(), noise_rgb, t)?,
            pointmap: pointmap.map(|(x, e)| DomainFlow::new(x.clone(), e, t)).transpose()?,
        })
    }
}

/// Which conditions a training step dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropFlags {
    pub text: bool,
    pub reference: bool,
}

/// Two independent Bernoulli(`p`) draws: text first, then reference views.
/// Dropped conditions are replaced by the model's null embeddings.
pub fn apply_condition_dropout<'a>(input: ModelInput<'a>, rng: &mut impl Rng, p: f64) -> (ModelInput<'a>, DropFlags) {
    let flags = DropFlags {
        text: rng.random_bool(p),
        reference: rng.random_bool(p),
    };
    let mut out = input;
    if flags.text {
        out.caption = None;
    }
    if flags.reference {
        out.views = None;
    }
    (out, flags)
}

/// Weighted velocity MSE over the target blocks.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub rgb: f64,
    pub pm: Option<f64>,
}

/// Loss of predicted velocities against `noise - x0`, one MSE per domain,
/// combined as `(w_rgb * rgb + w_pm * pm) / (w_rgb + w_pm)`.
pub fn velocity_loss(
    tape: &mut Tape<f32>,
    pred_rgb: Var,
    pred_pm: Option<Var>,
    flow: &FlowSample,
    rgb_weight: f64,
    pm_weight: f64,
) -> Result<LossParts> {
    let target = tape.constant(flow.rgb.velocity())?;
    let l_rgb = tape.mse(pred_rgb, target)?;
    let rgb = tape.value(l_rgb).item()? as f64;
    let (total, pm) = match (pred_pm, &flow.pointmap) {
        (Some(p), Some(f)) => {
            let target = tape.constant(f.velocity())?;
            let l_pm = tape.mse(p, target)?;
            let pm = tape.value(l_pm).item()? as f64;
            let sum = rgb_weight + pm_weight;
            let a = tape.scale(l_rgb, rgb_weight / sum)?;
            let b = tape.scale(l_pm, pm_weight / sum)?;
            (tape.add(a, b)?, Some(pm))
        }
        (None, None) => (l_rgb, None),
        _ => return Err(Error::shape("velocity_loss", "pointmap prediction and target must both be present")),
    };
    let v = tape.value(total).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "flow_loss" });
    }
    Ok(LossParts { total, rgb, pm })
}

/// Flow-matching loss of one sample: shared `t`, independent noise per
/// domain, conditions at timestep 0, condition dropout with probability `p`.
pub fn flow_loss(
    model: &Model,
    tape: &mut Tape<f32>,
    bound: &crate::numerics::Bound,
    sample: &PreparedSample,
    rng: &mut impl Rng,
    cfg: &TrainConfig,
) -> Result<(LossParts, DropFlags)> {
    let pm = model.cfg.pointmap.then_some(&sample.target_pm);
    let flow = FlowSample::draw(rng, &sample.target_rgb, pm)?;
    let input = ModelInput {
        target_rgb: &flow.rgb.xt,
        target_pm: flow.pointmap.as_ref().map(|f| &f.xt),
        views: Some(&sample.views),
        caption: Some(sample.caption),
        t: flow.t,
    };
    let (input, flags) = apply_condition_dropout(input, rng, cfg.dropout);
    let out = model.forward(tape, bound, &input)?;
    let parts = velocity_loss(tape, out.rgb, out.pointmap, &flow, cfg.rgb_weight, cfg.pm_weight)?;
    Ok((parts, flags))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub rgb: f64,
    pub pm: f64,
    pub text_drop_rate: f64,
    pub ref_drop_rate: f64,
}

pub const LOG_HEADER: &str = "step,total,rgb,pm,text_drop_rate,ref_drop_rate";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.4},{:.4}",
            self.step, self.total, self.rgb, self.pm, self.text_drop_rate, self.ref_drop_rate
        )
    }
}

/// Model, optimizer state and step counter of a training run.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub cfg: TrainConfig,
    /// Completed updates.
    pub step: usize,
}

const STEP_RECORD: &str = "trainer/step";

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.adam, &model.params);
        Ok(Self { model, adam, cfg, step: 0 })
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::save`];
    /// `model` must have the architecture the checkpoint was taken from.
    pub fn resume(mut model: Model, cfg: TrainConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let records = checkpoint::read(path)?;
        let mut adam = Adam::new(cfg.adam, &model.params);
        let mut step = None;
        let mut params = Vec::new();
        let ids: Vec<_> = model.params.ids().collect();
        for (name, t) in records {
            if name == STEP_RECORD {
                step = Some(t.item()? as usize);
            } else if let Some(rest) = name.strip_prefix("adam.m/") {
                let id = model.params.find(rest).ok_or_else(|| unknown(path, &name))?;
                adam.m[ids.iter().position(|i| *i == id).expect("id")] = t;
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                let id = model.params.find(rest).ok_or_else(|| unknown(path, &name))?;
                adam.v[ids.iter().position(|i| *i == id).expect("id")] = t;
            } else {
                params.push((name, t));
            }
        }
        model.params.assign(path, params.into_iter())?;
        let step = step.ok_or_else(|| unknown(path, STEP_RECORD))?;
        adam.t = step as u64;
        let mut tr = Self { model, adam, cfg, step };
        if tr.cfg.freeze_base_after.is_some_and(|k| step >= k) {
            tr.model.freeze_base();
        }
        Ok(tr)
    }

    /// Write parameters, Adam moments and the step counter.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let p = &self.model.params;
        let names: Vec<String> = p.ids().map(|id| p.name(id).to_string()).collect();
        let m_names: Vec<String> = names.iter().map(|n| format!("adam.m/{n}")).collect();
        let v_names: Vec<String> = names.iter().map(|n| format!("adam.v/{n}")).collect();
        let step = Tensor::scalar(self.step as f32);
        let records = p
            .ids()
            .zip(&names)
            .map(|(id, n)| (n.as_str(), p.get(id)))
            .chain(m_names.iter().map(String::as_str).zip(&self.adam.m))
            .chain(v_names.iter().map(String::as_str).zip(&self.adam.v))
            .chain(std::iter::once((STEP_RECORD, &step)));
        checkpoint::write(path, records)
    }

    /// Random stream of 1-based `step`; independent of what ran before, so a
    /// resumed run replays the same draws.
    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step as u64);
        rng
    }

    /// Run one update over a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[PreparedSample]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let step = self.step + 1;
        if self.cfg.freeze_base_after == Some(step - 1) {
            self.model.freeze_base();
        }
        let mut rng = self.step_rng(step);
        let n_params = self.model.params.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n_params];
        let (mut total, mut rgb, mut pm, mut text, mut reference) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let inv = 1.0 / self.cfg.batch as f32;
        for _ in 0..self.cfg.batch {
            let sample = &data[rng.random_range(0..data.len())];
            let mut tape = Tape::<f32>::new();
            let bound = self.model.params.bind(&mut tape)?;
            let (parts, flags) = flow_loss(&self.model, &mut tape, &bound, sample, &mut rng, &self.cfg)?;
            total += tape.value(parts.total).item()? as f64;
            rgb += parts.rgb;
            pm += parts.pm.unwrap_or(0.0);
            text += flags.text as usize;
            reference += flags.reference as usize;
            let mut g = tape.backward(parts.total)?;
            for (i, var) in bound.vars().iter().enumerate() {
                if let Some(gt) = g.take(*var) {
                    let acc = grads[i].get_or_insert_with(|| vec![0.0; gt.numel()]);
                    for (a, b) in acc.iter_mut().zip(gt.data()) {
                        *a += b * inv;
                    }
                }
            }
        }
        if self.cfg.grad_clip > 0.0 {
            let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite { op: "gradient" });
            }
            if norm > self.cfg.grad_clip {
                let s = (self.cfg.grad_clip / norm) as f32;
                grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
            }
        }
        self.adam.step(&mut self.model.params, &grads, self.cfg.lr_at(step));
        self.step = step;
        let b = self.cfg.batch as f64;
        Ok(StepLog {
            step,
            total: total / b,
            rgb: rgb / b,
            pm: pm / b,
            text_drop_rate: text as f64 / b,
            ref_drop_rate: reference as f64 / b,
        })
    }

    /// Train until `self.cfg.steps` updates are done. With `out_dir`, append
    /// to `train_log.csv` and write `checkpoints/step_NNNNNN.ckpt` every
    /// `checkpoint_every` steps plus `checkpoints/last.ckpt` at the end.
    pub fn run(&mut self, data: &[PreparedSample], out_dir: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut log = match out_dir {
            Some(dir) => Some(open_log(dir)?),
            None => None,
        };
        let mut logs = Vec::new();
        while self.step < self.cfg.steps {
            let entry = self.train_step(data)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", entry.csv_row())?;
            }
            on_step(&entry);
            logs.push(entry);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("checkpoints").join("last.ckpt"))?;
        }
        Ok(logs)
    }
}

fn unknown(path: &Path, name: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: format!("unexpected or missing record {name}"),
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

fn open_log(dir: &Path) -> Result<fs::File> {
    fs::create_dir_all(dir)?;
    let path = dir.join("train_log.csv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{LOG_HEADER}")?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests;
