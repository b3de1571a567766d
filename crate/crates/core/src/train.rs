//! Supervised training: the pixel-wise Euclidean loss, Adam with a decaying
//! learning rate, validation, checkpointing and loss histories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Sample;
use crate::densitymap::DensityMap;
use crate::error::{Error, Result};
use crate::model::ops::{Scalar, Tensor};
use crate::model::{checkpoint, Gradients, Network};

pub mod plot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Linear,
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub decay: Decay,
    pub iterations: usize,
    pub val_fraction: f64,
    /// Validate every this many iterations (and always after the last one).
    pub val_every: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables periodic saves.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_initial: 3e-4,
            lr_final: 2.5e-5,
            decay: Decay::Exponential,
            iterations: 90_000,
            val_fraction: 0.1,
            val_every: 1000,
            seed: 0,
            checkpoint_every: 10_000,
            grad_clip: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::config("training batch_size and iterations must be positive"));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite()) {
            return Err(Error::config("training requires 0 < lr_final <= lr_initial"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("training.val_fraction must lie in (0, 1)"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("training.grad_clip must be positive"));
            }
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `iteration`; hits `lr_final` on the last one.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.lr_initial;
        }
        let t = iteration.min(self.iterations - 1) as f64 / (self.iterations - 1) as f64;
        match self.decay {
            Decay::Linear => self.lr_initial + (self.lr_final - self.lr_initial) * t,
            Decay::Exponential => self.lr_initial * (self.lr_final / self.lr_initial).powf(t),
        }
    }
}

fn check_pair(pred: &DensityMap, gt: &DensityMap) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::arg(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// Squared L2 distance between two maps, summed over pixels.
pub fn squared_error(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum())
}

/// `(1/N) Σ_i ‖pred_i − gt_i‖²`.
pub fn euclidean_loss(pred: &[DensityMap], gt: &[DensityMap]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::arg(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::arg("euclidean loss over an empty batch"));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += squared_error(p, g)?;
    }
    Ok(total / pred.len() as f64)
}

/// Loss and accumulated parameter gradients for one batch.
pub fn batch_loss_and_grad<T: Scalar>(
    net: &Network<T>,
    batch: &[(&Tensor<T>, &[T])],
    grads: &mut Gradients<T>,
) -> f64 {
    let n = T::from_usize(batch.len()).unwrap();
    let two = T::from_f64_lossy(2.0);
    let mut loss = 0.0;
    for (x, gt) in batch {
        let (pred, trace) = net.forward_train(x);
        let mut dout = Tensor::zeros(1, pred.h, pred.w);
        for ((d, &p), &g) in dout.data.iter_mut().zip(&pred.data).zip(gt.iter()) {
            let diff = p - g;
            loss += diff.to_f64().unwrap().powi(2);
            *d = two * diff / n;
        }
        net.backward(&trace, &dout, grads);
    }
    loss / batch.len() as f64
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(net: &Network<f32>, config: &TrainingConfig) -> Self {
        let zeros: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, net: &mut Network<f32>, grads: &Gradients<f32>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in net
            .params_mut()
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `iteration,train_loss,val_loss,lr`, one row per step; `val_loss` is
    /// blank on steps without a validation pass.
    pub fn to_csv(&self) -> String {
        let evals: BTreeMap<usize, f64> = self.evals.iter().map(|e| (e.iteration, e.val_loss)).collect();
        let mut out = String::from("iteration,train_loss,val_loss,lr\n");
        for s in &self.steps {
            let val = evals.get(&s.iteration).map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:e},{},{:e}", s.iteration, s.train_loss, val, s.lr);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut h = Self::default();
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "iteration,train_loss,val_loss,lr" {
            return Err(Error::Schema {
                locus: "history:1".into(),
                message: format!("unexpected header `{header}`"),
            });
        }
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Schema {
                locus: format!("history:{}", i + 2),
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let iteration: usize = f[0].parse().map_err(|_| bad("bad iteration"))?;
            let train_loss: f64 = f[1].parse().map_err(|_| bad("bad train_loss"))?;
            let lr: f64 = f[3].parse().map_err(|_| bad("bad lr"))?;
            if h.steps.last().is_some_and(|s| s.iteration >= iteration) {
                return Err(bad("iterations must be strictly increasing"));
            }
            h.steps.push(StepRecord { iteration, train_loss, lr });
            if !f[2].is_empty() {
                let val_loss = f[2].parse().map_err(|_| bad("bad val_loss"))?;
                h.evals.push(EvalRecord { iteration, val_loss });
            }
        }
        Ok(h)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Endless seeded sampling without replacement, reshuffling on exhaustion.
#[derive(Clone, Debug)]
pub struct ShuffledIndices {
    pool: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ShuffledIndices {
    pub fn new(pool: Vec<usize>, seed: u64) -> Self {
        let mut s = Self {
            pool,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.pool.shuffle(&mut s.rng);
        s
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !self.pool.is_empty() {
            if self.pos == self.pool.len() {
                self.pool.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.pool[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Seeded per-sample split into (train, val) index lists.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b1f));
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
    };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Where and how often a training loop writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPlan {
    pub dir: Option<PathBuf>,
    pub role: String,
}

/// Mean squared-error loss over `samples`, without touching parameters.
pub fn evaluate_val(net: &Network<f32>, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("validation set is empty"));
    }
    let mut total = 0.0;
    for s in samples {
        let pred = net.forward(&s.image)?;
        total += squared_error(&pred, &s.density)?;
    }
    Ok(total / samples.len() as f64)
}

pub(crate) struct TensorSample {
    pub x: Tensor<f32>,
    pub id: String,
}

pub(crate) fn to_tensor(net: &Network<f32>, s: &Sample, id: String) -> Result<TensorSample> {
    if s.image.width() != s.density.width() || s.image.height() != s.density.height() {
        return Err(Error::arg(format!("sample {id}: image and density sizes differ")));
    }
    Ok(TensorSample { x: net.image_tensor(&s.image)?, id })
}

/// Generic loop shared by teacher and student training. `next_batch`
/// returns `(tensor, target, id)` triples for one step.
pub(crate) fn run_loop<'a, F>(
    net: &mut Network<f32>,
    config: &TrainingConfig,
    mut next_batch: F,
    val: &[&Sample],
    plan: &CheckpointPlan,
) -> Result<TrainingHistory>
where
    F: FnMut() -> Vec<(&'a Tensor<f32>, &'a [f32], &'a str)>,
{
    config.validate()?;
    let mut adam = Adam::new(net, config);
    let mut grads = net.zero_gradients();
    let mut history = TrainingHistory::default();
    if let Some(dir) = &plan.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for it in 0..config.iterations {
        let lr = config.lr_at(it);
        let batch = next_batch();
        grads.zero();
        let pairs: Vec<(&Tensor<f32>, &[f32])> = batch.iter().map(|(x, g, _)| (*x, *g)).collect();
        let loss = batch_loss_and_grad(net, &pairs, &mut grads);
        let gnorm = grads.norm();
        if !loss.is_finite() || !gnorm.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|b| b.2).collect();
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} at iteration {it} (lr {lr:e}); batch [{}]",
                ids.join(", ")
            )));
        }
        if let Some(clip) = config.grad_clip {
            if gnorm > clip {
                grads.scale((clip / gnorm) as f32);
            }
        }
        adam.update(net, &grads, lr);
        history.steps.push(StepRecord { iteration: it, train_loss: loss, lr });

        let last = it + 1 == config.iterations;
        if !val.is_empty() && ((config.val_every > 0 && (it + 1) % config.val_every == 0) || last) {
            let v = evaluate_val(net, val)?;
            history.evals.push(EvalRecord { iteration: it, val_loss: v });
            log::info!("{} iter {it}: train {loss:.5} val {v:.5} lr {lr:.2e}", plan.role);
        }
        if let Some(dir) = &plan.dir {
            if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 && !last {
                let path = dir.join(format!("{}_{:07}.ckpt", plan.role, it + 1));
                checkpoint::save(path, net, &checkpoint_meta(&plan.role, it + 1))?;
            }
        }
    }
    if let Some(dir) = &plan.dir {
        checkpoint::save(
            dir.join(format!("{}_final.ckpt", plan.role)),
            net,
            &checkpoint_meta(&plan.role, config.iterations),
        )?;
        history.save_csv(dir.join(format!("{}_history.csv", plan.role)))?;
    }
    Ok(history)
}

fn checkpoint_meta(role: &str, iteration: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("role".to_string(), role.to_string()),
        ("iteration".to_string(), iteration.to_string()),
    ])
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub history: TrainingHistory,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Train `net` on a seeded 90/10-style split of `patches`.
pub fn train_teacher(
    patches: &[Sample],
    mut net: Network<f32>,
    config: &TrainingConfig,
    plan: &CheckpointPlan,
) -> Result<TrainOutcome> {
    config.validate()?;
    if patches.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let (train_idx, val_idx) = split_train_val(patches.len(), config.val_fraction, config.seed);
    let tensors = patches
        .iter()
        .enumerate()
        .map(|(i, s)| to_tensor(&net, s, format!("patch{i}")))
        .collect::<Result<Vec<_>>>()?;
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &patches[i]).collect();
    let mut order = ShuffledIndices::new(train_idx.clone(), config.seed);
    let history = run_loop(
        &mut net,
        config,
        || {
            order
                .take(config.batch_size)
                .into_iter()
                .map(|i| (&tensors[i].x, patches[i].density.values(), tensors[i].id.as_str()))
                .collect()
        },
        &val,
        plan,
    )?;
    Ok(TrainOutcome {
        network: net,
        history,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let gt = DensityMap::from_values(2, 2, vec![0.0; 4]).unwrap();
        let pred = DensityMap::from_values(2, 2, vec![0.5; 4]).unwrap();
        assert_eq!(euclidean_loss(std::slice::from_ref(&gt), std::slice::from_ref(&gt)).unwrap(), 0.0);
        assert_eq!(euclidean_loss(std::slice::from_ref(&pred), std::slice::from_ref(&gt)).unwrap(), 1.0);
        let pred2 = DensityMap::from_values(2, 2, vec![1.0; 4]).unwrap();
        // per-image losses 1 and 4 average to 2.5
        assert_eq!(euclidean_loss(&[pred, pred2], &[gt.clone(), gt.clone()]).unwrap(), 2.5);
        let other = DensityMap::zeros(3, 2);
        assert!(euclidean_loss(&[other], &[gt]).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        for decay in [Decay::Exponential, Decay::Linear] {
            let c = TrainingConfig { iterations: 90_000, decay, ..TrainingConfig::default() };
            assert_eq!(c.lr_at(0), 3e-4);
            assert!((c.lr_at(89_999) - 2.5e-5).abs() < 1e-9);
            assert!(c.lr_at(45_000) < 3e-4 && c.lr_at(45_000) > 2.5e-5);
        }
    }

    #[test]
    fn invalid_training_configs() {
        let base = TrainingConfig::default();
        assert!(TrainingConfig { lr_final: 1e-3, ..base.clone() }.validate().is_err());
        assert!(TrainingConfig { val_fraction: 1.0, ..base.clone() }.validate().is_err());
        assert!(TrainingConfig { batch_size: 0, ..base }.validate().is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_train_val(100, 0.1, 4);
        assert_eq!((t.len(), v.len()), (90, 10));
        assert_eq!(split_train_val(100, 0.1, 4), (t.clone(), v.clone()));
        let mut all: Vec<usize> = t.into_iter().chain(v).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn shuffled_indices_cover_pool_each_epoch() {
        let mut s = ShuffledIndices::new((0..7).collect(), 1);
        let mut first = s.take(7);
        first.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        assert_eq!(s.take(10).len(), 10);
    }

    #[test]
    fn history_csv_roundtrip() {
        let h = TrainingHistory {
            steps: vec![
                StepRecord { iteration: 0, train_loss: 1.5, lr: 3e-4 },
                StepRecord { iteration: 1, train_loss: 0.25, lr: 2.5e-5 },
            ],
            evals: vec![EvalRecord { iteration: 1, val_loss: 0.125 }],
        };
        assert_eq!(TrainingHistory::from_csv(&h.to_csv()).unwrap(), h);
        assert!(TrainingHistory::from_csv("nope\n").is_err());
        assert!(TrainingHistory::from_csv("iteration,train_loss,val_loss,lr\n3,1,,1\n2,1,,1\n").is_err());
    }
}
