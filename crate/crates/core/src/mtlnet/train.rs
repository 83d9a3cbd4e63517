use std::fmt::Write as _;

use super::model::{prepare_input, Grads, MtlModel};
use super::ops::Mode;
use super::tensor::Scalar;
use crate::channel::ChannelSet;
use crate::config::KvMap;
use crate::dataset::{channel_planes, iterate_batches, BeamDataset, SplitKind};
use crate::error::{Error, Result};
use crate::metric::BeamSelection;
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Step-decay multiplier.
    pub lr_decay: f64,
    /// Epochs between decays.
    pub lr_step: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.8,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 10,
            lr_decay: 0.1,
            lr_step: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.batch_size == 0 || self.lr_step == 0 {
            return Err(Error::Config("batch_size and lr_step must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        Ok(())
    }

    /// `lr * decay^floor(epoch / step)` for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("train.lr", self.lr);
        kv.set("train.beta1", self.beta1);
        kv.set("train.beta2", self.beta2);
        kv.set("train.eps", self.eps);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.epochs", self.epochs);
        kv.set("train.lr_decay", self.lr_decay);
        kv.set("train.lr_step", self.lr_step);
        kv.set("train.seed", self.seed);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let tc = Self {
            lr: kv.get_or("train.lr", d.lr)?,
            beta1: kv.get_or("train.beta1", d.beta1)?,
            beta2: kv.get_or("train.beta2", d.beta2)?,
            eps: kv.get_or("train.eps", d.eps)?,
            batch_size: kv.get_or("train.batch_size", d.batch_size)?,
            epochs: kv.get_or("train.epochs", d.epochs)?,
            lr_decay: kv.get_or("train.lr_decay", d.lr_decay)?,
            lr_step: kv.get_or("train.lr_step", d.lr_step)?,
            seed: kv.get_or("train.seed", d.seed)?,
        };
        tc.validate()?;
        Ok(tc)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Grads<T>,
    v: Grads<T>,
    step: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &MtlModel<T>, tc: &TrainConfig) -> Self {
        Self {
            m: model.zero_grads(),
            v: model.zero_grads(),
            step: 0,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
        }
    }

    pub fn step(&mut self, model: &mut MtlModel<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = T::lit(lr / bc1);
        let root_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                p.data[i] -= step_size * m[i] / (v[i].sqrt() / root_bc2 + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub task_loss: [f64; 3],
    pub total: f64,
    /// Mean of `total` over the epoch's batches so far.
    pub running: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean of each task loss over the epoch.
    pub task_loss: [f64; 3],
    pub total: f64,
    pub accuracy: Accuracy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accuracy {
    pub task: [f64; 3],
    pub overall: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    /// CSV with one `batch` row per optimizer step and one `epoch` row per
    /// epoch; `comments` become leading `#` lines.
    pub fn to_csv(&self, comments: &KvMap) -> String {
        let mut s = String::new();
        for (k, v) in comments.iter() {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("kind,epoch,batch,lr,loss_task1,loss_task2,loss_task3,loss_total,loss_running,acc_task1,acc_task2,acc_task3,acc_overall\n");
        for b in &self.batches {
            let _ = writeln!(
                s,
                "batch,{},{},{},{},{},{},{},{},,,,",
                b.epoch + 1,
                b.batch + 1,
                b.lr,
                b.task_loss[0],
                b.task_loss[1],
                b.task_loss[2],
                b.total,
                b.running
            );
        }
        for e in &self.epochs {
            let a = e.accuracy;
            let _ = writeln!(
                s,
                "epoch,{},,{},{},{},{},{},,{},{},{},{}",
                e.epoch + 1,
                e.lr,
                e.task_loss[0],
                e.task_loss[1],
                e.task_loss[2],
                e.total,
                a.task[0],
                a.task[1],
                a.task[2],
                a.overall
            );
        }
        s
    }
}

fn prepared<T: Scalar>(model: &MtlModel<T>, ds: &BeamDataset, idx: &[usize]) -> Result<Vec<Vec<T>>> {
    idx.iter()
        .map(|&i| prepare_input(&model.dims, &ds.samples[i].planes))
        .collect()
}

pub(crate) fn check_compatible<T: Scalar>(model: &MtlModel<T>, ds: &BeamDataset) -> Result<()> {
    let d = &model.dims;
    let h = &ds.header;
    let s = h.sizes();
    let want = [h.cfg.n_r, h.cfg.m, h.cfg.n_t, h.cfg.k, h.cfg.m_s, h.cfg.n_s, s.f, s.s, s.w];
    let got = [d.n_r, d.m, d.n_t, d.k, d.m_s, d.n_s, d.classes_f, d.classes_s, d.classes_w];
    if want != got {
        return Err(Error::Shape {
            op: "model vs dataset",
            left: got.to_vec(),
            right: want.to_vec(),
        });
    }
    Ok(())
}

/// Trains on the dataset's training split and validates after every epoch.
/// `on_epoch` observes each finished epoch.
pub fn train<T: Scalar>(
    model: &mut MtlModel<T>,
    ds: &BeamDataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    tc.validate()?;
    check_compatible(model, ds)?;
    if ds.split.train.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training split".into()));
    }
    let mut adam = Adam::new(model, tc);
    let mut report = TrainReport::default();
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let epoch_seed = derive_seed(tc.seed, epoch as u64);
        let mut sums = [0.0f64; 4];
        let mut n_batches = 0;
        for (bi, batch) in iterate_batches(ds, SplitKind::Train, tc.batch_size, Some(epoch_seed))?.enumerate() {
            let inputs = prepared(model, ds, &batch.indices)?;
            let labels: Vec<&[u32]> = batch.indices.iter().map(|&i| ds.samples[i].labels.as_slice()).collect();
            let batch_seed = derive_seed(epoch_seed, 1 + bi as u64);
            let seeds: Vec<u64> = (0..inputs.len()).map(|j| derive_seed(batch_seed, j as u64)).collect();
            let (loss, grads) = model.batch_gradients(&inputs, &labels, Mode::Train, &seeds)?;
            let task_loss = loss.map(|v| v.to_f64().unwrap_or(f64::NAN));
            let total = task_loss.iter().sum::<f64>() / 3.0;
            let grads_finite = grads.iter().flatten().all(|g| g.is_finite());
            if !total.is_finite() || !grads_finite {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("task losses {task_loss:?}, finite gradients: {grads_finite}"),
                });
            }
            adam.step(model, &grads, lr);
            for t in 0..3 {
                sums[t] += task_loss[t];
            }
            sums[3] += total;
            n_batches += 1;
            report.batches.push(BatchRecord {
                epoch,
                batch: bi,
                lr,
                task_loss,
                total,
                running: sums[3] / n_batches as f64,
            });
        }
        let nb = n_batches as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            task_loss: [sums[0] / nb, sums[1] / nb, sums[2] / nb],
            total: sums[3] / nb,
            accuracy: validate(model, ds)?,
        };
        on_epoch(&rec);
        report.epochs.push(rec);
    }
    Ok(report)
}

/// Per-task accuracy on the validation split (all samples if it is empty),
/// evaluated one sample at a time with dropout off.
pub fn validate<T: Scalar>(model: &MtlModel<T>, ds: &BeamDataset) -> Result<Accuracy> {
    check_compatible(model, ds)?;
    let mut idx = ds.indices(SplitKind::Validation);
    if idx.is_empty() {
        idx = ds.indices(SplitKind::All);
    }
    let preds = idx
        .iter()
        .map(|&i| {
            let x = prepare_input(&model.dims, &ds.samples[i].planes)?;
            model.predict_labels(&x)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&[u32]> = idx.iter().map(|&i| ds.samples[i].labels.as_slice()).collect();
    Ok(accuracy(&model.dims.group_sizes(), &preds, &labels))
}

/// Mean of `predicted == label` over samples and outputs, per task.
pub fn accuracy(groups: &[usize; 3], predictions: &[Vec<usize>], labels: &[&[u32]]) -> Accuracy {
    let mut hits = [0usize; 3];
    for (p, l) in predictions.iter().zip(labels) {
        let mut j = 0;
        for (t, &n) in groups.iter().enumerate() {
            for _ in 0..n {
                if p[j] == l[j] as usize {
                    hits[t] += 1;
                }
                j += 1;
            }
        }
    }
    let n = predictions.len().max(1) as f64;
    let task = [0, 1, 2].map(|t| hits[t] as f64 / (n * groups[t] as f64));
    Accuracy {
        task,
        overall: task.iter().sum::<f64>() / 3.0,
    }
}

/// Beam selection predicted for one channel realization.
pub fn predict_selection<T: Scalar>(model: &MtlModel<T>, ch: &ChannelSet) -> Result<BeamSelection> {
    model.predict_selection_from_planes(&channel_planes(ch))
}
