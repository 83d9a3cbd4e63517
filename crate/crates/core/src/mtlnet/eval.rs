use std::fmt::Write as _;

use rayon::prelude::*;

use super::model::{prepare_input, MtlModel};
use super::tensor::Scalar;
use super::train::{accuracy, check_compatible, Accuracy};
use crate::codebook::CodebookTriple;
use crate::config::KvMap;
use crate::dataset::{BeamDataset, SplitKind};
use crate::error::Result;
use crate::metric::BeamSelection;
use crate::rng::derive_seed;
use crate::search::{exhaustive_search, random_baseline, CandidateEvaluator};

/// Sub-stream of a sample's seed used for its random-selection baseline.
pub const RANDOM_STREAM: u64 = 0x7261_6e64;

/// Sum rates of one sample. A selection whose equivalent channel admits no
/// zero-forcing solution scores 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub seed: u64,
    pub mtl: f64,
    /// Rate of the stored label.
    pub ias: f64,
    pub es: Option<f64>,
    pub random: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub accuracy: Accuracy,
}

fn finite_or_zero(r: f64) -> f64 {
    if r.is_finite() {
        r
    } else {
        0.0
    }
}

impl EvalReport {
    pub fn mean_mtl(&self) -> f64 {
        self.mean(|r| r.mtl)
    }

    pub fn mean_ias(&self) -> f64 {
        self.mean(|r| r.ias)
    }

    pub fn mean_random(&self) -> f64 {
        self.mean(|r| r.random)
    }

    pub fn mean_es(&self) -> Option<f64> {
        let es: Option<Vec<f64>> = self.rows.iter().map(|r| r.es).collect();
        es.map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
    }

    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Summary as `eval.*` keys.
    pub fn summary(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("eval.samples", self.rows.len());
        for (t, a) in self.accuracy.task.iter().enumerate() {
            kv.set(format!("eval.acc_task{}", t + 1), a);
        }
        kv.set("eval.acc_overall", self.accuracy.overall);
        kv.set("eval.mean_rate_mtl", self.mean_mtl());
        kv.set("eval.mean_rate_ias", self.mean_ias());
        kv.set("eval.mean_rate_random", self.mean_random());
        if let Some(es) = self.mean_es() {
            kv.set("eval.mean_rate_es", es);
        }
        kv
    }

    /// Per-sample CSV; `comments` and the summary become leading `#` lines.
    pub fn to_csv(&self, comments: &KvMap) -> String {
        let mut s = String::new();
        let mut head = comments.clone();
        head.extend(&self.summary());
        for (k, v) in head.iter() {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("index,seed,rate_mtl,rate_ias,rate_es,rate_random\n");
        for r in &self.rows {
            let es = r.es.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", r.index, r.seed, r.mtl, r.ias, es, r.random);
        }
        s
    }
}

/// Accuracy and per-sample rates of the model's predictions on `split`.
/// Exhaustive search runs only when `es_budget` is given.
pub fn evaluate<T: Scalar>(
    model: &MtlModel<T>,
    ds: &BeamDataset,
    cb: &CodebookTriple,
    split: SplitKind,
    es_budget: Option<u64>,
) -> Result<EvalReport> {
    check_compatible(model, ds)?;
    let cfg = &ds.header.cfg;
    let idx = ds.indices(split);
    let rows = idx
        .par_iter()
        .map(|&i| {
            let sample = &ds.samples[i];
            let labels = model.predict_labels(&prepare_input(&model.dims, &sample.planes)?)?;
            let ch = ds.channel(i)?;
            let ev = CandidateEvaluator::new(&ch, cb, cfg)?;
            let sel = BeamSelection::from_flat(cfg, &labels);
            let es = match es_budget {
                Some(b) => Some(finite_or_zero(exhaustive_search(&ch, cb, cfg, b)?.best_rate)),
                None => None,
            };
            let random = random_baseline(&ch, cb, cfg, derive_seed(sample.seed, RANDOM_STREAM))?.best_rate;
            Ok((
                labels,
                EvalRow {
                    index: i,
                    seed: sample.seed,
                    mtl: finite_or_zero(ev.rate_of(&sel)),
                    ias: finite_or_zero(ev.rate_of(&ds.selection(i))),
                    es,
                    random: finite_or_zero(random),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (preds, rows): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let labels: Vec<&[u32]> = idx.iter().map(|&i| ds.samples[i].labels.as_slice()).collect();
    Ok(EvalReport {
        accuracy: accuracy(&model.dims.group_sizes(), &preds, &labels),
        rows,
    })
}
