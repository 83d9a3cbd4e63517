//! Supervised beam-selection dataset: generation with search-derived labels,
//! the `RBL1` binary container, train/validation splitting and batching.
//!
//! Layout of an `RBL1` file (all integers little-endian):
//!
//! ```text
//! "RBL1"
//! u32 header_len, header_len bytes of canonical key=value text
//! u32 n_samples
//! n_samples x { u64 seed, f32 planes[sample_len], u32 labels[label_len] }
//! u32 n_train, u32 train[n_train], u32 n_val, u32 val[n_val]
//! ```
//!
//! Planes are `H_r` real then imaginary (row-major `N_r x M`), followed by
//! the real and imaginary planes of every `H_k` (row-major `M x N_t`).
//! Labels are the `K` user, `M_s` RIS and `N_s` BS codeword indices.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::channel::{sample_channel_set, ChannelSet, CMat, C64};
use crate::codebook::CodebookTriple;
use crate::config::{CodebookSizes, GainModel, KvMap, SystemConfig};
use crate::error::{Error, Result};
use crate::metric::BeamSelection;
use crate::rng::{derive_seed, rng_from_seed};
use crate::search::{exhaustive_search, ias_multistart, DEFAULT_BUDGET, DEFAULT_T_MAX};

const MAGIC: &[u8; 4] = b"RBL1";

pub const DEFAULT_RESTARTS: usize = 16;
pub const DEFAULT_BATCH: usize = 16;

/// Which search produces the labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labeler {
    /// Alternating search, best of `restarts` seeded starts.
    Ias { t_max: usize, restarts: usize },
    Es,
}

impl Default for Labeler {
    fn default() -> Self {
        Self::Ias {
            t_max: DEFAULT_T_MAX,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

impl Labeler {
    fn write_kv(&self, kv: &mut KvMap) {
        match *self {
            Self::Ias { t_max, restarts } => {
                kv.set("dataset.labeler", "ias");
                kv.set("dataset.t_max", t_max);
                kv.set("dataset.restarts", restarts);
            }
            Self::Es => kv.set("dataset.labeler", "es"),
        }
    }

    fn from_kv(kv: &KvMap) -> Result<Self> {
        match kv.get("dataset.labeler").unwrap_or("ias") {
            "ias" => Ok(Self::Ias {
                t_max: kv.get_or("dataset.t_max", DEFAULT_T_MAX)?,
                restarts: kv.get_or("dataset.restarts", DEFAULT_RESTARTS)?,
            }),
            "es" => Ok(Self::Es),
            other => Err(Error::Config(format!("unknown labeler {other:?}"))),
        }
    }

    /// Labels one channel realization drawn with `sample_seed`.
    pub fn label(
        &self,
        ch: &ChannelSet,
        cb: &CodebookTriple,
        cfg: &SystemConfig,
        sample_seed: u64,
        budget: u64,
    ) -> Result<BeamSelection> {
        let rep = match *self {
            Self::Ias { t_max, restarts } => {
                ias_multistart(ch, cb, cfg, t_max, sample_seed, restarts, budget)?
            }
            Self::Es => exhaustive_search(ch, cb, cfg, budget)?,
        };
        Ok(rep.best_selection)
    }
}

/// Everything needed to regenerate the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub cfg: SystemConfig,
    pub gain: GainModel,
    pub codebooks: CodebookTriple,
    pub seed: u64,
    pub l_b: usize,
    pub l_u: usize,
    pub labeler: Labeler,
    pub budget: u64,
}

impl DatasetHeader {
    pub fn sizes(&self) -> CodebookSizes {
        self.codebooks.sizes()
    }

    pub fn sample_len(&self) -> usize {
        let c = &self.cfg;
        2 * (c.n_r * c.m + c.k * c.m * c.n_t)
    }

    pub fn label_len(&self) -> usize {
        self.cfg.k + self.cfg.m_s + self.cfg.n_s
    }

    /// Header as a key/value map, without the sample count.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.cfg.write_kv(&mut kv);
        self.gain.write_kv(&mut kv);
        self.sizes().write_kv(&mut kv);
        self.labeler.write_kv(&mut kv);
        kv.set("dataset.seed", self.seed);
        kv.set("dataset.l_b", self.l_b);
        kv.set("dataset.l_u", self.l_u);
        kv.set("dataset.budget", self.budget);
        kv.set("codebook.hash", self.codebooks.content_hash());
        for (tag, i, words) in self.codebooks.canonical_words() {
            let mut hex = String::with_capacity(words.len() * 32);
            for (re, im) in words {
                let _ = write!(hex, "{re:016x}{im:016x}");
            }
            kv.set(format!("codebook.word.{tag}.{i:05}"), hex);
        }
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let cfg = SystemConfig::from_kv(kv)?;
        let gain = GainModel::from_kv(kv)?;
        let mut words = Vec::new();
        for (key, hex) in kv.section("codebook.word") {
            let rest = &key["codebook.word.".len()..];
            let (tag, idx) = rest
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("bad codeword key {key}")))?;
            let tag = tag
                .chars()
                .next()
                .filter(|_| tag.len() == 1)
                .ok_or_else(|| Error::Format(format!("bad codeword key {key}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Format(format!("bad codeword key {key}")))?;
            if hex.len() % 32 != 0 || !hex.is_ascii() {
                return Err(Error::Format(format!("bad codeword hex for {key}")));
            }
            let bits = (0..hex.len() / 32)
                .map(|j| {
                    let p = |s: &str| u64::from_str_radix(s, 16);
                    Ok((p(&hex[32 * j..32 * j + 16])?, p(&hex[32 * j + 16..32 * j + 32])?))
                })
                .collect::<std::result::Result<Vec<_>, std::num::ParseIntError>>()
                .map_err(|e| Error::Format(format!("{key}: {e}")))?;
            words.push((tag, idx, bits));
        }
        let codebooks = CodebookTriple::from_canonical_words(words)?;
        let hash: String = kv.require("codebook.hash")?;
        if hash != codebooks.content_hash() {
            return Err(Error::Format("codebook hash does not match embedded codewords".into()));
        }
        let sizes = CodebookSizes::from_kv(kv)?;
        if sizes != codebooks.sizes() {
            return Err(Error::Format(format!(
                "codebook sizes {:?} disagree with embedded codewords {:?}",
                sizes,
                codebooks.sizes()
            )));
        }
        codebooks.check(&cfg)?;
        Ok(Self {
            cfg,
            gain,
            codebooks,
            seed: kv.require("dataset.seed")?,
            l_b: kv.require("dataset.l_b")?,
            l_u: kv.require("dataset.l_u")?,
            labeler: Labeler::from_kv(kv)?,
            budget: kv.get_or("dataset.budget", DEFAULT_BUDGET)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Seed of the channel draw and of the labeler's random starts.
    pub seed: u64,
    pub planes: Vec<f32>,
    pub labels: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Validation,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamDataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
    pub split: Split,
}

/// Real/imaginary planes of every link matrix, as stored in a sample.
pub fn channel_planes(ch: &ChannelSet) -> Vec<f32> {
    let mut out = Vec::new();
    let mut push = |m: &CMat| {
        for part in 0..2 {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    let z = m[(i, j)];
                    out.push(if part == 0 { z.re as f32 } else { z.im as f32 });
                }
            }
        }
    };
    push(&ch.h_r);
    for h in &ch.h_k {
        push(h);
    }
    out
}

/// Rebuilds `(H_r, [H_k])` from stored planes.
pub fn planes_to_matrices(cfg: &SystemConfig, planes: &[f32]) -> Result<(CMat, Vec<CMat>)> {
    let expected = 2 * (cfg.n_r * cfg.m + cfg.k * cfg.m * cfg.n_t);
    if planes.len() != expected {
        return Err(Error::Shape {
            op: "planes_to_matrices",
            left: vec![planes.len()],
            right: vec![expected],
        });
    }
    let take = |off: usize, rows: usize, cols: usize| {
        let n = rows * cols;
        CMat::from_fn(rows, cols, |i, j| {
            C64::new(planes[off + i * cols + j] as f64, planes[off + n + i * cols + j] as f64)
        })
    };
    let h_r = take(0, cfg.n_r, cfg.m);
    let mut off = 2 * cfg.n_r * cfg.m;
    let mut h_k = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        h_k.push(take(off, cfg.m, cfg.n_t));
        off += 2 * cfg.m * cfg.n_t;
    }
    Ok((h_r, h_k))
}

fn selection_labels(sel: &BeamSelection) -> Vec<u32> {
    sel.flat().into_iter().map(|i| i as u32).collect()
}

/// Splits a flat label vector into a selection.
pub fn labels_to_selection(cfg: &SystemConfig, labels: &[u32]) -> BeamSelection {
    let l: Vec<usize> = labels.iter().map(|&x| x as usize).collect();
    BeamSelection::from_flat(cfg, &l)
}

/// Draws `n_samples` channels and labels each with `labeler`. Sample `t`
/// uses seed `derive_seed(seed, t)`, so the result does not depend on the
/// number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    cfg: &SystemConfig,
    gm: &GainModel,
    cb: &CodebookTriple,
    n_samples: usize,
    seed: u64,
    labeler: Labeler,
    l_b: usize,
    l_u: usize,
    budget: u64,
) -> Result<BeamDataset> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    cfg.validate()?;
    gm.validate()?;
    cb.check(cfg)?;
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|t| {
            let s = derive_seed(seed, t as u64);
            let wrap = |e: Error| Error::Labeler {
                index: t,
                source: Box::new(e),
            };
            let ch = sample_channel_set(cfg, gm, l_b, l_u, s).map_err(wrap)?;
            let sel = labeler.label(&ch, cb, cfg, s, budget).map_err(wrap)?;
            Ok(Sample {
                seed: s,
                planes: channel_planes(&ch),
                labels: selection_labels(&sel),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BeamDataset {
        header: DatasetHeader {
            cfg: cfg.clone(),
            gain: gm.clone(),
            codebooks: cb.clone(),
            seed,
            l_b,
            l_u,
            labeler,
            budget,
        },
        samples,
        split: Split::default(),
    })
}

/// Deterministic shuffled partition into `round(n * train_fraction)` training
/// and the remaining validation samples.
pub fn split_dataset(mut ds: BeamDataset, train_fraction: f64, seed: u64) -> Result<BeamDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n = ds.samples.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} leaves an empty side for {n} samples"
        )));
    }
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let validation = idx.split_off(n_train);
    ds.split = Split {
        train: idx,
        validation,
    };
    Ok(ds)
}

/// Stacked inputs and labels of a group of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `batch_size x sample_len`, row-major.
    pub inputs: Vec<f32>,
    /// `batch_size x label_len`, row-major.
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.indices.len()
    }
}

impl BeamDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: SplitKind) -> Vec<usize> {
        match split {
            SplitKind::Train => self.split.train.iter().map(|&i| i as usize).collect(),
            SplitKind::Validation => self.split.validation.iter().map(|&i| i as usize).collect(),
            SplitKind::All => (0..self.samples.len()).collect(),
        }
    }

    /// Regenerates the full-precision channel of sample `t` from its seed.
    pub fn channel(&self, t: usize) -> Result<ChannelSet> {
        let h = &self.header;
        sample_channel_set(&h.cfg, &h.gain, h.l_b, h.l_u, self.samples[t].seed)
    }

    pub fn selection(&self, t: usize) -> BeamSelection {
        labels_to_selection(&self.header.cfg, &self.samples[t].labels)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let sl = self.header.sample_len();
        let ll = self.header.label_len();
        let mut inputs = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len() * ll);
        for &i in indices {
            inputs.extend_from_slice(&self.samples[i].planes);
            labels.extend_from_slice(&self.samples[i].labels);
        }
        Batch {
            indices: indices.to_vec(),
            inputs,
            labels,
        }
    }

    /// Internal consistency: shapes, label bounds, disjoint split.
    pub fn check(&self) -> Result<()> {
        let h = &self.header;
        let sizes = h.sizes();
        let (k, ms) = (h.cfg.k, h.cfg.m_s);
        for (t, s) in self.samples.iter().enumerate() {
            if s.planes.len() != h.sample_len() || s.labels.len() != h.label_len() {
                return Err(Error::Format(format!("sample {t} has wrong length")));
            }
            for (j, &l) in s.labels.iter().enumerate() {
                let bound = if j < k {
                    sizes.f
                } else if j < k + ms {
                    sizes.s
                } else {
                    sizes.w
                };
                if l as usize >= bound {
                    return Err(Error::Format(format!("sample {t}: label {l} out of range {bound}")));
                }
            }
        }
        let mut seen = vec![false; self.samples.len()];
        for &i in self.split.train.iter().chain(&self.split.validation) {
            let slot = seen
                .get_mut(i as usize)
                .ok_or_else(|| Error::Format(format!("split index {i} out of range")))?;
            if *slot {
                return Err(Error::Format(format!("split index {i} repeated")));
            }
            *slot = true;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header.to_kv().to_canonical();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.seed.to_le_bytes());
            for v in &s.planes {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for l in &s.labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        for list in [&self.split.train, &self.split.validation] {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for i in list {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("missing RBL1 magic".into()));
        }
        let hlen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(hlen)?)
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let header = DatasetHeader::from_kv(&KvMap::parse(text)?)?;
        let (sl, ll) = (header.sample_len(), header.label_len());
        let n = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let seed = r.u64()?;
            let planes = (0..sl).map(|_| r.f32()).collect::<Result<_>>()?;
            let labels = (0..ll).map(|_| r.u32()).collect::<Result<_>>()?;
            samples.push(Sample { seed, planes, labels });
        }
        let mut lists = [Vec::new(), Vec::new()];
        for list in &mut lists {
            let m = r.u32()? as usize;
            *list = (0..m).map(|_| r.u32()).collect::<Result<_>>()?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let [train, validation] = lists;
        let ds = Self {
            header,
            samples,
            split: Split { train, validation },
        };
        ds.check()?;
        Ok(ds)
    }

    /// Writes the binary file and its `.meta.json` sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::write(meta_path(path), self.meta_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable summary.
    pub fn meta_json(&self) -> String {
        let h = &self.header;
        let sizes = h.sizes();
        let mut config = serde_json::Map::new();
        for (k, v) in h.to_kv().iter().filter(|(k, _)| !k.starts_with("codebook.word.")) {
            config.insert(k.to_string(), serde_json::Value::String(v.to_string()));
        }
        let v = serde_json::json!({
            "format": "RBL1",
            "n_samples": self.samples.len(),
            "n_train": self.split.train.len(),
            "n_validation": self.split.validation.len(),
            "sample_len": h.sample_len(),
            "label_len": h.label_len(),
            "codebook_sizes": [sizes.f, sizes.s, sizes.w],
            "codebook_hash": h.codebooks.content_hash(),
            "header": config,
        });
        let mut s = serde_json::to_string_pretty(&v).expect("json value serializes");
        s.push('\n');
        s
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

/// Batches over `split`, covering it exactly once. With `shuffle_seed` the
/// order is a seeded permutation; the last batch may be short.
pub fn iterate_batches(
    ds: &BeamDataset,
    split: SplitKind,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut idx = ds.indices(split);
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut rng_from_seed(seed));
    }
    let chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |c| ds.batch(&c)))
}

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
