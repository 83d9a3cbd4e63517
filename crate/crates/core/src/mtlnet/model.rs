//! The multi-task beam classifier.
//!
//! Every link matrix (`H_r` and each `H_k`) enters as two real planes and
//! passes through the same residual convolution blocks. The refined planes
//! are flattened and projected to a common width `D` (one projection for
//! `H_r`, one shared by all users). From there:
//!
//! * task 1 scores each user's beam from `e_r + e_k` with a head shared
//!   across users;
//! * task 2 scores the RIS subarray beams from all refined planes;
//! * self-attention over the tokens `[e_r, e_1, .., e_K]` yields `H_W`, and
//!   task 3 scores the BS subarray beams from `H_W + [e_r + e_1, ..]`.

use std::f64::consts::PI;

use rand::Rng as _;
use rayon::prelude::*;

use super::ops::{
    conv_bwd, conv_fwd, cross_entropy_fwd_bwd, dot, dropout_mask, linear_bwd, linear_fwd,
    relu_bwd_inplace, relu_inplace, softmax_bwd, softmax_inplace, ConvShape, Mode,
};
use super::tensor::{Scalar, Tensor};
use crate::channel::{subarray_dims, C64};
use crate::config::{CodebookSizes, KvMap, SystemConfig};
use crate::error::{Error, Result};
use crate::metric::BeamSelection;
use crate::rng::{derive_seed, rng_from_seed};
use crate::search::MtlCostSpec;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub n_r: usize,
    pub m: usize,
    pub n_t: usize,
    pub k: usize,
    pub m_s: usize,
    pub n_s: usize,
    pub classes_f: usize,
    pub classes_s: usize,
    pub classes_w: usize,
    /// Planes produced by the first convolution of each residual block.
    pub conv_mid: usize,
    pub kernel: usize,
    pub padding: usize,
    pub res_blocks: usize,
    /// One set of convolution weights for every link, or separate sets for
    /// the reflected link and the (shared) user links.
    pub shared_conv: bool,
    pub embed: usize,
    pub hidden: usize,
    pub d_k: usize,
    pub dropout: f64,
    /// Feed each link through per-subarray unitary DFTs before the network.
    pub beamspace: bool,
}

impl ModelDims {
    pub fn for_system(cfg: &SystemConfig, sizes: CodebookSizes) -> Self {
        Self {
            n_r: cfg.n_r,
            m: cfg.m,
            n_t: cfg.n_t,
            k: cfg.k,
            m_s: cfg.m_s,
            n_s: cfg.n_s,
            classes_f: sizes.f,
            classes_s: sizes.s,
            classes_w: sizes.w,
            conv_mid: 8,
            kernel: 3,
            padding: 1,
            res_blocks: 2,
            shared_conv: true,
            embed: 128,
            hidden: 256,
            d_k: 64,
            dropout: 0.3,
            beamspace: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_r, self.m, self.n_t, self.k, self.m_s, self.n_s, self.classes_f, self.classes_s,
            self.classes_w, self.conv_mid, self.kernel, self.embed, self.hidden, self.d_k,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.kernel % 2 == 0 || 2 * self.padding + 1 != self.kernel {
            return Err(Error::Config(format!(
                "kernel {} with padding {} does not preserve the plane shape required by the residual add",
                self.kernel, self.padding
            )));
        }
        if self.beamspace && (self.n_r % self.n_s != 0 || self.m % self.m_s != 0) {
            return Err(Error::Config(format!(
                "beamspace input needs N_r % N_s == 0 and M % M_s == 0 (got {}/{}, {}/{})",
                self.n_r, self.n_s, self.m, self.m_s
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `(rows, cols)` of link `i`; link 0 is `H_r`, link `1 + k` is `H_k`.
    pub fn link_hw(&self, i: usize) -> (usize, usize) {
        if i == 0 {
            (self.n_r, self.m)
        } else {
            (self.m, self.n_t)
        }
    }

    pub fn n_links(&self) -> usize {
        self.k + 1
    }

    pub fn link_len(&self, i: usize) -> usize {
        let (h, w) = self.link_hw(i);
        2 * h * w
    }

    pub fn input_len(&self) -> usize {
        (0..self.n_links()).map(|i| self.link_len(i)).sum()
    }

    pub fn label_len(&self) -> usize {
        self.k + self.m_s + self.n_s
    }

    /// Output groups per task: `[K, M_s, N_s]`.
    pub fn group_sizes(&self) -> [usize; 3] {
        [self.k, self.m_s, self.n_s]
    }

    fn conv_sets(&self) -> usize {
        if self.shared_conv {
            1
        } else {
            2
        }
    }

    fn conv_set(&self, link: usize) -> usize {
        if self.shared_conv || link == 0 {
            0
        } else {
            1
        }
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("model.n_r", self.n_r);
        kv.set("model.m", self.m);
        kv.set("model.n_t", self.n_t);
        kv.set("model.k", self.k);
        kv.set("model.m_s", self.m_s);
        kv.set("model.n_s", self.n_s);
        kv.set("model.classes_f", self.classes_f);
        kv.set("model.classes_s", self.classes_s);
        kv.set("model.classes_w", self.classes_w);
        kv.set("model.conv_mid", self.conv_mid);
        kv.set("model.kernel", self.kernel);
        kv.set("model.padding", self.padding);
        kv.set("model.res_blocks", self.res_blocks);
        kv.set("model.shared_conv", self.shared_conv);
        kv.set("model.embed", self.embed);
        kv.set("model.hidden", self.hidden);
        kv.set("model.d_k", self.d_k);
        kv.set("model.dropout", self.dropout);
        kv.set("model.beamspace", self.beamspace);
    }

    /// Reads `model.*` keys, falling back to `base` for absent ones.
    pub fn from_kv(kv: &KvMap, base: &ModelDims) -> Result<Self> {
        let d = Self {
            n_r: kv.get_or("model.n_r", base.n_r)?,
            m: kv.get_or("model.m", base.m)?,
            n_t: kv.get_or("model.n_t", base.n_t)?,
            k: kv.get_or("model.k", base.k)?,
            m_s: kv.get_or("model.m_s", base.m_s)?,
            n_s: kv.get_or("model.n_s", base.n_s)?,
            classes_f: kv.get_or("model.classes_f", base.classes_f)?,
            classes_s: kv.get_or("model.classes_s", base.classes_s)?,
            classes_w: kv.get_or("model.classes_w", base.classes_w)?,
            conv_mid: kv.get_or("model.conv_mid", base.conv_mid)?,
            kernel: kv.get_or("model.kernel", base.kernel)?,
            padding: kv.get_or("model.padding", base.padding)?,
            res_blocks: kv.get_or("model.res_blocks", base.res_blocks)?,
            shared_conv: kv.get_or("model.shared_conv", base.shared_conv)?,
            embed: kv.get_or("model.embed", base.embed)?,
            hidden: kv.get_or("model.hidden", base.hidden)?,
            d_k: kv.get_or("model.d_k", base.d_k)?,
            dropout: kv.get_or("model.dropout", base.dropout)?,
            beamspace: kv.get_or("model.beamspace", base.beamspace)?,
        };
        d.validate()?;
        Ok(d)
    }

    /// Layer inventory for multiplication counting of one prediction.
    pub fn cost_spec(&self) -> MtlCostSpec {
        let mut conv_layers = Vec::new();
        for _ in 0..self.res_blocks {
            conv_layers.push((2, self.conv_mid, self.kernel));
            conv_layers.push((self.conv_mid, 2, self.kernel));
        }
        let (d, h, k) = (self.embed, self.hidden, self.k);
        let mut fc = vec![(self.link_len(0), d)];
        for _ in 0..k {
            fc.push((self.link_len(1), d));
            fc.push((d, h));
            fc.push((h, self.classes_f));
        }
        fc.push((self.input_len(), h));
        fc.push((h, self.m_s * self.classes_s));
        for _ in 0..3 * (k + 1) {
            fc.push((d, self.d_k));
        }
        fc.push(((k + 1) * self.d_k, k + 1));
        fc.push(((k + 1) * (k + 1), self.d_k));
        fc.push(((k + 1) * self.d_k, k * d));
        fc.push((k * d, h));
        fc.push((h, self.n_s * self.classes_w));
        MtlCostSpec {
            conv_layers,
            padding: self.padding,
            fc_layers: fc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    /// `[set][block] -> (conv1 w, conv1 b, conv2 w, conv2 b)`.
    conv: Vec<Vec<[usize; 4]>>,
    emb_r: [usize; 2],
    emb_u: [usize; 2],
    t1: [usize; 4],
    t2: [usize; 4],
    /// Query, key, value and output maps, weight then bias.
    att: [usize; 8],
    t3: [usize; 4],
}

impl Layout {
    /// Parameter shapes in declaration order, each with its fan-in.
    fn build(d: &ModelDims) -> (Self, Vec<(String, Vec<usize>, usize)>) {
        let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize| {
            specs.push((name, shape, fan_in));
            specs.len() - 1
        };
        let ker = d.kernel;
        let mut conv = Vec::new();
        for set in 0..d.conv_sets() {
            let mut blocks = Vec::new();
            for b in 0..d.res_blocks {
                let p = format!("conv{set}.block{b}");
                let fan1 = 2 * ker * ker;
                let fan2 = d.conv_mid * ker * ker;
                blocks.push([
                    add(format!("{p}.conv1.weight"), vec![d.conv_mid, 2, ker, ker], fan1),
                    add(format!("{p}.conv1.bias"), vec![d.conv_mid], fan1),
                    add(format!("{p}.conv2.weight"), vec![2, d.conv_mid, ker, ker], fan2),
                    add(format!("{p}.conv2.bias"), vec![2], fan2),
                ]);
            }
            conv.push(blocks);
        }
        let mut lin = |name: &str, n_in: usize, n_out: usize| -> [usize; 2] {
            [
                add(format!("{name}.weight"), vec![n_out, n_in], n_in),
                add(format!("{name}.bias"), vec![n_out], n_in),
            ]
        };
        let emb_r = lin("embed_r", d.link_len(0), d.embed);
        let emb_u = lin("embed_u", d.link_len(1), d.embed);
        let a = lin("task1.fc1", d.embed, d.hidden);
        let b = lin("task1.fc2", d.hidden, d.classes_f);
        let t1 = [a[0], a[1], b[0], b[1]];
        let a = lin("task2.fc1", d.input_len(), d.hidden);
        let b = lin("task2.fc2", d.hidden, d.m_s * d.classes_s);
        let t2 = [a[0], a[1], b[0], b[1]];
        let q = lin("attn.query", d.embed, d.d_k);
        let k = lin("attn.key", d.embed, d.d_k);
        let v = lin("attn.value", d.embed, d.d_k);
        let o = lin("attn.out", (d.k + 1) * d.d_k, d.k * d.embed);
        let att = [q[0], q[1], k[0], k[1], v[0], v[1], o[0], o[1]];
        let a = lin("task3.fc1", d.k * d.embed, d.hidden);
        let b = lin("task3.fc2", d.hidden, d.n_s * d.classes_w);
        let t3 = [a[0], a[1], b[0], b[1]];
        (
            Self {
                conv,
                emb_r,
                emb_u,
                t1,
                t2,
                att,
                t3,
            },
            specs,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtlModel<T> {
    pub dims: ModelDims,
    /// Parameter tensors in declaration order.
    pub params: Vec<Tensor<T>>,
    names: Vec<String>,
    layout: Layout,
}

/// Per-parameter gradient buffers, index-aligned with `MtlModel::params`.
pub type Grads<T> = Vec<Vec<T>>;

/// Logits of one sample: `K x |F|`, `M_s x |S|`, `N_s x |W|`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLogits<T> {
    pub users: Vec<T>,
    pub ris: Vec<T>,
    pub bs: Vec<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Vec<T>,
    act: Vec<T>,
}

#[derive(Clone, Debug)]
struct HeadCache<T> {
    input: Vec<T>,
    act: Vec<T>,
    mask: Option<Vec<T>>,
    dropped: Vec<T>,
}

#[derive(Clone, Debug)]
struct AttCache<T> {
    tokens: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    a: Vec<T>,
    o: Vec<T>,
    hw: Vec<T>,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct SampleCache<T> {
    blocks: Vec<Vec<BlockCache<T>>>,
    feat: Vec<Vec<T>>,
    t1: Vec<HeadCache<T>>,
    t2: HeadCache<T>,
    att: AttCache<T>,
    t3: HeadCache<T>,
}

/// Scales each link's two planes to unit root-mean-square.
pub fn prepare_input<T: Scalar>(dims: &ModelDims, planes: &[f32]) -> Result<Vec<T>> {
    if planes.len() != dims.input_len() {
        return Err(Error::Shape {
            op: "prepare_input",
            left: vec![planes.len()],
            right: vec![dims.input_len()],
        });
    }
    let mut out = Vec::with_capacity(planes.len());
    let mut off = 0;
    for i in 0..dims.n_links() {
        let n = dims.link_len(i);
        let mut chunk: Vec<f64> = planes[off..off + n].iter().map(|&v| v as f64).collect();
        if dims.beamspace {
            let (h, w) = dims.link_hw(i);
            let ris = subarray_dims(dims.m, dims.m / dims.m_s);
            let (rb, cb) = if i == 0 {
                (subarray_dims(dims.n_r, dims.n_r / dims.n_s), ris)
            } else {
                (ris, subarray_dims(dims.n_t, dims.n_t))
            };
            chunk = beamspace_link(&chunk, h, w, rb, cb);
        }
        let ms: f64 = chunk.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
        out.extend(chunk.iter().map(|&v| T::lit(v * scale)));
        off += n;
    }
    Ok(out)
}

/// Unitary DFT over an `nx x ny` subarray, Kronecker over both axes.
fn dft_matrix((nx, ny): (usize, usize)) -> Vec<C64> {
    let n = nx * ny;
    let one = |len: usize, a: usize, b: usize| {
        C64::from_polar(1.0 / (len as f64).sqrt(), -2.0 * PI * (a * b) as f64 / len as f64)
    };
    let mut d = vec![C64::new(0.0, 0.0); n * n];
    for (r, row) in d.chunks_mut(n).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = one(nx, r / ny, c / ny) * one(ny, r % ny, c % ny);
        }
    }
    d
}

/// `blockdiag(D_rb) · H · blockdiag(D_cb)^T` on a re/im plane pair.
fn beamspace_link(
    planes: &[f64],
    h: usize,
    w: usize,
    row_dims: (usize, usize),
    col_dims: (usize, usize),
) -> Vec<f64> {
    let hw = h * w;
    let (rb, cb) = (row_dims.0 * row_dims.1, col_dims.0 * col_dims.1);
    let m: Vec<C64> = (0..hw).map(|i| C64::new(planes[i], planes[hw + i])).collect();
    let (dr, dc) = (dft_matrix(row_dims), dft_matrix(col_dims));
    let mut rows = vec![C64::new(0.0, 0.0); hw];
    for i in 0..h {
        let (blk, a) = (i / rb, i % rb);
        for j in 0..w {
            rows[i * w + j] = (0..rb).map(|b| dr[a * rb + b] * m[(blk * rb + b) * w + j]).sum();
        }
    }
    let mut out = vec![0.0; 2 * hw];
    for i in 0..h {
        for j in 0..w {
            let (blk, a) = (j / cb, j % cb);
            let z: C64 = (0..cb).map(|b| rows[i * w + blk * cb + b] * dc[a * cb + b]).sum();
            out[i * w + j] = z.re;
            out[hw + i * w + j] = z.im;
        }
    }
    out
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest logit in each consecutive group of `classes`.
pub fn group_argmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<usize> {
    logits.chunks(classes).map(argmax).collect()
}

impl<T: Scalar> MtlModel<T> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization, seeded.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let (layout, specs) = Layout::build(&dims);
        let mut rng = rng_from_seed(seed);
        let mut params = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for (name, shape, fan_in) in specs {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
            params.push(Tensor::new(&shape, data)?);
            names.push(name);
        }
        Ok(Self {
            dims,
            params,
            names,
            layout,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::zero(); p.numel()]).collect()
    }

    /// Sets every convolution weight and bias to zero.
    pub fn zero_conv(&mut self) {
        for set in &self.layout.conv {
            for block in set {
                for &i in block {
                    self.params[i].data.iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> MtlModel<U> {
        MtlModel {
            dims: self.dims.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces all parameters, checking shapes.
    pub fn load_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape {
                op: "load_params",
                left: vec![params.len()],
                right: vec![self.params.len()],
            });
        }
        for (new, old) in params.iter().zip(&self.params) {
            new.expect_shape("load_params", &old.shape)?;
        }
        self.params = params;
        Ok(())
    }

    fn p(&self, i: usize) -> &[T] {
        &self.params[i].data
    }

    fn link_offset(&self, link: usize) -> usize {
        (0..link).map(|i| self.dims.link_len(i)).sum()
    }

    fn conv_shape(&self, link: usize, cin: usize, cout: usize) -> ConvShape {
        let (h, w) = self.dims.link_hw(link);
        ConvShape {
            cin,
            cout,
            h,
            w,
            kh: self.dims.kernel,
            kw: self.dims.kernel,
            pad: self.dims.padding,
        }
    }

    /// Residual blocks on one link: `x <- C2(relu(C1(x))) + x`, repeated.
    fn shared_link(&self, link: usize, x: &[T]) -> (Vec<T>, Vec<BlockCache<T>>) {
        let set = &self.layout.conv[self.dims.conv_set(link)];
        let s1 = self.conv_shape(link, 2, self.dims.conv_mid);
        let s2 = self.conv_shape(link, self.dims.conv_mid, 2);
        let (h, w) = self.dims.link_hw(link);
        let mut cur = x.to_vec();
        let mut caches = Vec::with_capacity(set.len());
        for &[w1, b1, w2, b2] in set {
            let mut act = vec![T::zero(); self.dims.conv_mid * h * w];
            conv_fwd(s1, &cur, self.p(w1), self.p(b1), &mut act);
            relu_inplace(&mut act);
            let mut out = vec![T::zero(); 2 * h * w];
            conv_fwd(s2, &act, self.p(w2), self.p(b2), &mut out);
            for (o, c) in out.iter_mut().zip(&cur) {
                *o += *c;
            }
            caches.push(BlockCache { input: cur, act });
            cur = out;
        }
        (cur, caches)
    }

    /// Refined planes of every link for a prepared input.
    pub fn shared_forward(&self, input: &[T]) -> Result<Vec<Vec<T>>> {
        self.check_input(input)?;
        Ok((0..self.dims.n_links())
            .map(|i| {
                let off = self.link_offset(i);
                self.shared_link(i, &input[off..off + self.dims.link_len(i)]).0
            })
            .collect())
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.dims.input_len() {
            return Err(Error::Shape {
                op: "forward",
                left: vec![input.len()],
                right: vec![self.dims.input_len()],
            });
        }
        Ok(())
    }

    fn head(&self, ids: [usize; 4], input: Vec<T>, mode: Mode, seed: u64, logits: &mut [T]) -> HeadCache<T> {
        let [w1, b1, w2, b2] = ids;
        let mut act = vec![T::zero(); self.dims.hidden];
        linear_fwd(self.p(w1), self.p(b1), &input, &mut act);
        relu_inplace(&mut act);
        let mask = (mode == Mode::Train && self.dims.dropout > 0.0)
            .then(|| dropout_mask::<T>(act.len(), self.dims.dropout, seed));
        let dropped = match &mask {
            Some(m) => act.iter().zip(m).map(|(a, b)| *a * *b).collect(),
            None => act.clone(),
        };
        linear_fwd(self.p(w2), self.p(b2), &dropped, logits);
        HeadCache {
            input,
            act,
            mask,
            dropped,
        }
    }

    fn head_bwd(&self, ids: [usize; 4], c: &HeadCache<T>, dlogits: &[T], g: &mut Grads<T>, dx: &mut [T]) {
        let [w1, b1, w2, b2] = ids;
        let mut dd = vec![T::zero(); self.dims.hidden];
        let (gw2, gb2) = two_mut(g, w2, b2);
        linear_bwd(self.p(w2), &c.dropped, dlogits, gw2, gb2, Some(&mut dd));
        if let Some(m) = &c.mask {
            dd.iter_mut().zip(m).for_each(|(a, b)| *a *= *b);
        }
        relu_bwd_inplace(&c.act, &mut dd);
        let (gw1, gb1) = two_mut(g, w1, b1);
        linear_bwd(self.p(w1), &c.input, &dd, gw1, gb1, Some(dx));
    }

    /// Self-attention over `[e_r, e_1, .., e_K]`; returns `H_W` (length `K D`).
    fn attention(&self, emb: &[Vec<T>]) -> AttCache<T> {
        let (n, dk) = (emb.len(), self.dims.d_k);
        let [wq, bq, wk, bk, wv, bv, wo, bo] = self.layout.att;
        let tokens: Vec<T> = emb.concat();
        let d = self.dims.embed;
        let mut q = vec![T::zero(); n * dk];
        let mut k = vec![T::zero(); n * dk];
        let mut v = vec![T::zero(); n * dk];
        for i in 0..n {
            let x = &tokens[i * d..(i + 1) * d];
            linear_fwd(self.p(wq), self.p(bq), x, &mut q[i * dk..(i + 1) * dk]);
            linear_fwd(self.p(wk), self.p(bk), x, &mut k[i * dk..(i + 1) * dk]);
            linear_fwd(self.p(wv), self.p(bv), x, &mut v[i * dk..(i + 1) * dk]);
        }
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut a = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = dot(&q[i * dk..(i + 1) * dk], &k[j * dk..(j + 1) * dk]) * scale;
            }
            softmax_inplace(&mut a[i * n..(i + 1) * n]);
        }
        let mut o = vec![T::zero(); n * dk];
        for i in 0..n {
            for j in 0..n {
                let aij = a[i * n + j];
                for c in 0..dk {
                    o[i * dk + c] += aij * v[j * dk + c];
                }
            }
        }
        let mut hw = vec![T::zero(); self.dims.k * d];
        linear_fwd(self.p(wo), self.p(bo), &o, &mut hw);
        relu_inplace(&mut hw);
        AttCache {
            tokens,
            q,
            k,
            v,
            a,
            o,
            hw,
        }
    }

    /// Adds the attention input gradient into `demb` (token-major).
    fn attention_bwd(&self, c: &AttCache<T>, dhw: &[T], g: &mut Grads<T>, demb: &mut [T]) {
        let n = self.dims.k + 1;
        let (d, dk) = (self.dims.embed, self.dims.d_k);
        let [wq, bq, wk, bk, wv, bv, wo, bo] = self.layout.att;
        let mut dpre = dhw.to_vec();
        relu_bwd_inplace(&c.hw, &mut dpre);
        let mut do_ = vec![T::zero(); n * dk];
        let (gw, gb) = two_mut(g, wo, bo);
        linear_bwd(self.p(wo), &c.o, &dpre, gw, gb, Some(&mut do_));
        let mut da = vec![T::zero(); n * n];
        let mut dv = vec![T::zero(); n * dk];
        for i in 0..n {
            let doi = &do_[i * dk..(i + 1) * dk];
            for j in 0..n {
                da[i * n + j] = dot(doi, &c.v[j * dk..(j + 1) * dk]);
                let aij = c.a[i * n + j];
                for t in 0..dk {
                    dv[j * dk + t] += aij * doi[t];
                }
            }
        }
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut ds = vec![T::zero(); n * n];
        for i in 0..n {
            softmax_bwd(&c.a[i * n..(i + 1) * n], &da[i * n..(i + 1) * n], &mut ds[i * n..(i + 1) * n]);
        }
        ds.iter_mut().for_each(|v| *v *= scale);
        let mut dq = vec![T::zero(); n * dk];
        let mut dkk = vec![T::zero(); n * dk];
        for i in 0..n {
            for j in 0..n {
                let s = ds[i * n + j];
                for t in 0..dk {
                    dq[i * dk + t] += s * c.k[j * dk + t];
                    dkk[j * dk + t] += s * c.q[i * dk + t];
                }
            }
        }
        for i in 0..n {
            let x = &c.tokens[i * d..(i + 1) * d];
            let dx = &mut demb[i * d..(i + 1) * d];
            for (w, b, grad) in [(wq, bq, &dq), (wk, bk, &dkk), (wv, bv, &dv)] {
                let (gw, gb) = two_mut(g, w, b);
                linear_bwd(self.p(w), x, &grad[i * dk..(i + 1) * dk], gw, gb, Some(&mut *dx));
            }
        }
    }

    /// Full forward pass of one prepared sample. `seed` drives dropout.
    pub fn forward(&self, input: &[T], mode: Mode, seed: u64) -> Result<(TaskLogits<T>, SampleCache<T>)> {
        self.check_input(input)?;
        let dm = &self.dims;
        let (d, kk) = (dm.embed, dm.k);
        let mut blocks = Vec::with_capacity(dm.n_links());
        let mut feat = Vec::with_capacity(dm.n_links());
        for i in 0..dm.n_links() {
            let off = self.link_offset(i);
            let (f, c) = self.shared_link(i, &input[off..off + dm.link_len(i)]);
            feat.push(f);
            blocks.push(c);
        }
        let emb: Vec<Vec<T>> = feat
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let [w, b] = if i == 0 { self.layout.emb_r } else { self.layout.emb_u };
                let mut e = vec![T::zero(); d];
                linear_fwd(self.p(w), self.p(b), f, &mut e);
                e
            })
            .collect();
        let z: Vec<Vec<T>> = (0..kk)
            .map(|k| emb[0].iter().zip(&emb[k + 1]).map(|(a, b)| *a + *b).collect())
            .collect();

        let mut users = vec![T::zero(); kk * dm.classes_f];
        let t1 = (0..kk)
            .map(|k| {
                let out = &mut users[k * dm.classes_f..(k + 1) * dm.classes_f];
                self.head(self.layout.t1, z[k].clone(), mode, derive_seed(seed, k as u64), out)
            })
            .collect();
        let mut ris = vec![T::zero(); dm.m_s * dm.classes_s];
        let t2 = self.head(self.layout.t2, feat.concat(), mode, derive_seed(seed, 1000), &mut ris);
        let att = self.attention(&emb);
        let t3_in: Vec<T> = att.hw.iter().zip(z.concat()).map(|(a, b)| *a + b).collect();
        let mut bs = vec![T::zero(); dm.n_s * dm.classes_w];
        let t3 = self.head(self.layout.t3, t3_in, mode, derive_seed(seed, 2000), &mut bs);
        Ok((
            TaskLogits { users, ris, bs },
            SampleCache {
                blocks,
                feat,
                t1,
                t2,
                att,
                t3,
            },
        ))
    }

    /// Backpropagates logit gradients into `g` (accumulating).
    pub fn backward(&self, cache: &SampleCache<T>, dlogits: &TaskLogits<T>, g: &mut Grads<T>) {
        let dm = &self.dims;
        let (d, kk) = (dm.embed, dm.k);
        let mut demb = vec![T::zero(); (kk + 1) * d];

        let mut du = vec![T::zero(); kk * d];
        self.head_bwd(self.layout.t3, &cache.t3, &dlogits.bs, g, &mut du);
        self.attention_bwd(&cache.att, &du, g, &mut demb);
        let mut dz = du;
        for k in 0..kk {
            let rows = &dlogits.users[k * dm.classes_f..(k + 1) * dm.classes_f];
            self.head_bwd(self.layout.t1, &cache.t1[k], rows, g, &mut dz[k * d..(k + 1) * d]);
        }
        for k in 0..kk {
            for t in 0..d {
                let v = dz[k * d + t];
                demb[t] += v;
                demb[(k + 1) * d + t] += v;
            }
        }

        let mut dfeat = vec![T::zero(); dm.input_len()];
        self.head_bwd(self.layout.t2, &cache.t2, &dlogits.ris, g, &mut dfeat);
        for i in 0..dm.n_links() {
            let off = self.link_offset(i);
            let n = dm.link_len(i);
            let [w, b] = if i == 0 { self.layout.emb_r } else { self.layout.emb_u };
            let (gw, gb) = two_mut(g, w, b);
            linear_bwd(
                self.p(w),
                &cache.feat[i],
                &demb[i * d..(i + 1) * d],
                gw,
                gb,
                Some(&mut dfeat[off..off + n]),
            );
            let set = &self.layout.conv[dm.conv_set(i)];
            let s1 = self.conv_shape(i, 2, dm.conv_mid);
            let s2 = self.conv_shape(i, dm.conv_mid, 2);
            let mut dh = dfeat[off..off + n].to_vec();
            for (bc, &[w1, b1, w2, b2]) in cache.blocks[i].iter().zip(set).rev() {
                let mut dact = vec![T::zero(); bc.act.len()];
                let (gw2, gb2) = two_mut(g, w2, b2);
                conv_bwd(s2, &bc.act, self.p(w2), &dh, gw2, gb2, Some(&mut dact));
                relu_bwd_inplace(&bc.act, &mut dact);
                let mut din = dh;
                let (gw1, gb1) = two_mut(g, w1, b1);
                conv_bwd(s1, &bc.input, self.p(w1), &dact, gw1, gb1, Some(&mut din));
                dh = din;
            }
        }
    }

    /// Per-task mean group cross-entropy of one sample and, if `grad_scale`
    /// is given, the logit gradients of `grad_scale * (L1 + L2 + L3) / 3`.
    pub fn sample_loss(&self, logits: &TaskLogits<T>, labels: &[u32], grad_scale: T) -> ([T; 3], TaskLogits<T>) {
        let dm = &self.dims;
        let l: Vec<usize> = labels.iter().map(|&v| v as usize).collect();
        let (k, ms) = (dm.k, dm.m_s);
        let third = grad_scale / T::lit(3.0);
        let mut d = TaskLogits {
            users: vec![T::zero(); logits.users.len()],
            ris: vec![T::zero(); logits.ris.len()],
            bs: vec![T::zero(); logits.bs.len()],
        };
        let l1 = cross_entropy_fwd_bwd(&logits.users, dm.classes_f, &l[..k], third, &mut d.users);
        let l2 = cross_entropy_fwd_bwd(&logits.ris, dm.classes_s, &l[k..k + ms], third, &mut d.ris);
        let l3 = cross_entropy_fwd_bwd(&logits.bs, dm.classes_w, &l[k + ms..], third, &mut d.bs);
        ([l1, l2, l3], d)
    }

    fn check_labels(&self, labels: &[u32]) -> Result<()> {
        let dm = &self.dims;
        if labels.len() != dm.label_len() {
            return Err(Error::Shape {
                op: "labels",
                left: vec![labels.len()],
                right: vec![dm.label_len()],
            });
        }
        for (j, &l) in labels.iter().enumerate() {
            let bound = if j < dm.k {
                dm.classes_f
            } else if j < dm.k + dm.m_s {
                dm.classes_s
            } else {
                dm.classes_w
            };
            if l as usize >= bound {
                return Err(Error::InvalidArgument(format!("label {l} >= {bound}")));
            }
        }
        Ok(())
    }

    /// Mean per-task losses over a batch and the gradient of their mean.
    /// Per-sample gradients are summed in sample order, so the result does
    /// not depend on the number of worker threads.
    pub fn batch_gradients(
        &self,
        inputs: &[Vec<T>],
        labels: &[&[u32]],
        mode: Mode,
        seeds: &[u64],
    ) -> Result<([T; 3], Grads<T>)> {
        if inputs.len() != labels.len() || inputs.len() != seeds.len() || inputs.is_empty() {
            return Err(Error::InvalidArgument("batch inputs, labels and seeds must be non-empty and aligned".into()));
        }
        for l in labels {
            self.check_labels(l)?;
        }
        let scale = T::one() / T::lit(inputs.len() as f64);
        let per: Vec<([T; 3], Grads<T>)> = (0..inputs.len())
            .into_par_iter()
            .map(|i| {
                let (logits, cache) = self.forward(&inputs[i], mode, seeds[i])?;
                let (loss, d) = self.sample_loss(&logits, labels[i], scale);
                let mut g = self.zero_grads();
                self.backward(&cache, &d, &mut g);
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mut it = per.into_iter();
        let (mut loss, mut grads) = it.next().expect("non-empty batch");
        loss.iter_mut().for_each(|v| *v *= scale);
        for (l, g) in it {
            for t in 0..3 {
                loss[t] += l[t] * scale;
            }
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += *b;
                }
            }
        }
        Ok((loss, grads))
    }

    /// `L_MTL` of a batch without gradients.
    pub fn total_loss(&self, inputs: &[Vec<T>], labels: &[&[u32]], mode: Mode, seeds: &[u64]) -> Result<T> {
        let mut acc = T::zero();
        for i in 0..inputs.len() {
            self.check_labels(labels[i])?;
            let (logits, _) = self.forward(&inputs[i], mode, seeds[i])?;
            let (l, _) = self.sample_loss(&logits, labels[i], T::zero());
            acc += (l[0] + l[1] + l[2]) / T::lit(3.0);
        }
        Ok(acc / T::lit(inputs.len() as f64))
    }

    /// Group-wise argmax of the evaluation-mode logits.
    pub fn predict_labels(&self, input: &[T]) -> Result<Vec<usize>> {
        let (lg, _) = self.forward(input, Mode::Eval, 0)?;
        let dm = &self.dims;
        let mut out = group_argmax(&lg.users, dm.classes_f);
        out.extend(group_argmax(&lg.ris, dm.classes_s));
        out.extend(group_argmax(&lg.bs, dm.classes_w));
        Ok(out)
    }

    pub fn predict_selection_from_planes(&self, planes: &[f32]) -> Result<BeamSelection> {
        let l = self.predict_labels(&prepare_input(&self.dims, planes)?)?;
        let (k, ms) = (self.dims.k, self.dims.m_s);
        Ok(BeamSelection::new(l[..k].to_vec(), l[k..k + ms].to_vec(), l[k + ms..].to_vec()))
    }
}

fn two_mut<T>(g: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b, "weight precedes bias in declaration order");
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
