//! Combinatorial beam selection: exhaustive search, iterative alternating
//! search over the three codeword blocks, and a uniformly random baseline.
//!
//! Every search breaks ties towards the lexicographically smallest index
//! tuple `(f..., s..., w...)`, so results are independent of how candidates
//! are distributed over worker threads.

pub mod complexity;

use rayon::prelude::*;

use crate::channel::{ChannelSet, C64};
use crate::codebook::CodebookTriple;
use crate::config::{CodebookSizes, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg::gram_into;
use crate::metric::{det_ratio_diag, BeamSelection};
use crate::rng::{derive_seed, rng_from_seed};

pub use complexity::{multiply_cost, CostAlgorithm, MtlCostSpec};

/// Default cap on the number of candidates a single enumeration may visit.
pub const DEFAULT_BUDGET: u64 = 10_000_000;
pub const DEFAULT_T_MAX: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchReport {
    pub best_selection: BeamSelection,
    pub best_rate: f64,
    pub candidates_evaluated: u64,
    /// Closed-form multiplication count of the candidates visited.
    pub multiply_count: u128,
    /// Completed alternating iterations (1 for the non-iterative searches).
    pub iterations: usize,
    pub converged: bool,
    /// Best rate after every block sweep (alternating search only).
    pub trace: Vec<f64>,
}

/// Precomputed per-codeword projections of one channel realization.
///
/// `Hbar[n][k] = sum_m bs[n][w_n][m] * rho * s[s_j(m)][m mod M_B] * user[k][f_k][m]`.
pub struct CandidateEvaluator<'a> {
    cfg: &'a SystemConfig,
    sizes: CodebookSizes,
    snr_scale: f64,
    /// `H_k f` for every user and user codeword, each of length M.
    user: Vec<Vec<Vec<C64>>>,
    /// `w H_r[block n]` for every BS subarray and codeword, each of length M.
    bs: Vec<Vec<Vec<C64>>>,
    /// RIS codewords scaled by the reflect amplitude.
    ris: Vec<Vec<C64>>,
}

/// Scratch buffers for one evaluating thread.
pub struct Scratch {
    hbar: Vec<C64>,
    gram: Vec<C64>,
    det: Vec<C64>,
    row: Vec<C64>,
}

impl<'a> CandidateEvaluator<'a> {
    pub fn new(ch: &ChannelSet, cb: &CodebookTriple, cfg: &'a SystemConfig) -> Result<Self> {
        cfg.validate()?;
        ch.check(cfg)?;
        cb.check(cfg)?;
        let (m, nt, nb) = (cfg.m, cfg.n_t, cfg.n_b);
        let user = ch
            .h_k
            .iter()
            .map(|h| {
                cb.f.iter()
                    .map(|f| (0..m).map(|i| (0..nt).map(|t| h[(i, t)] * f[t]).sum()).collect())
                    .collect()
            })
            .collect();
        let bs = (0..cfg.n_s)
            .map(|n| {
                cb.w.iter()
                    .map(|w| {
                        (0..m)
                            .map(|j| (0..nb).map(|b| w[b] * ch.h_r[(n * nb + b, j)]).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let rho = cfg.reflect_amplitude;
        let ris = cb
            .s
            .iter()
            .map(|s| s.iter().map(|z| z * rho).collect())
            .collect();
        Ok(Self {
            cfg,
            sizes: cb.sizes(),
            snr_scale: cfg.snr_scale(),
            user,
            bs,
            ris,
        })
    }

    pub fn sizes(&self) -> CodebookSizes {
        self.sizes
    }

    pub fn scratch(&self) -> Scratch {
        let k = self.cfg.k;
        Scratch {
            hbar: vec![C64::new(0.0, 0.0); self.cfg.n_s * k],
            gram: vec![C64::new(0.0, 0.0); k * k],
            det: vec![C64::new(0.0, 0.0); k * k],
            row: vec![C64::new(0.0, 0.0); self.cfg.m],
        }
    }

    /// Sum rate of `(f, s, w)`, or `-inf` when the Gram matrix is singular.
    pub fn rate(&self, f: &[usize], s: &[usize], w: &[usize], sc: &mut Scratch) -> f64 {
        let (k, ns, mb) = (self.cfg.k, self.cfg.n_s, self.cfg.m_b);
        for n in 0..ns {
            let bs = &self.bs[n][w[n]];
            for (j, &sj) in s.iter().enumerate() {
                let word = &self.ris[sj];
                for b in 0..mb {
                    sc.row[j * mb + b] = bs[j * mb + b] * word[b];
                }
            }
            for kk in 0..k {
                let u = &self.user[kk][f[kk]];
                sc.hbar[n * k + kk] = sc.row.iter().zip(u).map(|(a, b)| a * b).sum();
            }
        }
        gram_into(&sc.hbar, ns, k, &mut sc.gram);
        match det_ratio_diag(&sc.gram, k, &mut sc.det) {
            Ok(diag) => {
                let mut rate = 0.0;
                for d in diag {
                    if !(d > 0.0 && d.is_finite()) {
                        return f64::NEG_INFINITY;
                    }
                    rate += (1.0 + self.snr_scale / d).log2();
                }
                if rate.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    rate
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    pub fn rate_of(&self, sel: &BeamSelection) -> f64 {
        let mut sc = self.scratch();
        self.rate(&sel.f_idx, &sel.s_idx, &sel.w_idx, &mut sc)
    }
}

/// Writes the mixed-radix digits of `index` into `out`, most significant first.
fn decode(mut index: u64, radix: &[usize], out: &mut [usize]) {
    for (d, &r) in out.iter_mut().zip(radix).rev() {
        *d = (index % r as u64) as usize;
        index /= r as u64;
    }
}

fn better(a: (f64, u64), b: (f64, u64)) -> (f64, u64) {
    if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
        a
    } else {
        b
    }
}

fn check_budget(count: u128, budget: u64) -> Result<u64> {
    if count > budget as u128 {
        Err(Error::BudgetExceeded { count, budget })
    } else {
        Ok(count as u64)
    }
}

/// Global maximizer over the full Cartesian product of the three codebooks.
pub fn exhaustive_search(
    ch: &ChannelSet,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
    budget: u64,
) -> Result<SearchReport> {
    let ev = CandidateEvaluator::new(ch, cb, cfg)?;
    let sizes = ev.sizes();
    let total = check_budget(complexity::es_candidates(cfg, sizes), budget)?;
    let radix: Vec<usize> = std::iter::repeat_n(sizes.f, cfg.k)
        .chain(std::iter::repeat_n(sizes.s, cfg.m_s))
        .chain(std::iter::repeat_n(sizes.w, cfg.n_s))
        .collect();
    let (k, ms) = (cfg.k, cfg.m_s);
    let (best_rate, best_index) = (0..total)
        .into_par_iter()
        .map_init(
            || (ev.scratch(), vec![0usize; radix.len()]),
            |(sc, digits), i| {
                decode(i, &radix, digits);
                let r = ev.rate(&digits[..k], &digits[k..k + ms], &digits[k + ms..], sc);
                (r, i)
            },
        )
        .reduce(|| (f64::NEG_INFINITY, u64::MAX), better);
    let mut digits = vec![0usize; radix.len()];
    decode(best_index.min(total - 1), &radix, &mut digits);
    let best_selection = BeamSelection::new(
        digits[..k].to_vec(),
        digits[k..k + ms].to_vec(),
        digits[k + ms..].to_vec(),
    );
    Ok(SearchReport {
        best_selection,
        best_rate,
        candidates_evaluated: total,
        multiply_count: total as u128 * complexity::o3(cfg),
        iterations: 1,
        converged: true,
        trace: vec![best_rate],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Users,
    Ris,
    Bs,
}

/// Starting point of the alternating search.
#[derive(Clone, Debug, PartialEq)]
pub enum IasInit {
    Selection(BeamSelection),
    /// Uniformly random valid selection drawn from this seed.
    Seeded(u64),
}

fn sweep_block(
    ev: &CandidateEvaluator,
    sel: &BeamSelection,
    block: Block,
    budget: u64,
) -> Result<(Vec<usize>, f64, u64)> {
    let sizes = ev.sizes();
    let (len, radix_one) = match block {
        Block::Users => (sel.f_idx.len(), sizes.f),
        Block::Ris => (sel.s_idx.len(), sizes.s),
        Block::Bs => (sel.w_idx.len(), sizes.w),
    };
    let total = check_budget(complexity::pow(radix_one, len), budget)?;
    let radix = vec![radix_one; len];
    let (rate, index) = (0..total)
        .into_par_iter()
        .map_init(
            || (ev.scratch(), vec![0usize; len]),
            |(sc, digits), i| {
                decode(i, &radix, digits);
                let r = match block {
                    Block::Users => ev.rate(digits, &sel.s_idx, &sel.w_idx, sc),
                    Block::Ris => ev.rate(&sel.f_idx, digits, &sel.w_idx, sc),
                    Block::Bs => ev.rate(&sel.f_idx, &sel.s_idx, digits, sc),
                };
                (r, i)
            },
        )
        .reduce(|| (f64::NEG_INFINITY, u64::MAX), better);
    let mut digits = vec![0usize; len];
    decode(index.min(total - 1), &radix, &mut digits);
    Ok((digits, rate, total))
}

/// Iterative alternating search: each iteration jointly re-optimizes all user
/// beams, then all RIS subarray beams, then all BS subarray beams, each block
/// by full enumeration with the other two fixed.
pub fn ias_search(
    ch: &ChannelSet,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
    t_max: usize,
    init: &IasInit,
    budget: u64,
) -> Result<SearchReport> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be >= 1".into()));
    }
    let ev = CandidateEvaluator::new(ch, cb, cfg)?;
    let mut sel = match init {
        IasInit::Selection(s) => {
            s.validate(cfg, ev.sizes())?;
            s.clone()
        }
        IasInit::Seeded(seed) => BeamSelection::random(cfg, ev.sizes(), &mut rng_from_seed(*seed)),
    };
    let mut rate = ev.rate_of(&sel);
    let mut trace = Vec::with_capacity(3 * t_max);
    let mut evaluated = 0u64;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < t_max {
        iterations += 1;
        let mut changed = false;
        for block in [Block::Users, Block::Ris, Block::Bs] {
            let (digits, r, n) = sweep_block(&ev, &sel, block, budget)?;
            evaluated += n;
            let slot = match block {
                Block::Users => &mut sel.f_idx,
                Block::Ris => &mut sel.s_idx,
                Block::Bs => &mut sel.w_idx,
            };
            if *slot != digits {
                *slot = digits;
                changed = true;
            }
            rate = r;
            trace.push(rate);
        }
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(SearchReport {
        best_selection: sel,
        best_rate: rate,
        candidates_evaluated: evaluated,
        multiply_count: evaluated as u128 * complexity::o3(cfg),
        iterations,
        converged,
        trace,
    })
}

/// Alternating search from `restarts` random starts drawn from
/// `derive_seed(seed, r)`; keeps the best result, earliest start on ties.
/// Candidate and multiplication counts are summed over all starts.
pub fn ias_multistart(
    ch: &ChannelSet,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
    t_max: usize,
    seed: u64,
    restarts: usize,
    budget: u64,
) -> Result<SearchReport> {
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }
    let mut best: Option<SearchReport> = None;
    let (mut evaluated, mut mults) = (0u64, 0u128);
    for r in 0..restarts {
        let init = IasInit::Seeded(derive_seed(seed, r as u64));
        let rep = ias_search(ch, cb, cfg, t_max, &init, budget)?;
        evaluated += rep.candidates_evaluated;
        mults += rep.multiply_count;
        let replace = match &best {
            None => true,
            Some(b) => {
                rep.best_rate > b.best_rate
                    || (rep.best_rate == b.best_rate && rep.best_selection.flat() < b.best_selection.flat())
            }
        };
        if replace {
            best = Some(rep);
        }
    }
    let mut best = best.expect("restarts >= 1");
    best.candidates_evaluated = evaluated;
    best.multiply_count = mults;
    Ok(best)
}

/// A uniformly random valid selection and its rate.
pub fn random_baseline(
    ch: &ChannelSet,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
    seed: u64,
) -> Result<SearchReport> {
    let ev = CandidateEvaluator::new(ch, cb, cfg)?;
    let sel = BeamSelection::random(cfg, ev.sizes(), &mut rng_from_seed(seed));
    let rate = ev.rate_of(&sel);
    Ok(SearchReport {
        best_selection: sel,
        best_rate: rate,
        candidates_evaluated: 1,
        multiply_count: complexity::o3(cfg),
        iterations: 1,
        converged: true,
        trace: vec![rate],
    })
}

/// Mean random-selection rate over `draws` seeds derived from `seed`.
pub fn random_mean_rate(
    ch: &ChannelSet,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let ev = CandidateEvaluator::new(ch, cb, cfg)?;
    let mut rng = rng_from_seed(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let sel = BeamSelection::random(cfg, ev.sizes(), &mut rng);
        let r = ev.rate_of(&sel);
        if r.is_finite() {
            acc += r;
        }
    }
    Ok(acc / draws.max(1) as f64)
}
