//! Equivalent channel, zero-forcing combiner, and the uplink sum rate.
//!
//! The per-user SINR under ZF is `P / (N_t N_B N0 [(Hbar^H Hbar)^{-1}]_kk)`.
//! The inverse-diagonal entry is evaluated either directly (explicit Gram
//! inversion) or as the ratio of the principal-minor determinant to the Gram
//! determinant; the two routes must agree.

use nalgebra::SymmetricEigen;
use rand::Rng as _;

use crate::channel::{ChannelSet, CMat, C64};
use crate::codebook::CodebookTriple;
use crate::config::{CodebookSizes, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg::{gram_into, log_det_in_place, principal_minor_into};
use crate::rng::Rng;

/// Codeword indices for every user, RIS subarray and BS subarray.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BeamSelection {
    pub f_idx: Vec<usize>,
    pub s_idx: Vec<usize>,
    pub w_idx: Vec<usize>,
}

impl BeamSelection {
    pub fn new(f_idx: Vec<usize>, s_idx: Vec<usize>, w_idx: Vec<usize>) -> Self {
        Self { f_idx, s_idx, w_idx }
    }

    /// Inverse of [`BeamSelection::flat`]. `flat` must hold `K + M_s + N_s`
    /// indices.
    pub fn from_flat(cfg: &SystemConfig, flat: &[usize]) -> Self {
        let (k, ms) = (cfg.k, cfg.m_s);
        Self::new(flat[..k].to_vec(), flat[k..k + ms].to_vec(), flat[k + ms..].to_vec())
    }

    /// The all-zero-index selection.
    pub fn first(cfg: &SystemConfig) -> Self {
        Self::new(vec![0; cfg.k], vec![0; cfg.m_s], vec![0; cfg.n_s])
    }

    pub fn random(cfg: &SystemConfig, sizes: CodebookSizes, rng: &mut Rng) -> Self {
        Self::new(
            (0..cfg.k).map(|_| rng.random_range(0..sizes.f)).collect(),
            (0..cfg.m_s).map(|_| rng.random_range(0..sizes.s)).collect(),
            (0..cfg.n_s).map(|_| rng.random_range(0..sizes.w)).collect(),
        )
    }

    pub fn validate(&self, cfg: &SystemConfig, sizes: CodebookSizes) -> Result<()> {
        let check = |name: &str, idx: &[usize], len: usize, bound: usize| -> Result<()> {
            if idx.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "{name}: expected {len} indices, got {}",
                    idx.len()
                )));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= bound) {
                return Err(Error::InvalidArgument(format!(
                    "{name}: index {bad} out of bounds for codebook of size {bound}"
                )));
            }
            Ok(())
        };
        check("f_idx", &self.f_idx, cfg.k, sizes.f)?;
        check("s_idx", &self.s_idx, cfg.m_s, sizes.s)?;
        check("w_idx", &self.w_idx, cfg.n_s, sizes.w)
    }

    /// Flat index tuple `(f..., s..., w...)`; its lexicographic order is the
    /// tie-breaking order of every search.
    pub fn flat(&self) -> Vec<usize> {
        self.f_idx
            .iter()
            .chain(&self.s_idx)
            .chain(&self.w_idx)
            .copied()
            .collect()
    }
}

/// `Hbar` (N_s x K), column `k` = `W_R H_r Phi H_k f_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalentChannel(pub CMat);

impl EquivalentChannel {
    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    fn row_major(&self) -> Vec<C64> {
        let (r, c) = self.0.shape();
        (0..r * c).map(|i| self.0[(i / c, i % c)]).collect()
    }

    pub fn gram(&self) -> CMat {
        self.0.adjoint() * &self.0
    }
}

/// Diagonal of the RIS phase matrix: concatenated selected phase vectors,
/// scaled by the reflect amplitude.
pub fn assemble_phase_matrix(
    sel: &BeamSelection,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
) -> Result<Vec<C64>> {
    sel.validate(cfg, cb.sizes())?;
    let rho = cfg.reflect_amplitude;
    let mut diag = Vec::with_capacity(cfg.m);
    for &s in &sel.s_idx {
        if cb.s[s].len() != cfg.m_b {
            return Err(Error::InvalidArgument(format!(
                "RIS codeword length {} != m_b {}",
                cb.s[s].len(),
                cfg.m_b
            )));
        }
        diag.extend(cb.s[s].iter().map(|z| z * rho));
    }
    Ok(diag)
}

/// Block-diagonal analog combiner `W_R` stored as its `N_s` dense blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCombiner {
    pub n_b: usize,
    pub blocks: Vec<Vec<C64>>,
}

impl BlockCombiner {
    pub fn n_s(&self) -> usize {
        self.blocks.len()
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        let start = row * self.n_b;
        if (start..start + self.n_b).contains(&col) {
            self.blocks[row][col - start]
        } else {
            C64::new(0.0, 0.0)
        }
    }

    pub fn to_dense(&self) -> CMat {
        CMat::from_fn(self.n_s(), self.n_s() * self.n_b, |i, j| self.get(i, j))
    }
}

pub fn assemble_block_combiner(
    sel: &BeamSelection,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
) -> Result<BlockCombiner> {
    sel.validate(cfg, cb.sizes())?;
    let blocks = sel
        .w_idx
        .iter()
        .map(|&w| {
            let c = &cb.w[w];
            if c.len() != cfg.n_b {
                return Err(Error::InvalidArgument(format!(
                    "BS codeword length {} != n_b {}",
                    c.len(),
                    cfg.n_b
                )));
            }
            Ok(c.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockCombiner {
        n_b: cfg.n_b,
        blocks,
    })
}

/// Chains the block combiner, reflected channel, phase diagonal, user channel
/// and user beam without forming any dense `N_r x N_r` or `M x M` product.
pub fn equivalent_channel(
    ch: &ChannelSet,
    sel: &BeamSelection,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
) -> Result<EquivalentChannel> {
    ch.check(cfg)?;
    let phi = assemble_phase_matrix(sel, cb, cfg)?;
    let wr = assemble_block_combiner(sel, cb, cfg)?;
    let (n_b, m) = (cfg.n_b, cfg.m);

    // rows of W_R H_r Phi
    let mut left = vec![C64::new(0.0, 0.0); cfg.n_s * m];
    for (n, w) in wr.blocks.iter().enumerate() {
        let row = &mut left[n * m..(n + 1) * m];
        for (b, wb) in w.iter().enumerate() {
            let r = n * n_b + b;
            for (j, out) in row.iter_mut().enumerate() {
                *out += wb * ch.h_r[(r, j)];
            }
        }
        for (out, p) in row.iter_mut().zip(&phi) {
            *out *= p;
        }
    }

    let mut hbar = CMat::zeros(cfg.n_s, cfg.k);
    for (k, (h, &f)) in ch.h_k.iter().zip(&sel.f_idx).enumerate() {
        let beam = &cb.f[f];
        if beam.len() != cfg.n_t {
            return Err(Error::InvalidArgument(format!(
                "user codeword length {} != n_t {}",
                beam.len(),
                cfg.n_t
            )));
        }
        let v: Vec<C64> = (0..m)
            .map(|i| (0..cfg.n_t).map(|t| h[(i, t)] * beam[t]).sum())
            .collect();
        for n in 0..cfg.n_s {
            hbar[(n, k)] = left[n * m..(n + 1) * m]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    Ok(EquivalentChannel(hbar))
}

fn gram_condition(gram: &CMat) -> f64 {
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// ZF digital combiner `(Hbar^H Hbar)^{-1} Hbar^H` (K x N_s).
pub fn zf_combiner(hbar: &EquivalentChannel) -> Result<CMat> {
    let gram = hbar.gram();
    let condition = gram_condition(&gram);
    if !(condition < 1e12) {
        return Err(Error::RankDeficient { condition });
    }
    let chol = gram
        .cholesky()
        .ok_or(Error::RankDeficient { condition })?;
    Ok(chol.solve(&hbar.0.adjoint()))
}

/// `[(Hbar^H Hbar)^{-1}]_kk` (0-based `k`) as the determinant ratio
/// `det(minor_kk) / det(Hbar^H Hbar)`.
pub fn diag_inverse_entry(hbar: &EquivalentChannel, k: usize) -> Result<f64> {
    let kk = hbar.k();
    if k >= kk {
        return Err(Error::InvalidArgument(format!("user index {k} >= K = {kk}")));
    }
    let h = hbar.row_major();
    let mut gram = vec![C64::new(0.0, 0.0); kk * kk];
    gram_into(&h, hbar.0.nrows(), kk, &mut gram);
    let mut scratch = vec![C64::new(0.0, 0.0); kk * kk];
    let ratios = det_ratio_diag(&gram, kk, &mut scratch)?;
    Ok(ratios[k])
}

/// log(1e-300)
const LOG_DET_FLOOR: f64 = -690.775_527_898_213_7;

/// All inverse-diagonal entries of a row-major Hermitian Gram matrix via
/// determinant ratios. `scratch` needs `k*k` entries.
pub(crate) fn det_ratio_diag(gram: &[C64], k: usize, scratch: &mut [C64]) -> Result<Vec<f64>> {
    scratch[..k * k].copy_from_slice(gram);
    let full = log_det_in_place(&mut scratch[..k * k], k);
    if full.is_singular() || full.log_abs < LOG_DET_FLOOR {
        return Err(Error::Singular {
            log10_det: full.log_abs / std::f64::consts::LN_10,
        });
    }
    let mut out = Vec::with_capacity(k);
    let km = k - 1;
    for i in 0..k {
        principal_minor_into(gram, k, i, &mut scratch[..km * km]);
        let minor = log_det_in_place(&mut scratch[..km * km], km);
        // both determinants are real and positive for a non-singular Gram
        let ratio = (minor.log_abs - full.log_abs).exp() * (minor.phase / full.phase).re;
        out.push(ratio);
    }
    Ok(out)
}

/// Evaluation route for the inverse-Gram diagonal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RateMode {
    /// Explicit Gram inversion.
    Direct,
    /// Principal-minor determinant over Gram determinant.
    #[default]
    DetRatio,
}

impl std::str::FromStr for RateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "det_ratio" | "det-ratio" => Ok(Self::DetRatio),
            other => Err(Error::InvalidArgument(format!("unknown rate mode {other:?}"))),
        }
    }
}

fn inverse_diag(hbar: &EquivalentChannel, mode: RateMode) -> Result<Vec<f64>> {
    match mode {
        RateMode::Direct => {
            let inv = hbar
                .gram()
                .try_inverse()
                .ok_or_else(|| Error::RateUndefined("Gram matrix not invertible".into()))?;
            Ok((0..hbar.k()).map(|i| inv[(i, i)].re).collect())
        }
        RateMode::DetRatio => {
            let k = hbar.k();
            let h = hbar.row_major();
            let mut gram = vec![C64::new(0.0, 0.0); k * k];
            gram_into(&h, hbar.0.nrows(), k, &mut gram);
            let mut scratch = vec![C64::new(0.0, 0.0); k * k];
            det_ratio_diag(&gram, k, &mut scratch)
                .map_err(|e| Error::RateUndefined(e.to_string()))
        }
    }
}

/// Per-user SINR `snr_scale / [(Hbar^H Hbar)^{-1}]_kk`.
pub fn sinr(hbar: &EquivalentChannel, snr_scale: f64, mode: RateMode) -> Result<Vec<f64>> {
    if hbar.k() == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    inverse_diag(hbar, mode)?
        .into_iter()
        .map(|d| {
            if d > 0.0 && d.is_finite() {
                Ok(snr_scale / d)
            } else {
                Err(Error::RateUndefined(format!("inverse-Gram diagonal {d}")))
            }
        })
        .collect()
}

pub fn rate_from_sinr(sinr: &[f64]) -> f64 {
    sinr.iter().map(|g| (1.0 + g).log2()).sum()
}

pub fn sum_rate_from_hbar(hbar: &EquivalentChannel, snr_scale: f64, mode: RateMode) -> Result<f64> {
    Ok(rate_from_sinr(&sinr(hbar, snr_scale, mode)?))
}

/// Uplink sum rate in bps/Hz of a beam selection.
pub fn sum_rate(
    ch: &ChannelSet,
    sel: &BeamSelection,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
    mode: RateMode,
) -> Result<f64> {
    if !(cfg.power_watts() > 0.0 && cfg.n0 > 0.0) {
        return Err(Error::InvalidArgument("P and N0 must be positive".into()));
    }
    let hbar = equivalent_channel(ch, sel, cb, cfg)?;
    sum_rate_from_hbar(&hbar, cfg.snr_scale(), mode)
}
