//! UPA array responses and sparse geometric THz channels for the BS-RIS and
//! RIS-user links.
//!
//! Both links are sums of `L + 1` rank-one path terms
//! `gain * a_rx(arrival) * a_tx(departure)^H`, scaled by
//! `sqrt(N_rx * N_tx / (L + 1))`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng as _;

use crate::config::{GainModel, SystemConfig};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Planar factorization `(N_x, N_y)` of an element count: square when `n` is a
/// perfect square, otherwise a linear `n x 1` array.
pub fn upa_dims(n: usize) -> (usize, usize) {
    let r = (n as f64).sqrt().round() as usize;
    if r * r == n {
        (r, r)
    } else {
        (n, 1)
    }
}

/// Planar shape of one contiguous block of `sub` elements in a `total`-element
/// UPA. Elements run azimuth-major, so a block spanning whole elevation
/// columns is a `(sub / N_y) x N_y` patch; anything else is treated as linear.
pub fn subarray_dims(total: usize, sub: usize) -> (usize, usize) {
    let (_, n_y) = upa_dims(total);
    if n_y > 1 && sub % n_y == 0 {
        (sub / n_y, n_y)
    } else {
        (sub, 1)
    }
}

/// Kronecker UPA response evaluated directly from the two direction sines.
pub(crate) fn upa_response_sin(
    sin_x: f64,
    sin_y: f64,
    n_x: usize,
    n_y: usize,
    spacing_over_lambda: f64,
) -> Vec<C64> {
    let scale = 1.0 / ((n_x * n_y) as f64).sqrt();
    let kx = 2.0 * PI * spacing_over_lambda * sin_x;
    let ky = 2.0 * PI * spacing_over_lambda * sin_y;
    let mut out = Vec::with_capacity(n_x * n_y);
    for ix in 0..n_x {
        for iy in 0..n_y {
            out.push(C64::from_polar(scale, kx * ix as f64 + ky * iy as f64));
        }
    }
    out
}

/// Normalized UPA response `a_x(azimuth) ⊗ a_y(elevation)` of length `n_x * n_y`.
pub fn upa_response(
    azimuth: f64,
    elevation: f64,
    n_x: usize,
    n_y: usize,
    spacing_over_lambda: f64,
) -> Result<Vec<C64>> {
    if !azimuth.is_finite() || !elevation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite angle (azimuth={azimuth}, elevation={elevation})"
        )));
    }
    if n_x == 0 || n_y == 0 {
        return Err(Error::InvalidArgument("UPA dimensions must be >= 1".into()));
    }
    Ok(upa_response_sin(
        azimuth.sin(),
        elevation.sin(),
        n_x,
        n_y,
        spacing_over_lambda,
    ))
}

/// One propagation path. Departure angles refer to the transmitting side of
/// the link, arrival angles to the receiving side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathSpec {
    pub gain: C64,
    pub azimuth_dep: f64,
    pub elevation_dep: f64,
    pub azimuth_arr: f64,
    pub elevation_arr: f64,
}

impl PathSpec {
    pub fn new(gain: C64, azimuth_dep: f64, elevation_dep: f64, azimuth_arr: f64, elevation_arr: f64) -> Self {
        Self {
            gain,
            azimuth_dep,
            elevation_dep,
            azimuth_arr,
            elevation_arr,
        }
    }
}

/// One realization of the BS-RIS channel `H_r` (N_r x M) and the K RIS-user
/// channels `H_k` (M x N_t).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    pub h_r: CMat,
    pub h_k: Vec<CMat>,
    pub paths_r: Vec<PathSpec>,
    pub paths_k: Vec<Vec<PathSpec>>,
    /// RIS-user distances in metres (empty when built from explicit paths).
    pub user_distances: Vec<f64>,
}

/// `scale * sum_l gain_l * a_rx(arr_l) a_tx(dep_l)^H` for an `rx x tx` link.
pub fn link_matrix(paths: &[PathSpec], rx: usize, tx: usize, spacing: f64) -> Result<CMat> {
    let (rx_x, rx_y) = upa_dims(rx);
    let (tx_x, tx_y) = upa_dims(tx);
    let scale = ((rx * tx) as f64 / paths.len().max(1) as f64).sqrt();
    let mut h = CMat::zeros(rx, tx);
    for p in paths {
        let a_rx = upa_response(p.azimuth_arr, p.elevation_arr, rx_x, rx_y, spacing)?;
        let a_tx = upa_response(p.azimuth_dep, p.elevation_dep, tx_x, tx_y, spacing)?;
        let g = p.gain * scale;
        for i in 0..rx {
            let gi = g * a_rx[i];
            for j in 0..tx {
                h[(i, j)] += gi * a_tx[j].conj();
            }
        }
    }
    Ok(h)
}

impl ChannelSet {
    /// Builds the matrices from explicit path lists.
    pub fn from_paths(
        cfg: &SystemConfig,
        paths_r: Vec<PathSpec>,
        paths_k: Vec<Vec<PathSpec>>,
    ) -> Result<Self> {
        if paths_k.len() != cfg.k {
            return Err(Error::InvalidArgument(format!(
                "expected {} user path lists, got {}",
                cfg.k,
                paths_k.len()
            )));
        }
        if paths_r.is_empty() || paths_k.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("every link needs at least one path".into()));
        }
        let spacing = cfg.element_spacing_over_lambda;
        let h_r = link_matrix(&paths_r, cfg.n_r, cfg.m, spacing)?;
        let h_k = paths_k
            .iter()
            .map(|p| link_matrix(p, cfg.m, cfg.n_t, spacing))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            h_r,
            h_k,
            paths_r,
            paths_k,
            user_distances: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.h_k.len()
    }

    /// Checks matrix shapes against `cfg` and that every entry is finite.
    pub fn check(&self, cfg: &SystemConfig) -> Result<()> {
        if self.h_r.shape() != (cfg.n_r, cfg.m) {
            return Err(Error::Shape {
                op: "channel H_r",
                left: vec![self.h_r.nrows(), self.h_r.ncols()],
                right: vec![cfg.n_r, cfg.m],
            });
        }
        if self.h_k.len() != cfg.k {
            return Err(Error::InvalidArgument(format!(
                "channel has {} users, config expects {}",
                self.h_k.len(),
                cfg.k
            )));
        }
        for h in &self.h_k {
            if h.shape() != (cfg.m, cfg.n_t) {
                return Err(Error::Shape {
                    op: "channel H_k",
                    left: vec![h.nrows(), h.ncols()],
                    right: vec![cfg.m, cfg.n_t],
                });
            }
        }
        let finite = |m: &CMat| m.iter().all(|z| z.re.is_finite() && z.im.is_finite());
        if !finite(&self.h_r) || !self.h_k.iter().all(finite) {
            return Err(Error::InvalidArgument("channel has non-finite entries".into()));
        }
        Ok(())
    }

    /// Little-endian byte image of matrices and path parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_mat = |m: &CMat, out: &mut Vec<u8>| {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&m[(i, j)].re.to_le_bytes());
                    out.extend_from_slice(&m[(i, j)].im.to_le_bytes());
                }
            }
        };
        put_mat(&self.h_r, &mut out);
        for h in &self.h_k {
            put_mat(h, &mut out);
        }
        let put_paths = |ps: &[PathSpec], out: &mut Vec<u8>| {
            for p in ps {
                for v in [
                    p.gain.re,
                    p.gain.im,
                    p.azimuth_dep,
                    p.elevation_dep,
                    p.azimuth_arr,
                    p.elevation_arr,
                ] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        put_paths(&self.paths_r, &mut out);
        for ps in &self.paths_k {
            put_paths(ps, &mut out);
        }
        for d in &self.user_distances {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }
}

/// Free-space spreading with molecular absorption: `c/(4 pi f d) e^{-kappa d / 2}`.
pub fn spreading_gain(gm: &GainModel, freq_hz: f64, distance: f64) -> f64 {
    SPEED_OF_LIGHT / (4.0 * PI * freq_hz * distance) * (-gm.absorption_coeff * distance / 2.0).exp()
}

fn path_power_factor(gm: &GainModel, los: bool, l: usize) -> f64 {
    if los && l == 0 {
        1.0
    } else {
        gm.reflection_coeff * gm.reflection_coeff
    }
}

/// `(L+1) / E[sum_l |g_l|^2]`, the squared gain rescaling that makes
/// `E[||H||_F^2] = N_rx N_tx`.
fn normalization(gm: &GainModel, los: bool, n_paths: usize, mean_sq_spreading: f64) -> f64 {
    let power: f64 = (0..n_paths).map(|l| path_power_factor(gm, los, l)).sum();
    n_paths as f64 / (power * mean_sq_spreading)
}

/// Mean of `g(d)^2` for `d ~ U(d_u/4, d_u)` by midpoint quadrature.
fn user_mean_sq_spreading(gm: &GainModel, freq_hz: f64) -> f64 {
    const N: usize = 4096;
    let (lo, hi) = user_distance_range(gm);
    let h = (hi - lo) / N as f64;
    (0..N)
        .map(|i| {
            let g = spreading_gain(gm, freq_hz, lo + (i as f64 + 0.5) * h);
            g * g
        })
        .sum::<f64>()
        / N as f64
}

fn user_distance_range(gm: &GainModel) -> (f64, f64) {
    (gm.user_region_diameter / 4.0, gm.user_region_diameter)
}

fn uniform_angle(rng: &mut Rng) -> f64 {
    loop {
        let a = rng.random_range(-PI..PI);
        if a > -PI {
            return a;
        }
    }
}

fn draw_paths(
    rng: &mut Rng,
    gm: &GainModel,
    los: bool,
    n_paths: usize,
    amplitude: f64,
    norm: f64,
) -> Vec<PathSpec> {
    (0..n_paths)
        .map(|l| {
            let mag = amplitude * (path_power_factor(gm, los, l) * norm).sqrt();
            let gain = C64::from_polar(mag, uniform_angle(rng));
            PathSpec::new(
                gain,
                uniform_angle(rng),
                uniform_angle(rng),
                uniform_angle(rng),
                uniform_angle(rng),
            )
        })
        .collect()
}

/// Draws one channel realization. Identical arguments give a bit-identical
/// `ChannelSet`.
pub fn sample_channel_set(
    cfg: &SystemConfig,
    gm: &GainModel,
    l_b: usize,
    l_u: usize,
    seed: u64,
) -> Result<ChannelSet> {
    cfg.validate()?;
    gm.validate()?;
    let mut rng = rng_from_seed(seed);
    let f = cfg.carrier_freq_hz;

    let g0 = spreading_gain(gm, f, gm.d0);
    let norm_r = if gm.normalize {
        normalization(gm, gm.los_bs_ris, l_b + 1, g0 * g0)
    } else {
        1.0
    };
    let paths_r = draw_paths(&mut rng, gm, gm.los_bs_ris, l_b + 1, g0, norm_r);

    let norm_u = if gm.normalize {
        normalization(gm, gm.los_ris_user, l_u + 1, user_mean_sq_spreading(gm, f))
    } else {
        1.0
    };
    let (lo, hi) = user_distance_range(gm);
    let mut paths_k = Vec::with_capacity(cfg.k);
    let mut distances = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let d = rng.random_range(lo..hi);
        let g = spreading_gain(gm, f, d);
        distances.push(d);
        paths_k.push(draw_paths(&mut rng, gm, gm.los_ris_user, l_u + 1, g, norm_u));
    }

    let mut ch = ChannelSet::from_paths(cfg, paths_r, paths_k)?;
    ch.user_distances = distances;
    Ok(ch)
}
