//! Predefined analog beam codebooks built from array responses sampled on a
//! uniform grid of direction sines.

use sha2::{Digest, Sha256};

use crate::channel::{subarray_dims, upa_dims, upa_response_sin, C64};
use crate::config::{CodebookSizes, SystemConfig};
use crate::error::{Error, Result};

/// The three codebooks: user beams `F`, RIS subarray phase vectors `S` and BS
/// subarray combiners `W`.
///
/// `S` codewords are stored with unit-modulus entries; the reflect amplitude
/// is applied when the phase matrix is assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookTriple {
    pub f: Vec<Vec<C64>>,
    pub s: Vec<Vec<C64>>,
    pub w: Vec<Vec<C64>>,
}

/// `n` grid points `-1 + 2i/n` covering `[-1, 1)`.
pub fn sin_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect()
}

/// Splits a codebook size over the two axes of an `n_x x n_y` array. A size
/// equal to the element count gives the DFT grid; otherwise the most square
/// factorization, with the larger factor on the longer axis. Linear arrays
/// put the whole grid on the azimuth axis.
fn grid_split(size: usize, n_x: usize, n_y: usize) -> (usize, usize) {
    if n_y == 1 {
        return (size, 1);
    }
    if size == n_x * n_y {
        return (n_x, n_y);
    }
    let mut small = 1;
    let mut d = 1;
    while d * d <= size {
        if size % d == 0 {
            small = d;
        }
        d += 1;
    }
    if n_y > n_x {
        (small, size / small)
    } else {
        (size / small, small)
    }
}

/// Unit-norm responses of an `n_x x n_y` array on the sine grid, azimuth-major.
fn response_codebook((n_x, n_y): (usize, usize), size: usize, spacing: f64) -> Vec<Vec<C64>> {
    let (g_x, g_y) = grid_split(size, n_x, n_y);
    let gx = sin_grid(g_x);
    let gy = if g_y == 1 { vec![0.0] } else { sin_grid(g_y) };
    let mut out = Vec::with_capacity(size);
    for &sx in &gx {
        for &sy in &gy {
            out.push(upa_response_sin(sx, sy, n_x, n_y, spacing));
        }
    }
    out
}

pub fn build_codebooks(cfg: &SystemConfig, sizes: CodebookSizes) -> Result<CodebookTriple> {
    cfg.validate()?;
    sizes.validate()?;
    let d = cfg.element_spacing_over_lambda;
    let f = response_codebook(upa_dims(cfg.n_t), sizes.f, d);
    let root_mb = (cfg.m_b as f64).sqrt();
    let s = response_codebook(subarray_dims(cfg.m, cfg.m_b), sizes.s, d)
        .into_iter()
        .map(|v| v.into_iter().map(|z| z * root_mb).collect())
        .collect();
    let w = response_codebook(subarray_dims(cfg.n_r, cfg.n_b), sizes.w, d)
        .into_iter()
        .map(|v| v.into_iter().map(|z| z.conj()).collect())
        .collect();
    Ok(CodebookTriple { f, s, w })
}

impl CodebookTriple {
    pub fn sizes(&self) -> CodebookSizes {
        CodebookSizes::new(self.f.len(), self.s.len(), self.w.len())
    }

    /// Consistency with the array dimensions of `cfg`.
    pub fn check(&self, cfg: &SystemConfig) -> Result<()> {
        self.sizes().validate()?;
        let bad = |name: &str, book: &[Vec<C64>], len: usize| -> Result<()> {
            if let Some(c) = book.iter().find(|c| c.len() != len) {
                return Err(Error::Config(format!(
                    "codebook {name}: codeword length {} != {len}",
                    c.len()
                )));
            }
            Ok(())
        };
        bad("F", &self.f, cfg.n_t)?;
        bad("S", &self.s, cfg.m_b)?;
        bad("W", &self.w, cfg.n_b)?;
        Ok(())
    }

    /// Codewords in a fixed order (`F`, `S`, `W`) as raw IEEE-754 bits.
    pub fn canonical_words(&self) -> Vec<(char, usize, Vec<(u64, u64)>)> {
        let mut out = Vec::new();
        for (tag, book) in [('F', &self.f), ('S', &self.s), ('W', &self.w)] {
            for (i, c) in book.iter().enumerate() {
                out.push((tag, i, c.iter().map(|z| (z.re.to_bits(), z.im.to_bits())).collect()));
            }
        }
        out
    }

    /// SHA-256 over the little-endian bit image of every codeword.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, i, words) in self.canonical_words() {
            h.update([tag as u8]);
            h.update((i as u64).to_le_bytes());
            h.update((words.len() as u64).to_le_bytes());
            for (re, im) in words {
                h.update(re.to_le_bytes());
                h.update(im.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rebuilds a triple from `(tag, index, bits)` records as produced by
    /// [`CodebookTriple::canonical_words`].
    pub fn from_canonical_words(words: Vec<(char, usize, Vec<(u64, u64)>)>) -> Result<Self> {
        let mut books: [Vec<Option<Vec<C64>>>; 3] = Default::default();
        for (tag, i, bits) in words {
            let slot = match tag {
                'F' => 0,
                'S' => 1,
                'W' => 2,
                other => return Err(Error::Format(format!("unknown codebook tag {other:?}"))),
            };
            let book = &mut books[slot];
            if book.len() <= i {
                book.resize(i + 1, None);
            }
            book[i] = Some(
                bits.into_iter()
                    .map(|(re, im)| C64::new(f64::from_bits(re), f64::from_bits(im)))
                    .collect(),
            );
        }
        let finish = |b: Vec<Option<Vec<C64>>>| -> Result<Vec<Vec<C64>>> {
            b.into_iter()
                .enumerate()
                .map(|(i, c)| c.ok_or_else(|| Error::Format(format!("codeword {i} missing"))))
                .collect()
        };
        let [f, s, w] = books;
        Ok(Self {
            f: finish(f)?,
            s: finish(s)?,
            w: finish(w)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tiny_cfg(n_t: usize, m_b: usize, n_b: usize) -> SystemConfig {
        SystemConfig {
            n_r: n_b,
            n_s: 1,
            n_b,
            m: m_b,
            m_s: 1,
            m_b,
            n_t,
            k: 1,
            ..SystemConfig::desk()
        }
    }

    #[test]
    fn two_point_user_codebook() {
        let cb = build_codebooks(&tiny_cfg(2, 1, 1), CodebookSizes::new(2, 1, 1)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // grid order: sin = -1 then 0
        assert!((cb.f[0][0] - C64::new(s, 0.0)).norm() < 1e-15);
        assert!((cb.f[0][1] - C64::from_polar(s, -PI)).norm() < 1e-15);
        assert!((cb.f[1][0] - C64::new(s, 0.0)).norm() < 1e-15);
        assert!((cb.f[1][1] - C64::new(s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn scalar_ris_codebook_has_unit_modulus() {
        let cb = build_codebooks(&tiny_cfg(1, 1, 1), CodebookSizes::new(1, 4, 1)).unwrap();
        assert_eq!(cb.s.len(), 4);
        for c in &cb.s {
            assert_eq!(c.len(), 1);
            assert!((c[0].norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dft_sized_combiner_codebook_is_orthonormal() {
        let cb = build_codebooks(&tiny_cfg(1, 1, 8), CodebookSizes::new(1, 1, 8)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let ip: C64 = cb.w[i].iter().zip(&cb.w[j]).map(|(a, b)| a.conj() * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip.norm() - expect).abs() < 1e-9, "({i},{j}) {ip}");
            }
        }
    }

    #[test]
    fn combiner_gram_matches_direct_evaluation() {
        let n_b = 8;
        let cb = build_codebooks(&tiny_cfg(1, 1, n_b), CodebookSizes::new(1, 1, 8)).unwrap();
        // oracle: conj of e^{j pi n s} / sqrt(N) evaluated per element
        let grid = [-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75];
        let word = |s: f64| -> Vec<C64> {
            (0..n_b)
                .map(|n| C64::from_polar(1.0 / (n_b as f64).sqrt(), -PI * n as f64 * s))
                .collect()
        };
        for i in 0..8 {
            for j in 0..8 {
                let a: C64 = cb.w[i].iter().zip(&cb.w[j]).map(|(x, y)| x.conj() * y).sum();
                let (wi, wj) = (word(grid[i]), word(grid[j]));
                let b: C64 = wi.iter().zip(&wj).map(|(x, y)| x.conj() * y).sum();
                assert!((a.norm() - b.norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn planar_codebooks_grid_jointly() {
        let cfg = SystemConfig::desk();
        let cb = build_codebooks(&cfg, CodebookSizes::new(8, 8, 8)).unwrap();
        cb.check(&cfg).unwrap();
        // 2x2 user array: 4 azimuth x 2 elevation points, all distinct
        for i in 0..8 {
            assert!((cb.f[i].iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..i {
                let d: f64 = cb.f[i].iter().zip(&cb.f[j]).map(|(a, b)| (a - b).norm()).sum();
                assert!(d > 1e-6);
            }
        }
        for c in &cb.s {
            assert!(c.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn planar_subarray_codebook_is_its_dft_basis() {
        // An 8-element block of a 4x4 BS array is a 2x4 patch.
        let cfg = SystemConfig::desk();
        let cb = build_codebooks(&cfg, CodebookSizes::uniform(8)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let ip: C64 = cb.w[i].iter().zip(&cb.w[j]).map(|(a, b)| a.conj() * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((ip.norm() - expect).abs() < 1e-9, "({i},{j}) {ip}");
            }
        }
        // A path from the grid direction of word 5 lands entirely on word 5.
        let (sx, sy) = (sin_grid(2)[1], sin_grid(4)[1]);
        let a = upa_response_sin(sx, sy, 2, 4, 0.5);
        let gains: Vec<f64> = cb.w.iter().map(|w| w.iter().zip(&a).map(|(x, y)| x * y).sum::<C64>().norm()).collect();
        assert!((gains[5] - 1.0).abs() < 1e-12, "{gains:?}");
    }

    #[test]
    fn grid_split_prefers_dft_grids() {
        assert_eq!(grid_split(8, 2, 4), (2, 4));
        assert_eq!(grid_split(8, 4, 2), (4, 2));
        assert_eq!(grid_split(8, 2, 2), (4, 2));
        assert_eq!(grid_split(12, 2, 4), (3, 4));
        assert_eq!(grid_split(5, 8, 1), (5, 1));
    }

    #[test]
    fn oversized_codebook_rejected() {
        assert!(build_codebooks(&SystemConfig::desk(), CodebookSizes::new(1 << 17, 1, 1)).is_err());
    }

    #[test]
    fn hash_and_canonical_words_round_trip() {
        let cfg = SystemConfig::desk();
        let cb = build_codebooks(&cfg, CodebookSizes::new(4, 3, 2)).unwrap();
        let again = build_codebooks(&cfg, CodebookSizes::new(4, 3, 2)).unwrap();
        assert_eq!(cb, again);
        assert_eq!(cb.content_hash(), again.content_hash());
        let rebuilt = CodebookTriple::from_canonical_words(cb.canonical_words()).unwrap();
        assert_eq!(rebuilt, cb);
        let other = build_codebooks(&cfg, CodebookSizes::new(4, 3, 3)).unwrap();
        assert_ne!(cb.content_hash(), other.content_hash());
    }
}
