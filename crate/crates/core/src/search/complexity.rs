//! Complex-multiplication accounting for the search algorithms and the
//! classifier's online prediction.

use crate::channel::{ChannelSet, CMat, C64};
use crate::codebook::CodebookTriple;
use crate::config::{CodebookSizes, SystemConfig};
use crate::error::Result;
use crate::metric::{assemble_block_combiner, assemble_phase_matrix, BeamSelection, EquivalentChannel};

/// Cost of forming `Hbar` for one candidate:
/// `K N_s (N_r M + M^2 + M N_t + N_t)`.
pub fn o1(cfg: &SystemConfig) -> u128 {
    let (k, ns, nr, m, nt) = dims(cfg);
    k * ns * (nr * m + m * m + m * nt + nt)
}

/// Cost of one determinant-ratio term given `Hbar`:
/// `K^2 N_s + (K-1)^2 N_s + K^3 + (K-1)^3 + 1`.
pub fn o2(cfg: &SystemConfig) -> u128 {
    let (k, ns, ..) = dims(cfg);
    let km = k - 1;
    k * k * ns + km * km * ns + k * k * k + km * km * km + 1
}

/// Cost of the sum-rate metric for one beam candidate.
pub fn o3(cfg: &SystemConfig) -> u128 {
    let (k, ns, nr, m, nt) = dims(cfg);
    let km = k - 1;
    k * k * ns * m * (nr + m)
        + k * k * ns * nt * (m + 1)
        + 6 * k
        + k * k * k * (ns + k)
        + k * km * km * (ns + k + 1)
}

fn dims(cfg: &SystemConfig) -> (u128, u128, u128, u128, u128) {
    (
        cfg.k as u128,
        cfg.n_s as u128,
        cfg.n_r as u128,
        cfg.m as u128,
        cfg.n_t as u128,
    )
}

/// Layer inventory of a trained classifier, enough to count its prediction
/// multiplications.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MtlCostSpec {
    /// `(in_planes, out_planes, kernel)` of every convolution applied to each link.
    pub conv_layers: Vec<(usize, usize, usize)>,
    /// Convolution zero padding.
    pub padding: usize,
    /// `(inputs, outputs)` of every fully-connected evaluation in one prediction,
    /// repeated once per application.
    pub fc_layers: Vec<(usize, usize)>,
}

impl MtlCostSpec {
    /// Convolution multiplications summed over the `K` user links (`M x N_t`)
    /// and the reflected link (`N_r x M`).
    pub fn resnet_cost(&self, cfg: &SystemConfig) -> u128 {
        let link = |rows: usize, cols: usize| -> u128 {
            self.conv_layers
                .iter()
                .map(|&(cin, cout, ker)| {
                    let d1 = (rows + 2 * self.padding + 1).saturating_sub(ker) as u128;
                    let d2 = (cols + 2 * self.padding + 1).saturating_sub(ker) as u128;
                    (cin * cout * ker * ker) as u128 * d1 * d2
                })
                .sum()
        };
        cfg.k as u128 * link(cfg.m, cfg.n_t) + link(cfg.n_r, cfg.m)
    }

    pub fn fc_cost(&self) -> u128 {
        self.fc_layers.iter().map(|&(i, o)| (i * o) as u128).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CostAlgorithm {
    Exhaustive,
    Ias,
    Mtl(MtlCostSpec),
}

/// Closed-form multiplication count of one beam-training run.
pub fn multiply_cost(
    cfg: &SystemConfig,
    algorithm: &CostAlgorithm,
    sizes: CodebookSizes,
    t_max: usize,
) -> u128 {
    match algorithm {
        CostAlgorithm::Exhaustive => es_candidates(cfg, sizes) * o3(cfg),
        CostAlgorithm::Ias => t_max as u128 * ias_candidates_per_iteration(cfg, sizes) * o3(cfg),
        CostAlgorithm::Mtl(spec) => o3(cfg) + spec.fc_cost() + spec.resnet_cost(cfg),
    }
}

/// `|F|^K |S|^{M_s} |W|^{N_s}`.
pub fn es_candidates(cfg: &SystemConfig, sizes: CodebookSizes) -> u128 {
    pow(sizes.f, cfg.k) * pow(sizes.s, cfg.m_s) * pow(sizes.w, cfg.n_s)
}

/// `|F|^K + |S|^{M_s} + |W|^{N_s}`.
pub fn ias_candidates_per_iteration(cfg: &SystemConfig, sizes: CodebookSizes) -> u128 {
    pow(sizes.f, cfg.k) + pow(sizes.s, cfg.m_s) + pow(sizes.w, cfg.n_s)
}

pub(crate) fn pow(base: usize, exp: usize) -> u128 {
    (base as u128).saturating_pow(exp as u32)
}

/// Evaluates every `Hbar` entry as the dense left-to-right row chain
/// `((w_n H_r) Phi) H_k) f_k`, counting complex multiplications. The count
/// for a full `Hbar` equals [`o1`].
pub fn instrumented_equivalent_channel(
    ch: &ChannelSet,
    sel: &BeamSelection,
    cb: &CodebookTriple,
    cfg: &SystemConfig,
) -> Result<(EquivalentChannel, u128)> {
    let wr = assemble_block_combiner(sel, cb, cfg)?.to_dense();
    let phi = CMat::from_diagonal(&nalgebra::DVector::from_vec(assemble_phase_matrix(sel, cb, cfg)?));
    let mut count: u128 = 0;
    let mut mul = |a: C64, b: C64| {
        count += 1;
        a * b
    };
    let mut hbar = CMat::zeros(cfg.n_s, cfg.k);
    for k in 0..cfg.k {
        let f = &cb.f[sel.f_idx[k]];
        for n in 0..cfg.n_s {
            let mut row: Vec<C64> = (0..cfg.m)
                .map(|j| (0..cfg.n_r).map(|i| mul(wr[(n, i)], ch.h_r[(i, j)])).sum())
                .collect();
            row = (0..cfg.m)
                .map(|j| (0..cfg.m).map(|i| mul(row[i], phi[(i, j)])).sum())
                .collect();
            row = (0..cfg.n_t)
                .map(|t| (0..cfg.m).map(|i| mul(row[i], ch.h_k[k][(i, t)])).sum())
                .collect();
            hbar[(n, k)] = (0..cfg.n_t).map(|t| mul(row[t], f[t])).sum();
        }
    }
    Ok((EquivalentChannel(hbar), count))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cfg() -> SystemConfig {
        SystemConfig {
            n_r: 1,
            n_s: 1,
            n_b: 1,
            m: 1,
            m_s: 1,
            m_b: 1,
            n_t: 1,
            k: 1,
            ..SystemConfig::desk()
        }
    }

    #[test]
    fn unit_dimensions() {
        assert_eq!(o1(&unit_cfg()), 4);
    }

    #[test]
    fn o2_for_two_users_two_chains() {
        let cfg = SystemConfig {
            k: 2,
            n_s: 2,
            ..SystemConfig::desk()
        };
        assert_eq!(o2(&cfg), 20);
    }

    #[test]
    fn o3_contains_k_copies_of_o1() {
        let cfg = SystemConfig::desk();
        let (k, ns, m, nt) = (2u128, 2u128, 16u128, 4u128);
        let expect = k * k * ns * m * (16 + m) + k * k * ns * nt * (m + 1) + 6 * k + k * k * k * (ns + k) + k * 1 * (ns + k + 1);
        assert_eq!(o3(&cfg), expect);
        assert!(o3(&cfg) > cfg.k as u128 * o1(&cfg));
    }

    #[test]
    fn totals_follow_candidate_counts() {
        let cfg = SystemConfig::desk();
        let sizes = CodebookSizes::uniform(4);
        assert_eq!(es_candidates(&cfg, sizes), 4096);
        assert_eq!(ias_candidates_per_iteration(&cfg, sizes), 48);
        assert_eq!(multiply_cost(&cfg, &CostAlgorithm::Exhaustive, sizes, 10), 4096 * o3(&cfg));
        assert_eq!(multiply_cost(&cfg, &CostAlgorithm::Ias, sizes, 10), 480 * o3(&cfg));
    }

    #[test]
    fn resnet_cost_with_same_padding() {
        let cfg = SystemConfig::desk();
        let spec = MtlCostSpec {
            conv_layers: vec![(2, 8, 3)],
            padding: 1,
            fc_layers: vec![(10, 3), (3, 2)],
        };
        // 3x3 with padding 1 keeps the spatial size
        let expect = 2 * (2 * 8 * 9 * 16 * 4) + 2 * 8 * 9 * 16 * 16;
        assert_eq!(spec.resnet_cost(&cfg), expect as u128);
        assert_eq!(spec.fc_cost(), 36);
    }
}
