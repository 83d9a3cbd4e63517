//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Failures are reported but the
//! process exits 0 unless `BEAMTRAIN_ACCEPTANCE_STRICT=1` is set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use beamtrain_core::blockwise::{
    alternate, lipschitz_estimates, objective, update_g, update_q, BlockwiseProblem, MapPreset, ProblemDims,
};
use beamtrain_core::dataset::{generate_dataset, split_dataset, BeamDataset, Labeler, SplitKind};
use beamtrain_core::metric::{diag_inverse_entry, zf_combiner};
use beamtrain_core::mtlnet::ops::{
    conv2d, conv2d_backward, cross_entropy, dropout, dropout_backward, linear, linear_backward, relu,
    relu_backward, residual_add, residual_add_backward, softmax_rows, softmax_rows_backward,
};
use beamtrain_core::mtlnet::{evaluate, train, Checkpoint, Mode, ModelDims, MtlModel, Tensor, TrainConfig};
use beamtrain_core::rng::{derive_seed, rng_from_seed, Rng};
use beamtrain_core::search::complexity::{instrumented_equivalent_channel, o3};
use beamtrain_core::search::{
    exhaustive_search, ias_search, multiply_cost, random_mean_rate, CostAlgorithm, IasInit, DEFAULT_BUDGET,
    DEFAULT_T_MAX,
};
use beamtrain_core::{
    build_codebooks, sample_channel_set, sum_rate, BeamSelection, CodebookSizes, EquivalentChannel, GainModel,
    RateMode, SystemConfig, C64,
};

// Pinned tolerances.
const PROP1_REL: f64 = 1e-9;
const PROP1_MAX_COND: f64 = 1e8;
const ZF_TOL: f64 = 1e-8;
const GRAD_REL: f64 = 1e-6;
const GRAD_FLOOR: f64 = 1e-8;
const ACCURACY_TARGET: f64 = 0.85;
const RATE_RATIO: f64 = 0.90;
const AO_SLACK: f64 = 1e-10;
const AO_RESIDUAL: f64 = 1e-9;
const AO_GRAD: f64 = 1e-6;
const AO_TOL: f64 = 1e-12;
const AO_MAX_ITER: usize = 100_000;
const AO_GD_REL: f64 = 1e-6;
const GD_GRAD: f64 = 1e-8;
const GD_MAX_ITER: usize = 60_000;
const FD_STEP: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn run(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::new(false, format!("panicked: {msg}"))
    });
    let elapsed = t.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = out.pass && in_time;
    let budget = match limit {
        Some(l) if !in_time => format!(", over the {:.0} s budget", l.as_secs_f64()),
        _ => String::new(),
    };
    println!(
        "criterion {id:>2} {}: {name}: {} ({:.1} s{budget})",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn cgauss(rng: &mut Rng) -> C64 {
    C64::new(gaussian(rng), gaussian(rng)) * std::f64::consts::FRAC_1_SQRT_2
}

fn condition(hbar: &EquivalentChannel) -> f64 {
    let ev = hbar.gram().symmetric_eigen().eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Gauss-Jordan inverse with partial pivoting, row-major.
fn gauss_jordan_inverse(a: &[C64], n: usize) -> Vec<C64> {
    let w = 2 * n;
    let mut m = vec![C64::new(0.0, 0.0); n * w];
    for i in 0..n {
        m[i * w..i * w + n].copy_from_slice(&a[i * n..(i + 1) * n]);
        m[i * w + n + i] = C64::new(1.0, 0.0);
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x * w + col].norm().total_cmp(&m[y * w + col].norm()))
            .unwrap();
        for j in 0..w {
            m.swap(col * w + j, piv * w + j);
        }
        let p = m[col * w + col];
        for j in 0..w {
            m[col * w + j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * w + col];
                for j in 0..w {
                    let v = m[col * w + j];
                    m[r * w + j] -= f * v;
                }
            }
        }
    }
    (0..n * n).map(|i| m[(i / n) * w + n + i % n]).collect()
}

fn random_equivalent_channels(count: usize) -> (Vec<EquivalentChannel>, usize) {
    let mut rng = rng_from_seed(0xacce97);
    let mut out = Vec::with_capacity(count);
    let mut redraws = 0;
    while out.len() < count {
        let k = 2 + out.len() % 5;
        let rows = k + rng.random_range(0..=3);
        let h = EquivalentChannel(DMatrix::from_fn(rows, k, |_, _| cgauss(&mut rng)));
        if condition(&h) < PROP1_MAX_COND {
            out.push(h);
        } else {
            redraws += 1;
        }
    }
    (out, redraws)
}

fn criterion_1() -> Outcome {
    let (channels, redraws) = random_equivalent_channels(1000);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for h in &channels {
        let k = h.k();
        let g = h.gram();
        let flat: Vec<C64> = (0..k * k).map(|i| g[(i / k, i % k)]).collect();
        let inv = gauss_jordan_inverse(&flat, k);
        for i in 0..k {
            let want = inv[i * k + i].re;
            let rel = match diag_inverse_entry(h, i) {
                Ok(got) => (got - want).abs() / want.abs(),
                Err(_) => f64::INFINITY,
            };
            worst = worst.max(rel);
            if !(rel <= PROP1_REL) {
                failures += 1;
            }
        }
    }
    Outcome::new(
        failures == 0,
        format!("1000 channels, K in 2..=6, {redraws} redraws for cond >= 1e8; worst rel err {worst:.2e}, {failures} entries > {PROP1_REL:e}"),
    )
}

fn criterion_2() -> Outcome {
    let (channels, _) = random_equivalent_channels(1000);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for h in &channels {
        let err = match zf_combiner(h) {
            Ok(w) => (w * &h.0 - DMatrix::<C64>::identity(h.k(), h.k())).norm(),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(err);
        if !(err <= ZF_TOL) {
            failures += 1;
        }
    }
    Outcome::new(
        failures == 0,
        format!("max ||W_B Hbar - I||_F = {worst:.2e} over 1000 channels, {failures} > {ZF_TOL:e}"),
    )
}

/// Desk geometry with K = M_s = N_s = 2 and 4-word codebooks.
fn small_search_instances() -> (SystemConfig, beamtrain_core::CodebookTriple, Vec<(u64, beamtrain_core::ChannelSet)>) {
    let cfg = SystemConfig::desk();
    assert_eq!((cfg.k, cfg.m_s, cfg.n_s), (2, 2, 2));
    let cb = build_codebooks(&cfg, CodebookSizes::uniform(4)).unwrap();
    let inst = (0..100u64)
        .map(|t| {
            let s = derive_seed(0x5ea7c4, t);
            (s, sample_channel_set(&cfg, &GainModel::default(), 3, 3, s).unwrap())
        })
        .collect();
    (cfg, cb, inst)
}

fn criterion_3() -> Outcome {
    let (cfg, cb, inst) = small_search_instances();
    let mut mismatches = 0;
    let mut wrong_counts = 0;
    let mut worst_rate_diff = 0.0f64;
    for (_, ch) in &inst {
        let es = exhaustive_search(ch, &cb, &cfg, 4096).unwrap();
        if es.candidates_evaluated != 4096 {
            wrong_counts += 1;
        }
        let mut best = (f64::NEG_INFINITY, BeamSelection::first(&cfg));
        for f1 in 0..4 {
            for f2 in 0..4 {
                for s1 in 0..4 {
                    for s2 in 0..4 {
                        for w1 in 0..4 {
                            for w2 in 0..4 {
                                let sel = BeamSelection::new(vec![f1, f2], vec![s1, s2], vec![w1, w2]);
                                let r = sum_rate(ch, &sel, &cb, &cfg, RateMode::Direct).unwrap_or(f64::NEG_INFINITY);
                                if r > best.0 {
                                    best = (r, sel);
                                }
                            }
                        }
                    }
                }
            }
        }
        if es.best_selection != best.1 {
            mismatches += 1;
        }
        worst_rate_diff = worst_rate_diff.max((es.best_rate - best.0).abs() / best.0.abs());
    }
    Outcome::new(
        mismatches == 0 && wrong_counts == 0,
        format!(
            "100 instances, |F|=|S|=|W|=4: {mismatches} argmax mismatches vs nested-loop oracle, {wrong_counts} candidate counts != 4096; max rel rate diff {worst_rate_diff:.1e}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let (cfg, cb, inst) = small_search_instances();
    let per_iter = 4u64.pow(2) * 3;
    let (mut es_below, mut ias_beats_random, mut trace_violations, mut bad_counts) = (0, 0, 0, 0);
    for (seed, ch) in &inst {
        let es = exhaustive_search(ch, &cb, &cfg, DEFAULT_BUDGET).unwrap();
        let ias = ias_search(ch, &cb, &cfg, DEFAULT_T_MAX, &IasInit::Seeded(*seed), DEFAULT_BUDGET).unwrap();
        let random = random_mean_rate(ch, &cb, &cfg, derive_seed(*seed, 1), 100).unwrap();
        if es.best_rate < ias.best_rate {
            es_below += 1;
        }
        if ias.best_rate >= random {
            ias_beats_random += 1;
        }
        trace_violations += ias.trace.windows(2).filter(|w| w[1] < w[0]).count();
        if ias.candidates_evaluated != ias.iterations as u64 * per_iter {
            bad_counts += 1;
        }
    }
    Outcome::new(
        es_below == 0 && ias_beats_random >= 95 && trace_violations == 0 && bad_counts == 0,
        format!(
            "ES < IAS on {es_below}/100; IAS >= mean random on {ias_beats_random}/100 (need 95); {trace_violations} trace decreases; {bad_counts} runs with count != iterations x {per_iter}"
        ),
    )
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Inputs kept at least 0.05 from zero so that ReLU kinks stay outside the
/// difference stencil.
fn away_from_zero(t: &mut Tensor<f64>) {
    for v in &mut t.data {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v);
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(GRAD_FLOOR)
}

fn central_diff(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let h = FD_STEP;
    let mut p = x.clone();
    (0..x.data.len())
        .map(|i| {
            let v = p.data[i];
            let mut at = |d: f64| {
                p.data[i] = v + d;
                f(&p)
            };
            let (u1, d1, u2, d2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            p.data[i] = v;
            (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * h)
        })
        .collect()
}

fn weighted(y: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    y.data.iter().zip(&c.data).map(|(a, b)| a * b).sum()
}

fn mini_dims() -> ModelDims {
    ModelDims {
        n_r: 4,
        m: 4,
        n_t: 2,
        k: 2,
        m_s: 2,
        n_s: 2,
        classes_f: 3,
        classes_s: 4,
        classes_w: 3,
        conv_mid: 3,
        kernel: 3,
        padding: 1,
        res_blocks: 2,
        shared_conv: false,
        embed: 5,
        hidden: 6,
        d_k: 3,
        dropout: 0.3,
        beamspace: true,
    }
}

fn criterion_5() -> Outcome {
    let mut rng = rng_from_seed(0x9ad);
    let mut errs: Vec<(String, f64)> = Vec::new();

    let mut x = random_tensor(&mut rng, &[2, 5, 4]);
    let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = random_tensor(&mut rng, &[3]);
    let c = random_tensor(&mut rng, &[3, 5, 4]);
    let (dx, dk, db) = conv2d_backward(&x, &k, &b, 1, &c).unwrap();
    errs.push(("conv2d dx".into(), rel_err(&dx.data, &central_diff(&x, |t| weighted(&conv2d(t, &k, &b, 1).unwrap(), &c)))));
    errs.push(("conv2d dk".into(), rel_err(&dk.data, &central_diff(&k, |t| weighted(&conv2d(&x, t, &b, 1).unwrap(), &c)))));
    errs.push(("conv2d db".into(), rel_err(&db.data, &central_diff(&b, |t| weighted(&conv2d(&x, &k, t, 1).unwrap(), &c)))));

    away_from_zero(&mut x);
    let c = random_tensor(&mut rng, &x.shape);
    let dx = relu_backward(&relu(&x), &c).unwrap();
    errs.push(("relu".into(), rel_err(&dx.data, &central_diff(&x, |t| weighted(&relu(t), &c)))));

    let xl = random_tensor(&mut rng, &[3, 6]);
    let w = random_tensor(&mut rng, &[4, 6]);
    let bl = random_tensor(&mut rng, &[4]);
    let c = random_tensor(&mut rng, &[3, 4]);
    let (dx, dw, db) = linear_backward(&xl, &w, &bl, &c).unwrap();
    errs.push(("linear dx".into(), rel_err(&dx.data, &central_diff(&xl, |t| weighted(&linear(t, &w, &bl).unwrap(), &c)))));
    errs.push(("linear dw".into(), rel_err(&dw.data, &central_diff(&w, |t| weighted(&linear(&xl, t, &bl).unwrap(), &c)))));
    errs.push(("linear db".into(), rel_err(&db.data, &central_diff(&bl, |t| weighted(&linear(&xl, &w, t).unwrap(), &c)))));

    let xs = random_tensor(&mut rng, &[3, 5]);
    let c = random_tensor(&mut rng, &[3, 5]);
    let dx = softmax_rows_backward(&softmax_rows(&xs).unwrap(), &c).unwrap();
    errs.push(("softmax_rows".into(), rel_err(&dx.data, &central_diff(&xs, |t| weighted(&softmax_rows(t).unwrap(), &c)))));

    let (_, mask) = dropout(&xs, 0.3, Mode::Train, 17).unwrap();
    let dx = dropout_backward(&mask, &c);
    errs.push((
        "dropout".into(),
        rel_err(&dx.data, &central_diff(&xs, |t| weighted(&dropout(t, 0.3, Mode::Train, 17).unwrap().0, &c))),
    ));

    let other = random_tensor(&mut rng, &[3, 5]);
    let (da, db) = residual_add_backward(&c);
    errs.push(("residual_add a".into(), rel_err(&da.data, &central_diff(&xs, |t| weighted(&residual_add(t, &other).unwrap(), &c)))));
    errs.push(("residual_add b".into(), rel_err(&db.data, &central_diff(&other, |t| weighted(&residual_add(&xs, t).unwrap(), &c)))));

    let labels = [4, 0, 2];
    let (_, d) = cross_entropy(&xs, &labels).unwrap();
    errs.push(("cross_entropy".into(), rel_err(&d.data, &central_diff(&xs, |t| cross_entropy(t, &labels).unwrap().0))));

    let dims = mini_dims();
    let model = MtlModel::<f64>::new(dims.clone(), 5).unwrap();
    let inputs: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..dims.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<Vec<u32>> = vec![vec![2, 0, 3, 1, 1, 2], vec![0, 1, 0, 2, 2, 0]];
    let lref: Vec<&[u32]> = labels.iter().map(Vec::as_slice).collect();
    let seeds = [11, 12];
    let (_, grads) = model.batch_gradients(&inputs, &lref, Mode::Train, &seeds).unwrap();
    let mut worst_model = ("".to_string(), 0.0f64);
    for (p, g) in grads.iter().enumerate() {
        let numeric = central_diff(&model.params[p], |t| {
            let mut m = model.clone();
            m.params[p] = t.clone();
            m.total_loss(&inputs, &lref, Mode::Train, &seeds).unwrap()
        });
        let e = rel_err(g, &numeric);
        if e > worst_model.1 {
            worst_model = (model.param_names()[p].clone(), e);
        }
    }
    errs.push((format!("model {}", worst_model.0), worst_model.1));

    let (worst_name, worst) = errs.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    let failures = errs.iter().filter(|(_, e)| !(*e <= GRAD_REL)).count();
    Outcome::new(
        failures == 0,
        format!(
            "{} checks (7 primitives, {} model tensors, f64); worst rel err {worst:.1e} ({worst_name}); {failures} > {GRAD_REL:e}",
            errs.len(),
            grads.len()
        ),
    )
}

struct DeskRun {
    ds: BeamDataset,
    model: MtlModel<f32>,
    report: beamtrain_core::mtlnet::TrainReport,
}

fn desk_run() -> DeskRun {
    let cfg = SystemConfig::desk();
    let cb = build_codebooks(&cfg, CodebookSizes::uniform(8)).unwrap();
    let ds = generate_dataset(&cfg, &GainModel::default(), &cb, 6000, 1, Labeler::default(), 3, 3, DEFAULT_BUDGET).unwrap();
    let ds = split_dataset(ds, 5.0 / 6.0, 1).unwrap();
    let mut model = MtlModel::<f32>::new(ModelDims::for_system(&cfg, cb.sizes()), 1).unwrap();
    let tc = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &ds, &tc, |_| {}).unwrap();
    DeskRun { ds, model, report }
}

fn criterion_6(run: &DeskRun) -> Outcome {
    let e = &run.report.epochs;
    let tc = TrainConfig::default();
    let defaults_ok = (tc.lr, tc.beta1, tc.beta2, tc.batch_size, tc.lr_decay, tc.lr_step, tc.epochs) == (1e-3, 0.8, 0.999, 16, 0.1, 5, 10);
    let split = (run.ds.split.train.len(), run.ds.split.validation.len());
    let loss_falls = e.last().unwrap().total < e[0].total;
    let final_acc = e.last().unwrap().accuracy.task;
    let acc_ok = final_acc.iter().all(|&a| a >= ACCURACY_TARGET);
    let monotone = (0..3).all(|t| e.windows(2).all(|w| w[1].accuracy.task[t] >= w[0].accuracy.task[t]));
    let lr_ok = run.report.lr_trace() == [[1e-3; 5], [1e-4; 5]].concat();
    let traces: Vec<String> = (0..3)
        .map(|t| e.iter().map(|r| format!("{:.3}", r.accuracy.task[t])).collect::<Vec<_>>().join(" "))
        .collect();
    Outcome::new(
        defaults_ok && split == (5000, 1000) && loss_falls && (acc_ok || monotone) && lr_ok,
        format!(
            "split {}/{}; (a) loss {:.4} -> {:.4}; (b) final accuracy {:.3}/{:.3}/{:.3} vs {ACCURACY_TARGET}, monotone {monotone}, per-epoch [{}] [{}] [{}]; (c) lr trace ok {lr_ok}",
            split.0,
            split.1,
            e[0].total,
            e.last().unwrap().total,
            final_acc[0],
            final_acc[1],
            final_acc[2],
            traces[0],
            traces[1],
            traces[2]
        ),
    )
}

fn criterion_7(run: &DeskRun) -> Outcome {
    let rep = evaluate(&run.model, &run.ds, &run.ds.header.codebooks, SplitKind::Validation, None).unwrap();
    let (mtl, ias, random) = (rep.mean_mtl(), rep.mean_ias(), rep.mean_random());
    Outcome::new(
        rep.rows.len() == 1000 && mtl >= RATE_RATIO * ias && mtl > random && ias > random,
        format!(
            "{} validation samples: mean rate MTL {mtl:.3}, IAS {ias:.3}, random {random:.3} bps/Hz; MTL/IAS = {:.3} (need {RATE_RATIO})",
            rep.rows.len(),
            mtl / ias
        ),
    )
}

/// `K N_s (N_r M + M^2 + M N_t + N_t)`.
fn o1_closed_form(cfg: &SystemConfig) -> u128 {
    let (k, ns, nr, m, nt) = (cfg.k as u128, cfg.n_s as u128, cfg.n_r as u128, cfg.m as u128, cfg.n_t as u128);
    k * ns * (nr * m + m * m + m * nt + nt)
}

fn o3_closed_form(cfg: &SystemConfig) -> u128 {
    let (k, ns, nr, m, nt) = (cfg.k as u128, cfg.n_s as u128, cfg.n_r as u128, cfg.m as u128, cfg.n_t as u128);
    k * k * ns * m * (nr + m) + k * k * ns * nt * (m + 1) + 6 * k + k.pow(3) * (ns + k) + k * (k - 1).pow(2) * (ns + k + 1)
}

fn criterion_8() -> Outcome {
    let sizes = CodebookSizes::uniform(8);
    let desk = SystemConfig::desk();
    let mut lines = Vec::new();
    let mut ok = true;
    for m in [16, 32, 64, 128] {
        let cfg = SystemConfig {
            m,
            m_b: m / desk.m_s,
            ..desk.clone()
        };
        let spec = ModelDims::for_system(&cfg, sizes).cost_spec();
        let es = multiply_cost(&cfg, &CostAlgorithm::Exhaustive, sizes, DEFAULT_T_MAX);
        let ias = multiply_cost(&cfg, &CostAlgorithm::Ias, sizes, DEFAULT_T_MAX);
        let mtl = multiply_cost(&cfg, &CostAlgorithm::Mtl(spec), sizes, DEFAULT_T_MAX);
        let es_closed = 8u128.pow((cfg.k + cfg.m_s + cfg.n_s) as u32) * o3_closed_form(&cfg);
        ok &= es > ias && ias > mtl && es == es_closed && o3(&cfg) == o3_closed_form(&cfg);
        lines.push(format!("M={m}: {es:.3e} > {ias:.3e} > {mtl:.3e}", es = es as f64, ias = ias as f64, mtl = mtl as f64));
    }
    let tiny = SystemConfig {
        n_r: 4,
        n_b: 2,
        m: 4,
        m_b: 2,
        n_t: 2,
        ..desk
    };
    let cb = build_codebooks(&tiny, CodebookSizes::uniform(2)).unwrap();
    let ch = sample_channel_set(&tiny, &GainModel::default(), 2, 2, 3).unwrap();
    let (_, counted) = instrumented_equivalent_channel(&ch, &BeamSelection::first(&tiny), &cb, &tiny).unwrap();
    let o1_ok = counted == o1_closed_form(&tiny);
    Outcome::new(
        ok && o1_ok,
        format!(
            "{}; ES equals the closed-form product for every M: {ok}; instrumented O1 {counted} vs closed form {}",
            lines.join(", "),
            o1_closed_form(&tiny)
        ),
    )
}

type Mat = DMatrix<f64>;

/// Data-term gradients written out directly.
fn f0_gradients(p: &BlockwiseProblem<f64>, g: &Mat, q: &[Mat]) -> (Mat, Vec<Mat>) {
    let xg = &p.x * g;
    let mut gg = Mat::zeros(g.nrows(), g.ncols());
    let mut gq = Vec::new();
    for u in 0..q.len() {
        let a = &p.f_s * &q[u] * &p.f_u[u];
        let r = &xg * &a - &p.y[u];
        gg += p.x.transpose() * &r * a.transpose();
        gq.push((&xg * &p.f_s).transpose() * &r * p.f_u[u].transpose());
    }
    (gg, gq)
}

fn full_gradients(p: &BlockwiseProblem<f64>, g: &Mat, q: &[Mat]) -> (Mat, Vec<Mat>) {
    let (mut gg, mut gq) = f0_gradients(p, g, q);
    gg += g * p.rho1;
    for (d, qu) in gq.iter_mut().zip(q) {
        *d += qu * p.rho2;
    }
    (gg, gq)
}

fn fd_joint_norm(p: &BlockwiseProblem<f64>, g: &Mat, q: &[Mat]) -> f64 {
    let h = 1e-6;
    let f = |g: &Mat, q: &[Mat]| objective(p, g, q).unwrap();
    let mut acc = 0.0;
    let mut gp = g.clone();
    for i in 0..g.len() {
        let v = gp[i];
        gp[i] = v + h;
        let up = f(&gp, q);
        gp[i] = v - h;
        let down = f(&gp, q);
        gp[i] = v;
        acc += ((up - down) / (2.0 * h)).powi(2);
    }
    let mut qp = q.to_vec();
    for u in 0..q.len() {
        for i in 0..q[u].len() {
            let v = qp[u][i];
            qp[u][i] = v + h;
            let up = f(g, &qp);
            qp[u][i] = v - h;
            let down = f(g, &qp);
            qp[u][i] = v;
            acc += ((up - down) / (2.0 * h)).powi(2);
        }
    }
    acc.sqrt()
}

fn vec_of(m: &Mat) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_column_slice(m.as_slice())
}

/// Relative residual of the vectorized normal equation for `G` given `Q`.
fn g_residual(p: &BlockwiseProblem<f64>, g: &Mat, q: &[Mat]) -> f64 {
    let (r, n) = (g.nrows(), g.ncols());
    let mut coef = Mat::identity(r * n, r * n) * p.rho1;
    let mut rhs = Mat::zeros(r, n);
    let xtx = p.x.transpose() * &p.x;
    for u in 0..q.len() {
        let a = &p.f_s * &q[u] * &p.f_u[u];
        coef += (&a * a.transpose()).kronecker(&xtx);
        rhs += p.x.transpose() * &p.y[u] * a.transpose();
    }
    (coef * vec_of(g) - vec_of(&rhs)).norm() / vec_of(&rhs).norm()
}

fn q_residual(p: &BlockwiseProblem<f64>, g: &Mat, q: &[Mat]) -> f64 {
    let z = &p.x * g * &p.f_s;
    let ztz = z.transpose() * &z;
    (0..q.len())
        .map(|u| {
            let f = &p.f_u[u];
            let dim = q[u].len();
            let coef = (f * f.transpose()).kronecker(&ztz) + Mat::identity(dim, dim) * p.rho2;
            let rhs = z.transpose() * &p.y[u] * f.transpose();
            (coef * vec_of(&q[u]) - vec_of(&rhs)).norm() / vec_of(&rhs).norm()
        })
        .fold(0.0, f64::max)
}

/// Joint gradient descent with backtracking from the same start.
/// Plain gradient descent on the joint objective: Barzilai-Borwein trial
/// steps, Armijo backtracking, stop once the gradient norm is below `GD_GRAD`.
fn gradient_descent(p: &BlockwiseProblem<f64>, seed: u64) -> f64 {
    let (mut g, mut q) = p.initial_point(seed);
    let mut f = objective(p, &g, &q).unwrap();
    let (mut dg, mut dq) = full_gradients(p, &g, &q);
    let mut step = 1e-2;
    for _ in 0..GD_MAX_ITER {
        let gn2 = dg.norm_squared() + dq.iter().map(Mat::norm_squared).sum::<f64>();
        if gn2.sqrt() < GD_GRAD {
            break;
        }
        let mut t = step;
        let (g2, q2, f2) = loop {
            let g2 = &g - &dg * t;
            let q2: Vec<Mat> = q.iter().zip(&dq).map(|(a, b)| a - b * t).collect();
            let f2 = objective(p, &g2, &q2).unwrap();
            if f2 <= f - 1e-4 * t * gn2 {
                break (g2, q2, f2);
            }
            t *= 0.5;
            if t < 1e-20 {
                return f;
            }
        };
        let (ng, nq) = full_gradients(p, &g2, &q2);
        let mut sy = (&g2 - &g).dot(&(&ng - &dg));
        let mut ss = (&g2 - &g).norm_squared();
        for i in 0..q.len() {
            sy += (&q2[i] - &q[i]).dot(&(&nq[i] - &dq[i]));
            ss += (&q2[i] - &q[i]).norm_squared();
        }
        step = if sy > 0.0 { ss / sy } else { 2.0 * t };
        (g, q, f, dg, dq) = (g2, q2, f2, ng, nq);
    }
    f
}

fn criterion_9() -> Outcome {
    let dims = ProblemDims::default();
    let (mut violations, mut worst_res, mut worst_fd, mut worst_gd) = (0usize, 0.0f64, 0.0f64, 0.0f64);
    let mut fd_over = 0;
    let mut gd_over = Vec::new();
    let mut max_iter_hits = 0;
    let mut lip_violations = 0;
    let mut rng = rng_from_seed(0x11f);
    for seed in 0..100u64 {
        let p = BlockwiseProblem::<f64>::random(&dims, MapPreset::Random, seed).unwrap();
        let st = alternate(&p, seed, AO_MAX_ITER, AO_TOL).unwrap();
        if !st.converged {
            max_iter_hits += 1;
        }
        let mut prev = st.initial_objective;
        for &f in &st.objective {
            if f > prev + AO_SLACK {
                violations += 1;
            }
            prev = f;
        }
        let q_new = update_q(&p, &st.g).unwrap();
        let g_new = update_g(&p, &st.q).unwrap();
        worst_res = worst_res.max(q_residual(&p, &st.g, &q_new)).max(g_residual(&p, &g_new, &st.q));
        let fd = fd_joint_norm(&p, &st.g, &st.q);
        worst_fd = worst_fd.max(fd);
        if !(fd <= AO_GRAD) {
            fd_over += 1;
        }
        let gd = gradient_descent(&p, seed);
        let gap = (st.final_objective() - gd).abs() / gd.abs();
        worst_gd = worst_gd.max(gap);
        if !(gap <= AO_GD_REL) {
            gd_over.push(seed);
        }

        let (l_g, l_q) = lipschitz_estimates(&p, &st.g, &st.q).unwrap();
        let (gg0, gq0) = f0_gradients(&p, &st.g, &st.q);
        for _ in 0..10 {
            let scale = 10f64.powf(rng.random_range(-3.0..1.0));
            let dg = Mat::from_fn(st.g.nrows(), st.g.ncols(), |_, _| scale * gaussian(&mut rng));
            let (gg1, _) = f0_gradients(&p, &(&st.g + &dg), &st.q);
            if (gg1 - &gg0).norm() > l_g * dg.norm() {
                lip_violations += 1;
            }
            let dq: Vec<Mat> = st.q.iter().map(|m| Mat::from_fn(m.nrows(), m.ncols(), |_, _| scale * gaussian(&mut rng))).collect();
            let q1: Vec<Mat> = st.q.iter().zip(&dq).map(|(a, b)| a + b).collect();
            let (_, gq1) = f0_gradients(&p, &st.g, &q1);
            let change: f64 = gq1.iter().zip(&gq0).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
            let dn: f64 = dq.iter().map(Mat::norm_squared).sum::<f64>().sqrt();
            if change > l_q * dn {
                lip_violations += 1;
            }
        }
    }
    let pass = violations == 0
        && worst_res <= AO_RESIDUAL
        && fd_over == 0
        && gd_over.is_empty()
        && lip_violations == 0;
    Outcome::new(
        pass,
        format!(
            "100 problems, tol {AO_TOL:e}: {violations} monotonicity violations; max normal-eq residual {worst_res:.1e}; FD grad max {worst_fd:.2e}, {fd_over}/100 above {AO_GRAD:e}; {max_iter_hits} hit max_iter; max rel gap to GD {worst_gd:.1e} (seeds above {AO_GD_REL:e}: {gd_over:?}); Lipschitz probe {lip_violations}/2000 violations"
        ),
    )
}

fn tiny_pipeline() -> (String, String) {
    let cfg = SystemConfig::desk();
    let cb = build_codebooks(&cfg, CodebookSizes::uniform(2)).unwrap();
    let ds = generate_dataset(
        &cfg,
        &GainModel::default(),
        &cb,
        40,
        7,
        Labeler::Ias {
            t_max: DEFAULT_T_MAX,
            restarts: 2,
        },
        3,
        3,
        DEFAULT_BUDGET,
    )
    .unwrap();
    let ds = split_dataset(ds, 0.8, 7).unwrap();
    let dims = ModelDims {
        embed: 8,
        hidden: 8,
        d_k: 4,
        conv_mid: 2,
        ..ModelDims::for_system(&cfg, cb.sizes())
    };
    let mut model = MtlModel::<f32>::new(dims, 7).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 7,
        ..TrainConfig::default()
    };
    let rep = train(&mut model, &ds, &tc, |_| {}).unwrap();
    let ev = evaluate(&model, &ds, &cb, SplitKind::Validation, Some(DEFAULT_BUDGET)).unwrap();
    let kv = ds.header.to_kv();
    (rep.to_csv(&kv), ev.to_csv(&kv))
}

fn criterion_10(run: &DeskRun) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.rbl"), dir.path().join("b.rbl"));
    run.ds.write(&a).unwrap();
    BeamDataset::read(&a).unwrap().write(&b).unwrap();
    let ds_ok = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let ck = Checkpoint {
        model: run.model.clone(),
        seed: 1,
        epoch: 10,
        extra: run.ds.header.to_kv(),
    };
    let (a, b) = (dir.path().join("a.rblm"), dir.path().join("b.rblm"));
    ck.write(&a).unwrap();
    let back = Checkpoint::read(&a).unwrap();
    back.write(&b).unwrap();
    let ck_ok = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap() && back == ck;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let first = pool.install(tiny_pipeline);
    let second = pool.install(tiny_pipeline);
    let rerun_ok = first == second;
    Outcome::new(
        ds_ok && ck_ok && rerun_ok,
        format!(
            "dataset write-read-write identical {ds_ok}; checkpoint identical {ck_ok}; single-worker pipeline rerun reports identical {rerun_ok} ({} + {} bytes)",
            first.0.len(),
            first.1.len()
        ),
    )
}

/// `BEAMTRAIN_ACCEPTANCE_ONLY=5,9` limits the run to the listed criteria.
fn selected() -> Vec<u32> {
    match std::env::var("BEAMTRAIN_ACCEPTANCE_ONLY") {
        Ok(v) => v.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=10).collect(),
    }
}

fn main() {
    let only = selected();
    let want = |id: u32| only.contains(&id);
    let secs = |s: u64| Some(Duration::from_secs(s));
    let mut results = Vec::new();
    let cheap: [(u32, &str, Option<Duration>, fn() -> Outcome); 5] = [
        (1, "determinant-ratio oracle", secs(5), criterion_1),
        (2, "ZF identity", None, criterion_2),
        (3, "ES correctness", secs(60), criterion_3),
        (4, "dominance chain", None, criterion_4),
        (5, "gradient suite", secs(30), criterion_5),
    ];
    for (id, name, limit, f) in cheap {
        if want(id) {
            results.push(run(id, name, limit, f));
        }
    }
    let desk = if want(6) || want(7) || want(10) {
        let t = Instant::now();
        let d = catch_unwind(desk_run);
        if d.is_ok() {
            println!("desk dataset and training: {:.1} s", t.elapsed().as_secs_f64());
        }
        Some(d)
    } else {
        None
    };
    let on_desk = |id: u32, name: &str, limit: Option<Duration>, f: &dyn Fn(&DeskRun) -> Outcome| match &desk {
        Some(Ok(d)) => run(id, name, limit, || f(d)),
        _ => run(id, name, None, || Outcome::new(false, "desk run panicked")),
    };
    if want(6) {
        results.push(on_desk(6, "desk training trend", secs(30 * 60), &criterion_6));
    }
    if want(7) {
        results.push(on_desk(7, "sum-rate gap", None, &criterion_7));
    }
    if want(8) {
        results.push(run(8, "complexity accounting", None, criterion_8));
    }
    if want(9) {
        results.push(run(9, "blockwise AO suite", secs(120), criterion_9));
    }
    if want(10) {
        results.push(on_desk(10, "persistence round-trips", None, &criterion_10));
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if passed < results.len() && std::env::var("BEAMTRAIN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
