use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use beamtrain_core::blockwise::{alternate, AoState, BlockScalar, BlockwiseProblem};
use beamtrain_core::dataset::{generate_dataset, split_dataset, BeamDataset, SplitKind};
use beamtrain_core::mtlnet::{evaluate, train, Checkpoint, ModelDims, MtlModel};
use beamtrain_core::search::{
    exhaustive_search, ias_multistart, multiply_cost, random_baseline, CostAlgorithm, SearchReport,
};
use beamtrain_core::{build_codebooks, sample_channel_set, ChannelSet, Error, KvMap, Result, SystemConfig};
use num_complex::Complex64;

use crate::settings::Settings;

/// Writes `text` to `out`, or stdout when `out` is `None` or `-`.
pub fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) if p != Path::new("-") => std::fs::write(p, text)?,
        _ => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn comment_lines(kv: &KvMap) -> String {
    let mut s = String::new();
    for (k, v) in kv.iter() {
        let _ = writeln!(s, "# {k}={v}");
    }
    s
}

pub fn gen_dataset(st: &Settings, seed: u64, budget: u64, out: &Path) -> Result<()> {
    let o = st.dataset()?;
    let cb = build_codebooks(&st.system, st.sizes)?;
    let ds = generate_dataset(&st.system, &st.gain, &cb, o.samples, seed, o.labeler, o.l_b, o.l_u, budget)?;
    let ds = split_dataset(ds, o.train_fraction, seed)?;
    ds.write(out)?;
    eprintln!(
        "wrote {} samples ({} train, {} validation) to {}",
        ds.len(),
        ds.split.train.len(),
        ds.split.validation.len(),
        out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Algorithm {
    Es,
    Ias,
    Random,
}

fn selection_text(r: &SearchReport) -> String {
    r.best_selection.flat().iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-")
}

pub fn search(
    st: &Settings,
    seed: u64,
    budget: u64,
    dataset: Option<&Path>,
    algorithm: Algorithm,
    out: Option<&Path>,
) -> Result<()> {
    let o = st.search()?;
    let (cfg, cb, channels): (SystemConfig, _, Vec<(u64, ChannelSet)>) = match dataset {
        Some(p) => {
            let ds = BeamDataset::read(p)?;
            let ch = (0..ds.len())
                .map(|i| Ok((ds.samples[i].seed, ds.channel(i)?)))
                .collect::<Result<Vec<_>>>()?;
            (ds.header.cfg.clone(), ds.header.codebooks.clone(), ch)
        }
        None => {
            let d = st.dataset()?;
            let cb = build_codebooks(&st.system, st.sizes)?;
            let ch = (0..o.samples)
                .map(|t| {
                    let s = beamtrain_core::rng::derive_seed(seed, t as u64);
                    Ok((s, sample_channel_set(&st.system, &st.gain, d.l_b, d.l_u, s)?))
                })
                .collect::<Result<Vec<_>>>()?;
            (st.system.clone(), cb, ch)
        }
    };
    let name = match algorithm {
        Algorithm::Es => "es",
        Algorithm::Ias => "ias",
        Algorithm::Random => "random",
    };
    let mut head = st.header(&["system.", "gain.", "codebook.", "search.", "dataset.l_"], &[]);
    head.set("cli.algorithm", name);
    head.set("cli.seed", seed);
    head.set("cli.budget", budget);
    if dataset.is_some() {
        head.set("cli.channels", "dataset");
    }
    let mut csv = comment_lines(&head);
    csv.push_str("index,seed,algorithm,rate,candidates,multiplies,iterations,converged,selection\n");
    for (i, (s, ch)) in channels.iter().enumerate() {
        let r = match algorithm {
            Algorithm::Es => exhaustive_search(ch, &cb, &cfg, budget)?,
            Algorithm::Ias => ias_multistart(ch, &cb, &cfg, o.t_max, *s, o.restarts, budget)?,
            Algorithm::Random => random_baseline(ch, &cb, &cfg, *s)?,
        };
        let _ = writeln!(
            csv,
            "{i},{s},{name},{},{},{},{},{},{}",
            r.best_rate,
            r.candidates_evaluated,
            r.multiply_count,
            r.iterations,
            r.converged,
            selection_text(&r)
        );
    }
    emit(out, &csv)
}

pub fn train_cmd(st: &Settings, seed: u64, dataset: &Path, out: &Path, report: Option<&Path>) -> Result<()> {
    let ds = BeamDataset::read(dataset)?;
    let mut tc = st.train()?;
    tc.seed = seed;
    let dims = dims_for(st, &ds)?;
    let mut model = MtlModel::<f32>::new(dims, seed)?;
    let rep = train(&mut model, &ds, &tc, |e| {
        eprintln!(
            "epoch {} lr {:e} loss {:.4} acc {:.3}/{:.3}/{:.3}",
            e.epoch + 1,
            e.lr,
            e.total,
            e.accuracy.task[0],
            e.accuracy.task[1],
            e.accuracy.task[2]
        );
    })?;
    let mut head = st.header(&["train.", "model."], &[]);
    tc.write_kv(&mut head);
    head.set("cli.seed", seed);
    head.set("cli.dataset_seed", ds.header.seed);
    head.set("cli.dataset_samples", ds.len());
    let ck = Checkpoint {
        model,
        seed,
        epoch: tc.epochs,
        extra: head.clone(),
    };
    ck.write(out)?;
    if let Some(r) = report {
        std::fs::write(r, rep.to_csv(&head))?;
    }
    Ok(())
}

/// Model dimensions from the settings, checked against the dataset's system.
fn dims_for(st: &Settings, ds: &BeamDataset) -> Result<ModelDims> {
    let base = ModelDims::for_system(&ds.header.cfg, ds.header.sizes());
    let d = ModelDims::from_kv(&st.kv, &base)?;
    Ok(ModelDims {
        n_r: base.n_r,
        m: base.m,
        n_t: base.n_t,
        k: base.k,
        m_s: base.m_s,
        n_s: base.n_s,
        classes_f: base.classes_f,
        classes_s: base.classes_s,
        classes_w: base.classes_w,
        ..d
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    All,
}

pub fn eval(
    dataset: &Path,
    checkpoint: &Path,
    split: SplitArg,
    es_budget: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let ds = BeamDataset::read(dataset)?;
    let ck = Checkpoint::read(checkpoint)?;
    let mut kind = match split {
        SplitArg::Train => SplitKind::Train,
        SplitArg::Validation => SplitKind::Validation,
        SplitArg::All => SplitKind::All,
    };
    if kind == SplitKind::Validation && ds.split.validation.is_empty() {
        kind = SplitKind::All;
    }
    let rep = evaluate(&ck.model, &ds, &ds.header.codebooks, kind, es_budget)?;
    let mut head = ds.header.to_kv();
    head.extend(&ck.extra);
    // Codeword bits are recoverable from the dataset itself.
    let head = KvMap::parse(
        &head
            .iter()
            .filter(|(k, _)| !k.starts_with("codebook.word."))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect::<String>(),
    )?;
    let mut head = head;
    head.set("cli.checkpoint_epoch", ck.epoch);
    head.set("cli.split", format!("{kind:?}").to_lowercase());
    for (k, v) in rep.summary().iter() {
        eprintln!("{k}={v}");
    }
    emit(out, &rep.to_csv(&head))
}

pub fn complexity(st: &Settings, ms: &[usize], out: Option<&Path>) -> Result<()> {
    let o = st.search()?;
    let mut head = st.header(&["system.", "codebook.", "search.t_max", "model."], &[]);
    head.set("cli.m", ms.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" "));
    let mut csv = comment_lines(&head);
    csv.push_str("m,m_b,es,ias,mtl\n");
    for &m in ms {
        if m % st.system.m_s != 0 {
            return Err(Error::Config(format!("M={m} is not a multiple of M_s={}", st.system.m_s)));
        }
        let cfg = SystemConfig {
            m,
            m_b: m / st.system.m_s,
            ..st.system.clone()
        };
        cfg.validate()?;
        let base = ModelDims::for_system(&cfg, st.sizes);
        let dims = ModelDims {
            m,
            ..ModelDims::from_kv(&st.kv, &base)?
        };
        let mtl = CostAlgorithm::Mtl(dims.cost_spec());
        let _ = writeln!(
            csv,
            "{m},{},{},{},{}",
            cfg.m_b,
            multiply_cost(&cfg, &CostAlgorithm::Exhaustive, st.sizes, o.t_max),
            multiply_cost(&cfg, &CostAlgorithm::Ias, st.sizes, o.t_max),
            multiply_cost(&cfg, &mtl, st.sizes, o.t_max)
        );
    }
    emit(out, &csv)
}

fn trace_rows<T: BlockScalar>(st: &AoState<T>) -> String {
    let mut s = String::from("iteration,objective,grad_norm,lipschitz_g,lipschitz_q\n");
    let _ = writeln!(s, "0,{},,,", st.initial_objective);
    for i in 0..st.iterations {
        let (lg, lq) = st.lipschitz[i];
        let _ = writeln!(s, "{},{},{},{},{}", i + 1, st.objective[i], st.grad_norm[i], lg, lq);
    }
    s
}

fn run_blockwise<T: BlockScalar>(st: &Settings, seed: u64) -> Result<String> {
    let o = st.blockwise()?;
    let prob = BlockwiseProblem::<T>::random(&o.dims, o.preset, seed)?;
    let ao = alternate(&prob, seed, o.max_iter, o.tol)?;
    eprintln!(
        "iterations {} converged {} objective {} grad_norm {:e}",
        ao.iterations,
        ao.converged,
        ao.final_objective(),
        ao.final_grad_norm()
    );
    Ok(trace_rows(&ao))
}

pub fn blockwise_demo(st: &Settings, seed: u64, out: Option<&Path>) -> Result<()> {
    let o = st.blockwise()?;
    let mut head = st.header(&["blockwise."], &[]);
    head.set("cli.seed", seed);
    let rows = if o.complex {
        run_blockwise::<Complex64>(st, seed)?
    } else {
        run_blockwise::<f64>(st, seed)?
    };
    emit(out, &(comment_lines(&head) + &rows))
}

pub fn out_path(p: &Option<PathBuf>) -> Option<&Path> {
    p.as_deref()
}
