//! Resolution of the key=value configuration shared by every command.

use std::path::Path;

use beamtrain_core::blockwise::{MapPreset, ProblemDims};
use beamtrain_core::dataset::Labeler;
use beamtrain_core::mtlnet::{ModelDims, TrainConfig};
use beamtrain_core::search::DEFAULT_T_MAX;
use beamtrain_core::{CodebookSizes, Error, GainModel, KvMap, Result, SystemConfig};

/// Every option after file loading and `--set` overrides.
#[derive(Clone, Debug)]
pub struct Settings {
    pub kv: KvMap,
    pub system: SystemConfig,
    pub gain: GainModel,
    pub sizes: CodebookSizes,
}

#[derive(Clone, Debug)]
pub struct DatasetOpts {
    pub samples: usize,
    pub labeler: Labeler,
    pub l_b: usize,
    pub l_u: usize,
    pub train_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOpts {
    pub t_max: usize,
    pub restarts: usize,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct BlockwiseOpts {
    pub dims: ProblemDims,
    pub preset: MapPreset,
    pub max_iter: usize,
    pub tol: f64,
    pub complex: bool,
}

fn cli_defaults(kv: &mut KvMap) {
    kv.set("dataset.samples", 6000);
    kv.set("dataset.labeler", "ias");
    kv.set("dataset.restarts", beamtrain_core::dataset::DEFAULT_RESTARTS);
    kv.set("dataset.t_max", DEFAULT_T_MAX);
    kv.set("dataset.l_b", 3);
    kv.set("dataset.l_u", 3);
    kv.set("dataset.train_fraction", 5.0 / 6.0);
    kv.set("search.t_max", DEFAULT_T_MAX);
    kv.set("search.restarts", 1);
    kv.set("search.samples", 100);
    let b = ProblemDims::default();
    kv.set("blockwise.v", b.v);
    kv.set("blockwise.r", b.r);
    kv.set("blockwise.n", b.n);
    kv.set("blockwise.q", b.q);
    kv.set("blockwise.tasks", b.d.len());
    kv.set("blockwise.d", b.d[0]);
    kv.set("blockwise.p", b.p[0]);
    kv.set("blockwise.rho1", b.rho1);
    kv.set("blockwise.rho2", b.rho2);
    kv.set("blockwise.preset", "random");
    kv.set("blockwise.max_iter", 100_000);
    kv.set("blockwise.tol", 1e-12);
    kv.set("blockwise.field", "real");
}

/// All keys the tool understands, with their default values.
pub fn defaults() -> KvMap {
    let mut kv = KvMap::new();
    let system = SystemConfig::desk();
    let sizes = CodebookSizes::uniform(8);
    system.write_kv(&mut kv);
    GainModel::default().write_kv(&mut kv);
    sizes.write_kv(&mut kv);
    TrainConfig::default().write_kv(&mut kv);
    ModelDims::for_system(&system, sizes).write_kv(&mut kv);
    cli_defaults(&mut kv);
    kv
}

fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Settings {
    /// Loads `config` (if any), applies `overrides` and validates everything
    /// before returning.
    pub fn resolve(config: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match config {
            Some(p) => KvMap::parse(&std::fs::read_to_string(p)?)?,
            None => KvMap::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            user.set(k, v);
        }
        let known = defaults();
        if let Some((k, _)) = user.iter().find(|(k, _)| known.get(k).is_none()) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        let system = SystemConfig::from_kv(&user)?;
        let gain = GainModel::from_kv(&user)?;
        let sizes = CodebookSizes::from_kv(&user)?;
        // Recompute derived defaults (model dimensions) for this system.
        let mut kv = KvMap::new();
        system.write_kv(&mut kv);
        gain.write_kv(&mut kv);
        sizes.write_kv(&mut kv);
        TrainConfig::default().write_kv(&mut kv);
        ModelDims::for_system(&system, sizes).write_kv(&mut kv);
        cli_defaults(&mut kv);
        kv.extend(&user);
        let s = Self {
            kv,
            system,
            gain,
            sizes,
        };
        s.train()?;
        s.model()?;
        s.dataset()?;
        s.search()?;
        s.blockwise()?;
        Ok(s)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let tc = TrainConfig::from_kv(&self.kv)?;
        tc.validate()?;
        Ok(tc)
    }

    pub fn model(&self) -> Result<ModelDims> {
        let base = ModelDims::for_system(&self.system, self.sizes);
        let dims = ModelDims::from_kv(&self.kv, &base)?;
        let fixed = [
            ("model.n_r", dims.n_r, base.n_r),
            ("model.m", dims.m, base.m),
            ("model.n_t", dims.n_t, base.n_t),
            ("model.k", dims.k, base.k),
            ("model.m_s", dims.m_s, base.m_s),
            ("model.n_s", dims.n_s, base.n_s),
            ("model.classes_f", dims.classes_f, base.classes_f),
            ("model.classes_s", dims.classes_s, base.classes_s),
            ("model.classes_w", dims.classes_w, base.classes_w),
        ];
        if let Some((k, got, want)) = fixed.iter().find(|(_, a, b)| a != b) {
            return Err(Error::Config(format!("{k}={got} contradicts the system configuration ({want})")));
        }
        Ok(dims)
    }

    pub fn dataset(&self) -> Result<DatasetOpts> {
        let t_max: usize = self.kv.require("dataset.t_max")?;
        let labeler = match self.kv.get("dataset.labeler").unwrap_or("ias") {
            "ias" => Labeler::Ias {
                t_max,
                restarts: self.kv.require("dataset.restarts")?,
            },
            "es" => Labeler::Es,
            other => return Err(Error::Config(format!("dataset.labeler must be ias or es, got {other:?}"))),
        };
        if let Labeler::Ias { t_max: 0, .. } | Labeler::Ias { restarts: 0, .. } = labeler {
            return Err(Error::Config("dataset.t_max and dataset.restarts must be >= 1".into()));
        }
        let train_fraction: f64 = self.kv.require("dataset.train_fraction")?;
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!("dataset.train_fraction {train_fraction} outside (0, 1)")));
        }
        Ok(DatasetOpts {
            samples: self.kv.require("dataset.samples")?,
            labeler,
            l_b: self.kv.require("dataset.l_b")?,
            l_u: self.kv.require("dataset.l_u")?,
            train_fraction,
        })
    }

    pub fn search(&self) -> Result<SearchOpts> {
        let o = SearchOpts {
            t_max: self.kv.require("search.t_max")?,
            restarts: self.kv.require("search.restarts")?,
            samples: self.kv.require("search.samples")?,
        };
        if o.t_max == 0 || o.restarts == 0 {
            return Err(Error::Config("search.t_max and search.restarts must be >= 1".into()));
        }
        Ok(o)
    }

    pub fn blockwise(&self) -> Result<BlockwiseOpts> {
        let tasks: usize = self.kv.require("blockwise.tasks")?;
        let d: usize = self.kv.require("blockwise.d")?;
        let p: usize = self.kv.require("blockwise.p")?;
        let dims = ProblemDims {
            v: self.kv.require("blockwise.v")?,
            r: self.kv.require("blockwise.r")?,
            n: self.kv.require("blockwise.n")?,
            q: self.kv.require("blockwise.q")?,
            d: vec![d; tasks],
            p: vec![p; tasks],
            rho1: self.kv.require("blockwise.rho1")?,
            rho2: self.kv.require("blockwise.rho2")?,
        };
        let preset = match self.kv.get("blockwise.preset").unwrap_or("random") {
            "random" => MapPreset::Random,
            "identity" => MapPreset::Identity,
            other => return Err(Error::Config(format!("blockwise.preset must be random or identity, got {other:?}"))),
        };
        let complex = match self.kv.get("blockwise.field").unwrap_or("real") {
            "real" => false,
            "complex" => true,
            other => return Err(Error::Config(format!("blockwise.field must be real or complex, got {other:?}"))),
        };
        let o = BlockwiseOpts {
            dims,
            preset,
            max_iter: self.kv.require("blockwise.max_iter")?,
            tol: self.kv.require("blockwise.tol")?,
            complex,
        };
        if tasks == 0 || o.max_iter == 0 || !(o.tol > 0.0) {
            return Err(Error::Config("blockwise.tasks and blockwise.max_iter must be >= 1 and blockwise.tol > 0".into()));
        }
        Ok(o)
    }

    /// Keys under `prefixes`, for CSV comment headers.
    pub fn header(&self, prefixes: &[&str], extra: &[(&str, String)]) -> KvMap {
        let mut out = KvMap::new();
        for (k, v) in self.kv.iter() {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                out.set(k, v);
            }
        }
        for (k, v) in extra {
            out.set(*k, v);
        }
        out
    }
}
