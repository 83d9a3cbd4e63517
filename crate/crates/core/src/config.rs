//! System, gain-model and codebook-size configuration.
//!
//! Configuration travels as line-oriented `key=value` text. Files may group
//! keys under `[section]` headers; internally every key is flattened to
//! `section.key` and the canonical rendering is the sorted list of flattened
//! lines, which is what gets embedded in dataset and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Flattened `section.key -> value` map with a canonical text form.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses sectioned `key=value` text. Blank lines and lines starting with
    /// `#` or `;` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header", lineno + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{}.{}", section, k.trim())
            };
            map.insert(key, v.trim().to_string());
        }
        Ok(Self(map))
    }

    /// Sorted `key=value` lines, newline terminated.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Parses `key` if present, otherwise returns `default`.
    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("{key}={v:?}: {e}"))),
        }
    }

    pub fn require<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self
            .0
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
        v.parse()
            .map_err(|e| Error::Config(format!("{key}={v:?}: {e}")))
    }

    /// Merges `other` on top of `self`.
    pub fn extend(&mut self, other: &KvMap) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Keys starting with `prefix.`.
    pub fn section(&self, prefix: &str) -> impl Iterator<Item = (&str, &str)> {
        let p = format!("{prefix}.");
        self.0
            .iter()
            .filter(move |(k, _)| k.starts_with(&p))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Array and link dimensions plus link-budget scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    /// BS antennas.
    pub n_r: usize,
    /// BS RF chains (one per subarray).
    pub n_s: usize,
    /// Antennas per BS subarray.
    pub n_b: usize,
    /// RIS elements.
    pub m: usize,
    /// RIS subarrays.
    pub m_s: usize,
    /// Elements per RIS subarray.
    pub m_b: usize,
    /// Antennas per user.
    pub n_t: usize,
    /// Users.
    pub k: usize,
    /// Per-user transmit power in dBm.
    pub p_dbm: f64,
    /// Noise power, linear watts.
    pub n0: f64,
    pub carrier_freq_hz: f64,
    pub element_spacing_over_lambda: f64,
    pub reflect_amplitude: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SystemConfig {
    /// Desk-scale configuration used by the training acceptance run.
    pub fn desk() -> Self {
        Self {
            n_r: 16,
            n_s: 2,
            n_b: 8,
            m: 16,
            m_s: 2,
            m_b: 8,
            n_t: 4,
            k: 2,
            p_dbm: 10.0,
            n0: 1e-3,
            carrier_freq_hz: 1.6e12,
            element_spacing_over_lambda: 0.5,
            reflect_amplitude: 0.8,
        }
    }

    /// Linear transmit power in watts.
    pub fn power_watts(&self) -> f64 {
        dbm_to_watts(self.p_dbm)
    }

    /// The scalar `P / (N_t N_B N0)` multiplying every SINR.
    pub fn snr_scale(&self) -> f64 {
        self.power_watts() / (self.n_t as f64 * self.n_b as f64 * self.n0)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_r", self.n_r),
            ("n_s", self.n_s),
            ("n_b", self.n_b),
            ("m", self.m),
            ("m_s", self.m_s),
            ("m_b", self.m_b),
            ("n_t", self.n_t),
            ("k", self.k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_r != self.n_b * self.n_s {
            return Err(Error::Config(format!(
                "n_r = n_b * n_s violated: {} != {} * {}",
                self.n_r, self.n_b, self.n_s
            )));
        }
        if self.m != self.m_b * self.m_s {
            return Err(Error::Config(format!(
                "m = m_b * m_s violated: {} != {} * {}",
                self.m, self.m_b, self.m_s
            )));
        }
        if self.k > self.n_s {
            return Err(Error::Config(format!(
                "k <= n_s violated: {} > {}",
                self.k, self.n_s
            )));
        }
        if !self.p_dbm.is_finite() {
            return Err(Error::Config("p_dbm must be finite".into()));
        }
        if !(self.n0 > 0.0 && self.n0.is_finite()) {
            return Err(Error::Config("n0 must be positive".into()));
        }
        if !(self.carrier_freq_hz > 0.0 && self.carrier_freq_hz.is_finite()) {
            return Err(Error::Config("carrier_freq_hz must be positive".into()));
        }
        if !(self.element_spacing_over_lambda > 0.0 && self.element_spacing_over_lambda.is_finite())
        {
            return Err(Error::Config(
                "element_spacing_over_lambda must be positive".into(),
            ));
        }
        if !(self.reflect_amplitude > 0.0 && self.reflect_amplitude <= 1.0) {
            return Err(Error::Config(format!(
                "reflect_amplitude must lie in (0, 1], got {}",
                self.reflect_amplitude
            )));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("system.n_r", self.n_r);
        kv.set("system.n_s", self.n_s);
        kv.set("system.n_b", self.n_b);
        kv.set("system.m", self.m);
        kv.set("system.m_s", self.m_s);
        kv.set("system.m_b", self.m_b);
        kv.set("system.n_t", self.n_t);
        kv.set("system.k", self.k);
        kv.set("system.p_dbm", self.p_dbm);
        kv.set("system.n0", self.n0);
        kv.set("system.carrier_freq_hz", self.carrier_freq_hz);
        kv.set(
            "system.element_spacing_over_lambda",
            self.element_spacing_over_lambda,
        );
        kv.set("system.reflect_amplitude", self.reflect_amplitude);
    }

    /// Reads `system.*` keys on top of the desk defaults. Derived counts
    /// (`n_r`, `m`) follow from the subarray split unless given explicitly.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::desk();
        let n_s = kv.get_or("system.n_s", d.n_s)?;
        let n_b = kv.get_or("system.n_b", d.n_b)?;
        let m_s = kv.get_or("system.m_s", d.m_s)?;
        let m_b = kv.get_or("system.m_b", d.m_b)?;
        let cfg = Self {
            n_r: kv.get_or("system.n_r", n_s * n_b)?,
            n_s,
            n_b,
            m: kv.get_or("system.m", m_s * m_b)?,
            m_s,
            m_b,
            n_t: kv.get_or("system.n_t", d.n_t)?,
            k: kv.get_or("system.k", d.k)?,
            p_dbm: kv.get_or("system.p_dbm", d.p_dbm)?,
            n0: kv.get_or("system.n0", d.n0)?,
            carrier_freq_hz: kv.get_or("system.carrier_freq_hz", d.carrier_freq_hz)?,
            element_spacing_over_lambda: kv.get_or(
                "system.element_spacing_over_lambda",
                d.element_spacing_over_lambda,
            )?,
            reflect_amplitude: kv.get_or("system.reflect_amplitude", d.reflect_amplitude)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `10^((dBm - 30) / 10)`.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Path-gain model for the THz links.
#[derive(Clone, Debug, PartialEq)]
pub struct GainModel {
    /// Molecular absorption coefficient kappa(f), 1/m.
    pub absorption_coeff: f64,
    /// Reflection coefficient xi(f) applied to NLoS paths.
    pub reflection_coeff: f64,
    /// BS-RIS distance in metres.
    pub d0: f64,
    /// Diameter of the user region in metres.
    pub user_region_diameter: f64,
    /// Whether path 0 of the BS-RIS link is line-of-sight (no reflection loss).
    pub los_bs_ris: bool,
    /// Whether path 0 of each RIS-user link is line-of-sight.
    pub los_ris_user: bool,
    /// Rescale gains so that `E[||H||_F^2]` equals the antenna-count product.
    pub normalize: bool,
}

impl Default for GainModel {
    fn default() -> Self {
        Self {
            absorption_coeff: 0.2,
            reflection_coeff: 1e-6,
            d0: 20.0,
            user_region_diameter: 24.0,
            los_bs_ris: false,
            los_ris_user: true,
            normalize: true,
        }
    }
}

impl GainModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.absorption_coeff >= 0.0 && self.absorption_coeff.is_finite()) {
            return Err(Error::Config("absorption_coeff must be >= 0".into()));
        }
        if !(self.reflection_coeff > 0.0 && self.reflection_coeff <= 1.0) {
            return Err(Error::Config("reflection_coeff must lie in (0, 1]".into()));
        }
        if !(self.d0 > 0.0 && self.d0.is_finite()) {
            return Err(Error::Config("d0 must be positive".into()));
        }
        if !(self.user_region_diameter > 0.0 && self.user_region_diameter.is_finite()) {
            return Err(Error::Config("user_region_diameter must be positive".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("gain.absorption_coeff", self.absorption_coeff);
        kv.set("gain.reflection_coeff", self.reflection_coeff);
        kv.set("gain.d0", self.d0);
        kv.set("gain.user_region_diameter", self.user_region_diameter);
        kv.set("gain.los_bs_ris", self.los_bs_ris);
        kv.set("gain.los_ris_user", self.los_ris_user);
        kv.set("gain.normalize", self.normalize);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let gm = Self {
            absorption_coeff: kv.get_or("gain.absorption_coeff", d.absorption_coeff)?,
            reflection_coeff: kv.get_or("gain.reflection_coeff", d.reflection_coeff)?,
            d0: kv.get_or("gain.d0", d.d0)?,
            user_region_diameter: kv.get_or("gain.user_region_diameter", d.user_region_diameter)?,
            los_bs_ris: kv.get_or("gain.los_bs_ris", d.los_bs_ris)?,
            los_ris_user: kv.get_or("gain.los_ris_user", d.los_ris_user)?,
            normalize: kv.get_or("gain.normalize", d.normalize)?,
        };
        gm.validate()?;
        Ok(gm)
    }
}

/// Codebook cardinalities `(|F|, |S|, |W|)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodebookSizes {
    pub f: usize,
    pub s: usize,
    pub w: usize,
}

impl CodebookSizes {
    pub const MAX: usize = 1 << 16;

    pub fn new(f: usize, s: usize, w: usize) -> Self {
        Self { f, s, w }
    }

    pub fn uniform(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("f", self.f), ("s", self.s), ("w", self.w)] {
            if v == 0 {
                return Err(Error::Config(format!("codebook size {name} must be >= 1")));
            }
            if v > Self::MAX {
                return Err(Error::Config(format!(
                    "codebook size {name}={v} exceeds 2^16"
                )));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("codebook.f", self.f);
        kv.set("codebook.s", self.s);
        kv.set("codebook.w", self.w);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let s = Self {
            f: kv.get_or("codebook.f", 8)?,
            s: kv.get_or("codebook.s", 8)?,
            w: kv.get_or("codebook.w", 8)?,
        };
        s.validate()?;
        Ok(s)
    }
}
