//! Run configuration: a flat `key = value` document whose keys are the
//! field names of [`RunConfig`]; each key can also be overridden singly.

use crate::error::{BaconError, Result};
use crate::gibbs::{ChainConfig, ClusteringPriors, SweepSchedule};
use crate::model::{ContaminationModel, MassPrior, PdpHyper};
use crate::regression::{NoisePrior, RegressionChainConfig, RegressionPriors, RepresentativeMode};
use crate::synth::{BaconParams, ResponseParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Every setting of a run. Empty strings mean "not given".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Pre-vectorized matrix CSV.
    pub matrix: String,
    /// Directory of per-subject adjacency files.
    pub adjacency_dir: String,
    /// Two-column CSV `subject_id,y`.
    pub responses: String,
    /// File of training subject ids, one per line; empty means a seeded split.
    pub train_ids: String,
    pub train_fraction: f64,
    pub out_dir: String,
    /// Comma-separated subset of `1`, `1b`, `2`.
    pub stages: String,

    pub lambda: f64,
    pub alpha: f64,
    pub r_alpha: f64,
    pub r_beta: f64,
    pub r_floor: f64,
    pub mass: f64,
    /// Gamma mass prior; shape 0 keeps `mass` fixed.
    pub mass_shape: f64,
    pub mass_rate: f64,
    pub discount_init: f64,
    pub init_threshold: f64,

    pub burn_in: usize,
    pub kept: usize,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    /// Resample `(r, Q*)` in the latent stage.
    pub update_q_in_1b: bool,

    pub mode: String,
    pub sigma_beta2: f64,
    pub a0: f64,
    pub b0: f64,
    /// Known noise variance; 0 puts the inverse-gamma prior on it instead.
    pub sigma2: f64,
    pub center_response: bool,
    pub stage2_burn_in: usize,
    pub stage2_kept: usize,
    pub stage2_thin: usize,

    /// `bacon` or `threshold`.
    pub synth_generator: String,
    pub synth_n: usize,
    pub synth_p: usize,
    pub synth_d0: f64,
    pub synth_m0: f64,
    pub synth_p0: f64,
    pub synth_r0: f64,
    pub synth_phi0: f64,
    pub synth_response: bool,
    pub synth_size_s: usize,
    pub synth_beta: f64,
    pub synth_sigma0: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pri = ClusteringPriors::default();
        let chain = ChainConfig::default();
        let reg = RegressionChainConfig::default();
        let bp = BaconParams::default();
        let rp = ResponseParams::default();
        Self {
            matrix: String::new(),
            adjacency_dir: String::new(),
            responses: String::new(),
            train_ids: String::new(),
            train_fraction: rp.train_fraction,
            out_dir: "run".into(),
            stages: "1,1b,2".into(),
            lambda: pri.lambda,
            alpha: pri.contam.alpha,
            r_alpha: pri.contam.r_alpha,
            r_beta: pri.contam.r_beta,
            r_floor: pri.contam.r_floor,
            mass: pri.hyper.mass,
            mass_shape: 0.0,
            mass_rate: 0.0,
            discount_init: pri.hyper.discount,
            init_threshold: pri.init_threshold,
            burn_in: chain.burn_in,
            kept: chain.kept,
            thin: chain.thin,
            seed: chain.seed,
            chains: 1,
            update_q_in_1b: true,
            mode: "a".into(),
            sigma_beta2: 100.0,
            a0: 0.01,
            b0: 0.01,
            sigma2: 0.0,
            center_response: true,
            stage2_burn_in: reg.burn_in,
            stage2_kept: reg.kept,
            stage2_thin: reg.thin,
            synth_generator: "bacon".into(),
            synth_n: bp.n,
            synth_p: bp.p,
            synth_d0: bp.d0,
            synth_m0: bp.m0,
            synth_p0: bp.p0,
            synth_r0: bp.r0,
            synth_phi0: 0.95,
            synth_response: true,
            synth_size_s: rp.size_s,
            synth_beta: rp.beta_star,
            synth_sigma0: rp.sigma0,
        }
    }
}

/// Stages selected for a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageSet {
    pub clustering: bool,
    pub latent: bool,
    pub regression: bool,
}

impl std::str::FromStr for StageSet {
    type Err = BaconError;
    fn from_str(s: &str) -> Result<Self> {
        let mut set = StageSet::default();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "1" => set.clustering = true,
                "1b" => set.latent = true,
                "2" => set.regression = true,
                other => return Err(BaconError::Config(format!("unknown stage {other:?} (expected 1, 1b or 2)"))),
            }
        }
        if set == StageSet::default() {
            return Err(BaconError::Config("no stages selected".into()));
        }
        Ok(set)
    }
}

impl RunConfig {
    /// Names of every key, in declaration order.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()).expect("serializable") {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => unreachable!("struct serializes to an object"),
        }
    }

    /// Sets one key from its text form, typed by the field it replaces.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self).expect("serializable") else {
            unreachable!("struct serializes to an object")
        };
        let slot = map.get_mut(key).ok_or_else(|| BaconError::Config(format!("unknown config key {key:?}")))?;
        let raw = raw.trim();
        let bad = || BaconError::Config(format!("invalid value {raw:?} for {key}"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => {
                let v: f64 = raw.parse().map_err(|_| bad())?;
                serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
            }
            _ => Value::String(raw.to_string()),
        };
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| BaconError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| BaconError::Config(format!("line {}: expected key = value", ln + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BaconError::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes back to the flat text form.
    pub fn to_text(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("serializable") else { unreachable!() };
        map.iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON form, with the output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        hex_digest(serde_json::to_string(&c).expect("serializable").as_bytes())
    }

    pub fn stage_set(&self) -> Result<StageSet> {
        self.stages.parse()
    }

    pub fn representative_mode(&self) -> Result<RepresentativeMode> {
        self.mode.parse()
    }

    pub fn clustering_priors(&self) -> Result<ClusteringPriors> {
        let mass_prior =
            if self.mass_shape > 0.0 { MassPrior::Gamma { shape: self.mass_shape, rate: self.mass_rate } } else { MassPrior::Fixed };
        let hyper = PdpHyper::new(self.mass, self.discount_init)?.with_mass_prior(mass_prior)?;
        let base = ContaminationModel::default();
        let r0 = base.r[0].max((1.0 + self.r_floor) / 2.0);
        let contam = ContaminationModel {
            r: [r0, r0],
            r_floor: self.r_floor,
            alpha: self.alpha,
            r_alpha: self.r_alpha,
            r_beta: self.r_beta,
            ..base
        };
        let pri = ClusteringPriors { hyper, lambda: self.lambda, contam, init_threshold: self.init_threshold };
        pri.validate()?;
        Ok(pri)
    }

    pub fn chain_config(&self, chain: u64) -> ChainConfig {
        ChainConfig { burn_in: self.burn_in, kept: self.kept, thin: self.thin, schedule: SweepSchedule::default(), seed: self.seed, chain }
    }

    pub fn latent_chain_config(&self) -> ChainConfig {
        ChainConfig { schedule: SweepSchedule::frozen_allocation(self.update_q_in_1b), ..self.chain_config(0) }
    }

    pub fn regression_priors(&self) -> Result<RegressionPriors> {
        let noise = if self.sigma2 > 0.0 {
            NoisePrior::Known { sigma2: self.sigma2 }
        } else {
            NoisePrior::InverseGamma { a0: self.a0, b0: self.b0 }
        };
        let p = RegressionPriors { sigma_beta2: self.sigma_beta2, noise, prior_only: false };
        p.validate()?;
        Ok(p)
    }

    pub fn regression_chain(&self) -> RegressionChainConfig {
        RegressionChainConfig { burn_in: self.stage2_burn_in, kept: self.stage2_kept, thin: self.stage2_thin, seed: self.seed, chain: 0 }
    }

    pub fn bacon_params(&self) -> BaconParams {
        BaconParams { n: self.synth_n, p: self.synth_p, d0: self.synth_d0, m0: self.synth_m0, p0: self.synth_p0, r0: self.synth_r0 }
    }

    pub fn response_params(&self) -> ResponseParams {
        ResponseParams {
            size_s: self.synth_size_s,
            beta_star: self.synth_beta,
            sigma0: self.synth_sigma0,
            train_fraction: self.train_fraction,
            ..ResponseParams::default()
        }
    }

    /// Checks every range the model declares.
    pub fn validate(&self) -> Result<()> {
        self.stage_set()?;
        self.representative_mode()?;
        self.clustering_priors()?;
        self.chain_config(0).validate()?;
        self.regression_priors()?;
        if self.chains == 0 {
            return Err(BaconError::Config("chains must be >= 1".into()));
        }
        if self.stage2_kept == 0 || self.stage2_thin == 0 {
            return Err(BaconError::Config("stage2_kept and stage2_thin must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(BaconError::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !matches!(self.synth_generator.as_str(), "bacon" | "threshold") {
            return Err(BaconError::Config(format!("unknown generator {:?}", self.synth_generator)));
        }
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
