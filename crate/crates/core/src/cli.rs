//! File-driven experiments behind the `psreg` binary.
//!
//! Every command reads one [`ExperimentConfig`], built from defaults, an
//! optional JSON file and `--set key.path=value` overrides (later wins), and
//! writes its artifacts into `paths.output`. Output is byte-identical for a
//! given configuration.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{
    autocorrelation, effective_sample_size, marginal_histograms_with_ranges, parameter_ranges,
    EnsembleReport,
};
use crate::error::{Error, Result};
use crate::geometry::{param_count, PointSet, TransformParams};
use crate::model::{ModelSpec, Regularizer};
use crate::numfmt::{fmt_f64, to_json_string};
use crate::registration::{register, Registration, RegistrationConfig};
use crate::samplers::{Chain, SamplerConfig, SamplerKind};
use crate::synthdata::{
    generate_instance, load_pointset_csv, pointset_csv_string, random_transform,
    simulate_observation, InstanceManifest, SynthSpec, SyntheticInstance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generate,
    Register,
    Ensemble,
    Diagnose,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Generate => "generate",
            Mode::Register => "register",
            Mode::Ensemble => "ensemble",
            Mode::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub reference: Option<PathBuf>,
    pub observation: Option<PathBuf>,
    pub chain: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            reference: None,
            observation: None,
            chain: None,
            output: PathBuf::from("."),
        }
    }
}

/// Model settings; the correspondence prior is always uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub regularizer: Regularizer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gamma: 0.05,
            lambda: 0.0,
            regularizer: Regularizer::None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, n_reference: usize, m_observed: usize) -> ModelSpec {
        ModelSpec::uniform(self.gamma, n_reference, m_observed)
            .with_regularizer(self.regularizer, self.lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSection {
    pub chains: usize,
    pub polish: bool,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        let d = RegistrationConfig::default();
        RegistrationSection {
            chains: d.chains,
            polish: d.polish,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub run_count: usize,
    /// Worker threads; results do not depend on it.
    pub parallelism: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            run_count: 125,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub max_lag: usize,
    pub bins: usize,
    /// Histogram range for translations; the chain extent when absent.
    pub translation_range: Option<(f64, f64)>,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            max_lag: 100,
            bins: 50,
            translation_range: None,
        }
    }
}

/// One experiment. `sampler.seed` is not part of the file format: chain
/// seeds always derive from the top-level `seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub registration: RegistrationSection,
    pub synth: SynthSpec,
    pub ensemble: EnsembleConfig,
    pub diagnose: DiagnoseConfig,
    pub seed: u64,
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(field, format!("must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    /// Checks the fields `mode` needs.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(config_err(
                    "mode",
                    format!("config is for {} but the command is {}", m.name(), mode.name()),
                ));
            }
        }
        match mode {
            Mode::Generate => self.validate_synth(),
            Mode::Register => {
                if self.paths.reference.is_none() {
                    return Err(config_err("paths.reference", "required for register"));
                }
                if self.paths.observation.is_none() {
                    return Err(config_err("paths.observation", "required for register"));
                }
                self.validate_model()
            }
            Mode::Ensemble => {
                self.validate_synth()?;
                self.validate_model()?;
                if self.ensemble.run_count == 0 {
                    return Err(config_err("ensemble.run_count", "must be at least 1"));
                }
                if self.ensemble.parallelism == 0 {
                    return Err(config_err("ensemble.parallelism", "must be at least 1"));
                }
                Ok(())
            }
            Mode::Diagnose => {
                if self.paths.chain.is_none() {
                    return Err(config_err("paths.chain", "required for diagnose"));
                }
                if self.diagnose.bins < 2 {
                    return Err(config_err("diagnose.bins", "must be at least 2"));
                }
                if self.diagnose.max_lag == 0 {
                    return Err(config_err("diagnose.max_lag", "must be at least 1"));
                }
                if let Some((lo, hi)) = self.diagnose.translation_range {
                    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                        return Err(config_err(
                            "diagnose.translation_range",
                            format!("needs low < high, got [{lo}, {hi}]"),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    fn validate_synth(&self) -> Result<()> {
        let s = &self.synth;
        if !(s.p > 0.0 && s.p <= 1.0) {
            return Err(config_err("synth.p", format!("must lie in (0, 1], got {}", s.p)));
        }
        if s.m == 0 {
            return Err(config_err("synth.m", "must be at least 1"));
        }
        if s.dim != 2 && s.dim != 3 {
            return Err(config_err("synth.dim", format!("must be 2 or 3, got {}", s.dim)));
        }
        positive("synth.lattice_constant", s.lattice_constant)?;
        if !(s.translation_scale >= 0.0 && s.translation_scale.is_finite()) {
            return Err(config_err(
                "synth.translation_scale",
                format!("must be non-negative, got {}", s.translation_scale),
            ));
        }
        if s.label_alphabet == 0 {
            return Err(config_err("synth.label_alphabet", "must be at least 1"));
        }
        s.noise.validate().map_err(|e| config_err("synth.noise", e))
    }

    fn validate_model(&self) -> Result<()> {
        positive("model.gamma", self.model.gamma)?;
        if !(self.model.lambda >= 0.0 && self.model.lambda.is_finite()) {
            return Err(config_err(
                "model.lambda",
                format!("must be non-negative, got {}", self.model.lambda),
            ));
        }
        if self.registration.chains == 0 {
            return Err(config_err("registration.chains", "must be at least 1"));
        }
        Ok(())
    }

    /// Registration settings with chain seeds derived from `seed`.
    pub fn registration_config(&self, seed: u64) -> RegistrationConfig {
        RegistrationConfig {
            sampler: SamplerConfig {
                seed,
                ..self.sampler.clone()
            },
            chains: self.registration.chains,
            polish: self.registration.polish,
        }
    }

    /// The configuration as echoed into result files.
    fn echo(&self, mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            mode: Some(mode),
            ..self.clone()
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key {path:?}")));
    }
    for (i, key) in keys.iter().enumerate() {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses `key.path=value`; the value is JSON if it parses as JSON and a
/// string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Defaults, then the JSON file, then the overrides in order.
pub fn load_config(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut user = Value::Object(Default::default());
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if !v.is_object() {
            return Err(Error::Config(format!(
                "{}: top level must be a JSON object",
                path.display()
            )));
        }
        merge(&mut user, v);
    }
    for (k, v) in overrides {
        set_path(&mut user, k, v.clone())?;
    }
    if user.pointer("/sampler/seed").is_some() {
        return Err(config_err(
            "sampler.seed",
            "chain seeds derive from the top-level seed; set seed instead",
        ));
    }
    let mut merged = serde_json::to_value(ExperimentConfig::default())
        .map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut merged, user);
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        config_err(&path, e.into_inner())
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.paths.output.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    to_json_string(value).map_err(|e| Error::Config(format!("serialisation failed: {e}")))
}

/// Writes `reference.csv`, `observation.csv` and `instance.json`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<SyntheticInstance> {
    cfg.validate(Mode::Generate)?;
    let inst = generate_instance(&cfg.synth, cfg.seed)?;
    let out = output_dir(cfg)?;
    write_file(&out.join("reference.csv"), &pointset_csv_string(&inst.reference))?;
    write_file(&out.join("observation.csv"), &pointset_csv_string(&inst.observation))?;
    let manifest = InstanceManifest::for_instance(&inst, "reference.csv", "observation.csv");
    write_file(&out.join("instance.json"), &json(&manifest)?)?;
    Ok(inst)
}

pub fn chain_csv_header(dim: usize) -> String {
    let mut cols = vec!["iter"];
    cols.extend_from_slice(TransformParams::param_names(dim));
    cols.extend_from_slice(&["energy", "accepted"]);
    cols.join(",")
}

/// One row per recorded sample in the `iter,<params>,energy,accepted` schema.
pub fn chain_csv_string(chain: &Chain) -> String {
    let dim = chain.samples.first().map_or(3, |s| s.dim);
    let mut out = chain_csv_header(dim);
    out.push('\n');
    for (k, s) in chain.samples.iter().enumerate() {
        out.push_str(&(chain.first_iteration + k).to_string());
        for v in s.angles.iter().chain(&s.translation) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push(',');
        out.push_str(&fmt_f64(chain.energies[k]));
        out.push_str(if chain.accepted[k] { ",1\n" } else { ",0\n" });
    }
    out
}

/// Reads a chain written by [`chain_csv_string`]. Only recorded samples are
/// known, so the proposal count is the number of rows.
pub fn load_chain_csv(path: impl AsRef<Path>) -> Result<Chain> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_chain_csv(&text, path)
}

fn parse_chain_csv(text: &str, path: &Path) -> Result<Chain> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| perr(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let joined = header.join(",");
    let dim = if joined == chain_csv_header(3) {
        3
    } else if joined == chain_csv_header(2) {
        2
    } else {
        return Err(perr(1, format!("unexpected chain header {joined:?}")));
    };
    let np = param_count(dim);
    let mut chain = Chain {
        samples: Vec::new(),
        energies: Vec::new(),
        accepted: Vec::new(),
        accept_count: 0,
        proposal_count: 0,
        seed: 0,
        first_iteration: 0,
    };
    let mut prev_iter: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let iter: usize = record[0]
            .parse()
            .map_err(|_| perr(line, format!("iteration {:?} is not an integer", &record[0])))?;
        if let Some(p) = prev_iter {
            if iter != p + 1 {
                return Err(perr(line, format!("iteration {iter} does not follow {p}")));
            }
        } else {
            chain.first_iteration = iter;
        }
        prev_iter = Some(iter);
        let mut vals = Vec::with_capacity(np + 1);
        for field in record.iter().skip(1).take(np + 1) {
            let v: f64 = field
                .parse()
                .map_err(|_| perr(line, format!("{field:?} is not a number")))?;
            vals.push(v);
        }
        let theta = TransformParams::from_vector(dim, &vals[..np])
            .map_err(|e| perr(line, e.to_string()))?;
        let accepted = match &record[np + 2] {
            "1" => true,
            "0" => false,
            other => return Err(perr(line, format!("accepted flag {other:?} is not 0 or 1"))),
        };
        chain.samples.push(theta);
        chain.energies.push(vals[np]);
        chain.accepted.push(accepted);
        chain.accept_count += accepted as usize;
        chain.proposal_count += 1;
    }
    if chain.samples.is_empty() {
        return Err(perr(1, "chain has no samples".into()));
    }
    Ok(chain)
}

#[derive(Serialize)]
struct RegisterResult<'a> {
    theta_map: &'a TransformParams,
    theta_mean: &'a TransformParams,
    energy_map: f64,
    mse: f64,
    acceptance_rate: f64,
    correspondence_closest: &'a [usize],
    correspondence_assignment: Option<&'a [usize]>,
    chains: usize,
    best_chain: usize,
    config_echo: ExperimentConfig,
}

fn load_pair(cfg: &ExperimentConfig) -> Result<(PointSet, PointSet)> {
    let rp = cfg.paths.reference.as_ref().expect("validated");
    let op = cfg.paths.observation.as_ref().expect("validated");
    let x = load_pointset_csv(rp)?;
    let y = load_pointset_csv(op)?;
    if x.dim() != y.dim() {
        return Err(Error::InvalidArgument(format!(
            "{} is {}D but {} is {}D",
            rp.display(),
            x.dim(),
            op.display(),
            y.dim()
        )));
    }
    Ok((x, y))
}

/// Registers `paths.observation` against `paths.reference`; writes
/// `chain.csv` (the chain holding the MAP sample) and `result.json`.
pub fn cmd_register(cfg: &ExperimentConfig) -> Result<Registration> {
    cfg.validate(Mode::Register)?;
    let (x, y) = load_pair(cfg)?;
    let rc = cfg.registration_config(cfg.seed);
    rc.sampler.validate(param_count(x.dim()))?;
    let reg = register(&x, &y, &cfg.model.spec(x.len(), y.len()), &rc)?;
    let echo = ExperimentConfig {
        sampler: rc.sampler.clone(),
        ..cfg.echo(Mode::Register)
    };
    let result = RegisterResult {
        theta_map: &reg.theta_map,
        theta_mean: &reg.theta_mean,
        energy_map: reg.energy_map,
        mse: reg.mse,
        acceptance_rate: reg.acceptance_rate(),
        correspondence_closest: &reg.correspondence_closest.assignment,
        correspondence_assignment: reg
            .correspondence_assignment
            .as_ref()
            .map(|c| c.assignment.as_slice()),
        chains: reg.chains.len(),
        best_chain: reg.best_chain,
        config_echo: echo,
    };
    let out = output_dir(cfg)?;
    write_file(&out.join("chain.csv"), &chain_csv_string(reg.best()))?;
    write_file(&out.join("result.json"), &json(&result)?)?;
    Ok(reg)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of ensemble run `run`; independent of the run count.
pub fn derive_run_seed(master: u64, run: u64) -> u64 {
    splitmix64(splitmix64(master) ^ run)
}

/// Result of [`run_ensemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub reference: PointSet,
    pub true_theta: TransformParams,
    pub run_seeds: Vec<u64>,
    pub report: EnsembleReport,
}

/// `ensemble.run_count` observations of one reference moved by one true
/// transform (both fixed by `seed`), each registered independently.
pub fn run_ensemble(cfg: &ExperimentConfig) -> Result<EnsembleOutcome> {
    cfg.validate(Mode::Ensemble)?;
    let reference = cfg.synth.reference()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let theta = random_transform(cfg.synth.dim, cfg.synth.translation_scale, &mut rng);
    let spec = cfg.model.spec(reference.len(), cfg.synth.m);
    cfg.registration_config(0)
        .sampler
        .validate(param_count(cfg.synth.dim))?;
    let run_seeds: Vec<u64> = (0..cfg.ensemble.run_count as u64)
        .map(|l| derive_run_seed(cfg.seed, l))
        .collect();
    let one = |seed: u64| -> Result<(f64, TransformParams, PointSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = simulate_observation(&reference, &theta, cfg.synth.m, &cfg.synth.noise, &mut rng)?;
        let reg = register(
            &reference,
            &inst.observation,
            &spec,
            &cfg.registration_config(splitmix64(seed)),
        )?;
        Ok((reg.mse, reg.theta_map, inst.observation))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.ensemble.parallelism)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<_>> = pool.install(|| run_seeds.par_iter().map(|&s| one(s)).collect());
    let mut per_run_mse = Vec::with_capacity(results.len());
    let mut registrations = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        let (mse, theta_map, y) = r.map_err(|e| Error::RunFailed {
            index,
            source: Box::new(e),
        })?;
        per_run_mse.push(mse);
        registrations.push((theta_map, y));
    }
    let report = EnsembleReport::build(per_run_mse, &registrations, &reference)?;
    Ok(EnsembleOutcome {
        reference,
        true_theta: theta,
        run_seeds,
        report,
    })
}

#[derive(Serialize)]
struct EnsembleJson<'a> {
    per_run_mse: &'a [f64],
    mean_mse: f64,
    var_mse: f64,
    ci95: (f64, f64),
    reference_rmse: f64,
    retained: usize,
    n_reference: usize,
    true_theta: &'a TransformParams,
    /// Without `ensemble.parallelism`, which cannot change any result.
    config_echo: Value,
}

/// Writes `per_run_mse.csv`, `ensemble.json` and `registered_points.csv`.
pub fn cmd_ensemble(cfg: &ExperimentConfig) -> Result<EnsembleOutcome> {
    let outcome = run_ensemble(cfg)?;
    let r = &outcome.report;
    let mut mse_csv = String::from("run,seed,mse\n");
    for (l, (mse, seed)) in r.per_run_mse.iter().zip(&outcome.run_seeds).enumerate() {
        mse_csv.push_str(&format!("{l},{seed},{}\n", fmt_f64(*mse)));
    }
    let dim = outcome.reference.dim();
    let mut points_csv = String::from(if dim == 2 {
        "reference_index,x,y\n"
    } else {
        "reference_index,x,y,z\n"
    });
    let sets = &r.registered_sets;
    for i in 0..sets.n_reference() {
        for p in sets.points(i) {
            points_csv.push_str(&i.to_string());
            for v in p {
                points_csv.push(',');
                points_csv.push_str(&fmt_f64(*v));
            }
            points_csv.push('\n');
        }
    }
    let summary = EnsembleJson {
        per_run_mse: &r.per_run_mse,
        mean_mse: r.stats.mean,
        var_mse: r.stats.var,
        ci95: r.stats.ci95,
        reference_rmse: r.reference_rmse,
        retained: r.retained,
        n_reference: outcome.reference.len(),
        true_theta: &outcome.true_theta,
        config_echo: {
            let mut v = serde_json::to_value(cfg.echo(Mode::Ensemble))
                .map_err(|e| Error::Config(e.to_string()))?;
            if let Some(ens) = v.get_mut("ensemble").and_then(Value::as_object_mut) {
                ens.remove("parallelism");
            }
            v
        },
    };
    let out = output_dir(cfg)?;
    write_file(&out.join("per_run_mse.csv"), &mse_csv)?;
    write_file(&out.join("ensemble.json"), &json(&summary)?)?;
    write_file(&out.join("registered_points.csv"), &points_csv)?;
    Ok(outcome)
}

#[derive(Serialize)]
struct DiagnoseJson {
    samples: usize,
    acceptance_rate: f64,
    effective_sample_size: BTreeMap<String, f64>,
    config_echo: ExperimentConfig,
}

/// Per-parameter autocorrelation, trace and histogram tables for
/// `paths.chain`. Nothing is written unless every table can be computed.
pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate(Mode::Diagnose)?;
    let chain = load_chain_csv(cfg.paths.chain.as_ref().expect("validated"))?;
    let dim = chain.samples[0].dim;
    let names = TransformParams::param_names(dim);
    let n = chain.len();
    let max_lag = cfg.diagnose.max_lag.min(n.saturating_sub(1)).max(1);
    let mut files: Vec<(String, String)> = Vec::new();
    let mut ess = BTreeMap::new();
    for (k, name) in names.iter().enumerate() {
        let series = chain.parameter_series(k);
        let rho = autocorrelation(&series, max_lag)?;
        let mut ac = String::from("lag,rho\n");
        for (lag, r) in rho.iter().enumerate() {
            ac.push_str(&format!("{lag},{}\n", fmt_f64(*r)));
        }
        files.push((format!("autocorr_{name}.csv"), ac));
        let mut tr = String::from("iteration,value\n");
        for (i, v) in series.iter().enumerate() {
            tr.push_str(&format!("{},{}\n", chain.first_iteration + i, fmt_f64(*v)));
        }
        files.push((format!("trace_{name}.csv"), tr));
        let e = if n >= 4 { effective_sample_size(&series)? } else { n as f64 };
        ess.insert(name.to_string(), e);
    }
    let ranges = parameter_ranges(&chain, cfg.diagnose.translation_range);
    let hist = marginal_histograms_with_ranges(&chain, cfg.diagnose.bins, &ranges)?;
    for h in &hist.marginals {
        let mut s = String::from("bin_low,bin_high,count\n");
        for (b, c) in h.counts.iter().enumerate() {
            let (lo, hi) = h.bin_edges(b);
            s.push_str(&format!("{},{},{c}\n", fmt_f64(lo), fmt_f64(hi)));
        }
        files.push((format!("hist1d_{}.csv", names[h.parameter]), s));
    }
    for h in &hist.pairs {
        let mut s = String::from("bin_x,bin_y,count\n");
        for bx in 0..h.bins {
            for by in 0..h.bins {
                s.push_str(&format!("{bx},{by},{}\n", h.count(bx, by)));
            }
        }
        let (a, b) = h.parameters;
        files.push((format!("hist2d_{}_vs_{}.csv", names[a], names[b]), s));
    }
    let summary = DiagnoseJson {
        samples: n,
        acceptance_rate: chain.acceptance_rate(),
        effective_sample_size: ess,
        config_echo: cfg.echo(Mode::Diagnose),
    };
    files.push(("diagnostics.json".into(), json(&summary)?));
    let out = output_dir(cfg)?;
    for (name, contents) in files {
        write_file(&out.join(name), &contents)?;
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "psreg", version, about = "Bayesian rigid point-set registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic reference, observation and manifest.
    Generate(CommonArgs),
    /// Sample the posterior for one reference/observation pair.
    Register(CommonArgs),
    /// Register many synthetic observations and summarise the errors.
    Ensemble(CommonArgs),
    /// Autocorrelation, trace and histogram tables for a chain CSV.
    Diagnose(CommonArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerArg {
    Hmc,
    Mala,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. --set sampler.step_size=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (paths.output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reference point CSV (paths.reference).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Observation point CSV (paths.observation).
    #[arg(long)]
    observation: Option<PathBuf>,
    /// Chain CSV (paths.chain).
    #[arg(long)]
    chain: Option<PathBuf>,
    /// Sampler kind (sampler.kind).
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Master seed (seed).
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut o = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        let path = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
        if let Some(p) = &self.out {
            o.push(("paths.output".into(), path(p)));
        }
        if let Some(p) = &self.reference {
            o.push(("paths.reference".into(), path(p)));
        }
        if let Some(p) = &self.observation {
            o.push(("paths.observation".into(), path(p)));
        }
        if let Some(p) = &self.chain {
            o.push(("paths.chain".into(), path(p)));
        }
        if let Some(s) = self.sampler {
            let kind = match s {
                SamplerArg::Hmc => SamplerKind::Hmc,
                SamplerArg::Mala => SamplerKind::Mala,
            };
            o.push((
                "sampler.kind".into(),
                serde_json::to_value(kind).expect("enum serialises"),
            ));
        }
        if let Some(s) = self.seed {
            o.push(("seed".into(), Value::from(s)));
        }
        Ok(o)
    }
}

/// Parses `args` (program name first) and runs the chosen command.
/// Help and version requests print to stdout and succeed.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid command line");
            return Err(Error::InvalidArgument(
                first.trim_start_matches("error: ").to_string(),
            ));
        }
    };
    let (mode, args) = match &cli.command {
        Command::Generate(a) => (Mode::Generate, a),
        Command::Register(a) => (Mode::Register, a),
        Command::Ensemble(a) => (Mode::Ensemble, a),
        Command::Diagnose(a) => (Mode::Diagnose, a),
    };
    let cfg = load_config(args.config.as_deref(), &args.overrides()?)?;
    match mode {
        Mode::Generate => cmd_generate(&cfg).map(|_| ()),
        Mode::Register => cmd_register(&cfg).map(|_| ()),
        Mode::Ensemble => cmd_ensemble(&cfg).map(|_| ()),
        Mode::Diagnose => cmd_diagnose(&cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"synth": {"p": 0.45, "m": 8}, "seed": 3}"#).unwrap();
        let o = vec![parse_override("synth.m=12").unwrap(), parse_override("sampler.kind=mala").unwrap()];
        let cfg = load_config(Some(&file), &o).unwrap();
        assert_eq!(cfg.synth.p, 0.45);
        assert_eq!(cfg.synth.m, 12);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sampler.kind, SamplerKind::Mala);
        assert_eq!(cfg.sampler.step_size, SamplerConfig::default().step_size);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = |o: &str| {
            load_config(None, &[parse_override(o).unwrap()])
                .unwrap_err()
                .to_string()
        };
        assert!(err("synth.q=1").contains("synth"));
        assert!(err("sampler.step_size=\"big\"").contains("sampler.step_size"));
        assert!(err("sampler.seed=4").contains("sampler.seed"));
        let cfg = load_config(None, &[parse_override("synth.p=1.2").unwrap()]).unwrap();
        let msg = cfg.validate(Mode::Generate).unwrap_err().to_string();
        assert!(msg.contains("synth.p"), "{msg}");
        let msg = ExperimentConfig::default().validate(Mode::Register).unwrap_err().to_string();
        assert!(msg.contains("paths.reference"));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let cfg = ExperimentConfig {
            mode: Some(Mode::Generate),
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate(Mode::Generate).is_ok());
        assert!(cfg.validate(Mode::Ensemble).unwrap_err().to_string().contains("mode"));
    }

    #[test]
    fn run_seeds_are_stable_prefixes() {
        let a: Vec<u64> = (0..5).map(|l| derive_run_seed(9, l)).collect();
        let b: Vec<u64> = (0..3).map(|l| derive_run_seed(9, l)).collect();
        assert_eq!(&a[..3], &b[..]);
        let mut u = a.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 5);
        assert_ne!(derive_run_seed(9, 0), derive_run_seed(10, 0));
    }

    #[test]
    fn chain_csv_round_trip() {
        let samples = vec![
            TransformParams::new(2, vec![0.5], vec![1.0, -1.0]).unwrap(),
            TransformParams::new(2, vec![6.0], vec![0.1, 2.0]).unwrap(),
        ];
        let chain = Chain {
            samples,
            energies: vec![1.5, 0.25],
            accepted: vec![true, false],
            accept_count: 1,
            proposal_count: 2,
            seed: 0,
            first_iteration: 10,
        };
        let text = chain_csv_string(&chain);
        assert!(text.starts_with("iter,phi,t_x,t_y,energy,accepted\n10,"));
        let back = parse_chain_csv(&text, Path::new("c.csv")).unwrap();
        assert_eq!(back, chain);
        assert!(parse_chain_csv("iter,a,b\n", Path::new("c.csv")).is_err());
        let bad = text.replace(",0\n", ",2\n");
        assert!(matches!(
            parse_chain_csv(&bad, Path::new("c.csv")),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn clap_errors_are_single_line() {
        let e = run(["psreg", "frobnicate"]).unwrap_err().to_string();
        assert!(!e.contains('\n'));
        assert!(run(["psreg", "--help"]).is_ok());
    }
}
