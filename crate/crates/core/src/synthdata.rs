//! Synthetic references and observations.
//!
//! References are the sites of a cubic, BCC or FCC lattice nearest to the
//! centre of a conventional cell placed at the origin. Observations are a
//! random subset of the reference, rigidly moved and perturbed by noise.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, PointSet, TransformParams};
use crate::model::CorrespondenceMatrix;
use crate::numfmt::fmt_f64;

/// Number of distinct synthetic atom labels assigned by [`make_reference`].
pub const DEFAULT_LABEL_ALPHABET: usize = 6;

pub const DEFAULT_LATTICE_CONSTANT: f64 = 3.0;

pub const DEFAULT_TRUNCATION_BOUND: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Simple cubic (square lattice in 2D).
    Cubic,
    Bcc,
    Fcc,
    FromFile(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Gaussian,
    TruncatedGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub bound: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::none()
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel {
            kind: NoiseKind::None,
            sigma: 0.0,
            bound: DEFAULT_TRUNCATION_BOUND,
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::Gaussian,
            sigma,
            bound: DEFAULT_TRUNCATION_BOUND,
        }
    }

    pub fn truncated(sigma: f64, bound: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::TruncatedGaussian,
            sigma,
            bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self.kind {
            NoiseKind::None if self.sigma != 0.0 => {
                bad(format!("noise kind none requires sigma = 0, got {}", self.sigma))
            }
            NoiseKind::Gaussian | NoiseKind::TruncatedGaussian
                if !(self.sigma > 0.0 && self.sigma.is_finite()) =>
            {
                bad(format!("noise sigma must be positive, got {}", self.sigma))
            }
            NoiseKind::TruncatedGaussian if !(self.bound > 0.0 && self.bound >= self.sigma) => bad(
                format!(
                    "truncation bound must be positive and at least sigma, got {}",
                    self.bound
                ),
            ),
            _ => Ok(()),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::Gaussian => self.sigma * rng.sample::<f64, _>(rand_distr::StandardNormal),
            NoiseKind::TruncatedGaussian => sample_truncated_gaussian(self.sigma, self.bound, rng),
        }
    }
}

/// A generated registration problem with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub reference: PointSet,
    pub observation: PointSet,
    pub true_theta: TransformParams,
    pub true_correspondence: CorrespondenceMatrix,
    pub percent_observed: f64,
    pub noise: NoiseModel,
    pub seed: u64,
}

/// Reference size `N = ceil(M / p)` needed to observe `m` points at fraction `p`.
pub fn required_reference_size(m: usize, p: f64) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "percent observed must lie in (0, 1], got {p}"
        )));
    }
    // the small slack keeps exact ratios such as 10 / 0.5 from rounding up
    Ok(((m as f64 / p) - 1e-9).ceil().max(m as f64) as usize)
}

/// Lattice sites in units of half the lattice constant. The conventional cell
/// is centred on the origin, so its corners sit at odd coordinates.
fn is_site(structure: &Structure, v: &[i64]) -> bool {
    let odd = |c: &i64| c.rem_euclid(2) == 1;
    match structure {
        Structure::Cubic => v.iter().all(odd),
        Structure::Bcc => v.iter().all(odd) || !v.iter().any(odd),
        Structure::Fcc => v.iter().sum::<i64>().rem_euclid(2) == 1,
        Structure::FromFile(_) => false,
    }
}

fn nearest_sites(dim: usize, n: usize, structure: &Structure) -> Vec<Vec<i64>> {
    let mut radius: i64 = 2;
    loop {
        let mut sites = Vec::new();
        let span = -radius..=radius;
        let mut coords: Vec<Vec<i64>> = vec![Vec::new()];
        for _ in 0..dim {
            coords = coords
                .into_iter()
                .flat_map(|c| {
                    span.clone().map(move |v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        for c in coords {
            let r2: i64 = c.iter().map(|v| v * v).sum();
            if r2 <= radius * radius && is_site(structure, &c) {
                sites.push((r2, c));
            }
        }
        if sites.len() >= n {
            sites.sort();
            return sites.into_iter().take(n).map(|(_, c)| c).collect();
        }
        radius *= 2;
    }
}

/// The `n_points` lattice sites nearest the origin, ties broken by
/// lexicographic coordinate order, labelled cyclically from `alphabet` labels.
pub fn make_reference_labeled(
    dim: usize,
    n_points: usize,
    structure: &Structure,
    lattice_constant: f64,
    alphabet: usize,
) -> Result<PointSet> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("reference needs at least one point".into()));
    }
    if !(lattice_constant > 0.0 && lattice_constant.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lattice constant must be positive, got {lattice_constant}"
        )));
    }
    if dim != 2 && dim != 3 {
        return Err(Error::InvalidArgument(format!("dimension must be 2 or 3, got {dim}")));
    }
    let points = match structure {
        Structure::FromFile(path) => {
            let all = load_pointset_csv(path)?;
            if all.dim() != dim {
                return Err(Error::InvalidArgument(format!(
                    "{} holds {}D points, expected {}D",
                    path.display(),
                    all.dim(),
                    dim
                )));
            }
            if all.len() < n_points {
                return Err(Error::InvalidArgument(format!(
                    "{} holds {} points, {} requested",
                    path.display(),
                    all.len(),
                    n_points
                )));
            }
            let mut order: Vec<usize> = (0..all.len()).collect();
            let key = |i: usize| all.point(i).iter().map(|v| v * v).sum::<f64>();
            order.sort_by(|&a, &b| {
                key(a)
                    .total_cmp(&key(b))
                    .then_with(|| {
                        all.point(a)
                            .iter()
                            .zip(all.point(b))
                            .map(|(u, v)| u.total_cmp(v))
                            .find(|o| o.is_ne())
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
            });
            order.truncate(n_points);
            return Ok(all.select(&order).with_cyclic_labels(alphabet));
        }
        Structure::Bcc | Structure::Fcc if dim == 2 => {
            return Err(Error::InvalidArgument(
                "BCC and FCC lattices are 3D only; use cubic in 2D".into(),
            ))
        }
        s => nearest_sites(dim, n_points, s),
    };
    let half = 0.5 * lattice_constant;
    let flat: Vec<f64> = points.iter().flatten().map(|&v| v as f64 * half).collect();
    Ok(PointSet::new(DMatrix::from_column_slice(dim, n_points, &flat), None)?
        .with_cyclic_labels(alphabet))
}

pub fn make_reference(
    dim: usize,
    n_points: usize,
    structure: &Structure,
    lattice_constant: f64,
) -> Result<PointSet> {
    make_reference_labeled(dim, n_points, structure, lattice_constant, DEFAULT_LABEL_ALPHABET)
}

/// Draw from `N(0, sigma^2)` conditioned on `|x| <= bound`, by rejection.
pub fn sample_truncated_gaussian(sigma: f64, bound: f64, rng: &mut impl Rng) -> f64 {
    let normal = Normal::new(0.0, sigma).expect("sigma must be positive");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= bound {
            return x;
        }
    }
}

/// Uniform rotation over the canonical angle box and translation uniform in
/// `[-translation_scale, translation_scale]^dim`.
pub fn random_transform(dim: usize, translation_scale: f64, rng: &mut impl Rng) -> TransformParams {
    use std::f64::consts::{FRAC_PI_2, TAU};
    let angles = if dim == 2 {
        vec![rng.random::<f64>() * TAU]
    } else {
        vec![
            rng.random::<f64>() * TAU,
            rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
            rng.random::<f64>() * TAU,
        ]
    };
    let translation = (0..dim)
        .map(|_| {
            if translation_scale > 0.0 {
                rng.random_range(-translation_scale..=translation_scale)
            } else {
                0.0
            }
        })
        .collect();
    TransformParams {
        dim,
        angles,
        translation,
    }
}

/// Picks `m` distinct reference points uniformly without replacement, moves
/// them by `true_theta` and adds per-coordinate noise.
pub fn simulate_observation(
    reference: &PointSet,
    true_theta: &TransformParams,
    m: usize,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<SyntheticInstance> {
    noise.validate()?;
    let n = reference.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot observe {m} of {n} reference points"
        )));
    }
    let picked = rand::seq::index::sample(rng, n, m).into_vec();
    let mut observation = apply_transform(true_theta, &reference.select(&picked))?;
    for v in observation.points.iter_mut() {
        *v += noise.draw(rng);
    }
    Ok(SyntheticInstance {
        reference: reference.clone(),
        observation,
        true_theta: true_theta.clone(),
        true_correspondence: CorrespondenceMatrix::new(n, picked)?,
        percent_observed: m as f64 / n as f64,
        noise: *noise,
        seed: 0,
    })
}

/// Everything needed to generate one synthetic instance from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub dim: usize,
    pub structure: Structure,
    pub lattice_constant: f64,
    pub m: usize,
    pub p: f64,
    pub noise: NoiseModel,
    pub translation_scale: f64,
    pub label_alphabet: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dim: 3,
            structure: Structure::Bcc,
            lattice_constant: DEFAULT_LATTICE_CONSTANT,
            m: 10,
            p: 0.75,
            noise: NoiseModel::none(),
            translation_scale: DEFAULT_LATTICE_CONSTANT,
            label_alphabet: DEFAULT_LABEL_ALPHABET,
        }
    }
}

impl SynthSpec {
    pub fn reference(&self) -> Result<PointSet> {
        let n = required_reference_size(self.m, self.p)?;
        make_reference_labeled(
            self.dim,
            n,
            &self.structure,
            self.lattice_constant,
            self.label_alphabet,
        )
    }
}

/// Reference, random true transform and observation, all fixed by `seed`.
pub fn generate_instance(spec: &SynthSpec, seed: u64) -> Result<SyntheticInstance> {
    let reference = spec.reference()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = random_transform(spec.dim, spec.translation_scale, &mut rng);
    let mut inst = simulate_observation(&reference, &theta, spec.m, &spec.noise, &mut rng)?;
    inst.seed = seed;
    Ok(inst)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a point-set CSV: optional `x,y[,z][,label]` header, one point per
/// row, `#` comments. Without a header, 2 columns are 2D, 3 are 3D and 4 are
/// 3D with a trailing integer label.
pub fn load_pointset_csv(path: impl AsRef<Path>) -> Result<PointSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pointset_csv(&text, path)
}

fn parse_pointset_csv(text: &str, path: &Path) -> Result<PointSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut layout: Option<(usize, Option<usize>, usize)> = None; // (dim, label column, width)
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = |r: &csv::StringRecord| r.position().map_or(idx + 1, |p| p.line() as usize);
        let record = record.map_err(|e| {
            let l = e.position().map_or(idx + 1, |p| p.line() as usize);
            parse_err(path, l, e.to_string())
        })?;
        let ln = line(&record);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if layout.is_none() {
            let numeric = record.iter().all(|f| f.parse::<f64>().is_ok());
            if !numeric {
                let names: Vec<String> = record.iter().map(|f| f.to_ascii_lowercase()).collect();
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                layout = Some(match names.as_slice() {
                    ["x", "y"] => (2, None, 2),
                    ["x", "y", "label"] => (2, Some(2), 3),
                    ["x", "y", "z"] => (3, None, 3),
                    ["x", "y", "z", "label"] => (3, Some(3), 4),
                    _ => {
                        return Err(parse_err(
                            path,
                            ln,
                            format!("unrecognised header {:?}", record.iter().collect::<Vec<_>>()),
                        ))
                    }
                });
                continue;
            }
            layout = Some(match record.len() {
                2 => (2, None, 2),
                3 => (3, None, 3),
                4 => (3, Some(3), 4),
                w => return Err(parse_err(path, ln, format!("unsupported column count {w}"))),
            });
        }
        let (_, label_col, width) = layout.expect("layout set above");
        if record.len() != width {
            return Err(parse_err(
                path,
                ln,
                format!("expected {width} columns, found {}", record.len()),
            ));
        }
        for (c, field) in record.iter().enumerate() {
            if Some(c) == label_col {
                let l = field
                    .parse::<i64>()
                    .map_err(|_| parse_err(path, ln, format!("label {field:?} is not an integer")))?;
                labels.push(l);
            } else {
                let v = field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, ln, format!("coordinate {field:?} is not a finite number")))?;
                coords.push(v);
            }
        }
    }
    let (dim, label_col, _) = layout.ok_or_else(|| parse_err(path, 1, "no points"))?;
    let n = coords.len() / dim;
    if n == 0 {
        return Err(parse_err(path, 1, "no points"));
    }
    let labels = label_col.map(|_| labels);
    PointSet::new(DMatrix::from_column_slice(dim, n, &coords), labels)
        .map_err(|e| parse_err(path, 1, e.to_string()))
}

pub fn pointset_csv_string(ps: &PointSet) -> String {
    let mut out = String::from(if ps.dim() == 2 { "x,y" } else { "x,y,z" });
    if ps.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, p) in ps.iter().enumerate() {
        let row: Vec<String> = p.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&row.join(","));
        if let Some(l) = &ps.labels {
            out.push(',');
            out.push_str(&l[i].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_pointset_csv(path: impl AsRef<Path>, ps: &PointSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pointset_csv_string(ps)).map_err(|e| Error::io(path, e))
}

/// JSON manifest describing a generated instance on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceManifest {
    pub reference_file: String,
    pub observation_file: String,
    pub true_theta: TransformParams,
    /// Reference index of each observation.
    pub correspondence: Vec<usize>,
    pub p: f64,
    pub n_reference: usize,
    pub m_observed: usize,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl InstanceManifest {
    pub fn for_instance(inst: &SyntheticInstance, reference_file: &str, observation_file: &str) -> Self {
        InstanceManifest {
            reference_file: reference_file.to_string(),
            observation_file: observation_file.to_string(),
            true_theta: inst.true_theta.clone(),
            correspondence: inst.true_correspondence.assignment.clone(),
            p: inst.percent_observed,
            n_reference: inst.reference.len(),
            m_observed: inst.observation.len(),
            noise: inst.noise,
            seed: inst.seed,
        }
    }
}
