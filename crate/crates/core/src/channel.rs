//! Multi-user THz uplink channel synthesis.
//!
//! Each user sees one line-of-sight path plus `n_nlos` first-order reflected
//! clusters of `n_ray` diffuse rays. Path powers combine free-space spreading,
//! molecular absorption (interpolated from an ingested coefficient table) and,
//! for reflected rays, a Fresnel coefficient scaled by a Rayleigh roughness
//! factor.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{CMatrix, CVector, SeededRng};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const VACUUM_PERMEABILITY: f64 = 4.0 * PI * 1e-7;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Free-space wave impedance `sqrt(μ₀/ε₀)`, about 376.73 Ω.
pub fn free_space_impedance() -> f64 {
    (VACUUM_PERMEABILITY / VACUUM_PERMITTIVITY).sqrt()
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid channel parameter: {0}")]
    InvalidParams(String),
    #[error("invalid material {name:?}: {reason}")]
    InvalidMaterial { name: String, reason: String },
    #[error("absorption table: {0}")]
    InvalidTable(String),
    #[error("frequency {frequency_hz:e} Hz outside absorption table range [{lo:e}, {hi:e}] Hz")]
    OutOfRange { frequency_hz: f64, lo: f64, hi: f64 },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing absorption CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("parsing materials file: {0}")]
    Toml(#[from] toml::de::Error),
}

/// Reflecting surface. Stored in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    /// Surface roughness standard deviation, meters.
    pub sigma_roughness: f64,
    /// Absorption coefficient of the medium, per meter.
    pub absorption: f64,
    pub refractive_index: f64,
}

impl Material {
    /// Build from the units used in material tables (mm, cm⁻¹).
    pub fn from_table_units(
        name: impl Into<String>,
        sigma_mm: f64,
        varsigma_per_cm: f64,
        refractive_index: f64,
    ) -> Result<Self, ChannelError> {
        let m = Self {
            name: name.into(),
            sigma_roughness: sigma_mm * 1e-3,
            absorption: varsigma_per_cm * 1e2,
            refractive_index,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let fail = |reason: &str| {
            Err(ChannelError::InvalidMaterial {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.sigma_roughness >= 0.0) {
            return fail("roughness must be >= 0");
        }
        if !(self.absorption >= 0.0) {
            return fail("absorption must be >= 0");
        }
        if !(self.refractive_index >= 1.0) {
            return fail("refractive index must be >= 1");
        }
        Ok(())
    }

    /// The three indoor office surfaces used by the default scenario.
    pub fn office_defaults() -> Vec<Material> {
        [
            ("Plaster s1", 0.05, 10.0, 2.0),
            ("Gypsum plaster", 0.13, 38.0, 1.4),
            ("Plaster s2", 0.15, 10.0, 2.0),
        ]
        .into_iter()
        .map(|(n, s, v, r)| Material::from_table_units(n, s, v, r).expect("valid defaults"))
        .collect()
    }
}

#[derive(Debug, Deserialize)]
struct MaterialsFile {
    #[serde(rename = "material")]
    materials: Vec<MaterialEntry>,
}

#[derive(Debug, Deserialize)]
struct MaterialEntry {
    name: String,
    sigma_mm: f64,
    varsigma_per_cm: f64,
    n: f64,
}

/// Parse a TOML materials file made of `[[material]]` tables with keys
/// `name`, `sigma_mm`, `varsigma_per_cm` and `n`.
pub fn parse_materials(text: &str) -> Result<Vec<Material>, ChannelError> {
    let file: MaterialsFile = toml::from_str(text)?;
    file.materials
        .into_iter()
        .map(|e| Material::from_table_units(e.name, e.sigma_mm, e.varsigma_per_cm, e.n))
        .collect()
}

pub fn load_materials(path: &Path) -> Result<Vec<Material>, ChannelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ChannelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_materials(&text)
}

/// Molecular absorption coefficient samples `(frequency Hz, k_abs 1/m)`.
///
/// An empty table means no absorption at any frequency.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AbsorptionTable {
    points: Vec<(f64, f64)>,
}

#[derive(Debug, Deserialize)]
struct AbsorptionRecord {
    frequency_hz: f64,
    k_abs_per_m: f64,
}

impl AbsorptionTable {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, ChannelError> {
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(ChannelError::InvalidTable(format!(
                    "frequencies must be strictly increasing ({:e} then {:e})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(f, k)) = points
            .iter()
            .find(|(f, k)| !(f.is_finite() && k.is_finite() && *k >= 0.0))
        {
            return Err(ChannelError::InvalidTable(format!(
                "bad sample ({f:e} Hz, {k:e} /m)"
            )));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Read a CSV with header `frequency_hz,k_abs_per_m`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, ChannelError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["frequency_hz", "k_abs_per_m"] {
            return Err(ChannelError::InvalidTable(format!(
                "expected header `frequency_hz,k_abs_per_m`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut points = Vec::new();
        for rec in rdr.deserialize() {
            let r: AbsorptionRecord = rec?;
            points.push((r.frequency_hz, r.k_abs_per_m));
        }
        Self::new(points)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, ChannelError> {
        let file = std::fs::File::open(path).map_err(|source| ChannelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv_reader(file)
    }

    /// Linearly interpolated coefficient; no extrapolation.
    pub fn k_abs(&self, frequency_hz: f64) -> Result<f64, ChannelError> {
        let (Some(&(lo, k_lo)), Some(&(hi, k_hi))) = (self.points.first(), self.points.last())
        else {
            return Ok(0.0);
        };
        if !(frequency_hz >= lo && frequency_hz <= hi) {
            return Err(ChannelError::OutOfRange {
                frequency_hz,
                lo,
                hi,
            });
        }
        if frequency_hz == hi {
            return Ok(k_hi);
        }
        if frequency_hz == lo {
            return Ok(k_lo);
        }
        let idx = self.points.partition_point(|&(f, _)| f <= frequency_hz);
        let (f0, k0) = self.points[idx - 1];
        let (f1, k1) = self.points[idx];
        let t = (frequency_hz - f0) / (f1 - f0);
        Ok(k0 + t * (k1 - k0))
    }
}

/// ULA response `a(φ)`, entry m = exp(−j 2π (d_r/λ) m cos φ) / √N.
pub fn array_response(phi: f64, n_bs: usize, spacing_over_lambda: f64) -> CVector {
    let norm = 1.0 / (n_bs as f64).sqrt();
    let step = -2.0 * PI * spacing_over_lambda * phi.cos();
    CVector::from_fn(n_bs, |m, _| Complex64::from_polar(norm, step * m as f64))
}

/// Free-space spreading loss `(c / (4π f d))²`.
pub fn spreading_loss(frequency_hz: f64, distance_m: f64) -> f64 {
    let r = SPEED_OF_LIGHT / (4.0 * PI * frequency_hz * distance_m);
    r * r
}

/// Molecular absorption loss `exp(−k_abs(f) d)`.
pub fn absorption_loss(
    table: &AbsorptionTable,
    frequency_hz: f64,
    distance_m: f64,
) -> Result<f64, ChannelError> {
    Ok((-table.k_abs(frequency_hz)? * distance_m).exp())
}

pub fn wave_impedance(material: &Material, frequency_hz: f64) -> Complex64 {
    let n = material.refractive_index;
    let a = material.absorption * SPEED_OF_LIGHT / (4.0 * PI * frequency_hz);
    let rel_permittivity = Complex64::new(n * n - a * a, -2.0 * n * a);
    (Complex64::new(VACUUM_PERMEABILITY, 0.0) / (rel_permittivity * VACUUM_PERMITTIVITY)).sqrt()
}

/// Fresnel reflection coefficient at incidence angle `theta_in`.
pub fn fresnel_coefficient(material: &Material, frequency_hz: f64, theta_in: f64) -> Complex64 {
    let z = wave_impedance(material, frequency_hz);
    let z0 = free_space_impedance();
    let sin_ref = z * theta_in.sin() / z0;
    let cos_ref = sin_ref.asin().cos();
    let cos_in = theta_in.cos();
    (z * cos_in - cos_ref * z0) / (z * cos_in + cos_ref * z0)
}

pub fn rayleigh_roughness(material: &Material, frequency_hz: f64, theta_in: f64) -> f64 {
    let g = 4.0 * PI * frequency_hz * material.sigma_roughness * theta_in.cos() / SPEED_OF_LIGHT;
    (-0.5 * g * g).exp()
}

/// First-order reflection coefficient: Fresnel times roughness.
pub fn reflection_coefficient(material: &Material, frequency_hz: f64, theta_in: f64) -> Complex64 {
    fresnel_coefficient(material, frequency_hz, theta_in)
        * rayleigh_roughness(material, frequency_hz, theta_in)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    LineOfSight,
    Reflected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathComponent {
    pub kind: PathKind,
    pub cluster_index: usize,
    pub ray_index: usize,
    /// Complex path gain α.
    pub gain: Complex64,
    /// Angle of arrival in (−π, π].
    pub aoa: f64,
    pub travel_distance: f64,
    /// Incidence angle on the reflector, reflected paths only.
    pub incidence_angle: Option<f64>,
    /// Reflecting surface, reflected paths only.
    pub material: Option<Material>,
}

impl PathComponent {
    /// `|α|²` recomputed from the stored geometry and losses.
    pub fn expected_gain_sqr(
        &self,
        table: &AbsorptionTable,
        frequency_hz: f64,
    ) -> Result<f64, ChannelError> {
        let base = spreading_loss(frequency_hz, self.travel_distance)
            * absorption_loss(table, frequency_hz, self.travel_distance)?;
        match (self.kind, &self.material, self.incidence_angle) {
            (PathKind::LineOfSight, _, _) => Ok(base),
            (PathKind::Reflected, Some(m), Some(theta)) => {
                Ok(reflection_coefficient(m, frequency_hz, theta).norm_sqr() * base)
            }
            _ => Err(ChannelError::InvalidParams(
                "reflected path without material or incidence angle".into(),
            )),
        }
    }
}

fn default_spacing() -> f64 {
    0.5
}

fn default_spread() -> f64 {
    5f64.to_radians()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub frequency_hz: f64,
    pub distance_m: f64,
    pub n_nlos: usize,
    pub n_ray: usize,
    pub antenna_gain_dbi: f64,
    pub n_bs: usize,
    pub k_u: usize,
    /// Antenna spacing in wavelengths.
    #[serde(default = "default_spacing")]
    pub spacing_over_lambda: f64,
    pub materials: Vec<Material>,
    /// Half-width of the uniform ray spread around a cluster AoA, radians.
    #[serde(default = "default_spread")]
    pub diffuse_spread: f64,
}

impl ChannelParams {
    /// 0.3 THz, 15 m, one LoS path plus three single-ray reflected clusters,
    /// 26 dBi aggregate gain, office materials.
    pub fn office_default(n_bs: usize, k_u: usize) -> Self {
        Self {
            frequency_hz: 0.3e12,
            distance_m: 15.0,
            n_nlos: 3,
            n_ray: 1,
            antenna_gain_dbi: 26.0,
            n_bs,
            k_u,
            spacing_over_lambda: default_spacing(),
            materials: Material::office_defaults(),
            diffuse_spread: default_spread(),
        }
    }

    pub fn antenna_gain_linear(&self) -> f64 {
        10f64.powf(self.antenna_gain_dbi / 10.0)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: String| Err(ChannelError::InvalidParams(m));
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            return bad(format!("frequency must be > 0, got {}", self.frequency_hz));
        }
        if !(self.distance_m > 0.0 && self.distance_m.is_finite()) {
            return bad(format!("distance must be > 0, got {}", self.distance_m));
        }
        if self.k_u < 1 || self.n_bs < self.k_u {
            return bad(format!(
                "need n_bs >= k_u >= 1, got n_bs = {}, k_u = {}",
                self.n_bs, self.k_u
            ));
        }
        if !(self.spacing_over_lambda > 0.0) {
            return bad("antenna spacing must be > 0".into());
        }
        if !(self.diffuse_spread >= 0.0) {
            return bad("diffuse spread must be >= 0".into());
        }
        if self.n_nlos > 0 && self.n_ray == 0 || self.n_nlos == 0 && self.n_ray > 0 {
            return bad("n_nlos and n_ray must both be zero or both positive".into());
        }
        if self.n_nlos > 0 && self.materials.is_empty() {
            return bad("reflected clusters need at least one material".into());
        }
        for m in &self.materials {
            m.validate()?;
        }
        Ok(())
    }
}

/// One draw of the `n_bs x k_u` channel and the paths it was built from.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h: CMatrix,
    pub paths: Vec<Vec<PathComponent>>,
    pub frequency_hz: f64,
    pub antenna_gain_linear: f64,
    pub spacing_over_lambda: f64,
    pub n_nlos: usize,
    pub n_ray: usize,
}

impl ChannelRealization {
    pub fn n_bs(&self) -> usize {
        self.h.nrows()
    }

    /// Column `k` rebuilt from `paths[k]`.
    pub fn rebuild_column(&self, k: usize) -> CVector {
        let n_bs = self.n_bs();
        let los_scale = (n_bs as f64).sqrt() * self.antenna_gain_linear;
        let nlos_scale = if self.n_nlos * self.n_ray > 0 {
            (n_bs as f64 / (self.n_nlos * self.n_ray) as f64).sqrt() * self.antenna_gain_linear
        } else {
            0.0
        };
        let mut col = CVector::zeros(n_bs);
        for p in &self.paths[k] {
            let scale = match p.kind {
                PathKind::LineOfSight => los_scale,
                PathKind::Reflected => nlos_scale,
            };
            col += array_response(p.aoa, n_bs, self.spacing_over_lambda) * (p.gain * scale);
        }
        col
    }

    /// `h` scaled to unit average column norm (`‖H‖²_F = K_U`).
    pub fn normalized_h(&self) -> CMatrix {
        normalize_channel(&self.h)
    }
}

/// Scale `h` so `‖h‖²_F` equals its column count. A zero matrix is returned
/// unchanged.
pub fn normalize_channel(h: &CMatrix) -> CMatrix {
    let energy = crate::numerics::fro_norm_sqr(h);
    if energy > 0.0 {
        h * Complex64::new((h.ncols() as f64 / energy).sqrt(), 0.0)
    } else {
        h.clone()
    }
}

fn wrap_angle(x: f64) -> f64 {
    // into (−π, π]
    let mut y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

pub fn generate_channel(
    params: &ChannelParams,
    table: &AbsorptionTable,
    rng: &mut SeededRng,
) -> Result<ChannelRealization, ChannelError> {
    params.validate()?;
    let f = params.frequency_hz;
    let n_bs = params.n_bs;
    let b_r = params.antenna_gain_linear();
    let mut paths = Vec::with_capacity(params.k_u);

    for _ in 0..params.k_u {
        let mut user = Vec::with_capacity(1 + params.n_nlos * params.n_ray);
        let aoa = rng.uniform_phase();
        let phase = rng.uniform_phase();
        let mag = (spreading_loss(f, params.distance_m)
            * absorption_loss(table, f, params.distance_m)?)
        .sqrt();
        user.push(PathComponent {
            kind: PathKind::LineOfSight,
            cluster_index: 0,
            ray_index: 0,
            gain: Complex64::from_polar(mag, phase),
            aoa,
            travel_distance: params.distance_m,
            incidence_angle: None,
            material: None,
        });

        for z in 0..params.n_nlos {
            let cluster_aoa = rng.uniform_phase();
            let material = &params.materials[rng.index(params.materials.len())];
            for l in 0..params.n_ray {
                let offset = params.diffuse_spread * (2.0 * rng.uniform() - 1.0);
                let ray_aoa = wrap_angle(cluster_aoa + offset);
                let distance = params.distance_m * (1.0 + 0.5 * rng.uniform());
                let theta_in = 0.5 * PI * rng.uniform();
                let phase = rng.uniform_phase();
                let refl = reflection_coefficient(material, f, theta_in).norm();
                let mag = refl
                    * (spreading_loss(f, distance) * absorption_loss(table, f, distance)?).sqrt();
                user.push(PathComponent {
                    kind: PathKind::Reflected,
                    cluster_index: z + 1,
                    ray_index: l,
                    gain: Complex64::from_polar(mag, phase),
                    aoa: ray_aoa,
                    travel_distance: distance,
                    incidence_angle: Some(theta_in),
                    material: Some(material.clone()),
                });
            }
        }
        paths.push(user);
    }

    let mut out = ChannelRealization {
        h: CMatrix::zeros(n_bs, params.k_u),
        paths,
        frequency_hz: f,
        antenna_gain_linear: b_r,
        spacing_over_lambda: params.spacing_over_lambda,
        n_nlos: params.n_nlos,
        n_ray: params.n_ray,
    };
    for k in 0..params.k_u {
        let col = out.rebuild_column(k);
        out.h.set_column(k, &col);
    }
    Ok(out)
}
