//! Synthetic full-pol scene generation with speckle.
//!
//! Scenes are built from class archetypes (a normalized polarimetric
//! feature, a mean power, and a texture correlation length). Each pixel
//! draws `looks` scattering vectors from the circular complex Gaussian
//! with the archetype's covariance and averages their outer products, so
//! the emitted covariances carry realistic multilook speckle while their
//! per-class ensemble statistics converge to the archetype. Everything is
//! keyed on (seed, x, y), making generation bit-reproducible and safely
//! parallel.

use nalgebra::Matrix3;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::polmath::{psd_check, CovarianceMatrix, PolFeature, ScatteringVector};
use crate::raster::{Layout, PolRaster};

/// Terrain class archetype.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassArchetype {
    pub name: String,
    /// Normalized covariance of the class; must satisfy the PSD margin.
    pub feature: PolFeature,
    /// Mean total power (span) of the class.
    pub mean_power: f64,
    /// Spatial correlation length in pixels of the multiplicative power
    /// texture; 0 disables texture.
    pub texture_scale: f64,
}

impl ClassArchetype {
    pub fn new(name: &str, feature: PolFeature, mean_power: f64, texture_scale: f64) -> Result<Self> {
        feature.validate()?;
        if !psd_check(&feature, 1e-9).satisfied {
            return Err(Error::InvalidInput(format!(
                "archetype {name} feature violates the PSD margin"
            )));
        }
        if mean_power <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "archetype {name} power {mean_power} must be positive"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            feature,
            mean_power,
            texture_scale,
        })
    }
}

/// The three default archetypes: a smooth low-entropy sea surface, a
/// volume-like vegetation class, and a double-bounce-dominant urban class.
///
/// The feature values are tuned so each class sits well inside its H/ᾱ
/// zone (surface, medium-entropy vegetation, low-entropy multiple) even
/// under 9-look sampling noise, and the mean powers are spread ~14 dB
/// apart while keeping the VV intensities inside the [−25, 0] dB window.
pub fn default_archetypes() -> Vec<ClassArchetype> {
    let sea = ClassArchetype::new(
        "sea",
        PolFeature {
            delta: [0.45, 0.02, 0.53],
            rho: [
                Complex64::new(0.90, 0.0),
                Complex64::new(0.05, 0.0),
                Complex64::new(0.05, 0.0),
            ],
        },
        0.05,
        12.0,
    )
    .expect("sea archetype");
    let vegetation = ClassArchetype::new(
        "vegetation",
        PolFeature {
            delta: [0.7411, 0.10, 0.1589],
            rho: [
                Complex64::new(0.2116, 0.0),
                Complex64::ZERO,
                Complex64::ZERO,
            ],
        },
        0.6,
        4.0,
    )
    .expect("vegetation archetype");
    let urban = ClassArchetype::new(
        "urban",
        PolFeature {
            delta: [0.55, 0.03, 0.42],
            rho: [
                Complex64::new(-0.85, 0.0),
                Complex64::new(0.05, 0.0),
                Complex64::new(-0.05, 0.0),
            ],
        },
        1.2,
        3.0,
    )
    .expect("urban archetype");
    vec![sea, vegetation, urban]
}

/// How class regions are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionModel {
    /// Nearest-site partition, one site per class.
    Voronoi,
    /// Power-diagram blobs: squared distance minus a random per-class
    /// weight, which keeps every cell convex.
    Blobs,
    /// Horizontal bands in class order.
    Stripes,
}

impl std::str::FromStr for RegionModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voronoi" => Ok(RegionModel::Voronoi),
            "blobs" => Ok(RegionModel::Blobs),
            "stripes" => Ok(RegionModel::Stripes),
            other => Err(Error::InvalidConfig(format!("unknown region model {other}"))),
        }
    }
}

/// Scene description.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub region_model: RegionModel,
    pub classes: Vec<ClassArchetype>,
    pub looks: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width % 4 != 0 || self.height % 4 != 0 {
            return Err(Error::InvalidInput(format!(
                "scene dims {}x{} must be divisible by 4",
                self.width, self.height
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidInput("no classes".into()));
        }
        if self.looks < 1 {
            return Err(Error::InvalidInput("looks must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything a rendered scene produces.
#[derive(Debug, Clone)]
pub struct Scene {
    pub covariance: PolRaster,
    pub intensity_hh: PolRaster,
    pub intensity_hv: PolRaster,
    pub intensity_vv: PolRaster,
    pub class_map: PolRaster,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for a pixel, derived from (seed, x, y).
fn pixel_rng(seed: u64, x: u32, y: u32) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(((y as u64) << 32) | (x as u64 + 1)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Deterministic class map per the region model.
pub fn generate_class_map(spec: &SceneSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let k = spec.classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x5EED_C1A5));
    let mut map = vec![0u8; w * h];
    match spec.region_model {
        RegionModel::Stripes => {
            for y in 0..h {
                let label = (y * k / h).min(k - 1) as u8;
                for x in 0..w {
                    map[y * w + x] = label;
                }
            }
        }
        RegionModel::Voronoi | RegionModel::Blobs => {
            let sites: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    let sx = rng.gen_range(0.1..0.9) * w as f64;
                    let sy = rng.gen_range(0.1..0.9) * h as f64;
                    // Power-diagram weight; zero for plain Voronoi.
                    let weight = if spec.region_model == RegionModel::Blobs {
                        rng.gen_range(0.0..(0.25 * (w * w + h * h) as f64))
                    } else {
                        0.0
                    };
                    (sx, sy, weight)
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let mut best = 0usize;
                    let mut best_score = f64::INFINITY;
                    for (c, &(sx, sy, wt)) in sites.iter().enumerate() {
                        let dx = x as f64 - sx;
                        let dy = y as f64 - sy;
                        let score = dx * dx + dy * dy - wt;
                        if score < best_score {
                            best_score = score;
                            best = c;
                        }
                    }
                    map[y * w + x] = best as u8;
                }
            }
        }
    }
    Ok(map)
}

/// Draw n looks from the archetype's complex Gaussian: k = B·z with
/// B·Bᴴ = the archetype covariance and z standard circular complex.
/// A Cholesky factor is used when the covariance is strictly PD; otherwise
/// the Hermitian eigen square root handles rank deficiency.
pub fn sample_looks(
    archetype: &ClassArchetype,
    n_looks: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ScatteringVector> {
    let cov = CovarianceMatrix::from_feature(&archetype.feature, archetype.mean_power);
    let factor = covariance_factor(&cov);
    sample_looks_from_factor(&factor, n_looks, rng)
}

fn sample_looks_from_factor(
    factor: &Matrix3<Complex64>,
    n_looks: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ScatteringVector> {
    (0..n_looks)
        .map(|_| {
            let z = nalgebra::Vector3::from_fn(|_, _| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                // Unit-variance circular complex Gaussian.
                Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
            });
            let k = factor * z;
            ScatteringVector([k[0], k[1], k[2]])
        })
        .collect()
}

/// A matrix B with B·Bᴴ equal to the covariance.
fn covariance_factor(cov: &CovarianceMatrix) -> Matrix3<Complex64> {
    if let Some(l) = complex_cholesky(cov) {
        return l;
    }
    // Rank-deficient: Hermitian eigen square root.
    let (values, vectors) = crate::polmath::sorted_hermitian_eigen(&cov.to_matrix());
    let mut b = Matrix3::zeros();
    for i in 0..3 {
        let s = values[i].max(0.0).sqrt();
        for r in 0..3 {
            b[(r, i)] = vectors[(r, i)] * s;
        }
    }
    b
}

fn complex_cholesky(cov: &CovarianceMatrix) -> Option<Matrix3<Complex64>> {
    let m = cov.to_matrix();
    let mut l = Matrix3::<Complex64>::zeros();
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = m[(i, j)];
            for p in 0..j {
                sum -= l[(i, p)] * l[(j, p)].conj();
            }
            if i == j {
                let d = sum.re;
                if d <= 1e-14 * cov.span().max(1e-300) {
                    return None;
                }
                l[(i, j)] = Complex64::new(d.sqrt(), 0.0);
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Smooth multiplicative power field: bilinear value noise on a lattice of
/// the class's texture scale, mapped through exp(±0.5).
struct TextureField {
    lattice: Vec<f64>,
    cols: usize,
    scale: f64,
}

impl TextureField {
    fn new(seed: u64, class_idx: usize, w: usize, h: usize, scale: f64) -> Option<Self> {
        if scale <= 0.0 {
            return None;
        }
        let cols = (w as f64 / scale).ceil() as usize + 2;
        let rows = (h as f64 / scale).ceil() as usize + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
            seed ^ splitmix64(0x7E47_0000 + class_idx as u64),
        ));
        let lattice = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Some(Self { lattice, cols, scale })
    }

    fn gain(&self, x: u32, y: u32) -> f64 {
        let fx = x as f64 / self.scale;
        let fy = y as f64 / self.scale;
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let at = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let n = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
            + at(y0, x0 + 1) * (1.0 - ty) * tx
            + at(y0 + 1, x0) * ty * (1.0 - tx)
            + at(y0 + 1, x0 + 1) * ty * tx;
        (0.5 * n).exp()
    }
}

/// Render the scene: per pixel, draw looks from the class archetype at the
/// locally textured power and average their outer products.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let class_map = generate_class_map(spec)?;

    let factors: Vec<Matrix3<Complex64>> = spec
        .classes
        .iter()
        .map(|a| covariance_factor(&CovarianceMatrix::from_feature(&a.feature, a.mean_power)))
        .collect();
    let textures: Vec<Option<TextureField>> = spec
        .classes
        .iter()
        .enumerate()
        .map(|(i, a)| TextureField::new(spec.seed, i, w as usize, h as usize, a.texture_scale))
        .collect();

    let mut covariance = PolRaster::new(w, h, Layout::Cov9);
    let mut hh = PolRaster::new(w, h, Layout::Gray1);
    let mut hv = PolRaster::new(w, h, Layout::Gray1);
    let mut vv = PolRaster::new(w, h, Layout::Gray1);
    let mut classes = PolRaster::new(w, h, Layout::Class1);

    for y in 0..h {
        for x in 0..w {
            let label = class_map[(y * w + x) as usize] as usize;
            let gain = textures[label].as_ref().map_or(1.0, |t| t.gain(x, y));
            // Scaling the covariance by g scales its factor by sqrt(g).
            let factor = factors[label] * Complex64::new(gain.sqrt(), 0.0);
            let mut rng = pixel_rng(spec.seed, x, y);
            let looks = sample_looks_from_factor(&factor, spec.looks, &mut rng);
            let cov = CovarianceMatrix::from_looks(&looks)?;
            covariance.set_covariance(x, y, &cov);
            let d = cov.diag();
            hh.set(x, y, 0, d[0] as f32);
            hv.set(x, y, 0, d[1] as f32);
            vv.set(x, y, 0, d[2] as f32);
            classes.set(x, y, 0, label as f32);
        }
    }

    Ok(Scene {
        covariance,
        intensity_hh: hh,
        intensity_hv: hv,
        intensity_vv: vv,
        class_map: classes,
    })
}
