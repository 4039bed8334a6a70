//! Part-aware spatial (PAS) image synthesis.
//!
//! A PAS image keeps only the crop pixels that lie within `rho` pixels of a
//! detected body or face landmark. The pipeline is
//! resize crop -> project landmarks -> binary mask -> channel-wise product.
//! The analytic Gaussian response field is available alongside the mask for
//! soft-mask experiments; the binary mask itself is an exact distance test.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::landmarks::{to_pixel_coords, LandmarkSet};
use crate::scalar::Scalar;

pub const DEFAULT_SIGMA: f64 = 3.0;
pub const DEFAULT_RHO: f64 = 3.0;
pub const DEFAULT_OUT_SIZE: usize = 128;

/// Pointwise maximum of isotropic per-landmark Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField<T> {
    pub values: Array2<T>,
    pub sigma: T,
}

impl<T: Scalar> GaussianField<T> {
    /// Height of a single Gaussian at its centre, `1 / (sigma * sqrt(2 pi))`.
    pub fn peak(sigma: T) -> T {
        T::one() / (sigma * T::lit(2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn max_value(&self) -> T {
        self.values.iter().fold(T::zero(), |m, &v| m.max(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartAwareMask<T> {
    /// Row-major `H x W` grid of 0/1.
    pub mask: Array2<u8>,
    pub rho: T,
}

impl<T> PartAwareMask<T> {
    pub fn support_size(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasImage<T> {
    /// `3 x H x W`, same value range as the source crop.
    pub pixels: Array3<T>,
    pub source_id: String,
}

/// How the distance threshold follows the Gaussian width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    /// `rho` is used as-is.
    Fixed,
    /// Effective threshold is `rho * sigma / 3`, so a sigma sweep changes the mask.
    Tied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PasConfig {
    pub sigma: f64,
    pub rho: f64,
    pub rho_mode: RhoMode,
    pub out_size: usize,
}

impl Default for PasConfig {
    fn default() -> Self {
        PasConfig {
            sigma: DEFAULT_SIGMA,
            rho: DEFAULT_RHO,
            rho_mode: RhoMode::Tied,
            out_size: DEFAULT_OUT_SIZE,
        }
    }
}

impl PasConfig {
    pub fn effective_rho(&self) -> f64 {
        match self.rho_mode {
            RhoMode::Fixed => self.rho,
            RhoMode::Tied => self.rho * self.sigma / DEFAULT_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Parameter {
                name: "pas.sigma",
                message: format!("must be > 0, got {}", self.sigma),
            });
        }
        if !(self.effective_rho() > 0.0) {
            return Err(Error::Parameter {
                name: "pas.rho",
                message: format!("effective rho must be > 0, got {}", self.effective_rho()),
            });
        }
        if self.out_size == 0 {
            return Err(Error::Parameter {
                name: "pas.out_size",
                message: "must be > 0".into(),
            });
        }
        Ok(())
    }
}

/// Evaluates the Gaussian response of every point on an `h x w` grid. Cell
/// `(row, col)` sits at pixel coordinate `(x = col, y = row)`.
pub fn gaussian_field<T: Scalar>(
    points: &[(T, T)],
    h: usize,
    w: usize,
    sigma: T,
) -> Result<GaussianField<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::Parameter {
            name: "sigma",
            message: format!("must be > 0, got {sigma}"),
        });
    }
    check_grid(h, w)?;
    let peak = GaussianField::peak(sigma);
    let denom = T::lit(2.0) * sigma * sigma;
    let mut values = Array2::zeros((h, w));
    for ((row, col), v) in values.indexed_iter_mut() {
        let (cx, cy) = (T::from_usize_lossy(col), T::from_usize_lossy(row));
        for &(px, py) in points {
            let d2 = (cx - px) * (cx - px) + (cy - py) * (cy - py);
            let g = peak * (-d2 / denom).exp();
            if g > *v {
                *v = g;
            }
        }
    }
    Ok(GaussianField { values, sigma })
}

/// Sets every cell within Euclidean distance `rho` of any point to 1.
pub fn binarize<T: Scalar>(
    points: &[(T, T)],
    h: usize,
    w: usize,
    rho: T,
) -> Result<PartAwareMask<T>> {
    if !(rho > T::zero()) {
        return Err(Error::Parameter {
            name: "rho",
            message: format!("must be > 0, got {rho}"),
        });
    }
    check_grid(h, w)?;
    let mut mask = Array2::zeros((h, w));
    let max_row = T::from_usize_lossy(h - 1);
    let max_col = T::from_usize_lossy(w - 1);
    for &(px, py) in points {
        // Only the cells inside the point's bounding square can qualify.
        let r0 = (py - rho).ceil().max(T::zero());
        let r1 = (py + rho).floor().min(max_row);
        let c0 = (px - rho).ceil().max(T::zero());
        let c1 = (px + rho).floor().min(max_col);
        if r0 > r1 || c0 > c1 {
            continue;
        }
        let (r0, r1) = (r0.as_f64() as usize, r1.as_f64() as usize);
        let (c0, c1) = (c0.as_f64() as usize, c1.as_f64() as usize);
        for row in r0..=r1 {
            let dy = T::from_usize_lossy(row) - py;
            for col in c0..=c1 {
                let dx = T::from_usize_lossy(col) - px;
                if (dx * dx + dy * dy).sqrt() <= rho {
                    mask[[row, col]] = 1;
                }
            }
        }
    }
    Ok(PartAwareMask { mask, rho })
}

/// Channel-wise product of the crop with the binary mask.
pub fn compose_pas<T: Scalar>(
    crop: ArrayView3<T>,
    mask: &PartAwareMask<T>,
    source_id: impl Into<String>,
) -> Result<PasImage<T>> {
    let (_, h, w) = crop.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask is {:?}, crop spatial dims are {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    let mut pixels = crop.to_owned();
    for mut plane in pixels.axis_iter_mut(Axis(0)) {
        Zip::from(&mut plane).and(&mask.mask).for_each(|p, &m| {
            if m == 0 {
                *p = T::zero();
            }
        });
    }
    Ok(PasImage {
        pixels,
        source_id: source_id.into(),
    })
}

/// Everything produced on the way to a PAS image.
#[derive(Debug, Clone)]
pub struct PasArtifacts<T> {
    pub resized_crop: Array3<T>,
    pub points: Vec<(T, T)>,
    pub field: GaussianField<T>,
    pub mask: PartAwareMask<T>,
    pub pas: PasImage<T>,
}

/// End-to-end PAS construction at `cfg.out_size` squared. The crop is resized
/// first and the landmarks are rendered at the output resolution, so the mask
/// stays exactly binary.
pub fn make_pas<T: Scalar>(
    crop: ArrayView3<T>,
    landmarks: &LandmarkSet,
    cfg: &PasConfig,
    source_id: impl Into<String>,
) -> Result<PasImage<T>> {
    let (resized, points) = prepare(crop, landmarks, cfg)?;
    let mask = binarize(&points, cfg.out_size, cfg.out_size, T::lit(cfg.effective_rho()))?;
    compose_pas(resized.view(), &mask, source_id)
}

/// Like [`make_pas`], also returning the intermediate field and mask.
pub fn make_pas_detailed<T: Scalar>(
    crop: ArrayView3<T>,
    landmarks: &LandmarkSet,
    cfg: &PasConfig,
    source_id: impl Into<String>,
) -> Result<PasArtifacts<T>> {
    let (resized, points) = prepare(crop, landmarks, cfg)?;
    let n = cfg.out_size;
    let field = gaussian_field(&points, n, n, T::lit(cfg.sigma))?;
    let mask = binarize(&points, n, n, T::lit(cfg.effective_rho()))?;
    let pas = compose_pas(resized.view(), &mask, source_id)?;
    Ok(PasArtifacts {
        resized_crop: resized,
        points,
        field,
        mask,
        pas,
    })
}

/// An all-zero PAS image, used when no landmarks are available.
pub fn empty_pas<T: Scalar>(out_size: usize, source_id: impl Into<String>) -> PasImage<T> {
    PasImage {
        pixels: Array3::zeros((3, out_size, out_size)),
        source_id: source_id.into(),
    }
}

fn prepare<T: Scalar>(
    crop: ArrayView3<T>,
    landmarks: &LandmarkSet,
    cfg: &PasConfig,
) -> Result<(Array3<T>, Vec<(T, T)>)> {
    cfg.validate()?;
    if crop.dim().0 != 3 {
        return Err(Error::Shape(format!("crop must have 3 channels, has {}", crop.dim().0)));
    }
    let n = cfg.out_size;
    let resized = imageops::resize_bilinear(crop, n, n);
    let points = to_pixel_coords(landmarks, n, n)
        .into_iter()
        .map(|(x, y)| (T::from_usize_lossy(x), T::from_usize_lossy(y)))
        .collect();
    Ok((resized, points))
}

fn check_grid(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Parameter {
            name: "grid",
            message: format!("grid must be non-empty, got {h}x{w}"),
        });
    }
    Ok(())
}

/// Sidecar describing the parameters a cache directory was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasCacheMeta {
    pub sigma: f64,
    pub rho: f64,
    pub out_size: usize,
}

impl From<&PasConfig> for PasCacheMeta {
    fn from(cfg: &PasConfig) -> Self {
        PasCacheMeta {
            sigma: cfg.sigma,
            rho: cfg.effective_rho(),
            out_size: cfg.out_size,
        }
    }
}

/// On-disk cache of 8-bit PAS images, `<sample_id>.pas.png`, with a
/// `pas_cache.json` sidecar. A sidecar mismatch wipes the cached images.
#[derive(Debug, Clone)]
pub struct PasCache {
    dir: PathBuf,
    meta: PasCacheMeta,
}

pub const PAS_CACHE_SIDECAR: &str = "pas_cache.json";

impl PasCache {
    pub fn open(dir: impl Into<PathBuf>, cfg: &PasConfig) -> Result<Self> {
        let dir = dir.into();
        let meta = PasCacheMeta::from(cfg);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let sidecar = dir.join(PAS_CACHE_SIDECAR);
        let stale = match fs::read_to_string(&sidecar) {
            Ok(text) => serde_json::from_str::<PasCacheMeta>(&text).ok().as_ref() != Some(&meta),
            Err(_) => true,
        };
        if stale {
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let path = entry.map_err(|e| Error::io(&dir, e))?.path();
                if path.to_string_lossy().ends_with(".pas.png") {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
            let text = serde_json::to_string_pretty(&meta)?;
            fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
        }
        Ok(PasCache { dir, meta })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &PasCacheMeta {
        &self.meta
    }

    pub fn path_for(&self, sample_id: &str) -> PathBuf {
        self.dir.join(format!("{sample_id}.pas.png"))
    }

    pub fn get<T: Scalar>(&self, sample_id: &str) -> Option<PasImage<T>> {
        let path = self.path_for(sample_id);
        let pixels = imageops::load_rgb::<T>(&path).ok()?;
        if pixels.dim() != (3, self.meta.out_size, self.meta.out_size) {
            return None;
        }
        Some(PasImage {
            pixels,
            source_id: sample_id.to_string(),
        })
    }

    pub fn put<T: Scalar>(&self, pas: &PasImage<T>) -> Result<()> {
        imageops::save_png(self.path_for(&pas.source_id), pas.pixels.view())
    }
}
