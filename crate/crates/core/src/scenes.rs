//! Procedural scenes with analytic density and color, an oracle renderer for
//! ground-truth views, and dataset persistence.
//!
//! Density is a sum of soft-edged primitives: each contributes
//! `amplitude · (1 − smoothstep(−w/2, w/2, sd(p)))` where `sd` is the signed
//! distance to its surface and `w` the falloff width.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, focal_from_fov, Camera, CameraRecord, Vec3};
use crate::model::RayQuery;
use crate::renderer::{load_png, render_image, RayField, RaySamples, RenderedImage, Sampling};
use crate::scalar::Scalar;
use crate::tensorgrad::Tensor;

pub const SCENE_NAMES: [&str; 4] = ["sphere", "two-blobs", "box-grid", "tinted-hemisphere"];
pub const MANIFEST_FILE: &str = "manifest.toml";
/// Samples per ray used for ground-truth renders.
pub const ORACLE_SAMPLES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub amplitude: f64,
    pub albedo: [f64; 3],
    /// Width of the soft shell around the surface.
    pub falloff: f64,
}

impl Primitive {
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let q = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.shape {
            Shape::Sphere { radius } => geometry::norm(q) - radius,
            Shape::Box { half_extents } => {
                let d = [
                    q[0].abs() - half_extents[0],
                    q[1].abs() - half_extents[1],
                    q[2].abs() - half_extents[2],
                ];
                let outside = geometry::norm([d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)]);
                outside + d[0].max(d[1]).max(d[2]).min(0.0)
            }
        }
    }

    pub fn density(&self, p: [f64; 3]) -> f64 {
        let h = self.falloff / 2.0;
        let sd = self.signed_distance(p);
        if h <= 0.0 {
            return if sd <= 0.0 { self.amplitude } else { 0.0 };
        }
        let x = ((sd + h) / (2.0 * h)).clamp(0.0, 1.0);
        self.amplitude * (1.0 - x * x * (3.0 - 2.0 * x))
    }

    /// Radius of a sphere around the center containing all density.
    pub fn bounding_radius(&self) -> f64 {
        let r = match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents } => geometry::norm(half_extents),
        };
        r + self.falloff / 2.0
    }
}

/// View-dependent tint: adds `color · (1 + d·axis)/2` to the albedo mix,
/// clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tint {
    pub color: [f64; 3],
    pub axis: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub tint: Option<Tint>,
    pub cameras: Vec<Camera<T>>,
}

impl<T: Scalar> Scene<T> {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.amplitude >= 0.0) || p.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) || p.falloff < 0.0 {
                return Err(Error::Contract(format!(
                    "primitive {i} needs amplitude >= 0, albedo in [0, 1] and falloff >= 0"
                )));
            }
            if !self.cameras.is_empty() {
                let r = p.bounding_radius();
                let framed = self.cameras.iter().any(|c| {
                    let d = geometry::norm(geometry::sub(p.center, c.center.map(|v| v.as_f64())));
                    d - r >= c.near.as_f64() && d + r <= c.far.as_f64()
                });
                if !framed {
                    return Err(Error::Contract(format!(
                        "primitive {i} lies outside the depth bounds of every camera"
                    )));
                }
            }
        }
        for c in &self.cameras {
            c.validate()?;
        }
        Ok(())
    }

    /// Density and view-independent color at `p`.
    pub fn eval(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for prim in &self.primitives {
            let s = prim.density(p);
            sigma += s;
            for (a, &c) in acc.iter_mut().zip(&prim.albedo) {
                *a += s * c;
            }
        }
        if sigma > 0.0 {
            return (sigma, acc.map(|a| a / sigma));
        }
        let fallback = self
            .primitives
            .iter()
            .fold(None::<&Primitive>, |best, p| match best {
                Some(b) if b.amplitude >= p.amplitude => Some(b),
                _ => Some(p),
            })
            .map_or([0.0; 3], |p| p.albedo);
        (0.0, fallback)
    }

    /// Density and color seen along unit direction `d`.
    pub fn eval_directional(&self, p: [f64; 3], d: [f64; 3]) -> (f64, [f64; 3]) {
        let (sigma, mut c) = self.eval(p);
        if let Some(t) = &self.tint {
            let k = (1.0 + geometry::dot(d, t.axis)) / 2.0;
            for (v, &tc) in c.iter_mut().zip(&t.color) {
                *v = (*v + tc * k).clamp(0.0, 1.0);
            }
        }
        (sigma, c)
    }
}

/// Density and color of the scene at point `p`.
pub fn analytic_field_eval<T: Scalar>(scene: &Scene<T>, p: Vec3<T>) -> (T, [T; 3]) {
    let (s, c) = scene.eval(p.map(|v| v.as_f64()));
    (T::of(s), c.map(T::of))
}

impl<T: Scalar> RayField<T> for Scene<T> {
    fn evaluate(&self, queries: &[RayQuery<T>]) -> Result<Vec<RaySamples<T>>> {
        Ok(queries
            .iter()
            .map(|q| {
                let d = q.ray.direction.map(|v| v.as_f64());
                let (sigma, color) = q
                    .depths
                    .iter()
                    .map(|&t| {
                        let (s, c) = self.eval_directional(q.ray.at(t).map(|v| v.as_f64()), d);
                        (T::of(s), c.map(T::of))
                    })
                    .unzip();
                RaySamples {
                    depths: q.depths.clone(),
                    sigma,
                    color,
                    far: q.far,
                }
            })
            .collect())
    }
}

/// Ground truth by midpoint quadrature of the analytic field.
pub fn oracle_render<T: Scalar>(scene: &Scene<T>, cam: &Camera<T>, n: usize) -> Result<RenderedImage<T>> {
    if n < 64 {
        return Err(Error::Contract(format!("oracle renders need at least 64 samples per ray, got {n}")));
    }
    render_image(cam, scene, n, Sampling::Midpoint)
}

fn sphere(center: [f64; 3], radius: f64, amplitude: f64, albedo: [f64; 3], falloff: f64) -> Primitive {
    Primitive {
        shape: Shape::Sphere { radius },
        center,
        amplitude,
        albedo,
        falloff,
    }
}

fn cube(center: [f64; 3], half: f64, amplitude: f64, albedo: [f64; 3], falloff: f64) -> Primitive {
    Primitive {
        shape: Shape::Box {
            half_extents: [half; 3],
        },
        center,
        amplitude,
        albedo,
        falloff,
    }
}

/// Camera distance from the origin before jitter, and half the depth range.
const CAMERA_RADIUS: f64 = 4.0;
const DEPTH_HALF_RANGE: f64 = 2.0;
const FOV_DEGREES: f64 = 40.0;

/// Cameras looking at the origin from a jittered spiral over the full sphere
/// or the upper hemisphere.
fn orbit_cameras(count: usize, hemisphere: bool, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Camera<f64>>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let offset = rng.gen_range(0.0..std::f64::consts::TAU);
    let f = focal_from_fov(FOV_DEGREES, size);
    (0..count)
        .map(|i| {
            let s = (i as f64 + 0.5) / count as f64;
            // height in (-0.9, 0.9) or (0.1, 0.9), staying clear of the poles
            let y = if hemisphere { 0.1 + 0.8 * s } else { 0.9 - 1.8 * s };
            let ring = (1.0 - y * y).sqrt();
            let azimuth = offset + golden * i as f64 + rng.gen_range(-0.15..0.15);
            let radius = CAMERA_RADIUS + rng.gen_range(-0.25..0.25);
            let eye = [radius * ring * azimuth.cos(), radius * y, radius * ring * azimuth.sin()];
            Camera::look_at(
                eye,
                [0.0; 3],
                [0.0, 1.0, 0.0],
                f,
                size,
                size,
                radius - DEPTH_HALF_RANGE,
                radius + DEPTH_HALF_RANGE,
            )
        })
        .collect()
}

/// Builds a named scene with `views` cameras rendering `size`×`size` images.
pub fn generate_toy_scene(name: &str, views: usize, size: usize, seed: u64) -> Result<Scene<f64>> {
    if views == 0 || size < 2 {
        return Err(Error::Config("a scene needs at least one view of at least 2×2 pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (primitives, tint, hemisphere) = match name {
        "sphere" => (vec![sphere([0.0; 3], 1.0, 8.0, [0.9, 0.55, 0.2], 0.6)], None, false),
        "two-blobs" => (
            vec![
                sphere([-0.55, 0.0, 0.0], 0.6, 6.0, [0.9, 0.15, 0.1], 0.6),
                sphere([0.55, 0.1, 0.0], 0.6, 6.0, [0.1, 0.25, 0.9], 0.6),
            ],
            None,
            false,
        ),
        "box-grid" => {
            let colors = [[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9], [0.9, 0.8, 0.2]];
            let prims = [(-0.6, -0.6), (0.6, -0.6), (-0.6, 0.6), (0.6, 0.6)]
                .iter()
                .zip(colors)
                .map(|(&(x, z), c)| cube([x, 0.0, z], 0.3, 6.0, c, 0.6))
                .collect();
            (prims, None, true)
        }
        "tinted-hemisphere" => (
            vec![sphere([0.0; 3], 1.0, 8.0, [0.5, 0.5, 0.5], 0.6)],
            Some(Tint {
                color: [0.4, 0.2, -0.3],
                axis: [0.0, -1.0, 0.0],
            }),
            true,
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown scene {other:?}; expected one of {}",
                SCENE_NAMES.join(", ")
            )))
        }
    };
    let scene = Scene {
        name: name.to_string(),
        primitives,
        tint,
        cameras: orbit_cameras(views, hemisphere, size, &mut rng)?,
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Every eighth view (indices 7, 15, …) is held out.
pub fn split_for(index: usize) -> Split {
    if index % 8 == 7 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ViewRecord {
    #[serde(flatten)]
    camera: CameraRecord,
    split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    name: String,
    seed: u64,
    oracle_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tint: Option<Tint>,
    primitives: Vec<Primitive>,
    views: Vec<ViewRecord>,
}

#[derive(Clone, Debug)]
pub struct DatasetView {
    pub camera: Camera<f64>,
    /// `[H, W, 3]` in `[0, 1]`, at 8-bit precision.
    pub image: Tensor<f64>,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub scene: Scene<f64>,
    pub seed: u64,
    pub views: Vec<DatasetView>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == split).collect()
    }
}

/// Writes `manifest.toml` and `images/view_XXX.png` under `dir`.
pub fn save_dataset(scene: &Scene<f64>, images: &[RenderedImage<f64>], seed: u64, dir: &Path) -> Result<()> {
    if images.len() != scene.cameras.len() {
        return Err(Error::Contract(format!(
            "{} images for {} cameras",
            images.len(),
            scene.cameras.len()
        )));
    }
    let mut views = Vec::with_capacity(images.len());
    for (i, (cam, img)) in scene.cameras.iter().zip(images).enumerate() {
        let rel = format!("images/view_{i:03}.png");
        img.save_png(&dir.join(&rel))?;
        views.push(ViewRecord {
            camera: CameraRecord::from_camera(cam, rel),
            split: split_for(i),
        });
    }
    let manifest = Manifest {
        name: scene.name.clone(),
        seed,
        oracle_samples: ORACLE_SAMPLES,
        tint: scene.tint.clone(),
        primitives: scene.primitives.clone(),
        views,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut cameras = Vec::with_capacity(manifest.views.len());
    let mut views = Vec::with_capacity(manifest.views.len());
    for rec in &manifest.views {
        let camera: Camera<f64> = rec.camera.to_camera()?;
        let img_path = dir.join(&rec.camera.image);
        let image = load_png(&img_path)?;
        if image.shape() != [camera.height, camera.width, 3] {
            return Err(Error::format(
                &img_path,
                format!(
                    "image is {:?}, manifest says {}×{}",
                    image.shape(),
                    camera.width,
                    camera.height
                ),
            ));
        }
        cameras.push(camera.clone());
        views.push(DatasetView {
            camera,
            image,
            split: rec.split,
            path: img_path,
        });
    }
    let scene = Scene {
        name: manifest.name,
        primitives: manifest.primitives,
        tint: manifest.tint,
        cameras,
    };
    scene.validate()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        scene,
        seed: manifest.seed,
        views,
    })
}

/// Generates a scene, renders every view with the oracle and saves it.
pub fn generate_dataset(name: &str, views: usize, size: usize, seed: u64, dir: &Path) -> Result<Dataset> {
    let scene = generate_toy_scene(name, views, size, seed)?;
    let images = scene
        .cameras
        .iter()
        .map(|c| oracle_render(&scene, c, ORACLE_SAMPLES))
        .collect::<Result<Vec<_>>>()?;
    save_dataset(&scene, &images, seed, dir)?;
    load_dataset(dir)
}
