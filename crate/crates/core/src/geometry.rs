//! Pinhole cameras, rays, projection and bilinear retrieval.
//!
//! Conventions: the rotation is camera-to-world with columns (right, down,
//! forward), so the camera looks along its local +z axis. Image origin is the
//! top-left pixel and pixel `(u, v)` has its center at integer coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorgrad::Tensor;

pub type Vec3<T> = [T; 3];
/// Row-major 3×3 matrix.
pub type Mat3<T> = [[T; 3]; 3];

pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

/// Unit vector along `a`; fails on zero length.
pub fn normalize<T: Scalar>(a: Vec3<T>) -> Result<Vec3<T>> {
    let n = norm(a);
    if n == T::zero() || !n.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize {a:?}")));
    }
    Ok(scale(a, T::one() / n))
}

fn mat_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_t_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    let mut out = [T::zero(); 3];
    for (i, row) in m.iter().enumerate() {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r * v[i];
        }
    }
    out
}

fn orthonormal_tolerance<T: Scalar>() -> T {
    T::of(1e-9).max(T::epsilon() * T::of(100.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// Camera-to-world rotation.
    pub rotation: Mat3<T>,
    /// Camera center in world coordinates.
    pub center: Vec3<T>,
    pub width: usize,
    pub height: usize,
    pub near: T,
    pub far: T,
}

impl<T: Scalar> Camera<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        rotation: Mat3<T>,
        center: Vec3<T>,
        width: usize,
        height: usize,
        near: T,
        far: T,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            center,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with image "up" as close to `up`
    /// as possible. `fx` is used for both focal lengths and the principal
    /// point is the image center.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        fx: T,
        width: usize,
        height: usize,
        near: T,
        far: T,
    ) -> Result<Self> {
        let z = normalize(sub(target, eye))?;
        let x = normalize(cross(scale(up, -T::one()), z))?;
        let y = cross(z, x);
        let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        let half = |n: usize| T::of((n as f64 - 1.0) / 2.0);
        Camera::new(fx, fx, half(width), half(height), rotation, eye, width, height, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let tol = orthonormal_tolerance::<T>();
        for i in 0..3 {
            for j in 0..3 {
                let mut rtr = T::zero();
                for k in 0..3 {
                    rtr += r[k][i] * r[k][j];
                }
                let expect = if i == j { T::one() } else { T::zero() };
                if (rtr - expect).abs() > tol {
                    return Err(Error::Contract(format!("rotation is not orthonormal: RᵀR[{i}][{j}] = {rtr}")));
                }
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        if (det - T::one()).abs() > tol {
            return Err(Error::Contract(format!("rotation determinant is {det}, expected +1")));
        }
        if !(self.near > T::zero() && self.near < self.far) {
            return Err(Error::Contract(format!(
                "scene bounds must satisfy 0 < near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 || !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::Contract("camera needs positive size and focal lengths".into()));
        }
        Ok(())
    }

    /// Local +z axis in world coordinates.
    pub fn forward(&self) -> Vec3<T> {
        [self.rotation[0][2], self.rotation[1][2], self.rotation[2][2]]
    }

    pub fn world_to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        mat_t_vec(&self.rotation, sub(p, self.center))
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        let c = |x: T| U::of(x.as_f64());
        let v = |a: Vec3<T>| [c(a[0]), c(a[1]), c(a[2])];
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            rotation: [v(self.rotation[0]), v(self.rotation[1]), v(self.rotation[2])],
            center: v(self.center),
            width: self.width,
            height: self.height,
            near: c(self.near),
            far: c(self.far),
        }
    }
}

/// Focal length in pixels for a horizontal field of view.
pub fn focal_from_fov(fov_degrees: f64, width: usize) -> f64 {
    width as f64 / 2.0 / (fov_degrees.to_radians() / 2.0).tan()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Unit length.
    pub direction: Vec3<T>,
}

impl<T: Scalar> Ray<T> {
    pub fn at(&self, t: T) -> Vec3<T> {
        add(self.origin, scale(self.direction, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelUV<T> {
    pub u: T,
    pub v: T,
    pub in_bounds: bool,
}

pub fn make_ray<T: Scalar>(cam: &Camera<T>, px: T, py: T) -> Ray<T> {
    let local = [(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, T::one()];
    let world = mat_vec(&cam.rotation, local);
    let direction = scale(world, T::one() / norm(world));
    Ray {
        origin: cam.center,
        direction,
    }
}

pub fn project_point<T: Scalar>(p: Vec3<T>, cam: &Camera<T>) -> Result<PixelUV<T>> {
    if p == cam.center {
        return Err(Error::Degenerate(format!("point {p:?} is at the camera center")));
    }
    let q = cam.world_to_camera(p);
    if q[2] <= T::zero() {
        return Ok(PixelUV {
            u: T::infinity(),
            v: T::infinity(),
            in_bounds: false,
        });
    }
    let u = cam.fx * q[0] / q[2] + cam.cx;
    let v = cam.fy * q[1] / q[2] + cam.cy;
    let in_bounds = u >= T::zero()
        && u <= T::of((cam.width - 1) as f64)
        && v >= T::zero()
        && v <= T::of((cam.height - 1) as f64);
    Ok(PixelUV { u, v, in_bounds })
}

/// Flat texel indices (`y·width + x`) and weights of the four bilinear
/// neighbors of an in-bounds coordinate. On the last row or column the
/// missing neighbors repeat the edge texel with zero weight.
pub fn bilinear_taps<T: Scalar>(uv: PixelUV<T>, width: usize, height: usize) -> Result<[(usize, T); 4]> {
    let oob = || Error::OutOfBounds {
        u: uv.u.as_f64(),
        v: uv.v.as_f64(),
        width,
        height,
    };
    if !uv.in_bounds
        || !(uv.u >= T::zero() && uv.v >= T::zero())
        || uv.u > T::of((width - 1) as f64)
        || uv.v > T::of((height - 1) as f64)
    {
        return Err(oob());
    }
    let x0 = uv.u.floor().to_usize().ok_or_else(oob)?.min(width - 1);
    let y0 = uv.v.floor().to_usize().ok_or_else(oob)?.min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = uv.u - T::of(x0 as f64);
    let fy = uv.v - T::of(y0 as f64);
    let one = T::one();
    Ok([
        (y0 * width + x0, (one - fx) * (one - fy)),
        (y0 * width + x1, fx * (one - fy)),
        (y1 * width + x0, (one - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

/// Bilinear blend of the four neighbors of `uv` in an `[H, W, C]` grid.
pub fn bilinear_sample<T: Scalar>(grid: &Tensor<T>, uv: PixelUV<T>) -> Result<Vec<T>> {
    let &[h, w, c] = grid.shape() else {
        return Err(Error::InvalidDimension {
            op: "bilinear_sample",
            detail: format!("expected an [H, W, C] grid, got {:?}", grid.shape()),
        });
    };
    let taps = bilinear_taps(uv, w, h)?;
    let mut out = vec![T::zero(); c];
    for (texel, weight) in taps {
        let row = &grid.data()[texel * c..(texel + 1) * c];
        for (o, &g) in out.iter_mut().zip(row) {
            *o += weight * g;
        }
    }
    Ok(out)
}

/// Unit vector from the camera center toward `p`.
pub fn view_direction<T: Scalar>(cam: &Camera<T>, p: Vec3<T>) -> Result<Vec3<T>> {
    normalize(sub(p, cam.center))
}

fn check_bounds<T: Scalar>(t_n: T, t_f: T, n: usize) -> Result<()> {
    if n == 0 || !(t_n < t_f) || !t_n.is_finite() || !t_f.is_finite() {
        return Err(Error::Contract(format!(
            "need N >= 1 and finite t_n < t_f, got N={n}, [{t_n}, {t_f}]"
        )));
    }
    Ok(())
}

/// One uniform depth per bin of `[t_n, t_f]` split into `n` equal bins.
pub fn sample_points_stratified<T: Scalar, R: Rng>(t_n: T, t_f: T, n: usize, rng: &mut R) -> Result<Vec<T>> {
    check_bounds(t_n, t_f, n)?;
    let delta = (t_f - t_n) / T::of(n as f64);
    Ok((0..n)
        .map(|i| t_n + (T::of(i as f64) + T::of(rng.gen::<f64>())) * delta)
        .collect())
}

/// Bin midpoints of `[t_n, t_f]` split into `n` equal bins.
pub fn sample_points_midpoint<T: Scalar>(t_n: T, t_f: T, n: usize) -> Result<Vec<T>> {
    check_bounds(t_n, t_f, n)?;
    let delta = (t_f - t_n) / T::of(n as f64);
    Ok((0..n).map(|i| t_n + (T::of(i as f64) + T::of(0.5)) * delta).collect())
}

/// Translation distance plus `lambda` times the geodesic rotation angle.
///
/// The angle is computed as `2·asin(‖R_a − R_b‖_F / 2√2)`, which equals
/// `acos((tr(R_aᵀR_b) − 1) / 2)` but stays accurate for nearly equal
/// rotations.
pub fn pose_difference<T: Scalar>(a: &Camera<T>, b: &Camera<T>, lambda: T) -> T {
    let mut chord2 = T::zero();
    for i in 0..3 {
        for k in 0..3 {
            let d = a.rotation[i][k] - b.rotation[i][k];
            chord2 += d * d;
        }
    }
    let s = (chord2.sqrt() / T::of(8f64.sqrt())).min(T::one());
    norm(sub(a.center, b.center)) + lambda * T::of(2.0) * s.asin()
}

/// Camera entry of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    /// Camera-to-world rotation, row-major.
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
    pub image: String,
}

impl CameraRecord {
    pub fn from_camera<T: Scalar>(cam: &Camera<T>, image: impl Into<String>) -> Self {
        CameraRecord {
            fx: cam.fx.as_f64(),
            fy: cam.fy.as_f64(),
            cx: cam.cx.as_f64(),
            cy: cam.cy.as_f64(),
            width: cam.width,
            height: cam.height,
            near: cam.near.as_f64(),
            far: cam.far.as_f64(),
            rotation: cam.rotation.iter().flatten().map(|v| v.as_f64()).collect(),
            translation: cam.center.iter().map(|v| v.as_f64()).collect(),
            image: image.into(),
        }
    }

    pub fn to_camera<T: Scalar>(&self) -> Result<Camera<T>> {
        if self.rotation.len() != 9 || self.translation.len() != 3 {
            return Err(Error::Contract(format!(
                "camera record needs 9 rotation and 3 translation values, got {} and {}",
                self.rotation.len(),
                self.translation.len()
            )));
        }
        let r = |i: usize| T::of(self.rotation[i]);
        Camera::new(
            T::of(self.fx),
            T::of(self.fy),
            T::of(self.cx),
            T::of(self.cy),
            [[r(0), r(1), r(2)], [r(3), r(4), r(5)], [r(6), r(7), r(8)]],
            [T::of(self.translation[0]), T::of(self.translation[1]), T::of(self.translation[2])],
            self.width,
            self.height,
            T::of(self.near),
            T::of(self.far),
        )
    }
}
