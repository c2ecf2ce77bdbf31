//! Alpha-compositing volume rendering, the photometric loss and full-image
//! rendering.
//!
//! With `δ_i = t_{i+1} − t_i` (the last interval runs to the far bound),
//! `α_i = 1 − exp(−σ_i δ_i)` and `T_i = exp(−Σ_{j<i} σ_j δ_j)`, a ray's color
//! is `Σ T_i α_i c_i` composited over black.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{make_ray, sample_points_midpoint, sample_points_stratified, Camera};
use crate::model::{FieldModel, RayQuery, SourceView};
use crate::scalar::Scalar;
use crate::tensorgrad::{Tape, Tensor, Var};

/// Field values along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples<T> {
    pub depths: Vec<T>,
    pub sigma: Vec<T>,
    pub color: Vec<[T; 3]>,
    /// Far bound, closing the last interval.
    pub far: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub color: [T; 3],
    pub opacity: T,
    /// `T_i α_i` per sample.
    pub weights: Vec<T>,
}

/// Interval lengths for increasing `depths` closed by `far`.
pub fn deltas<T: Scalar>(depths: &[T], far: T) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(depths.len());
    for (i, &t) in depths.iter().enumerate() {
        let next = depths.get(i + 1).copied().unwrap_or(far);
        if !(next > t) && i + 1 < depths.len() {
            return Err(Error::Contract(format!(
                "sample depths must be strictly increasing, got {t} then {next}"
            )));
        }
        if !(next >= t) {
            return Err(Error::Contract(format!("last depth {t} lies beyond the far bound {far}")));
        }
        out.push(next - t);
    }
    Ok(out)
}

pub fn composite_ray<T: Scalar>(samples: &RaySamples<T>) -> Result<Composite<T>> {
    let n = samples.depths.len();
    if samples.sigma.len() != n || samples.color.len() != n {
        return Err(Error::Contract("depth, density and color counts differ".into()));
    }
    let delta = deltas(&samples.depths, samples.far)?;
    let mut optical = T::zero();
    let mut out = Composite {
        color: [T::zero(); 3],
        opacity: T::zero(),
        weights: Vec::with_capacity(n),
    };
    for i in 0..n {
        let od = samples.sigma[i] * delta[i];
        let trans = (-optical).exp();
        let w = trans * -(-od).exp_m1();
        for (o, &c) in out.color.iter_mut().zip(&samples.color[i]) {
            *o += w * c;
        }
        out.opacity += w;
        out.weights.push(w);
        optical += od;
    }
    Ok(out)
}

/// Tape version of [`composite_ray`] for a batch of rays: `sigma [R, N]`,
/// `color [R, N, 3]` and constant intervals `deltas [R, N]` give composited
/// colors `[R, 3]` and opacities `[R]`.
pub fn composite_batch<T: Scalar>(
    tape: &mut Tape<T>,
    sigma: Var,
    color: Var,
    deltas: &Tensor<T>,
) -> Result<(Var, Var)> {
    let s = tape.shape(sigma).to_vec();
    if s.len() != 2 || deltas.shape() != s.as_slice() || tape.shape(color) != [s[0], s[1], 3] {
        return Err(Error::Shape {
            op: "composite_batch",
            left: s,
            right: tape.shape(color).to_vec(),
        });
    }
    let d = tape.constant(deltas.clone());
    let od = tape.mul(sigma, d)?;
    let neg = tape.scale(od, -T::one())?;
    let keep = tape.exp(neg)?;
    let alpha = tape.affine(keep, -T::one(), T::one())?;
    let acc = tape.cumsum_exclusive(od)?;
    let acc = tape.scale(acc, -T::one())?;
    let trans = tape.exp(acc)?;
    let w = tape.mul(trans, alpha)?;
    let weighted = tape.mul_rows(color, w)?;
    let rgb = tape.sum_axis(weighted, 1)?;
    let opacity = tape.sum_axis(w, 1)?;
    Ok((rgb, opacity))
}

/// `Σ_r ‖pred_r − gt_r‖²`.
pub fn rendering_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::Contract(format!(
            "predicted colors {:?} and targets {:?} differ in shape",
            tape.shape(pred),
            gt.shape()
        )));
    }
    let g = tape.constant(gt.clone());
    let diff = tape.sub(pred, g)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum(sq)
}

/// Float image, row-major `[H, W, 3]`, plus per-pixel opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage<T> {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<T>,
    pub opacity: Vec<T>,
}

impl<T: Scalar> RenderedImage<T> {
    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Values clamped to `[0, 1]` as an `[H, W, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.rgb.iter().map(|&v| v.max(T::zero()).min(T::one())).collect(),
        )
        .expect("image buffer matches its size")
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| quantize(v.as_f64())).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(path, self.width, self.height, &self.to_rgb8())
    }
}

/// `round(255·clamp(v, 0, 1))`.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn save_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(
        path,
        rgb,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a PNG as `[H, W, 3]` values in `[0, 1]`.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Tensor::new(
        vec![h as usize, w as usize, 3],
        rgb.into_raw().into_iter().map(|b| T::of(b as f64 / 255.0)).collect(),
    )
}

/// Anything that can report density and color along a batch of rays.
pub trait RayField<T: Scalar> {
    fn evaluate(&self, queries: &[RayQuery<T>]) -> Result<Vec<RaySamples<T>>>;

    /// Rays handed to one [`evaluate`](Self::evaluate) call.
    fn chunk_size(&self) -> usize {
        1024
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Midpoint,
    Stratified { seed: u64 },
}

/// Ray queries for every pixel of `cam`, row-major, with `n` samples in
/// `[near, far]` each.
pub fn pixel_queries<T: Scalar>(cam: &Camera<T>, n: usize, sampling: Sampling) -> Result<Vec<RayQuery<T>>> {
    let mut rng = match sampling {
        Sampling::Stratified { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Midpoint => None,
    };
    let mut out = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let depths = match rng.as_mut() {
                Some(r) => sample_points_stratified(cam.near, cam.far, n, r)?,
                None => sample_points_midpoint(cam.near, cam.far, n)?,
            };
            out.push(RayQuery {
                ray: make_ray(cam, T::of(x as f64), T::of(y as f64)),
                depths,
                near: cam.near,
                far: cam.far,
            });
        }
    }
    Ok(out)
}

pub fn render_image<T: Scalar, F: RayField<T> + ?Sized>(
    cam: &Camera<T>,
    field: &F,
    n: usize,
    sampling: Sampling,
) -> Result<RenderedImage<T>> {
    let queries = pixel_queries(cam, n, sampling)?;
    let mut img = RenderedImage {
        width: cam.width,
        height: cam.height,
        rgb: Vec::with_capacity(queries.len() * 3),
        opacity: Vec::with_capacity(queries.len()),
    };
    for chunk in queries.chunks(field.chunk_size().max(1)) {
        for samples in field.evaluate(chunk)? {
            let c = composite_ray(&samples)?;
            img.rgb.extend_from_slice(&c.color);
            img.opacity.push(c.opacity);
        }
    }
    Ok(img)
}

/// The model conditioned on a fixed set of source views, with source
/// features computed once up front.
pub struct ConditionedField<'a, T> {
    model: &'a FieldModel<T>,
    sources: &'a [SourceView<T>],
    features: Vec<Tensor<T>>,
    chunk: usize,
}

impl<'a, T: Scalar> ConditionedField<'a, T> {
    pub fn new(model: &'a FieldModel<T>, sources: &'a [SourceView<T>]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::NoSourceViews);
        }
        Ok(ConditionedField {
            model,
            sources,
            features: model.feature_maps(sources)?,
            chunk: 64,
        })
    }

    pub fn with_chunk_size(mut self, rays: usize) -> Self {
        self.chunk = rays.max(1);
        self
    }
}

impl<T: Scalar> RayField<T> for ConditionedField<'_, T> {
    fn evaluate(&self, queries: &[RayQuery<T>]) -> Result<Vec<RaySamples<T>>> {
        let mut tape = Tape::new();
        let feats: Vec<Var> = self.features.iter().map(|f| tape.constant(f.clone())).collect();
        let out = self.model.query_field(&mut tape, &feats, self.sources, queries)?;
        let sigma = tape.value(out.sigma).data();
        let color = tape.value(out.color).data();
        let n = queries.first().map_or(0, |q| q.depths.len());
        Ok(queries
            .iter()
            .enumerate()
            .map(|(r, q)| RaySamples {
                depths: q.depths.clone(),
                sigma: sigma[r * n..(r + 1) * n].to_vec(),
                color: (0..n)
                    .map(|i| {
                        let k = (r * n + i) * 3;
                        [color[k], color[k + 1], color[k + 2]]
                    })
                    .collect(),
                far: q.far,
            })
            .collect())
    }

    fn chunk_size(&self) -> usize {
        self.chunk
    }
}

/// Renders `cam` from the model conditioned on `sources`.
pub fn render_view<T: Scalar>(
    model: &FieldModel<T>,
    sources: &[SourceView<T>],
    cam: &Camera<T>,
    n: usize,
    sampling: Sampling,
) -> Result<RenderedImage<T>> {
    let field = ConditionedField::new(model, sources)?;
    render_image(cam, &field, n, sampling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{focal_from_fov, Camera};
    use crate::model::ModelConfig;
    use crate::tensorgrad::{finite_diff_check, ParamStore};
    use proptest::prelude::*;
    use rand::Rng;

    fn uniform(sigma: f64, c: [f64; 3], n: usize, near: f64, far: f64) -> RaySamples<f64> {
        RaySamples {
            depths: sample_points_midpoint(near, far, n).unwrap(),
            sigma: vec![sigma; n],
            color: vec![c; n],
            far,
        }
    }

    #[test]
    fn empty_space_is_black() {
        let c = composite_ray(&uniform(0.0, [1.0, 0.5, 0.2], 16, 2.0, 6.0)).unwrap();
        assert_eq!(c.color, [0.0; 3]);
        assert_eq!(c.opacity, 0.0);
    }

    #[test]
    fn opaque_front_sample_dominates() {
        let mut s = uniform(0.0, [0.0; 3], 8, 2.0, 6.0);
        s.sigma[0] = 1e6;
        s.color[0] = [0.2, 0.4, 0.9];
        s.color[3] = [1.0; 3];
        s.sigma[3] = 5.0;
        let c = composite_ray(&s).unwrap();
        assert!((c.opacity - 1.0).abs() < 1e-12);
        for (a, b) in c.color.iter().zip([0.2, 0.4, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_matches_closed_form() {
        let (sigma, c) = (0.7, [0.9, 0.3, 0.5]);
        let s = uniform(sigma, c, 256, 2.0, 6.0);
        let got = composite_ray(&s).unwrap();
        let expect = 1.0 - (-sigma * (6.0 - 2.0 - 2.0 / 256.0)).exp();
        // midpoint samples start half a bin in, so the covered length is
        // shorter by half a bin
        for ch in 0..3 {
            assert!((got.color[ch] - c[ch] * expect).abs() < 1e-12);
            assert!((got.color[ch] - c[ch] * (1.0 - (-sigma * 4.0f64).exp())).abs() < 1e-3);
        }
    }

    #[test]
    fn quadrature_error_shrinks_with_more_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = |n: usize, rng: &mut ChaCha8Rng| {
            let depths = sample_points_stratified(2.0, 6.0, n, rng).unwrap();
            let s = RaySamples {
                sigma: vec![0.7; n],
                color: vec![[1.0; 3]; n],
                far: 6.0,
                depths,
            };
            let c = composite_ray(&s).unwrap();
            (c.color[0] - (1.0 - (-0.7f64 * 4.0).exp())).abs()
        };
        let mut prev = f64::INFINITY;
        for n in [16, 32, 64, 128, 256] {
            let e: f64 = (0..20).map(|_| err(n, &mut rng)).sum::<f64>() / 20.0;
            assert!(e < prev, "error did not shrink at N={n}: {e} vs {prev}");
            prev = e;
        }
    }

    #[test]
    fn decreasing_depths_rejected() {
        let mut s = uniform(1.0, [1.0; 3], 4, 2.0, 6.0);
        s.depths.swap(1, 2);
        assert!(matches!(composite_ray(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_matches_plain_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, n) = (3, 5);
        let rays: Vec<RaySamples<f64>> = (0..r)
            .map(|_| {
                let depths = sample_points_stratified(1.0, 3.0, n, &mut rng).unwrap();
                RaySamples {
                    depths,
                    sigma: (0..n).map(|_| rng.gen_range(0.0..3.0)).collect(),
                    color: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
                    far: 3.0,
                }
            })
            .collect();
        let dl: Vec<f64> = rays.iter().flat_map(|s| deltas(&s.depths, s.far).unwrap()).collect();
        let dl = Tensor::new(vec![r, n], dl).unwrap();
        let mut params = ParamStore::new(0);
        params
            .insert("sigma", Tensor::new(vec![r, n], rays.iter().flat_map(|s| s.sigma.clone()).collect()).unwrap())
            .unwrap();
        params
            .insert(
                "color",
                Tensor::new(vec![r, n, 3], rays.iter().flat_map(|s| s.color.iter().flatten().copied()).collect())
                    .unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let sv = tape.param(&params, "sigma").unwrap();
        let cv = tape.param(&params, "color").unwrap();
        let (rgb, op) = composite_batch(&mut tape, sv, cv, &dl).unwrap();
        for (i, s) in rays.iter().enumerate() {
            let c = composite_ray(s).unwrap();
            for ch in 0..3 {
                assert!((tape.value(rgb).get(&[i, ch]) - c.color[ch]).abs() < 1e-14);
            }
            assert!((tape.value(op).data()[i] - c.opacity).abs() < 1e-14);
        }
        let gt = Tensor::from_fn(&[r, 3], |i| (i as f64 * 0.13) % 1.0);
        let report = finite_diff_check(
            |tape: &mut Tape<f64>, p| {
                let sv = tape.param(p, "sigma")?;
                let cv = tape.param(p, "color")?;
                let (rgb, _) = composite_batch(tape, sv, cv, &dl)?;
                rendering_loss(tape, rgb, &gt)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.variable(Tensor::new(vec![1, 3], vec![0.6, 0.2, 0.3]).unwrap());
        let gt = Tensor::new(vec![1, 3], vec![0.5, 0.2, 0.3]).unwrap();
        let l = rendering_loss(&mut tape, p, &gt).unwrap();
        assert!((tape.value(l).item() - 0.01).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        let gp = g.get(p).unwrap().data();
        assert!((gp[0] - 0.2).abs() < 1e-15 && gp[1] == 0.0);
        let pv = tape.value(p).clone();
        let same = rendering_loss(&mut tape, p, &pv).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let wrong = Tensor::zeros(&[2, 3]);
        assert!(matches!(rendering_loss(&mut tape, p, &wrong), Err(Error::Contract(_))));
    }

    fn tiny_model() -> FieldModel<f64> {
        FieldModel::new(ModelConfig {
            blocks: 1,
            heads: 2,
            d_k: 4,
            d_ffn: 4,
            c_f: 2,
            extractor_hidden: 2,
            color_levels: 1,
            window: 1,
            depth_encoding_scale: 4.0,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_sources(count: usize, size: usize) -> (Vec<SourceView<f64>>, Camera<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = focal_from_fov(50.0, size);
        let src = (0..count)
            .map(|i| {
                let a = 0.5 * i as f64 - 0.3;
                let eye = [3.0 * a.sin(), 0.3, -3.0 * a.cos()];
                let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], f, size, size, 1.0, 5.0).unwrap();
                let img = Tensor::from_fn(&[size, size, 3], |_| rng.gen_range(0.0..1.0));
                SourceView::new(img, cam).unwrap()
            })
            .collect();
        let target = Camera::look_at([0.4, 0.2, -3.0], [0.0; 3], [0.0, 1.0, 0.0], f, 2, 2, 2.0, 4.0).unwrap();
        (src, target)
    }

    #[test]
    fn render_small_image_is_deterministic_and_in_range() {
        let model = tiny_model();
        let (src, target) = tiny_sources(3, 6);
        let a = render_view(&model, &src, &target, 8, Sampling::Stratified { seed: 4 }).unwrap();
        let b = render_view(&model, &src, &target, 8, Sampling::Stratified { seed: 4 }).unwrap();
        assert_eq!(a, b);
        assert!(a.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.to_tensor().shape(), &[2, 2, 3]);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // 2 views of 2×2 pixels, 4 samples per ray, every parameter checked
        let model = tiny_model();
        let (src, target) = tiny_sources(2, 2);
        let queries = pixel_queries(&target, 4, Sampling::Stratified { seed: 1 }).unwrap();
        let dl: Vec<f64> = queries.iter().flat_map(|q| deltas(&q.depths, q.far).unwrap()).collect();
        let dl = Tensor::new(vec![queries.len(), 4], dl).unwrap();
        let gt = Tensor::from_fn(&[queries.len(), 3], |i| (i as f64 * 0.37) % 1.0);
        let config = model.config().clone();
        let report = finite_diff_check(
            |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
                let m = FieldModel::from_params(config.clone(), p.clone())?;
                let feats = m.encode_sources(tape, &src)?;
                let out = m.query_field(tape, &feats, &src, &queries)?;
                let (rgb, _) = composite_batch(tape, out.sigma, out.color, &dl)?;
                rendering_loss(tape, rgb, &gt)
            },
            model.params(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.comparisons >= model.params().len());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = RenderedImage {
            width: 3,
            height: 2,
            rgb: (0..18).map(|i| i as f64 / 17.0).collect::<Vec<f64>>(),
            opacity: vec![1.0; 6],
        };
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = load_png::<f64>(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3, 3]);
        for (a, b) in back.data().iter().zip(&img.rgb) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(matches!(load_png::<f64>(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn weights_are_a_subprobability(
            sigma in proptest::collection::vec(0.0f64..50.0, 1..20),
        ) {
            let n = sigma.len();
            let s = RaySamples {
                depths: sample_points_midpoint(1.0, 3.0, n).unwrap(),
                sigma: sigma.clone(),
                color: vec![[1.0; 3]; n],
                far: 3.0,
            };
            let c = composite_ray(&s).unwrap();
            let total: f64 = c.weights.iter().sum();
            prop_assert!(c.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            let dl = deltas(&s.depths, 3.0).unwrap();
            let od: f64 = sigma.iter().zip(&dl).map(|(a, b)| a * b).sum();
            prop_assert!((1.0 - total - (-od).exp()).abs() < 1e-12);
            let mut acc = 0.0f64;
            let mut prev_t = 1.0;
            for (sg, d) in sigma.iter().zip(&dl) {
                let t = (-acc).exp();
                prop_assert!(t <= prev_t);
                prev_t = t;
                acc += sg * d;
            }
        }
    }
}
