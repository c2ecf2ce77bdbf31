//! The conditioned radiance field.
//!
//! A query point is projected into every source view to retrieve a feature,
//! a color and a viewing direction. The per-view tokens attend jointly with a
//! learnable density token (density view decoder), the density token is
//! refined against its neighbors along the ray (density ray decoder), a color
//! query cross-attends to the refined view tokens with source colors as
//! values (color view decoder), and the result is refined along the ray once
//! more (color ray decoder).
//!
//! All stages are batched over every sample of every ray in a query.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{self, bilinear_taps, project_point, view_direction, Camera, Ray, Vec3};
use crate::nnblocks::{frequency_embedding, EncoderBlock, FeatureExtractor, Linear};
use crate::scalar::Scalar;
use crate::tensorgrad::{Activation, BilinearTap, ParamStore, Tape, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder blocks per decoder.
    pub blocks: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_ffn: usize,
    /// Feature channels produced by the extractor.
    pub c_f: usize,
    pub extractor_hidden: usize,
    /// Frequency levels used to embed source colors.
    pub color_levels: usize,
    /// Window half-width along the ray.
    pub window: usize,
    /// Multiplier applied to normalized depth before its sinusoid encoding.
    pub depth_encoding_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 2,
            heads: 4,
            d_k: 64,
            d_ffn: 128,
            c_f: 16,
            extractor_hidden: 16,
            color_levels: 4,
            window: 2,
            depth_encoding_scale: 32.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return fail("at least one block per decoder is required".into());
        }
        if self.heads == 0 || self.d_k % self.heads != 0 {
            return fail(format!("d_k = {} must be divisible by heads = {}", self.d_k, self.heads));
        }
        if self.d_k % 4 != 0 {
            return fail(format!("d_k = {} must be divisible by 4 for the ray position encoding", self.d_k));
        }
        if self.d_ffn == 0 || self.c_f == 0 || self.extractor_hidden == 0 || self.color_levels == 0 {
            return fail("widths and color levels must be positive".into());
        }
        if !(self.depth_encoding_scale.is_finite() && self.depth_encoding_scale > 0.0) {
            return fail("depth encoding scale must be positive".into());
        }
        Ok(())
    }

    /// Width of `γ(c)` for an RGB color.
    pub fn color_embedding_width(&self) -> usize {
        6 * self.color_levels
    }

    fn source_input_width(&self) -> usize {
        self.c_f + self.color_embedding_width() + 4
    }
}

/// Parameter layout of every stage, derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
struct Layout {
    extractor: FeatureExtractor,
    source_embed: Linear,
    density_token: String,
    density_view: Vec<EncoderBlock>,
    density_seed: Linear,
    density_ray: Vec<EncoderBlock>,
    density_head: Linear,
    color_fc: Linear,
    color_query: Linear,
    color_key: Linear,
    color_view: Vec<EncoderBlock>,
    color_ray: Vec<EncoderBlock>,
    color_head: Linear,
}

impl Layout {
    fn new(c: &ModelConfig) -> Result<Self> {
        c.validate()?;
        let d = c.d_k;
        let stack = |prefix: &str| -> Result<Vec<EncoderBlock>> {
            (0..c.blocks)
                .map(|i| EncoderBlock::new(&format!("{prefix}.block{i}"), c.heads, d, c.d_ffn))
                .collect()
        };
        let color_view = (0..c.blocks)
            .map(|i| {
                EncoderBlock::cross(
                    &format!("color_view.block{i}"),
                    c.heads,
                    d,
                    c.d_ffn,
                    d + 3,
                    c.color_embedding_width(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout {
            extractor: FeatureExtractor::new("extractor", c.extractor_hidden, c.c_f),
            source_embed: Linear::new("source_embed", c.source_input_width(), d),
            density_token: "density_view.query_token".into(),
            density_view: stack("density_view")?,
            density_seed: Linear::new("density_ray.seed", d + 3, d),
            density_ray: stack("density_ray")?,
            density_head: Linear::new("density_ray.head", d, 1),
            color_fc: Linear::new("color_view.fc", d, d),
            color_query: Linear::new("color_view.query", d + 3, d),
            color_key: Linear::new("color_view.key", d, d),
            color_view,
            color_ray: stack("color_ray")?,
            color_head: Linear::new("color_ray.head", d, 3),
        })
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d_k: usize) -> Result<()> {
        self.extractor.init(store, rng)?;
        self.source_embed.init(store, rng)?;
        store.insert_uniform(rng, &self.density_token, &[d_k], d_k)?;
        for b in &self.density_view {
            b.init(store, rng)?;
        }
        self.density_seed.init(store, rng)?;
        for b in &self.density_ray {
            b.init(store, rng)?;
        }
        self.density_head.init(store, rng)?;
        self.color_fc.init(store, rng)?;
        self.color_query.init(store, rng)?;
        self.color_key.init(store, rng)?;
        for b in &self.color_view {
            b.init(store, rng)?;
        }
        for b in &self.color_ray {
            b.init(store, rng)?;
        }
        self.color_head.init(store, rng)
    }
}

/// A posed source image. Values are in `[0, 1]`, shape `[H, W, 3]`.
#[derive(Clone, Debug)]
pub struct SourceView<T> {
    pub image: Tensor<T>,
    pub camera: Camera<T>,
}

impl<T: Scalar> SourceView<T> {
    pub fn new(image: Tensor<T>, camera: Camera<T>) -> Result<Self> {
        if image.shape() != [camera.height, camera.width, 3] {
            return Err(Error::Contract(format!(
                "image shape {:?} does not match a {}×{} camera",
                image.shape(),
                camera.width,
                camera.height
            )));
        }
        Ok(SourceView { image, camera })
    }
}

/// Per-view retrievals for a batch of `P` query points against `M` views.
/// Per-view arrays are ordered point-major (`p·M + m`). Features are not
/// stored; `taps` locates them in the feature maps.
#[derive(Clone, Debug)]
pub struct PointContext<T> {
    pub points: usize,
    pub views: usize,
    pub positions: Vec<Vec3<T>>,
    /// Target viewing direction of each point's ray.
    pub target_dirs: Vec<Vec3<T>>,
    /// Retrieved source colors, zero for invalid views.
    pub colors: Vec<[T; 3]>,
    /// Unit direction from each source camera to the point, zero when invalid.
    pub source_dirs: Vec<Vec3<T>>,
    pub valid: Vec<bool>,
    pub taps: Vec<Option<BilinearTap<T>>>,
}

impl<T: Scalar> PointContext<T> {
    pub fn gather(positions: &[Vec3<T>], target_dirs: &[Vec3<T>], sources: &[SourceView<T>]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::NoSourceViews);
        }
        if positions.len() != target_dirs.len() {
            return Err(Error::Contract("one target direction per point is required".into()));
        }
        let m = sources.len();
        let n = positions.len() * m;
        let mut ctx = PointContext {
            points: positions.len(),
            views: m,
            positions: positions.to_vec(),
            target_dirs: target_dirs.to_vec(),
            colors: Vec::with_capacity(n),
            source_dirs: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
            taps: Vec::with_capacity(n),
        };
        for &p in positions {
            for (vi, src) in sources.iter().enumerate() {
                let cam = &src.camera;
                let hit = match project_point(p, cam) {
                    Ok(uv) if uv.in_bounds => Some(bilinear_taps(uv, cam.width, cam.height)?),
                    Ok(_) | Err(Error::Degenerate(_)) => None,
                    Err(e) => return Err(e),
                };
                match hit {
                    Some(texels) => {
                        let mut c = [T::zero(); 3];
                        for &(t, w) in &texels {
                            for (ch, cv) in c.iter_mut().enumerate() {
                                *cv += w * src.image.data()[t * 3 + ch];
                            }
                        }
                        ctx.colors.push(c);
                        ctx.source_dirs.push(view_direction(cam, p)?);
                        ctx.valid.push(true);
                        ctx.taps.push(Some(BilinearTap { grid: vi, texels }));
                    }
                    None => {
                        ctx.colors.push([T::zero(); 3]);
                        ctx.source_dirs.push([T::zero(); 3]);
                        ctx.valid.push(false);
                        ctx.taps.push(None);
                    }
                }
            }
        }
        Ok(ctx)
    }

    fn color_embeddings(&self, levels: usize) -> Vec<T> {
        self.colors.iter().flat_map(|c| frequency_embedding(c, levels)).collect()
    }
}

/// Ray samples to be evaluated. Depths must increase along each ray.
#[derive(Clone, Debug)]
pub struct RayQuery<T> {
    pub ray: Ray<T>,
    pub depths: Vec<T>,
    pub near: T,
    pub far: T,
}

/// Window layout shared by both ray decoders.
#[derive(Clone, Debug)]
pub struct RayWindows<T> {
    pub rays: usize,
    pub samples: usize,
    pub half_width: usize,
    /// Source row of every window slot, `[P·(2n+1)]`.
    pub indices: Vec<usize>,
    /// Depth normalized to `[0, 1]` by the ray's bounds, per sample.
    pub normalized_depth: Vec<T>,
}

impl<T: Scalar> RayWindows<T> {
    /// Edge-clamped windows of `2n+1` samples centered on every sample.
    pub fn new(queries: &[RayQuery<T>], half_width: usize) -> Result<Self> {
        let samples = queries.first().map_or(0, |q| q.depths.len());
        if samples == 0 {
            return Err(Error::Contract("ray queries need at least one sample".into()));
        }
        let mut normalized_depth = Vec::with_capacity(queries.len() * samples);
        for q in queries {
            if q.depths.len() != samples {
                return Err(Error::Contract("all rays in a query need the same sample count".into()));
            }
            if !(q.near < q.far) {
                return Err(Error::Contract(format!("invalid ray bounds [{}, {}]", q.near, q.far)));
            }
            normalized_depth.extend(q.depths.iter().map(|&t| (t - q.near) / (q.far - q.near)));
        }
        let w = 2 * half_width + 1;
        let mut indices = Vec::with_capacity(queries.len() * samples * w);
        for r in 0..queries.len() {
            for i in 0..samples {
                for j in 0..w {
                    let k = (i + j).saturating_sub(half_width).min(samples - 1);
                    indices.push(r * samples + k);
                }
            }
        }
        Ok(RayWindows {
            rays: queries.len(),
            samples,
            half_width,
            indices,
            normalized_depth,
        })
    }

    pub fn width(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn points(&self) -> usize {
        self.rays * self.samples
    }

    /// Position encoding added to every window token: the first half of the
    /// channels encodes the slot index `0..2n`, the second half the
    /// normalized depth of the sample in that slot times `depth_scale`.
    pub fn encoding(&self, d_k: usize, depth_scale: f64) -> Tensor<T> {
        let half = d_k / 2;
        let w = self.width();
        let mut out = Vec::with_capacity(self.indices.len() * d_k);
        for (slot, &src) in self.indices.iter().enumerate() {
            sinusoid_into(&mut out, (slot % w) as f64, half);
            sinusoid_into(&mut out, self.normalized_depth[src].as_f64() * depth_scale, half);
        }
        Tensor::new(vec![self.indices.len(), d_k], out.into_iter().map(T::of).collect()).expect("encoding size")
    }
}

fn sinusoid_into(out: &mut Vec<f64>, pos: f64, d: usize) {
    for j in 0..d {
        let a = pos / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        out.push(if j % 2 == 0 { a.sin() } else { a.cos() });
    }
}

/// Density and color at every sample: `sigma [R, N]`, `color [R, N, 3]`.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    pub sigma: Var,
    pub color: Var,
}

#[derive(Clone, Debug)]
pub struct FieldModel<T> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<T>,
}

/// Structured-text sidecar written next to the parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub samples_per_ray: usize,
    pub iterations: usize,
    /// SHA-256 of the parameter file.
    pub params_sha256: String,
}

pub const PARAMS_FILE: &str = "params.tnrf";
pub const META_FILE: &str = "model.toml";

impl<T: Scalar> FieldModel<T> {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let layout = Layout::new(&config)?;
        let mut params = ParamStore::new(config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        layout.init(&mut params, &mut rng, config.d_k)?;
        Ok(FieldModel { config, layout, params })
    }

    /// Wraps existing parameters, checking that names and shapes match the
    /// architecture exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = FieldModel::<T>::new(config.clone())?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                None => return Err(Error::UnknownParameter(format!("missing {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Shape {
                        op: "load parameters",
                        left: p.shape().to_vec(),
                        right: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::UnknownParameter(extra.to_string()));
        }
        Ok(FieldModel {
            config,
            layout: reference.layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Writes `params.tnrf` and `model.toml` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, samples_per_ray: usize, iterations: usize) -> Result<CheckpointMeta> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = self.params.to_bytes();
        let params_path = dir.join(PARAMS_FILE);
        std::fs::write(&params_path, &bytes).map_err(|e| Error::io(&params_path, e))?;
        let meta = CheckpointMeta {
            model: self.config.clone(),
            samples_per_ray,
            iterations,
            params_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let meta_path = dir.join(META_FILE);
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        Ok(meta)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let params_path = dir.join(PARAMS_FILE);
        let bytes = std::fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != meta.params_sha256 {
            return Err(Error::format(
                &params_path,
                format!("checksum {digest} does not match sidecar {}", meta.params_sha256),
            ));
        }
        let params = ParamStore::from_bytes(&bytes, meta.model.seed).map_err(|d| Error::format(&params_path, d))?;
        Ok((FieldModel::from_params(meta.model.clone(), params)?, meta))
    }

    /// Runs the shared extractor over every source image on `tape`,
    /// returning one `[H, W, C_f]` feature map per view.
    pub fn encode_sources(&self, tape: &mut Tape<T>, sources: &[SourceView<T>]) -> Result<Vec<Var>> {
        sources
            .iter()
            .map(|s| {
                let img = tape.constant(s.image.clone());
                self.layout.extractor.forward(tape, &self.params, img)
            })
            .collect()
    }

    /// Feature maps as plain tensors, for inference.
    pub fn feature_maps(&self, sources: &[SourceView<T>]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.encode_sources(&mut tape, sources)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// `x₀ᵐ = Linear(f ⊙ γ(c) ⊙ d_src ⊙ (d_src·d_tgt))`, zeroed for invalid
    /// views. Returns `[P·M, d_k]`.
    pub fn build_source_embeddings(&self, tape: &mut Tape<T>, ctx: &PointContext<T>, features: &[Var]) -> Result<Var> {
        if ctx.views == 0 {
            return Err(Error::NoSourceViews);
        }
        if features.len() != ctx.views {
            return Err(Error::Contract(format!(
                "{} feature maps for {} views",
                features.len(),
                ctx.views
            )));
        }
        let f = tape.bilinear_gather(features, ctx.taps.clone())?;
        let gw = self.config.color_embedding_width();
        let gamma = ctx.color_embeddings(self.config.color_levels);
        let rows = ctx.points * ctx.views;
        let mut rest = Vec::with_capacity(rows * (gw + 4));
        for r in 0..rows {
            rest.extend_from_slice(&gamma[r * gw..(r + 1) * gw]);
            let ds = ctx.source_dirs[r];
            rest.extend_from_slice(&ds);
            rest.push(geometry::dot(ds, ctx.target_dirs[r / ctx.views]));
        }
        let rest = tape.constant(Tensor::new(vec![rows, gw + 4], rest)?);
        let x = tape.concat(&[f, rest], 1)?;
        let x = self.layout.source_embed.forward(tape, &self.params, x)?;
        let mask = tape.constant(Tensor::new(
            vec![rows],
            ctx.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
        )?);
        tape.mul_rows(x, mask)
    }

    /// Self-attention over `[x₀^σ; x₀¹ … x₀ᴹ]` per point. Returns the density
    /// token `[P, d_k]` and the view tokens `[P·M, d_k]`.
    pub fn density_view_decode(&self, tape: &mut Tape<T>, tokens: Var, ctx: &PointContext<T>) -> Result<(Var, Var)> {
        let (p, m, d) = (ctx.points, ctx.views, self.config.d_k);
        let q = tape.param(&self.params, &self.layout.density_token)?;
        let q = tape.gather_rows(q, &vec![0; p])?;
        let q = tape.reshape(q, &[p, 1, d])?;
        let views = tape.reshape(tokens, &[p, m, d])?;
        let mut x = tape.concat(&[q, views], 1)?;
        let mut mask = Vec::with_capacity(p * (m + 1));
        for pv in ctx.valid.chunks(m) {
            mask.push(true);
            mask.extend_from_slice(pv);
        }
        for b in &self.layout.density_view {
            x = b.forward(tape, &self.params, x, None, Some(&mask))?;
        }
        let sigma_idx: Vec<usize> = (0..p).map(|i| i * (m + 1)).collect();
        let view_idx: Vec<usize> = (0..p).flat_map(|i| (1..=m).map(move |j| i * (m + 1) + j)).collect();
        Ok((tape.gather_rows(x, &sigma_idx)?, tape.gather_rows(x, &view_idx)?))
    }

    /// `σ₀ = FC(x_L^σ ⊙ xyz)`, `[P, d_k]`.
    pub fn density_seed(&self, tape: &mut Tape<T>, sigma_token: Var, ctx: &PointContext<T>) -> Result<Var> {
        let xyz = tape.constant(Tensor::new(
            vec![ctx.points, 3],
            ctx.positions.iter().flatten().copied().collect(),
        )?);
        let x = tape.concat(&[sigma_token, xyz], 1)?;
        self.layout.density_seed.forward(tape, &self.params, x)
    }

    fn ray_decode(&self, tape: &mut Tape<T>, blocks: &[EncoderBlock], reps: Var, win: &RayWindows<T>) -> Result<Var> {
        let (p, d, w) = (win.points(), self.config.d_k, win.width());
        if tape.shape(reps) != [p, d] {
            return Err(Error::Contract(format!(
                "ray decoder expects [{p}, {d}] representations, got {:?}",
                tape.shape(reps)
            )));
        }
        let x = tape.gather_rows(reps, &win.indices)?;
        let pos = tape.constant(win.encoding(d, self.config.depth_encoding_scale));
        let x = tape.add(x, pos)?;
        let mut x = tape.reshape(x, &[p, w, d])?;
        for b in blocks {
            x = b.forward(tape, &self.params, x, None, None)?;
        }
        let centers: Vec<usize> = (0..p).map(|i| i * w + win.half_width).collect();
        tape.gather_rows(x, &centers)
    }

    /// Refines density seeds `[P, d_k]` over their windows. Returns the
    /// center tokens `σ_L [P, d_k]` and `σ = softplus(Linear(σ_L))`, `[P, 1]`.
    pub fn density_ray_decode(&self, tape: &mut Tape<T>, seeds: Var, win: &RayWindows<T>) -> Result<(Var, Var)> {
        let s = self.ray_decode(tape, &self.layout.density_ray, seeds, win)?;
        let h = self.layout.density_head.forward(tape, &self.params, s)?;
        Ok((s, tape.activation(h, Activation::Softplus)?))
    }

    /// Query `Linear(FC(σ_L) ⊙ d_tgt)` cross-attends to keys
    /// `Linear(x_Lᵐ) ⊙ d_srcᵐ` with values `γ(c_srcᵐ)`; keys and values are
    /// shared by every block. Returns `[P, d_k]`.
    pub fn color_view_decode(
        &self,
        tape: &mut Tape<T>,
        sigma_l: Var,
        view_tokens: Var,
        ctx: &PointContext<T>,
    ) -> Result<Var> {
        let (p, m, d) = (ctx.points, ctx.views, self.config.d_k);
        let dirs = tape.constant(Tensor::new(
            vec![p, 3],
            ctx.target_dirs.iter().flatten().copied().collect(),
        )?);
        let y = self.layout.color_fc.forward(tape, &self.params, sigma_l)?;
        let y = tape.concat(&[y, dirs], 1)?;
        let y = self.layout.color_query.forward(tape, &self.params, y)?;
        let mut y = tape.reshape(y, &[p, 1, d])?;

        let k = self.layout.color_key.forward(tape, &self.params, view_tokens)?;
        let src_dirs = tape.constant(Tensor::new(
            vec![p * m, 3],
            ctx.source_dirs.iter().flatten().copied().collect(),
        )?);
        let k = tape.concat(&[k, src_dirs], 1)?;
        let k = tape.reshape(k, &[p, m, d + 3])?;
        let gw = self.config.color_embedding_width();
        let v = tape.constant(Tensor::new(vec![p, m, gw], ctx.color_embeddings(self.config.color_levels))?);
        for b in &self.layout.color_view {
            y = b.forward(tape, &self.params, y, Some((k, v)), Some(&ctx.valid))?;
        }
        tape.reshape(y, &[p, d])
    }

    /// Refines color embeddings `[P, d_k]` over their windows and returns
    /// `c = sigmoid(Linear(z_L))`, `[P, 3]`.
    pub fn color_ray_decode(&self, tape: &mut Tape<T>, reps: Var, win: &RayWindows<T>) -> Result<Var> {
        let z = self.ray_decode(tape, &self.layout.color_ray, reps, win)?;
        let h = self.layout.color_head.forward(tape, &self.params, z)?;
        tape.activation(h, Activation::Sigmoid)
    }

    /// Evaluates the field at every sample of every query ray.
    pub fn query_field(
        &self,
        tape: &mut Tape<T>,
        features: &[Var],
        sources: &[SourceView<T>],
        queries: &[RayQuery<T>],
    ) -> Result<FieldOutput> {
        if sources.is_empty() {
            return Err(Error::NoSourceViews);
        }
        let win = RayWindows::new(queries, self.config.window)?;
        let mut positions = Vec::with_capacity(win.points());
        let mut dirs = Vec::with_capacity(win.points());
        for q in queries {
            for &t in &q.depths {
                positions.push(q.ray.at(t));
                dirs.push(q.ray.direction);
            }
        }
        let ctx = PointContext::gather(&positions, &dirs, sources)?;
        let x0 = self.build_source_embeddings(tape, &ctx, features)?;
        let (sigma_tok, view_tok) = self.density_view_decode(tape, x0, &ctx)?;
        let seeds = self.density_seed(tape, sigma_tok, &ctx)?;
        let (sigma_l, sigma) = self.density_ray_decode(tape, seeds, &win)?;
        let y = self.color_view_decode(tape, sigma_l, view_tok, &ctx)?;
        let color = self.color_ray_decode(tape, y, &win)?;
        Ok(FieldOutput {
            sigma: tape.reshape(sigma, &[win.rays, win.samples])?,
            color: tape.reshape(color, &[win.rays, win.samples, 3])?,
        })
    }
}
