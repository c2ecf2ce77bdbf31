//! Seeded training loop: random target view, sampled source views, a batch
//! of pixel rays, the rendering loss and a momentum gradient step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{sample_source_views, SourceSampling};
use crate::error::{Error, Result};
use crate::geometry::{make_ray, sample_points_stratified, Camera};
use crate::model::{CheckpointMeta, FieldModel, ModelConfig, RayQuery, SourceView};
use crate::renderer::{composite_batch, deltas, rendering_loss};
use crate::scenes::{load_dataset, Dataset, Split};
use crate::tensorgrad::{Tape, Tensor};

pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "train.toml";

/// Everything a training run depends on. Serialized next to the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub rays_per_batch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Factor applied to the learning rate over the whole run; the rate at
    /// step `k` is `learning_rate · lr_decay^(k / iterations)`.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Gradients with a larger global norm are rescaled to it; `0` disables
    /// clipping.
    pub max_grad_norm: f64,
    pub samples_per_ray: usize,
    pub seed: u64,
    /// Iterations between intermediate checkpoints; `0` writes only the
    /// final one.
    pub checkpoint_interval: usize,
    pub sources: SourceSampling,
    pub model: ModelConfig,
    /// Checkpoint directory to start from instead of a fresh model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data/sphere"),
            rays_per_batch: 512,
            iterations: 2000,
            learning_rate: 0.05,
            lr_decay: 0.1,
            momentum: 0.9,
            max_grad_norm: 1.0,
            samples_per_ray: 32,
            seed: 0,
            checkpoint_interval: 500,
            sources: SourceSampling::default(),
            model: ModelConfig::default(),
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 || self.iterations == 0 || self.samples_per_ray == 0 {
            return Err(Error::Config("rays_per_batch, iterations and samples_per_ray must be >= 1".into()));
        }
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.learning_rate) || !pos(self.lr_decay) {
            return Err(Error::Config("learning_rate and lr_decay must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return Err(Error::Config("max_grad_norm must be finite and non-negative".into()));
        }
        self.sources.validate()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.dataset.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.dataset = parent.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Learning rate used at step `k`.
    pub fn learning_rate_at(&self, k: usize) -> f64 {
        self.learning_rate * self.lr_decay.powf(k as f64 / self.iterations as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean squared color error per ray at every iteration, before the update.
    pub losses: Vec<f64>,
    pub model: FieldModel<f64>,
    pub meta: CheckpointMeta,
}

/// Momentum SGD state, one velocity tensor per parameter.
struct Momentum {
    velocity: BTreeMap<String, Tensor<f64>>,
}

impl Momentum {
    fn step(&mut self, model: &mut FieldModel<f64>, grads: BTreeMap<String, Tensor<f64>>, cfg: &TrainConfig, lr: f64) {
        let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let clip = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            cfg.max_grad_norm / norm
        } else {
            1.0
        };
        let params = model.params_mut();
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(&name).expect("gradient names come from the store");
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = cfg.momentum * *vv + clip * gv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// A batch of pixel rays from `view` with stratified depths, plus their
/// ground-truth colors `[R, 3]`.
pub fn sample_ray_batch<R: Rng>(
    camera: &Camera<f64>,
    image: &Tensor<f64>,
    rays: usize,
    samples: usize,
    rng: &mut R,
) -> Result<(Vec<RayQuery<f64>>, Tensor<f64>)> {
    let mut queries = Vec::with_capacity(rays);
    let mut gt = Vec::with_capacity(rays * 3);
    for _ in 0..rays {
        let x = rng.gen_range(0..camera.width);
        let y = rng.gen_range(0..camera.height);
        queries.push(RayQuery {
            ray: make_ray(camera, x as f64, y as f64),
            depths: sample_points_stratified(camera.near, camera.far, samples, rng)?,
            near: camera.near,
            far: camera.far,
        });
        let k = (y * camera.width + x) * 3;
        gt.extend_from_slice(&image.data()[k..k + 3]);
    }
    Ok((queries, Tensor::new(vec![rays, 3], gt)?))
}

/// Loss of the model on one ray batch, recorded on `tape`.
pub fn batch_loss(
    tape: &mut Tape<f64>,
    model: &FieldModel<f64>,
    sources: &[SourceView<f64>],
    queries: &[RayQuery<f64>],
    gt: &Tensor<f64>,
) -> Result<crate::tensorgrad::Var> {
    let features = model.encode_sources(tape, sources)?;
    let out = model.query_field(tape, &features, sources, queries)?;
    let n = queries[0].depths.len();
    let mut d = Vec::with_capacity(queries.len() * n);
    for q in queries {
        d.extend(deltas(&q.depths, q.far)?);
    }
    let d = Tensor::new(vec![queries.len(), n], d)?;
    let (rgb, _) = composite_batch(tape, out.sigma, out.color, &d)?;
    let total = rendering_loss(tape, rgb, gt)?;
    tape.scale(total, 1.0 / queries.len() as f64)
}

fn train_pool(dataset: &Dataset) -> Result<Vec<usize>> {
    let pool = dataset.indices(Split::Train);
    if pool.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 train views, dataset has {}",
            pool.len()
        )));
    }
    Ok(pool)
}

/// Trains on `cfg.dataset`, writing the final checkpoint into `out`,
/// intermediate ones into `out/iter_NNNNNN`, the loss curve into
/// `out/loss.csv` and the config into `out/train.toml`. `progress` sees
/// each iteration index and loss.
pub fn train_with(cfg: &TrainConfig, out: &Path, mut progress: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset)?;
    let pool = train_pool(&dataset)?;
    let mut model = match &cfg.resume {
        Some(dir) => {
            let (m, _) = FieldModel::<f64>::load_checkpoint(dir)?;
            if m.config() != &cfg.model {
                return Err(Error::Config(format!(
                    "resume checkpoint {} was trained with a different model config",
                    dir.display()
                )));
            }
            m
        }
        None => FieldModel::new(cfg.model.clone())?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Momentum {
        velocity: BTreeMap::new(),
    };
    let mut losses = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let target = pool[rng.gen_range(0..pool.len())];
        let others: Vec<usize> = pool.iter().copied().filter(|&i| i != target).collect();
        let cams: Vec<Camera<f64>> = others.iter().map(|&i| dataset.views[i].camera.clone()).collect();
        let tv = &dataset.views[target];
        let picks = sample_source_views(&tv.camera, &cams, &cfg.sources, &mut rng)?;
        let sources = picks
            .iter()
            .map(|&p| {
                let v = &dataset.views[others[p]];
                SourceView::new(v.image.clone(), v.camera.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let (queries, gt) = sample_ray_batch(&tv.camera, &tv.image, cfg.rays_per_batch, cfg.samples_per_ray, &mut rng)?;

        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &model, &sources, &queries, &gt)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let grads = tape.param_gradients(&grads, model.params());
        opt.step(&mut model, grads, cfg, cfg.learning_rate_at(k));
        losses.push(value);
        progress(k, value);

        let done = k + 1;
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.iterations {
            model.save_checkpoint(&out.join(format!("iter_{done:06}")), cfg.samples_per_ray, done)?;
        }
    }
    let meta = model.save_checkpoint(out, cfg.samples_per_ray, cfg.iterations)?;
    write_losses(&out.join(LOSS_FILE), &losses)?;
    Ok(TrainOutcome { losses, model, meta })
}

pub fn train(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    train_with(cfg, out, |_, _| {})
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = Vec::new();
    writeln!(text, "iteration,loss").expect("write to memory");
    for (i, l) in losses.iter().enumerate() {
        writeln!(text, "{i},{l:e}").expect("write to memory");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v;
            if i >= w {
                acc -= values[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}
