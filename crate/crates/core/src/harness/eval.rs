//! Held-out evaluation with ranked source sets.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{psnr, ssim};
use super::protocol::rank_source_sets;
use crate::error::{Error, Result};
use crate::geometry::{pose_difference, Camera};
use crate::model::{CheckpointMeta, FieldModel, SourceView};
use crate::renderer::{render_image, render_view, RenderedImage, Sampling};
use crate::scenes::{Dataset, Split};

/// Checkpoint id recorded when the analytic scene stands in for a model.
pub const ORACLE_ID: &str = "analytic-oracle";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetScore {
    pub set: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: usize,
    pub set: String,
    /// Dataset indices of the ten source views.
    pub sources: Vec<usize>,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    /// SHA-256 of the evaluated parameter file, or [`ORACLE_ID`].
    pub checkpoint: String,
    pub dataset_seed: u64,
    /// SHA-256 of the model and rendering settings.
    pub config_hash: String,
    pub samples_per_ray: usize,
    /// Mean over test views, one row per source set.
    pub sets: Vec<SetScore>,
    pub views: Vec<ViewScore>,
}

impl EvalReport {
    pub fn set(&self, label: &str) -> Option<&SetScore> {
        self.sets.iter().find(|s| s.set == label)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let short = &self.checkpoint[..self.checkpoint.len().min(12)];
        let _ = writeln!(s, "scene {}  checkpoint {}  N={}", self.scene, short, self.samples_per_ray);
        let _ = writeln!(s, "{:<6}{:>9}{:>9}", "set", "PSNR", "SSIM");
        for r in &self.sets {
            let _ = writeln!(s, "{:<6}{:>9.2}{:>9.4}", r.set, r.psnr, r.ssim);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<6}{:<6}{:>9}{:>9}", "view", "set", "PSNR", "SSIM");
        for v in &self.views {
            let _ = writeln!(s, "{:<6}{:<6}{:>9.2}{:>9.4}", v.view, v.set, v.psnr, v.ssim);
        }
        s
    }

    /// Writes `<stem>.txt` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let txt = stem.with_extension("txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        let json = stem.with_extension("json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))
    }
}

/// Train views other than any whose pose equals `target` exactly.
pub fn surrounding_views(dataset: &Dataset, target: &Camera<f64>) -> Vec<usize> {
    dataset
        .indices(Split::Train)
        .into_iter()
        .filter(|&i| pose_difference(target, &dataset.views[i].camera, 1.0) != 0.0)
        .collect()
}

/// Dataset indices of the ranked source sets for test view `view`.
pub fn source_sets(dataset: &Dataset, view: usize, sets: usize, lambda: f64) -> Result<Vec<Vec<usize>>> {
    let target = &dataset.views[view].camera;
    let pool = surrounding_views(dataset, target);
    let cams: Vec<Camera<f64>> = pool.iter().map(|&i| dataset.views[i].camera.clone()).collect();
    Ok(rank_source_sets(target, &cams, sets, lambda)?
        .into_iter()
        .map(|s| s.into_iter().map(|i| pool[i]).collect())
        .collect())
}

pub fn set_label(i: usize) -> String {
    format!("S{}", i + 1)
}

/// Scores `render(target, sources)` against every test view for each
/// ranked source set. Jobs run in parallel; results are ordered.
pub fn evaluate_with<F>(
    dataset: &Dataset,
    sets: usize,
    lambda: f64,
    render: F,
) -> Result<(Vec<SetScore>, Vec<ViewScore>)>
where
    F: Fn(&Camera<f64>, &[SourceView<f64>]) -> Result<RenderedImage<f64>> + Sync,
{
    let tests = dataset.indices(Split::Test);
    if tests.is_empty() {
        return Err(Error::Config("dataset has no test views".into()));
    }
    let mut jobs = Vec::new();
    for &v in &tests {
        for (i, s) in source_sets(dataset, v, sets, lambda)?.into_iter().enumerate() {
            jobs.push((v, i, s));
        }
    }
    let views = jobs
        .par_iter()
        .map(|(v, i, set)| {
            let sources = set
                .iter()
                .map(|&s| SourceView::new(dataset.views[s].image.clone(), dataset.views[s].camera.clone()))
                .collect::<Result<Vec<_>>>()?;
            let img = render(&dataset.views[*v].camera, &sources)?.to_tensor();
            let gt = &dataset.views[*v].image;
            Ok(ViewScore {
                view: *v,
                set: set_label(*i),
                sources: set.clone(),
                psnr: psnr(&img, gt)?,
                ssim: ssim(&img, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = (0..sets)
        .map(|i| {
            let label = set_label(i);
            let rows: Vec<&ViewScore> = views.iter().filter(|v| v.set == label).collect();
            let n = rows.len() as f64;
            SetScore {
                psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
                set: label,
            }
        })
        .collect();
    Ok((summary, views))
}

fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Evaluates a trained model with midpoint sampling at the checkpoint's
/// samples per ray.
pub fn evaluate(model: &FieldModel<f64>, meta: &CheckpointMeta, dataset: &Dataset, sets: usize) -> Result<EvalReport> {
    let n = meta.samples_per_ray;
    let (summary, views) = evaluate_with(dataset, sets, 1.0, |cam, sources| {
        render_view(model, sources, cam, n, Sampling::Midpoint)
    })?;
    let settings = serde_json::to_string(&(&meta.model, n)).map_err(|e| Error::Config(e.to_string()))?;
    Ok(EvalReport {
        scene: dataset.scene.name.clone(),
        checkpoint: meta.params_sha256.clone(),
        dataset_seed: dataset.seed,
        config_hash: config_hash(&settings),
        samples_per_ray: n,
        sets: summary,
        views,
    })
}

/// Evaluates the analytic scene itself in place of a model. Source views
/// are selected as usual but cannot affect the result.
pub fn evaluate_oracle(dataset: &Dataset, sets: usize, samples: usize) -> Result<EvalReport> {
    let (summary, views) = evaluate_with(dataset, sets, 1.0, |cam, _| {
        render_image(cam, &dataset.scene, samples, Sampling::Midpoint)
    })?;
    Ok(EvalReport {
        scene: dataset.scene.name.clone(),
        checkpoint: ORACLE_ID.into(),
        dataset_seed: dataset.seed,
        config_hash: config_hash(&format!("oracle samples={samples}")),
        samples_per_ray: samples,
        sets: summary,
        views,
    })
}
