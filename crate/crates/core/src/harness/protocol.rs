//! Source-view selection for training and the ranked source sets used in
//! evaluation.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_difference, Camera};

/// Views per evaluation source set.
pub const SET_SIZE: usize = 10;

/// How many source views a training step sees and how far they may be from
/// the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSampling {
    /// Inclusive range for the number of source views `M`.
    pub views: [usize; 2],
    /// Inclusive range for the pool factor `m`: sources are drawn from the
    /// `m·M` views nearest the target.
    pub pool_factor: [usize; 2],
    /// Weight of the rotation angle in the pose difference, world units per
    /// radian.
    pub pose_lambda: f64,
}

impl Default for SourceSampling {
    fn default() -> Self {
        SourceSampling {
            views: [8, 12],
            pool_factor: [1, 5],
            pose_lambda: 1.0,
        }
    }
}

impl SourceSampling {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1];
        if !ok(self.views) || !ok(self.pool_factor) {
            return Err(Error::Config(format!(
                "source ranges must be non-empty with counts >= 1, got views {:?} and pool factor {:?}",
                self.views, self.pool_factor
            )));
        }
        if !(self.pose_lambda.is_finite() && self.pose_lambda >= 0.0) {
            return Err(Error::Config("pose_lambda must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Indices of `pool` sorted by pose difference to `target`, ties broken by
/// index.
pub fn rank_by_pose(target: &Camera<f64>, pool: &[Camera<f64>], lambda: f64) -> Vec<usize> {
    let d: Vec<f64> = pool.iter().map(|c| pose_difference(target, c, lambda)).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

/// Draws `M` and `m`, then samples `M` distinct views uniformly from the
/// `m·M` views of `pool` nearest `target`. Both counts are clamped to the
/// pool size. Returns indices into `pool`.
pub fn sample_source_views<R: Rng>(
    target: &Camera<f64>,
    pool: &[Camera<f64>],
    cfg: &SourceSampling,
    rng: &mut R,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Contract("cannot sample source views from an empty pool".into()));
    }
    let m_views = rng.gen_range(cfg.views[0]..=cfg.views[1]);
    let factor = rng.gen_range(cfg.pool_factor[0]..=cfg.pool_factor[1]);
    let ranked = rank_by_pose(target, pool, cfg.pose_lambda);
    let candidates = (m_views * factor).min(pool.len());
    let take = m_views.min(candidates);
    Ok(sample(rng, candidates, take).into_iter().map(|i| ranked[i]).collect())
}

/// Start ranks of the emitted sets among `k` ranked views.
fn set_offsets(k: usize, sets: usize) -> Vec<usize> {
    let span = k - SET_SIZE;
    match sets {
        1 => vec![0],
        3 => vec![0, span / 2, span],
        4 => vec![0, span / 2, 3 * span / 4, span],
        _ => (0..sets).map(|i| (i * span + (sets - 1) / 2) / (sets - 1)).collect(),
    }
}

/// `sets` groups of ten views ordered from most to least similar to
/// `target`. The first group is the ten nearest views and the last the ten
/// farthest; the ones in between start at evenly spaced rank quantiles.
/// Returns indices into `surrounding`.
pub fn rank_source_sets(
    target: &Camera<f64>,
    surrounding: &[Camera<f64>],
    sets: usize,
    lambda: f64,
) -> Result<Vec<Vec<usize>>> {
    if surrounding.len() < SET_SIZE {
        return Err(Error::Contract(format!(
            "source sets need at least {SET_SIZE} surrounding views, got {}",
            surrounding.len()
        )));
    }
    if sets == 0 {
        return Err(Error::Contract("at least one source set is required".into()));
    }
    let ranked = rank_by_pose(target, surrounding, lambda);
    Ok(set_offsets(surrounding.len(), sets)
        .into_iter()
        .map(|o| ranked[o..o + SET_SIZE].to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::focal_from_fov;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring(count: usize) -> Vec<Camera<f64>> {
        (0..count)
            .map(|i| {
                let a = i as f64 * 2.0 * std::f64::consts::PI / count as f64;
                let eye = [4.0 * a.cos(), 0.3 * (i % 3) as f64, 4.0 * a.sin()];
                Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], focal_from_fov(40.0, 16), 16, 16, 2.0, 6.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn small_pool_returns_every_view() {
        let cams = ring(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut got = sample_source_views(&cams[0], &cams[1..], &SourceSampling::default(), &mut rng).unwrap();
        got.sort();
        assert_eq!(got, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_is_seeded() {
        let cams = ring(40);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_source_views(&cams[0], &cams[1..], &SourceSampling::default(), &mut rng).unwrap()
        };
        assert_eq!(draw(5), draw(5));
        assert!(matches!(
            sample_source_views(&cams[0], &[], &SourceSampling::default(), &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn view_count_histogram_is_uniform() {
        let cams = ring(61);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 10_000;
        let mut hist = [0usize; 5];
        for _ in 0..draws {
            let got = sample_source_views(&cams[0], &cams[1..], &SourceSampling::default(), &mut rng).unwrap();
            let mut unique = got.clone();
            unique.sort();
            unique.dedup();
            assert_eq!(unique.len(), got.len());
            hist[got.len() - 8] += 1;
        }
        let p = 0.2;
        let expected = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &h in &hist {
            assert!((h as f64 - expected).abs() <= 3.0 * sd, "{hist:?}");
        }
    }

    #[test]
    fn sources_stay_within_the_nearest_pool() {
        let cams = ring(61);
        let cfg = SourceSampling {
            views: [8, 8],
            pool_factor: [1, 1],
            pose_lambda: 1.0,
        };
        let ranked = rank_by_pose(&cams[0], &cams[1..], 1.0);
        let mut got = sample_source_views(&cams[0], &cams[1..], &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        got.sort();
        let mut nearest = ranked[..8].to_vec();
        nearest.sort();
        assert_eq!(got, nearest);
    }

    #[test]
    fn thirty_views_give_three_disjoint_sets() {
        let cams = ring(31);
        let sets = rank_source_sets(&cams[0], &cams[1..], 3, 1.0).unwrap();
        let ranked = rank_by_pose(&cams[0], &cams[1..], 1.0);
        for (i, s) in sets.iter().enumerate() {
            assert_eq!(s, &ranked[10 * i..10 * i + 10]);
        }
    }

    #[test]
    fn duplicated_target_ranks_first() {
        let cams = ring(20);
        let mut surrounding = cams[1..].to_vec();
        surrounding.insert(6, cams[0].clone());
        let sets = rank_source_sets(&cams[0], &surrounding, 3, 1.0).unwrap();
        assert_eq!(sets[0][0], 6);
    }

    #[test]
    fn anchors_for_four_sets_and_many_sets() {
        assert_eq!(set_offsets(50, 4), vec![0, 20, 30, 40]);
        assert_eq!(set_offsets(30, 3), vec![0, 10, 20]);
        assert_eq!(set_offsets(20, 2), vec![0, 10]);
        let many = set_offsets(60, 6);
        assert_eq!((many[0], many[5]), (0, 50));
        assert!(many.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn nearest_set_has_least_total_difference() {
        let cams = ring(45);
        let sets = rank_source_sets(&cams[3], &cams, 4, 1.0).unwrap();
        let total = |s: &Vec<usize>| s.iter().map(|&i| pose_difference(&cams[3], &cams[i], 1.0)).sum::<f64>();
        assert!(sets.iter().all(|s| s.len() == SET_SIZE && total(&sets[0]) <= total(s)));
    }

    #[test]
    fn too_few_views_is_an_error() {
        let cams = ring(10);
        assert!(matches!(rank_source_sets(&cams[0], &cams[1..], 3, 1.0), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn ranking_ignores_input_order(seed in 0u64..1000) {
            let cams = ring(24);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let perm = sample(&mut rng, 23, 23).into_vec();
            let shuffled: Vec<Camera<f64>> = perm.iter().map(|&i| cams[1 + i].clone()).collect();
            let base = rank_source_sets(&cams[0], &cams[1..], 3, 1.0).unwrap();
            let other = rank_source_sets(&cams[0], &shuffled, 3, 1.0).unwrap();
            for (a, b) in base.iter().zip(&other) {
                let mut mapped: Vec<usize> = b.iter().map(|&j| perm[j]).collect();
                let mut a = a.clone();
                mapped.sort();
                a.sort();
                prop_assert_eq!(a, mapped);
            }
        }
    }
}
