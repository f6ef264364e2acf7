//! Localization metrics, yaw bias analysis and experiment templates.

mod experiments;

pub use experiments::{
    fraction_subset, run_ablation, run_cell, run_fraction_study, run_sanity_check, train_policy, AblationCell, ExperimentConfig,
    FixedQueryPairs, SanityReport,
};

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneDatabase;
use crate::error::{Error, Result};
use crate::geometry::{angular_error_deg, compose_absolute, relative_pose, yaw_deg, Pose, RelativePose};
use crate::regressor::{Mode, Regressor};

/// Lower median: the element at index `(n - 1) / 2` after sorting.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryError {
    pub query_id: String,
    pub neighbour_id: String,
    pub translation_m: f64,
    pub rotation_deg: f64,
}

/// Statistics of the synthetic views that went into training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilledStats {
    pub pairs: usize,
    pub synthetic: usize,
    pub skipped: usize,
    pub mean_filled_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub label: String,
    pub queries: Vec<QueryError>,
    pub median_t: f64,
    pub median_r: f64,
    pub filled: FilledStats,
    /// Images per second through retrieval, regression and composition.
    pub throughput_ips: f64,
    pub notes: Vec<String>,
}

impl LocalizationReport {
    pub fn from_errors(label: impl Into<String>, queries: Vec<QueryError>) -> Result<Self> {
        let t: Vec<f64> = queries.iter().map(|q| q.translation_m).collect();
        let r: Vec<f64> = queries.iter().map(|q| q.rotation_deg).collect();
        let median_t = lower_median(&t).ok_or(Error::EmptyScene)?;
        let median_r = lower_median(&r).ok_or(Error::EmptyScene)?;
        Ok(Self {
            label: label.into(),
            queries,
            median_t,
            median_r,
            filled: FilledStats::default(),
            throughput_ips: 0.0,
            notes: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Plain-text table of median errors, one row per report.
pub fn format_table(reports: &[LocalizationReport]) -> String {
    let w = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    writeln!(out, "{:<w$}  {:>9}  {:>9}  {:>7}", "method", "median m", "median °", "queries").unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<w$}  {:>9.3}  {:>9.2}  {:>7}",
            r.label,
            r.median_t,
            r.median_r,
            r.queries.len()
        )
        .unwrap();
    }
    out
}

/// Anything that maps (query, neighbour) record pairs to relative poses.
pub trait Predictor {
    fn predict_pairs(&self, db: &SceneDatabase, pairs: &[(usize, usize)]) -> Result<Vec<RelativePose>>;
}

/// Returns the true relative pose.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict_pairs(&self, db: &SceneDatabase, pairs: &[(usize, usize)]) -> Result<Vec<RelativePose>> {
        Ok(pairs
            .iter()
            .map(|&(q, n)| relative_pose(&db.record(q).pose, &db.record(n).pose))
            .collect())
    }
}

/// Always predicts no motion, so the estimate is the neighbour pose.
pub struct IdentityPredictor;

impl Predictor for IdentityPredictor {
    fn predict_pairs(&self, _db: &SceneDatabase, pairs: &[(usize, usize)]) -> Result<Vec<RelativePose>> {
        Ok(vec![RelativePose::identity(); pairs.len()])
    }
}

impl Predictor for Regressor {
    fn predict_pairs(&self, db: &SceneDatabase, pairs: &[(usize, usize)]) -> Result<Vec<RelativePose>> {
        let qs: Vec<_> = pairs.iter().map(|&(q, _)| &db.record(q).image).collect();
        let ns: Vec<_> = pairs.iter().map(|&(_, n)| &db.record(n).image).collect();
        // eval mode never touches the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward_batch(&qs, &ns, Mode::Eval, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NeighbourMode {
    Top1,
    /// A uniformly random one of the `k` best retrievals.
    RandomTopK { k: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub neighbour: NeighbourMode,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            neighbour: NeighbourMode::Top1,
            batch_size: 16,
        }
    }
}

/// Localizes every test query against its retrieved train neighbour.
pub fn evaluate(
    db: &SceneDatabase,
    predictor: &dyn Predictor,
    label: &str,
    cfg: &EvalConfig,
) -> Result<LocalizationReport> {
    let tests = db.test_indices();
    if tests.is_empty() {
        return Err(Error::EmptyScene);
    }
    let batch = cfg.batch_size.max(1);
    let mut errors = Vec::with_capacity(tests.len());
    let mut elapsed = 0.0;
    for chunk in tests.chunks(batch) {
        let start = Instant::now();
        let mut pairs = Vec::with_capacity(chunk.len());
        for &q in chunk {
            let nn = match cfg.neighbour {
                NeighbourMode::Top1 => db.top_k(q, 1, None)?[0],
                NeighbourMode::RandomTopK { k, seed } => {
                    let cands = db.top_k(q, k.max(1), None)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (q as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    cands[rng.gen_range(0..cands.len())]
                }
            };
            pairs.push((q, nn));
        }
        let rels = predictor.predict_pairs(db, &pairs)?;
        let estimates: Vec<Pose> = pairs
            .iter()
            .zip(&rels)
            .map(|(&(_, n), rel)| compose_absolute(&db.record(n).pose, rel))
            .collect();
        elapsed += start.elapsed().as_secs_f64();
        for (&(q, n), est) in pairs.iter().zip(&estimates) {
            let truth = db.record(q).pose;
            errors.push(QueryError {
                query_id: db.record(q).id.clone(),
                neighbour_id: db.record(n).id.clone(),
                translation_m: (est.center - truth.center).norm(),
                rotation_deg: angular_error_deg(&est.rotation, &truth.rotation),
            });
        }
    }
    let mut report = LocalizationReport::from_errors(label, errors)?;
    report.throughput_ips = if elapsed > 0.0 { tests.len() as f64 / elapsed } else { 0.0 };
    Ok(report)
}

pub const YAW_BINS: usize = 36;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasReport {
    pub histogram: Vec<usize>,
    pub mode_count: usize,
    pub non_empty_bins: usize,
}

/// 10-degree yaw histogram and its mode count. A bin is a peak when it holds
/// more than twice the uniform share; peaks closer than two non-peak bins
/// (around the circle) belong to the same mode.
pub fn analyze_bias(poses: &[Pose]) -> BiasReport {
    let mut histogram = vec![0usize; YAW_BINS];
    for p in poses {
        let b = (yaw_deg(&p.rotation) / (360.0 / YAW_BINS as f64)) as usize;
        histogram[b.min(YAW_BINS - 1)] += 1;
    }
    let threshold = 2.0 * poses.len() as f64 / YAW_BINS as f64;
    let peak: Vec<bool> = histogram.iter().map(|&c| c > 0 && c as f64 > threshold).collect();
    let mode_count = count_modes(&peak);
    BiasReport {
        non_empty_bins: histogram.iter().filter(|&&c| c > 0).count(),
        histogram,
        mode_count,
    }
}

fn count_modes(peak: &[bool]) -> usize {
    let n = peak.len();
    let Some(start) = (0..n).find(|&i| !peak[i]) else {
        return usize::from(n > 0);
    };
    let (mut modes, mut gap, mut seen) = (0, 0, false);
    for k in 1..=n {
        if peak[(start + k) % n] {
            if !seen || gap >= 2 {
                modes += 1;
            }
            seen = true;
            gap = 0;
        } else {
            gap += 1;
        }
    }
    // a wrap-around gap that is too short merges the first and last modes
    if modes > 1 {
        let lead = (1..=n).take_while(|&k| !peak[(start + k) % n]).count();
        let trail = (0..n).take_while(|&k| !peak[(start + n - k) % n]).count();
        if lead + trail < 2 {
            modes -= 1;
        }
    }
    modes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, SceneSpec};
    use crate::geometry::Vec3;

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[]), None);
        assert_eq!(lower_median(&[3.0]), Some(3.0));
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]), Some(3.0));
    }

    fn small_scene() -> SceneDatabase {
        generate_scene(&SceneSpec::biased_street().with_counts(40, 10).with_size(24, 24), 3).unwrap()
    }

    #[test]
    fn oracle_gives_zero_medians() {
        let db = small_scene();
        let r = evaluate(&db, &OraclePredictor, "oracle", &EvalConfig::default()).unwrap();
        assert!(r.median_t < 1e-9 && r.median_r < 1e-6, "{} {}", r.median_t, r.median_r);
        assert_eq!(r.queries.len(), 10);
    }

    #[test]
    fn identity_equals_retrieval_baseline() {
        let db = small_scene();
        let r = evaluate(&db, &IdentityPredictor, "id", &EvalConfig::default()).unwrap();
        for q in &r.queries {
            let truth = db.get(&q.query_id).unwrap().pose;
            let nn = db.get(&q.neighbour_id).unwrap().pose;
            assert!((q.translation_m - (truth.center - nn.center).norm()).abs() < 1e-12);
            assert!((q.rotation_deg - angular_error_deg(&truth.rotation, &nn.rotation)).abs() < 1e-9);
        }
    }

    #[test]
    fn report_json_round_trip() {
        let db = small_scene();
        let mut r = evaluate(&db, &IdentityPredictor, "id", &EvalConfig::default()).unwrap();
        r.notes.push("schedule: 3 epochs".into());
        let back = LocalizationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(format_table(&[r]).contains("id"));
    }

    #[test]
    fn random_neighbour_mode_is_seeded() {
        let db = small_scene();
        let cfg = EvalConfig {
            neighbour: NeighbourMode::RandomTopK { k: 5, seed: 1 },
            batch_size: 4,
        };
        let a = evaluate(&db, &IdentityPredictor, "a", &cfg).unwrap();
        let b = evaluate(&db, &IdentityPredictor, "b", &cfg).unwrap();
        assert_eq!(a.queries, b.queries);
    }

    fn yaw_pose(deg: f64) -> Pose {
        Pose::from_yaw_pitch_roll(deg.to_radians(), 0.0, 0.0, Vec3::zeros())
    }

    #[test]
    fn single_pose_one_bin() {
        let r = analyze_bias(&[yaw_pose(123.0)]);
        assert_eq!(r.non_empty_bins, 1);
        assert_eq!(r.mode_count, 1);
        assert_eq!(r.histogram.iter().sum::<usize>(), 1);
    }

    #[test]
    fn mode_merging() {
        // adjacent and one-gap peaks merge, two-bin gaps split; also across 0
        let poses: Vec<Pose> = [5.0, 15.0, 35.0, 95.0, 355.0].iter().map(|&d| yaw_pose(d)).collect();
        assert_eq!(analyze_bias(&poses).mode_count, 2);
        let poses: Vec<Pose> = [5.0, 45.0].iter().map(|&d| yaw_pose(d)).collect();
        assert_eq!(analyze_bias(&poses).mode_count, 2);
        assert_eq!(analyze_bias(&[]).mode_count, 0);
    }

    #[test]
    fn biased_street_has_four_modes_and_orbit_is_spread() {
        let street = generate_scene(&SceneSpec::biased_street().with_size(8, 8), 7).unwrap();
        let r = analyze_bias(&street.train_poses());
        assert_eq!(r.mode_count, 4, "{:?}", r.histogram);
        assert_eq!(r.histogram.iter().sum::<usize>(), street.train_indices().len());
        let orbit = generate_scene(&SceneSpec::uniform_orbit().with_size(8, 8), 7).unwrap();
        assert!(analyze_bias(&orbit.train_poses()).non_empty_bins >= 34);
    }
}
