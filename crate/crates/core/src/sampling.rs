//! Pose sampling around existing cameras and training pair assembly.
//!
//! In-distribution poses add small Gaussian noise to a neighbour pose
//! (quaternion components and translation, then renormalize). Out-of-distribution
//! poses rotate the query by per-axis yaw/pitch/roll Gaussians and move it in two
//! stages: a large ground-plane jump, a snap to the nearest train camera, then a
//! small jitter.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageBuffer, SceneDatabase, Split};
use crate::error::{Error, Result};
use crate::geometry::{perturb_rotation, relative_pose, Pose, Quaternion, RelativePose, Vec3};
use crate::synthesis::{SynthesisConfig, ViewSynthesizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Per-component sigma added to the quaternion.
    pub alpha_q: f64,
    /// Per-axis translation sigma, meters.
    pub alpha_t: [f64; 3],
    pub sigma_yaw_deg: f64,
    pub sigma_roll_deg: f64,
    pub sigma_pitch_deg: f64,
    pub t_large: [f64; 3],
    pub t_small: [f64; 3],
    /// Probability of replacing the neighbour (and, independently, the
    /// query) by an in-distribution render.
    pub perturb_prob: f64,
    /// Out-of-distribution policy: probability of keeping a real neighbour.
    pub real_nn_prob: f64,
    pub top_n_neighbours: usize,
    /// Candidate neighbours farther than this L1 distance are dropped.
    pub max_l1_dist: Option<f64>,
    /// Sigma of the rotation-only query augmentation.
    pub query_alpha_q: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self::outdoor()
    }
}

impl PerturbationConfig {
    pub fn outdoor() -> Self {
        Self {
            alpha_q: 0.02,
            alpha_t: [1.0; 3],
            sigma_yaw_deg: 30.0,
            sigma_roll_deg: 10.0,
            sigma_pitch_deg: 2.5,
            t_large: [10.0, 10.0, 0.1],
            t_small: [0.5, 0.5, 0.1],
            perturb_prob: 0.5,
            real_nn_prob: 0.25,
            top_n_neighbours: 20,
            max_l1_dist: Some(20.0),
            query_alpha_q: 0.02,
        }
    }

    pub fn indoor() -> Self {
        Self {
            alpha_t: [0.1; 3],
            sigma_yaw_deg: 15.0,
            sigma_roll_deg: 15.0,
            sigma_pitch_deg: 15.0,
            t_large: [0.5; 3],
            t_small: [0.25; 3],
            max_l1_dist: None,
            ..Self::outdoor()
        }
    }

    /// Every sigma zero: samplers become deterministic.
    pub fn zero() -> Self {
        Self {
            alpha_q: 0.0,
            alpha_t: [0.0; 3],
            sigma_yaw_deg: 0.0,
            sigma_roll_deg: 0.0,
            sigma_pitch_deg: 0.0,
            t_large: [0.0; 3],
            t_small: [0.0; 3],
            query_alpha_q: 0.0,
            ..Self::outdoor()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.alpha_q,
            self.sigma_yaw_deg,
            self.sigma_roll_deg,
            self.sigma_pitch_deg,
            self.query_alpha_q,
        ]
        .into_iter()
        .chain(self.alpha_t)
        .chain(self.t_large)
        .chain(self.t_small);
        let mut ok = sigmas.into_iter().all(|s| s >= 0.0 && s.is_finite());
        ok &= (0.0..=1.0).contains(&self.perturb_prob) && (0.0..=1.0).contains(&self.real_nn_prob);
        ok &= self.top_n_neighbours >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("perturbation config {self:?}")))
        }
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

fn gauss3<R: Rng + ?Sized>(rng: &mut R, sigma: [f64; 3]) -> Vec3 {
    Vec3::new(gauss(rng, sigma[0]), gauss(rng, sigma[1]), gauss(rng, sigma[2]))
}

fn jitter_quaternion<R: Rng + ?Sized>(q: &Quaternion, sigma: f64, rng: &mut R) -> Quaternion {
    let noisy = Quaternion::new(
        q.w + gauss(rng, sigma),
        q.x + gauss(rng, sigma),
        q.y + gauss(rng, sigma),
        q.z + gauss(rng, sigma),
    );
    // a draw of four sigma-0.02 components cannot cancel a unit quaternion
    noisy.normalize().unwrap_or(q.canonical())
}

/// Small Gaussian perturbation of `base`: quaternion components and center.
pub fn sample_in_distribution<R: Rng + ?Sized>(base: &Pose, cfg: &PerturbationConfig, rng: &mut R) -> Pose {
    let rotation = jitter_quaternion(&base.rotation, cfg.alpha_q, rng);
    Pose::new(rotation, base.center + gauss3(rng, cfg.alpha_t))
}

/// Large rotation perturbation of `query`; translation jumps by `t_large`,
/// snaps to the nearest of `train_poses` and is jittered by `t_small`.
pub fn sample_out_of_distribution<R: Rng + ?Sized>(
    query: &Pose,
    train_poses: &[Pose],
    cfg: &PerturbationConfig,
    rng: &mut R,
) -> Result<Pose> {
    if train_poses.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let yaw = gauss(rng, cfg.sigma_yaw_deg).to_radians();
    let roll = gauss(rng, cfg.sigma_roll_deg).to_radians();
    let pitch = gauss(rng, cfg.sigma_pitch_deg).to_radians();
    let rotation = perturb_rotation(&query.rotation, yaw, pitch, roll);

    let moved = query.center + gauss3(rng, cfg.t_large);
    let nearest = train_poses
        .iter()
        .map(|p| (p.center - moved).norm())
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    let center = train_poses[nearest].center + gauss3(rng, cfg.t_small);
    Ok(Pose::new(rotation, center))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Real,
    InDist,
    OutDist,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Real => "real",
            Policy::InDist => "in-dist",
            Policy::OutDist => "out-dist",
        }
    }
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Policy::Real),
            "in-dist" | "in_dist" => Ok(Policy::InDist),
            "out-dist" | "out_dist" => Ok(Policy::OutDist),
            other => Err(format!("unknown policy {other:?} (expected real, in-dist or out-dist)")),
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One side of a training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairView {
    pub image: ImageBuffer,
    pub pose: Pose,
    pub is_synthetic: bool,
    pub filled_fraction: f64,
}

impl PairView {
    pub fn real(db: &SceneDatabase, index: usize) -> Self {
        let r = db.record(index);
        Self {
            image: r.image.clone(),
            pose: r.pose,
            is_synthetic: false,
            filled_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub query_id: String,
    pub query: PairView,
    pub neighbour: PairView,
    pub target: RelativePose,
}

impl TrainingPair {
    pub fn new(query_id: String, query: PairView, neighbour: PairView) -> Self {
        let target = relative_pose(&query.pose, &neighbour.pose);
        Self {
            query_id,
            query,
            neighbour,
            target,
        }
    }

    /// Pair built from two database records.
    pub fn real(db: &SceneDatabase, query: usize, neighbour: usize) -> Self {
        Self::new(
            db.record(query).id.clone(),
            PairView::real(db, query),
            PairView::real(db, neighbour),
        )
    }

    fn swapped(self) -> Self {
        Self::new(self.query_id, self.neighbour, self.query)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Pair(TrainingPair),
    /// A synthetic render was too empty to train on.
    Skipped { query_id: String, filled_fraction: f64 },
}

impl PairOutcome {
    pub fn pair(self) -> Option<TrainingPair> {
        match self {
            PairOutcome::Pair(p) => Some(p),
            PairOutcome::Skipped { .. } => None,
        }
    }
}

/// Independent RNG stream for one query of one epoch.
pub fn pair_rng(seed: u64, epoch: usize, query: usize) -> ChaCha8Rng {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, query as u64] {
        z = z.wrapping_add(v).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    ChaCha8Rng::seed_from_u64(z)
}

/// Builds training pairs for one scene, caching fused depths and retrieval lists.
pub struct PairSampler<'a> {
    synth: ViewSynthesizer<'a>,
    cfg: PerturbationConfig,
    train_poses: Vec<Pose>,
    neighbours: Vec<Option<Vec<usize>>>,
}

impl<'a> PairSampler<'a> {
    pub fn new(db: &'a SceneDatabase, cfg: PerturbationConfig, synth_cfg: SynthesisConfig) -> Result<Self> {
        cfg.validate()?;
        if db.train_indices().is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let neighbours = vec![None; db.len()];
        Ok(Self {
            synth: ViewSynthesizer::new(db, synth_cfg)?,
            cfg,
            train_poses: db.train_poses(),
            neighbours,
        })
    }

    pub fn database(&self) -> &'a SceneDatabase {
        self.synth.database()
    }

    pub fn config(&self) -> &PerturbationConfig {
        &self.cfg
    }

    pub fn synthesizer(&self) -> &ViewSynthesizer<'a> {
        &self.synth
    }

    /// Top-N retrieval list for a train query.
    pub fn neighbours(&mut self, query: usize) -> Result<&[usize]> {
        if self.neighbours[query].is_none() {
            let db = self.synth.database();
            let list = db.top_k(query, self.cfg.top_n_neighbours, self.cfg.max_l1_dist)?;
            self.neighbours[query] = Some(list);
        }
        Ok(self.neighbours[query].as_deref().expect("filled above"))
    }

    /// Renders a view at `pose` with the query's intrinsics.
    pub fn render(&self, query: usize, pose: Pose) -> Result<PairView> {
        let k = self.synth.database().record(query).intrinsics;
        let out = self.synth.synthesize(&pose, &k)?;
        Ok(PairView {
            image: out.image,
            pose,
            is_synthetic: true,
            filled_fraction: out.filled_fraction,
        })
    }

    fn too_empty(&self, v: &PairView) -> bool {
        v.filled_fraction < self.synth.config().min_valid_fraction
    }

    fn jittered_query<R: Rng + ?Sized>(&self, query: usize, rng: &mut R) -> Result<PairView> {
        let base = self.synth.database().record(query).pose;
        if rng.gen::<f64>() >= self.cfg.perturb_prob {
            return Ok(PairView::real(self.synth.database(), query));
        }
        let pose = Pose::new(jitter_quaternion(&base.rotation, self.cfg.query_alpha_q, rng), base.center);
        match self.render(query, pose) {
            Ok(v) if !self.too_empty(&v) => Ok(v),
            Ok(_) | Err(Error::NoSources) => Ok(PairView::real(self.synth.database(), query)),
            Err(e) => Err(e),
        }
    }

    /// Samples one training pair for train record `query`. With
    /// `swap_synthetic` a synthetic neighbour takes the query role half the time.
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        query: usize,
        policy: Policy,
        swap_synthetic: bool,
        rng: &mut R,
    ) -> Result<PairOutcome> {
        let db = self.synth.database();
        let rec = db.record(query);
        if rec.split != Split::Train {
            return Err(Error::InvalidConfig(format!("query {} is not a train record", rec.id)));
        }
        let query_id = rec.id.clone();
        let cands = self.neighbours(query)?.to_vec();
        let nn = cands[rng.gen_range(0..cands.len())];

        let (q_view, n_view) = match policy {
            Policy::Real => (PairView::real(db, query), Ok(PairView::real(db, nn))),
            Policy::InDist => {
                let neighbour = if rng.gen::<f64>() < self.cfg.perturb_prob {
                    let pose = sample_in_distribution(&db.record(nn).pose, &self.cfg, rng);
                    self.render(query, pose)
                } else {
                    Ok(PairView::real(db, nn))
                };
                let q_view = self.jittered_query(query, rng)?;
                (q_view, neighbour)
            }
            Policy::OutDist => {
                let neighbour = if rng.gen::<f64>() < self.cfg.real_nn_prob {
                    Ok(PairView::real(db, nn))
                } else {
                    let pose = sample_out_of_distribution(&rec.pose, &self.train_poses, &self.cfg, rng)?;
                    self.render(query, pose)
                };
                let q_view = self.jittered_query(query, rng)?;
                (q_view, neighbour)
            }
        };
        let n_view = match n_view {
            Ok(v) => v,
            Err(Error::NoSources) => {
                return Ok(PairOutcome::Skipped {
                    query_id,
                    filled_fraction: 0.0,
                })
            }
            Err(e) => return Err(e),
        };
        if n_view.is_synthetic && self.too_empty(&n_view) {
            return Ok(PairOutcome::Skipped {
                query_id,
                filled_fraction: n_view.filled_fraction,
            });
        }
        let pair = TrainingPair::new(query_id, q_view, n_view);
        let swap = swap_synthetic && pair.neighbour.is_synthetic && rng.gen::<bool>();
        Ok(PairOutcome::Pair(if swap { pair.swapped() } else { pair }))
    }
}

/// One-shot pair construction for `query_id`; see [`PairSampler::sample`].
pub fn build_training_pair<R: Rng + ?Sized>(
    db: &SceneDatabase,
    query_id: &str,
    policy: Policy,
    cfg: &PerturbationConfig,
    synth: &SynthesisConfig,
    rng: &mut R,
) -> Result<PairOutcome> {
    let q = db.index_of(query_id)?;
    PairSampler::new(db, cfg.clone(), synth.clone())?.sample(q, policy, false, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, SceneSpec};
    use crate::geometry::{angular_error_deg, compose_absolute, wrap_deg, yaw_deg};

    fn street() -> SceneDatabase {
        generate_scene(&SceneSpec::biased_street().with_counts(48, 4).with_size(32, 32), 3).unwrap()
    }

    #[test]
    fn zero_sigma_in_distribution_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Pose::from_yaw_pitch_roll(1.0, 0.1, 0.2, Vec3::new(1.0, 2.0, 3.0));
        let out = sample_in_distribution(&base, &PerturbationConfig::zero(), &mut rng);
        assert_eq!(out.center, base.center);
        assert!(angular_error_deg(&out.rotation, &base.rotation) < 1e-12);
    }

    #[test]
    fn in_distribution_unit_quaternion_and_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = PerturbationConfig::outdoor();
        let base = Pose::identity();
        let n = 10_000;
        let mut sq = Vec3::zeros();
        for _ in 0..n {
            let p = sample_in_distribution(&base, &cfg, &mut rng);
            assert!((p.rotation.norm() - 1.0).abs() < 1e-9);
            sq += p.center.component_mul(&p.center);
        }
        for s in (sq / n as f64).iter() {
            assert!((0.95..=1.05).contains(&s.sqrt()), "sigma {}", s.sqrt());
        }
    }

    #[test]
    fn zero_sigma_out_of_distribution_returns_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Pose::from_yaw_pitch_roll(0.3, 0.0, 0.0, Vec3::new(1.0, 1.0, 1.6));
        let train = [Pose::identity(), q, Pose::new(Quaternion::IDENTITY, Vec3::new(5.0, 0.0, 0.0))];
        let out = sample_out_of_distribution(&q, &train, &PerturbationConfig::zero(), &mut rng).unwrap();
        assert_eq!(out.center, q.center);
        assert!(angular_error_deg(&out.rotation, &q.rotation) < 1e-9);
        assert!(matches!(
            sample_out_of_distribution(&q, &[], &PerturbationConfig::zero(), &mut rng),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn out_of_distribution_yaw_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = PerturbationConfig::outdoor();
        let q = Pose::from_yaw_pitch_roll(0.5, 0.0, 0.0, Vec3::zeros());
        let train = [q];
        let base_yaw = yaw_deg(&q.rotation);
        let n = 10_000;
        let var: f64 = (0..n)
            .map(|_| {
                let p = sample_out_of_distribution(&q, &train, &cfg, &mut rng).unwrap();
                wrap_deg(yaw_deg(&p.rotation) - base_yaw).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        assert!((var.sqrt() / 30.0 - 1.0).abs() < 0.05, "yaw sigma {}", var.sqrt());
    }

    #[test]
    fn out_of_distribution_snaps_near_train_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PerturbationConfig::outdoor();
        let train: Vec<Pose> = (0..5)
            .map(|i| Pose::new(Quaternion::IDENTITY, Vec3::new(40.0 * i as f64, 0.0, 1.6)))
            .collect();
        let bound = 3.0 * Vec3::from(cfg.t_small).norm();
        let n = 10_000;
        let mut inside = 0;
        for _ in 0..n {
            let p = sample_out_of_distribution(&train[2], &train, &cfg, &mut rng).unwrap();
            if train.iter().any(|t| (t.center - p.center).norm() <= bound) {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.99 * n as f64);
    }

    #[test]
    fn real_policy_top1_and_consistency() {
        let db = street();
        let cfg = PerturbationConfig {
            top_n_neighbours: 1,
            ..PerturbationConfig::outdoor()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = db.record(0).id.clone();
        let pair = build_training_pair(&db, &q, Policy::Real, &cfg, &SynthesisConfig::outdoor(), &mut rng)
            .unwrap()
            .pair()
            .unwrap();
        let top = crate::dataset::top_k_neighbours(&db, &q, 1, Some(20.0)).unwrap();
        assert_eq!(pair.neighbour.pose, db.get(&top[0]).unwrap().pose);
        let back = compose_absolute(&pair.neighbour.pose, &pair.target);
        assert!((back.center - pair.query.pose.center).norm() < 1e-9);
    }

    #[test]
    fn out_dist_with_real_prob_one_is_real() {
        let db = street();
        let cfg = PerturbationConfig {
            real_nn_prob: 1.0,
            ..PerturbationConfig::outdoor()
        };
        let mut sampler = PairSampler::new(&db, cfg, SynthesisConfig::outdoor()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for q in db.train_indices().into_iter().take(10) {
            let p = sampler.sample(q, Policy::OutDist, true, &mut rng).unwrap().pair().unwrap();
            assert!(!p.neighbour.is_synthetic);
        }
    }

    #[test]
    fn low_fill_render_is_skipped() {
        let db = street();
        let synth = SynthesisConfig {
            min_valid_fraction: 0.3,
            ..SynthesisConfig::outdoor()
        };
        // out-dist with huge translations: renders from far away are sparse
        let cfg = PerturbationConfig {
            real_nn_prob: 0.0,
            sigma_pitch_deg: 40.0,
            ..PerturbationConfig::outdoor()
        };
        let mut sampler = PairSampler::new(&db, cfg, synth).unwrap();
        let mut skipped = 0;
        for q in db.train_indices() {
            let mut rng = pair_rng(9, 0, q);
            match sampler.sample(q, Policy::OutDist, false, &mut rng).unwrap() {
                PairOutcome::Skipped { filled_fraction, .. } => {
                    assert!(filled_fraction < 0.3);
                    skipped += 1;
                }
                PairOutcome::Pair(p) => {
                    if p.neighbour.is_synthetic {
                        assert!(p.neighbour.filled_fraction >= 0.3);
                    }
                }
            }
        }
        assert!(skipped > 0);
    }

    #[test]
    fn pair_stream_is_deterministic_and_consistent() {
        let db = street();
        let mut a = PairSampler::new(&db, PerturbationConfig::outdoor(), SynthesisConfig::outdoor()).unwrap();
        let mut b = PairSampler::new(&db, PerturbationConfig::outdoor(), SynthesisConfig::outdoor()).unwrap();
        for q in db.train_indices().into_iter().take(12) {
            for policy in [Policy::Real, Policy::InDist, Policy::OutDist] {
                let pa = a.sample(q, policy, true, &mut pair_rng(11, 2, q)).unwrap();
                let pb = b.sample(q, policy, true, &mut pair_rng(11, 2, q)).unwrap();
                assert_eq!(pa, pb);
                if let PairOutcome::Pair(p) = pa {
                    let back = compose_absolute(&p.neighbour.pose, &p.target);
                    assert!((back.center - p.query.pose.center).norm() < 1e-9);
                    assert!(angular_error_deg(&back.rotation, &p.query.pose.rotation) < 1e-7);
                }
            }
        }
    }

    #[test]
    fn out_of_distribution_fills_yaw_bins() {
        let db = generate_scene(&SceneSpec::biased_street().with_counts(400, 0).with_size(8, 8), 7).unwrap();
        let poses = db.train_poses();
        let cfg = PerturbationConfig::outdoor();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bins = |ps: &[Pose]| {
            let mut h = [0usize; 36];
            for p in ps {
                h[(yaw_deg(&p.rotation) / 10.0) as usize % 36] += 1;
            }
            h.iter().filter(|&&c| c > 0).count()
        };
        let sampled: Vec<Pose> = poses
            .iter()
            .map(|p| sample_out_of_distribution(p, &poses, &cfg, &mut rng).unwrap())
            .collect();
        assert!(bins(&poses) <= 8);
        assert!(bins(&sampled) >= 30);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("in-dist".parse::<Policy>().unwrap(), Policy::InDist);
        assert!("bogus".parse::<Policy>().is_err());
        assert_eq!(Policy::OutDist.to_string(), "out-dist");
    }
}
