use std::borrow::Cow;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalConfig, FilledStats, IdentityPredictor, LocalizationReport};
use crate::dataset::{compute_descriptor, SceneDatabase, Split};
use crate::error::{Error, Result};
use crate::regressor::{
    train, Arch, LossConfig, PairSource, Regressor, RegressorConfig, SampledPairs, Schedule, TrainReport,
};
use crate::sampling::{pair_rng, PairOutcome, PairSampler, PairView, PerturbationConfig, Policy, TrainingPair};
use crate::synthesis::{SynthesisConfig, ViewSynthesizer};

/// Everything one training-and-evaluation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub regressor: RegressorConfig,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub perturb: PerturbationConfig,
    pub synth: SynthesisConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale street settings. Translations there span tens of meters,
    /// so the translation head output is scaled by 10.
    pub fn outdoor_desk() -> Self {
        Self {
            regressor: RegressorConfig {
                translation_scale: 10.0,
                ..RegressorConfig::desk()
            },
            schedule: Schedule::desk(),
            loss: LossConfig::outdoor(),
            // the outdoor jump and roll sigmas suit city-block scenes; the
            // generated street is 40 m across with ~1 deg of camera roll
            perturb: PerturbationConfig {
                sigma_roll_deg: 2.5,
                t_large: [3.0, 3.0, 0.1],
                ..PerturbationConfig::outdoor()
            },
            synth: SynthesisConfig {
                fill_holes: true,
                ..SynthesisConfig::outdoor()
            },
            eval: EvalConfig::default(),
            seed: 0,
        }
    }

    pub fn indoor_desk() -> Self {
        Self {
            regressor: RegressorConfig::desk(),
            loss: LossConfig::indoor(),
            perturb: PerturbationConfig::indoor(),
            synth: SynthesisConfig {
                fill_holes: true,
                ..SynthesisConfig::indoor()
            },
            ..Self::outdoor_desk()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.schedule.seed = seed;
        self
    }

    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.regressor.arch = arch;
        self
    }

    fn schedule_note(&self) -> String {
        let s = &self.schedule;
        format!(
            "schedule: {} epochs, batch {}, lr {:e} x{} every {}, seed {}",
            s.epochs, s.batch_size, s.lr, s.decay_rate, s.decay_every, self.seed
        )
    }
}

fn filled_stats(pairs: &[TrainingPair], skipped: usize) -> FilledStats {
    let synth: Vec<f64> = pairs
        .iter()
        .flat_map(|p| [&p.query, &p.neighbour])
        .filter(|v| v.is_synthetic)
        .map(|v| v.filled_fraction)
        .collect();
    FilledStats {
        pairs: pairs.len(),
        synthetic: synth.len(),
        skipped,
        mean_filled_fraction: if synth.is_empty() { 0.0 } else { synth.iter().sum::<f64>() / synth.len() as f64 },
    }
}

/// Trains a fresh regressor on pairs sampled from every train query with `policy`.
/// The filled statistics describe the first epoch's pairs.
pub fn train_policy(
    db: &SceneDatabase,
    policy: Policy,
    cfg: &ExperimentConfig,
) -> Result<(Regressor, TrainReport, FilledStats)> {
    let sampler = PairSampler::new(db, cfg.perturb.clone(), cfg.synth.clone())?;
    let mut source = SampledPairs::new(sampler, db.train_indices(), policy, cfg.seed);
    let first = source.epoch_pairs(0, false)?.into_owned();
    let stats = filled_stats(&first, source.last_skipped);
    let mut model = Regressor::new(cfg.regressor.clone(), cfg.seed)?;
    let report = train(&mut model, &mut source, &cfg.loss, &cfg.schedule)?;
    Ok((model, report, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub policy: Policy,
    pub arch: Arch,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{}/{}", self.policy, self.arch)
    }
}

/// Trains and evaluates one (policy, architecture) combination.
pub fn run_cell(db: &SceneDatabase, cell: AblationCell, cfg: &ExperimentConfig) -> Result<LocalizationReport> {
    let cfg = cfg.clone().with_arch(cell.arch);
    let (model, log, filled) = train_policy(db, cell.policy, &cfg)?;
    let mut report = evaluate(db, &model, &cell.label(), &cfg.eval)?;
    report.filled = filled;
    report.notes.push(cfg.schedule_note());
    if let (Some(a), Some(b)) = (log.first_loss(), log.final_loss()) {
        report.notes.push(format!("loss {a:.4} -> {b:.4}"));
    }
    Ok(report)
}

/// One report per cell, in order.
pub fn run_ablation(db: &SceneDatabase, cells: &[AblationCell], cfg: &ExperimentConfig) -> Result<Vec<LocalizationReport>> {
    cells.iter().map(|&c| run_cell(db, c, cfg)).collect()
}

/// Fixed query views, each paired every epoch with a random one of its
/// candidate neighbours, plus pairs that never change.
pub struct FixedQueryPairs<'a> {
    pub db: &'a SceneDatabase,
    pub entries: Vec<(String, PairView, Vec<usize>)>,
    pub fixed: Vec<TrainingPair>,
    pub seed: u64,
}

impl PairSource for FixedQueryPairs<'_> {
    fn epoch_pairs(&mut self, epoch: usize, _swap: bool) -> Result<Cow<'_, [TrainingPair]>> {
        let mut out = Vec::with_capacity(self.entries.len() + self.fixed.len());
        for (i, (id, view, nns)) in self.entries.iter().enumerate() {
            let mut rng = pair_rng(self.seed, epoch, i);
            let nn = nns[rng.gen_range(0..nns.len())];
            out.push(TrainingPair::new(id.clone(), view.clone(), PairView::real(self.db, nn)));
        }
        out.extend(self.fixed.iter().cloned());
        Ok(Cow::Owned(out))
    }
}

fn train_fixed(
    db: &SceneDatabase,
    mut source: FixedQueryPairs<'_>,
    label: &str,
    cfg: &ExperimentConfig,
) -> Result<LocalizationReport> {
    let first = source.epoch_pairs(0, false)?.into_owned();
    let mut model = Regressor::new(cfg.regressor.clone(), cfg.seed)?;
    let log = train(&mut model, &mut source, &cfg.loss, &cfg.schedule)?;
    let mut report = evaluate(db, &model, label, &cfg.eval)?;
    report.filled = filled_stats(&first, 0);
    report.notes.push(cfg.schedule_note());
    if let (Some(a), Some(b)) = (log.first_loss(), log.final_loss()) {
        report.notes.push(format!("loss {a:.4} -> {b:.4}"));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub upper_bound: LocalizationReport,
    pub synthetic: LocalizationReport,
    pub retrieval: LocalizationReport,
}

impl SanityReport {
    pub fn reports(&self) -> [&LocalizationReport; 3] {
        [&self.upper_bound, &self.synthetic, &self.retrieval]
    }
}

/// Three runs on one scene: a regressor trained on the real test-pose views,
/// one trained on views synthesized at the test poses from train images, and
/// retrieval alone.
pub fn run_sanity_check(db: &SceneDatabase, cfg: &ExperimentConfig) -> Result<SanityReport> {
    let tests = db.test_indices();
    if tests.is_empty() {
        return Err(Error::EmptyScene);
    }
    let top_n = cfg.perturb.top_n_neighbours;
    let retrieval = evaluate(db, &IdentityPredictor, "retrieval", &cfg.eval)?;

    let mut real = Vec::new();
    for &q in &tests {
        let nns = db.top_k(q, top_n, cfg.perturb.max_l1_dist)?;
        real.push((db.record(q).id.clone(), PairView::real(db, q), nns));
    }
    let source = FixedQueryPairs {
        db,
        entries: real,
        fixed: Vec::new(),
        seed: cfg.seed,
    };
    let upper_bound = train_fixed(db, source, "real test-pose views", cfg)?;

    let synth = ViewSynthesizer::new(db, cfg.synth.clone())?;
    let mut views = Vec::new();
    let mut skipped = 0;
    for &q in &tests {
        let r = db.record(q);
        let out = match synth.synthesize(&r.pose, &r.intrinsics) {
            Ok(o) if o.filled_fraction >= cfg.synth.min_valid_fraction => o,
            Ok(_) | Err(Error::NoSources) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let desc = compute_descriptor(&out.image, r.descriptor.len());
        let near = cfg.perturb.max_l1_dist.map(|d| (r.pose.center, d));
        let mut nns = db.rank_train(&desc, None, near);
        nns.truncate(top_n);
        if nns.is_empty() {
            skipped += 1;
            continue;
        }
        let view = PairView {
            image: out.image,
            pose: r.pose,
            is_synthetic: true,
            filled_fraction: out.filled_fraction,
        };
        views.push((r.id.clone(), view, nns));
    }
    if views.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let source = FixedQueryPairs {
        db,
        entries: views,
        fixed: Vec::new(),
        seed: cfg.seed,
    };
    let mut synthetic = train_fixed(db, source, "synthetic test-pose views", cfg)?;
    synthetic.filled.skipped = skipped;

    Ok(SanityReport {
        upper_bound,
        synthetic,
        retrieval,
    })
}

/// Train queries kept for a data fraction, chosen by a seeded shuffle.
pub fn fraction_subset(db: &SceneDatabase, fraction: f64, seed: u64) -> Vec<usize> {
    let mut train = db.train_indices();
    let keep = ((fraction.clamp(0.0, 1.0) * train.len() as f64).ceil() as usize).clamp(1, train.len().max(1));
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    train.truncate(keep);
    train.sort_unstable();
    train
}

/// Limited-data runs: only a fraction of the train queries is kept, and each
/// kept query also gets one out-of-distribution synthetic neighbour rendered
/// once before training. Retrieval at test time sees only the kept images.
pub fn run_fraction_study(db: &SceneDatabase, fractions: &[f64], cfg: &ExperimentConfig) -> Result<Vec<LocalizationReport>> {
    let mut out = Vec::new();
    for &f in fractions {
        let keep: HashSet<String> = fraction_subset(db, f, cfg.seed)
            .into_iter()
            .map(|i| db.record(i).id.clone())
            .collect();
        let sub = db.filtered(|r| r.split == Split::Test || keep.contains(&r.id))?;
        let mut perturb = cfg.perturb.clone();
        perturb.real_nn_prob = 0.0;
        let mut sampler = PairSampler::new(&sub, perturb, cfg.synth.clone())?;
        let mut entries = Vec::new();
        let mut fixed = Vec::new();
        let mut skipped = 0;
        for q in sub.train_indices() {
            let nns = sub.top_k(q, cfg.perturb.top_n_neighbours, cfg.perturb.max_l1_dist)?;
            entries.push((sub.record(q).id.clone(), PairView::real(&sub, q), nns));
            let mut pair = None;
            for attempt in 0..10 {
                let mut rng = pair_rng(cfg.seed, attempt, q);
                match sampler.sample(q, Policy::OutDist, false, &mut rng)? {
                    PairOutcome::Pair(p) => {
                        pair = Some(p);
                        break;
                    }
                    PairOutcome::Skipped { .. } => skipped += 1,
                }
            }
            fixed.extend(pair);
        }
        let source = FixedQueryPairs {
            db: &sub,
            entries,
            fixed,
            seed: cfg.seed,
        };
        let mut report = train_fixed(&sub, source, &format!("{:.0}% + synthetic", f * 100.0), cfg)?;
        report.filled.skipped = skipped;
        report.notes.push(format!("{} train queries kept", keep.len()));
        out.push(report);
    }
    Ok(out)
}
