//! Identification and verification evaluation.
//!
//! Probes are matched against the gallery by Euclidean distance. Training uses
//! squared distances, but the square root is monotone so rankings agree.
//! A subject enrolled with several gallery samples is scored by its closest
//! sample; ties rank the smaller subject id first.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::dataset::{
    gallery_probe_partition, split_ids, Dataset, ExcludedSubject, GalleryProbePartition, Sample, SplitSpec,
};
use crate::error::{check_dim, Error, Result};
use crate::losses::{sq_dist, SetLabel};
use crate::mining::{sample_verification_pairs, ContrastivePair};
use crate::model::Mlp;
use crate::seed::{self, stream};
use crate::training::{train, TrainConfig};

/// Gallery entry or labelled probe: subject id and embedding.
pub type Labelled = (u32, Vec<f64>);

pub fn extract_embeddings(model: &Mlp, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| model.embed(&s.embedding)).collect()
}

/// Embeds `samples` and pairs each embedding with its subject id.
pub fn embed_labelled(model: &Mlp, samples: &[Sample]) -> Result<Vec<Labelled>> {
    samples
        .iter()
        .map(|s| Ok((s.subject_id, model.embed(&s.embedding)?)))
        .collect()
}

fn euclid(u: &[f64], v: &[f64]) -> f64 {
    sq_dist(u, v).sqrt()
}

/// Gallery subject ids ordered by ascending distance to `probe`.
pub fn identify(probe: &[f64], gallery: &[Labelled]) -> Result<Vec<u32>> {
    if gallery.is_empty() {
        return Err(Error::Evaluation("cannot identify against an empty gallery".into()));
    }
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for (id, emb) in gallery {
        check_dim(probe.len(), emb.len())?;
        let d = euclid(probe, emb);
        best.entry(*id)
            .and_modify(|b| {
                if d < *b {
                    *b = d
                }
            })
            .or_insert(d);
    }
    let mut ranked: Vec<(u32, f64)> = best.into_iter().collect();
    ranked.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    Ok(ranked.into_iter().map(|(id, _)| id).collect())
}

/// Cumulative match characteristic; `values[k]` is the rank-(k+1) accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmcCurve {
    pub values: Vec<f64>,
}

impl CmcCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rank-k accuracy with `k` clamped to the gallery size.
    pub fn saturating(&self, k: usize) -> f64 {
        self.values[k.clamp(1, self.values.len()) - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcResult {
    pub curve: CmcCurve,
    /// Indices of probes whose subject is missing from the gallery.
    pub unmatched: Vec<usize>,
}

/// CMC from `(true subject, ranked gallery ids)` per probe.
pub fn cmc_curve(rankings: &[(u32, Vec<u32>)]) -> Result<CmcResult> {
    let Some((_, first)) = rankings.first() else {
        return Err(Error::Evaluation("no probes to build a CMC curve from".into()));
    };
    let size = first.len();
    if size == 0 {
        return Err(Error::Evaluation("empty ranking".into()));
    }
    let mut hits = vec![0usize; size];
    let mut unmatched = Vec::new();
    for (i, (truth, ranking)) in rankings.iter().enumerate() {
        check_dim(size, ranking.len())?;
        match ranking.iter().position(|id| id == truth) {
            Some(pos) => hits[pos] += 1,
            None => unmatched.push(i),
        }
    }
    if !unmatched.is_empty() {
        log::warn!("{} probes have no enrolled subject", unmatched.len());
    }
    let n = rankings.len() as f64;
    let mut cumulative = 0usize;
    let values = hits
        .into_iter()
        .map(|h| {
            cumulative += h;
            cumulative as f64 / n
        })
        .collect();
    Ok(CmcResult {
        curve: CmcCurve { values },
        unmatched,
    })
}

pub fn rank_k_accuracy(curve: &CmcCurve, k: usize) -> Result<f64> {
    if k == 0 || k > curve.len() {
        return Err(Error::Evaluation(format!(
            "rank {k} outside 1..={} (gallery size)",
            curve.len()
        )));
    }
    Ok(curve.values[k - 1])
}

/// One operating point of the verification curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GarAtFar {
    pub target_far: f64,
    pub achieved_far: f64,
    pub gar: f64,
    /// Accept when `distance <= threshold`; `None` when only rejecting
    /// everything keeps the FAR under target.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct VerificationReport {
    pub genuine_scores: Vec<f64>,
    pub imposter_scores: Vec<f64>,
    pub gar_at_far: Vec<GarAtFar>,
}

impl VerificationReport {
    pub fn from_scores(genuine_scores: Vec<f64>, imposter_scores: Vec<f64>) -> Self {
        VerificationReport {
            genuine_scores,
            imposter_scores,
            gar_at_far: Vec::new(),
        }
    }

    /// Fills `gar_at_far` for each target.
    pub fn with_targets(mut self, targets: &[f64]) -> Result<Self> {
        self.gar_at_far = gar_at_far(&self.genuine_scores, &self.imposter_scores, targets)?;
        Ok(self)
    }
}

/// Euclidean distances of each pair's embeddings, split by label.
pub fn verification_scores(pairs: &[ContrastivePair<'_>], model: &Mlp) -> Result<VerificationReport> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("no verification pairs".into()));
    }
    let mut report = VerificationReport::default();
    for p in pairs {
        let d = euclid(&model.embed(&p.first.embedding)?, &model.embed(&p.second.embedding)?);
        match p.label {
            SetLabel::Genuine => report.genuine_scores.push(d),
            SetLabel::Imposter => report.imposter_scores.push(d),
        }
    }
    Ok(report)
}

/// Conservative GAR at each target FAR.
///
/// Candidate thresholds are the pooled genuine and imposter scores. The chosen
/// threshold is the largest candidate whose empirical FAR (share of imposter
/// scores `<=` it) does not exceed the target; no interpolation.
pub fn gar_at_far(genuine: &[f64], imposter: &[f64], targets: &[f64]) -> Result<Vec<GarAtFar>> {
    if genuine.is_empty() || imposter.is_empty() {
        return Err(Error::Evaluation("GAR@FAR needs genuine and imposter scores".into()));
    }
    if genuine.iter().chain(imposter).any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite verification score".into()));
    }
    let sorted = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (gen, imp) = (sorted(genuine), sorted(imposter));
    let mut pool: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    pool.sort_by(f64::total_cmp);
    pool.dedup();
    let accepted = |xs: &[f64], t: f64| xs.partition_point(|&s| s <= t);
    let far = |t: f64| accepted(&imp, t) as f64 / imp.len() as f64;

    targets
        .iter()
        .map(|&target| {
            if !(target > 0.0 && target <= 1.0) {
                return Err(Error::Config(format!("target FAR must lie in (0, 1], got {target}")));
            }
            // far() is non-decreasing along the sorted pool
            let n_ok = pool.partition_point(|&t| far(t) <= target);
            Ok(match n_ok.checked_sub(1).map(|i| pool[i]) {
                Some(t) => GarAtFar {
                    target_far: target,
                    achieved_far: far(t),
                    gar: accepted(&gen, t) as f64 / gen.len() as f64,
                    threshold: Some(t),
                },
                None => GarAtFar {
                    target_far: target,
                    achieved_far: 0.0,
                    gar: 0.0,
                    threshold: None,
                },
            })
        })
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

fn maybe_normalized(xs: &[Labelled], normalize: bool) -> Vec<Labelled> {
    xs.iter()
        .map(|(id, e)| (*id, if normalize { unit(e) } else { e.clone() }))
        .collect()
}

fn mean_distance(gallery: &[Labelled], probes: &[Labelled], normalize: bool, same_subject: bool) -> Result<f64> {
    let subjects: BTreeSet<u32> = gallery.iter().chain(probes).map(|(id, _)| *id).collect();
    if !same_subject && subjects.len() < 2 {
        return Err(Error::Evaluation("inter-class distance needs at least 2 subjects".into()));
    }
    let (gallery, probes) = (maybe_normalized(gallery, normalize), maybe_normalized(probes, normalize));
    let mut sum = 0.0;
    let mut count = 0usize;
    for (gi, g) in &gallery {
        for (pi, p) in &probes {
            if (gi == pi) == same_subject {
                check_dim(g.len(), p.len())?;
                sum += euclid(g, p);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Evaluation("no gallery/probe pairs to average".into()));
    }
    Ok(sum / count as f64)
}

/// Mean distance between each gallery sample and the probes of *other*
/// subjects, optionally after unit-L2 normalization.
pub fn mean_inter_class_distance(gallery: &[Labelled], probes: &[Labelled], normalize: bool) -> Result<f64> {
    mean_distance(gallery, probes, normalize, false)
}

/// Mean distance between each gallery sample and the probes of its own subject.
pub fn mean_intra_class_distance(gallery: &[Labelled], probes: &[Labelled], normalize: bool) -> Result<f64> {
    mean_distance(gallery, probes, normalize, true)
}

/// Embeds a partition with `model` and returns its mean inter-class distance.
pub fn model_inter_class_distance(model: &Mlp, partition: &GalleryProbePartition, normalize: bool) -> Result<f64> {
    mean_inter_class_distance(
        &embed_labelled(model, &partition.gallery)?,
        &embed_labelled(model, &partition.probe)?,
        normalize,
    )
}

/// Adds distractor subjects to the gallery; probes are untouched.
pub fn extend_gallery(partition: &GalleryProbePartition, distractors: &[Sample]) -> Result<GalleryProbePartition> {
    let taken: BTreeSet<u32> = partition
        .gallery
        .iter()
        .chain(&partition.probe)
        .map(|s| s.subject_id)
        .collect();
    if let Some(clash) = distractors.iter().find(|s| taken.contains(&s.subject_id)) {
        return Err(Error::Protocol(format!(
            "distractor subject {} collides with an evaluated subject",
            clash.subject_id
        )));
    }
    let mut out = partition.clone();
    out.gallery.extend(distractors.iter().cloned());
    Ok(out)
}

/// The lowest-index non-injured sample of every subject in `ds`.
pub fn distractor_gallery(ds: &Dataset) -> Vec<Sample> {
    ds.subjects()
        .iter()
        .filter_map(|s| s.non_injured.iter().min_by_key(|x| x.index).cloned())
        .collect()
}

// ---------------------------------------------------------------------------
// Protocol harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub ranks: Vec<usize>,
    pub target_fars: Vec<f64>,
    /// Unit-normalize embeddings before the inter-class distance statistic.
    pub normalize: bool,
    pub verification_genuine: usize,
    pub verification_imposter: usize,
    pub single_image_gallery: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ranks: vec![1, 5, 10],
            target_fars: vec![0.01, 0.1],
            normalize: true,
            verification_genuine: 50,
            verification_imposter: 50,
            single_image_gallery: true,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::Config("ranks must be non-empty and >= 1".into()));
        }
        if let Some(t) = self.target_fars.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("target FAR must lie in (0, 1], got {t}")));
        }
        if self.verification_genuine == 0 || self.verification_imposter == 0 {
            return Err(Error::Config("verification pair counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankAccuracy {
    pub rank: usize,
    pub accuracy: f64,
}

/// Evaluation of one model on one test partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionEval {
    /// Distinct gallery subjects, distractors included.
    pub gallery_subjects: usize,
    pub gallery_samples: usize,
    pub probe_count: usize,
    pub excluded: Vec<ExcludedSubject>,
    /// Ranks beyond the gallery size report the full-gallery accuracy.
    pub rank_accuracy: Vec<RankAccuracy>,
    pub cmc: Vec<f64>,
    pub unmatched_probes: usize,
    pub verification: Vec<GarAtFar>,
    pub mean_inter_class_distance: f64,
    #[serde(skip)]
    pub genuine_scores: Vec<f64>,
    #[serde(skip)]
    pub imposter_scores: Vec<f64>,
}

/// Identification, verification and distance statistics of `model` on
/// `partition`. Verification pairs are drawn from `test` with `verify_seed`.
pub fn evaluate_partition(
    model: &Mlp,
    test: &Dataset,
    partition: &GalleryProbePartition,
    opts: &EvalOptions,
    verify_seed: u64,
) -> Result<PartitionEval> {
    opts.validate()?;
    if partition.probe.is_empty() {
        return Err(Error::Evaluation("partition has no probes".into()));
    }
    let gallery = embed_labelled(model, &partition.gallery)?;
    let probes = embed_labelled(model, &partition.probe)?;
    let rankings = probes
        .iter()
        .map(|(truth, emb)| Ok((*truth, identify(emb, &gallery)?)))
        .collect::<Result<Vec<_>>>()?;
    let cmc = cmc_curve(&rankings)?;
    let rank_accuracy = opts
        .ranks
        .iter()
        .map(|&rank| RankAccuracy {
            rank,
            accuracy: cmc.curve.saturating(rank),
        })
        .collect();

    let pairs = sample_verification_pairs(test, opts.verification_genuine, opts.verification_imposter, verify_seed)?;
    let verification = verification_scores(&pairs, model)?.with_targets(&opts.target_fars)?;

    // Distractors are not part of the inter-class statistic.
    let own_gallery: Vec<Labelled> = gallery
        .iter()
        .filter(|(id, _)| test.subject(*id).is_some())
        .cloned()
        .collect();
    let inter = mean_inter_class_distance(&own_gallery, &probes, opts.normalize)?;

    Ok(PartitionEval {
        gallery_subjects: partition.gallery_subjects().len(),
        gallery_samples: partition.gallery.len(),
        probe_count: partition.probe.len(),
        excluded: partition.excluded.clone(),
        rank_accuracy,
        cmc: cmc.curve.values,
        unmatched_probes: cmc.unmatched.len(),
        verification: verification.gar_at_far,
        mean_inter_class_distance: inter,
        genuine_scores: verification.genuine_scores,
        imposter_scores: verification.imposter_scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub train_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
    #[serde(flatten)]
    pub eval: PartitionEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation, summed in index order.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSummary {
    pub rank: usize,
    #[serde(flatten)]
    pub accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FarSummary {
    pub target_far: f64,
    #[serde(flatten)]
    pub gar: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub ranks: Vec<RankSummary>,
    pub gar_at_far: Vec<FarSummary>,
    pub mean_inter_class_distance: MeanStd,
    /// Element-wise mean CMC over repetitions, truncated to the shortest curve.
    pub mean_cmc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub extended_gallery: bool,
    pub normalized: bool,
    pub repetitions: Vec<RepetitionResult>,
    pub summary: Summary,
}

impl EvalReport {
    pub fn from_repetitions(repetitions: Vec<RepetitionResult>, opts: &EvalOptions, extended_gallery: bool) -> Self {
        let ranks = opts
            .ranks
            .iter()
            .enumerate()
            .map(|(i, &rank)| RankSummary {
                rank,
                accuracy: mean_std(
                    &repetitions
                        .iter()
                        .map(|r| r.eval.rank_accuracy[i].accuracy)
                        .collect::<Vec<_>>(),
                ),
            })
            .collect();
        let gar_at_far = opts
            .target_fars
            .iter()
            .enumerate()
            .map(|(i, &target_far)| FarSummary {
                target_far,
                gar: mean_std(&repetitions.iter().map(|r| r.eval.verification[i].gar).collect::<Vec<_>>()),
            })
            .collect();
        let inter = mean_std(
            &repetitions
                .iter()
                .map(|r| r.eval.mean_inter_class_distance)
                .collect::<Vec<_>>(),
        );
        let len = repetitions.iter().map(|r| r.eval.cmc.len()).min().unwrap_or(0);
        let mean_cmc = (0..len)
            .map(|k| mean_std(&repetitions.iter().map(|r| r.eval.cmc[k]).collect::<Vec<_>>()).mean)
            .collect();
        EvalReport {
            extended_gallery,
            normalized: opts.normalize,
            repetitions,
            summary: Summary {
                ranks,
                gar_at_far,
                mean_inter_class_distance: inter,
                mean_cmc,
            },
        }
    }

    /// True when every reported number is finite.
    pub fn is_finite(&self) -> bool {
        let ok = |m: &MeanStd| m.mean.is_finite() && m.std.is_finite();
        let reps = self.repetitions.iter().all(|r| {
            let e = &r.eval;
            e.mean_inter_class_distance.is_finite()
                && e.cmc.iter().chain(&e.genuine_scores).chain(&e.imposter_scores).all(|v| v.is_finite())
                && e.verification.iter().all(|v| v.threshold.is_none_or(f64::is_finite))
        });
        reps && self.summary.ranks.iter().all(|r| ok(&r.accuracy))
            && self.summary.gar_at_far.iter().all(|g| ok(&g.gar))
            && ok(&self.summary.mean_inter_class_distance)
            && self.summary.mean_cmc.iter().all(|v| v.is_finite())
    }

    pub fn rank_summary(&self, rank: usize) -> Option<MeanStd> {
        self.summary.ranks.iter().find(|r| r.rank == rank).map(|r| r.accuracy)
    }
}

/// Evaluates a fixed `model` on the test side of split `repetition`.
pub fn evaluate_repetition(
    model: &Mlp,
    ds: &Dataset,
    split: &SplitSpec,
    repetition: usize,
    opts: &EvalOptions,
    distractors: &[Sample],
) -> Result<RepetitionResult> {
    check_dim(model.input_dim(), ds.dim())?;
    let (train_ids, test_ids) = split_ids(ds, split, repetition)?;
    let test = ds.subset(&test_ids.iter().copied().collect());
    let mut partition = gallery_probe_partition(&test, opts.single_image_gallery);
    if !distractors.is_empty() {
        partition = extend_gallery(&partition, distractors)?;
    }
    let verify_seed = seed::derive(split.seed, stream::VERIFY, repetition as u64);
    Ok(RepetitionResult {
        repetition,
        train_subjects: train_ids,
        test_subjects: test_ids,
        eval: evaluate_partition(model, &test, &partition, opts, verify_seed)?,
    })
}

/// Trains on the train side of split `repetition`.
pub fn train_repetition(ds: &Dataset, split: &SplitSpec, repetition: usize, cfg: &TrainConfig) -> Result<Mlp> {
    let (train_ids, _) = split_ids(ds, split, repetition)?;
    let train_ds = ds.subset(&train_ids.into_iter().collect());
    Ok(train(&train_ds, cfg)?.0)
}

/// Repeated random sub-sampling: for every repetition, split by subject,
/// train on the train side and evaluate on the test gallery/probe.
pub fn repeated_evaluation(
    ds: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    opts: &EvalOptions,
    distractors: &[Sample],
) -> Result<EvalReport> {
    split.validate()?;
    cfg.validate()?;
    opts.validate()?;
    let mut reps = Vec::with_capacity(split.repetitions);
    for repetition in 0..split.repetitions {
        let model = train_repetition(ds, split, repetition, cfg)?;
        reps.push(evaluate_repetition(&model, ds, split, repetition, opts, distractors)?);
    }
    Ok(EvalReport::from_repetitions(reps, opts, !distractors.is_empty()))
}
