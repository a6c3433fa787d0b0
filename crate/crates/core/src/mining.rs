//! Training-unit construction.
//!
//! Genuine sets pair a subject's non-injured sample with one of its injured
//! samples, then that injured sample with a second injured sample of the same
//! subject. Imposter sets swap in an injured sample of another subject `j` as
//! the shared middle element:
//!
//! ```text
//! genuine  = [{N_i,p, I_i,q}, {I_i,q, I_i,r}]
//! imposter = [{N_i,p, I_j,q}, {I_j,q, I_i,r}]
//! ```
//!
//! All units borrow their samples from the source [`Dataset`]; nothing is
//! copied or fabricated. Sampling is uniform and fully determined by the seed.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::dataset::{Dataset, Sample, SubjectRecord};
use crate::error::{Error, Result};
use crate::losses::SetLabel;
use crate::seed::{self, stream, Rng};

/// Genuine set of one subject; `c` is absent when the subject has a single
/// injured sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenuineSet<'a> {
    pub a: &'a Sample,
    pub b: &'a Sample,
    pub c: Option<&'a Sample>,
}

/// Imposter set: `a` and `c` from subject `i`, the shared `b` from subject `j != i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImposterSet<'a> {
    pub a: &'a Sample,
    pub b: &'a Sample,
    pub c: Option<&'a Sample>,
}

/// A labelled three-slot training unit.
pub trait SampleSet<'a> {
    const LABEL: SetLabel;
    fn slots(&self) -> (&'a Sample, &'a Sample, Option<&'a Sample>);
}

impl<'a> SampleSet<'a> for GenuineSet<'a> {
    const LABEL: SetLabel = SetLabel::Genuine;
    fn slots(&self) -> (&'a Sample, &'a Sample, Option<&'a Sample>) {
        (self.a, self.b, self.c)
    }
}

impl<'a> SampleSet<'a> for ImposterSet<'a> {
    const LABEL: SetLabel = SetLabel::Imposter;
    fn slots(&self) -> (&'a Sample, &'a Sample, Option<&'a Sample>) {
        (self.a, self.b, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastivePair<'a> {
    pub first: &'a Sample,
    pub second: &'a Sample,
    pub label: SetLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet<'a> {
    pub anchor: &'a Sample,
    pub positive: &'a Sample,
    pub negative: &'a Sample,
}

/// A mixed batch of genuine-labelled and imposter-labelled units.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<G, M> {
    pub genuine: Vec<G>,
    pub imposter: Vec<M>,
}

impl<G, M> Batch<G, M> {
    pub fn len(&self) -> usize {
        self.genuine.len() + self.imposter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn pick<'a>(rng: &mut Rng, xs: &'a [Sample]) -> &'a Sample {
    xs.choose(rng).expect("non-empty subclass")
}

/// Subjects that can serve as `j` in an imposter unit.
fn injured_subjects(ds: &Dataset) -> Vec<&SubjectRecord> {
    ds.subjects().iter().filter(|s| !s.injured.is_empty()).collect()
}

fn other_subject<'a>(rng: &mut Rng, pool: &[&'a SubjectRecord], i: u32) -> &'a SubjectRecord {
    // pool has >= 2 entries, at most one of which is i
    loop {
        let s = *pool.choose(rng).expect("non-empty pool");
        if s.subject_id != i {
            return s;
        }
    }
}

fn require_imposter_pool<'a>(ds: &'a Dataset, what: &str) -> Result<Vec<&'a SubjectRecord>> {
    let pool = injured_subjects(ds);
    if pool.len() < 2 {
        return Err(Error::Mining(format!(
            "{what} need at least 2 subjects with injured samples, found {}",
            pool.len()
        )));
    }
    Ok(pool)
}

/// `per_subject` genuine sets for every subject with non-injured and injured samples.
pub fn build_genuine_sets(ds: &Dataset, per_subject: usize, seed: u64) -> Vec<GenuineSet<'_>> {
    let mut rng = seed::derived_rng(seed, stream::MINE_GENUINE, 0);
    let mut out = Vec::with_capacity(per_subject * ds.n_subjects());
    for subject in ds.subjects() {
        if subject.non_injured.is_empty() || subject.injured.is_empty() {
            log::warn!(
                "subject {} skipped for genuine sets: needs non-injured and injured samples",
                subject.subject_id
            );
            continue;
        }
        for _ in 0..per_subject {
            let a = pick(&mut rng, &subject.non_injured);
            let (b, c) = match subject.injured.len() {
                1 => (&subject.injured[0], None),
                n => {
                    let q = rng.random_range(0..n);
                    let r = (q + rng.random_range(1..n)) % n;
                    (&subject.injured[q], Some(&subject.injured[r]))
                }
            };
            out.push(GenuineSet { a, b, c });
        }
    }
    out
}

/// `per_subject` imposter sets for every subject `i` with non-injured samples.
///
/// The second slot is an injured sample of a uniformly drawn `j != i`; the
/// third is an injured sample of `i` (absent if `i` has none).
pub fn build_imposter_sets(ds: &Dataset, per_subject: usize, seed: u64) -> Result<Vec<ImposterSet<'_>>> {
    let pool = require_imposter_pool(ds, "imposter sets")?;
    let mut rng = seed::derived_rng(seed, stream::MINE_IMPOSTER, 0);
    let mut out = Vec::with_capacity(per_subject * ds.n_subjects());
    for subject in ds.subjects() {
        if subject.non_injured.is_empty() {
            log::warn!(
                "subject {} skipped for imposter sets: no non-injured samples",
                subject.subject_id
            );
            continue;
        }
        for _ in 0..per_subject {
            let a = pick(&mut rng, &subject.non_injured);
            let other = other_subject(&mut rng, &pool, subject.subject_id);
            let b = pick(&mut rng, &other.injured);
            let c = subject.injured.choose(&mut rng);
            out.push(ImposterSet { a, b, c });
        }
    }
    Ok(out)
}

/// Balanced non-injured/injured pairs: per subject, `per_subject` genuine
/// pairs followed by `per_subject` imposter pairs.
pub fn build_cl_pairs(ds: &Dataset, per_subject: usize, seed: u64) -> Result<Vec<ContrastivePair<'_>>> {
    if per_subject == 0 {
        return Ok(Vec::new());
    }
    let pool = require_imposter_pool(ds, "contrastive pairs")?;
    let mut rng = seed::derived_rng(seed, stream::MINE_GENUINE, 1);
    let mut out = Vec::with_capacity(2 * per_subject * ds.n_subjects());
    for subject in ds.subjects() {
        if subject.non_injured.is_empty() || subject.injured.is_empty() {
            log::warn!("subject {} skipped for contrastive pairs", subject.subject_id);
            continue;
        }
        for _ in 0..per_subject {
            out.push(ContrastivePair {
                first: pick(&mut rng, &subject.non_injured),
                second: pick(&mut rng, &subject.injured),
                label: SetLabel::Genuine,
            });
        }
        for _ in 0..per_subject {
            let other = other_subject(&mut rng, &pool, subject.subject_id);
            out.push(ContrastivePair {
                first: pick(&mut rng, &subject.non_injured),
                second: pick(&mut rng, &other.injured),
                label: SetLabel::Imposter,
            });
        }
    }
    Ok(out)
}

/// Triplets with a non-injured anchor, an injured positive of the same subject
/// and an injured negative of a uniformly drawn other subject.
pub fn build_triplets(ds: &Dataset, per_subject: usize, seed: u64) -> Result<Vec<Triplet<'_>>> {
    let pool = require_imposter_pool(ds, "triplets")?;
    let mut rng = seed::derived_rng(seed, stream::MINE_IMPOSTER, 1);
    let mut out = Vec::with_capacity(per_subject * ds.n_subjects());
    for subject in ds.subjects() {
        if subject.non_injured.is_empty() || subject.injured.is_empty() {
            log::warn!("subject {} skipped for triplets", subject.subject_id);
            continue;
        }
        for _ in 0..per_subject {
            let anchor = pick(&mut rng, &subject.non_injured);
            let positive = pick(&mut rng, &subject.injured);
            let other = other_subject(&mut rng, &pool, subject.subject_id);
            out.push(Triplet {
                anchor,
                positive,
                negative: pick(&mut rng, &other.injured),
            });
        }
    }
    Ok(out)
}

/// `n_genuine` genuine and `n_imposter` imposter non-injured/injured pairs,
/// drawn uniformly over subjects, for verification scoring.
pub fn sample_verification_pairs(
    ds: &Dataset,
    n_genuine: usize,
    n_imposter: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair<'_>>> {
    let pool = require_imposter_pool(ds, "verification pairs")?;
    let anchors: Vec<&SubjectRecord> = ds
        .subjects()
        .iter()
        .filter(|s| !s.non_injured.is_empty() && !s.injured.is_empty())
        .collect();
    if anchors.is_empty() {
        return Err(Error::Mining(
            "verification pairs need a subject with both subclasses".into(),
        ));
    }
    let mut rng = seed::derived_rng(seed, stream::VERIFY, 0);
    let mut out = Vec::with_capacity(n_genuine + n_imposter);
    for _ in 0..n_genuine {
        let s = *anchors.choose(&mut rng).expect("non-empty");
        out.push(ContrastivePair {
            first: pick(&mut rng, &s.non_injured),
            second: pick(&mut rng, &s.injured),
            label: SetLabel::Genuine,
        });
    }
    for _ in 0..n_imposter {
        let s = *anchors.choose(&mut rng).expect("non-empty");
        let other = other_subject(&mut rng, &pool, s.subject_id);
        out.push(ContrastivePair {
            first: pick(&mut rng, &s.non_injured),
            second: pick(&mut rng, &other.injured),
            label: SetLabel::Imposter,
        });
    }
    Ok(out)
}

/// Shuffles both lists and deals them into batches of `batch_size` units,
/// half genuine and half imposter (the odd unit goes to genuine). When one
/// list runs dry the other fills the remaining slots; the last batch may be
/// short.
pub fn make_batches<G, M>(
    mut genuine: Vec<G>,
    mut imposter: Vec<M>,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch<G, M>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let mut rng = seed::derived_rng(seed, stream::BATCH, 0);
    genuine.shuffle(&mut rng);
    imposter.shuffle(&mut rng);
    let mut genuine = genuine.into_iter().peekable();
    let mut imposter = imposter.into_iter().peekable();
    let mut batches = Vec::new();
    let (mut g_left, mut m_left) = (genuine.len(), imposter.len());
    while g_left + m_left > 0 {
        let mut g_take = batch_size.div_ceil(2).min(g_left);
        let m_take = (batch_size - g_take).min(m_left);
        g_take = (batch_size - m_take).min(g_left);
        batches.push(Batch {
            genuine: genuine.by_ref().take(g_take).collect(),
            imposter: imposter.by_ref().take(m_take).collect(),
        });
        g_left -= g_take;
        m_left -= m_take;
    }
    Ok(batches)
}

/// Shuffles `items` and cuts them into chunks of `batch_size`.
pub fn shuffled_chunks<T>(mut items: Vec<T>, batch_size: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut rng = seed::derived_rng(seed, stream::BATCH, 1);
    items.shuffle(&mut rng);
    let mut out = Vec::with_capacity(items.len().div_ceil(batch_size));
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(batch_size).collect());
    }
    Ok(out)
}
