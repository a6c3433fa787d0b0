//! Subclass-structured datasets.
//!
//! A subject owns two subclasses: non-injured samples (`N`) and injured
//! samples (`I`). Datasets come from the synthetic generator or from the
//! embedding CSV format, and are cut into subject-disjoint train/test splits
//! and gallery/probe partitions for evaluation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream, Rng};

/// Fixed-dimension feature vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Embedding(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subclass {
    NonInjured,
    Injured,
}

impl Subclass {
    pub fn code(self) -> &'static str {
        match self {
            Subclass::NonInjured => "N",
            Subclass::Injured => "I",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "N" => Some(Subclass::NonInjured),
            "I" => Some(Subclass::Injured),
            _ => None,
        }
    }
}

impl fmt::Display for Subclass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: u32,
    pub subclass: Subclass,
    pub index: u32,
    pub embedding: Embedding,
}

impl Sample {
    pub fn new(subject_id: u32, subclass: Subclass, index: u32, embedding: Embedding) -> Self {
        Sample {
            subject_id,
            subclass,
            index,
            embedding,
        }
    }

    pub fn key(&self) -> (u32, Subclass, u32) {
        (self.subject_id, self.subclass, self.index)
    }
}

/// All samples of one subject, split by subclass.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: u32,
    pub non_injured: Vec<Sample>,
    pub injured: Vec<Sample>,
}

impl SubjectRecord {
    pub fn new(subject_id: u32) -> Self {
        SubjectRecord {
            subject_id,
            non_injured: Vec::new(),
            injured: Vec::new(),
        }
    }

    pub fn samples(&self, subclass: Subclass) -> &[Sample] {
        match subclass {
            Subclass::NonInjured => &self.non_injured,
            Subclass::Injured => &self.injured,
        }
    }

    pub fn len(&self) -> usize {
        self.non_injured.len() + self.injured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for subclass in [Subclass::NonInjured, Subclass::Injured] {
            let mut seen = HashSet::new();
            for s in self.samples(subclass) {
                if s.subject_id != self.subject_id || s.subclass != subclass {
                    return Err(Error::Protocol(format!(
                        "sample ({}, {}, {}) filed under subject {} subclass {}",
                        s.subject_id, s.subclass, s.index, self.subject_id, subclass
                    )));
                }
                if !seen.insert(s.index) {
                    return Err(Error::Protocol(format!(
                        "duplicate sample ({}, {}, {})",
                        s.subject_id, s.subclass, s.index
                    )));
                }
                if s.embedding.len() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        actual: s.embedding.len(),
                    });
                }
                if !s.embedding.is_finite() {
                    return Err(Error::Protocol(format!(
                        "non-finite embedding in sample ({}, {}, {})",
                        s.subject_id, s.subclass, s.index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A validated collection of subjects sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    subjects: Vec<SubjectRecord>,
}

impl Dataset {
    pub fn new(dim: usize, subjects: Vec<SubjectRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Protocol("embedding dimension must be positive".into()));
        }
        let mut ids = HashSet::new();
        for subject in &subjects {
            if !ids.insert(subject.subject_id) {
                return Err(Error::Protocol(format!(
                    "duplicate subject id {}",
                    subject.subject_id
                )));
            }
            subject.validate(dim)?;
        }
        Ok(Dataset { dim, subjects })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn subject(&self, id: u32) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.subjects.iter().map(|s| s.subject_id).collect()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_samples(&self) -> usize {
        self.subjects.iter().map(SubjectRecord::len).sum()
    }

    /// Every sample, subject by subject, non-injured before injured.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.subjects
            .iter()
            .flat_map(|s| s.non_injured.iter().chain(s.injured.iter()))
    }

    /// Restriction to the given subject ids, keeping this dataset's order.
    pub fn subset(&self, ids: &BTreeSet<u32>) -> Dataset {
        Dataset {
            dim: self.dim,
            subjects: self
                .subjects
                .iter()
                .filter(|s| ids.contains(&s.subject_id))
                .cloned()
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Parameters of the synthetic subclass generator.
///
/// Subject means sit on a sphere of radius `subject_radius`. Non-injured
/// samples scatter isotropically around the mean with `sigma_non_injured`;
/// injured samples are first displaced by `injury_shift` along one of the
/// subject's `n_injury_modes` unit directions and then scattered with
/// `sigma_injured`. With `shared_injury_modes` every subject uses the same
/// directions, drawn once per seed, so injuries look alike across people;
/// otherwise each subject draws its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub dim: usize,
    pub n_non_injured: usize,
    pub n_injured: usize,
    pub subject_radius: f64,
    pub sigma_non_injured: f64,
    pub sigma_injured: f64,
    pub injury_shift: f64,
    pub n_injury_modes: usize,
    pub shared_injury_modes: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::easy(0)
    }
}

impl SynthConfig {
    /// Well-separated subjects with a single small injury offset.
    pub fn easy(seed: u64) -> Self {
        SynthConfig {
            n_subjects: 10,
            dim: 16,
            n_non_injured: 3,
            n_injured: 4,
            subject_radius: 5.0,
            sigma_non_injured: 0.1,
            sigma_injured: 0.1,
            injury_shift: 2.0,
            n_injury_modes: 1,
            shared_injury_modes: true,
            seed,
        }
    }

    /// Crowded subjects with three injury directions and noisy injured samples.
    pub fn hard(seed: u64) -> Self {
        SynthConfig {
            n_subjects: 30,
            dim: 16,
            n_non_injured: 1,
            n_injured: 9,
            subject_radius: 2.0,
            sigma_non_injured: 0.1,
            sigma_injured: 0.3,
            injury_shift: 3.0,
            n_injury_modes: 3,
            shared_injury_modes: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("subject_radius", self.subject_radius),
            ("sigma_non_injured", self.sigma_non_injured),
            ("sigma_injured", self.sigma_injured),
            ("injury_shift", self.injury_shift),
        ];
        for (name, value) in scales {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {value}"
                )));
            }
        }
        let counts = [
            ("n_subjects", self.n_subjects),
            ("dim", self.dim),
            ("n_non_injured", self.n_non_injured),
            ("n_injured", self.n_injured),
            ("n_injury_modes", self.n_injury_modes),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_subjects > u32::MAX as usize {
            return Err(Error::Config("n_subjects exceeds u32 range".into()));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a dataset from `cfg`; identical configs give bit-identical output.
///
/// Injured sample `k` of a subject uses injury mode `k % n_injury_modes`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    generate_with_ids(cfg, 0)
}

/// Like [`generate_synthetic`] but numbering subjects from `first_id`.
pub fn generate_with_ids(cfg: &SynthConfig, first_id: u32) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seed::derived_rng(cfg.seed, stream::SYNTH, u64::from(first_id));
    let d = cfg.dim;
    let shared: Vec<Vec<f64>> = if cfg.shared_injury_modes {
        let mut mode_rng = seed::derived_rng(cfg.seed, stream::INJURY_MODES, 0);
        (0..cfg.n_injury_modes).map(|_| unit_vec(&mut mode_rng, d)).collect()
    } else {
        Vec::new()
    };
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let id = first_id
            .checked_add(i as u32)
            .ok_or_else(|| Error::Config("subject id overflow".into()))?;
        let mean: Vec<f64> = unit_vec(&mut rng, d)
            .into_iter()
            .map(|x| x * cfg.subject_radius)
            .collect();
        let modes: Vec<Vec<f64>> = if cfg.shared_injury_modes {
            shared.clone()
        } else {
            (0..cfg.n_injury_modes).map(|_| unit_vec(&mut rng, d)).collect()
        };

        let mut record = SubjectRecord::new(id);
        for p in 0..cfg.n_non_injured {
            let noise = gaussian_vec(&mut rng, d, cfg.sigma_non_injured);
            let x = mean.iter().zip(&noise).map(|(m, n)| m + n).collect::<Vec<_>>();
            record
                .non_injured
                .push(Sample::new(id, Subclass::NonInjured, p as u32, x.into()));
        }
        for q in 0..cfg.n_injured {
            let mode = &modes[q % cfg.n_injury_modes];
            let noise = gaussian_vec(&mut rng, d, cfg.sigma_injured);
            let x = mean
                .iter()
                .zip(mode)
                .zip(&noise)
                .map(|((m, u), n)| m + cfg.injury_shift * u + n)
                .collect::<Vec<_>>();
            record
                .injured
                .push(Sample::new(id, Subclass::Injured, q as u32, x.into()));
        }
        subjects.push(record);
    }
    Dataset::new(d, subjects)
}

// ---------------------------------------------------------------------------
// Embedding CSV
// ---------------------------------------------------------------------------

const HEADER_PREFIX: [&str; 3] = ["subject_id", "subclass", "sample_index"];

pub fn save_embeddings(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(ds, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Writes `subject_id,subclass,sample_index,f0,...` rows with LF endings.
pub fn write_embeddings<W: Write>(ds: &Dataset, writer: W) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header: Vec<String> = HEADER_PREFIX.iter().map(|s| s.to_string()).collect();
    header.extend((0..ds.dim).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(ds.dim + 3);
    for s in ds.samples() {
        row.clear();
        row.push(s.subject_id.to_string());
        row.push(s.subclass.code().to_string());
        row.push(s.index.to_string());
        row.extend(s.embedding.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(std::io::BufReader::new(file), path)
}

/// Parses the embedding CSV. `origin` only labels error messages.
///
/// Subjects come back ordered by id and samples by index within each subclass.
pub fn read_embeddings<R: Read>(reader: R, origin: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);

    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.len() < 4 || header.iter().take(3).ne(HEADER_PREFIX.iter().copied()) {
        return Err(parse_err(
            1,
            "header must start with subject_id,subclass,sample_index and name at least one feature"
                .into(),
        ));
    }
    let dim = header.len() - 3;
    for (k, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{k}") {
            return Err(parse_err(1, format!("expected column f{k}, found {name:?}")));
        }
    }

    let mut by_subject: BTreeMap<u32, SubjectRecord> = BTreeMap::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 3 {
            return Err(parse_err(
                line,
                format!(
                    "row has {} features, header declares {dim}",
                    record.len().saturating_sub(3)
                ),
            ));
        }
        let subject_id: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad subject_id {:?}", &record[0])))?;
        let subclass = Subclass::from_code(record[1].trim())
            .ok_or_else(|| parse_err(line, format!("bad subclass {:?}", &record[1])))?;
        let index: u32 = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad sample_index {:?}", &record[2])))?;
        if !seen.insert((subject_id, subclass, index)) {
            return Err(parse_err(
                line,
                format!("duplicate sample ({subject_id}, {subclass}, {index})"),
            ));
        }
        let values = record
            .iter()
            .skip(3)
            .map(|field| match field.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(line, format!("bad feature value {field:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;

        let subject = by_subject
            .entry(subject_id)
            .or_insert_with(|| SubjectRecord::new(subject_id));
        let sample = Sample::new(subject_id, subclass, index, values.into());
        match subclass {
            Subclass::NonInjured => subject.non_injured.push(sample),
            Subclass::Injured => subject.injured.push(sample),
        }
    }

    let subjects = by_subject
        .into_values()
        .map(|mut s| {
            s.non_injured.sort_by_key(|x| x.index);
            s.injured.sort_by_key(|x| x.index);
            s
        })
        .collect();
    Dataset::new(dim, subjects)
}

// ---------------------------------------------------------------------------
// Protocol: subject split and gallery/probe partition
// ---------------------------------------------------------------------------

/// Repeated random sub-sampling of subjects into train and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
    pub repetitions: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            seed: 0,
            train_fraction: 0.7,
            repetitions: 5,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        Ok(())
    }

    /// Train subject count for `n_subjects`: `round(fraction * n)`, kept in `[1, n-1]`.
    pub fn train_size(&self, n_subjects: usize) -> usize {
        let raw = (self.train_fraction * n_subjects as f64).round() as usize;
        raw.clamp(1, n_subjects.saturating_sub(1).max(1))
    }
}

/// Train/test subject ids of one repetition, both sorted ascending.
pub fn split_ids(ds: &Dataset, spec: &SplitSpec, repetition: usize) -> Result<(Vec<u32>, Vec<u32>)> {
    spec.validate()?;
    if ds.n_subjects() < 2 {
        return Err(Error::Protocol(format!(
            "a subject split needs at least 2 subjects, dataset has {}",
            ds.n_subjects()
        )));
    }
    if repetition >= spec.repetitions {
        return Err(Error::Protocol(format!(
            "repetition {repetition} out of range (repetitions = {})",
            spec.repetitions
        )));
    }
    let mut ids = ds.subject_ids();
    ids.sort_unstable();
    let mut rng = seed::derived_rng(spec.seed, stream::SPLIT, repetition as u64);
    ids.shuffle(&mut rng);
    let n_train = spec.train_size(ids.len());
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Subject-disjoint split for one repetition; deterministic in `(seed, repetition)`.
pub fn subject_split(ds: &Dataset, spec: &SplitSpec, repetition: usize) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_ids(ds, spec, repetition)?;
    let train: BTreeSet<u32> = train.into_iter().collect();
    let test: BTreeSet<u32> = test.into_iter().collect();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedSubject {
    pub subject_id: u32,
    pub reason: String,
}

/// Non-injured gallery and injured probe drawn from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryProbePartition {
    pub gallery: Vec<Sample>,
    pub probe: Vec<Sample>,
    pub single_image_gallery: bool,
    pub excluded: Vec<ExcludedSubject>,
}

impl GalleryProbePartition {
    pub fn gallery_subjects(&self) -> BTreeSet<u32> {
        self.gallery.iter().map(|s| s.subject_id).collect()
    }
}

/// Builds the gallery from non-injured samples and the probe from injured ones.
///
/// With `single_image_gallery` each subject enrolls only its lowest-index
/// non-injured sample. Subjects lacking either subclass are dropped and listed
/// in `excluded`.
pub fn gallery_probe_partition(ds: &Dataset, single_image_gallery: bool) -> GalleryProbePartition {
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    let mut excluded = Vec::new();
    for subject in ds.subjects() {
        let reason = match (subject.non_injured.is_empty(), subject.injured.is_empty()) {
            (true, true) => Some("no non-injured and no injured samples"),
            (true, false) => Some("no non-injured samples"),
            (false, true) => Some("no injured samples"),
            (false, false) => None,
        };
        if let Some(reason) = reason {
            log::warn!("subject {} excluded from gallery/probe: {reason}", subject.subject_id);
            excluded.push(ExcludedSubject {
                subject_id: subject.subject_id,
                reason: reason.to_string(),
            });
            continue;
        }
        if single_image_gallery {
            let first = subject
                .non_injured
                .iter()
                .min_by_key(|s| s.index)
                .expect("non-empty");
            gallery.push(first.clone());
        } else {
            gallery.extend(subject.non_injured.iter().cloned());
        }
        probe.extend(subject.injured.iter().cloned());
    }
    GalleryProbePartition {
        gallery,
        probe,
        single_image_gallery,
        excluded,
    }
}
