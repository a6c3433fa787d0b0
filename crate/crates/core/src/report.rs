//! Run configuration and report emission.
//!
//! A run is described by a versioned TOML file. Reports are pretty-printed
//! JSON that echo the resolved configuration, accompanied by `rank,cmc` and
//! `threshold,far,gar` CSV curves and small SVG plots. Nothing
//! time-dependent is written, so identical inputs give identical files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{repeated_evaluation, EvalOptions, EvalReport, MeanStd, RankSummary};
use crate::training::{LossKind, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Input and output locations; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub extended_gallery: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a command needs, as read from TOML and then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Global seed; when set it replaces the synth, split and train seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: None,
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sets the global seed and propagates it to every section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.synth.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }
}

// ---------------------------------------------------------------------------
// Structured reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRunReport {
    pub format_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub loss: LossKind,
    pub ranks: Vec<RankSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossResult {
    pub loss: LossKind,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub format_version: u32,
    pub config: RunConfig,
    pub table: Vec<CompareRow>,
    pub results: Vec<LossResult>,
}

/// Trains and evaluates CL, TL and SCL on identical splits and seeds.
pub fn compare(ds: &Dataset, cfg: &RunConfig, distractors: &[Sample]) -> Result<CompareReport> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(LossKind::ALL.len());
    for loss in LossKind::ALL {
        log::info!("compare: training and evaluating {}", loss.name());
        let train = TrainConfig {
            loss,
            ..cfg.train.clone()
        };
        let report = repeated_evaluation(ds, &cfg.split, &train, &cfg.eval, distractors)?;
        results.push(LossResult { loss, report });
    }
    let table = results
        .iter()
        .map(|r| CompareRow {
            loss: r.loss,
            ranks: r.report.summary.ranks.clone(),
        })
        .collect();
    Ok(CompareReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        table,
        results,
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn ensure_finite(report: &EvalReport) -> Result<()> {
    if report.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("evaluation produced non-finite values".into()))
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// CSV curves
// ---------------------------------------------------------------------------

pub fn cmc_csv(curve: &[f64]) -> String {
    let mut out = String::from("rank,cmc\n");
    for (k, v) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{}", k + 1, v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub far: f64,
    pub gar: f64,
}

/// FAR and GAR at every pooled score, accepting `distance <= threshold`.
pub fn verification_curve(genuine: &[f64], imposter: &[f64]) -> Vec<CurvePoint> {
    let sorted = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (gen, imp) = (sorted(genuine), sorted(imposter));
    let mut pool: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    pool.sort_by(f64::total_cmp);
    pool.dedup();
    let share = |xs: &[f64], t: f64| {
        if xs.is_empty() {
            0.0
        } else {
            xs.partition_point(|&s| s <= t) as f64 / xs.len() as f64
        }
    };
    pool.into_iter()
        .map(|t| CurvePoint {
            threshold: t,
            far: share(&imp, t),
            gar: share(&gen, t),
        })
        .collect()
}

pub fn far_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,far,gar\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.far, p.gar);
    }
    out
}

/// Genuine and imposter scores pooled over every repetition.
pub fn pooled_scores(report: &EvalReport) -> (Vec<f64>, Vec<f64>) {
    let mut genuine = Vec::new();
    let mut imposter = Vec::new();
    for r in &report.repetitions {
        genuine.extend_from_slice(&r.eval.genuine_scores);
        imposter.extend_from_slice(&r.eval.imposter_scores);
    }
    (genuine, imposter)
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

fn pct(m: MeanStd) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)
}

/// Markdown table with one row per loss and one column per rank, in percent.
pub fn compare_table_markdown(report: &CompareReport) -> String {
    let ranks: Vec<usize> = report.config.eval.ranks.clone();
    let mut out = String::from("| Loss |");
    for k in &ranks {
        let _ = write!(out, " Rank {k} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(ranks.len()));
    out.push('\n');
    for row in &report.table {
        let _ = write!(out, "| {} |", row.loss.name());
        for r in &row.ranks {
            let _ = write!(out, " {} |", pct(r.accuracy));
        }
        out.push('\n');
    }
    out
}

/// `loss,rank,mean,std` with accuracies as fractions.
pub fn compare_table_csv(report: &CompareReport) -> String {
    let mut out = String::from("loss,rank,mean,std\n");
    for row in &report.table {
        for r in &row.ranks {
            let _ = writeln!(out, "{},{},{},{}", row.loss.name(), r.rank, r.accuracy.mean, r.accuracy.std);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn svg_open(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} L{PAD} {} L{} {}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    s
}

fn sx(fraction: f64) -> f64 {
    PAD + fraction * (W - 2.0 * PAD)
}

fn sy(fraction: f64) -> f64 {
    H - PAD - fraction * (H - 2.0 * PAD)
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{name}</text>"#,
            W - PAD - 70.0,
            y,
            COLORS[i % COLORS.len()],
            W - PAD - 55.0,
            y + 9.0
        );
    }
}

/// CMC curves as polylines; the x axis runs over ranks 1..=longest curve.
pub fn cmc_svg(series: &[(&str, &[f64])]) -> String {
    let mut s = svg_open("CMC", "rank", "identification rate");
    let n = series.iter().map(|(_, c)| c.len()).max().unwrap_or(1).max(2);
    for (i, (_, curve)) in series.iter().enumerate() {
        let points: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.2},{:.2}", sx(k as f64 / (n - 1) as f64), sy(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            points.join(" "),
            COLORS[i % COLORS.len()]
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{n}</text>"#, W - PAD, H - PAD + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">1.0</text>"#, PAD - 4.0, PAD + 4.0);
    legend(&mut s, &series.iter().map(|(name, _)| *name).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Genuine and imposter distance histograms drawn as step polylines.
pub fn score_histogram_svg(genuine: &[f64], imposter: &[f64], bins: usize) -> String {
    let mut s = svg_open("Score distributions", "distance", "density");
    let bins = bins.max(1);
    let max = genuine
        .iter()
        .chain(imposter)
        .copied()
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let b = ((x / max) * bins as f64).floor() as usize;
            h[b.min(bins - 1)] += 1.0;
        }
        let n = xs.len().max(1) as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (hg, hi) = (hist(genuine), hist(imposter));
    let top = hg.iter().chain(&hi).copied().fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    for (i, h) in [hg, hi].iter().enumerate() {
        let mut points = vec![format!("{:.2},{:.2}", sx(0.0), sy(0.0))];
        for (b, v) in h.iter().enumerate() {
            let (x0, x1) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
            points.push(format!("{:.2},{:.2}", sx(x0), sy(v / top)));
            points.push(format!("{:.2},{:.2}", sx(x1), sy(v / top)));
        }
        points.push(format!("{:.2},{:.2}", sx(1.0), sy(0.0)));
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            points.join(" "),
            COLORS[i]
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{max:.3}</text>"#, W - PAD, H - PAD + 14.0);
    legend(&mut s, &["genuine", "imposter"]);
    s.push_str("</svg>\n");
    s
}

/// Writes `report.json`, `cmc.csv`, `far.csv`, `cmc.svg` and `scores.svg`.
pub fn write_eval_outputs(dir: &Path, report: &EvalRunReport) -> Result<()> {
    ensure_finite(&report.report)?;
    write_text(&dir.join("report.json"), &to_json(report)?)?;
    let cmc = &report.report.summary.mean_cmc;
    write_text(&dir.join("cmc.csv"), &cmc_csv(cmc))?;
    let (genuine, imposter) = pooled_scores(&report.report);
    write_text(&dir.join("far.csv"), &far_csv(&verification_curve(&genuine, &imposter)))?;
    write_text(&dir.join("cmc.svg"), &cmc_svg(&[(report.config.train.loss.name(), cmc)]))?;
    write_text(&dir.join("scores.svg"), &score_histogram_svg(&genuine, &imposter, 20))
}

/// Writes `compare.json`, `compare.md`, `compare.csv`, per-loss curves and a
/// combined CMC plot.
pub fn write_compare_outputs(dir: &Path, report: &CompareReport) -> Result<()> {
    report.results.iter().try_for_each(|r| ensure_finite(&r.report))?;
    write_text(&dir.join("compare.json"), &to_json(report)?)?;
    write_text(&dir.join("compare.md"), &compare_table_markdown(report))?;
    write_text(&dir.join("compare.csv"), &compare_table_csv(report))?;
    for r in &report.results {
        let name = r.loss.name().to_lowercase();
        write_text(&dir.join(format!("cmc_{name}.csv")), &cmc_csv(&r.report.summary.mean_cmc))?;
        let (genuine, imposter) = pooled_scores(&r.report);
        write_text(
            &dir.join(format!("far_{name}.csv")),
            &far_csv(&verification_curve(&genuine, &imposter)),
        )?;
    }
    let series: Vec<(&str, &[f64])> = report
        .results
        .iter()
        .map(|r| (r.loss.name(), r.report.summary.mean_cmc.as_slice()))
        .collect();
    write_text(&dir.join("cmc.svg"), &cmc_svg(&series))
}

/// Flushes a train log next to a checkpoint.
pub fn write_train_log(path: &Path, log: &crate::training::TrainLog) -> Result<()> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}
