//! Experiment protocols, rank-k and confusion-matrix metrics, and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    fit_pca, nn_rank, pca_project, probability_rank, svm_rank, train_gender_svm, train_ovr_svm, video_rank,
    ClassifyError, GallerySet, RankedPrediction, SvmParams,
};
use crate::cuboid::{CuboidError, CuboidSetStats, CuboidSource, LabeledWindow, WindowSet};
use crate::gaitnet::{
    extract_signatures, finetune_softmax, run_curriculum, CurriculumStage, GaitError, TrainSchedule, Trunk,
};
use crate::nnet::{load_checkpoint, save_checkpoint, NnError, Network, Tensor};
use crate::pipeline::{layout_windows, PipelineError, PreprocessParams};
use crate::videoio::{DatasetLayout, Gender, Scenario, SequenceRef, VideoError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} and {1} differ in length")]
    LengthMismatch(&'static str, &'static str),
    #[error("rank k must be at least 1")]
    InvalidK,
    #[error("no predictions")]
    Empty,
    #[error("label {label} outside the {classes} classes")]
    UnknownLabel { label: u32, classes: usize },
    #[error("subject {0} appears in more than one partition")]
    PartitionOverlap(u32),
    #[error("checkpoint {0} does not exist and training is disabled")]
    MissingCheckpoint(PathBuf),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("subject {0} has no sequences in the layout")]
    UnknownSubject(u32),
    #[error("no sequences match {0}")]
    NoSequences(String),
    #[error("subject {0} has no gender tag")]
    MissingGender(u32),
    #[error("subject {0} leaked into representation training")]
    Hygiene(u32),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Cuboid(#[from] CuboidError),
    #[error(transparent)]
    Gait(#[from] GaitError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl EvalError {
    /// True when the failure is a NaN or infinity in the numerics.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            EvalError::Gait(GaitError::NonFinite(_))
                | EvalError::Gait(GaitError::Nn(NnError::NonFinite { .. }))
                | EvalError::Nn(NnError::NonFinite { .. })
        )
    }
}

/// Percentage of predictions whose truth is among the first `k` entries.
pub fn rank_k_accuracy(preds: &[RankedPrediction], truth: &[u32], k: usize) -> Result<f64, EvalError> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch("predictions", "truth"));
    }
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = preds.iter().zip(truth).filter(|(p, &t)| p.hit_at(t, k)).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Rows normalized to percentages; empty rows stay zero.
    pub fn percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    /// Fraction on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        trace as f64 / total as f64
    }
}

pub fn confusion_matrix(pred: &[u32], truth: &[u32], classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch("predictions", "truth"));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for label in [p, t] {
            if label as usize >= classes {
                return Err(EvalError::UnknownLabel { label, classes });
            }
        }
        counts[t as usize][p as usize] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Identification on N / B / S probes.
    A,
    /// Identification on the elapsed-time probes.
    B,
    /// Gender recognition.
    C,
}

impl Protocol {
    pub fn default_probe_tags(self) -> Vec<String> {
        let tags: &[&str] = match self {
            Protocol::A | Protocol::C => &["N5", "N6", "B1", "B2", "S1", "S2"],
            Protocol::B => &["TN1", "TN2", "TB1", "TB2", "TS1", "TS2"],
        };
        tags.iter().map(|t| t.to_string()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// The fine-tuned softmax layer.
    Sm,
    Svm,
    NnPca,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Sm => "sm",
            ClassifierKind::Svm => "svm",
            ClassifierKind::NnPca => "nn-pca",
        }
    }
}

/// Splits a sequence tag such as `TB2` into scenario and index.
pub fn parse_tag(tag: &str) -> Option<(Scenario, u32)> {
    let split = tag.find(|c: char| c.is_ascii_digit())?;
    let scenario = tag[..split].parse().ok()?;
    let index = tag[split..].parse().ok()?;
    Some((scenario, index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    /// Dataset layout descriptor (JSON).
    pub layout: PathBuf,
    pub train_subjects: Vec<u32>,
    pub val_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
    /// Scenarios of the training subjects used to learn the representation.
    pub representation_scenarios: Vec<Scenario>,
    /// Training-subject sequences held out to drive the plateau schedule.
    pub validation_tags: Vec<String>,
    /// Test-subject sequences used for fine-tuning and classifier fitting.
    pub gallery_tags: Vec<String>,
    /// Empty means the protocol's default probes.
    pub probe_tags: Vec<String>,
    pub classifier: ClassifierKind,
    pub pca_dims: usize,
    pub svm: SvmParams,
    pub seed: u64,
    pub output: PathBuf,
    /// Learn the representation; otherwise load `checkpoint`.
    pub train: bool,
    pub checkpoint: Option<PathBuf>,
    pub trunk: Trunk,
    pub stages: Vec<CurriculumStage>,
    pub schedules: Vec<TrainSchedule>,
    pub finetune: TrainSchedule,
    pub preprocess: PreprocessParams,
    /// Expand training windows into all 18 augmentations.
    pub augment: bool,
    pub gallery_augment: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::A,
            layout: PathBuf::from("layout.json"),
            train_subjects: Vec::new(),
            val_subjects: Vec::new(),
            test_subjects: Vec::new(),
            representation_scenarios: vec![Scenario::N, Scenario::B, Scenario::S],
            validation_tags: Vec::new(),
            gallery_tags: ["N1", "N2", "N3", "N4"].iter().map(|t| t.to_string()).collect(),
            probe_tags: Vec::new(),
            classifier: ClassifierKind::Svm,
            pca_dims: 128,
            svm: SvmParams::default(),
            seed: 0,
            output: PathBuf::from("out"),
            train: true,
            checkpoint: None,
            trunk: Trunk::default(),
            stages: CurriculumStage::presets(),
            schedules: vec![TrainSchedule::default(); 4],
            finetune: TrainSchedule {
                batch_size: 32,
                scenario_balancing: false,
                ..TrainSchedule::default()
            },
            preprocess: PreprocessParams::default(),
            augment: true,
            gallery_augment: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| EvalError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.layout);
        fix(&mut cfg.output);
        if let Some(c) = cfg.checkpoint.as_mut() {
            fix(c);
        }
        Ok(cfg)
    }

    pub fn probe_tags(&self) -> Vec<String> {
        if self.probe_tags.is_empty() {
            self.protocol.default_probe_tags()
        } else {
            self.probe_tags.clone()
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output.join("model.gfnn"))
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let mut seen = BTreeSet::new();
        for &s in self.train_subjects.iter().chain(&self.val_subjects).chain(&self.test_subjects) {
            if !seen.insert(s) {
                return Err(EvalError::PartitionOverlap(s));
            }
        }
        let bad = |m: &str| Err(EvalError::Config(m.into()));
        if self.test_subjects.len() < 2 && self.protocol != Protocol::C {
            return bad("need at least 2 test subjects");
        }
        if self.train && self.train_subjects.len() < 2 {
            return bad("training needs at least 2 training subjects");
        }
        for tag in self.gallery_tags.iter().chain(&self.validation_tags).chain(&self.probe_tags()) {
            if parse_tag(tag).is_none() {
                return Err(EvalError::Config(format!("bad sequence tag '{tag}'")));
            }
        }
        if self.gallery_tags.is_empty() {
            return bad("gallery_tags is empty");
        }
        let gallery: BTreeSet<&String> = self.gallery_tags.iter().collect();
        if self.probe_tags().iter().any(|t| gallery.contains(t)) {
            return bad("a tag is both gallery and probe");
        }
        if self.train && self.stages.len() != 4 {
            return bad("stages must list 4 curriculum stages");
        }
        if self.train && self.schedules.len() != 4 {
            return bad("schedules must list 4 schedules");
        }
        if self.classifier == ClassifierKind::NnPca && self.pca_dims == 0 {
            return bad("pca_dims must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub videos: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub subsequences: usize,
    /// Rank-1 of single subsequences before voting.
    pub subsequence_rank1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenderResult {
    /// `None` for the pooled matrix over all probes.
    pub scenario: Option<Scenario>,
    pub matrix: ConfusionMatrix,
    pub percentages: Vec<Vec<f64>>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub subject: u32,
    pub tag: String,
    /// Subject id, or gender class under protocol C.
    pub truth: u32,
    pub predicted: u32,
    /// Best five with vote fractions.
    pub top5: Vec<(u32, f64)>,
    pub subsequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub version: String,
    pub seed: u64,
    pub trained: bool,
    pub checkpoint: String,
    pub train_cuboids: usize,
    pub gallery_cuboids: usize,
    pub probe_cuboids: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub classifier: ClassifierKind,
    pub classes: usize,
    pub gallery_tags: Vec<String>,
    pub probe_tags: Vec<String>,
    pub scenarios: Vec<ScenarioResult>,
    pub average_rank1: f64,
    pub average_rank5: f64,
    pub gender: Vec<GenderResult>,
    pub videos: Vec<VideoPrediction>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn scenario(&self, s: Scenario) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|r| r.scenario == s)
    }

    /// Aligned plain-text tables.
    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(
            t,
            "protocol {:?}  classifier {}  classes {}  seed {}",
            self.protocol,
            self.classifier.as_str(),
            self.classes,
            self.meta.seed
        );
        let _ = writeln!(t, "gallery {}  probes {}", self.gallery_tags.join(","), self.probe_tags.join(","));
        let _ = writeln!(t);
        let _ = writeln!(t, "{:<8} {:>7} {:>8} {:>8} {:>10}", "scenario", "videos", "rank-1", "rank-5", "subseq-r1");
        for r in &self.scenarios {
            let _ = writeln!(
                t,
                "{:<8} {:>7} {:>8.1} {:>8.1} {:>10.1}",
                r.scenario.as_str(),
                r.videos,
                r.rank1,
                r.rank5,
                r.subsequence_rank1
            );
        }
        let _ = writeln!(t, "{:<8} {:>7} {:>8.1} {:>8.1}", "avg", "", self.average_rank1, self.average_rank5);
        for g in &self.gender {
            let name = g.scenario.map_or("all", Scenario::as_str);
            let _ = writeln!(t);
            let _ = writeln!(t, "gender {:<4} {:>14} {:>14}", name, "male", "female");
            for (i, row) in g.matrix.counts.iter().enumerate() {
                let label = if i == 0 { "male" } else { "female" };
                let cells: Vec<String> = row
                    .iter()
                    .zip(&g.percentages[i])
                    .map(|(c, p)| format!("{:>5} ({:>5.1})", c, p))
                    .collect();
                let _ = writeln!(t, "{:<11} {:>14} {:>14}", label, cells[0], cells[1]);
            }
            let _ = writeln!(t, "accuracy {:.1}", 100.0 * g.accuracy);
        }
        t
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(dir.join("report.txt"), self.to_text())?;
        Ok(())
    }
}

/// Layout entries of `subjects` whose tag is in `tags`, ordered by subject,
/// scenario and index.
pub fn select_entries<'a>(layout: &'a DatasetLayout, subjects: &[u32], tags: &[String]) -> Vec<&'a SequenceRef> {
    let subjects: BTreeSet<u32> = subjects.iter().copied().collect();
    let tags: BTreeSet<(Scenario, u32)> = tags.iter().filter_map(|t| parse_tag(t)).collect();
    let mut out: Vec<&SequenceRef> = layout
        .sequences
        .iter()
        .filter(|e| subjects.contains(&e.subject) && tags.contains(&(e.scenario, e.index)))
        .collect();
    out.sort_by_key(|e| (e.subject, e.scenario, e.index));
    out
}

fn label_map(subjects: &[u32]) -> BTreeMap<u32, u32> {
    subjects.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect()
}

/// Every window must come from an allowed subject.
pub fn check_hygiene(windows: &[LabeledWindow], allowed: &[u32]) -> Result<(), EvalError> {
    let allowed: BTreeSet<u32> = allowed.iter().copied().collect();
    match windows.iter().find(|w| !allowed.contains(&w.provenance.subject)) {
        Some(w) => Err(EvalError::Hygiene(w.provenance.subject)),
        None => Ok(()),
    }
}

const CHUNK: usize = 64;

/// L2-normalized signatures of every cuboid in `src`.
pub fn source_signatures(net: &Network, src: &dyn CuboidSource) -> Result<Vec<Vec<f32>>, EvalError> {
    let mut out = Vec::with_capacity(src.len());
    let idx: Vec<usize> = (0..src.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let cuboids = chunk.iter().map(|&i| src.get(i)).collect::<Result<Vec<_>, _>>()?;
        out.extend(extract_signatures(net, &cuboids)?.into_iter().map(|s| s.vector));
    }
    Ok(out)
}

fn source_probabilities(net: &Network, src: &dyn CuboidSource) -> Result<Vec<RankedPrediction>, EvalError> {
    let mut out = Vec::with_capacity(src.len());
    let idx: Vec<usize> = (0..src.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let cuboids = chunk.iter().map(|&i| src.get(i)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&[f32]> = cuboids.iter().map(|c| c.data()).collect();
        let y = net.infer(&Tensor::stack(&refs, net.input_shape())?)?;
        out.extend((0..chunk.len()).map(|i| probability_rank(y.sample(i))));
    }
    Ok(out)
}

/// Trains the curriculum on the training partition, or loads the checkpoint.
/// Returns the network, the normalization stats and the training set size.
fn representation(cfg: &ExperimentConfig, layout: &DatasetLayout) -> Result<(Network, CuboidSetStats, usize), EvalError> {
    let path = cfg.checkpoint_path();
    if !cfg.train {
        let ck = load_checkpoint(&path)?;
        let stats: CuboidSetStats = serde_json::from_value(ck.metadata["stats"].clone())
            .map_err(|e| EvalError::Config(format!("checkpoint {} lacks stats: {e}", path.display())))?;
        let n = ck.metadata["train_cuboids"].as_u64().unwrap_or(0) as usize;
        return Ok((ck.net, stats, n));
    }
    let labels = label_map(&cfg.train_subjects);
    let val_tags: BTreeSet<(Scenario, u32)> = cfg.validation_tags.iter().filter_map(|t| parse_tag(t)).collect();
    let train_entries: Vec<&SequenceRef> = layout
        .sequences
        .iter()
        .filter(|e| labels.contains_key(&e.subject))
        .filter(|e| cfg.representation_scenarios.contains(&e.scenario))
        .filter(|e| !val_tags.contains(&(e.scenario, e.index)))
        .collect();
    if train_entries.is_empty() {
        return Err(EvalError::NoSequences("the representation training set".into()));
    }
    let label = |e: &SequenceRef| labels.get(&e.subject).copied();
    let windows = layout_windows(layout, &train_entries, &cfg.preprocess, label)?;
    check_hygiene(&windows, &cfg.train_subjects)?;
    let set = WindowSet::new(windows, cfg.augment);
    let stats = set.compute_stats()?;
    let set = set.with_stats(stats);

    let val_entries = select_entries(layout, &cfg.train_subjects, &cfg.validation_tags);
    let val = if val_entries.is_empty() {
        None
    } else {
        let w = layout_windows(layout, &val_entries, &cfg.preprocess, label)?;
        check_hygiene(&w, &cfg.train_subjects)?;
        Some(WindowSet::new(w, false).with_stats(stats))
    };

    let schedules: Vec<TrainSchedule> = cfg
        .schedules
        .iter()
        .enumerate()
        .map(|(i, s)| TrainSchedule {
            seed: cfg.seed.wrapping_add(i as u64),
            ..s.clone()
        })
        .collect();
    let (net, _) = run_curriculum(
        &cfg.trunk,
        &cfg.stages,
        &schedules,
        cfg.train_subjects.len(),
        &set,
        val.as_ref().map(|v| v as &dyn CuboidSource),
        Some(&cfg.output.join("curriculum")),
    )?;
    let meta = serde_json::json!({
        "stats": stats,
        "classes": cfg.train_subjects.len(),
        "train_subjects": cfg.train_subjects,
        "train_cuboids": set.len(),
        "seed": cfg.seed,
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&path, &net, None, &meta)?;
    Ok((net, stats, set.len()))
}

/// Per-video group of probe cuboid indices.
struct Video {
    subject: u32,
    scenario: Scenario,
    tag: String,
    range: std::ops::Range<usize>,
}

fn group_videos(windows: &[LabeledWindow]) -> Vec<Video> {
    let mut out: Vec<Video> = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let p = &w.provenance;
        match out.last_mut() {
            Some(v) if v.subject == p.subject && v.tag == format!("{}{}", p.scenario, p.sequence) => v.range.end = i + 1,
            _ => out.push(Video {
                subject: p.subject,
                scenario: p.scenario,
                tag: format!("{}{}", p.scenario, p.sequence),
                range: i..i + 1,
            }),
        }
    }
    out
}

/// Runs a whole protocol and writes `report.json` / `report.txt` to the
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if !cfg.train && !cfg.checkpoint_path().exists() {
        return Err(EvalError::MissingCheckpoint(cfg.checkpoint_path()));
    }
    let layout = DatasetLayout::load(&cfg.layout)?;
    let present: BTreeSet<u32> = layout.subjects().into_iter().collect();
    for &s in cfg.test_subjects.iter().chain(if cfg.train { &cfg.train_subjects[..] } else { &[] }) {
        if !present.contains(&s) {
            return Err(EvalError::UnknownSubject(s));
        }
    }

    let (net, stats, train_cuboids) = representation(cfg, &layout)?;

    // identity or gender label of each test subject
    let classes;
    let class_of: BTreeMap<u32, u32> = if cfg.protocol == Protocol::C {
        classes = 2;
        cfg.test_subjects
            .iter()
            .map(|&s| layout.gender_of(s).map(|g| (s, Gender::class(g))).ok_or(EvalError::MissingGender(s)))
            .collect::<Result<_, _>>()?
    } else {
        classes = cfg.test_subjects.len();
        label_map(&cfg.test_subjects)
    };
    let label = |e: &SequenceRef| class_of.get(&e.subject).copied();

    let gallery_entries = select_entries(&layout, &cfg.test_subjects, &cfg.gallery_tags);
    if gallery_entries.is_empty() {
        return Err(EvalError::NoSequences(format!("gallery tags {:?}", cfg.gallery_tags)));
    }
    let probe_tags = cfg.probe_tags();
    let probe_entries = select_entries(&layout, &cfg.test_subjects, &probe_tags);
    if probe_entries.is_empty() {
        return Err(EvalError::NoSequences(format!("probe tags {probe_tags:?}")));
    }
    let gallery = WindowSet::new(
        layout_windows(&layout, &gallery_entries, &cfg.preprocess, label)?,
        cfg.gallery_augment,
    )
    .with_stats(stats);
    let probe_windows = layout_windows(&layout, &probe_entries, &cfg.preprocess, label)?;
    let videos = group_videos(&probe_windows);
    let probes = WindowSet::new(probe_windows, false).with_stats(stats);
    let gallery_labels: Vec<u32> = (0..gallery.len()).map(|i| gallery.label(i).unwrap_or(0)).collect();

    let preds: Vec<RankedPrediction> = match cfg.classifier {
        ClassifierKind::Sm => {
            let sched = TrainSchedule {
                seed: cfg.seed,
                ..cfg.finetune.clone()
            };
            let (tuned, _) = finetune_softmax(&net, &gallery, classes, &sched)?;
            source_probabilities(&tuned, &probes)?
        }
        ClassifierKind::Svm => {
            let sigs = source_signatures(&net, &gallery)?;
            let params = SvmParams {
                seed: cfg.seed,
                ..cfg.svm.clone()
            };
            let ens = if cfg.protocol == Protocol::C {
                train_gender_svm(&sigs, &gallery_labels, &params)?
            } else {
                train_ovr_svm(&sigs, &gallery_labels, &params)?
            };
            source_signatures(&net, &probes)?
                .iter()
                .map(|s| svm_rank(&ens, s))
                .collect::<Result<_, _>>()?
        }
        ClassifierKind::NnPca => {
            let sigs = source_signatures(&net, &gallery)?;
            let pca = fit_pca(&sigs, cfg.pca_dims)?;
            let project = |s: &Vec<f32>| -> Result<Vec<f32>, ClassifyError> {
                Ok(pca_project(&pca, s)?.into_iter().map(|v| v as f32).collect())
            };
            let compact = sigs.iter().map(project).collect::<Result<Vec<_>, _>>()?;
            let g = GallerySet::new(&compact, &gallery_labels)?;
            source_signatures(&net, &probes)?
                .iter()
                .map(|s| nn_rank(&g, &project(s)?))
                .collect::<Result<_, _>>()?
        }
    };

    // class index back to subject id for identification reports
    let name = |c: u32| -> u32 {
        match cfg.protocol {
            Protocol::C => c,
            _ => cfg.test_subjects.get(c as usize).copied().unwrap_or(c),
        }
    };
    let mut video_preds = Vec::with_capacity(videos.len());
    let mut per_video = Vec::with_capacity(videos.len());
    for v in &videos {
        let ranked = video_rank(&preds[v.range.clone()])?;
        let truth = class_of[&v.subject];
        let top = ranked.top().ok_or(EvalError::Empty)?;
        video_preds.push(VideoPrediction {
            subject: v.subject,
            tag: v.tag.clone(),
            truth: name(truth),
            predicted: name(top),
            top5: ranked.entries.iter().take(5).map(|&(l, s)| (name(l), s)).collect(),
            subsequences: v.range.len(),
        });
        per_video.push((v.scenario, ranked, truth));
    }

    let mut order: Vec<Scenario> = Vec::new();
    for t in &probe_tags {
        if let Some((s, _)) = parse_tag(t) {
            if !order.contains(&s) && videos.iter().any(|v| v.scenario == s) {
                order.push(s);
            }
        }
    }
    let mut scenarios = Vec::new();
    let mut gender = Vec::new();
    for &s in &order {
        let (vp, vt): (Vec<RankedPrediction>, Vec<u32>) = per_video
            .iter()
            .filter(|(sc, _, _)| *sc == s)
            .map(|(_, r, t)| (r.clone(), *t))
            .unzip();
        let idx: Vec<usize> = videos
            .iter()
            .filter(|v| v.scenario == s)
            .flat_map(|v| v.range.clone())
            .collect();
        let sp: Vec<RankedPrediction> = idx.iter().map(|&i| preds[i].clone()).collect();
        let st: Vec<u32> = idx.iter().map(|&i| probes.label(i).unwrap_or(0)).collect();
        scenarios.push(ScenarioResult {
            scenario: s,
            videos: vp.len(),
            rank1: rank_k_accuracy(&vp, &vt, 1)?,
            rank5: rank_k_accuracy(&vp, &vt, 5)?,
            subsequences: sp.len(),
            subsequence_rank1: rank_k_accuracy(&sp, &st, 1)?,
        });
        if cfg.protocol == Protocol::C {
            let top: Vec<u32> = vp.iter().map(|p| p.top().unwrap_or(0)).collect();
            gender.push(gender_result(Some(s), &top, &vt)?);
        }
    }
    if cfg.protocol == Protocol::C {
        let top: Vec<u32> = per_video.iter().map(|(_, p, _)| p.top().unwrap_or(0)).collect();
        let truth: Vec<u32> = per_video.iter().map(|(_, _, t)| *t).collect();
        gender.push(gender_result(None, &top, &truth)?);
    }
    let mean = |f: fn(&ScenarioResult) -> f64| scenarios.iter().map(f).sum::<f64>() / scenarios.len().max(1) as f64;
    let report = EvalReport {
        protocol: cfg.protocol,
        classifier: cfg.classifier,
        classes,
        gallery_tags: cfg.gallery_tags.clone(),
        probe_tags,
        average_rank1: mean(|r| r.rank1),
        average_rank5: mean(|r| r.rank5),
        scenarios,
        gender,
        videos: video_preds,
        meta: ReportMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            trained: cfg.train,
            checkpoint: cfg.checkpoint_path().display().to_string(),
            train_cuboids,
            gallery_cuboids: gallery.len(),
            probe_cuboids: probes.len(),
        },
    };
    report.write(&cfg.output)?;
    Ok(report)
}

fn gender_result(scenario: Option<Scenario>, pred: &[u32], truth: &[u32]) -> Result<GenderResult, EvalError> {
    let matrix = confusion_matrix(pred, truth, 2)?;
    Ok(GenderResult {
        scenario,
        percentages: matrix.percentages(),
        accuracy: matrix.accuracy(),
        matrix,
    })
}
