use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gaitflow::classify::{
    fit_pca, pca_project, read_gallery, train_gender_svm, train_ovr_svm, write_gallery, write_pca, write_svm,
    ClassifyError, GallerySet, SvmParams,
};
use gaitflow::cuboid::{compute_mean, ArchiveReader, ArchiveWriter, CuboidError, CuboidSetStats, CuboidSource, WindowSet};
use gaitflow::eval::{parse_tag, run_experiment, source_signatures, EvalError, ExperimentConfig};
use gaitflow::gaitnet::{finetune_softmax, run_curriculum, GaitError, TrainSchedule};
use gaitflow::nnet::{grad_check, load_checkpoint, random_small_network, save_checkpoint, NnError};
use gaitflow::pipeline::layout_windows;
use gaitflow::synth::{generate_synth_dataset, SynthSpec, LAYOUT_FILE};
use gaitflow::videoio::{DatasetLayout, SequenceRef};

#[derive(Parser)]
#[command(name = "gaitflow", version, about = "Gait recognition from optical-flow cuboids")]
struct Cli {
    /// TOML config (experiment config for train/finetune/evaluate, synthetic spec for synth).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn dataset sequences into a GFCB cuboid archive.
    Preprocess {
        #[arg(long)]
        layout: PathBuf,
        /// Comma-separated subject ids; all subjects when omitted.
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<u32>,
        /// Comma-separated sequence tags such as N1,N2; all when omitted.
        #[arg(long, value_delimiter = ',')]
        tags: Vec<String>,
        #[arg(long, value_enum, default_value_t = LabelMode::Index)]
        labels: LabelMode,
        /// Write all 18 augmentations of every window.
        #[arg(long)]
        augment: bool,
        /// Take normalization stats from this archive instead of computing them.
        #[arg(long)]
        stats_from: Option<PathBuf>,
    },
    /// Curriculum training on a cuboid archive.
    Train {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Softmax width; defaults to the largest label plus one.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Retrain only the classifier layer of a model.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Write full6 signatures of an archive as a GFGL table.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        archive: PathBuf,
    },
    /// Fit an SVM ensemble, a PCA + NN gallery, or the gender SVM.
    FitClassifier {
        #[arg(long, value_enum)]
        kind: ClassifierArg,
        /// Signature table from `extract`.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 128)]
        pca_dims: usize,
        #[arg(long, default_value_t = 1e-4)]
        lambda: f64,
    },
    /// Run an experiment protocol and write its report.
    Evaluate,
    /// Render a synthetic walker dataset.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Check backprop against finite differences on random small networks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelMode {
    /// Position of the subject in the sorted subject list.
    Index,
    /// The subject id itself.
    Subject,
    /// 0 male, 1 female.
    Gender,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifierArg {
    Svm,
    PcaNn,
    Gender,
}

/// Marker for failures that map to exit code 3.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "numerical failure: {}", self.0)
    }
}

impl std::error::Error for Numerical {}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Numerical>()
            || matches!(e.downcast_ref::<EvalError>(), Some(x) if x.is_numerical())
            || matches!(e.downcast_ref::<GaitError>(), Some(GaitError::NonFinite(_)))
            || matches!(e.downcast_ref::<NnError>(), Some(NnError::NonFinite { .. }))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numerical(&e) { 3 } else { 2 })
        }
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess {
            layout,
            subjects,
            tags,
            labels,
            augment,
            stats_from,
        } => preprocess(cli, layout, subjects, tags, *labels, *augment, stats_from.as_deref()),
        Command::Train { archive, val, classes } => train(cli, archive, val.as_deref(), *classes),
        Command::Finetune {
            model,
            archive,
            classes,
        } => finetune(cli, model, archive, *classes),
        Command::Extract { model, archive } => extract(cli, model, archive),
        Command::FitClassifier {
            kind,
            gallery,
            pca_dims,
            lambda,
        } => fit_classifier(cli, *kind, gallery, *pca_dims, *lambda),
        Command::Evaluate => {
            let cfg = experiment_config(cli)?;
            let report = run_experiment(&cfg)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Synth { subjects } => {
            let mut spec = match &cli.config {
                Some(p) => SynthSpec::load(p).with_context(|| format!("reading {}", p.display()))?,
                None => SynthSpec::default(),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            if let Some(n) = subjects {
                spec.subjects = *n;
            }
            let dir = out_dir(cli)?;
            let layout = generate_synth_dataset(&spec, &dir)?;
            println!(
                "{} sequences of {} subjects in {}",
                layout.sequences.len(),
                spec.subjects,
                dir.join(LAYOUT_FILE).display()
            );
            Ok(())
        }
        Command::Gradcheck { count, eps, tolerance } => {
            let first = cli.seed.unwrap_or(0);
            let mut worst = 0.0f64;
            for seed in first..first + count {
                let (net, x, masks) = random_small_network(seed);
                let r = grad_check(&net, &x, *eps, Some(&masks), usize::MAX, seed)?;
                worst = worst.max(r.max_rel_error);
                if !(r.max_rel_error < *tolerance) {
                    return Err(Numerical(format!(
                        "network {seed}: relative error {:.3e} exceeds {tolerance:.0e}",
                        r.max_rel_error
                    ))
                    .into());
                }
            }
            println!("{count} networks, max relative error {worst:.3e}");
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn preprocess(
    cli: &Cli,
    layout_path: &Path,
    subjects: &[u32],
    tags: &[String],
    labels: LabelMode,
    augment: bool,
    stats_from: Option<&Path>,
) -> Result<()> {
    let layout = DatasetLayout::load(layout_path)?;
    let mut subjects = if subjects.is_empty() { layout.subjects() } else { subjects.to_vec() };
    subjects.sort_unstable();
    subjects.dedup();
    let mut wanted = Vec::new();
    for t in tags {
        wanted.push(parse_tag(t).ok_or_else(|| anyhow!("bad sequence tag '{t}'"))?);
    }
    let entries: Vec<&SequenceRef> = layout
        .sequences
        .iter()
        .filter(|e| subjects.binary_search(&e.subject).is_ok())
        .filter(|e| wanted.is_empty() || wanted.contains(&(e.scenario, e.index)))
        .collect();
    if entries.is_empty() {
        bail!("no sequences selected");
    }
    let cfg = experiment_config(cli)?;
    let label = |e: &SequenceRef| match labels {
        LabelMode::Index => subjects.binary_search(&e.subject).ok().map(|i| i as u32),
        LabelMode::Subject => Some(e.subject),
        LabelMode::Gender => e.gender.or_else(|| layout.gender_of(e.subject)).map(|g| g.class()),
    };
    let windows = layout_windows(&layout, &entries, &cfg.preprocess, label)?;
    let set = WindowSet::new(windows, augment);
    let stats = match stats_from {
        Some(p) => ArchiveReader::open(p)?
            .stats()
            .ok_or_else(|| anyhow!("{} has no stats", p.display()))?,
        None => set.compute_stats()?,
    };
    let path = out_dir(cli)?.join("cuboids.gfcb");
    let mut w = ArchiveWriter::create(&path)?;
    for i in 0..set.len() {
        w.push(&set.raw(i))?;
    }
    w.finish(Some(stats))?;
    println!("{} cuboids from {} sequences in {}", set.len(), entries.len(), path.display());
    Ok(())
}

fn open_archive(path: &Path, stats: Option<CuboidSetStats>) -> Result<ArchiveReader> {
    let a = ArchiveReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let stats = match stats.or(a.stats()) {
        Some(s) => s,
        None => compute_mean((0..a.len()).map(|i| a.raw(i)).collect::<Result<Vec<_>, CuboidError>>()?.iter())?,
    };
    Ok(a.with_stats(Some(stats)))
}

fn classes_of(src: &dyn CuboidSource, given: Option<usize>) -> Result<usize> {
    let mut max = None;
    for i in 0..src.len() {
        let l = src.label(i).ok_or_else(|| anyhow!("cuboid {i} has no label"))?;
        max = max.max(Some(l));
    }
    let inferred = max.map_or(0, |m| m as usize + 1);
    Ok(given.unwrap_or(inferred))
}

fn model_stats(meta: &serde_json::Value) -> Option<CuboidSetStats> {
    serde_json::from_value(meta["stats"].clone()).ok()
}

fn train(cli: &Cli, archive: &Path, val: Option<&Path>, classes: Option<usize>) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let data = open_archive(archive, None)?;
    let stats = data.stats();
    let val = val.map(|p| open_archive(p, stats)).transpose()?;
    let classes = classes_of(&data, classes)?;
    let schedules: Vec<TrainSchedule> = cfg
        .schedules
        .iter()
        .enumerate()
        .map(|(i, s)| TrainSchedule {
            seed: cfg.seed.wrapping_add(i as u64),
            ..s.clone()
        })
        .collect();
    let dir = out_dir(cli)?;
    let (net, histories) = run_curriculum(
        &cfg.trunk,
        &cfg.stages,
        &schedules,
        classes,
        &data,
        val.as_ref().map(|v| v as &dyn CuboidSource),
        Some(&dir.join("curriculum")),
    )?;
    let meta = serde_json::json!({ "stats": stats, "classes": classes, "train_cuboids": data.len(), "seed": cfg.seed });
    let path = dir.join("model.gfnn");
    save_checkpoint(&path, &net, None, &meta)?;
    let acc = histories.last().and_then(|h| h.final_train_accuracy());
    println!("model {} ({} classes, final train accuracy {:?})", path.display(), classes, acc);
    Ok(())
}

fn finetune(cli: &Cli, model: &Path, archive: &Path, classes: Option<usize>) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let ck = load_checkpoint(model)?;
    let data = open_archive(archive, model_stats(&ck.metadata))?;
    let classes = classes_of(&data, classes)?;
    let sched = TrainSchedule {
        seed: cfg.seed,
        ..cfg.finetune.clone()
    };
    let (net, history) = finetune_softmax(&ck.net, &data, classes, &sched)?;
    let mut meta = ck.metadata.clone();
    meta["classes"] = classes.into();
    meta["stats"] = serde_json::to_value(data.stats())?;
    let dir = out_dir(cli)?;
    let path = dir.join("finetuned.gfnn");
    save_checkpoint(&path, &net, None, &meta)?;
    history.write_csv(&dir.join("finetune.csv"))?;
    println!("model {} ({} classes)", path.display(), classes);
    Ok(())
}

fn extract(cli: &Cli, model: &Path, archive: &Path) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let data = open_archive(archive, model_stats(&ck.metadata))?;
    let sigs = source_signatures(&ck.net, &data)?;
    let labels: Vec<u32> = (0..data.len())
        .map(|i| data.label(i).ok_or_else(|| anyhow!("cuboid {i} has no label")))
        .collect::<Result<_>>()?;
    let path = out_dir(cli)?.join("signatures.gfgl");
    write_gallery(&path, &GallerySet::new(&sigs, &labels)?)?;
    println!("{} signatures in {}", sigs.len(), path.display());
    Ok(())
}

fn fit_classifier(cli: &Cli, kind: ClassifierArg, gallery: &Path, pca_dims: usize, lambda: f64) -> Result<()> {
    let g = read_gallery(gallery)?;
    let sigs: Vec<Vec<f32>> = (0..g.len()).map(|i| g.row(i).to_vec()).collect();
    let labels = g.labels().to_vec();
    let params = SvmParams {
        lambda,
        seed: cli.seed.unwrap_or(0),
        ..SvmParams::default()
    };
    let dir = out_dir(cli)?;
    match kind {
        ClassifierArg::Svm => {
            let ens = train_ovr_svm(&sigs, &labels, &params)?;
            write_svm(&dir.join("svm.gfsv"), &ens)?;
            println!("{} one-vs-all classifiers in {}", ens.classes(), dir.join("svm.gfsv").display());
        }
        ClassifierArg::Gender => {
            let ens = train_gender_svm(&sigs, &labels, &params)?;
            write_svm(&dir.join("gender.gfsv"), &ens)?;
            println!("gender classifier in {}", dir.join("gender.gfsv").display());
        }
        ClassifierArg::PcaNn => {
            let pca = fit_pca(&sigs, pca_dims)?;
            let compact = sigs
                .iter()
                .map(|s| Ok(pca_project(&pca, s)?.into_iter().map(|v| v as f32).collect()))
                .collect::<Result<Vec<Vec<f32>>, ClassifyError>>()?;
            write_pca(&dir.join("pca.gfpc"), &pca)?;
            write_gallery(&dir.join("gallery.gfgl"), &GallerySet::new(&compact, &labels)?)?;
            println!(
                "PCA to {} dims ({:.1}% variance) and a {}-vector gallery in {}",
                pca_dims,
                100.0 * pca.explained_variance_ratio(),
                compact.len(),
                dir.display()
            );
        }
    }
    Ok(())
}
