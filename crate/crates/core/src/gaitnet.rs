//! The gait CNN: stage geometries, curriculum training, softmax fine-tuning
//! and signature extraction.

use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cuboid::{CuboidError, CuboidSource, FlowCuboid, Provenance, CROP, STEPS};
use crate::nnet::{
    save_checkpoint, sgd_step, softmax_cross_entropy, DropoutSource, Gradients, Init, InitScale, LayerDef, LayerSpec, Network,
    NnError, OptimizerState, Shape, Tensor,
};
use crate::videoio::Scenario;

/// Cuboid input: 60×60 pixels, 25 two-channel flow maps.
pub const INPUT: Shape = Shape {
    h: CROP,
    w: CROP,
    c: 2 * STEPS,
};

#[derive(Debug, Error)]
pub enum GaitError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("parameter layer {index} differs: {from} vs {to}")]
    KindMismatch { index: usize, from: String, to: String },
    #[error("label {label} is outside the softmax width {classes}")]
    LabelOverflow { label: u32, classes: usize },
    #[error("sample {0} has no label")]
    Unlabeled(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("a curriculum has 4 stages, got {0}")]
    StageCount(usize),
    #[error("cuboid has not been mean-normalized")]
    Unnormalized,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("full6 activation is zero; signature undefined")]
    ZeroSignature,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Cuboid(#[from] CuboidError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Geometry and optimizer settings of one curriculum step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub stage_index: u8,
    pub conv4_filters: usize,
    pub full5_units: usize,
    pub full6_units: usize,
    pub lrn_enabled: bool,
    pub dropout_p: f64,
    pub momentum: f64,
}

impl CurriculumStage {
    /// The four standard stages, `index` in `1..=4`.
    pub fn preset(index: u8) -> Option<Self> {
        let (conv4, full5, full6, lrn, p, momentum) = match index {
            1 => (512, 512, 256, false, 0.0, 0.9),
            2 => (512, 512, 256, true, 0.1, 0.9),
            3 => (2048, 2048, 1024, true, 0.1, 0.9),
            4 => (4096, 4096, 2048, true, 0.4, 0.95),
            _ => return None,
        };
        Some(CurriculumStage {
            stage_index: index,
            conv4_filters: conv4,
            full5_units: full5,
            full6_units: full6,
            lrn_enabled: lrn,
            dropout_p: p,
            momentum,
        })
    }

    pub fn presets() -> Vec<Self> {
        (1..=4).filter_map(Self::preset).collect()
    }
}

/// Filter counts of conv1..conv3, the normalization used after conv1 and the
/// parameter initialization. These do not change across stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Trunk {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub conv3_filters: usize,
    pub lrn: LayerSpec,
    pub init: Init,
}

impl Default for Trunk {
    fn default() -> Self {
        Trunk {
            conv1_filters: 96,
            conv2_filters: 192,
            conv3_filters: 512,
            lrn: LayerSpec::lrn_default(),
            init: Init {
                scale: InitScale::FanIn,
                ..Init::default()
            },
        }
    }
}

pub fn stage_layers(trunk: &Trunk, stage: &CurriculumStage, num_classes: usize) -> Vec<LayerDef> {
    use LayerSpec::*;
    let mut defs = vec![LayerDef::new(
        "conv1",
        Conv {
            filters: trunk.conv1_filters,
            size: 7,
            stride: 1,
        },
    )];
    defs.push(LayerDef::new("relu1", Relu));
    if stage.lrn_enabled {
        defs.push(LayerDef::new("norm1", trunk.lrn.clone()));
    }
    let pool = |name: &str| LayerDef::new(name, MaxPool { size: 2, stride: 2 });
    defs.extend([
        pool("pool1"),
        LayerDef::new(
            "conv2",
            Conv {
                filters: trunk.conv2_filters,
                size: 5,
                stride: 2,
            },
        ),
        LayerDef::new("relu2", Relu),
        pool("pool2"),
        LayerDef::new(
            "conv3",
            Conv {
                filters: trunk.conv3_filters,
                size: 3,
                stride: 1,
            },
        ),
        LayerDef::new("relu3", Relu),
        pool("pool3"),
        LayerDef::new(
            "conv4",
            Conv {
                filters: stage.conv4_filters,
                size: 2,
                stride: 1,
            },
        ),
        LayerDef::new("relu4", Relu),
        LayerDef::new("full5", FullyConnected { units: stage.full5_units }),
        LayerDef::new("relu5", Relu),
    ]);
    if stage.dropout_p > 0.0 {
        defs.push(LayerDef::new("drop5", Dropout { p: stage.dropout_p }));
    }
    defs.push(LayerDef::new("full6", FullyConnected { units: stage.full6_units }));
    defs.push(LayerDef::new("relu6", Relu));
    if stage.dropout_p > 0.0 {
        defs.push(LayerDef::new("drop6", Dropout { p: stage.dropout_p }));
    }
    defs.push(LayerDef::new("softmax", FullyConnected { units: num_classes }));
    defs.push(LayerDef::new("prob", Softmax));
    defs
}

pub fn build_stage(stage: &CurriculumStage, num_classes: usize, rng: &mut dyn RngCore) -> Result<Network, GaitError> {
    build_network(&Trunk::default(), stage, num_classes, rng)
}

pub fn build_network(
    trunk: &Trunk,
    stage: &CurriculumStage,
    num_classes: usize,
    rng: &mut dyn RngCore,
) -> Result<Network, GaitError> {
    if num_classes < 2 {
        return Err(GaitError::TooFewClasses(num_classes));
    }
    Ok(Network::new(
        INPUT,
        stage_layers(trunk, stage, num_classes),
        &trunk.init,
        rng,
    )?)
}

/// Copies parameters of `from` into `to` layer by layer, aligning the
/// parameterized layers by position. Overlapping weight blocks are copied and
/// the remainder keeps `to`'s initialization. The last parameterized layer
/// (the classifier) is left untouched.
pub fn transfer_weights(from: &Network, mut to: Network) -> Result<Network, GaitError> {
    let src: Vec<_> = from.layers().iter().filter(|l| l.params.is_some()).collect();
    let dst_count = to.layers().iter().filter(|l| l.params.is_some()).count();
    if src.len() != dst_count {
        return Err(GaitError::KindMismatch {
            index: src.len().min(dst_count),
            from: format!("{} parameter layers", src.len()),
            to: format!("{dst_count} parameter layers"),
        });
    }
    let dst = to.layers_mut().iter_mut().filter(|l| l.params.is_some());
    for (index, (s, d)) in src.iter().zip(dst).enumerate() {
        let kernel = |spec: &LayerSpec| match spec {
            LayerSpec::Conv { size, stride, .. } => Some((*size, *stride)),
            _ => None,
        };
        if s.spec().kind_name() != d.spec().kind_name() || kernel(s.spec()) != kernel(d.spec()) {
            return Err(GaitError::KindMismatch {
                index,
                from: format!("{} {}", s.name(), s.spec().kind_name()),
                to: format!("{} {}", d.name(), d.spec().kind_name()),
            });
        }
        if index + 1 == dst_count {
            break;
        }
        // rows are output units, columns the flattened input in channel-major order
        let (s_in, d_in) = (s.fan_in(), d.fan_in());
        let (sp, dp) = (s.params.as_ref().unwrap(), d.params.as_mut().unwrap());
        let rows = sp.bias.len().min(dp.bias.len());
        let cols = s_in.min(d_in);
        for r in 0..rows {
            dp.weight[r * d_in..r * d_in + cols].copy_from_slice(&sp.weight[r * s_in..r * s_in + cols]);
            dp.bias[r] = sp.bias[r];
        }
    }
    Ok(to)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_drop: f64,
    pub plateau_patience: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub scenario_balancing: bool,
    /// Batches per epoch; `None` means one pass worth, `ceil(N / batch_size)`.
    pub batches_per_epoch: Option<usize>,
    /// Samples per forward/backward chunk; bounds activation memory.
    pub micro_batch: usize,
    pub min_lr: f64,
    /// Stop as soon as training accuracy reaches this fraction.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 150,
            lr0: 1e-2,
            lr_drop: 10.0,
            plateau_patience: 3,
            weight_decay: 5e-4,
            momentum: 0.9,
            max_epochs: 20,
            seed: 0,
            scenario_balancing: true,
            batches_per_epoch: None,
            micro_batch: 50,
            min_lr: 1e-5,
            target_train_accuracy: None,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, dataset_len: usize) -> Result<(), GaitError> {
        let bad = |m: &str| Err(GaitError::InvalidSchedule(m.into()));
        if self.batch_size == 0 || self.micro_batch == 0 || self.max_epochs == 0 {
            return bad("batch_size, micro_batch and max_epochs must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr_drop > 1.0 && self.min_lr > 0.0) {
            return bad("lr0 and min_lr must be positive and lr_drop above 1");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) || self.plateau_patience == 0 {
            return bad("weight_decay, momentum or plateau_patience out of range");
        }
        if self.batches_per_epoch == Some(0) {
            return bad("batches_per_epoch must be positive");
        }
        if self.batch_size > dataset_len {
            return Err(GaitError::InvalidSchedule(format!(
                "batch_size {} exceeds the {dataset_len} training samples",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Divides the learning rate when the monitored error stops improving.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    drop: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, drop: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            drop,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's error; returns true if the rate was just lowered.
    pub fn observe(&mut self, error: f64) -> bool {
        if error < self.best {
            self.best = error;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr /= self.drop;
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Mini-batch index stream. With balancing, each batch is split evenly
/// across scenarios (remainder rotating) and every scenario's samples are
/// drawn by cycling through a reshuffled list.
pub struct BalancedSampler {
    groups: Vec<(Vec<usize>, usize)>,
    rng: ChaCha8Rng,
    batches: usize,
}

impl BalancedSampler {
    pub fn new(scenarios: &[Scenario], balance: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups: Vec<(Vec<usize>, usize)> = if balance {
            Scenario::ALL
                .iter()
                .map(|s| (0..scenarios.len()).filter(|&i| scenarios[i] == *s).collect::<Vec<_>>())
                .filter(|g| !g.is_empty())
                .map(|g| (g, 0))
                .collect()
        } else {
            vec![((0..scenarios.len()).collect(), 0)]
        };
        for (g, _) in groups.iter_mut() {
            g.shuffle(&mut rng);
        }
        BalancedSampler { groups, rng, batches: 0 }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let k = self.groups.len();
        let mut out = Vec::with_capacity(size);
        if k == 0 {
            return out;
        }
        let (base, rem) = (size / k, size % k);
        let start = self.batches % k;
        for j in 0..k {
            let take = base + usize::from((j + k - start) % k < rem);
            let (order, pos) = &mut self.groups[j];
            for _ in 0..take {
                if *pos == order.len() {
                    order.shuffle(&mut self.rng);
                    *pos = 0;
                }
                out.push(order[*pos]);
                *pos += 1;
            }
        }
        self.batches += 1;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_error: Option<f64>,
    pub train_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.train_accuracy)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GaitError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "lr", "train_loss", "val_error"]).map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.lr),
                format!("{:.6}", e.train_loss),
                e.val_error.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> GaitError {
    GaitError::Io(io::Error::new(io::ErrorKind::Other, e.to_string()))
}

/// Labeled flat vectors fed to the training loop.
trait Samples: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Vec<f32>, GaitError>;
    fn label(&self, index: usize) -> Option<u32>;
    fn scenario(&self, index: usize) -> Scenario;
}

struct Cuboids<'a>(&'a dyn CuboidSource);

impl Samples for Cuboids<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<Vec<f32>, GaitError> {
        Ok(self.0.get(index)?.into_data())
    }

    fn label(&self, index: usize) -> Option<u32> {
        self.0.label(index)
    }

    fn scenario(&self, index: usize) -> Scenario {
        self.0.scenario(index)
    }
}

/// Cached activations of a frozen network, one row per sample.
struct Features {
    dim: usize,
    rows: Vec<f32>,
    labels: Vec<Option<u32>>,
    scenarios: Vec<Scenario>,
}

impl Samples for Features {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn load(&self, index: usize) -> Result<Vec<f32>, GaitError> {
        Ok(self.rows[index * self.dim..(index + 1) * self.dim].to_vec())
    }

    fn label(&self, index: usize) -> Option<u32> {
        self.labels[index]
    }

    fn scenario(&self, index: usize) -> Scenario {
        self.scenarios[index]
    }
}

/// Index of the layer producing the logits: the input of a trailing softmax.
fn logits_end(net: &Network) -> usize {
    let n = net.layers().len();
    match net.layers().last().map(|l| l.spec()) {
        Some(LayerSpec::Softmax) => n - 1,
        _ => n,
    }
}

fn load_batch(data: &dyn Samples, indices: &[usize], shape: Shape) -> Result<Tensor, GaitError> {
    let rows: Vec<Vec<f32>> = indices
        .par_iter()
        .map(|&i| data.load(i))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
    Ok(Tensor::stack(&refs, shape)?)
}

fn checked_labels(data: &dyn Samples, indices: &[usize], classes: usize) -> Result<Vec<usize>, GaitError> {
    indices
        .iter()
        .map(|&i| {
            let label = data.label(i).ok_or(GaitError::Unlabeled(i))?;
            if label as usize >= classes {
                return Err(GaitError::LabelOverflow { label, classes });
            }
            Ok(label as usize)
        })
        .collect()
}

const EVAL_CHUNK: usize = 32;

/// Fraction of samples whose highest-scoring class differs from the label.
fn top1_error(net: &Network, data: &dyn Samples) -> Result<f64, GaitError> {
    if data.len() == 0 {
        return Err(GaitError::EmptyDataset);
    }
    let end = logits_end(net);
    let classes = net.layers()[end - 1].out_shape.len();
    let mut wrong = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let labels = checked_labels(data, chunk, classes)?;
        let x = load_batch(data, chunk, net.input_shape())?;
        let z = net.infer_to(&x, end)?;
        for (i, &label) in labels.iter().enumerate() {
            if argmax(z.sample(i)) != label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn train_samples(
    mut net: Network,
    data: &dyn Samples,
    sched: &TrainSchedule,
    val: Option<&dyn Samples>,
) -> Result<(Network, TrainHistory), GaitError> {
    let n = data.len();
    if n == 0 {
        return Err(GaitError::EmptyDataset);
    }
    sched.validate(n)?;
    let end = logits_end(&net);
    let classes = net.layers()[end - 1].out_shape.len();
    let shape = net.input_shape();
    let scenarios: Vec<Scenario> = (0..n).map(|i| data.scenario(i)).collect();
    let mut sampler = BalancedSampler::new(&scenarios, sched.scenario_balancing, sched.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sched.seed);
    dropout_rng.set_stream(1);
    let mut opt = OptimizerState::new(&net, sched.lr0, sched.momentum, sched.weight_decay);
    let mut plateau = PlateauScheduler::new(sched.lr0, sched.lr_drop, sched.plateau_patience);
    let batches = sched.batches_per_epoch.unwrap_or_else(|| n.div_ceil(sched.batch_size));
    let mut history = TrainHistory::default();

    for epoch in 1..=sched.max_epochs {
        let lr = plateau.lr();
        opt.set_lr(lr);
        let mut loss_sum = 0.0f64;
        for _ in 0..batches {
            let batch = sampler.next_batch(sched.batch_size);
            let mut grads = Gradients::zeros_for(&net);
            for chunk in batch.chunks(sched.micro_batch) {
                let labels = checked_labels(data, chunk, classes)?;
                let x = load_batch(data, chunk, shape)?;
                let trace = net.forward_to(&x, end, DropoutSource::Rng(&mut dropout_rng))?;
                let (loss, mut g) = softmax_cross_entropy(&trace.activations[end], &labels)?;
                let share = chunk.len() as f32 / batch.len() as f32;
                g.data_mut().iter_mut().for_each(|v| *v *= share);
                net.backward_from(&trace, end, &g, &mut grads, false)?;
                loss_sum += loss as f64 * chunk.len() as f64;
            }
            if !grads.is_finite() {
                return Err(GaitError::NonFinite(format!("gradient in epoch {epoch}")));
            }
            sgd_step(&mut net, &grads, &mut opt)?;
        }
        let train_loss = loss_sum / (batches * sched.batch_size) as f64;
        if !train_loss.is_finite() {
            return Err(GaitError::NonFinite(format!("training loss in epoch {epoch}")));
        }
        let val_error = val.map(|v| top1_error(&net, v)).transpose()?;
        let train_accuracy = match sched.target_train_accuracy {
            Some(_) => Some(1.0 - top1_error(&net, data)?),
            None => None,
        };
        log::info!(
            "epoch {epoch}: lr {lr:e} loss {train_loss:.4} val_error {val_error:?} train_acc {train_accuracy:?}"
        );
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_error,
            train_accuracy,
        });
        if let (Some(target), Some(acc)) = (sched.target_train_accuracy, train_accuracy) {
            if acc >= target {
                break;
            }
        }
        plateau.observe(val_error.unwrap_or(train_loss));
        if plateau.lr() < sched.min_lr {
            break;
        }
    }
    Ok((net, history))
}

/// Trains with balanced mini-batch SGD and plateau learning-rate decay.
/// The validation error is the top-1 error on `val`'s cuboids; without a
/// validation set the training loss drives the plateau rule.
pub fn train(
    net: Network,
    dataset: &dyn CuboidSource,
    sched: &TrainSchedule,
    val: Option<&dyn CuboidSource>,
) -> Result<(Network, TrainHistory), GaitError> {
    let val = val.map(Cuboids);
    train_samples(net, &Cuboids(dataset), sched, val.as_ref().map(|v| v as &dyn Samples))
}

/// Builds stage 1, trains it, and carries the weights through stages 2-4.
/// With `checkpoint_dir`, each stage's network and history are saved there.
pub fn run_curriculum(
    trunk: &Trunk,
    stages: &[CurriculumStage],
    schedules: &[TrainSchedule],
    num_classes: usize,
    dataset: &dyn CuboidSource,
    val: Option<&dyn CuboidSource>,
    checkpoint_dir: Option<&Path>,
) -> Result<(Network, Vec<TrainHistory>), GaitError> {
    if stages.len() != 4 {
        return Err(GaitError::StageCount(stages.len()));
    }
    if schedules.len() != 4 {
        return Err(GaitError::StageCount(schedules.len()));
    }
    let mut prev: Option<Network> = None;
    let mut histories = Vec::new();
    for (stage, sched) in stages.iter().zip(schedules) {
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
        rng.set_stream(2);
        let fresh = build_network(trunk, stage, num_classes, &mut rng)?;
        let net = match &prev {
            Some(p) => transfer_weights(p, fresh)?,
            None => fresh,
        };
        let sched = TrainSchedule {
            momentum: stage.momentum,
            ..sched.clone()
        };
        log::info!("curriculum stage {}", stage.stage_index);
        let (net, history) = train(net, dataset, &sched, val)?;
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let meta = serde_json::json!({ "stage": stage, "schedule": sched, "classes": num_classes });
            save_checkpoint(&dir.join(format!("stage{}.gfnn", stage.stage_index)), &net, None, &meta)?;
            history.write_csv(&dir.join(format!("stage{}.csv", stage.stage_index)))?;
        }
        histories.push(history);
        prev = Some(net);
    }
    Ok((prev.unwrap(), histories))
}

/// Index one past the signature layer: full6 and the activation after it.
pub fn signature_end(net: &Network) -> Result<usize, GaitError> {
    let i = net
        .layer_index("full6")
        .ok_or_else(|| GaitError::Nn(NnError::InvalidSpec("network has no full6 layer".into())))?;
    Ok(match net.layers().get(i + 1).map(|l| l.spec()) {
        Some(LayerSpec::Relu) => i + 2,
        _ => i + 1,
    })
}

fn cached_features(net: &Network, data: &dyn CuboidSource, end: usize) -> Result<Features, GaitError> {
    let dim = net.layers()[end - 1].out_shape.len();
    let mut rows = Vec::with_capacity(data.len() * dim);
    let all: Vec<usize> = (0..data.len()).collect();
    let src = Cuboids(data);
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = load_batch(&src, chunk, net.input_shape())?;
        rows.extend_from_slice(net.infer_to(&x, end)?.data());
    }
    Ok(Features {
        dim,
        rows,
        labels: (0..data.len()).map(|i| data.label(i)).collect(),
        scenarios: (0..data.len()).map(|i| data.scenario(i)).collect(),
    })
}

/// Replaces the classifier with a `num_classes`-wide one trained on the
/// frozen full6 features of `dataset`. Every other parameter is copied
/// unchanged.
pub fn finetune_softmax(
    net: &Network,
    dataset: &dyn CuboidSource,
    num_classes: usize,
    sched: &TrainSchedule,
) -> Result<(Network, TrainHistory), GaitError> {
    if dataset.is_empty() {
        return Err(GaitError::EmptyDataset);
    }
    if num_classes < 2 {
        return Err(GaitError::TooFewClasses(num_classes));
    }
    let end = signature_end(net)?;
    let head_index = net
        .layers()
        .iter()
        .rposition(|l| l.params.is_some())
        .filter(|&i| i >= end)
        .ok_or_else(|| GaitError::Nn(NnError::InvalidSpec("no classifier after full6".into())))?;
    let features = cached_features(net, dataset, end)?;

    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    rng.set_stream(3);
    let head_name = net.layers()[head_index].name().to_string();
    let head = Network::new(
        Shape::vector(features.dim),
        vec![
            LayerDef::new(head_name.clone(), LayerSpec::FullyConnected { units: num_classes }),
            LayerDef::new("prob", LayerSpec::Softmax),
        ],
        &Init::default(),
        &mut rng,
    )?;
    let (head, history) = train_samples(head, &features, sched, None)?;

    let mut defs = net.defs();
    defs[head_index] = LayerDef::new(head_name, LayerSpec::FullyConnected { units: num_classes });
    let mut out = Network::with_zero_params(net.input_shape(), defs)?;
    out.mode = net.mode;
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        if i == head_index {
            layer.params = head.layers()[0].params.clone();
        } else {
            layer.params = net.layers()[i].params.clone();
        }
    }
    Ok((out, history))
}

/// L2-normalized full6 activation of one cuboid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitSignature {
    pub vector: Vec<f32>,
    pub subject: Option<u32>,
    pub scenario: Scenario,
    pub provenance: Option<Provenance>,
}

pub fn extract_signature(net: &Network, c: &FlowCuboid) -> Result<GaitSignature, GaitError> {
    Ok(extract_signatures(net, std::slice::from_ref(c))?.remove(0))
}

/// Signatures for many cuboids, evaluated in batches.
pub fn extract_signatures(net: &Network, cuboids: &[FlowCuboid]) -> Result<Vec<GaitSignature>, GaitError> {
    let end = signature_end(net)?;
    let mut out = Vec::with_capacity(cuboids.len());
    for chunk in cuboids.chunks(EVAL_CHUNK) {
        if chunk.iter().any(|c| c.mean_subtracted.is_none()) {
            return Err(GaitError::Unnormalized);
        }
        let refs: Vec<&[f32]> = chunk.iter().map(|c| c.data()).collect();
        let x = Tensor::stack(&refs, net.input_shape())?;
        let y = net.infer_to(&x, end)?;
        for (i, c) in chunk.iter().enumerate() {
            out.push(GaitSignature {
                vector: l2_normalize(y.sample(i))?,
                subject: c.label.or(c.provenance.as_ref().map(|p| p.subject)),
                scenario: c.scenario,
                provenance: c.provenance.clone(),
            });
        }
    }
    Ok(out)
}

pub(crate) fn l2_normalize(v: &[f32]) -> Result<Vec<f32>, GaitError> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(GaitError::NonFinite("signature".into()));
    }
    if norm == 0.0 {
        return Err(GaitError::ZeroSignature);
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cuboid::{compute_mean, normalize};

    pub(crate) fn narrow_trunk() -> Trunk {
        Trunk {
            conv1_filters: 4,
            conv2_filters: 4,
            conv3_filters: 6,
            lrn: LayerSpec::lrn_default(),
            init: Init {
                scale: InitScale::FanIn,
                ..Init::default()
            },
        }
    }

    fn small_stage(index: u8) -> CurriculumStage {
        let mut s = CurriculumStage::preset(index).unwrap();
        s.conv4_filters /= 64;
        s.full5_units /= 64;
        s.full6_units /= 64;
        s
    }

    #[test]
    fn stage4_chain_and_widths() {
        let defs = stage_layers(&Trunk::default(), &CurriculumStage::preset(4).unwrap(), 150);
        let net = Network::<f32>::with_zero_params(INPUT, defs).unwrap();
        let widths: Vec<usize> = ["conv4", "full5", "full6", "softmax"]
            .iter()
            .map(|n| net.layers()[net.layer_index(n).unwrap()].out_shape.len())
            .collect();
        assert_eq!(widths, [4096, 4096, 2048, 150]);
    }

    #[test]
    fn stage1_full6_is_256() {
        let s = CurriculumStage::preset(1).unwrap();
        assert_eq!(s.full6_units, 256);
        assert!(!s.lrn_enabled);
        assert_eq!(s.dropout_p, 0.0);
        let defs = stage_layers(&Trunk::default(), &s, 3);
        assert!(!defs.iter().any(|d| matches!(d.spec, LayerSpec::Lrn { .. } | LayerSpec::Dropout { .. })));
    }

    #[test]
    fn one_class_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = build_network(&narrow_trunk(), &small_stage(4), 1, &mut rng);
        assert!(matches!(r, Err(GaitError::TooFewClasses(1))));
    }

    #[test]
    fn transfer_same_geometry_copies_all_but_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = build_network(&narrow_trunk(), &small_stage(2), 3, &mut rng).unwrap();
        let b = build_network(&narrow_trunk(), &small_stage(2), 3, &mut rng).unwrap();
        let t = transfer_weights(&a, b.clone()).unwrap();
        let head = t.layer_index("softmax").unwrap();
        for (i, (la, lt)) in a.layers().iter().zip(t.layers()).enumerate() {
            if i == head {
                assert_eq!(lt.params, b.layers()[i].params);
            } else {
                assert_eq!(la.params, lt.params);
            }
        }
    }

    #[test]
    fn transfer_into_wider_conv4_keeps_leading_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = build_network(&narrow_trunk(), &small_stage(2), 3, &mut rng).unwrap();
        let b = build_network(&narrow_trunk(), &small_stage(3), 3, &mut rng).unwrap();
        let t = transfer_weights(&a, b).unwrap();
        let i = a.layer_index("conv4").unwrap();
        let (src, dst) = (a.layers()[i].params.as_ref().unwrap(), t.layers()[i].params.as_ref().unwrap());
        assert_eq!(src.bias.len(), 8);
        assert_eq!(dst.bias.len(), 32);
        assert_eq!(&dst.weight[..src.weight.len()], &src.weight[..]);
        assert_eq!(&dst.bias[..8], &src.bias[..]);
        // full5 input grew: the first 8 inputs of the first 8 units are copied
        let j = a.layer_index("full5").unwrap();
        let (s5, d5) = (a.layers()[j].params.as_ref().unwrap(), t.layers()[j].params.as_ref().unwrap());
        for r in 0..8 {
            assert_eq!(&d5.weight[r * 32..r * 32 + 8], &s5.weight[r * 8..r * 8 + 8]);
        }
    }

    #[test]
    fn transfer_rejects_kind_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = build_network(&narrow_trunk(), &small_stage(1), 3, &mut rng).unwrap();
        let mlp = Network::new(
            Shape::vector(5),
            (0..7)
                .map(|i| LayerDef::new(format!("f{i}"), LayerSpec::FullyConnected { units: 4 }))
                .collect(),
            &Init::default(),
            &mut rng,
        )
        .unwrap();
        assert!(matches!(transfer_weights(&a, mlp), Err(GaitError::KindMismatch { index: 0, .. })));
    }

    #[test]
    fn plateau_with_frozen_error_drops_every_patience_epochs() {
        let mut p = PlateauScheduler::new(1e-2, 10.0, 2);
        let mut lrs = vec![];
        for _ in 0..7 {
            lrs.push(p.lr());
            p.observe(0.5);
        }
        let expect = [1e-2, 1e-2, 1e-2, 1e-3, 1e-3, 1e-4, 1e-4];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a / b - 1.0).abs() < 1e-12, "{lrs:?}");
        }
    }

    #[test]
    fn sampler_splits_batches_evenly() {
        let mut scen = vec![Scenario::N; 400];
        scen.extend([Scenario::B; 100]);
        scen.extend([Scenario::S; 100]);
        let mut s = BalancedSampler::new(&scen, true, 5);
        for _ in 0..12 {
            let b = s.next_batch(100);
            assert_eq!(b.len(), 100);
            for sc in [Scenario::N, Scenario::B, Scenario::S] {
                let k = b.iter().filter(|&&i| scen[i] == sc).count() as f64;
                assert!((k - 100.0 / 3.0).abs() <= 1.0, "{k}");
            }
        }
    }

    #[test]
    fn sampler_cycles_every_sample_before_repeating() {
        let scen = vec![Scenario::N; 30];
        let mut s = BalancedSampler::new(&scen, false, 0);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(10)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_rejects_oversized_batch() {
        let s = TrainSchedule::default();
        assert!(s.validate(149).is_err());
        assert!(s.validate(150).is_ok());
    }

    fn toy_set(n_per_class: usize, seed: u64) -> Vec<FlowCuboid> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = vec![];
        for class in 0..3u32 {
            for _ in 0..n_per_class {
                let data: Vec<f32> = (0..INPUT.len())
                    .map(|i| {
                        let ch = i / (CROP * CROP);
                        let base = if ch % 3 == class as usize { 1.0 } else { 0.0 };
                        base + rng.gen_range(-0.3..0.3)
                    })
                    .collect();
                let mut c = FlowCuboid::from_data(CROP, CROP, 2 * STEPS, data, Scenario::ALL[class as usize]);
                c.label = Some(class);
                raw.push(c);
            }
        }
        let stats = compute_mean(&raw).unwrap();
        raw.iter().map(|c| normalize(c, &stats)).collect()
    }

    #[test]
    fn finetune_freezes_trunk_and_reshapes_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = build_network(&narrow_trunk(), &small_stage(2), 5, &mut rng).unwrap();
        let data = toy_set(4, 1);
        let sched = TrainSchedule {
            batch_size: 6,
            max_epochs: 3,
            ..Default::default()
        };
        let (tuned, _) = finetune_softmax(&net, &data, 3, &sched).unwrap();
        let head = tuned.layer_index("softmax").unwrap();
        assert_eq!(tuned.layers()[head].out_shape.len(), 3);
        for i in 0..head {
            assert_eq!(net.layers()[i].params, tuned.layers()[i].params);
        }
        assert_ne!(tuned.layers()[head].params, net.layers()[head].params);
    }

    #[test]
    fn label_overflow_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = build_network(&narrow_trunk(), &small_stage(1), 2, &mut rng).unwrap();
        let data = toy_set(2, 2);
        let sched = TrainSchedule {
            batch_size: 3,
            max_epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(net, &data, &sched, None),
            Err(GaitError::LabelOverflow { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn narrow_stage1_learns_toy_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut stage = CurriculumStage::preset(1).unwrap();
        stage.conv4_filters /= 16;
        stage.full5_units /= 16;
        stage.full6_units /= 16;
        let net = build_network(&narrow_trunk(), &stage, 3, &mut rng).unwrap();
        let data = toy_set(5, 3);
        let sched = TrainSchedule {
            batch_size: 5,
            max_epochs: 30,
            scenario_balancing: false,
            target_train_accuracy: Some(1.0),
            ..Default::default()
        };
        let (_, hist) = train(net, &data, &sched, None).unwrap();
        assert_eq!(hist.final_train_accuracy(), Some(1.0), "{hist:?}");
    }

    #[test]
    fn curriculum_needs_four_stages() {
        let data = toy_set(1, 0);
        let stages = CurriculumStage::presets();
        let r = run_curriculum(
            &narrow_trunk(),
            &stages[..3],
            &[TrainSchedule::default(), TrainSchedule::default(), TrainSchedule::default()],
            3,
            &data,
            None,
            None,
        );
        assert!(matches!(r, Err(GaitError::StageCount(3))));
    }

    #[test]
    fn signatures_are_unit_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = build_network(&narrow_trunk(), &small_stage(4), 3, &mut rng).unwrap();
        let data = toy_set(1, 4);
        let a = extract_signature(&net, &data[0]).unwrap();
        let b = extract_signature(&net, &data[0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), 32);
        let norm: f64 = a.vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        let mut raw = data[0].clone();
        raw.mean_subtracted = None;
        assert!(matches!(extract_signature(&net, &raw), Err(GaitError::Unnormalized)));
    }
}
