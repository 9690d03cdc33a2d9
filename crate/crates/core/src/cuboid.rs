//! Aligned flow cuboids: windowing of flow sequences, augmentation, global
//! mean normalization and the `GFCB` archive.
//!
//! A cuboid stacks `L` consecutive flow maps cropped to a square window around
//! the subject. Channel `2k` holds `u` of step `k` and channel `2k + 1` holds
//! `v` (0-based), stored plane-major: `data[(c * height + y) * width + x]`.

use std::borrow::Borrow;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optflow::OpticalFlowMap;
use crate::videoio::{Scenario, TrackEstimate};

pub const STEPS: usize = 25;
pub const OVERLAP: f64 = 0.8;
pub const CROP: usize = 60;
pub const SHIFT: isize = 5;
pub const AUGMENTATIONS: usize = 18;

const GFCB_MAGIC: &[u8; 4] = b"GFCB";
const NO_LABEL: u32 = u32::MAX;

/// Crop offsets `(dx, dy)`; index 0 is the aligned crop.
pub const OFFSETS: [(isize, isize); 9] = [
    (0, 0),
    (-SHIFT, -SHIFT),
    (-SHIFT, 0),
    (-SHIFT, SHIFT),
    (0, -SHIFT),
    (0, SHIFT),
    (SHIFT, -SHIFT),
    (SHIFT, 0),
    (SHIFT, SHIFT),
];

#[derive(Debug, Error)]
pub enum CuboidError {
    #[error("need at least {need} flow maps, got {got}")]
    TooFewMaps { need: usize, got: usize },
    #[error("track covers {track} frames but {flows} flow maps were given")]
    ShortTrack { track: usize, flows: usize },
    #[error("flow maps are {0}px wide, narrower than the {1}px crop")]
    Narrow(usize, usize),
    #[error("empty cuboid stream")]
    Empty,
    #[error("malformed archive: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a cuboid came from; used to keep subject partitions apart.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: u32,
    pub scenario: Scenario,
    /// 1-based sequence number within the scenario.
    pub sequence: u32,
    pub window_start: usize,
    /// Augmentation index in `0..18`; 0 is the aligned, unmirrored crop.
    pub augmentation: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowCuboid {
    data: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
    pub label: Option<u32>,
    pub scenario: Scenario,
    /// Subject x-position at the central frame and the clamped crop start.
    pub center_frame_x: f32,
    pub crop_x: usize,
    /// Mean that was subtracted, if the cuboid has been normalized.
    pub mean_subtracted: Option<f32>,
    pub provenance: Option<Provenance>,
}

impl FlowCuboid {
    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>, scenario: Scenario) -> Self {
        assert_eq!(data.len(), height * width * channels, "cuboid buffer length mismatch");
        FlowCuboid {
            data,
            height,
            width,
            channels,
            label: None,
            scenario,
            center_frame_x: 0.0,
            crop_x: 0,
            mean_subtracted: None,
            provenance: None,
        }
    }

    pub fn filled(value: f32, scenario: Scenario) -> Self {
        Self::from_data(CROP, CROP, 2 * STEPS, vec![value; CROP * CROP * 2 * STEPS], scenario)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    #[inline]
    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Horizontal flip of every flow step with `u` negated.
    pub fn mirrored(&self) -> FlowCuboid {
        let mut out = self.clone();
        let (h, w) = (self.height, self.width);
        for c in 0..self.channels {
            let sign = if c % 2 == 0 { -1.0 } else { 1.0 };
            for y in 0..h {
                for x in 0..w {
                    out.data[(c * h + y) * w + x] = sign * self.at(c, y, w - 1 - x);
                }
            }
        }
        out
    }
}

/// An uncropped window of `L` flow maps together with its alignment.
#[derive(Clone, Debug)]
pub struct FlowWindow {
    pub maps: Vec<OpticalFlowMap>,
    /// 0-based index of the first flow step within the sequence.
    pub start: usize,
    pub x_center: f32,
    pub crop_x: usize,
}

impl FlowWindow {
    /// Cuts a `CROP`-wide cuboid at horizontal offset `dx` and vertical offset
    /// `dy`; samples outside the maps are zero (no motion).
    pub fn crop(&self, dx: isize, dy: isize, scenario: Scenario) -> FlowCuboid {
        let (mw, mh) = (self.maps[0].width(), self.maps[0].height());
        let channels = 2 * self.maps.len();
        let mut data = vec![0.0f32; channels * mh * CROP];
        for (k, m) in self.maps.iter().enumerate() {
            for (plane, grid) in [(2 * k, &m.u), (2 * k + 1, &m.v)] {
                let base = plane * mh * CROP;
                for y in 0..mh {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= mh as isize {
                        continue;
                    }
                    let row = grid.row(sy as usize);
                    for x in 0..CROP {
                        let sx = self.crop_x as isize + dx + x as isize;
                        if sx >= 0 && sx < mw as isize {
                            data[base + y * CROP + x] = row[sx as usize];
                        }
                    }
                }
            }
        }
        let mut c = FlowCuboid::from_data(mh, CROP, channels, data, scenario);
        c.center_frame_x = self.x_center;
        c.crop_x = self.crop_x;
        c
    }

    /// Augmentation `index` in `0..18`: offsets in `OFFSETS` order, the second
    /// nine are the mirrored versions of the first nine.
    pub fn augmented(&self, index: usize, scenario: Scenario) -> FlowCuboid {
        assert!(index < AUGMENTATIONS, "augmentation index out of range");
        let (dx, dy) = OFFSETS[index % OFFSETS.len()];
        let c = self.crop(dx, dy, scenario);
        if index >= OFFSETS.len() {
            c.mirrored()
        } else {
            c
        }
    }
}

/// Start column of a crop centered at `x_center`, clamped to the map.
pub fn crop_start(x_center: f32, map_width: usize) -> usize {
    let max_start = map_width.saturating_sub(CROP) as f32;
    (x_center.round() - (CROP / 2) as f32).clamp(0.0, max_start) as usize
}

/// Window stride in flow steps for a window length and overlap fraction.
pub fn window_stride(steps: usize, overlap: f64) -> usize {
    ((steps as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Splits a flow sequence into overlapping windows aligned on the subject
/// position at each window's central step. Windows whose central frame has no
/// detected subject are dropped.
pub fn build_windows(
    flows: &[OpticalFlowMap],
    track: &TrackEstimate,
    steps: usize,
    overlap: f64,
) -> Result<Vec<FlowWindow>, CuboidError> {
    if flows.len() < steps || steps == 0 {
        return Err(CuboidError::TooFewMaps {
            need: steps.max(1),
            got: flows.len(),
        });
    }
    if track.len() < flows.len() {
        return Err(CuboidError::ShortTrack {
            track: track.len(),
            flows: flows.len(),
        });
    }
    let width = flows[0].width();
    if width < CROP {
        return Err(CuboidError::Narrow(width, CROP));
    }
    let stride = window_stride(steps, overlap);
    let mut out = Vec::new();
    let mut dropped = 0usize;
    let mut start = 0;
    while start + steps <= flows.len() {
        // central step #13 of 25 in 1-based numbering
        let central = start + steps / 2;
        if track.valid[central] {
            let x_center = track.x_center[central];
            out.push(FlowWindow {
                maps: flows[start..start + steps].to_vec(),
                start,
                x_center,
                crop_x: crop_start(x_center, width),
            });
        } else {
            dropped += 1;
        }
        start += stride;
    }
    if dropped > 0 {
        log::debug!("dropped {dropped} windows without a detected subject");
    }
    Ok(out)
}

/// Aligned cuboids for a flow sequence (the unaugmented member of each window).
pub fn build_subsequences(
    flows: &[OpticalFlowMap],
    track: &TrackEstimate,
    steps: usize,
    overlap: f64,
    scenario: Scenario,
) -> Result<Vec<FlowCuboid>, CuboidError> {
    Ok(build_windows(flows, track, steps, overlap)?
        .iter()
        .map(|w| w.crop(0, 0, scenario))
        .collect())
}

/// The 18 augmentations of `c`, re-cut from its source window. Metadata of `c`
/// is carried over; provenance records the augmentation index.
pub fn augment(c: &FlowCuboid, source: &FlowWindow) -> Vec<FlowCuboid> {
    (0..AUGMENTATIONS)
        .map(|i| {
            let mut a = source.augmented(i, c.scenario);
            a.label = c.label;
            a.center_frame_x = c.center_frame_x;
            a.crop_x = c.crop_x;
            a.provenance = c.provenance.clone().map(|mut p| {
                p.augmentation = i as u8;
                p
            });
            a
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuboidSetStats {
    pub mean: f64,
    /// Number of cuboids that contributed.
    pub count: usize,
}

/// Deterministic pairwise sum of a slice.
pub(crate) fn pairwise_sum(v: &[f32]) -> f64 {
    if v.len() <= 64 {
        return v.iter().map(|&x| x as f64).sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Streaming cascade summation: partial sums merge like a binary counter, so
/// the reduction tree depends only on the input order.
#[derive(Default)]
struct CascadeSum {
    levels: Vec<Option<f64>>,
}

impl CascadeSum {
    fn push(&mut self, mut v: f64) {
        for slot in self.levels.iter_mut() {
            match slot.take() {
                Some(s) => v += s,
                None => {
                    *slot = Some(v);
                    return;
                }
            }
        }
        self.levels.push(Some(v));
    }

    fn total(&self) -> f64 {
        self.levels.iter().flatten().sum()
    }
}

/// Single global mean over every element of every cuboid, in one pass.
pub fn compute_mean<I>(train: I) -> Result<CuboidSetStats, CuboidError>
where
    I: IntoIterator,
    I::Item: Borrow<FlowCuboid>,
{
    let mut sum = CascadeSum::default();
    let mut elements = 0u64;
    let mut count = 0usize;
    for c in train {
        let c = c.borrow();
        sum.push(pairwise_sum(c.data()));
        elements += c.data().len() as u64;
        count += 1;
    }
    if count == 0 || elements == 0 {
        return Err(CuboidError::Empty);
    }
    Ok(CuboidSetStats {
        mean: sum.total() / elements as f64,
        count,
    })
}

/// Subtracts the global mean from every element.
pub fn normalize(c: &FlowCuboid, stats: &CuboidSetStats) -> FlowCuboid {
    let mut out = c.clone();
    let m = stats.mean as f32;
    out.data.iter_mut().for_each(|v| *v -= m);
    out.mean_subtracted = Some(m);
    out
}

/// Random-access collection of cuboids.
pub trait CuboidSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<FlowCuboid, CuboidError>;
    fn label(&self, index: usize) -> Option<u32>;
    fn scenario(&self, index: usize) -> Scenario;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CuboidSource for Vec<FlowCuboid> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<FlowCuboid, CuboidError> {
        Ok(self[index].clone())
    }

    fn label(&self, index: usize) -> Option<u32> {
        self[index].label
    }

    fn scenario(&self, index: usize) -> Scenario {
        self[index].scenario
    }
}

/// A flow window with its labels, used by [`WindowSet`].
#[derive(Clone, Debug)]
pub struct LabeledWindow {
    pub window: FlowWindow,
    pub label: Option<u32>,
    pub provenance: Provenance,
}

impl LabeledWindow {
    pub fn cuboid(&self, augmentation: usize) -> FlowCuboid {
        let mut c = self.window.augmented(augmentation, self.provenance.scenario);
        c.label = self.label;
        let mut p = self.provenance.clone();
        p.augmentation = augmentation as u8;
        c.provenance = Some(p);
        c
    }
}

/// Cuboids generated on demand from stored windows, optionally expanded with
/// all 18 augmentations and normalized by a dataset mean.
pub struct WindowSet {
    windows: Vec<LabeledWindow>,
    augment: bool,
    stats: Option<CuboidSetStats>,
}

impl WindowSet {
    pub fn new(windows: Vec<LabeledWindow>, augment: bool) -> Self {
        WindowSet {
            windows,
            augment,
            stats: None,
        }
    }

    pub fn with_stats(mut self, stats: CuboidSetStats) -> Self {
        self.stats = Some(stats);
        self
    }

    pub fn stats(&self) -> Option<CuboidSetStats> {
        self.stats
    }

    pub fn windows(&self) -> &[LabeledWindow] {
        &self.windows
    }

    fn per_window(&self) -> usize {
        if self.augment {
            AUGMENTATIONS
        } else {
            1
        }
    }

    /// Raw (un-normalized) cuboid at `index`.
    pub fn raw(&self, index: usize) -> FlowCuboid {
        let k = self.per_window();
        self.windows[index / k].cuboid(index % k)
    }

    /// Global mean over every cuboid this set yields.
    pub fn compute_stats(&self) -> Result<CuboidSetStats, CuboidError> {
        compute_mean((0..self.len()).map(|i| self.raw(i)))
    }
}

impl CuboidSource for WindowSet {
    fn len(&self) -> usize {
        self.windows.len() * self.per_window()
    }

    fn get(&self, index: usize) -> Result<FlowCuboid, CuboidError> {
        let raw = self.raw(index);
        Ok(match &self.stats {
            Some(s) => normalize(&raw, s),
            None => raw,
        })
    }

    fn label(&self, index: usize) -> Option<u32> {
        self.windows[index / self.per_window()].label
    }

    fn scenario(&self, index: usize) -> Scenario {
        self.windows[index / self.per_window()].provenance.scenario
    }
}

/// Sidecar manifest of a cuboid archive.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<CuboidSetStats>,
    pub samples: Vec<Option<Provenance>>,
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut p = archive.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Streaming writer for `GFCB` archives: magic, `u32` count, height, width,
/// channels, then per sample `u32` label (`u32::MAX` if unlabeled), `u8`
/// scenario code and the plane-major `f32` data.
pub struct ArchiveWriter {
    out: BufWriter<fs::File>,
    path: PathBuf,
    dims: Option<(usize, usize, usize)>,
    manifest: ArchiveManifest,
}

impl ArchiveWriter {
    pub fn create(path: &Path) -> Result<Self, CuboidError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(GFCB_MAGIC)?;
        out.write_all(&[0u8; 16])?;
        Ok(ArchiveWriter {
            out,
            path: path.to_path_buf(),
            dims: None,
            manifest: ArchiveManifest::default(),
        })
    }

    pub fn push(&mut self, c: &FlowCuboid) -> Result<(), CuboidError> {
        let dims = (c.height, c.width, c.channels);
        match self.dims {
            None => self.dims = Some(dims),
            Some(d) if d != dims => {
                return Err(CuboidError::Malformed(format!(
                    "sample dims {dims:?} differ from archive dims {d:?}"
                )))
            }
            _ => {}
        }
        self.out.write_all(&c.label.unwrap_or(NO_LABEL).to_le_bytes())?;
        self.out.write_all(&[c.scenario.code()])?;
        let mut bytes = Vec::with_capacity(c.data.len() * 4);
        for v in &c.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.out.write_all(&bytes)?;
        self.manifest.samples.push(c.provenance.clone());
        Ok(())
    }

    pub fn finish(mut self, stats: Option<CuboidSetStats>) -> Result<ArchiveManifest, CuboidError> {
        let (h, w, c) = self.dims.unwrap_or((CROP, CROP, 2 * STEPS));
        self.out.seek(SeekFrom::Start(4))?;
        for v in [self.manifest.samples.len(), h, w, c] {
            self.out.write_all(&(v as u32).to_le_bytes())?;
        }
        self.out.flush()?;
        self.manifest.stats = stats;
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| CuboidError::Malformed(e.to_string()))?;
        fs::write(manifest_path(&self.path), text)?;
        Ok(self.manifest)
    }
}

/// Random-access reader over a `GFCB` archive.
pub struct ArchiveReader {
    file: Mutex<BufReader<fs::File>>,
    count: usize,
    dims: (usize, usize, usize),
    labels: Vec<Option<u32>>,
    scenarios: Vec<Scenario>,
    pub manifest: ArchiveManifest,
    stats: Option<CuboidSetStats>,
}

impl ArchiveReader {
    pub fn open(path: &Path) -> Result<Self, CuboidError> {
        let mut file = BufReader::new(fs::File::open(path)?);
        let mut header = [0u8; 20];
        file.read_exact(&mut header)?;
        if &header[..4] != GFCB_MAGIC {
            return Err(CuboidError::Malformed("bad GFCB magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (count, h, w, c) = (word(1), word(2), word(3), word(4));
        let record = 5 + 4 * h * w * c;
        let expected = 20 + count as u64 * record as u64;
        let actual = file.get_ref().metadata()?.len();
        if actual != expected {
            return Err(CuboidError::Malformed(format!(
                "archive is {actual} bytes, header implies {expected}"
            )));
        }
        let mut labels = Vec::with_capacity(count);
        let mut scenarios = Vec::with_capacity(count);
        for i in 0..count {
            file.seek(SeekFrom::Start(20 + (i * record) as u64))?;
            let mut meta = [0u8; 5];
            file.read_exact(&mut meta)?;
            let label = u32::from_le_bytes(meta[..4].try_into().unwrap());
            labels.push((label != NO_LABEL).then_some(label));
            scenarios.push(
                Scenario::from_code(meta[4])
                    .ok_or_else(|| CuboidError::Malformed(format!("unknown scenario code {}", meta[4])))?,
            );
        }
        let manifest = match fs::read_to_string(manifest_path(path)) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| CuboidError::Malformed(e.to_string()))?,
            Err(_) => ArchiveManifest::default(),
        };
        Ok(ArchiveReader {
            file: Mutex::new(file),
            count,
            dims: (h, w, c),
            labels,
            scenarios,
            stats: manifest.stats,
            manifest,
        })
    }

    /// Applies mean normalization to every sample returned by `get`.
    pub fn with_stats(mut self, stats: Option<CuboidSetStats>) -> Self {
        self.stats = stats;
        self
    }

    pub fn stats(&self) -> Option<CuboidSetStats> {
        self.stats
    }

    pub fn raw(&self, index: usize) -> Result<FlowCuboid, CuboidError> {
        let (h, w, c) = self.dims;
        let record = 5 + 4 * h * w * c;
        let mut buf = vec![0u8; record];
        {
            let mut f = self.file.lock().expect("archive reader poisoned");
            f.seek(SeekFrom::Start(20 + (index * record) as u64))?;
            f.read_exact(&mut buf)?;
        }
        let data = buf[5..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut cub = FlowCuboid::from_data(h, w, c, data, self.scenarios[index]);
        cub.label = self.labels[index];
        cub.provenance = self.manifest.samples.get(index).cloned().flatten();
        Ok(cub)
    }
}

impl CuboidSource for ArchiveReader {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<FlowCuboid, CuboidError> {
        let raw = self.raw(index)?;
        Ok(match &self.stats {
            Some(s) => normalize(&raw, s),
            None => raw,
        })
    }

    fn label(&self, index: usize) -> Option<u32> {
        self.labels[index]
    }

    fn scenario(&self, index: usize) -> Scenario {
        self.scenarios[index]
    }
}
