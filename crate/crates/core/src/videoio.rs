//! Frame-sequence ingestion, resizing and coarse subject localization.
//!
//! Sequences are stored either as a directory of numbered images
//! (`frame_000001.png`, ...) or as a `GFSQ` blob: the ASCII magic `GFSQ`
//! followed by little-endian `u32` width, height and frame count, then
//! `count × height × width` unsigned 8-bit luminance samples, frame-major and
//! row-major within a frame.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

pub const WORK_WIDTH: usize = 80;
pub const WORK_HEIGHT: usize = 60;

const GFSQ_MAGIC: &[u8; 4] = b"GFSQ";

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("cannot read frame {path}: {reason}")]
    UnreadableFrame { path: PathBuf, reason: String },
    #[error("frame {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    InconsistentDimensions {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("sequence has no frames")]
    Empty,
    #[error("invalid target size {0}x{1}")]
    InvalidSize(usize, usize),
    #[error("malformed sequence blob: {0}")]
    Malformed(String),
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Walking condition of a recorded sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    N,
    B,
    S,
    TN,
    TB,
    TS,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::N,
        Scenario::B,
        Scenario::S,
        Scenario::TN,
        Scenario::TB,
        Scenario::TS,
    ];

    pub fn code(self) -> u8 {
        match self {
            Scenario::N => 0,
            Scenario::B => 1,
            Scenario::S => 2,
            Scenario::TN => 3,
            Scenario::TB => 4,
            Scenario::TS => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::N => "N",
            Scenario::B => "B",
            Scenario::S => "S",
            Scenario::TN => "TN",
            Scenario::TB => "TB",
            Scenario::TS => "TS",
        }
    }

    /// True for the sessions recorded later (elapsed-time subset).
    pub fn is_elapsed(self) -> bool {
        matches!(self, Scenario::TN | Scenario::TB | Scenario::TS)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scenario code '{s}'"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    /// Class index used by the binary gender classifier.
    pub fn class(self) -> u32 {
        match self {
            Gender::Male => 0,
            Gender::Female => 1,
        }
    }
}

/// Grayscale frames of one recording, intensities in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Vec<Grid>,
    pub source_id: String,
    pub fps: f32,
}

impl FrameSequence {
    pub fn new(frames: Vec<Grid>, source_id: impl Into<String>, fps: f32) -> Result<Self, VideoError> {
        let first = frames.first().ok_or(VideoError::Empty)?;
        let (w, h) = (first.width(), first.height());
        for (index, f) in frames.iter().enumerate() {
            if f.width() != w || f.height() != h {
                return Err(VideoError::InconsistentDimensions {
                    index,
                    got_w: f.width(),
                    got_h: f.height(),
                    want_w: w,
                    want_h: h,
                });
            }
        }
        let mut frames = frames;
        for f in frames.iter_mut() {
            for v in f.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(FrameSequence {
            frames,
            source_id: source_id.into(),
            fps,
        })
    }

    pub fn frames(&self) -> &[Grid] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn mirrored(&self) -> FrameSequence {
        FrameSequence {
            frames: self.frames.iter().map(Grid::flip_horizontal).collect(),
            source_id: self.source_id.clone(),
            fps: self.fps,
        }
    }
}

/// Per-frame horizontal subject position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackEstimate {
    pub x_center: Vec<f32>,
    pub valid: Vec<bool>,
}

impl TrackEstimate {
    pub fn len(&self) -> usize {
        self.x_center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_center.is_empty()
    }
}

/// On-disk encoding of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceFormat {
    /// Directory of `frame_NNNNNN.<ext>` images.
    Frames,
    /// Single `GFSQ` blob.
    Gfsq,
}

/// One entry of a dataset layout descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRef {
    pub subject: u32,
    pub scenario: Scenario,
    /// 1-based sequence number within the scenario (`N3` has index 3).
    pub index: u32,
    /// Relative to the layout file's directory unless absolute.
    pub path: PathBuf,
    pub format: SequenceFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
}

impl SequenceRef {
    /// Sequence tag such as `N1` or `TB2`.
    pub fn tag(&self) -> String {
        format!("{}{}", self.scenario, self.index)
    }

    pub fn source_id(&self) -> String {
        format!("s{:03}/{}", self.subject, self.tag())
    }
}

/// Maps subject / scenario / sequence to files on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayout {
    #[serde(default = "default_fps")]
    pub fps: f32,
    pub sequences: Vec<SequenceRef>,
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_fps() -> f32 {
    25.0
}

impl DatasetLayout {
    pub fn load(path: &Path) -> Result<Self, VideoError> {
        if !path.exists() {
            return Err(VideoError::MissingPath(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut layout: DatasetLayout =
            serde_json::from_str(&text).map_err(|e| VideoError::Layout(e.to_string()))?;
        layout.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(layout)
    }

    pub fn save(&self, path: &Path) -> Result<(), VideoError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| VideoError::Layout(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn resolve(&self, entry: &SequenceRef) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn load_entry(&self, entry: &SequenceRef) -> Result<FrameSequence, VideoError> {
        let mut seq = load_sequence(&self.resolve(entry), entry.format)?;
        seq.source_id = entry.source_id();
        seq.fps = self.fps;
        Ok(seq)
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.sequences.iter().map(|e| e.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn gender_of(&self, subject: u32) -> Option<Gender> {
        self.sequences
            .iter()
            .find(|e| e.subject == subject)
            .and_then(|e| e.gender)
    }
}

/// Decodes a sequence and converts it to grayscale luminance in `[0, 1]`.
pub fn load_sequence(path: &Path, format: SequenceFormat) -> Result<FrameSequence, VideoError> {
    if !path.exists() {
        return Err(VideoError::MissingPath(path.to_path_buf()));
    }
    let id = path.display().to_string();
    match format {
        SequenceFormat::Frames => load_frame_dir(path, id),
        SequenceFormat::Gfsq => load_gfsq(path, id),
    }
}

fn frame_index(name: &str) -> Option<u64> {
    let rest = name.strip_prefix("frame_")?;
    let (digits, ext) = rest.split_once('.')?;
    if ext.is_empty() || digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn load_frame_dir(dir: &Path, id: String) -> Result<FrameSequence, VideoError> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            frame_index(&name).map(|i| (i, e.path()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(VideoError::Empty);
    }
    let mut frames = Vec::with_capacity(files.len());
    for (_, p) in &files {
        let img = image::open(p).map_err(|e| VideoError::UnreadableFrame {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        let rgb = img.into_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb
            .pixels()
            .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
            .collect();
        frames.push(Grid::from_vec(w, h, data));
    }
    FrameSequence::new(frames, id, default_fps())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn load_gfsq(path: &Path, id: String) -> Result<FrameSequence, VideoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != GFSQ_MAGIC {
        return Err(VideoError::Malformed(format!("{}: bad GFSQ header", path.display())));
    }
    let w = read_u32(&bytes, 4) as usize;
    let h = read_u32(&bytes, 8) as usize;
    let n = read_u32(&bytes, 12) as usize;
    let plane = w * h;
    if n == 0 || plane == 0 {
        return Err(VideoError::Empty);
    }
    if bytes.len() != 16 + n * plane {
        return Err(VideoError::Malformed(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            n * plane,
            bytes.len() - 16
        )));
    }
    let frames = bytes[16..]
        .chunks_exact(plane)
        .map(|c| Grid::from_vec(w, h, c.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect();
    FrameSequence::new(frames, id, default_fps())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a sequence as a `GFSQ` blob (8-bit quantized).
pub fn write_gfsq(path: &Path, seq: &FrameSequence) -> Result<(), VideoError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(GFSQ_MAGIC)?;
    out.write_all(&(seq.width() as u32).to_le_bytes())?;
    out.write_all(&(seq.height() as u32).to_le_bytes())?;
    out.write_all(&(seq.len() as u32).to_le_bytes())?;
    for f in seq.frames() {
        let bytes: Vec<u8> = f.data().iter().map(|&v| quantize(v)).collect();
        out.write_all(&bytes)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a sequence as numbered 8-bit grayscale PNG files.
pub fn write_frame_dir(dir: &Path, seq: &FrameSequence) -> Result<(), VideoError> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames().iter().enumerate() {
        let bytes: Vec<u8> = f.data().iter().map(|&v| quantize(v)).collect();
        let img = image::GrayImage::from_raw(f.width() as u32, f.height() as u32, bytes)
            .expect("buffer matches frame extent");
        let p = dir.join(format!("frame_{:06}.png", i + 1));
        img.save(&p).map_err(|e| VideoError::UnreadableFrame {
            path: p.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

/// Bilinearly resamples every frame to `width × height`.
///
/// The source is scaled to cover the target and the excess dimension is
/// cropped symmetrically, so sources with the target aspect ratio are resized
/// without cropping.
pub fn resize_sequence(seq: &FrameSequence, width: usize, height: usize) -> Result<FrameSequence, VideoError> {
    if width == 0 || height == 0 {
        return Err(VideoError::InvalidSize(width, height));
    }
    if seq.is_empty() {
        return Err(VideoError::Empty);
    }
    let frames = seq
        .frames()
        .iter()
        .map(|f| resize_cover(f, width, height))
        .collect();
    FrameSequence::new(frames, seq.source_id.clone(), seq.fps)
}

fn resize_cover(src: &Grid, width: usize, height: usize) -> Grid {
    if src.width() == width && src.height() == height {
        return src.clone();
    }
    let scale = (width as f32 / src.width() as f32).max(height as f32 / src.height() as f32);
    let off_x = (src.width() as f32 * scale - width as f32) / 2.0;
    let off_y = (src.height() as f32 * scale - height as f32) / 2.0;
    Grid::from_fn(width, height, |x, y| {
        let sx = (x as f32 + 0.5 + off_x) / scale - 0.5;
        let sy = (y as f32 + 0.5 + off_y) / scale - 0.5;
        src.sample_bilinear(sx, sy)
    })
}

/// Parameters of the median background model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    /// Frames in the temporal median window.
    pub window: usize,
    /// Absolute intensity difference that marks a pixel as foreground.
    pub threshold: f32,
    /// Minimum foreground pixel count for a frame to be valid.
    pub min_area: usize,
}

impl Default for BackgroundParams {
    fn default() -> Self {
        BackgroundParams {
            window: 25,
            threshold: 0.1,
            min_area: 20,
        }
    }
}

pub const MIN_LOCALIZE_FRAMES: usize = 5;

/// Estimates the subject's horizontal position per frame with default
/// background parameters.
pub fn localize_subject(seq: &FrameSequence) -> Result<TrackEstimate, VideoError> {
    localize_subject_with(seq, &BackgroundParams::default())
}

/// Foreground is `|frame - background| > threshold`, where the background is a
/// per-pixel median over a window of frames centered on the current frame
/// (shifted to stay inside the sequence). The position is the
/// difference-weighted column centroid of the foreground pixels.
pub fn localize_subject_with(
    seq: &FrameSequence,
    params: &BackgroundParams,
) -> Result<TrackEstimate, VideoError> {
    let n = seq.len();
    if n < MIN_LOCALIZE_FRAMES {
        return Err(VideoError::Malformed(format!(
            "background model needs at least {MIN_LOCALIZE_FRAMES} frames, got {n}"
        )));
    }
    let win = params.window.clamp(1, n);
    let half = win / 2;
    let (w, h) = (seq.width(), seq.height());
    let mut x_center = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut cached: Option<(usize, Grid)> = None;
    let mut buf = vec![0.0f32; win];
    for t in 0..n {
        let start = t.saturating_sub(half).min(n - win);
        let bg = match &cached {
            Some((s, g)) if *s == start => g.clone(),
            _ => {
                let g = Grid::from_fn(w, h, |x, y| {
                    for (k, slot) in buf.iter_mut().enumerate() {
                        *slot = seq.frames()[start + k].get(x, y);
                    }
                    let mid = (win - 1) / 2;
                    *buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
                });
                cached = Some((start, g.clone()));
                g
            }
        };
        let frame = &seq.frames()[t];
        let mut area = 0usize;
        let mut wsum = 0.0f64;
        let mut xsum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let d = (frame.get(x, y) - bg.get(x, y)).abs();
                if d > params.threshold {
                    area += 1;
                    wsum += d as f64;
                    xsum += d as f64 * x as f64;
                }
            }
        }
        if area >= params.min_area && wsum > 0.0 {
            x_center.push((xsum / wsum) as f32);
            valid.push(true);
        } else {
            x_center.push(0.0);
            valid.push(false);
        }
    }
    Ok(TrackEstimate { x_center, valid })
}
