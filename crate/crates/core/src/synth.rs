//! Synthetic walkers: a textured body with two swinging legs crossing a
//! static background.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid::{gaussian_kernel, separable_blur, Grid};
use crate::videoio::{
    write_frame_dir, write_gfsq, DatasetLayout, FrameSequence, Gender, Scenario, SequenceFormat, SequenceRef,
    VideoError,
};

/// Gait and appearance of one synthetic subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub subject: u32,
    pub gender: Gender,
    pub frequency_hz: f32,
    pub phase: f32,
    /// Horizontal foot excursion at full swing.
    pub amplitude_px: f32,
    pub speed_px: f32,
    pub body_width: f32,
    pub body_height: f32,
    /// Base intensity of the body.
    pub clothing: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub subjects: usize,
    pub first_subject: u32,
    pub width: usize,
    pub height: usize,
    pub fps: f32,
    pub frames: usize,
    /// Sequences per subject for N, B and S.
    pub normal_sequences: u32,
    pub bag_sequences: u32,
    pub shoe_sequences: u32,
    /// Sequences per subject for each of TN, TB and TS.
    pub elapsed_sequences: u32,
    pub noise: f32,
    pub seed: u64,
    pub format: SequenceFormat,
    pub female_fraction: f64,
    /// Explicit subjects; replaces the sampled ones when present.
    pub params: Option<Vec<SubjectParams>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 8,
            first_subject: 1,
            width: 80,
            height: 60,
            fps: 25.0,
            frames: 60,
            normal_sequences: 6,
            bag_sequences: 2,
            shoe_sequences: 2,
            elapsed_sequences: 0,
            noise: 0.01,
            seed: 0,
            format: SequenceFormat::Gfsq,
            female_fraction: 0.374,
            params: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

const LEG_LENGTH: f32 = 14.0;
const LEG_HALF_WIDTH: f32 = 1.5;
const GROUND_MARGIN: f32 = 4.0;

impl SynthSpec {
    /// Reads a TOML spec; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.width < 32 || self.height < 48 {
            return bad(format!("frame {}x{} is too small to render a walker", self.width, self.height));
        }
        if self.frames < 2 || self.fps <= 0.0 {
            return bad("need at least 2 frames and a positive frame rate".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5]", self.noise));
        }
        let subjects = self.subject_params();
        if subjects.is_empty() {
            return bad("no subjects".into());
        }
        for p in &subjects {
            let travel = p.speed_px * (self.frames - 1) as f32 + p.body_width + 2.0 * p.amplitude_px;
            if travel > self.width as f32
                || p.body_height + LEG_LENGTH + GROUND_MARGIN + 2.0 > self.height as f32
                || p.amplitude_px >= LEG_LENGTH
                || p.frequency_hz <= 0.0
            {
                return bad(format!("subject {} does not fit the frame", p.subject));
            }
        }
        for (i, a) in subjects.iter().enumerate() {
            if subjects[i + 1..].iter().any(|b| {
                a.subject == b.subject
                    || (a.frequency_hz == b.frequency_hz
                        && a.amplitude_px == b.amplitude_px
                        && a.speed_px == b.speed_px
                        && a.body_height == b.body_height)
            }) {
                return bad(format!("subject {} is not distinct", a.subject));
            }
        }
        Ok(())
    }

    /// Subject parameters, stratified so every attribute is spread evenly over
    /// its range and no two subjects share a stratum.
    pub fn subject_params(&self) -> Vec<SubjectParams> {
        if let Some(p) = &self.params {
            return p.clone();
        }
        let n = self.subjects;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_5b1e);
        let strata = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(rng);
            v
        };
        let (f, a, s, h, w, c) = (
            strata(&mut rng),
            strata(&mut rng),
            strata(&mut rng),
            strata(&mut rng),
            strata(&mut rng),
            strata(&mut rng),
        );
        let max_speed = ((self.width as f32 - 30.0) / (self.frames.max(2) - 1) as f32).min(0.6);
        let pick = |slot: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng| {
            lo + (hi - lo) * (slot as f32 + rng.gen_range(0.2..0.8)) / n as f32
        };
        let females = ((n as f64 * self.female_fraction).round() as usize).clamp(usize::from(n > 1), n - 1);
        let mut gender: Vec<Gender> = (0..n)
            .map(|i| if i < females { Gender::Female } else { Gender::Male })
            .collect();
        gender.shuffle(&mut rng);
        (0..n)
            .map(|i| SubjectParams {
                subject: self.first_subject + i as u32,
                gender: gender[i],
                frequency_hz: pick(f[i], 0.8, 1.8, &mut rng),
                phase: rng.gen_range(0.0..2.0 * PI),
                amplitude_px: pick(a[i], 3.0, 8.0, &mut rng),
                speed_px: pick(s[i], 0.15, max_speed, &mut rng),
                body_height: pick(h[i], 18.0, 28.0, &mut rng),
                body_width: pick(w[i], 7.0, 12.0, &mut rng),
                clothing: pick(c[i], 0.08, 0.32, &mut rng),
            })
            .collect()
    }

    fn sequence_plan(&self) -> Vec<(Scenario, u32)> {
        let mut plan = vec![];
        for (s, k) in [
            (Scenario::N, self.normal_sequences),
            (Scenario::B, self.bag_sequences),
            (Scenario::S, self.shoe_sequences),
            (Scenario::TN, self.elapsed_sequences),
            (Scenario::TB, self.elapsed_sequences),
            (Scenario::TS, self.elapsed_sequences),
        ] {
            plan.extend((1..=k).map(|i| (s, i)));
        }
        plan
    }
}

/// Ground truth for one rendered sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceTruth {
    pub subject: u32,
    pub gender: Gender,
    pub scenario: Scenario,
    pub index: u32,
    /// +1 walks right, -1 walks left.
    pub direction: i8,
    /// Body center column per frame.
    pub trajectory: Vec<f32>,
    pub params: SubjectParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub sequences: Vec<SequenceTruth>,
}

fn sequence_seed(spec: &SynthSpec, subject: u32, scenario: Scenario, index: u32) -> u64 {
    spec.seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(((subject as u64) << 24) | ((scenario.code() as u64) << 16) | index as u64)
}

/// Coverage of an axis-aligned box with anti-aliased edges.
fn box_cover(x: f32, y: f32, x0: f32, x1: f32, y0: f32, y1: f32) -> f32 {
    let cx = ((x + 0.5).min(x1) - (x - 0.5).max(x0)).clamp(0.0, 1.0);
    let cy = ((y + 0.5).min(y1) - (y - 0.5).max(y0)).clamp(0.0, 1.0);
    cx * cy
}

fn segment_cover(x: f32, y: f32, a: (f32, f32), b: (f32, f32), half_width: f32) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((x - a.0) * dx + (y - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (px, py) = (a.0 + t * dx - x, a.1 + t * dy - y);
    (half_width + 0.5 - (px * px + py * py).sqrt()).clamp(0.0, 1.0)
}

/// Renders one sequence of `subject` in `scenario`. Elapsed-time scenarios
/// jitter the gait frequency by up to 10% and change the clothing.
pub fn render_sequence(
    spec: &SynthSpec,
    subject: &SubjectParams,
    scenario: Scenario,
    index: u32,
) -> (FrameSequence, SequenceTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(spec, subject.subject, scenario, index));
    let (w, h) = (spec.width, spec.height);
    let background = {
        let noise = Grid::from_fn(w, h, |_, _| rng.gen::<f32>());
        let smooth = separable_blur(&noise, &gaussian_kernel(2.0, 6));
        let (lo, hi) = smooth
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        smooth.map(|v| 0.5 + 0.3 * (v - lo) / (hi - lo).max(1e-6))
    };

    let mut p = subject.clone();
    let mut stripe_period = 4.0 + (subject.subject % 3) as f32;
    if scenario.is_elapsed() {
        p.frequency_hz *= 1.0 + rng.gen_range(-0.1..0.1);
        p.clothing = 0.08 + (p.clothing - 0.08 + 0.12) % 0.24;
        stripe_period += 2.0;
    }
    if matches!(scenario, Scenario::S | Scenario::TS) {
        p.amplitude_px *= 0.7;
    }
    let bag = matches!(scenario, Scenario::B | Scenario::TB);
    let direction: i8 = if index % 2 == 1 { 1 } else { -1 };
    let dir = direction as f32;
    let travel = p.speed_px * (spec.frames - 1) as f32;
    let x_start = w as f32 / 2.0 - dir * travel / 2.0;
    let ground = h as f32 - GROUND_MARGIN;
    let hip = ground - LEG_LENGTH;
    let top = hip - p.body_height;
    let noise = Normal::new(0.0, spec.noise.max(1e-9)).unwrap();
    let omega = 2.0 * PI * p.frequency_hz / spec.fps;

    let mut frames = Vec::with_capacity(spec.frames);
    let mut trajectory = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let xc = x_start + dir * p.speed_px * t as f32;
        trajectory.push(xc);
        let swing = p.amplitude_px * (omega * t as f32 + p.phase).sin();
        let feet = [(xc + swing, ground), (xc - swing, ground)];
        let (bx0, bx1) = (xc - p.body_width / 2.0, xc + p.body_width / 2.0);
        // bag hangs on the trailing side
        let (gx0, gx1) = if dir > 0.0 { (bx0 - 5.0, bx0 + 1.0) } else { (bx1 - 1.0, bx1 + 5.0) };
        let gy0 = top + p.body_height * 0.35;
        let frame = Grid::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f32, y as f32);
            let mut v = background.get(x, y);
            for foot in feet {
                let c = segment_cover(fx, fy, (xc, hip), foot, LEG_HALF_WIDTH);
                v += (p.clothing * 0.8 - v) * c;
            }
            let c = box_cover(fx, fy, bx0, bx1, top, hip + 1.0);
            if c > 0.0 {
                let stripes = 0.06 * (2.0 * PI * (fy - top) / stripe_period).sin();
                v += (p.clothing + stripes - v) * c;
            }
            if bag {
                let c = box_cover(fx, fy, gx0, gx1, gy0, gy0 + 9.0);
                v += (0.03 - v) * c;
            }
            if spec.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            v.clamp(0.0, 1.0)
        });
        frames.push(frame);
    }
    let truth = SequenceTruth {
        subject: subject.subject,
        gender: subject.gender,
        scenario,
        index,
        direction,
        trajectory,
        params: p,
    };
    let id = format!("s{:03}/{}{}", subject.subject, scenario, index);
    let seq = FrameSequence::new(frames, id, spec.fps).expect("rendered frames share dimensions");
    (seq, truth)
}

/// Relative path of a sequence inside a generated dataset.
pub fn sequence_path(subject: u32, scenario: Scenario, index: u32, format: SequenceFormat) -> PathBuf {
    let dir = PathBuf::from(format!("s{subject:03}"));
    match format {
        SequenceFormat::Gfsq => dir.join(format!("{scenario}{index}.gfsq")),
        SequenceFormat::Frames => dir.join(format!("{scenario}{index}")),
    }
}

pub const LAYOUT_FILE: &str = "layout.json";
pub const TRUTH_FILE: &str = "ground_truth.json";

/// Renders every subject and sequence of `spec` under `root` and writes the
/// layout descriptor and ground-truth manifest next to them.
pub fn generate_synth_dataset(spec: &SynthSpec, root: &Path) -> Result<DatasetLayout, SynthError> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let mut layout = DatasetLayout {
        fps: spec.fps,
        sequences: vec![],
        root: root.to_path_buf(),
    };
    let mut truth = GroundTruth {
        spec: spec.clone(),
        sequences: vec![],
    };
    for subject in spec.subject_params() {
        fs::create_dir_all(root.join(format!("s{:03}", subject.subject)))?;
        for (scenario, index) in spec.sequence_plan() {
            let (seq, t) = render_sequence(spec, &subject, scenario, index);
            let rel = sequence_path(subject.subject, scenario, index, spec.format);
            match spec.format {
                SequenceFormat::Gfsq => write_gfsq(&root.join(&rel), &seq)?,
                SequenceFormat::Frames => write_frame_dir(&root.join(&rel), &seq)?,
            }
            layout.sequences.push(SequenceRef {
                subject: subject.subject,
                scenario,
                index,
                path: rel,
                format: spec.format,
                gender: Some(subject.gender),
            });
            truth.sequences.push(t);
        }
    }
    layout.save(&root.join(LAYOUT_FILE))?;
    fs::write(root.join(TRUTH_FILE), serde_json::to_string_pretty(&truth)?)?;
    Ok(layout)
}
