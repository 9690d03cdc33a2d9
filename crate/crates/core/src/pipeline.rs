//! Sequence preprocessing: frames to aligned flow windows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cuboid::{build_windows, CuboidError, FlowWindow, LabeledWindow, Provenance, OVERLAP, STEPS};
use crate::optflow::{flow_sequence, FlowError, FlowParams};
use crate::videoio::{
    localize_subject_with, resize_sequence, BackgroundParams, DatasetLayout, FrameSequence, SequenceRef, VideoError,
    WORK_HEIGHT, WORK_WIDTH,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{source_id}: {err}")]
    Video { source_id: String, err: VideoError },
    #[error("{source_id}: {err}")]
    Flow { source_id: String, err: FlowError },
    #[error("{source_id}: {err}")]
    Cuboid { source_id: String, err: CuboidError },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    pub flow: FlowParams,
    pub background: BackgroundParams,
    pub steps: usize,
    pub overlap: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            flow: FlowParams::default(),
            background: BackgroundParams::default(),
            steps: STEPS,
            overlap: OVERLAP,
        }
    }
}

/// Resizes to the working resolution, computes flow, localizes the subject and
/// cuts aligned windows.
pub fn sequence_windows(seq: &FrameSequence, params: &PreprocessParams) -> Result<Vec<FlowWindow>, PipelineError> {
    let id = || seq.source_id.clone();
    let seq = resize_sequence(seq, WORK_WIDTH, WORK_HEIGHT).map_err(|err| PipelineError::Video {
        source_id: id(),
        err,
    })?;
    let flows = flow_sequence(&seq, &params.flow).map_err(|err| PipelineError::Flow { source_id: id(), err })?;
    let track = localize_subject_with(&seq, &params.background).map_err(|err| PipelineError::Video {
        source_id: id(),
        err,
    })?;
    build_windows(&flows, &track, params.steps, params.overlap)
        .map_err(|err| PipelineError::Cuboid { source_id: id(), err })
}

/// Windows of every listed sequence, labeled by `label`. Sequences are
/// processed in parallel; output order follows `entries`.
pub fn layout_windows(
    layout: &DatasetLayout,
    entries: &[&SequenceRef],
    params: &PreprocessParams,
    label: impl Fn(&SequenceRef) -> Option<u32> + Sync,
) -> Result<Vec<LabeledWindow>, PipelineError> {
    let per_seq: Vec<Vec<LabeledWindow>> = entries
        .par_iter()
        .map(|e| {
            let seq = layout.load_entry(e).map_err(|err| PipelineError::Video {
                source_id: e.source_id(),
                err,
            })?;
            Ok(sequence_windows(&seq, params)?
                .into_iter()
                .map(|w| LabeledWindow {
                    provenance: Provenance {
                        subject: e.subject,
                        scenario: e.scenario,
                        sequence: e.index,
                        window_start: w.start,
                        augmentation: 0,
                    },
                    window: w,
                    label: label(e),
                })
                .collect())
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(per_seq.into_iter().flatten().collect())
}
