//! Raw episodes to step-aligned, labeled observation windows.

mod dataset;
mod episode;
mod schema;
mod steps;
mod window;

pub use dataset::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, Dataset, Header, WindowMeta, BIN_NAME, JSONL_NAME,
};
pub use episode::{parse_episode, Baseline, ChannelData, Intervention, Observation, Outcome, RawEpisode};
pub use schema::{ChannelKind, ChannelSpec, Schema, Timeline, VarSpec};
pub use steps::{
    aggregate_chart, build_guidance, build_lab_vectors, forward_fill, label_decompensation, label_los, los_class,
    segment_channel, GuidanceMatrix, Segment,
};
pub use window::{
    check_episode, encode_baseline, split_by_patient, window_episode, Exclusion, IngestReport, LabeledWindow, StepInput,
};
