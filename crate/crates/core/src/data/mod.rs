//! Synthetic surgical-video analogs, their file format and segmentation
//! metrics.

pub mod io;
pub mod mask;
pub mod metrics;
pub mod scene;

pub use io::{load_dataset, load_video_dir, write_video_dir};
pub use mask::Mask;
pub use metrics::{frame_scores, mdice, miou, FrameScores, MetricAccumulator, Metrics};
pub use scene::{generate_dataset, generate_video, FrameEvents, LabelMode, SceneConfig, VideoSample, NUM_CLASSES};
