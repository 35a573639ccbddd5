//! Frames, tasks and the synthetic scenes they are drawn from.

mod frame;
mod prop1;
mod scene;
mod similarity;

pub use frame::{batch, LabeledFrame, Polarity, TaskSet};
pub use prop1::{pool_task, prop1_family, synthetic_pool, ImagePool, FAMILY_K};
pub use scene::{
    attach_mask_channel, build_task, generate_scene, sample_frame, BlobSpec, MaskProvider, SceneGenerator, SceneSpec,
    TrackSpec,
};
pub use similarity::{cross_similarity, task_similarity, SimilarityMatrix};
