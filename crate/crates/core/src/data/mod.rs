//! Synthetic clip generation, the exact patchify codec standing in for a
//! learned VAE, and dataset IO.

pub mod codec;
pub mod dataset;
pub mod scene;

pub use codec::{
    encode_frame, patchify_decode, patchify_encode, FrameRole, LatentClip, VideoClip, C_IMG,
};
pub use dataset::{dataset_read, dataset_write, ClipRecord, Dataset, DatasetManifest};
pub use scene::{generate_scene, render_clip, GeneratorConfig, Polygon, SceneSpec};
