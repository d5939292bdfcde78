//! Datasets: on-disk format, minibatch sampling, synthetic scene generation.

mod format;
mod sampler;
mod scenes;

pub use format::{
    decode_png, encode_gray_png, encode_rgb_png, import_dataset, load_dataset, write_dataset,
    Dataset, Domain, IdMapping, ManifestEntry, MANIFEST_FILE,
};
pub use sampler::{sample_minibatch, BatchPair, EpochSampler, Minibatch, Provenance, SamplerState};
pub use scenes::{
    generate_scenes, render_scene, DomainShift, RenderedScene, SceneGenConfig, CLASS_NAMES,
};
