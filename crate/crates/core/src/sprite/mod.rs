//! Procedural sprite faces with exact accessory compositing, region masks
//! and shape maps.

mod dataset;
mod estimate;
mod planting;
mod render;
mod spec;

pub use dataset::{
    generate_dataset, generate_planted, ingest_external, parse_mix, region_for, DatasetManifest, ExternalEntry,
    ExternalManifest, IngestStats, ManifestEntry, SpriteDataset, SpriteSample, DATASET_MANIFEST,
};
pub use estimate::estimate_face_spec;
pub use planting::LatentPlanting;
pub use render::{
    apply_discrete_attribute, attribute_footprint, attribute_image, face_region, render_base_face, render_sprite,
    skin_color, ShapeMaps, ACCESSORY_BACKDROP, BACKGROUND,
};
pub use spec::{Attribute, FaceProperty, FaceSpec, Label};
