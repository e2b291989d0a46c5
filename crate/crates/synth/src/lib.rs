//! Synthetic grounding scenes: coloured shapes on a dark canvas, each paired
//! with a templated expression that picks out exactly one object.

mod error;
pub mod generate;
pub mod io;
pub mod priors;
pub mod render;
pub mod scene;

pub use error::{Result, SynthError};
pub use generate::{
    generate, generate_scene, scene_seed, split_counts, GeneratedScene, SceneConfig, Split,
    TemplateMix,
};
pub use io::{
    decode_png, encode_png, read_dataset, read_manifest, write_dataset, Dataset, Manifest,
    SceneRecord,
};
pub use priors::fit_priors;
pub use render::{render, render_rgb8};
pub use scene::{
    Attribute, Color, Expression, PixelBox, Relation, Scene, SceneObject, ShapeKind, Side,
    SizeClass, TemplateClass, VOCABULARY,
};
