//! Images, datasets, padding, augmentation, tiling and synthetic data.

mod geometry;
mod io;
mod synth;
mod tiles;

pub use geometry::{
    apply_variant, augment, pad_image, pad_offsets, pad_to, transform_image, transform_label, unpad, variants, Flip,
    Variant, NUM_VARIANTS, ROTATION_STEP_DEG,
};
pub use io::{
    dataset_entries, load_color, load_dataset, load_gray, load_label, save_color, save_gray, to_u8, write_dataset,
    ColorImage, SamplePair, MANIFEST,
};
pub use synth::{synth_dataset, synth_range, synth_sample, StrokeParams};
pub use tiles::{make_tile_plan, predict_tiled, TilePlan, TilePredictor};
