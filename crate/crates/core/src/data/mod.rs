//! Synthetic datasets, frame-directory loading and image files.

mod frames;
mod synthetic;

pub use frames::{load_frames_dir, read_image, write_image, NamedClip};
pub use synthetic::{
    gen_synthetic_motion_dataset, gen_synthetic_shapes_dataset, motion_dataset_params,
    render_motion_clip, render_motion_raw, ClipDataset, ImageDataset, ImageSpec, MotionParams,
    MotionSpec, MOTION_CLASSES, SHAPE_CLASSES,
};
