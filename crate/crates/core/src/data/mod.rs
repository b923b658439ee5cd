//! Annotation ingestion, class splits, task configuration and synthetic
//! fixtures.

mod coco;
mod mask;
mod split;
mod synth;

pub use coco::{
    decode_segmentation, load_annotations, AnnotationRecord, CategoryRecord, DatasetIndex, ImageRecord, Segmentation,
};
pub use mask::{rasterize_polygons, rle_decode, rle_encode, BinaryMask, Rle};
pub use split::{build_class_split, make_task_config, ClassSplit, SplitCounts, TaskConfig, TaskMode};
pub use synth::{class_name, synth_fixture, to_sample, SynthFixture, SynthSpec, ANNOTATION_FILE, IMAGE_DIR};
