//! Synthetic scenes and file formats.

pub mod io;
pub mod synth;

pub use io::{
    output_path, parse_widerface, read_dataset, read_detections, read_pnm, read_widerface_annotations, write_dataset,
    write_detections, write_pnm, WiderAnnotations, WiderImage,
};
pub use synth::{generate_dataset, render_sample, Sample, SceneSpec};
