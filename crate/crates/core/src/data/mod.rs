//! File formats, image IO and the synthetic scene generator.
//!
//! All documents are versioned JSON. Annotation boxes are pixel corners
//! `[x1, y1, x2, y2]`; prediction boxes are normalized center-size.

mod annotations;
mod checkpoint;
mod images;
mod predictions;
mod synthetic;

pub use annotations::{
    parse_annotations, AnnotationSet, ClassHeader, GroundTruthSet, HoiAnnotation,
    ANNOTATION_VERSION,
};
pub use checkpoint::{Checkpoint, ParamEntry, CHECKPOINT_VERSION};
pub use images::{load_image, rgb_to_array, save_png};
pub use predictions::{AnchorFile, ImagePredictions, PredictionFile, PREDICTION_VERSION};
pub use synthetic::{
    generate_synthetic, geometric_action, object_color, SyntheticDataset, SyntheticSpec,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::training::TrainSample;

/// Writes the images as PNG and the annotations as `annotations.json` into `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, ds: &SyntheticDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (img, gt) in ds.images.iter().zip(&ds.annotations.images) {
        let file = gt.file.as_deref().expect("synthetic images are named");
        save_png(dir.join(file), img, gt.width, gt.height)?;
    }
    ds.annotations.save(dir.join("annotations.json"))
}

/// Pairs in-memory synthetic images with their annotations.
pub fn synthetic_samples(ds: &SyntheticDataset) -> Vec<TrainSample> {
    ds.annotations
        .images
        .iter()
        .enumerate()
        .map(|(i, gt)| TrainSample {
            image: ds.image_array(i),
            gt: gt.clone(),
        })
        .collect()
}

/// Loads every annotated image from `image_dir`.
pub fn load_samples(set: &AnnotationSet, image_dir: impl AsRef<Path>) -> Result<Vec<TrainSample>> {
    set.images
        .iter()
        .map(|gt| {
            let file = gt.file.as_deref().ok_or_else(|| Error::Annotation {
                image: gt.image_id.clone(),
                field: "file".into(),
                message: "no image file named".into(),
            })?;
            let image = load_image(image_dir.as_ref().join(file))?;
            if image.shape()[1] != gt.height || image.shape()[2] != gt.width {
                return Err(Error::Annotation {
                    image: gt.image_id.clone(),
                    field: "width/height".into(),
                    message: format!(
                        "annotated {}x{}, file is {}x{}",
                        gt.width,
                        gt.height,
                        image.shape()[2],
                        image.shape()[1]
                    ),
                });
            }
            Ok(TrainSample {
                image,
                gt: gt.clone(),
            })
        })
        .collect()
}
