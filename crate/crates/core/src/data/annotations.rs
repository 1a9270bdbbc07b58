use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::evaluation::HoiClassTable;

pub const ANNOTATION_VERSION: u32 = 1;

/// One annotated human-object pair.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiAnnotation {
    /// Normalized to the image size.
    pub human: BoundingBox,
    pub object: BoundingBox,
    /// Pixel corners `[x1, y1, x2, y2]` as stored in the file.
    pub human_px: [f64; 4],
    pub object_px: [f64; 4],
    pub object_class: usize,
    pub actions: Vec<usize>,
}

impl HoiAnnotation {
    pub fn from_pixels(
        human_px: [f64; 4],
        object_px: [f64; 4],
        width: usize,
        height: usize,
        object_class: usize,
        actions: Vec<usize>,
    ) -> Self {
        let norm = |b: [f64; 4]| {
            let (w, h) = (width as f64, height as f64);
            BoundingBox::from_corners([b[0] / w, b[1] / h, b[2] / w, b[3] / h])
        };
        Self {
            human: norm(human_px),
            object: norm(object_px),
            human_px,
            object_px,
            object_class,
            actions,
        }
    }

    /// Annotation given directly in normalized coordinates (a 1×1 image).
    pub fn normalized(
        human: BoundingBox,
        object: BoundingBox,
        object_class: usize,
        actions: Vec<usize>,
    ) -> Self {
        Self {
            human,
            object,
            human_px: human.corners(),
            object_px: object.corners(),
            object_class,
            actions,
        }
    }
}

/// Annotations of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    pub image_id: String,
    /// Image file relative to the image directory.
    pub file: Option<String>,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<HoiAnnotation>,
}

/// Class vocabulary declared in the file header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassHeader {
    pub object_classes: usize,
    pub action_classes: usize,
    /// Declared `[object, action]` HOI classes; every combination when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hoi_classes: Option<Vec<[usize; 2]>>,
    /// Training-set instance count per HOI class; counted from the file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_counts: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageDoc {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    width: usize,
    height: usize,
    hois: Vec<HoiDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HoiDoc {
    human_box: [f64; 4],
    object_box: [f64; 4],
    object_class: usize,
    actions: Vec<usize>,
}

#[derive(Serialize)]
struct FileDoc<'a> {
    version: u32,
    classes: &'a ClassHeader,
    images: Vec<ImageDoc>,
}

/// A parsed annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub classes: ClassHeader,
    pub images: Vec<GroundTruthSet>,
}

impl AnnotationSet {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(s)?;
        let version =
            doc.get("version")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Annotation {
                    image: "-".into(),
                    field: "version".into(),
                    message: "missing schema version".into(),
                })?;
        if version != ANNOTATION_VERSION as u64 {
            return Err(Error::SchemaVersion {
                found: version.min(u32::MAX as u64) as u32,
                expected: ANNOTATION_VERSION,
            });
        }
        let header_err = |field: &str, message: String| Error::Annotation {
            image: "-".into(),
            field: field.into(),
            message,
        };
        let classes: ClassHeader =
            serde_json::from_value(doc.get("classes").cloned().unwrap_or_default())
                .map_err(|e| header_err("classes", e.to_string()))?;
        let images = doc
            .get("images")
            .and_then(|v| v.as_array())
            .ok_or_else(|| header_err("images", "missing image list".into()))?;
        let table = class_table(&classes)?;
        let images = images
            .iter()
            .enumerate()
            .map(|(i, v)| parse_image(i, v, &classes, &table))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classes, images })
    }

    pub fn to_json_string(&self) -> String {
        let images = self
            .images
            .iter()
            .map(|img| ImageDoc {
                id: img.image_id.clone(),
                file: img.file.clone(),
                width: img.width,
                height: img.height,
                hois: img
                    .instances
                    .iter()
                    .map(|a| HoiDoc {
                        human_box: a.human_px,
                        object_box: a.object_px,
                        object_class: a.object_class,
                        actions: a.actions.clone(),
                    })
                    .collect(),
            })
            .collect();
        let doc = FileDoc {
            version: ANNOTATION_VERSION,
            classes: &self.classes,
            images,
        };
        serde_json::to_string_pretty(&doc).expect("annotations serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    /// The HOI class table, with training counts taken from the header or,
    /// failing that, from these annotations.
    pub fn class_table(&self) -> Result<HoiClassTable> {
        let table = class_table(&self.classes)?;
        if self.classes.train_counts.is_some() {
            Ok(table)
        } else {
            table.with_counts_from(&self.images)
        }
    }
}

fn class_table(h: &ClassHeader) -> Result<HoiClassTable> {
    let pairs: Vec<(usize, usize)> = match &h.hoi_classes {
        Some(p) => p.iter().map(|&[o, a]| (o, a)).collect(),
        None => (0..h.object_classes)
            .flat_map(|o| (0..h.action_classes).map(move |a| (o, a)))
            .collect(),
    };
    let counts = h
        .train_counts
        .clone()
        .unwrap_or_else(|| vec![0; pairs.len()]);
    HoiClassTable::new(h.object_classes, h.action_classes, pairs, counts)
}

fn parse_image(
    index: usize,
    v: &serde_json::Value,
    classes: &ClassHeader,
    table: &HoiClassTable,
) -> Result<GroundTruthSet> {
    let name = v
        .get("id")
        .and_then(|x| x.as_str())
        .map(str::to_owned)
        .unwrap_or_else(|| format!("#{index}"));
    let err = |field: String, message: String| Error::Annotation {
        image: name.clone(),
        field,
        message,
    };
    let doc: ImageDoc =
        serde_json::from_value(v.clone()).map_err(|e| err("entry".into(), e.to_string()))?;
    if doc.width == 0 || doc.height == 0 {
        return Err(err(
            "width/height".into(),
            "image extents must be positive".into(),
        ));
    }
    let mut instances = Vec::with_capacity(doc.hois.len());
    for (k, hoi) in doc.hois.into_iter().enumerate() {
        let check_box = |field: &str, b: [f64; 4]| -> Result<[f64; 4]> {
            let field = format!("hois[{k}].{field}");
            if b.iter().any(|x| !x.is_finite()) {
                return Err(err(field, "non-finite coordinate".into()));
            }
            if !(b[0] < b[2] && b[1] < b[3]) {
                return Err(err(field, format!("need x1 < x2 and y1 < y2, got {b:?}")));
            }
            let (w, h) = (doc.width as f64, doc.height as f64);
            let c = [
                b[0].clamp(0.0, w),
                b[1].clamp(0.0, h),
                b[2].clamp(0.0, w),
                b[3].clamp(0.0, h),
            ];
            if !(c[0] < c[2] && c[1] < c[3]) {
                return Err(err(
                    field,
                    format!("box {b:?} lies outside the {w}x{h} image"),
                ));
            }
            Ok(c)
        };
        let human = check_box("human_box", hoi.human_box)?;
        let object = check_box("object_box", hoi.object_box)?;
        if hoi.object_class >= classes.object_classes {
            return Err(err(
                format!("hois[{k}].object_class"),
                format!(
                    "{} is not below {}",
                    hoi.object_class, classes.object_classes
                ),
            ));
        }
        if hoi.actions.is_empty() {
            return Err(err(
                format!("hois[{k}].actions"),
                "at least one action is required".into(),
            ));
        }
        for &a in &hoi.actions {
            if a >= classes.action_classes {
                return Err(err(
                    format!("hois[{k}].actions"),
                    format!("{a} is not below {}", classes.action_classes),
                ));
            }
            if table.class_of(hoi.object_class, a).is_none() {
                return Err(err(
                    format!("hois[{k}].actions"),
                    format!(
                        "(object {}, action {a}) is not a declared HOI class",
                        hoi.object_class
                    ),
                ));
            }
        }
        instances.push(HoiAnnotation::from_pixels(
            human,
            object,
            doc.width,
            doc.height,
            hoi.object_class,
            hoi.actions,
        ));
    }
    Ok(GroundTruthSet {
        image_id: doc.id,
        file: doc.file,
        width: doc.width,
        height: doc.height,
        instances,
    })
}

/// Reads an annotation file and its class table.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<(AnnotationSet, HoiClassTable)> {
    let set = AnnotationSet::load(path)?;
    let table = set.class_table()?;
    Ok((set, table))
}
