use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::iou_corners;
use crate::numerics::Array;

use super::annotations::{AnnotationSet, ClassHeader, GroundTruthSet, HoiAnnotation};
use super::images::rgb_to_array;

/// Parameters of the rectangle-scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_images: usize,
    pub image_size: usize,
    pub object_classes: usize,
    pub action_classes: usize,
    pub instances_per_image: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_images: 20,
            image_size: 64,
            object_classes: 2,
            action_classes: 3,
            instances_per_image: 1,
        }
    }
}

/// Rendered images (RGB bytes, row-major) with their annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<Vec<u8>>,
    pub annotations: AnnotationSet,
}

impl SyntheticDataset {
    /// Image `i` as a `3 × S × S` array in `[0, 1]`.
    pub fn image_array(&self, i: usize) -> Array {
        let g = &self.annotations.images[i];
        rgb_to_array(&self.images[i], g.width, g.height)
    }
}

/// Center distance (normalized) beyond which disjoint pairs stop counting as near.
const FAR_DISTANCE: f64 = 0.4;

/// Action implied by the placement of a human and an object box (pixel corners):
/// overlapping pairs take action 0; disjoint pairs are split into
/// `action_classes - 1` equal distance bands over `[0, 2 * FAR_DISTANCE)`, the
/// last band open-ended. With three actions that is overlap / near / far.
pub fn geometric_action(
    human: [f64; 4],
    object: [f64; 4],
    size: usize,
    action_classes: usize,
) -> usize {
    if action_classes <= 1 || iou_corners(human, object) > 0.0 {
        return 0;
    }
    let center = |b: [f64; 4]| [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
    let (a, b) = (center(human), center(object));
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() / size as f64;
    let bands = action_classes - 1;
    let band = (d / (2.0 * FAR_DISTANCE) * bands as f64).floor() as usize;
    1 + band.min(bands - 1)
}

/// Display color of object class `k`.
pub fn object_color(k: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 6] = [
        [40, 200, 60],
        [50, 90, 230],
        [230, 220, 40],
        [40, 210, 220],
        [200, 60, 220],
        [240, 140, 30],
    ];
    if k < PALETTE.len() {
        return PALETTE[k];
    }
    let v = (k * 37 % 160) as u8;
    [60 + v / 2, 120 + v / 3, 255 - v]
}

fn random_box(rng: &mut ChaCha8Rng, size: usize, lo: f64, hi: f64) -> [f64; 4] {
    let s = size as f64;
    let w = rng.gen_range((lo * s) as usize..=(hi * s) as usize).max(2);
    let h = rng.gen_range((lo * s) as usize..=(hi * s) as usize).max(2);
    let x = rng.gen_range(0..=size - w);
    let y = rng.gen_range(0..=size - h);
    [x as f64, y as f64, (x + w) as f64, (y + h) as f64]
}

fn fill(buf: &mut [u8], size: usize, b: [f64; 4], color: [u8; 3]) {
    for y in b[1] as usize..b[3] as usize {
        for x in b[0] as usize..b[2] as usize {
            let i = (y * size + x) * 3;
            buf[i..i + 3].copy_from_slice(&color);
        }
    }
}

/// Deterministic scenes of colored rectangles. Humans are drawn in shades of
/// red, objects in their class color on top; the action label of each pair is
/// [`geometric_action`] of its placement. Object classes and target actions
/// cycle so every combination appears.
pub fn generate_synthetic(spec: &SyntheticSpec) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size.max(8);
    let n_obj = spec.object_classes.max(1);
    let n_act = spec.action_classes.max(1);
    let mut images = Vec::with_capacity(spec.num_images);
    let mut gts = Vec::with_capacity(spec.num_images);
    let mut counter = 0usize;
    for i in 0..spec.num_images {
        let mut buf = vec![24u8; size * size * 3];
        let mut instances = Vec::new();
        for _ in 0..spec.instances_per_image {
            let object_class = counter % n_obj;
            let target = (counter / n_obj) % n_act;
            counter += 1;
            let (mut human, mut object) = (
                random_box(&mut rng, size, 0.18, 0.35),
                random_box(&mut rng, size, 0.15, 0.3),
            );
            for _ in 0..1000 {
                if geometric_action(human, object, size, n_act) == target {
                    break;
                }
                human = random_box(&mut rng, size, 0.18, 0.35);
                object = random_box(&mut rng, size, 0.15, 0.3);
            }
            let action = geometric_action(human, object, size, n_act);
            let red = [
                rng.gen_range(200..=255),
                rng.gen_range(20..=60),
                rng.gen_range(20..=60),
            ];
            fill(&mut buf, size, human, red);
            fill(&mut buf, size, object, object_color(object_class));
            instances.push(HoiAnnotation::from_pixels(
                human,
                object,
                size,
                size,
                object_class,
                vec![action],
            ));
        }
        let id = format!("synth_{i:04}");
        gts.push(GroundTruthSet {
            file: Some(format!("{id}.png")),
            image_id: id,
            width: size,
            height: size,
            instances,
        });
        images.push(buf);
    }
    SyntheticDataset {
        images,
        annotations: AnnotationSet {
            classes: ClassHeader {
                object_classes: n_obj,
                action_classes: n_act,
                hoi_classes: None,
                train_counts: None,
            },
            images: gts,
        },
    }
}
