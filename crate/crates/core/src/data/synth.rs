//! Seeded synthetic scenes: coloured shapes on a textured blue-green
//! background, annotated in the same format as the real data.

use std::path::Path;

use image::RgbImage;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::{AnnotationRecord, CategoryRecord, DatasetIndex, ImageRecord, Segmentation};
use super::mask::{rle_encode, BinaryMask};
use crate::encoders::{ImageSample, MIN_IMAGE_SIDE};
use crate::error::{Error, Result};

const PALETTE: [(&str, [u8; 3]); 12] = [
    ("red", [220, 40, 40]),
    ("orange", [245, 140, 30]),
    ("yellow", [240, 230, 60]),
    ("magenta", [210, 50, 200]),
    ("white", [245, 245, 245]),
    ("black", [15, 15, 15]),
    ("pink", [250, 160, 190]),
    ("brown", [120, 70, 30]),
    ("violet", [130, 60, 220]),
    ("lime", [170, 250, 60]),
    ("grey", [130, 130, 130]),
    ("gold", [200, 160, 20]),
];

const SHAPES: [&str; 3] = ["square", "disc", "triangle"];
const MAX_ATTEMPTS: usize = 200;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub n_classes: usize,
    pub shapes_per_image: usize,
    pub image_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n_images: 20, n_classes: 6, shapes_per_image: 2, image_size: 64 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("fixture needs at least one image".into()));
        }
        if self.n_classes == 0 || self.n_classes > PALETTE.len() {
            return Err(Error::Config(format!("fixture supports 1..={} classes", PALETTE.len())));
        }
        if self.shapes_per_image == 0 || self.shapes_per_image > self.n_classes {
            return Err(Error::Config("shapes per image must be in 1..=classes (classes are distinct per image)".into()));
        }
        if self.image_size < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!("image size must be at least {MIN_IMAGE_SIDE}")));
        }
        Ok(())
    }
}

/// Class `c` is shape `c % 3` painted in palette colour `c`.
pub fn class_name(c: usize) -> String {
    format!("{} {}", PALETTE[c].0, SHAPES[c % SHAPES.len()])
}

pub struct SynthFixture {
    pub index: DatasetIndex,
    pub images: Vec<RgbImage>,
}

impl SynthFixture {
    /// Writes `images/NNNN.png` and `annotations.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join(IMAGE_DIR);
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (rec, img) in self.index.images.iter().zip(&self.images) {
            let path = dir.join(&rec.file_name);
            img.save_with_format(&path, image::ImageFormat::Png).map_err(|source| Error::Image { path, source })?;
        }
        self.index.save(&dir.join(ANNOTATION_FILE))
    }

    pub fn sample(&self, i: usize) -> ImageSample {
        to_sample(&self.images[i], self.index.images[i].id.to_string())
    }
}

pub fn to_sample(img: &RgbImage, id: String) -> ImageSample {
    let pixels = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageSample::new(id, img.height() as usize, img.width() as usize, pixels).expect("u8 pixels are in range")
}

fn background<R: Rng>(size: usize, rng: &mut R) -> RgbImage {
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let (xf, yf) = (f64::from(x), f64::from(y));
        let wave = (0.31 * xf + 0.17 * yf + phase).sin();
        let noise: f64 = rng.random_range(-0.04..0.04);
        let r = 0.05 + 0.03 * wave + noise;
        let g = 0.38 + 0.08 * wave + noise;
        let b = 0.48 + 0.06 * (0.23 * yf + phase).cos() + noise;
        image::Rgb([to_u8(r), to_u8(g), to_u8(b)])
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn disc_mask(size: usize, x0: usize, y0: usize, s: usize) -> BinaryMask {
    let r = s as f64 / 2.0;
    let (cx, cy) = (x0 as f64 + r, y0 as f64 + r);
    BinaryMask::from_fn(size, size, |y, x| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    })
}

fn segmentation(shape: usize, size: usize, x0: usize, y0: usize, s: usize) -> Segmentation {
    let (x0, y0, sf) = (x0 as f64, y0 as f64, s as f64);
    match shape {
        0 => Segmentation::Polygons(vec![vec![x0, y0, x0 + sf, y0, x0 + sf, y0 + sf, x0, y0 + sf]]),
        1 => Segmentation::Rle(rle_encode(&disc_mask(size, x0 as usize, y0 as usize, s))),
        _ => Segmentation::Polygons(vec![vec![x0 + sf / 2.0, y0, x0 + sf, y0 + sf, x0, y0 + sf]]),
    }
}

pub fn synth_fixture(seed: u64, spec: &SynthSpec) -> Result<SynthFixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let categories: Vec<CategoryRecord> = (0..spec.n_classes)
        .map(|c| CategoryRecord { id: c as u64 + 1, name: class_name(c), supercategory: SHAPES[c % 3].to_string() })
        .collect();
    let mut images = Vec::new();
    let mut records = Vec::new();
    let mut annotations = Vec::new();
    let (s_min, s_max) = ((size / 4).max(4), (size * 2 / 5).max(5));

    for i in 0..spec.n_images {
        let image_id = i as u64 + 1;
        let mut canvas = background(size, &mut rng);
        let classes = sample(&mut rng, spec.n_classes, spec.shapes_per_image).into_vec();
        let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
        for (j, &c) in classes.iter().enumerate() {
            let mut placed = None;
            for _ in 0..MAX_ATTEMPTS {
                let s = rng.random_range(s_min..=s_max.min(size - 2));
                let x0 = rng.random_range(1..=size - s - 1);
                let y0 = rng.random_range(1..=size - s - 1);
                let clear = boxes.iter().all(|&(bx, by, bs)| {
                    x0 + s + 1 <= bx || bx + bs + 1 <= x0 || y0 + s + 1 <= by || by + bs + 1 <= y0
                });
                if clear {
                    placed = Some((x0, y0, s));
                    break;
                }
            }
            let Some((x0, y0, s)) = placed else {
                return Err(Error::Placement { image: i, shape: j, attempts: MAX_ATTEMPTS });
            };
            boxes.push((x0, y0, s));
            let seg = segmentation(c % 3, size, x0, y0, s);
            let mask = super::coco::decode_segmentation(&seg, size, size).map_err(Error::Config)?;
            let colour = PALETTE[c].1;
            for y in 0..size {
                for x in 0..size {
                    if mask.get(y, x) {
                        let shade: f64 = rng.random_range(-0.03..0.03);
                        let px = colour.map(|v| to_u8(f64::from(v) / 255.0 + shade));
                        canvas.put_pixel(x as u32, y as u32, image::Rgb(px));
                    }
                }
            }
            annotations.push(AnnotationRecord {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: c as u64 + 1,
                segmentation: seg,
                bbox: mask.bbox(),
                area: mask.area() as f64,
                iscrowd: 0,
            });
        }
        records.push(ImageRecord { id: image_id, file_name: format!("{IMAGE_DIR}/{image_id:04}.png"), height: size, width: size });
        images.push(canvas);
    }
    let index = DatasetIndex::new(records, annotations, categories)?;
    Ok(SynthFixture { index, images })
}
