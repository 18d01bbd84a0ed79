//! Synthetic detection scenes, ground-truth padding and COCO-style storage.
//!
//! A scene is a dark noisy background with soft elliptical blobs whose
//! intensity falls off as `A · 2^{-((dx/rx)² + (dy/ry)²)}`, so the
//! half-maximum contour is exactly the ellipse with semi-axes `(rx, ry)` and
//! the ground-truth box is its tight bounding box.

use std::collections::HashSet;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlowDetError, Result};
use crate::geometry::{encode_flow_space, iou_unchecked, FlowVector, NormalizedBox, MIN_BOX_SCALE};
use crate::io::{atomic_write, atomic_write_json};
use crate::scalar::Scalar;

const QUANT: f64 = 65535.0;
const BACKGROUND_LEVEL: f64 = 0.1;

/// Single-channel image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(FlowDetError::Shape(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| U::lit(p.to_f64_lossy())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub n_objects_range: (usize, usize),
    pub object_scale_range: (f64, f64),
    /// Peak blob intensity above the background.
    pub amplitude_range: (f64, f64),
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            n_objects_range: (1, 4),
            object_scale_range: (0.06, 0.3),
            amplitude_range: (0.2, 0.6),
            noise_level: 0.15,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_objects_range;
        if lo < 1 || lo > hi {
            return Err(FlowDetError::Config(format!(
                "object count range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        let (smin, smax) = self.object_scale_range;
        if !(smin > MIN_BOX_SCALE && smin <= smax && smax < 1.0) {
            return Err(FlowDetError::Config(format!(
                "object scale range ({smin}, {smax}) must lie within ({MIN_BOX_SCALE}, 1)"
            )));
        }
        let (amin, amax) = self.amplitude_range;
        if !(amin > 0.0 && amin <= amax && amax <= 1.0) {
            return Err(FlowDetError::Config(format!(
                "amplitude range ({amin}, {amax}) must lie within (0, 1]"
            )));
        }
        if self.image_size == 0 || !(self.noise_level >= 0.0) {
            return Err(FlowDetError::Config(
                "image size must be positive and noise non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage<T> {
    pub image: Image<T>,
    pub gt_boxes: Vec<NormalizedBox<T>>,
    pub image_id: String,
}

/// One rendered object in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes of the half-maximum ellipse.
    pub rx: f64,
    pub ry: f64,
    pub amplitude: f64,
}

impl Blob {
    pub fn bounding_box(&self) -> NormalizedBox<f64> {
        NormalizedBox::new(self.cx, self.cy, 2.0 * self.rx, 2.0 * self.ry)
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * QUANT).round() / QUANT
}

/// Renders blobs over a flat background with additive Gaussian noise.
pub fn render_blobs<T: Scalar, R: Rng>(size: usize, blobs: &[Blob], noise_level: f64, rng: &mut R) -> Image<T> {
    let mut pixels = Vec::with_capacity(size * size);
    let s = size as f64;
    for y in 0..size {
        let py = (y as f64 + 0.5) / s;
        for x in 0..size {
            let px = (x as f64 + 0.5) / s;
            let signal = blobs
                .iter()
                .map(|b| {
                    let q = ((px - b.cx) / b.rx).powi(2) + ((py - b.cy) / b.ry).powi(2);
                    b.amplitude * (-q * std::f64::consts::LN_2).exp()
                })
                .fold(0.0, f64::max);
            let noise = if noise_level > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                noise_level * n
            } else {
                0.0
            };
            pixels.push(T::lit(quantize(BACKGROUND_LEVEL + signal + noise)));
        }
    }
    Image::new(size, size, pixels).expect("square image")
}

/// Draws object layout and photometry, then renders the scene.
pub fn generate_scene<T: Scalar, R: Rng>(cfg: &SceneConfig, image_id: &str, rng: &mut R) -> AnnotatedImage<T> {
    let (lo, hi) = cfg.n_objects_range;
    let count = rng.gen_range(lo..=hi);
    let (smin, smax) = cfg.object_scale_range;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let mut attempts = 0;
    while blobs.len() < count && attempts < 200 {
        attempts += 1;
        let w = rng.gen_range(smin..=smax);
        let h = (w * rng.gen_range(0.6..=1.6)).clamp(smin, smax);
        let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
        let cand = Blob {
            cx,
            cy,
            rx: w / 2.0,
            ry: h / 2.0,
            amplitude: rng.gen_range(cfg.amplitude_range.0..=cfg.amplitude_range.1),
        };
        let c = cand.bounding_box().to_corners();
        // keep objects nearly disjoint so half-maximum boxes stay tight
        if blobs
            .iter()
            .all(|b| iou_unchecked(&b.bounding_box().to_corners(), &c) < 0.05)
        {
            blobs.push(cand);
        }
    }
    let image = render_blobs(cfg.image_size, &blobs, cfg.noise_level, rng);
    let gt_boxes = blobs.iter().map(|b| b.bounding_box().cast()).collect();
    AnnotatedImage {
        image,
        gt_boxes,
        image_id: image_id.to_string(),
    }
}

/// Independent generator for scene `index` of a dataset drawn with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn scene_id(index: usize) -> String {
    format!("scene-{index:06}")
}

/// Ground truth aligned to a fixed proposal count.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBoxes<T> {
    pub boxes: Vec<FlowVector<T>>,
    pub foreground: Vec<bool>,
    /// Which real box each entry copies, `None` for dummy padding.
    pub source: Vec<Option<usize>>,
}

/// Repeats real boxes cyclically up to `n_prop`; an empty input yields
/// full-image dummy boxes marked as background.
pub fn pad_gt_boxes<T: Scalar>(boxes: &[NormalizedBox<T>], n_prop: usize) -> PaddedBoxes<T> {
    if boxes.is_empty() {
        let dummy = encode_flow_space(&NormalizedBox::new(T::lit(0.5), T::lit(0.5), T::one(), T::one()));
        return PaddedBoxes {
            boxes: vec![dummy; n_prop],
            foreground: vec![false; n_prop],
            source: vec![None; n_prop],
        };
    }
    let encoded: Vec<_> = boxes.iter().map(encode_flow_space).collect();
    let source: Vec<Option<usize>> = (0..n_prop).map(|i| Some(i % boxes.len())).collect();
    PaddedBoxes {
        boxes: source.iter().map(|s| encoded[s.expect("real")]).collect(),
        foreground: vec![true; n_prop],
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset<T> {
    pub images: Vec<AnnotatedImage<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Scenes `start..start+count` of the stream defined by `cfg.seed`.
    pub fn generate(cfg: &SceneConfig, start: usize, count: usize) -> Result<Self> {
        cfg.validate()?;
        let images = (start..start + count)
            .map(|i| {
                let mut rng = scene_rng(cfg.seed, i as u64);
                generate_scene(cfg, &scene_id(i), &mut rng)
            })
            .collect();
        Ok(Self { images })
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self
                .images
                .iter()
                .map(|a| AnnotatedImage {
                    image: a.image.cast(),
                    gt_boxes: a.gt_boxes.iter().map(|b| b.cast()).collect(),
                    image_id: a.image_id.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_dataset(dir)
    }
}

/// Train/validation/test partitions with disjoint scene ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> DatasetSplits<T> {
    pub fn generate(cfg: &SceneConfig, train: usize, val: usize, test: usize) -> Result<Self> {
        Ok(Self {
            train: Dataset::generate(cfg, 0, train)?,
            val: Dataset::generate(cfg, train, val)?,
            test: Dataset::generate(cfg, train + val, test)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.save(&dir.join("train"))?;
        self.val.save(&dir.join("val"))?;
        self.test.save(&dir.join("test"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::load(&dir.join("train"))?,
            val: Dataset::load(&dir.join("val"))?,
            test: Dataset::load(&dir.join("test"))?,
        })
    }

    /// True when no scene id appears in more than one split.
    pub fn disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        [&self.train, &self.val, &self.test]
            .iter()
            .flat_map(|d| d.images.iter())
            .all(|a| seen.insert(a.image_id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    /// `[x_min, y_min, width, height]` in pixels.
    bbox: [f64; 4],
    category_id: u64,
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

fn encode_png<T: Scalar>(img: &Image<T>) -> Result<Vec<u8>> {
    let raw: Vec<u16> = img
        .pixels
        .iter()
        .map(|p| (p.to_f64_lossy().clamp(0.0, 1.0) * QUANT).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| FlowDetError::Shape("image buffer size".into()))?;
    let mut out = Cursor::new(Vec::new());
    image::DynamicImage::ImageLuma16(buf)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| FlowDetError::Io(std::io::Error::other(e)))?;
    Ok(out.into_inner())
}

fn decode_png<T: Scalar>(bytes: &[u8], id: &str) -> Result<Image<T>> {
    let img = image::load_from_memory(bytes).map_err(|e| FlowDetError::MissingImage {
        id: id.to_string(),
        detail: format!("cannot decode: {e}"),
    })?;
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let pixels = g.into_raw().into_iter().map(|v| T::lit(v as f64 / QUANT)).collect();
    Image::new(h, w, pixels)
}

/// Writes `annotations.json` plus one 16-bit grayscale PNG per scene.
pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let mut file = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: vec![CocoCategory {
            id: 1,
            name: "lesion".into(),
        }],
    };
    let mut ann_id = 1;
    for (k, a) in ds.images.iter().enumerate() {
        let img_id = k as u64 + 1;
        let file_name = format!("{IMAGES_DIR}/{}.png", a.image_id);
        atomic_write(&dir.join(&file_name), &encode_png(&a.image)?)?;
        file.images.push(CocoImage {
            id: img_id,
            file_name,
            width: a.image.width,
            height: a.image.height,
            scene_id: Some(a.image_id.clone()),
        });
        let (wf, hf) = (a.image.width as f64, a.image.height as f64);
        for b in &a.gt_boxes {
            let c = b.to_corners();
            let bbox = [
                c.x1.to_f64_lossy() * wf,
                c.y1.to_f64_lossy() * hf,
                b.w.to_f64_lossy() * wf,
                b.h.to_f64_lossy() * hf,
            ];
            file.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: img_id,
                bbox,
                category_id: 1,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    atomic_write_json(&dir.join(ANNOTATIONS_FILE), &file)
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path)?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| FlowDetError::Parse {
        path: path.display().to_string(),
        detail: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    let mut images = Vec::with_capacity(file.images.len());
    for im in &file.images {
        let id = im.scene_id.clone().unwrap_or_else(|| {
            Path::new(&im.file_name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| im.id.to_string())
        });
        let bytes = fs::read(dir.join(&im.file_name)).map_err(|e| FlowDetError::MissingImage {
            id: id.clone(),
            detail: format!("{}: {e}", im.file_name),
        })?;
        let image = decode_png(&bytes, &id)?;
        if image.width != im.width || image.height != im.height {
            return Err(FlowDetError::MissingImage {
                id,
                detail: format!(
                    "file is {}x{}, annotation says {}x{}",
                    image.width, image.height, im.width, im.height
                ),
            });
        }
        let (wf, hf) = (im.width as f64, im.height as f64);
        let gt_boxes = file
            .annotations
            .iter()
            .filter(|a| a.image_id == im.id)
            .map(|a| {
                let [x, y, w, h] = a.bbox;
                NormalizedBox::new(
                    T::lit((x + w / 2.0) / wf),
                    T::lit((y + h / 2.0) / hf),
                    T::lit(w / wf),
                    T::lit(h / hf),
                )
            })
            .collect();
        images.push(AnnotatedImage {
            image,
            gt_boxes,
            image_id: id,
        });
    }
    Ok(Dataset { images })
}

pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
