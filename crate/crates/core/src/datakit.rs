//! Paired label/image datasets on disk and a procedural toy scene generator.
//!
//! Layout of one split:
//!
//! ```text
//! <root>/<split>/manifest.json
//! <root>/<split>/labels/<name>.png           indexed-colour class ids
//! <root>/<split>/images/<name>.png           8-bit RGB
//! <root>/<split>/labels/<clip>/<frame>.png   sequences, zero-padded frames
//! <root>/<split>/images/<clip>/<frame>.png
//! <root>/<split>/frames.json                 clip index (sequences only)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edges::{laplacian_edge_map, LaplacianConfig};
use crate::error::{ensure, Error, Result};
use crate::nn::{resize, Resample};
use crate::tensor::{denormalize_image, normalize_image, EdgeMap, ImageTensor, SemanticMap};

/// One aligned training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// File stem (or `<clip>/<frame>`), used for output naming.
    pub name: String,
    pub semantic: SemanticMap,
    pub image: ImageTensor,
    /// Laplacian edges of `image`.
    pub source_edge: EdgeMap,
    pub clip_id: Option<String>,
    pub frame_idx: Option<usize>,
}

impl PairedSample {
    pub fn new(
        name: impl Into<String>,
        semantic: SemanticMap,
        image: ImageTensor,
        laplacian: &LaplacianConfig,
    ) -> Result<Self> {
        ensure!(
            semantic.height() == image.height() && semantic.width() == image.width(),
            "label {}x{} and image {}x{} are not aligned",
            semantic.height(),
            semantic.width(),
            image.height(),
            image.width()
        );
        let source_edge = laplacian_edge_map(&image, laplacian)?;
        Ok(Self {
            name: name.into(),
            semantic,
            image,
            source_edge,
            clip_id: None,
            frame_idx: None,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            semantic: self.semantic.flip_horizontal(),
            image: self.image.flip_horizontal(),
            source_edge: self.source_edge.flip_horizontal(),
            ..self.clone()
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            semantic: self.semantic.crop(y0, x0, h, w)?,
            image: self.image.crop(y0, x0, h, w)?,
            source_edge: self.source_edge.crop(y0, x0, h, w)?,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (train, val, test)"
            ))),
        }
    }
}

/// Description of one dataset split, stored as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Dataset root (the parent of the split directory); not serialized.
    #[serde(skip)]
    pub root: PathBuf,
    pub split: Split,
    pub n_classes: usize,
    /// `[height, width]` every sample is resized to.
    pub resolution: [usize; 2],
    /// Display colour of each class id.
    pub palette: Vec<[u8; 3]>,
}

impl DatasetManifest {
    pub fn split_dir(&self) -> PathBuf {
        self.root.join(self.split.to_string())
    }

    /// Reads `<root>/<split>/manifest.json`.
    pub fn open(root: &Path, split: Split) -> Result<Self> {
        let path = root.join(split.to_string()).join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::load(&path, e))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self) -> Result<()> {
        let dir = self.split_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.resolution;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("resolution {h}x{w} is empty")));
        }
        if self.n_classes == 0 || self.n_classes > 256 {
            return Err(Error::Config(format!(
                "n_classes {} must be in 1..=256",
                self.n_classes
            )));
        }
        if self.palette.len() < self.n_classes {
            return Err(Error::Config(format!(
                "palette has {} colours for {} classes",
                self.palette.len(),
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Clip index of a sequence split (`frames.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FrameIndex {
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    /// Frame stems in temporal order.
    pub frames: Vec<String>,
    /// Ground-truth per-frame object displacement `[dx, dy]`, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[i32; 2]>,
}

impl FrameIndex {
    pub fn open(manifest: &DatasetManifest) -> Result<Self> {
        let path = manifest.split_dir().join("frames.json");
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(&path, e))
    }
}

fn png_files(dir: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let mut files = Vec::new();
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_dir() {
            dirs.push(name);
        } else if let Some(stem) = name.strip_suffix(".png") {
            files.push(stem.to_string());
        }
    }
    files.sort();
    dirs.sort();
    Ok((files, dirs))
}

/// Relative stems (`name` or `clip/frame`) of the PNGs under `dir`, in order.
pub fn list_png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let (files, dirs) = png_files(dir)?;
    let mut out = files;
    for d in dirs {
        let (frames, _) = png_files(&dir.join(&d))?;
        out.extend(frames.into_iter().map(|f| format!("{d}/{f}")));
    }
    Ok(out)
}

/// Loads every sample of a split in a fixed order: stills by name, then
/// clips by id and frame. Labels are resized nearest-neighbour, images by
/// area averaging.
pub fn load_paired_dataset(
    manifest: &DatasetManifest,
    laplacian: &LaplacianConfig,
) -> Result<Vec<PairedSample>> {
    manifest.validate()?;
    let dir = manifest.split_dir();
    let label_dir = dir.join("labels");
    let image_dir = dir.join("images");
    let labels = list_png_stems(&label_dir)?;
    let images = list_png_stems(&image_dir)?;
    if labels.is_empty() && images.is_empty() {
        log::warn!("no samples found under {}", dir.display());
        return Ok(Vec::new());
    }
    for name in &labels {
        let p = image_dir.join(format!("{name}.png"));
        if !p.exists() {
            return Err(Error::load(&p, "missing image for label"));
        }
    }
    if labels.len() != images.len() {
        let orphan = images
            .iter()
            .find(|n| !labels.contains(n))
            .cloned()
            .unwrap_or_default();
        return Err(Error::load(
            label_dir.join(format!("{orphan}.png")),
            format!("{} labels but {} images", labels.len(), images.len()),
        ));
    }
    let [h, w] = manifest.resolution;
    labels
        .iter()
        .map(|name| {
            let semantic =
                read_label_png(&label_dir.join(format!("{name}.png")), manifest.n_classes)?;
            let semantic = resize_labels(&semantic, h, w);
            let image = read_rgb_png(&image_dir.join(format!("{name}.png")))?;
            let image = resize_image(&image, h, w)?;
            let mut s = PairedSample::new(name.clone(), semantic, image, laplacian)?;
            if let Some((clip, frame)) = name.split_once('/') {
                s.clip_id = Some(clip.to_string());
                s.frame_idx = Some(frame.parse().map_err(|_| {
                    Error::load(label_dir.join(name), "frame name is not an index")
                })?);
            }
            Ok(s)
        })
        .collect()
}

/// Groups clip samples into frame-ordered sequences, sorted by clip id.
pub fn group_sequences(samples: &[PairedSample]) -> Vec<Vec<PairedSample>> {
    let mut clips: BTreeMap<&str, Vec<&PairedSample>> = BTreeMap::new();
    for s in samples {
        if let Some(id) = &s.clip_id {
            clips.entry(id).or_default().push(s);
        }
    }
    clips
        .into_values()
        .map(|mut v| {
            v.sort_by_key(|s| s.frame_idx);
            v.into_iter().cloned().collect()
        })
        .collect()
}

pub fn resize_labels(map: &SemanticMap, height: usize, width: usize) -> SemanticMap {
    if map.height() == height && map.width() == width {
        return map.clone();
    }
    let labels = (0..height)
        .flat_map(|y| {
            let sy = y * map.height() / height;
            (0..width).map(move |x| map.at(sy, x * map.width() / width))
        })
        .collect();
    SemanticMap::new(height, width, map.n_classes(), labels).expect("resized labels stay in range")
}

pub fn resize_image(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if img.height() == height && img.width() == width {
        return Ok(img.clone());
    }
    let t = img.to_tensor(DType::F64, &Device::Cpu)?;
    ImageTensor::from_tensor(&resize(&t, height, width, Resample::Area)?)
}

fn decode_png(path: &Path, expand: bool) -> Result<(png::OutputInfo, Vec<u8>, Option<Vec<u8>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(if expand {
        png::Transformations::EXPAND | png::Transformations::STRIP_16
    } else {
        png::Transformations::IDENTITY
    });
    let mut reader = decoder.read_info().map_err(|e| Error::load(path, e))?;
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::load(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::load(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf, palette))
}

/// Reads an 8-bit image as RGB in `[-1, 1]`; grey is replicated, alpha dropped.
pub fn read_rgb_png(path: &Path) -> Result<ImageTensor> {
    let (info, buf, _) = decode_png(path, true)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let src_c = info.color_type.samples();
    let rgb: Vec<u8> = match src_c {
        3 => buf,
        4 => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        1 => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        2 => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        c => return Err(Error::load(path, format!("unsupported channel count {c}"))),
    };
    normalize_image(&rgb, h, w, 3).map_err(|e| Error::load(path, e))
}

pub fn write_rgb_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let interleaved = denormalize_image(img);
    let (h, w) = (img.height(), img.width());
    let color = if img.channels() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    };
    write_png(path, w, h, color, None, &interleaved)
}

/// Writes class ids as an indexed-colour PNG with `palette`.
pub fn write_label_png(path: &Path, map: &SemanticMap, palette: &[[u8; 3]]) -> Result<()> {
    ensure!(
        palette.len() >= map.n_classes() && map.n_classes() <= 256,
        "palette has {} colours for {} classes",
        palette.len(),
        map.n_classes()
    );
    let flat: Vec<u8> = palette.iter().flatten().copied().collect();
    let data: Vec<u8> = map.labels().iter().map(|&l| l as u8).collect();
    write_png(
        path,
        map.width(),
        map.height(),
        png::ColorType::Indexed,
        Some(flat),
        &data,
    )
}

/// Writes a `[0,1]` edge map as 8-bit greyscale.
pub fn write_edge_png(path: &Path, edges: &EdgeMap) -> Result<()> {
    let data: Vec<u8> = edges
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    write_png(
        path,
        edges.width(),
        edges.height(),
        png::ColorType::Grayscale,
        None,
        &data,
    )
}

fn write_png(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| Error::load(path, e))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::load(path, e))?;
    writer.finish().map_err(|e| Error::load(path, e))
}

/// Reads class ids from an indexed-colour (or 8-bit greyscale) PNG.
pub fn read_label_png(path: &Path, n_classes: usize) -> Result<SemanticMap> {
    let (info, buf, _) = decode_png(path, false)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let labels: Vec<u32> = match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => (0..h)
            .flat_map(|y| {
                buf[y * info.line_size..y * info.line_size + w]
                    .iter()
                    .map(|&v| v as u32)
            })
            .collect(),
        (c, d) => {
            return Err(Error::load(
                path,
                format!("label image must be 8-bit indexed or grey, got {c:?}/{d:?}"),
            ))
        }
    };
    SemanticMap::new(h, w, n_classes, labels).map_err(|e| Error::load(path, e))
}

/// Display colours used by the toy generator (and its palette decoder).
pub const TOY_PALETTE: [[u8; 3]; 10] = [
    [90, 150, 235],  // sky
    [60, 60, 60],    // road
    [215, 40, 40],   // car
    [40, 170, 60],   // tree
    [240, 210, 60],  // building
    [170, 60, 220],  // person
    [240, 140, 30],  // sign
    [30, 200, 200],  // pole
    [250, 250, 250], // marking
    [130, 80, 30],   // terrain
];

/// Motion settings for sequence generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyMotion {
    pub frames: usize,
    /// Largest per-frame displacement along either axis.
    pub max_speed: i32,
}

impl Default for ToyMotion {
    fn default() -> Self {
        Self {
            frames: 2,
            max_speed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    /// Number of stills, or number of clips when `motion` is set.
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub motion: Option<ToyMotion>,
}

impl ToySpec {
    pub fn new(seed: u64, n_samples: usize) -> Self {
        Self {
            seed,
            n_samples,
            height: 64,
            width: 128,
            n_classes: 6,
            motion: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(32)
            || !self.width.is_multiple_of(32)
        {
            return bad(format!(
                "toy resolution {}x{} must be a multiple of 32",
                self.height, self.width
            ));
        }
        if !(3..=TOY_PALETTE.len()).contains(&self.n_classes) {
            return bad(format!(
                "toy n_classes must be in 3..={}",
                TOY_PALETTE.len()
            ));
        }
        if let Some(m) = self.motion {
            if m.frames < 2 || m.max_speed < 1 {
                return bad("motion needs >= 2 frames and max_speed >= 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone)]
struct ToyObject {
    class: u32,
    shape: Shape,
    y: i32,
    x: i32,
    h: i32,
    w: i32,
    tex: u64,
}

impl ToyObject {
    fn contains(&self, ly: i32, lx: i32) -> bool {
        if ly < 0 || lx < 0 || ly >= self.h || lx >= self.w {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let dy = (ly as f32 + 0.5) / self.h as f32 * 2.0 - 1.0;
                let dx = (lx as f32 + 0.5) / self.w as f32 * 2.0 - 1.0;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

/// One procedural scene: a sky/road split plus textured objects.
#[derive(Debug, Clone)]
pub struct ToyScene {
    height: usize,
    width: usize,
    n_classes: usize,
    horizon: usize,
    objects: Vec<ToyObject>,
    seed: u64,
}

fn hash_noise(a: i64, b: i64, seed: u64) -> f32 {
    // splitmix64 over the packed coordinates
    let mut z = seed
        .wrapping_add((a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
}

/// Class colour in `[-1, 1]` plus a class-specific texture evaluated in
/// the surface's own coordinates (so textures move with objects).
fn texture(class: u32, ly: i32, lx: i32, seed: u64) -> [f32; 3] {
    let base = TOY_PALETTE[class as usize].map(|v| v as f32 / 127.5 - 1.0);
    let px = 5.0 + class as f32;
    let py = 7.0 + 0.5 * class as f32;
    let tau = std::f32::consts::TAU;
    let t = 0.6 * (tau * lx as f32 / px).sin() * (tau * ly as f32 / py).cos()
        + 0.4 * (tau * (lx + 2 * ly) as f32 / (px + py)).sin();
    let n = hash_noise(ly as i64, lx as i64, seed);
    let v = 0.06 * t + 0.02 * n;
    base.map(|b| (b + v).clamp(-1.0, 1.0))
}

impl ToyScene {
    /// `shift` is the total object displacement the scene must accommodate
    /// while keeping every object fully on the canvas.
    pub fn random(spec: &ToySpec, rng: &mut ChaCha8Rng, shift: [i32; 2]) -> Self {
        let (h, w) = (spec.height as i32, spec.width as i32);
        let horizon = rng.random_range(h * 2 / 5..=h / 2) as usize;
        let n_obj = rng.random_range(3..=5);
        let objects = (0..n_obj)
            .map(|_| {
                let oh = rng.random_range(h / 4..=h / 2);
                let ow = rng.random_range(w / 8..=w / 4);
                let y_lo = (-shift[1]).max(0);
                let x_lo = (-shift[0]).max(0);
                let y = rng.random_range(y_lo..=(h - oh - shift[1].max(0)).max(y_lo));
                let x = rng.random_range(x_lo..=(w - ow - shift[0].max(0)).max(x_lo));
                ToyObject {
                    class: rng.random_range(2..spec.n_classes as u32),
                    shape: if rng.random_bool(0.5) {
                        Shape::Rect
                    } else {
                        Shape::Ellipse
                    },
                    y,
                    x,
                    h: oh,
                    w: ow,
                    tex: rng.random(),
                }
            })
            .collect();
        Self {
            height: spec.height,
            width: spec.width,
            n_classes: spec.n_classes,
            horizon,
            objects,
            seed: rng.random(),
        }
    }

    /// Renders the scene with every object displaced by `offset = [dx, dy]`.
    pub fn render(&self, offset: [i32; 2]) -> (SemanticMap, ImageTensor) {
        let (h, w) = (self.height, self.width);
        let mut labels = vec![0u32; h * w];
        let mut rgb = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (yi, xi) = (y as i32, x as i32);
                let hit = self
                    .objects
                    .iter()
                    .rev()
                    .find(|o| o.contains(yi - o.y - offset[1], xi - o.x - offset[0]));
                let (class, col) = match hit {
                    Some(o) => (
                        o.class,
                        texture(o.class, yi - o.y - offset[1], xi - o.x - offset[0], o.tex),
                    ),
                    None => {
                        let c = if y < self.horizon { 0 } else { 1 };
                        (c, texture(c, yi, xi, self.seed))
                    }
                };
                labels[y * w + x] = class;
                for (k, v) in col.into_iter().enumerate() {
                    rgb[k * h * w + y * w + x] = v;
                }
            }
        }
        (
            SemanticMap::new(h, w, self.n_classes, labels).expect("toy labels in range"),
            ImageTensor::new(3, h, w, rgb).expect("toy colours in range"),
        )
    }
}

/// Samples `(scenes, velocities)` for a toy spec; velocities are `None`
/// for stills.
pub fn toy_scenes(spec: &ToySpec) -> Result<Vec<(ToyScene, Option<[i32; 2]>)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_samples)
        .map(|_| match spec.motion {
            None => (ToyScene::random(spec, &mut rng, [0, 0]), None),
            Some(m) => {
                let v = loop {
                    let v = [
                        rng.random_range(-m.max_speed..=m.max_speed),
                        rng.random_range(-m.max_speed..=m.max_speed),
                    ];
                    if v != [0, 0] {
                        break v;
                    }
                };
                let n = m.frames as i32 - 1;
                (
                    ToyScene::random(spec, &mut rng, [v[0] * n, v[1] * n]),
                    Some(v),
                )
            }
        })
        .collect())
}

/// Writes a procedural dataset split to `<root>/<split>` and returns its
/// manifest. Same spec → byte-identical files.
pub fn synth_toy_dataset(root: &Path, split: Split, spec: &ToySpec) -> Result<DatasetManifest> {
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split,
        n_classes: spec.n_classes,
        resolution: [spec.height, spec.width],
        palette: TOY_PALETTE[..spec.n_classes].to_vec(),
    };
    let dir = manifest.split_dir();
    let mut index = FrameIndex::default();
    for (i, (scene, vel)) in toy_scenes(spec)?.into_iter().enumerate() {
        match (vel, spec.motion) {
            (Some(v), Some(m)) => {
                let id = format!("clip_{i:03}");
                let mut frames = Vec::with_capacity(m.frames);
                for f in 0..m.frames {
                    let (sem, img) = scene.render([v[0] * f as i32, v[1] * f as i32]);
                    let stem = format!("{f:04}");
                    write_label_png(
                        &dir.join("labels").join(&id).join(format!("{stem}.png")),
                        &sem,
                        &manifest.palette,
                    )?;
                    write_rgb_png(
                        &dir.join("images").join(&id).join(format!("{stem}.png")),
                        &img,
                    )?;
                    frames.push(stem);
                }
                index.clips.push(ClipEntry {
                    id,
                    frames,
                    velocity: Some(v),
                });
            }
            _ => {
                let (sem, img) = scene.render([0, 0]);
                let stem = format!("{i:06}");
                write_label_png(
                    &dir.join("labels").join(format!("{stem}.png")),
                    &sem,
                    &manifest.palette,
                )?;
                write_rgb_png(&dir.join("images").join(format!("{stem}.png")), &img)?;
            }
        }
    }
    if !index.clips.is_empty() {
        let path = dir.join("frames.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
    }
    manifest.write()?;
    Ok(manifest)
}

/// In-memory toy samples (stills, or all clip frames in order).
pub fn toy_samples(spec: &ToySpec, laplacian: &LaplacianConfig) -> Result<Vec<PairedSample>> {
    let mut out = Vec::new();
    for (i, (scene, vel)) in toy_scenes(spec)?.into_iter().enumerate() {
        match (vel, spec.motion) {
            (Some(v), Some(m)) => {
                for f in 0..m.frames {
                    let (sem, img) = scene.render([v[0] * f as i32, v[1] * f as i32]);
                    let mut s =
                        PairedSample::new(format!("clip_{i:03}/{f:04}"), sem, img, laplacian)?;
                    s.clip_id = Some(format!("clip_{i:03}"));
                    s.frame_idx = Some(f);
                    out.push(s);
                }
            }
            _ => {
                let (sem, img) = scene.render([0, 0]);
                out.push(PairedSample::new(format!("{i:06}"), sem, img, laplacian)?);
            }
        }
    }
    Ok(out)
}

/// Labels each pixel with the class whose palette colour is nearest.
pub fn decode_palette(img: &ImageTensor, palette: &[[u8; 3]]) -> Result<SemanticMap> {
    ensure!(img.channels() == 3, "palette decoding needs an RGB image");
    ensure!(!palette.is_empty(), "empty palette");
    let cols: Vec<[f32; 3]> = palette
        .iter()
        .map(|c| c.map(|v| v as f32 / 127.5 - 1.0))
        .collect();
    let (h, w) = (img.height(), img.width());
    let labels = (0..h * w)
        .map(|i| {
            let px = [
                img.data()[i],
                img.data()[h * w + i],
                img.data()[2 * h * w + i],
            ];
            cols.iter()
                .enumerate()
                .map(|(k, c)| (k, (0..3).map(|j| (px[j] - c[j]).powi(2)).sum::<f32>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k as u32)
                .unwrap_or(0)
        })
        .collect();
    SemanticMap::new(h, w, palette.len(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{estimate_flow, FlowConfig, FlowField};

    fn small(seed: u64, n: usize) -> ToySpec {
        ToySpec::new(seed, n)
    }

    #[test]
    fn labels_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(3, 3);
        let m = synth_toy_dataset(dir.path(), Split::Train, &spec).unwrap();
        let loaded = load_paired_dataset(&m, &LaplacianConfig::default()).unwrap();
        let direct = toy_samples(&spec, &LaplacianConfig::default()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&direct) {
            assert_eq!(a.semantic, b.semantic);
            assert_eq!(a.name, b.name);
            // 8-bit quantisation only
            assert!(a.image.mean_abs_diff(&b.image).unwrap() < 1.0 / 127.5);
        }
        let reopened = DatasetManifest::open(dir.path(), Split::Train).unwrap();
        assert_eq!(reopened, m);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = ToySpec {
            motion: Some(ToyMotion::default()),
            ..small(11, 2)
        };
        synth_toy_dataset(a.path(), Split::Train, &spec).unwrap();
        synth_toy_dataset(b.path(), Split::Train, &spec).unwrap();
        for rel in [
            "train/labels/clip_001/0001.png",
            "train/images/clip_000/0000.png",
            "train/frames.json",
            "train/manifest.json",
        ] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn labels_stay_below_class_count() {
        for n in [3, 6, 10] {
            let spec = ToySpec {
                n_classes: n,
                ..small(n as u64, 4)
            };
            for s in toy_samples(&spec, &LaplacianConfig::default()).unwrap() {
                assert!(s.semantic.labels().iter().all(|&l| (l as usize) < n));
            }
        }
    }

    #[test]
    fn empty_split_yields_no_samples() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            root: dir.path().to_path_buf(),
            split: Split::Val,
            n_classes: 3,
            resolution: [32, 32],
            palette: TOY_PALETTE[..3].to_vec(),
        };
        std::fs::create_dir_all(m.split_dir()).unwrap();
        assert!(load_paired_dataset(&m, &LaplacianConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn unpaired_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_toy_dataset(dir.path(), Split::Train, &small(1, 2)).unwrap();
        let extra = m.split_dir().join("images").join("000099.png");
        std::fs::copy(m.split_dir().join("images").join("000000.png"), &extra).unwrap();
        assert!(matches!(
            load_paired_dataset(&m, &LaplacianConfig::default()),
            Err(Error::Load { .. })
        ));
        std::fs::remove_file(&extra).unwrap();
        std::fs::remove_file(m.split_dir().join("images").join("000001.png")).unwrap();
        let err = load_paired_dataset(&m, &LaplacianConfig::default()).unwrap_err();
        assert!(err.to_string().contains("000001.png"), "{err}");
    }

    #[test]
    fn loader_resizes_to_manifest_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = synth_toy_dataset(dir.path(), Split::Train, &small(2, 1)).unwrap();
        m.resolution = [32, 64];
        let s = &load_paired_dataset(&m, &LaplacianConfig::default()).unwrap()[0];
        assert_eq!((s.semantic.height(), s.semantic.width()), (32, 64));
        assert_eq!((s.image.height(), s.image.width()), (32, 64));
        assert_eq!((s.source_edge.height(), s.source_edge.width()), (32, 64));
    }

    #[test]
    fn clips_are_grouped_in_frame_order() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            motion: Some(ToyMotion {
                frames: 3,
                max_speed: 1,
            }),
            ..small(5, 2)
        };
        let m = synth_toy_dataset(dir.path(), Split::Val, &spec).unwrap();
        let seqs = group_sequences(&load_paired_dataset(&m, &LaplacianConfig::default()).unwrap());
        assert_eq!(seqs.len(), 2);
        for s in &seqs {
            assert_eq!(
                s.iter().map(|f| f.frame_idx.unwrap()).collect::<Vec<_>>(),
                vec![0, 1, 2]
            );
        }
        let index = FrameIndex::open(&m).unwrap();
        assert_eq!(index.clips.len(), 2);
        assert!(index.clips.iter().all(|c| c.velocity.is_some()));
    }

    #[test]
    fn palette_decoder_recovers_toy_labels() {
        for s in toy_samples(&small(9, 4), &LaplacianConfig::default()).unwrap() {
            let d = decode_palette(&s.image, &TOY_PALETTE[..6]).unwrap();
            let hits = d
                .labels()
                .iter()
                .zip(s.semantic.labels())
                .filter(|(a, b)| a == b)
                .count();
            assert_eq!(hits, d.labels().len());
        }
    }

    #[test]
    fn augmentation_keeps_alignment() {
        let s = &toy_samples(&small(4, 1), &LaplacianConfig::default()).unwrap()[0];
        let f = s.flip_horizontal();
        assert_eq!(f.semantic.at(3, 0), s.semantic.at(3, 127));
        assert_eq!(f.source_edge.at(10, 5), s.source_edge.at(10, 122));
        let c = s.crop(8, 16, 32, 64).unwrap();
        assert_eq!(c.semantic.at(0, 0), s.semantic.at(8, 16));
        assert_eq!(c.image.at(1, 2, 3), s.image.at(1, 10, 19));
    }

    /// Object pixels whose whole `r`-neighbourhood belongs to an object and
    /// lies away from the border.
    pub(crate) fn interior_object_mask(sem: &SemanticMap, r: usize, border: usize) -> Vec<bool> {
        let (h, w) = (sem.height(), sem.width());
        let mut m = vec![false; h * w];
        for y in border.max(r)..h - border.max(r) {
            for x in border.max(r)..w - border.max(r) {
                let c = sem.at(y, x);
                m[y * w + x] = c >= 2
                    && (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| sem.at(yy, xx) == c));
            }
        }
        m
    }

    #[test]
    fn motion_clip_velocity_is_recoverable() {
        let spec = ToySpec {
            motion: Some(ToyMotion::default()),
            ..small(21, 4)
        };
        let scenes = toy_scenes(&spec).unwrap();
        let mut epes = Vec::new();
        for (scene, v) in scenes {
            let v = v.unwrap();
            let (sem, a) = scene.render([0, 0]);
            let (_, b) = scene.render(v);
            let est = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
            let truth = FlowField::constant(64, 128, v[0] as f32, v[1] as f32);
            let mask = interior_object_mask(&sem, 3, 4);
            let epe = est.mean_epe(&truth, |y, x| mask[y * 128 + x]).unwrap();
            epes.push(epe);
        }
        let mean = epes.iter().sum::<f64>() / epes.len() as f64;
        assert!(mean <= 0.25, "per-clip EPE {epes:?}");
    }
}
