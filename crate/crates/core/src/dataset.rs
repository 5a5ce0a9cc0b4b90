//! Synthetic fog-shift benchmark: grid scenes with per-cell object
//! annotations, their fogged translations, an independent fogged target
//! domain, per-iteration pairing and the on-disk manifest.
//!
//! On disk a benchmark looks like
//!
//! ```text
//! root/manifest.jsonl
//! root/source/scene_00000.png             clean source scene
//! root/source/scene_00000.translated.png  its fogged translation
//! root/source/scene_00000.anno            "row col class_id" per line
//! root/target/target_00000.png            fogged independent scene
//! root/target/target_00000.anno           held out for evaluation
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    blend_images, blend_source_target, fog_translate, read_image, write_image, FogParams,
    ImageBuffer, ImageError,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid scene layout: {0}")]
    InvalidLayout(String),
    #[error("annotation ({row}, {col}, class {class_id}) is outside a {grid}x{grid} grid with {classes} classes")]
    BadAnnotation {
        row: usize,
        col: usize,
        class_id: usize,
        grid: usize,
        classes: usize,
    },
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("source and translated sets differ in length ({0} vs {1})")]
    Unpaired(usize, usize),
    #[error("mixing weight must be in [0, 1], got {0}")]
    DeltaOutOfRange(f64),
    #[error("manifest schema version {found}, expected {SCHEMA_VERSION}")]
    SchemaMismatch { found: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One object occupying a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub cell_row: usize,
    pub cell_col: usize,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Square,
    Disk,
    Cross,
    Diamond,
}

const SHAPES: [ObjectShape; 4] = [
    ObjectShape::Square,
    ObjectShape::Disk,
    ObjectShape::Cross,
    ObjectShape::Diamond,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub annotation: Annotation,
    pub shape: ObjectShape,
    pub color: [f64; 3],
    /// Half extent in pixels.
    pub radius: f64,
    /// Center offset from the cell center, in pixels.
    pub offset: (f64, f64),
}

/// A fully specified scene, renderable without further randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub grid_size: usize,
    pub num_classes: usize,
    pub objects: Vec<SceneObject>,
    pub background_seed: u64,
}

/// Distribution that scenes are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneLayout {
    pub image_size: usize,
    pub grid_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            image_size: 32,
            grid_size: 4,
            num_classes: 3,
            min_objects: 2,
            max_objects: 6,
        }
    }
}

impl SceneLayout {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidLayout(m.to_string()));
        if self.grid_size == 0 || self.image_size == 0 {
            return bad("image_size and grid_size must be positive");
        }
        if !self.image_size.is_multiple_of(self.grid_size) {
            return bad("image_size must be a multiple of grid_size");
        }
        if self.image_size / self.grid_size < 4 {
            return bad("cells must be at least 4 pixels wide");
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.min_objects > self.max_objects || self.max_objects > self.cells() {
            return bad("object count range must fit in the grid");
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn cell_pixels(&self) -> usize {
        self.image_size / self.grid_size
    }

    /// Draws a random scene with at most one object per cell.
    pub fn sample_scene(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(self.min_objects..=self.max_objects);
        let mut cells: Vec<usize> = (0..self.cells()).collect();
        cells.shuffle(&mut rng);
        let cell = self.cell_pixels() as f64;
        let mut objects: Vec<SceneObject> = cells[..count]
            .iter()
            .map(|&c| {
                let class_id = rng.random_range(0..self.num_classes);
                let base = class_color(class_id, self.num_classes);
                let color = base.map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
                let radius = rng.random_range(0.28..0.42) * cell;
                let slack = (cell / 2.0 - radius).max(0.0) * 0.8;
                SceneObject {
                    annotation: Annotation {
                        cell_row: c / self.grid_size,
                        cell_col: c % self.grid_size,
                        class_id,
                    },
                    shape: SHAPES[rng.random_range(0..SHAPES.len())],
                    color,
                    radius,
                    offset: (
                        rng.random_range(-slack..=slack),
                        rng.random_range(-slack..=slack),
                    ),
                }
            })
            .collect();
        objects.sort_by_key(|o| (o.annotation.cell_row, o.annotation.cell_col));
        SceneSpec {
            image_size: self.image_size,
            grid_size: self.grid_size,
            num_classes: self.num_classes,
            objects,
            background_seed: rng.random(),
        }
    }
}

/// Saturated class colors on evenly spaced hues.
pub fn class_color(class_id: usize, num_classes: usize) -> [f64; 3] {
    let hue = class_id as f64 / num_classes as f64 * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    // value 0.85, saturation 0.8
    [r, g, b].map(|c| 0.85 * (0.2 + 0.8 * c))
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        SceneLayout {
            image_size: self.image_size,
            grid_size: self.grid_size,
            num_classes: self.num_classes,
            min_objects: 0,
            max_objects: self.objects.len().min(self.grid_size * self.grid_size),
        }
        .validate()?;
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            check_annotation(&o.annotation, self.grid_size, self.num_classes)?;
            if !seen.insert((o.annotation.cell_row, o.annotation.cell_col)) {
                return Err(DatasetError::InvalidLayout(format!(
                    "two objects in cell ({}, {})",
                    o.annotation.cell_row, o.annotation.cell_col
                )));
            }
        }
        Ok(())
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.objects.iter().map(|o| o.annotation).collect()
    }

    /// Gray textured background with the objects painted on top.
    pub fn render(&self) -> Result<ImageBuffer, DatasetError> {
        self.validate()?;
        let n = self.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.background_seed);
        let level: f64 = rng.random_range(0.25..0.55);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
        let grain = Normal::new(0.0, 0.04).expect("constant sigma");
        let mut img = ImageBuffer::filled(n, n, 0.0)?;
        for r in 0..n {
            for c in 0..n {
                let rgb = std::array::from_fn(|k| level + tint[k] + grain.sample(&mut rng));
                img.set_pixel(r, c, rgb);
            }
        }
        let cell = (n / self.grid_size) as f64;
        for o in &self.objects {
            let cy = (o.annotation.cell_row as f64 + 0.5) * cell + o.offset.0;
            let cx = (o.annotation.cell_col as f64 + 0.5) * cell + o.offset.1;
            let r0 = (o.annotation.cell_row as f64 * cell) as usize;
            let c0 = (o.annotation.cell_col as f64 * cell) as usize;
            for r in r0..r0 + cell as usize {
                for c in c0..c0 + cell as usize {
                    let dy = r as f64 + 0.5 - cy;
                    let dx = c as f64 + 0.5 - cx;
                    if covers(o.shape, dy, dx, o.radius) {
                        img.set_pixel(r, c, o.color);
                    }
                }
            }
        }
        Ok(img)
    }
}

fn covers(shape: ObjectShape, dy: f64, dx: f64, radius: f64) -> bool {
    match shape {
        ObjectShape::Square => dy.abs() <= radius && dx.abs() <= radius,
        ObjectShape::Disk => dy * dy + dx * dx <= radius * radius,
        ObjectShape::Cross => {
            let arm = radius * 0.45;
            (dy.abs() <= radius && dx.abs() <= arm) || (dx.abs() <= radius && dy.abs() <= arm)
        }
        ObjectShape::Diamond => dy.abs() + dx.abs() <= radius * 1.3,
    }
}

fn check_annotation(a: &Annotation, grid: usize, classes: usize) -> Result<(), DatasetError> {
    if a.cell_row >= grid || a.cell_col >= grid || a.class_id >= classes {
        return Err(DatasetError::BadAnnotation {
            row: a.cell_row,
            col: a.cell_col,
            class_id: a.class_id,
            grid,
            classes,
        });
    }
    Ok(())
}

/// SplitMix64 finalizer over `(base, stream, index)`; gives every scene and
/// noise field its own seed independent of generation order.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_TRANSLATOR_NOISE: u64 = 3;
const STREAM_TARGET_NOISE: u64 = 4;

/// A labeled source scene and its translation.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePair {
    pub name: String,
    pub source: ImageBuffer,
    pub translated: ImageBuffer,
    pub annotations: Vec<Annotation>,
}

/// Annotations that only evaluation may look at. Every read is counted.
#[derive(Debug, Default)]
pub struct HeldOut<T> {
    inner: T,
    reads: AtomicUsize,
}

impl<T> HeldOut<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn reveal(&self) -> &T {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.inner
    }

    pub fn access_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

impl<T: Clone> Clone for HeldOut<T> {
    fn clone(&self) -> Self {
        Self::new(self.inner.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TargetSet {
    pub names: Vec<String>,
    pub images: Vec<ImageBuffer>,
    pub annotations: HeldOut<Vec<Vec<Annotation>>>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub layout: SceneLayout,
    pub source_count: usize,
    pub target_count: usize,
    /// Corruption applied to source scenes to get their translations.
    pub translator_fog: FogParams,
    /// Corruption that defines the target domain.
    pub target_fog: FogParams,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            layout: SceneLayout::default(),
            source_count: 200,
            target_count: 200,
            // The translator overshoots the target's fog and noise, so fully
            // translated images hide objects that the target still shows.
            translator_fog: FogParams {
                fog_strength: 0.95,
                veil_luminance: 0.8,
                noise_sigma: 0.15,
                seed: 0,
            },
            target_fog: FogParams {
                fog_strength: 0.88,
                veil_luminance: 0.8,
                noise_sigma: 0.1,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub layout: SceneLayout,
    pub source: Vec<SourcePair>,
    pub target: TargetSet,
}

/// Builds `source_count` labeled source scenes with their translations and
/// `target_count` independently drawn, fogged target scenes.
///
/// Scenes are rendered in parallel; each draws from its own derived seed so
/// the output does not depend on the worker count.
pub fn generate_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Benchmark, DatasetError> {
    config.layout.validate()?;
    config.translator_fog.validate()?;
    config.target_fog.validate()?;
    if config.source_count == 0 {
        return Err(DatasetError::Empty("source"));
    }
    if config.target_count == 0 {
        return Err(DatasetError::Empty("target"));
    }
    let layout = config.layout;
    let source = (0..config.source_count)
        .into_par_iter()
        .map(|i| {
            let spec = layout.sample_scene(derive_seed(seed, STREAM_SOURCE, i as u64));
            let image = quantize(&spec.render()?);
            let translated = quantize(&fog_translate(
                &image,
                &translator_for(&config.translator_fog, seed, i),
            )?);
            Ok(SourcePair {
                name: format!("scene_{i:05}"),
                source: image,
                translated,
                annotations: spec.annotations(),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let target = (0..config.target_count)
        .into_par_iter()
        .map(|i| {
            let spec = layout.sample_scene(derive_seed(seed, STREAM_TARGET, i as u64));
            let fog = config.target_fog.with_seed(derive_seed(
                seed ^ config.target_fog.seed,
                STREAM_TARGET_NOISE,
                i as u64,
            ));
            Ok((
                quantize(&fog_translate(&spec.render()?, &fog)?),
                spec.annotations(),
            ))
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let (images, annotations): (Vec<_>, Vec<_>) = target.into_iter().unzip();
    Ok(Benchmark {
        layout,
        source,
        target: TargetSet {
            names: (0..images.len())
                .map(|i| format!("target_{i:05}"))
                .collect(),
            images,
            annotations: HeldOut::new(annotations),
        },
    })
}

/// Rounds to the 8-bit grid images are stored on, so a benchmark read back
/// from disk equals the one generated in memory.
fn quantize(image: &ImageBuffer) -> ImageBuffer {
    ImageBuffer::from_rgb8(image.height(), image.width(), &image.to_rgb8())
        .expect("same dimensions")
}

/// The translator applied to source scene `index`, with its own noise stream.
fn translator_for(fog: &FogParams, seed: u64, index: usize) -> FogParams {
    fog.with_seed(derive_seed(
        seed ^ fog.seed,
        STREAM_TRANSLATOR_NOISE,
        index as u64,
    ))
}

impl Benchmark {
    /// Replaces every translated image with a fresh `fog` translation of its
    /// source. With the generating config and seed this reproduces the
    /// original translations exactly.
    pub fn retranslate(&mut self, fog: &FogParams, seed: u64) -> Result<(), DatasetError> {
        fog.validate()?;
        self.source
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(i, pair)| {
                pair.translated =
                    quantize(&fog_translate(&pair.source, &translator_for(fog, seed, i))?);
                Ok(())
            })
    }
}

/// A blended image that stands in for its source during training.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedSample {
    pub image: ImageBuffer,
    pub annotations: Vec<Annotation>,
    pub domain_label: f64,
    pub delta: f64,
    pub source_index: usize,
}

/// A source image mixed with an unrelated target image.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTargetMixSample {
    pub image: ImageBuffer,
    /// The unmixed target operand, used by hard-label training.
    pub target: ImageBuffer,
    pub domain_label: f64,
    pub delta: f64,
    pub source_index: usize,
    pub target_index: usize,
}

/// Draws one source (with its translation) and one unrelated target, and
/// builds both mixed samples at the same `delta`.
pub fn pair_for_iteration<R: Rng>(
    source: &[SourcePair],
    target: &TargetSet,
    delta: f64,
    rng: &mut R,
) -> Result<(BlendedSample, SourceTargetMixSample), DatasetError> {
    if source.is_empty() {
        return Err(DatasetError::Empty("source"));
    }
    if target.is_empty() {
        return Err(DatasetError::Empty("target"));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(DatasetError::DeltaOutOfRange(delta));
    }
    let si = rng.random_range(0..source.len());
    let ti = rng.random_range(0..target.len());
    let pair = &source[si];
    let blended = BlendedSample {
        image: blend_images(&pair.source, &pair.translated, delta)?,
        annotations: pair.annotations.clone(),
        domain_label: delta,
        delta,
        source_index: si,
    };
    let target_image = &target.images[ti];
    let mix = SourceTargetMixSample {
        image: blend_source_target(&pair.source, target_image, delta)?,
        target: target_image.clone(),
        domain_label: delta,
        delta,
        source_index: si,
        target_index: ti,
    };
    Ok((blended, mix))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRole {
    Source,
    Translated,
    Blended,
    Target,
    SourceTargetMix,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub source_path: PathBuf,
    pub translated_path: Option<PathBuf>,
    pub blended_path: Option<PathBuf>,
    pub annotations: Vec<Annotation>,
    pub domain_label: f64,
    pub delta_at_creation: f64,
    pub role: SampleRole,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.domain_label)
            || !(0.0..=1.0).contains(&self.delta_at_creation)
        {
            return Err("domain_label and delta_at_creation must be in [0, 1]".into());
        }
        match self.role {
            SampleRole::Source if self.domain_label != 0.0 => {
                Err("source records carry domain_label 0".into())
            }
            SampleRole::Target if self.domain_label != 1.0 => {
                Err("target records carry domain_label 1".into())
            }
            SampleRole::Blended | SampleRole::SourceTargetMix
                if self.domain_label != self.delta_at_creation =>
            {
                Err("mixed records carry domain_label == delta_at_creation".into())
            }
            SampleRole::Blended if self.blended_path.is_none() => {
                Err("blended record without blended_path".into())
            }
            _ => Ok(()),
        }
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.source_path)
            .chain(self.translated_path.as_ref())
            .chain(self.blended_path.as_ref())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema_version: u32,
}

pub fn write_manifest(
    path: impl AsRef<Path>,
    records: &[SampleRecord],
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut out = String::new();
    let header = serde_json::to_string(&ManifestHeader {
        schema_version: SCHEMA_VERSION,
    })
    .expect("header serializes");
    out.push_str(&header);
    out.push('\n');
    for (index, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|message| DatasetError::InvalidRecord { index, message })?;
        let line = serde_json::to_string(r).map_err(|e| DatasetError::InvalidRecord {
            index,
            message: e.to_string(),
        })?;
        let _ = writeln!(out, "{line}");
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Parses a manifest and checks that every referenced file exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>, DatasetError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let parse = |line: usize, message: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = lines
        .next()
        .ok_or_else(|| parse(1, "empty manifest".into()))?
        .map_err(io_err(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&header).map_err(|e| parse(1, e.to_string()))?;
    match value.get("schema_version") {
        Some(v) if v.as_u64() == Some(u64::from(SCHEMA_VERSION)) => {}
        other => {
            return Err(DatasetError::SchemaMismatch {
                found: other.map_or_else(|| "none".to_string(), |v| v.to_string()),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| parse(i + 2, e.to_string()))?;
        record
            .validate()
            .map_err(|message| DatasetError::InvalidRecord {
                index: records.len(),
                message,
            })?;
        for p in record.paths() {
            let full = base.join(p);
            if !full.is_file() {
                return Err(DatasetError::MissingFile(full));
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_annotations(
    path: impl AsRef<Path>,
    annotations: &[Annotation],
) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut out = String::new();
    for a in annotations {
        let _ = writeln!(out, "{} {} {}", a.cell_row, a.cell_col, a.class_id);
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let fields: Vec<usize> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e: std::num::ParseIntError| DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            match fields[..] {
                [cell_row, cell_col, class_id] => Ok(Annotation {
                    cell_row,
                    cell_col,
                    class_id,
                }),
                _ => Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected `row col class_id`".into(),
                }),
            }
        })
        .collect()
}

/// `name.png` becomes `name.<suffix>.png`.
pub fn sibling_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    path.with_file_name(format!("{stem}.{suffix}.png"))
}

impl Benchmark {
    /// Writes images, sidecar annotations and the manifest under `root`.
    pub fn write(&self, root: impl AsRef<Path>) -> Result<Vec<SampleRecord>, DatasetError> {
        let root = root.as_ref();
        for dir in ["source", "target"] {
            let d = root.join(dir);
            std::fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let mut records: Vec<SampleRecord> = self
            .source
            .par_iter()
            .map(|pair| {
                let rel = PathBuf::from("source").join(format!("{}.png", pair.name));
                let rel_tr = sibling_path(&rel, "translated");
                write_image(&pair.source, root.join(&rel))?;
                write_image(&pair.translated, root.join(&rel_tr))?;
                write_annotations(root.join(rel.with_extension("anno")), &pair.annotations)?;
                Ok(SampleRecord {
                    source_path: rel,
                    translated_path: Some(rel_tr),
                    blended_path: None,
                    annotations: pair.annotations.clone(),
                    domain_label: 0.0,
                    delta_at_creation: 0.0,
                    role: SampleRole::Source,
                })
            })
            .collect::<Result<_, DatasetError>>()?;
        let held = self.target.annotations.reveal();
        let targets: Vec<SampleRecord> = self
            .target
            .images
            .par_iter()
            .zip(&self.target.names)
            .zip(held)
            .map(|((image, name), annotations)| {
                let rel = PathBuf::from("target").join(format!("{name}.png"));
                write_image(image, root.join(&rel))?;
                write_annotations(root.join(rel.with_extension("anno")), annotations)?;
                Ok(SampleRecord {
                    source_path: rel,
                    translated_path: None,
                    blended_path: None,
                    annotations: Vec::new(),
                    domain_label: 1.0,
                    delta_at_creation: 1.0,
                    role: SampleRole::Target,
                })
            })
            .collect::<Result<_, DatasetError>>()?;
        records.extend(targets);
        write_manifest(root.join(MANIFEST_NAME), &records)?;
        Ok(records)
    }

    /// Loads a benchmark previously written with [`Benchmark::write`].
    /// Target annotations come from their sidecar files.
    pub fn load(root: impl AsRef<Path>, layout: SceneLayout) -> Result<Self, DatasetError> {
        let root = root.as_ref();
        layout.validate()?;
        let records = read_manifest(root.join(MANIFEST_NAME))?;
        let mut source = Vec::new();
        let mut names = Vec::new();
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for (index, r) in records.iter().enumerate() {
            let name = r
                .source_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            match r.role {
                SampleRole::Source => {
                    let translated =
                        r.translated_path
                            .as_ref()
                            .ok_or_else(|| DatasetError::InvalidRecord {
                                index,
                                message: "source record without translated_path".into(),
                            })?;
                    for a in &r.annotations {
                        check_annotation(a, layout.grid_size, layout.num_classes)?;
                    }
                    source.push(SourcePair {
                        name,
                        source: read_image(root.join(&r.source_path))?,
                        translated: read_image(root.join(translated))?,
                        annotations: r.annotations.clone(),
                    });
                }
                SampleRole::Target => {
                    let anno = read_annotations(root.join(r.source_path.with_extension("anno")))?;
                    for a in &anno {
                        check_annotation(a, layout.grid_size, layout.num_classes)?;
                    }
                    images.push(read_image(root.join(&r.source_path))?);
                    annotations.push(anno);
                    names.push(name);
                }
                _ => {}
            }
        }
        let shape = (layout.image_size, layout.image_size);
        if let Some(bad) = source
            .iter()
            .flat_map(|p| [&p.source, &p.translated])
            .chain(&images)
            .find(|img| img.dims() != shape)
        {
            return Err(DatasetError::Image(ImageError::DimensionMismatch {
                left: bad.dims(),
                right: shape,
            }));
        }
        Ok(Self {
            layout,
            source,
            target: TargetSet {
                names,
                images,
                annotations: HeldOut::new(annotations),
            },
        })
    }
}

/// Materializes fixed-`delta` blends of every source record that has a
/// translation, writing `name.blended.png` next to the source under
/// `out_root` and returning blended manifest records.
pub fn materialize_blends(
    dataset_root: &Path,
    records: &[SampleRecord],
    delta: f64,
    out_root: &Path,
) -> Result<Vec<SampleRecord>, DatasetError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(DatasetError::DeltaOutOfRange(delta));
    }
    records
        .par_iter()
        .filter(|r| r.role == SampleRole::Source)
        .filter_map(|r| r.translated_path.as_ref().map(|t| (r, t)))
        .map(|(r, translated)| {
            let source = read_image(dataset_root.join(&r.source_path))?;
            let translated_img = read_image(dataset_root.join(translated))?;
            let blended = blend_images(&source, &translated_img, delta)?;
            let rel = sibling_path(&r.source_path, "blended");
            let dest = out_root.join(&rel);
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            write_image(&blended, &dest)?;
            Ok(SampleRecord {
                source_path: relative_to(out_root, &dataset_root.join(&r.source_path)),
                translated_path: Some(relative_to(out_root, &dataset_root.join(translated))),
                blended_path: Some(rel),
                annotations: r.annotations.clone(),
                domain_label: delta,
                delta_at_creation: delta,
                role: SampleRole::Blended,
            })
        })
        .collect()
}

/// `target` expressed relative to `base` when possible, else absolute.
fn relative_to(base: &Path, target: &Path) -> PathBuf {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (base, target) = (abs(base), abs(target));
    let b: Vec<_> = base.components().collect();
    let t: Vec<_> = target.components().collect();
    let common = b.iter().zip(&t).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return target;
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config() -> BenchmarkConfig {
        BenchmarkConfig {
            source_count: 6,
            target_count: 5,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn scenes_respect_layout() {
        let layout = SceneLayout::default();
        for seed in 0..50 {
            let spec = layout.sample_scene(seed);
            spec.validate().unwrap();
            assert!((layout.min_objects..=layout.max_objects).contains(&spec.objects.len()));
            let img = spec.render().unwrap();
            assert_eq!(img.dims(), (32, 32));
        }
    }

    #[test]
    fn objects_stand_out_from_background() {
        let layout = SceneLayout::default();
        let spec = layout.sample_scene(3);
        let img = spec.render().unwrap();
        let o = &spec.objects[0];
        let cell = layout.cell_pixels() as f64;
        let cy = ((o.annotation.cell_row as f64 + 0.5) * cell + o.offset.0) as usize;
        let cx = ((o.annotation.cell_col as f64 + 0.5) * cell + o.offset.1) as usize;
        let px = img.pixel(cy, cx);
        let spread = px.iter().cloned().fold(f64::MIN, f64::max)
            - px.iter().cloned().fold(f64::MAX, f64::min);
        // background pixels are near-gray, objects are saturated
        assert!(spread > 0.3, "{px:?}");
    }

    #[test]
    fn class_colors_are_distinct() {
        let colors: Vec<_> = (0..3).map(|c| class_color(c, 3)).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let d: f64 = colors[i]
                    .iter()
                    .zip(&colors[j])
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(d > 0.5);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SceneLayout::default().sample_scene(1);
        spec.objects[0].annotation.class_id = 9;
        assert!(matches!(
            spec.validate(),
            Err(DatasetError::BadAnnotation { .. })
        ));
        let mut spec = SceneLayout::default().sample_scene(1);
        let first = spec.objects[0].clone();
        spec.objects.push(first);
        assert!(matches!(
            spec.validate(),
            Err(DatasetError::InvalidLayout(_))
        ));
        let bad = SceneLayout {
            image_size: 30,
            ..SceneLayout::default()
        };
        assert!(bad.validate().is_err());
        let bad = SceneLayout {
            num_classes: 1,
            ..SceneLayout::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_paired() {
        let cfg = small_config();
        let a = generate_benchmark(&cfg, 7).unwrap();
        let b = generate_benchmark(&cfg, 7).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target.images, b.target.images);
        assert_eq!(a.source.len(), 6);
        assert_eq!(a.target.len(), 5);
        let c = generate_benchmark(&cfg, 8).unwrap();
        assert_ne!(a.source, c.source);
        for pair in &a.source {
            let again = fog_translate(&pair.source, &cfg.translator_fog.with_seed(0));
            assert_eq!(again.unwrap().dims(), pair.translated.dims());
        }
    }

    #[test]
    fn identity_fog_translation_is_byte_identical() {
        let cfg = BenchmarkConfig {
            translator_fog: FogParams::identity(),
            ..small_config()
        };
        let bench = generate_benchmark(&cfg, 1).unwrap();
        for p in &bench.source {
            assert_eq!(p.source.to_rgb8(), p.translated.to_rgb8());
        }
    }

    #[test]
    fn retranslation_reproduces_generation() {
        let cfg = small_config();
        let original = generate_benchmark(&cfg, 4).unwrap();
        let mut copy = original.clone();
        copy.retranslate(&FogParams::identity(), 4).unwrap();
        assert!(copy.source.iter().all(|p| p.translated == p.source));
        copy.retranslate(&cfg.translator_fog, 4).unwrap();
        assert_eq!(copy.source, original.source);
    }

    #[test]
    fn pairing_contract() {
        let bench = generate_benchmark(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (b, m) = pair_for_iteration(&bench.source, &bench.target, 0.0, &mut rng).unwrap();
        assert_eq!(b.image, bench.source[b.source_index].source);
        assert_eq!(b.domain_label, 0.0);
        assert_eq!(b.annotations, bench.source[b.source_index].annotations);
        assert_eq!(m.image, bench.source[m.source_index].source);

        let (b, m) = pair_for_iteration(&bench.source, &bench.target, 1.0, &mut rng).unwrap();
        assert_eq!(b.image, bench.source[b.source_index].translated);
        assert_eq!(m.image, bench.target.images[m.target_index]);
        assert_eq!(m.target, bench.target.images[m.target_index]);
        assert_eq!((b.domain_label, m.domain_label), (1.0, 1.0));

        let (b, m) = pair_for_iteration(&bench.source, &bench.target, 0.35, &mut rng).unwrap();
        assert_eq!(b.domain_label, b.delta);
        assert_eq!(m.domain_label, 0.35);
        assert_eq!(bench.target.annotations.access_count(), 0);
    }

    #[test]
    fn pairing_is_reproducible() {
        let bench = generate_benchmark(&small_config(), 2).unwrap();
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| {
                    let (b, m) =
                        pair_for_iteration(&bench.source, &bench.target, 0.5, &mut rng).unwrap();
                    (b.source_index, m.target_index)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(seq(4), seq(4));
        assert_ne!(seq(4), seq(5));
    }

    #[test]
    fn pairing_errors() {
        let bench = generate_benchmark(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            pair_for_iteration(&[], &bench.target, 0.5, &mut rng),
            Err(DatasetError::Empty("source"))
        ));
        let empty = TargetSet {
            names: vec![],
            images: vec![],
            annotations: HeldOut::new(vec![]),
        };
        assert!(matches!(
            pair_for_iteration(&bench.source, &empty, 0.5, &mut rng),
            Err(DatasetError::Empty("target"))
        ));
        assert!(matches!(
            pair_for_iteration(&bench.source, &bench.target, 1.5, &mut rng),
            Err(DatasetError::DeltaOutOfRange(_))
        ));
    }

    #[test]
    fn written_benchmark_matches_contract_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BenchmarkConfig {
            source_count: 1,
            target_count: 1,
            layout: SceneLayout {
                min_objects: 3,
                max_objects: 3,
                ..SceneLayout::default()
            },
            ..BenchmarkConfig::default()
        };
        let bench = generate_benchmark(&cfg, 3).unwrap();
        bench.write(dir.path()).unwrap();
        assert!(dir.path().join("source/scene_00000.png").is_file());
        assert!(dir
            .path()
            .join("source/scene_00000.translated.png")
            .is_file());
        let anno = read_annotations(dir.path().join("source/scene_00000.anno")).unwrap();
        assert_eq!(anno.len(), 3);

        // stored images are 8-bit, so reloading is exact
        let loaded = Benchmark::load(dir.path(), cfg.layout).unwrap();
        assert_eq!(loaded.source, bench.source);
        assert_eq!(loaded.target.images, bench.target.images);
        assert_eq!(
            loaded.target.annotations.reveal(),
            bench.target.annotations.reveal()
        );
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let cfg = small_config();
        let write = |seed| {
            let dir = tempfile::tempdir().unwrap();
            generate_benchmark(&cfg, seed)
                .unwrap()
                .write(dir.path())
                .unwrap();
            let mut files = Vec::new();
            for sub in ["source", "target"] {
                let mut entries: Vec<_> = std::fs::read_dir(dir.path().join(sub))
                    .unwrap()
                    .map(|e| e.unwrap().path())
                    .collect();
                entries.sort();
                for p in entries {
                    files.push(std::fs::read(p).unwrap());
                }
            }
            files.push(std::fs::read(dir.path().join(MANIFEST_NAME)).unwrap());
            files
        };
        assert_eq!(write(11), write(11));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::filled(2, 2, 0.5).unwrap();
        write_image(&img, dir.path().join("a.png")).unwrap();
        write_image(&img, dir.path().join("a.blended.png")).unwrap();
        let records = vec![
            SampleRecord {
                source_path: "a.png".into(),
                translated_path: None,
                blended_path: Some("a.blended.png".into()),
                annotations: vec![Annotation {
                    cell_row: 1,
                    cell_col: 0,
                    class_id: 2,
                }],
                domain_label: 0.7,
                delta_at_creation: 0.7,
                role: SampleRole::Blended,
            },
            SampleRecord {
                source_path: "a.png".into(),
                translated_path: None,
                blended_path: None,
                annotations: vec![],
                domain_label: 0.0,
                delta_at_creation: 0.0,
                role: SampleRole::Source,
            },
        ];
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &records).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[0].domain_label, 0.7);

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"schema_version\":1}\n"));
        std::fs::write(
            &path,
            text.replacen("\"schema_version\":1", "\"schema_version\":2", 1),
        )
        .unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(DatasetError::SchemaMismatch { .. })
        ));

        std::fs::remove_file(dir.path().join("a.blended.png")).unwrap();
        write_manifest(&path, &records).unwrap();
        match read_manifest(&path) {
            Err(DatasetError::MissingFile(p)) => assert!(p.ends_with("a.blended.png")),
            other => panic!("expected missing file, got {other:?}"),
        }

        let mut bad = records[0].clone();
        bad.domain_label = 0.5;
        assert!(matches!(
            write_manifest(&path, &[bad]),
            Err(DatasetError::InvalidRecord { .. })
        ));
    }

    #[test]
    fn annotation_sidecar_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.anno");
        std::fs::write(&p, "1 2\n").unwrap();
        assert!(matches!(
            read_annotations(&p),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        std::fs::write(&p, "1 a 2\n").unwrap();
        assert!(read_annotations(&p).is_err());
    }

    #[test]
    fn materialized_blends_at_zero_are_sources() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("out");
        let bench = generate_benchmark(&small_config(), 4).unwrap();
        let records = bench.write(&data).unwrap();
        let blended = materialize_blends(&data, &records, 0.0, &out).unwrap();
        assert_eq!(blended.len(), 6);
        for r in &blended {
            let a = std::fs::read(out.join(r.blended_path.as_ref().unwrap())).unwrap();
            let b = std::fs::read(out.join(&r.source_path)).unwrap();
            assert_eq!(a, b);
        }
        write_manifest(out.join(MANIFEST_NAME), &blended).unwrap();
        assert_eq!(read_manifest(out.join(MANIFEST_NAME)).unwrap(), blended);
    }

    proptest! {
        #[test]
        fn manifest_preserves_labels(labels in proptest::collection::vec(0.0f64..=1.0, 1..8)) {
            let dir = tempfile::tempdir().unwrap();
            let img = ImageBuffer::filled(1, 1, 0.0).unwrap();
            write_image(&img, dir.path().join("s.png")).unwrap();
            let records: Vec<SampleRecord> = labels.iter().map(|&d| SampleRecord {
                source_path: "s.png".into(),
                translated_path: None,
                blended_path: None,
                annotations: vec![],
                domain_label: d,
                delta_at_creation: d,
                role: SampleRole::SourceTargetMix,
            }).collect();
            let path = dir.path().join("m.jsonl");
            write_manifest(&path, &records).unwrap();
            prop_assert_eq!(read_manifest(&path).unwrap(), records);
        }
    }
}
