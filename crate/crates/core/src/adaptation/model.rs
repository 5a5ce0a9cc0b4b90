use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AdaptationError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::SceneLayout;
use crate::imaging::{ImageBuffer, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            disc_hidden: 16,
        }
    }
}

const EMBED_W: usize = 0;
const EMBED_B: usize = 1;
const DENSE_W: usize = 2;
const DENSE_B: usize = 3;
const HEAD_W: usize = 4;
const HEAD_B: usize = 5;
pub const DETECTOR_PARAMS: usize = 6;

/// Per-cell detector: each grid cell's pixels are embedded, passed through a
/// dense backbone layer and classified into `num_classes + 1` classes, the
/// last being background.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    grid_size: usize,
    cell_pixels: usize,
    num_classes: usize,
    params: Vec<Tensor>,
}

fn he_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("positive sigma");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches data")
}

impl DetectorModel {
    pub fn new(
        layout: &SceneLayout,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<Self, AdaptationError> {
        layout.validate()?;
        if cfg.feature_dim == 0 || cfg.disc_hidden == 0 {
            return Err(AdaptationError::Config(
                "feature_dim and disc_hidden must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = layout.cell_pixels();
        let patch = cell * cell * CHANNELS;
        let f = cfg.feature_dim;
        let k = layout.num_classes + 1;
        let params = vec![
            he_init(patch, f, &mut rng),
            Tensor::zeros(1, f),
            he_init(f, f, &mut rng),
            Tensor::zeros(1, f),
            he_init(f, k, &mut rng),
            Tensor::zeros(1, k),
        ];
        Ok(Self {
            grid_size: layout.grid_size,
            cell_pixels: cell,
            num_classes: layout.num_classes,
            params,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.params[EMBED_W].cols()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(Tensor::shape).collect()
    }

    /// Indices of the parameters that produce the feature map, as opposed to
    /// the detection head.
    pub fn backbone_indices() -> std::ops::Range<usize> {
        EMBED_W..HEAD_W
    }

    /// Zeroes the detection head, which cuts every supervised gradient to
    /// the backbone.
    pub fn zero_head(&mut self) {
        for i in [HEAD_W, HEAD_B] {
            self.params[i].data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
    }

    /// One centered pixel vector per cell, cells in row-major order.
    pub fn patchify(&self, image: &ImageBuffer) -> Result<Tensor, AdaptationError> {
        let n = self.grid_size * self.cell_pixels;
        if image.dims() != (n, n) {
            return Err(AdaptationError::Config(format!(
                "model expects {n}x{n} images, got {:?}",
                image.dims()
            )));
        }
        let cp = self.cell_pixels;
        let mut data = Vec::with_capacity(self.cells() * cp * cp * CHANNELS);
        let px = image.data();
        for gr in 0..self.grid_size {
            for gc in 0..self.grid_size {
                for r in gr * cp..(gr + 1) * cp {
                    let start = (r * n + gc * cp) * CHANNELS;
                    data.extend(px[start..start + cp * CHANNELS].iter().map(|v| v - 0.5));
                }
            }
        }
        Ok(Tensor::from_vec(self.cells(), cp * cp * CHANNELS, data)?)
    }

    pub(crate) fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Feature map `(cells, feature_dim)` and logits `(cells, num_classes + 1)`.
    pub(crate) fn forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        image: &ImageBuffer,
    ) -> Result<(Var<'t>, Var<'t>), AdaptationError> {
        let x = tape.leaf(self.patchify(image)?);
        let h = x.matmul(&vars[EMBED_W])?.add_row(&vars[EMBED_B])?.relu();
        let feat = h.matmul(&vars[DENSE_W])?.add_row(&vars[DENSE_B])?.relu();
        let logits = feat.matmul(&vars[HEAD_W])?.add_row(&vars[HEAD_B])?;
        Ok((feat, logits))
    }

    /// Per-cell class probabilities, background last.
    pub fn predict(&self, image: &ImageBuffer) -> Result<Tensor, AdaptationError> {
        let tape = Tape::new();
        let vars = self.leaves(&tape);
        let (_, logits) = self.forward(&tape, &vars, image)?;
        Ok(softmax_rows(&logits.value()))
    }
}

pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.cols();
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / total));
    }
    Tensor::from_vec(logits.rows(), cols, data).expect("same shape")
}

/// Alignment granularity of a discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Space,
    Channel,
    Instance,
}

pub const LEVELS: [Level; 3] = [Level::Space, Level::Channel, Level::Instance];

impl Level {
    pub fn tag(self) -> &'static str {
        match self {
            Level::Space => "sp",
            Level::Channel => "ch",
            Level::Instance => "ins",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Pooled feature summaries fed to the three discriminators:
/// mean over cells (`1 x feature_dim`), mean over channels per cell
/// (`1 x cells`), and the foreground-weighted mean over cells
/// (`1 x feature_dim`). The foreground weights are detached.
pub(crate) fn queries<'t>(
    tape: &'t Tape,
    feat: Var<'t>,
    logits: Var<'t>,
) -> Result<[Var<'t>; 3], AdaptationError> {
    let q_sp = feat.mean_rows();
    let q_ch = feat.mean_cols().transpose();
    let probs = softmax_rows(&logits.value());
    let bg = probs.cols() - 1;
    let mut w: Vec<f64> = probs
        .data()
        .chunks(probs.cols())
        .map(|r| 1.0 - r[bg])
        .collect();
    let total: f64 = w.iter().sum();
    let cells = w.len() as f64;
    if total > 1e-12 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        w.iter_mut().for_each(|v| *v = 1.0 / cells);
    }
    let w = tape.leaf(Tensor::from_vec(1, w.len(), w)?);
    let q_ins = w.matmul(&feat)?;
    Ok([q_sp, q_ch, q_ins])
}

pub const DISC_PARAMS: usize = 4;

/// Three two-layer perceptrons mapping a query to a domain probability.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorBank {
    params: Vec<Tensor>,
}

/// Output clamp that keeps the log terms finite.
pub const DISC_CLAMP: f64 = 1e-7;

impl DiscriminatorBank {
    pub fn new(model: &DetectorModel, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.disc_hidden;
        let mut params = Vec::with_capacity(3 * DISC_PARAMS);
        for level in LEVELS {
            let input = match level {
                Level::Channel => model.cells(),
                _ => model.feature_dim(),
            };
            params.push(he_init(input, h, &mut rng));
            params.push(Tensor::zeros(1, h));
            params.push(he_init(h, 1, &mut rng));
            params.push(Tensor::zeros(1, 1));
        }
        Self { params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn level_params(&self, level: Level) -> &[Tensor] {
        let i = level.index() * DISC_PARAMS;
        &self.params[i..i + DISC_PARAMS]
    }

    pub fn level_params_mut(&mut self, level: Level) -> &mut [Tensor] {
        let i = level.index() * DISC_PARAMS;
        &mut self.params[i..i + DISC_PARAMS]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(Tensor::shape).collect()
    }

    pub(crate) fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Clamped probability that `query` comes from the target domain.
    pub(crate) fn forward<'t>(
        vars: &[Var<'t>],
        level: Level,
        query: Var<'t>,
    ) -> Result<Var<'t>, AdaptationError> {
        let v = &vars[level.index() * DISC_PARAMS..][..DISC_PARAMS];
        let h = query.matmul(&v[0])?.add_row(&v[1])?.relu();
        let out = h.matmul(&v[2])?.add_row(&v[3])?;
        Ok(out.sigmoid().clamp(DISC_CLAMP, 1.0 - DISC_CLAMP))
    }
}
