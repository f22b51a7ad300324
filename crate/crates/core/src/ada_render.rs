//! Adaptive appearance rendering.
//!
//! A reference image of a person is distilled by a small fully-convolutional
//! network into a bank of convolution filters. A posemap encoder-decoder
//! turns a binary joint map into an RGB frame, and the bank is injected as
//! an extra stride-1 convolution between encoder and decoder, so the same
//! pose machinery renders any appearance. Training is a conditional GAN
//! (two generator updates, then one discriminator update per iteration)
//! plus a pixel / content / style loss stack.

use crate::ad::{Tape, Var};
use crate::nn::{Adam, Conv2dLayer, ConvT2dLayer, InstanceNorm, Linear, ParamStore};
use crate::pose_data::{
    load_posemap_png, rasterize_posemap, save_posemap_png, synth_scene, DataError, Pose,
    PosemapImage, SynthConfig,
};
use image::RgbImage;
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("unknown architecture variant `{name}` (expected 8-5-10, 8-3-56, 8-3-10 or 5-5-10)")]
    UnknownVariant { name: String },
    #[error("bad render architecture: {0}")]
    BadArch(String),
    #[error("expected a square {expected}x{expected} image, got {got_h}x{got_w}")]
    BadResolution { expected: usize, got_h: usize, got_w: usize },
    #[error("filter bank shaped {got:?} does not match the expected {expected:?}")]
    BankShape { expected: [usize; 4], got: Vec<usize> },
    #[error("{what} shaped {got:?}, expected {expected:?}")]
    ImageShape { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("bad loss weights: {0}")]
    BadWeights(String),
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("feature layer {layer} out of range (extractor has {blocks} blocks)")]
    BadFeatureLayer { layer: usize, blocks: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("style calibration degenerate: mean style loss is {0}; set gamma manually")]
    DegenerateCalibration(f64),
    #[error("non-finite {what} at iteration {iteration}; aborting")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("image file {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("triple index {path} line {line}: {msg}")]
    Index { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

// ---- architecture ----

/// The four supported (encoder-decoder depth, filter-network depth,
/// filter count) combinations.
const VALID_VARIANTS: [(usize, usize, usize); 4] =
    [(8, 5, 10), (8, 3, 56), (8, 3, 10), (5, 5, 10)];

/// Geometry of the rendering network. The named variants fix the layer
/// counts and filter count; `resolution` and `c_base` scale the whole model
/// between desk size (64x64, the default) and full size (256x256).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderArch {
    /// Stride-2 convolution count in the encoder (and mirrored decoder): 8 or 5.
    pub ed_layers: usize,
    /// Convolution count in the filter-producing network: 3 or 5.
    pub fcn_layers: usize,
    /// Number of injected filters (decoder input channels): 10 or 56.
    pub n_filters: usize,
    /// Square kernel size everywhere.
    pub kernel: usize,
    /// Input/output image side; must be divisible by 2^ed_layers.
    pub resolution: usize,
    /// Channel width of the first encoder layer; later layers scale off it.
    pub c_base: usize,
}

impl Default for RenderArch {
    fn default() -> Self {
        RenderArch::named("5-5-10").expect("default variant")
    }
}

impl fmt::Display for RenderArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.ed_layers, self.fcn_layers, self.n_filters)
    }
}

impl RenderArch {
    /// Look up a named variant: `8-5-10`, `8-3-56`, `8-3-10` or `5-5-10`.
    /// The 8-layer variants default to 256x256, the 5-layer one to 64x64.
    pub fn named(name: &str) -> Result<Self, RenderError> {
        let parts: Vec<usize> = name.split('-').filter_map(|p| p.parse().ok()).collect();
        let tuple = match parts.as_slice() {
            [a, b, c] => (*a, *b, *c),
            _ => return Err(RenderError::UnknownVariant { name: name.into() }),
        };
        if !VALID_VARIANTS.contains(&tuple) {
            return Err(RenderError::UnknownVariant { name: name.into() });
        }
        let (ed_layers, fcn_layers, n_filters) = tuple;
        Ok(RenderArch {
            ed_layers,
            fcn_layers,
            n_filters,
            kernel: 5,
            resolution: if ed_layers == 8 { 256 } else { 64 },
            c_base: 8,
        })
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let tuple = (self.ed_layers, self.fcn_layers, self.n_filters);
        if !VALID_VARIANTS.contains(&tuple) {
            return Err(RenderError::BadArch(format!(
                "layer/filter combination {}-{}-{} is not a supported variant",
                tuple.0, tuple.1, tuple.2
            )));
        }
        if self.kernel != 5 {
            return Err(RenderError::BadArch(format!("kernel must be 5, got {}", self.kernel)));
        }
        if self.c_base == 0 {
            return Err(RenderError::BadArch("c_base must be positive".into()));
        }
        let down = 1usize << self.ed_layers;
        if self.resolution % down != 0 || self.resolution / down == 0 {
            return Err(RenderError::BadArch(format!(
                "resolution {} is not a positive multiple of 2^{}",
                self.resolution, self.ed_layers
            )));
        }
        if self.resolution >> self.fcn_layers == 0 {
            return Err(RenderError::BadArch(format!(
                "resolution {} too small for a {}-layer filter network",
                self.resolution, self.fcn_layers
            )));
        }
        Ok(())
    }

    /// Encoder output side after `ed_layers` halvings.
    pub fn bottleneck(&self) -> usize {
        self.resolution >> self.ed_layers
    }

    /// Output channels of each encoder layer: c_base, 2*c_base, then 4*c_base.
    pub fn enc_channels(&self) -> Vec<usize> {
        (0..self.ed_layers).map(|i| self.c_base << i.min(2)).collect()
    }

    /// Encoder output channel count (what the filter bank convolves).
    pub fn c_enc(&self) -> usize {
        *self.enc_channels().last().expect("at least one encoder layer")
    }

    /// Output channels of each filter-network layer.
    pub fn fcn_channels(&self) -> Vec<usize> {
        (0..self.fcn_layers).map(|i| self.c_base << i.min(2)).collect()
    }

    /// Shape of the injected filter bank.
    pub fn bank_shape(&self) -> [usize; 4] {
        [self.n_filters, self.c_enc(), self.kernel, self.kernel]
    }
}

// ---- filter bank ----

/// Convolution weights distilled from one reference image, shaped
/// `(n_filters, c_enc, kernel, kernel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub weights: Array4<f64>,
}

impl FilterBank {
    pub fn zeros(arch: &RenderArch) -> Self {
        let [n, c, k, _] = arch.bank_shape();
        FilterBank { weights: Array4::zeros((n, c, k, k)) }
    }

    pub fn shape(&self) -> [usize; 4] {
        let d = self.weights.dim();
        [d.0, d.1, d.2, d.3]
    }

    pub fn validate(&self, arch: &RenderArch) -> Result<(), RenderError> {
        if self.shape() != arch.bank_shape() {
            return Err(RenderError::BankShape {
                expected: arch.bank_shape(),
                got: self.shape().to_vec(),
            });
        }
        if !self.weights.iter().all(|v| v.is_finite()) {
            return Err(RenderError::BadArch("filter bank contains non-finite values".into()));
        }
        Ok(())
    }
}

// ---- fixed perceptual feature extractor ----

/// Number of convolution blocks in the feature extractor; block activations
/// are what the content and style losses compare.
pub const FEATURE_BLOCKS: usize = 5;

const FEATURE_CHANNELS: [usize; FEATURE_BLOCKS] = [8, 12, 16, 20, 24];

/// A frozen five-block convolutional feature extractor. Each block is a 3x3
/// stride-1 convolution plus ReLU; blocks are separated by 2x2 average
/// pooling (skipped once the map reaches 1x1). Weights are fixed at
/// construction — seeded pseudo-random by default, or loaded from a file —
/// and are never trained.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub channels: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl FeatureExtractor {
    /// Deterministically seeded random extractor (the desk-scale default).
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for &cout in &FEATURE_CHANNELS {
            let w = crate::nn::xavier(&mut rng, &[cout, cin, 3, 3], cin * 9, cout * 9);
            weights.push(w.iter().cloned().collect());
            biases.push(vec![0.0; cout]);
            cin = cout;
        }
        FeatureExtractor { channels: FEATURE_CHANNELS.to_vec(), weights, biases }
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    /// Declared activation shape of `block` for a square input of the given
    /// side: the side halves after each earlier block until it reaches 1.
    pub fn feature_shape(&self, block: usize, resolution: usize) -> (usize, usize, usize) {
        let mut side = resolution;
        for _ in 0..block {
            if side % 2 == 0 && side >= 2 {
                side /= 2;
            }
        }
        (self.channels[block], side, side)
    }

    /// Activations of the requested blocks (0-based, in the given order) for
    /// a `(3, R, R)` image node.
    pub fn features(&self, t: &Tape, image: Var, layers: &[usize]) -> Result<Vec<Var>, RenderError> {
        for &l in layers {
            if l >= self.blocks() {
                return Err(RenderError::BadFeatureLayer { layer: l, blocks: self.blocks() });
            }
        }
        let mut acts = Vec::with_capacity(self.blocks());
        let mut x = image;
        let mut cin = 3;
        for (b, &cout) in self.channels.iter().enumerate() {
            let w = t.leaf(
                ArrayD::from_shape_vec(IxDyn(&[cout, cin, 3, 3]), self.weights[b].clone())
                    .expect("extractor weight shape"),
            );
            let bias = t.leaf(
                ArrayD::from_shape_vec(IxDyn(&[cout]), self.biases[b].clone())
                    .expect("extractor bias shape"),
            );
            let conv = t.add_chan_bias(t.conv2d(x, w, 1, 1), bias);
            let act = t.relu(conv);
            acts.push(act);
            let side = t.shape(act)[1];
            x = if side % 2 == 0 && side >= 2 { t.avg_pool2(act) } else { act };
            cin = cout;
        }
        Ok(layers.iter().map(|&l| acts[l]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), RenderError> {
        let json = serde_json::to_string(self).expect("extractor serializes");
        fs::write(path, json).map_err(|e| RenderError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let text = fs::read_to_string(path).map_err(|e| RenderError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let fx: FeatureExtractor = serde_json::from_str(&text).map_err(|e| RenderError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if fx.channels.is_empty()
            || fx.weights.len() != fx.channels.len()
            || fx.biases.len() != fx.channels.len()
        {
            return Err(RenderError::Image {
                path: path.to_path_buf(),
                msg: "inconsistent extractor block counts".into(),
            });
        }
        let mut cin = 3;
        for (b, &cout) in fx.channels.iter().enumerate() {
            if fx.weights[b].len() != cout * cin * 9 || fx.biases[b].len() != cout {
                return Err(RenderError::Image {
                    path: path.to_path_buf(),
                    msg: format!("block {b} weight sizes do not match channels"),
                });
            }
            cin = cout;
        }
        Ok(fx)
    }
}

// ---- loss weights ----

/// Weights of the pixel / content / style terms. `gamma` is normally set by
/// [`calibrate_gamma`] so the style term lands on the content term's scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderLossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Extractor blocks compared pointwise between generated and goal images.
    pub content_layers: Vec<usize>,
    /// Extractor blocks whose Gram matrices are compared between generated
    /// and reference images.
    pub style_layers: Vec<usize>,
}

impl Default for RenderLossWeights {
    fn default() -> Self {
        RenderLossWeights {
            alpha: 5.0,
            beta: 0.1,
            gamma: 1.0,
            content_layers: vec![3],
            style_layers: vec![0, 1, 2, 3, 4],
        }
    }
}

impl RenderLossWeights {
    pub fn validate(&self) -> Result<(), RenderError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(RenderError::BadWeights(format!("{name} = {v} must be >= 0")));
            }
        }
        for &l in self.content_layers.iter().chain(&self.style_layers) {
            if l >= FEATURE_BLOCKS {
                return Err(RenderError::BadWeights(format!(
                    "feature layer {l} out of range 0..{FEATURE_BLOCKS}"
                )));
            }
        }
        Ok(())
    }
}

// ---- transfer loss ----

/// Evaluated loss terms. `pixel`, `content` and `style` are raw
/// (unweighted); `total = alpha*pixel + beta*content + gamma*style`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferParts {
    pub total: f64,
    pub pixel: f64,
    pub content: f64,
    pub style: f64,
}

/// Tape nodes of the loss terms; same layout as [`TransferParts`].
#[derive(Clone, Copy, Debug)]
pub struct TransferGraph {
    pub total: Var,
    pub pixel: Var,
    pub content: Var,
    pub style: Var,
}

fn check_image_shape(
    t: &Tape,
    what: &'static str,
    v: Var,
    expected: &[usize],
) -> Result<(), RenderError> {
    let got = t.shape(v);
    if got != expected {
        return Err(RenderError::ImageShape { what, expected: expected.to_vec(), got });
    }
    Ok(())
}

/// Gram matrix of a `(C, H, W)` feature map: inner products between channel
/// responses over all spatial positions, shaped `(C, C)`.
fn gram(t: &Tape, feat: Var) -> Var {
    let sh = t.shape(feat);
    let m = t.reshape(feat, &[sh[0], sh[1] * sh[2]]);
    t.matmul_bt(m, m)
}

/// Appearance transfer loss on tape nodes:
/// `alpha*||gen-goal||^2 + beta*sum_l ||F_l(gen)-F_l(goal)||^2 +
///  gamma*sum_l ||Gram_l(gen)-Gram_l(reference)||^2`.
///
/// Terms with a zero weight (or an empty layer list) are skipped and
/// reported as exactly zero.
pub fn transfer_loss_graph(
    t: &Tape,
    gen: Var,
    goal: Var,
    reference: Var,
    weights: &RenderLossWeights,
    fx: &FeatureExtractor,
) -> Result<TransferGraph, RenderError> {
    weights.validate()?;
    let shape = t.shape(gen);
    if shape.len() != 3 || shape[0] != 3 {
        return Err(RenderError::ImageShape {
            what: "generated image",
            expected: vec![3, shape.get(1).copied().unwrap_or(0), shape.get(2).copied().unwrap_or(0)],
            got: shape,
        });
    }
    check_image_shape(t, "goal image", goal, &shape)?;
    check_image_shape(t, "reference image", reference, &shape)?;

    let pixel = t.sq_diff_sum(gen, goal);

    let content = if weights.beta > 0.0 && !weights.content_layers.is_empty() {
        let gen_f = fx.features(t, gen, &weights.content_layers)?;
        let goal_f = fx.features(t, goal, &weights.content_layers)?;
        let terms: Vec<Var> =
            gen_f.iter().zip(&goal_f).map(|(&a, &b)| t.sq_diff_sum(a, b)).collect();
        t.add_n(&terms)
    } else {
        t.scalar_leaf(0.0)
    };

    let style = if weights.gamma > 0.0 && !weights.style_layers.is_empty() {
        let gen_f = fx.features(t, gen, &weights.style_layers)?;
        let ref_f = fx.features(t, reference, &weights.style_layers)?;
        let terms: Vec<Var> = gen_f
            .iter()
            .zip(&ref_f)
            .map(|(&a, &b)| t.sq_diff_sum(gram(t, a), gram(t, b)))
            .collect();
        t.add_n(&terms)
    } else {
        t.scalar_leaf(0.0)
    };

    let weighted = t.add(
        t.add(t.scale(pixel, weights.alpha), t.scale(content, weights.beta)),
        t.scale(style, weights.gamma),
    );
    Ok(TransferGraph { total: weighted, pixel, content, style })
}

/// [`transfer_loss_graph`] on plain arrays; builds its own scratch tape.
pub fn transfer_loss(
    gen: &Array3<f64>,
    goal: &Array3<f64>,
    reference: &Array3<f64>,
    weights: &RenderLossWeights,
    fx: &FeatureExtractor,
) -> Result<TransferParts, RenderError> {
    let t = Tape::new();
    let g = t.leaf(gen.clone().into_dyn());
    let go = t.leaf(goal.clone().into_dyn());
    let rf = t.leaf(reference.clone().into_dyn());
    let graph = transfer_loss_graph(&t, g, go, rf, weights, fx)?;
    Ok(TransferParts {
        total: t.scalar(graph.total),
        pixel: t.scalar(graph.pixel),
        content: t.scalar(graph.content),
        style: t.scalar(graph.style),
    })
}

// ---- rendering model ----

/// Generator: posemap encoder, reference-to-filter-bank network, and decoder.
pub struct RenderModel {
    pub arch: RenderArch,
    pub store: ParamStore,
    enc: Vec<Conv2dLayer>,
    enc_norm: Vec<Option<InstanceNorm>>,
    fcn: Vec<Conv2dLayer>,
    fcn_norm: Vec<Option<InstanceNorm>>,
    fcn_head: Linear,
    dec: Vec<ConvT2dLayer>,
    dec_norm: Vec<Option<InstanceNorm>>,
}

impl RenderModel {
    pub fn new(arch: RenderArch, seed: u64) -> Result<Self, RenderError> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.kernel;
        let pad = k / 2;

        let mut enc = Vec::new();
        let mut enc_norm = Vec::new();
        let mut cin = 1;
        for (i, cout) in arch.enc_channels().into_iter().enumerate() {
            enc.push(Conv2dLayer::new(&mut store, &mut rng, &format!("enc{i}"), cin, cout, k, 2, pad));
            enc_norm.push(
                (i > 0).then(|| InstanceNorm::new(&mut store, &format!("enc{i}.norm"), cout)),
            );
            cin = cout;
        }

        let mut fcn = Vec::new();
        let mut fcn_norm = Vec::new();
        let mut cin = 3;
        for (i, cout) in arch.fcn_channels().into_iter().enumerate() {
            fcn.push(Conv2dLayer::new(&mut store, &mut rng, &format!("fcn{i}"), cin, cout, k, 2, pad));
            fcn_norm.push(
                (i > 0).then(|| InstanceNorm::new(&mut store, &format!("fcn{i}.norm"), cout)),
            );
            cin = cout;
        }
        let [n, c, _, _] = arch.bank_shape();
        let fcn_head = Linear::new(&mut store, &mut rng, "fcn_head", cin, n * c * k * k, true);

        // Decoder mirrors the encoder, but its first layer reads the
        // injected-filter output channels.
        let rev: Vec<usize> = arch.enc_channels().into_iter().rev().skip(1).collect();
        let mut dec = Vec::new();
        let mut dec_norm = Vec::new();
        let mut cin = arch.n_filters;
        for (i, cout) in rev.iter().copied().chain([3]).enumerate() {
            dec.push(ConvT2dLayer::new(
                &mut store,
                &mut rng,
                &format!("dec{i}"),
                cin,
                cout,
                k,
                2,
                pad,
                1,
            ));
            let is_last = i == arch.ed_layers - 1;
            dec_norm.push(
                (!is_last).then(|| InstanceNorm::new(&mut store, &format!("dec{i}.norm"), cout)),
            );
            cin = cout;
        }

        Ok(RenderModel { arch, store, enc, enc_norm, fcn, fcn_norm, fcn_head, dec, dec_norm })
    }

    /// Posemap -> bottleneck feature map `(c_enc, b, b)`.
    fn encode(&self, t: &Tape, vars: &[Var], posemap: Var) -> Var {
        let mut x = posemap;
        for (layer, norm) in self.enc.iter().zip(&self.enc_norm) {
            x = layer.apply(t, vars, x);
            if let Some(n) = norm {
                x = n.apply(t, vars, x);
            }
            x = t.leaky_relu(x, 0.2);
        }
        x
    }

    /// Reference image -> filter bank `(n_filters, c_enc, k, k)`.
    fn filters_graph(&self, t: &Tape, vars: &[Var], reference: Var) -> Var {
        let mut x = reference;
        for (layer, norm) in self.fcn.iter().zip(&self.fcn_norm) {
            x = layer.apply(t, vars, x);
            if let Some(n) = norm {
                x = n.apply(t, vars, x);
            }
            x = t.leaky_relu(x, 0.2);
        }
        let pooled = spatial_mean(t, x);
        let flat = self.fcn_head.apply(t, vars, pooled);
        let [n, c, k, _] = self.arch.bank_shape();
        t.reshape(flat, &[n, c, k, k])
    }

    /// Injected-filter output -> RGB image in [0, 1].
    fn decode(&self, t: &Tape, vars: &[Var], fbar: Var) -> Var {
        let mut x = fbar;
        let last = self.dec.len() - 1;
        for (i, layer) in self.dec.iter().enumerate() {
            x = layer.apply(t, vars, x);
            if i < last {
                if let Some(n) = &self.dec_norm[i] {
                    x = n.apply(t, vars, x);
                }
                x = t.relu(x);
            } else {
                x = t.sigmoid(x);
            }
        }
        x
    }

    /// Full differentiable pipeline: `(generated image, filter bank)`.
    fn generate_graph(&self, t: &Tape, vars: &[Var], posemap: Var, reference: Var) -> (Var, Var) {
        let bank = self.filters_graph(t, vars, reference);
        let f = self.encode(t, vars, posemap);
        let fbar = t.conv2d(f, bank, 1, self.arch.kernel / 2);
        (self.decode(t, vars, fbar), bank)
    }

    fn check_reference(&self, reference: &Array3<f64>) -> Result<(), RenderError> {
        let (c, h, w) = reference.dim();
        if c != 3 || h != self.arch.resolution || w != self.arch.resolution {
            return Err(RenderError::BadResolution {
                expected: self.arch.resolution,
                got_h: h,
                got_w: w,
            });
        }
        Ok(())
    }

    /// Distill one reference image into a filter bank.
    pub fn compute_filters(&self, reference: &Array3<f64>) -> Result<FilterBank, RenderError> {
        self.check_reference(reference)?;
        let t = Tape::new();
        let vars = self.store.bind(&t);
        let rf = t.leaf(reference.clone().into_dyn());
        let bank = self.filters_graph(&t, &vars, rf);
        let weights = t
            .value(bank)
            .into_dimensionality::<ndarray::Ix4>()
            .expect("bank is 4-d");
        Ok(FilterBank { weights })
    }

    /// Render one posemap with a precomputed filter bank. Pure and
    /// deterministic: same inputs and parameters give the same image.
    pub fn render(&self, posemap: &PosemapImage, bank: &FilterBank) -> Result<Array3<f64>, RenderError> {
        if posemap.h != self.arch.resolution || posemap.w != self.arch.resolution {
            return Err(RenderError::BadResolution {
                expected: self.arch.resolution,
                got_h: posemap.h,
                got_w: posemap.w,
            });
        }
        bank.validate(&self.arch)?;
        let t = Tape::new();
        let vars = self.store.bind(&t);
        let pm = t.leaf(posemap.to_tensor().into_dyn());
        let f = self.encode(&t, &vars, pm);
        let bank_leaf = t.leaf(bank.weights.clone().into_dyn());
        let fbar = t.conv2d(f, bank_leaf, 1, self.arch.kernel / 2);
        let img = self.decode(&t, &vars, fbar);
        Ok(t.value(img).into_dimensionality::<ndarray::Ix3>().expect("image is 3-d"))
    }

    /// Render a whole posemap sequence from one reference image: the filter
    /// bank is computed once and reused for every frame.
    pub fn render_sequence(
        &self,
        posemaps: &[PosemapImage],
        reference: &Array3<f64>,
    ) -> Result<Vec<Array3<f64>>, RenderError> {
        let bank = self.compute_filters(reference)?;
        posemaps.iter().map(|pm| self.render(pm, &bank)).collect()
    }
}

/// Per-channel spatial mean of a `(C, H, W)` node -> `(C,)`.
fn spatial_mean(t: &Tape, x: Var) -> Var {
    let sh = t.shape(x);
    let (c, s) = (sh[0], sh[1] * sh[2]);
    let m = t.reshape(x, &[c, s]);
    let ones = t.leaf(ArrayD::from_elem(IxDyn(&[s]), 1.0 / s as f64));
    t.matvec(m, ones)
}

/// Stride-1, same-padding convolution of a feature map with a filter bank —
/// the exact operation [`RenderModel::render`] injects between encoder and
/// decoder, exposed for oracle checks against a naive nested-loop version.
pub fn injected_features(f: &Array3<f64>, bank: &FilterBank) -> Array3<f64> {
    let t = Tape::new();
    let fv = t.leaf(f.clone().into_dyn());
    let bv = t.leaf(bank.weights.clone().into_dyn());
    let k = bank.weights.dim().2;
    let out = t.conv2d(fv, bv, 1, k / 2);
    t.value(out).into_dimensionality::<ndarray::Ix3>().expect("conv output is 3-d")
}

// ---- discriminator ----

/// Patch discriminator over (posemap, image) pairs: three stride-2
/// convolutions then a stride-1 projection to one logit channel per patch.
pub struct Discriminator {
    pub store: ParamStore,
    layers: Vec<Conv2dLayer>,
    norms: Vec<Option<InstanceNorm>>,
    head: Conv2dLayer,
}

impl Discriminator {
    pub fn new(arch: &RenderArch, seed: u64) -> Result<Self, RenderError> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.kernel;
        let pad = k / 2;
        let channels = [arch.c_base * 2, arch.c_base * 4, arch.c_base * 4];
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 4;
        for (i, cout) in channels.into_iter().enumerate() {
            layers.push(Conv2dLayer::new(&mut store, &mut rng, &format!("d{i}"), cin, cout, k, 2, pad));
            norms.push((i > 0).then(|| InstanceNorm::new(&mut store, &format!("d{i}.norm"), cout)));
            cin = cout;
        }
        let head = Conv2dLayer::new(&mut store, &mut rng, "d_head", cin, 1, k, 1, pad);
        Ok(Discriminator { store, layers, norms, head })
    }

    /// Patch logits for a (posemap, image) pair.
    pub fn logits(&self, t: &Tape, vars: &[Var], posemap: Var, image: Var) -> Var {
        let mut x = t.concat_c(&[posemap, image]);
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            x = layer.apply(t, vars, x);
            if let Some(n) = norm {
                x = n.apply(t, vars, x);
            }
            x = t.leaky_relu(x, 0.2);
        }
        self.head.apply(t, vars, x)
    }
}

// ---- training ----

/// One (posemap, reference image, goal image) training example.
#[derive(Clone, Debug)]
pub struct RenderTriple {
    pub posemap: PosemapImage,
    pub reference: Array3<f64>,
    pub goal: Array3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderTrainConfig {
    pub lr: f64,
    /// Weight of the adversarial term in the generator loss; 0 turns
    /// training into plain supervised transfer-loss descent.
    pub adv_weight: f64,
    pub iters: usize,
    pub seed: u64,
    pub weights: RenderLossWeights,
    /// Run the style-weight calibration pass before training.
    pub calibrate: bool,
    /// Upper bound on triples used by the calibration pass.
    pub calibration_triples: usize,
}

impl Default for RenderTrainConfig {
    fn default() -> Self {
        RenderTrainConfig {
            lr: 1e-3,
            adv_weight: 1.0,
            iters: 200,
            seed: 0,
            weights: RenderLossWeights::default(),
            calibrate: true,
            calibration_triples: 32,
        }
    }
}

impl RenderTrainConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(RenderError::BadConfig(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.adv_weight >= 0.0) || !self.adv_weight.is_finite() {
            return Err(RenderError::BadConfig(format!(
                "adv_weight = {} must be >= 0",
                self.adv_weight
            )));
        }
        if self.calibrate && self.calibration_triples == 0 {
            return Err(RenderError::BadConfig("calibration_triples must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Which network an optimizer step touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateKind {
    Generator,
    Discriminator,
}

impl fmt::Display for UpdateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateKind::Generator => "G",
            UpdateKind::Discriminator => "D",
        })
    }
}

/// Per-iteration loss record. Generator entries are means over the
/// iteration's two generator steps.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RenderLossRow {
    pub iteration: usize,
    pub gen_total: f64,
    pub gen_adv: f64,
    pub transfer_total: f64,
    pub pixel: f64,
    pub content: f64,
    pub style: f64,
    pub disc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenderTrainReport {
    /// Every optimizer step, in execution order (G, G, D per iteration).
    pub updates: Vec<UpdateKind>,
    pub losses: Vec<RenderLossRow>,
    /// Style weight actually used (after calibration, if enabled).
    pub gamma: f64,
    /// Iteration at which the discriminator-collapse warning fired, if any.
    pub collapse_warning_at: Option<usize>,
}

/// Flags a discriminator whose loss sits at zero for many consecutive
/// iterations — the generator can no longer receive a useful signal.
const D_COLLAPSE_EPS: f64 = 1e-9;
const D_COLLAPSE_RUN: usize = 100;

#[derive(Default)]
struct CollapseMonitor {
    consecutive: usize,
    flagged_at: Option<usize>,
}

impl CollapseMonitor {
    fn observe(&mut self, iteration: usize, d_loss: f64) {
        if d_loss.abs() <= D_COLLAPSE_EPS {
            self.consecutive += 1;
            if self.consecutive >= D_COLLAPSE_RUN && self.flagged_at.is_none() {
                self.flagged_at = Some(iteration);
            }
        } else {
            self.consecutive = 0;
        }
    }
}

fn check_triple(arch: &RenderArch, tr: &RenderTriple) -> Result<(), RenderError> {
    let r = arch.resolution;
    if tr.posemap.h != r || tr.posemap.w != r {
        return Err(RenderError::BadResolution { expected: r, got_h: tr.posemap.h, got_w: tr.posemap.w });
    }
    for (what, img) in [("reference image", &tr.reference), ("goal image", &tr.goal)] {
        let (c, h, w) = img.dim();
        if (c, h, w) != (3, r, r) {
            return Err(RenderError::ImageShape {
                what,
                expected: vec![3, r, r],
                got: vec![c, h, w],
            });
        }
    }
    Ok(())
}

/// One pass over up to `limit` triples with the current (typically fresh)
/// generator, returning the style weight that puts the mean weighted style
/// term on the mean weighted content term's scale:
/// `gamma = beta * mean(content) / mean(style)`.
pub fn calibrate_gamma(
    model: &RenderModel,
    triples: &[RenderTriple],
    weights: &RenderLossWeights,
    fx: &FeatureExtractor,
    limit: usize,
) -> Result<f64, RenderError> {
    if triples.is_empty() {
        return Err(RenderError::EmptyDataset);
    }
    // Raw content/style terms are needed even when beta is 0.
    let probe = RenderLossWeights { beta: 1.0, gamma: 1.0, ..weights.clone() };
    let mut content_sum = 0.0;
    let mut style_sum = 0.0;
    let n = triples.len().min(limit.max(1));
    for tr in &triples[..n] {
        check_triple(&model.arch, tr)?;
        let bank = model.compute_filters(&tr.reference)?;
        let img = model.render(&tr.posemap, &bank)?;
        let parts = transfer_loss(&img, &tr.goal, &tr.reference, &probe, fx)?;
        content_sum += parts.content;
        style_sum += parts.style;
    }
    let (mean_c, mean_s) = (content_sum / n as f64, style_sum / n as f64);
    if !(mean_s > 0.0) || !mean_c.is_finite() {
        return Err(RenderError::DegenerateCalibration(mean_s));
    }
    Ok(weights.beta * mean_c / mean_s)
}

/// Adversarial training of the rendering network.
///
/// Per iteration: two generator updates (adversarial term plus transfer
/// loss), then one discriminator update on a (real, generated) pair. The
/// executed update sequence is recorded in the report. Deterministic for a
/// fixed seed.
pub fn gan_train(
    gen: &mut RenderModel,
    disc: &mut Discriminator,
    triples: &[RenderTriple],
    fx: &FeatureExtractor,
    cfg: &RenderTrainConfig,
) -> Result<RenderTrainReport, RenderError> {
    let mut g_opt = Adam::new(&gen.store, cfg.lr);
    let mut d_opt = Adam::new(&disc.store, cfg.lr);
    gan_train_resumable(gen, disc, triples, fx, cfg, &mut g_opt, &mut d_opt, 0)
}

/// Run `cfg.iters` iterations starting at `start_iter` with existing
/// optimizers. Triple sampling depends only on `(seed, iteration)`, so a
/// run interrupted at an iteration boundary and resumed with the saved
/// optimizer states reproduces the uninterrupted run exactly.
#[allow(clippy::too_many_arguments)]
pub fn gan_train_resumable(
    gen: &mut RenderModel,
    disc: &mut Discriminator,
    triples: &[RenderTriple],
    fx: &FeatureExtractor,
    cfg: &RenderTrainConfig,
    g_opt: &mut Adam,
    d_opt: &mut Adam,
    start_iter: usize,
) -> Result<RenderTrainReport, RenderError> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(RenderError::EmptyDataset);
    }
    for tr in triples {
        check_triple(&gen.arch, tr)?;
    }

    let mut weights = cfg.weights.clone();
    if cfg.calibrate && weights.gamma > 0.0 && !weights.style_layers.is_empty() {
        weights.gamma = calibrate_gamma(gen, triples, &weights, fx, cfg.calibration_triples)?;
    }

    let mut updates = Vec::with_capacity(cfg.iters * 3);
    let mut losses = Vec::with_capacity(cfg.iters);
    let mut monitor = CollapseMonitor::default();

    for iteration in start_iter..start_iter + cfg.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iteration as u64);
        let mut g_total = 0.0;
        let mut g_adv = 0.0;
        let mut g_parts = [0.0f64; 3];

        for _ in 0..2 {
            let tr = &triples[rng.random_range(0..triples.len())];
            let t = Tape::new();
            let gvars = gen.store.bind(&t);
            let pm = t.leaf(tr.posemap.to_tensor().into_dyn());
            let rf = t.leaf(tr.reference.clone().into_dyn());
            let gl = t.leaf(tr.goal.clone().into_dyn());
            let (img, _) = gen.generate_graph(&t, &gvars, pm, rf);
            let transfer = transfer_loss_graph(&t, img, gl, rf, &weights, fx)?;
            let loss = if cfg.adv_weight > 0.0 {
                let dvars = disc.store.bind(&t);
                let adv = t.bce_with_logits_mean(disc.logits(&t, &dvars, pm, img), 1.0);
                g_adv += t.scalar(adv);
                t.add(transfer.total, t.scale(adv, cfg.adv_weight))
            } else {
                transfer.total
            };
            let lv = t.scalar(loss);
            if !lv.is_finite() {
                return Err(RenderError::NonFinite { what: "generator loss", iteration });
            }
            g_total += lv;
            g_parts[0] += t.scalar(transfer.pixel);
            g_parts[1] += t.scalar(transfer.content);
            g_parts[2] += t.scalar(transfer.style);
            let grads = t.backward(loss);
            let gg = gen.store.collect_grads(&grads, &gvars);
            g_opt.step(&mut gen.store, &gg);
            updates.push(UpdateKind::Generator);
        }

        let tr = &triples[rng.random_range(0..triples.len())];
        let t = Tape::new();
        let gvars = gen.store.bind(&t);
        let dvars = disc.store.bind(&t);
        let pm = t.leaf(tr.posemap.to_tensor().into_dyn());
        let rf = t.leaf(tr.reference.clone().into_dyn());
        let gl = t.leaf(tr.goal.clone().into_dyn());
        let (img, _) = gen.generate_graph(&t, &gvars, pm, rf);
        let fake = t.detach(img);
        let d_real = t.bce_with_logits_mean(disc.logits(&t, &dvars, pm, gl), 1.0);
        let d_fake = t.bce_with_logits_mean(disc.logits(&t, &dvars, pm, fake), 0.0);
        let d_loss = t.add(d_real, d_fake);
        let dv = t.scalar(d_loss);
        if !dv.is_finite() {
            return Err(RenderError::NonFinite { what: "discriminator loss", iteration });
        }
        let grads = t.backward(d_loss);
        let dg = disc.store.collect_grads(&grads, &dvars);
        d_opt.step(&mut disc.store, &dg);
        updates.push(UpdateKind::Discriminator);
        monitor.observe(iteration, dv);

        let w = &weights;
        losses.push(RenderLossRow {
            iteration,
            gen_total: g_total / 2.0,
            gen_adv: g_adv / 2.0,
            transfer_total: (w.alpha * g_parts[0] + w.beta * g_parts[1] + w.gamma * g_parts[2])
                / 2.0,
            pixel: g_parts[0] / 2.0,
            content: g_parts[1] / 2.0,
            style: g_parts[2] / 2.0,
            disc: dv,
        });
    }

    Ok(RenderTrainReport {
        updates,
        losses,
        gamma: weights.gamma,
        collapse_warning_at: monitor.flagged_at,
    })
}

/// Loss curve in CSV form.
pub fn render_loss_csv(rows: &[RenderLossRow]) -> String {
    let mut out = String::from("iteration,gen_total,gen_adv,transfer_total,pixel,content,style,disc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration, r.gen_total, r.gen_adv, r.transfer_total, r.pixel, r.content, r.style,
            r.disc
        ));
    }
    out
}

// ---- synthetic triples ----

/// Limb segments of the default 14-joint skeleton, as joint index pairs.
const LIMBS_14: [(usize, usize); 14] = [
    (0, 1),
    (1, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
    (5, 7),
    (1, 8),
    (1, 9),
    (8, 9),
    (8, 10),
    (9, 11),
    (10, 12),
    (11, 13),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripleSynthConfig {
    pub count: usize,
    pub resolution: usize,
    pub j: usize,
    /// Disk radius, in pixels, of joints in both the posemap and the figure.
    pub joint_radius: usize,
    /// Disk radius of the limb strokes.
    pub limb_radius: usize,
}

impl Default for TripleSynthConfig {
    fn default() -> Self {
        TripleSynthConfig { count: 16, resolution: 64, j: 14, joint_radius: 2, limb_radius: 1 }
    }
}

fn stamp_disk(img: &mut Array3<f64>, cx: i64, cy: i64, radius: usize, color: [f64; 3]) {
    let (_, h, w) = img.dim();
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (px, py) = (cx + dx, cy + dy);
            if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                continue;
            }
            for (ch, &v) in color.iter().enumerate() {
                img[[ch, py as usize, px as usize]] = v;
            }
        }
    }
}

/// Draw a solid-color stick figure: disks at every visible joint plus
/// strokes along the limb segments (14-joint skeleton; other joint counts
/// connect consecutive joints). Joint coordinates map to pixels the same
/// way posemap rasterization does.
pub fn draw_figure(
    pose: &Pose,
    resolution: usize,
    color: [f64; 3],
    joint_radius: usize,
    limb_radius: usize,
) -> Array3<f64> {
    let mut img = Array3::zeros((3, resolution, resolution));
    let scale = (resolution - 1) as f64;
    let px = |v: f64| (v * scale).round() as i64;
    let j = pose.joints.len();
    let limbs: Vec<(usize, usize)> = if j == 14 {
        LIMBS_14.to_vec()
    } else {
        (1..j).map(|i| (i - 1, i)).collect()
    };
    for &(a, b) in &limbs {
        if !(pose.visibility[a] && pose.visibility[b]) {
            continue;
        }
        let (ax, ay) = pose.joints[a];
        let (bx, by) = pose.joints[b];
        let steps = ((bx - ax).hypot(by - ay) * scale).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let x = ax + f * (bx - ax);
            let y = ay + f * (by - ay);
            stamp_disk(&mut img, px(x), px(y), limb_radius, color);
        }
    }
    for (&(x, y), &vis) in pose.joints.iter().zip(&pose.visibility) {
        if vis {
            stamp_disk(&mut img, px(x), px(y), joint_radius, color);
        }
    }
    img
}

/// Generate paired training triples: each has a stick figure of one random
/// color in two nearby poses — one drawn as the goal frame (with its posemap)
/// and one as the appearance reference.
pub fn synth_triples(cfg: &TripleSynthConfig, seed: u64) -> Result<Vec<RenderTriple>, RenderError> {
    if cfg.resolution < 16 {
        return Err(RenderError::BadConfig(format!(
            "triple resolution {} below the 16-pixel minimum",
            cfg.resolution
        )));
    }
    if cfg.joint_radius == 0 {
        return Err(RenderError::BadConfig("joint_radius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_cfg = SynthConfig { n: 2, t1: 1, t2: 1, j: cfg.j, groups: 1, noise: 0.035 };
    (0..cfg.count)
        .map(|_| {
            let clip = synth_scene(&scene_cfg, rng.random())?;
            let track = &clip.tracks[0];
            let color = [
                rng.random_range(0.25..1.0),
                rng.random_range(0.25..1.0),
                rng.random_range(0.25..1.0),
            ];
            let goal_pose = &track.poses[0];
            let ref_pose = &track.poses[1];
            let r = cfg.resolution;
            Ok(RenderTriple {
                posemap: rasterize_posemap(goal_pose, r, r, cfg.joint_radius),
                reference: draw_figure(ref_pose, r, color, cfg.joint_radius, cfg.limb_radius),
                goal: draw_figure(goal_pose, r, color, cfg.joint_radius, cfg.limb_radius),
            })
        })
        .collect()
}

// ---- appearance-transfer evaluation ----

const FIGURE_THRESHOLD: f64 = 0.02;

/// Flat pixel indices whose summed RGB exceeds a small threshold.
fn figure_indices(img: &Array3<f64>) -> Vec<(usize, usize)> {
    let (_, h, w) = img.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if img[[0, y, x]] + img[[1, y, x]] + img[[2, y, x]] > FIGURE_THRESHOLD {
                out.push((y, x));
            }
        }
    }
    out
}

fn mean_color_at(img: &Array3<f64>, pixels: &[(usize, usize)]) -> [f64; 3] {
    if pixels.is_empty() {
        return [0.0; 3];
    }
    let mut sum = [0.0; 3];
    for &(y, x) in pixels {
        for (ch, s) in sum.iter_mut().enumerate() {
            *s += img[[ch, y, x]];
        }
    }
    sum.map(|s| s / pixels.len() as f64)
}

/// Mean color over an image's own above-threshold pixels.
pub fn figure_mean_color(img: &Array3<f64>) -> [f64; 3] {
    mean_color_at(img, &figure_indices(img))
}

fn color_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fraction of triples whose rendered figure color is strictly closer to its
/// own reference's figure color than to each of `distractors` randomly drawn
/// other references. Figure pixels of the rendered image are read at the
/// goal frame's figure footprint.
pub fn appearance_transfer_rate_with<F>(
    mut render_fn: F,
    test: &[RenderTriple],
    distractors: usize,
    seed: u64,
) -> Result<f64, RenderError>
where
    F: FnMut(&RenderTriple) -> Result<Array3<f64>, RenderError>,
{
    if test.len() < 2 {
        return Err(RenderError::BadConfig(
            "appearance evaluation needs at least two triples".into(),
        ));
    }
    if distractors == 0 {
        return Err(RenderError::BadConfig("need at least one distractor reference".into()));
    }
    let ref_colors: Vec<[f64; 3]> = test.iter().map(|tr| figure_mean_color(&tr.reference)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    for (i, tr) in test.iter().enumerate() {
        let img = render_fn(tr)?;
        let rendered = mean_color_at(&img, &figure_indices(&tr.goal));
        let own = color_dist(rendered, ref_colors[i]);
        let mut win = true;
        for _ in 0..distractors {
            let mut k = rng.random_range(0..test.len() - 1);
            if k >= i {
                k += 1;
            }
            if color_dist(rendered, ref_colors[k]) <= own {
                win = false;
            }
        }
        wins += win as usize;
    }
    Ok(wins as f64 / test.len() as f64)
}

/// [`appearance_transfer_rate_with`] driven by a trained model: each triple
/// is rendered from its own reference's filter bank.
pub fn appearance_transfer_rate(
    model: &RenderModel,
    test: &[RenderTriple],
    distractors: usize,
    seed: u64,
) -> Result<f64, RenderError> {
    appearance_transfer_rate_with(
        |tr| {
            let bank = model.compute_filters(&tr.reference)?;
            model.render(&tr.posemap, &bank)
        },
        test,
        distractors,
        seed,
    )
}

// ---- image and index I/O ----

/// Clamp to [0, 1] and quantize to 8-bit RGB (row-major, y down).
pub fn array_to_rgb(img: &Array3<f64>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([
            q(img[[0, y as usize, x as usize]]),
            q(img[[1, y as usize, x as usize]]),
            q(img[[2, y as usize, x as usize]]),
        ])
    })
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

pub fn save_rgb_png(img: &Array3<f64>, path: &Path) -> Result<(), RenderError> {
    array_to_rgb(img)
        .save(path)
        .map_err(|e| RenderError::Image { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn load_rgb_png(path: &Path) -> Result<Array3<f64>, RenderError> {
    let img = image::open(path)
        .map_err(|e| RenderError::Image { path: path.to_path_buf(), msg: e.to_string() })?
        .to_rgb8();
    Ok(rgb_to_array(&img))
}

#[derive(Serialize, Deserialize)]
struct TripleIndexRow {
    posemap: String,
    reference: String,
    goal: String,
}

/// Write triples as PNGs plus a JSON-lines index (one
/// `{"posemap","reference","goal"}` row per triple, paths relative to the
/// index). Returns the index path.
pub fn save_triples(dir: &Path, triples: &[RenderTriple]) -> Result<PathBuf, RenderError> {
    fs::create_dir_all(dir)
        .map_err(|e| RenderError::Image { path: dir.to_path_buf(), msg: e.to_string() })?;
    let index_path = dir.join("index.jsonl");
    let mut index = fs::File::create(&index_path)
        .map_err(|e| RenderError::Image { path: index_path.clone(), msg: e.to_string() })?;
    for (i, tr) in triples.iter().enumerate() {
        let row = TripleIndexRow {
            posemap: format!("posemap_{i:04}.png"),
            reference: format!("reference_{i:04}.png"),
            goal: format!("goal_{i:04}.png"),
        };
        save_posemap_png(&tr.posemap, &dir.join(&row.posemap))?;
        save_rgb_png(&tr.reference, &dir.join(&row.reference))?;
        save_rgb_png(&tr.goal, &dir.join(&row.goal))?;
        let line = serde_json::to_string(&row).expect("index row serializes");
        writeln!(index, "{line}")
            .map_err(|e| RenderError::Image { path: index_path.clone(), msg: e.to_string() })?;
    }
    Ok(index_path)
}

/// Load triples from a JSON-lines index written by [`save_triples`] (or by
/// hand); relative paths resolve against the index file's directory.
pub fn load_triples(index: &Path) -> Result<Vec<RenderTriple>, RenderError> {
    let base = index.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file = fs::File::open(index)
        .map_err(|e| RenderError::Image { path: index.to_path_buf(), msg: e.to_string() })?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line
            .map_err(|e| RenderError::Index { path: index.into(), line: lineno + 1, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TripleIndexRow = serde_json::from_str(&line).map_err(|e| RenderError::Index {
            path: index.into(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(RenderTriple {
            posemap: load_posemap_png(&base.join(&row.posemap))?,
            reference: load_rgb_png(&base.join(&row.reference))?,
            goal: load_rgb_png(&base.join(&row.goal))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::check;
    use ndarray::Array2;

    /// Small, fast geometry used by most tests: 32x32 so the five encoder
    /// halvings land on a 1x1 bottleneck, with narrow channels.
    fn toy_arch() -> RenderArch {
        RenderArch { resolution: 32, c_base: 2, ..RenderArch::default() }
    }

    fn random_image(rng: &mut ChaCha8Rng, r: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, r, r), |_| rng.random_range(0.0..1.0))
    }

    fn toy_posemap(seed: u64, r: usize) -> PosemapImage {
        let cfg = TripleSynthConfig { resolution: r, count: 1, ..TripleSynthConfig::default() };
        synth_triples(&cfg, seed).unwrap().remove(0).posemap
    }

    #[test]
    fn named_variants_parse_and_validate() {
        for name in ["8-5-10", "8-3-56", "8-3-10", "5-5-10"] {
            let arch = RenderArch::named(name).unwrap();
            arch.validate().unwrap();
            assert_eq!(arch.to_string(), name);
            assert_eq!(arch.kernel, 5);
        }
        assert!(matches!(
            RenderArch::named("5-3-10"),
            Err(RenderError::UnknownVariant { .. })
        ));
        assert!(matches!(RenderArch::named("big"), Err(RenderError::UnknownVariant { .. })));

        let bad = RenderArch { n_filters: 11, ..RenderArch::default() };
        assert!(bad.validate().is_err());
        let bad = RenderArch { resolution: 48, ..RenderArch::default() };
        assert!(bad.validate().is_err());
        let bad = RenderArch { kernel: 3, ..RenderArch::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn desk_scale_geometry() {
        let arch = RenderArch::default();
        assert_eq!((arch.ed_layers, arch.fcn_layers, arch.n_filters), (5, 5, 10));
        assert_eq!(arch.resolution, 64);
        assert_eq!(arch.bottleneck(), 2);
        assert_eq!(arch.enc_channels(), vec![8, 16, 32, 32, 32]);
        assert_eq!(arch.c_enc(), 32);
        assert_eq!(arch.bank_shape(), [10, 32, 5, 5]);

        let full = RenderArch::named("8-3-56").unwrap();
        assert_eq!(full.resolution, 256);
        assert_eq!(full.bottleneck(), 1);
        assert_eq!(full.bank_shape(), [56, 32, 5, 5]);
    }

    #[test]
    fn filter_bank_has_declared_shape_and_is_deterministic() {
        let arch = RenderArch::named("8-5-10").unwrap();
        let model = RenderModel::new(arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reference = random_image(&mut rng, arch.resolution);
        let bank = model.compute_filters(&reference).unwrap();
        assert_eq!(bank.shape(), [10, arch.c_enc(), 5, 5]);
        bank.validate(&arch).unwrap();

        let again = model.compute_filters(&reference).unwrap();
        assert_eq!(bank, again, "identical references must give identical banks");

        let wrong = random_image(&mut rng, 32);
        assert!(matches!(
            model.compute_filters(&wrong),
            Err(RenderError::BadResolution { expected: 256, .. })
        ));
    }

    #[test]
    fn uniform_reference_bank_survives_rotation() {
        let arch = toy_arch();
        let model = RenderModel::new(arch, 5).unwrap();
        let flat = Array3::from_shape_fn((3, 32, 32), |(c, _, _)| 0.2 + 0.3 * c as f64);
        // Rotating a per-channel-constant image by 90 degrees changes nothing
        // spatially, so the banks must agree exactly.
        let mut rotated = flat.clone();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    rotated[[c, y, x]] = flat[[c, 31 - x, y]];
                }
            }
        }
        assert_eq!(flat, rotated);
        let a = model.compute_filters(&flat).unwrap();
        let b = model.compute_filters(&rotated).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_output_shape_range_and_purity() {
        let arch = toy_arch();
        let model = RenderModel::new(arch, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = random_image(&mut rng, 32);
        let bank = model.compute_filters(&reference).unwrap();
        let pm = toy_posemap(1, 32);
        let img = model.render(&pm, &bank).unwrap();
        assert_eq!(img.dim(), (3, 32, 32));
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(img, model.render(&pm, &bank).unwrap(), "render must be pure");
    }

    #[test]
    fn zero_bank_makes_output_posemap_independent() {
        let arch = toy_arch();
        let model = RenderModel::new(arch, 9).unwrap();
        let bank = FilterBank::zeros(&arch);
        let a = model.render(&toy_posemap(1, 32), &bank).unwrap();
        let b = model.render(&toy_posemap(99, 32), &bank).unwrap();
        assert_eq!(a, b, "zero filters must erase all posemap information");
    }

    #[test]
    fn mismatched_bank_and_posemap_are_rejected() {
        let arch = toy_arch();
        let model = RenderModel::new(arch, 9).unwrap();
        let wrong_bank = FilterBank { weights: Array4::zeros((9, arch.c_enc(), 5, 5)) };
        assert!(matches!(
            model.render(&toy_posemap(1, 32), &wrong_bank),
            Err(RenderError::BankShape { .. })
        ));
        let bank = FilterBank::zeros(&arch);
        assert!(matches!(
            model.render(&toy_posemap(1, 64), &bank),
            Err(RenderError::BadResolution { .. })
        ));
    }

    #[test]
    fn injected_convolution_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..30 {
            let (c_in, c_out, side, k) = (4, 3, 2 + trial % 5, 5);
            let f = Array3::from_shape_fn((c_in, side, side), |_| rng.random_range(-1.0..1.0));
            let bank = FilterBank {
                weights: Array4::from_shape_fn((c_out, c_in, k, k), |_| rng.random_range(-1.0..1.0)),
            };
            let fast = injected_features(&f, &bank);
            assert_eq!(fast.dim(), (c_out, side, side), "same padding keeps the map size");

            let pad = (k / 2) as isize;
            let mut naive = Array3::<f64>::zeros((c_out, side, side));
            for o in 0..c_out {
                for y in 0..side {
                    for x in 0..side {
                        let mut acc = 0.0;
                        for i in 0..c_in {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let sy = y as isize + dy as isize - pad;
                                    let sx = x as isize + dx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= side as isize || sx >= side as isize
                                    {
                                        continue;
                                    }
                                    acc += f[[i, sy as usize, sx as usize]]
                                        * bank.weights[[o, i, dy, dx]];
                                }
                            }
                        }
                        naive[[o, y, x]] = acc;
                    }
                }
            }
            let rel = check::rel_error_norm(
                fast.as_slice().unwrap(),
                naive.as_slice().unwrap(),
            );
            assert!(rel < 1e-5, "trial {trial}: rel error {rel}");
        }
    }

    #[test]
    fn sequence_rendering_reuses_one_bank() {
        let arch = toy_arch();
        let model = RenderModel::new(arch, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reference = random_image(&mut rng, 32);
        let maps = vec![toy_posemap(1, 32), toy_posemap(2, 32), toy_posemap(1, 32)];
        let frames = model.render_sequence(&maps, &reference).unwrap();
        assert_eq!(frames.len(), maps.len());

        let bank = model.compute_filters(&reference).unwrap();
        for (frame, map) in frames.iter().zip(&maps) {
            assert_eq!(*frame, model.render(map, &bank).unwrap());
        }
        assert_eq!(frames[0], frames[2], "identical posemaps must render identically");
    }

    #[test]
    fn extractor_is_deterministic_with_declared_shapes() {
        let fx = FeatureExtractor::seeded(42);
        assert_eq!(fx.blocks(), FEATURE_BLOCKS);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 16);

        let run = |image: &Array3<f64>| -> Vec<ArrayD<f64>> {
            let t = Tape::new();
            let v = t.leaf(image.clone().into_dyn());
            fx.features(&t, v, &[0, 1, 2, 3, 4]).unwrap().iter().map(|&f| t.value(f)).collect()
        };
        let a = run(&img);
        let b = run(&img);
        assert_eq!(a, b, "same image must give identical features");

        for (block, feat) in a.iter().enumerate() {
            let (c, h, w) = fx.feature_shape(block, 16);
            assert_eq!(feat.shape(), &[c, h, w], "block {block}");
        }
        // At 8x8 the map bottoms out at 1x1 and pooling stops.
        assert_eq!(fx.feature_shape(0, 8), (8, 8, 8));
        assert_eq!(fx.feature_shape(3, 8), (20, 1, 1));
        assert_eq!(fx.feature_shape(4, 8), (24, 1, 1));

        let t = Tape::new();
        let v = t.leaf(img.into_dyn());
        assert!(matches!(
            fx.features(&t, v, &[5]),
            Err(RenderError::BadFeatureLayer { layer: 5, blocks: 5 })
        ));
    }

    #[test]
    fn different_extractor_checkpoints_change_features_not_shapes() {
        let fa = FeatureExtractor::seeded(1);
        let fb = FeatureExtractor::seeded(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 16);
        let t = Tape::new();
        let v = t.leaf(img.into_dyn());
        let a = fa.features(&t, v, &[0, 2, 4]).unwrap();
        let b = fb.features(&t, v, &[0, 2, 4]).unwrap();
        for (&x, &y) in a.iter().zip(&b) {
            assert_eq!(t.shape(x), t.shape(y));
            assert_ne!(t.value(x), t.value(y));
        }
    }

    #[test]
    fn extractor_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extractor.json");
        let fx = FeatureExtractor::seeded(77);
        fx.save(&path).unwrap();
        let loaded = FeatureExtractor::load(&path).unwrap();
        assert_eq!(fx.channels, loaded.channels);
        assert_eq!(fx.weights, loaded.weights);

        fs::write(&path, "{\"channels\":[8],\"weights\":[[1.0]],\"biases\":[[0.0]]}").unwrap();
        assert!(FeatureExtractor::load(&path).is_err(), "inconsistent sizes must be rejected");
    }

    #[test]
    fn transfer_loss_vanishes_when_everything_matches() {
        let fx = FeatureExtractor::seeded(0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 16);
        let parts =
            transfer_loss(&img, &img, &img, &RenderLossWeights::default(), &fx).unwrap();
        assert_eq!(parts.total, 0.0);
        assert_eq!((parts.pixel, parts.content, parts.style), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pixel_term_is_a_plain_sum_of_squares() {
        let fx = FeatureExtractor::seeded(0);
        let weights = RenderLossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            ..RenderLossWeights::default()
        };
        let goal = Array3::zeros((3, 8, 8));
        let mut gen = goal.clone();
        gen[[1, 3, 5]] = 0.5;
        let parts = transfer_loss(&gen, &goal, &goal, &weights, &fx).unwrap();
        assert_eq!(parts.pixel, 0.25);
        assert_eq!(parts.total, 0.25);
        assert_eq!(parts.content, 0.0);
        assert_eq!(parts.style, 0.0);
    }

    /// Independent straight-line oracle: run the extractor, then assemble the
    /// content and style sums with explicit loops and Gram matrices.
    fn oracle_parts(
        gen: &Array3<f64>,
        goal: &Array3<f64>,
        reference: &Array3<f64>,
        w: &RenderLossWeights,
        fx: &FeatureExtractor,
    ) -> (f64, f64, f64) {
        let feats = |img: &Array3<f64>, layers: &[usize]| -> Vec<ArrayD<f64>> {
            let t = Tape::new();
            let v = t.leaf(img.clone().into_dyn());
            fx.features(&t, v, layers).unwrap().iter().map(|&f| t.value(f)).collect()
        };
        let pixel = gen
            .iter()
            .zip(goal.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        let mut content = 0.0;
        for (fg, fo) in feats(gen, &w.content_layers).iter().zip(feats(goal, &w.content_layers)) {
            content += fg.iter().zip(fo.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let gram_of = |f: &ArrayD<f64>| -> Array2<f64> {
            let (c, h, wd) = (f.shape()[0], f.shape()[1], f.shape()[2]);
            let mut g = Array2::zeros((c, c));
            for i in 0..c {
                for j in 0..c {
                    let mut acc = 0.0;
                    for y in 0..h {
                        for x in 0..wd {
                            acc += f[[i, y, x]] * f[[j, y, x]];
                        }
                    }
                    g[[i, j]] = acc;
                }
            }
            g
        };
        let mut style = 0.0;
        for (fg, fr) in feats(gen, &w.style_layers).iter().zip(feats(reference, &w.style_layers)) {
            let (gg, gr) = (gram_of(fg), gram_of(&fr));
            style += gg.iter().zip(gr.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        (pixel, content, style)
    }

    #[test]
    fn loss_terms_match_gram_matrix_oracle() {
        let fx = FeatureExtractor::seeded(6);
        let w = RenderLossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let gen = random_image(&mut rng, 8);
            let goal = random_image(&mut rng, 8);
            let reference = random_image(&mut rng, 8);
            let parts = transfer_loss(&gen, &goal, &reference, &w, &fx).unwrap();
            let (p, c, s) = oracle_parts(&gen, &goal, &reference, &w, &fx);
            for (name, got, want) in
                [("pixel", parts.pixel, p), ("content", parts.content, c), ("style", parts.style, s)]
            {
                let rel = (got - want).abs() / want.abs().max(1e-12);
                assert!(rel < 1e-9, "trial {trial} {name}: {got} vs oracle {want}");
            }
        }
    }

    #[test]
    fn total_is_exactly_the_weighted_component_sum() {
        let fx = FeatureExtractor::seeded(6);
        let w = RenderLossWeights { gamma: 0.37, ..RenderLossWeights::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..5 {
            let gen = random_image(&mut rng, 8);
            let goal = random_image(&mut rng, 8);
            let reference = random_image(&mut rng, 8);
            let parts = transfer_loss(&gen, &goal, &reference, &w, &fx).unwrap();
            assert!(parts.pixel >= 0.0 && parts.content >= 0.0 && parts.style >= 0.0);
            assert_eq!(
                parts.total,
                w.alpha * parts.pixel + w.beta * parts.content + w.gamma * parts.style
            );
        }
    }

    #[test]
    fn mismatched_loss_shapes_and_weights_are_rejected() {
        let fx = FeatureExtractor::seeded(0);
        let w = RenderLossWeights::default();
        let a = Array3::zeros((3, 8, 8));
        let b = Array3::zeros((3, 16, 16));
        assert!(matches!(
            transfer_loss(&a, &b, &a, &w, &fx),
            Err(RenderError::ImageShape { what: "goal image", .. })
        ));
        assert!(matches!(
            transfer_loss(&a, &a, &b, &w, &fx),
            Err(RenderError::ImageShape { what: "reference image", .. })
        ));
        let bad = RenderLossWeights { alpha: -1.0, ..RenderLossWeights::default() };
        assert!(matches!(
            transfer_loss(&a, &a, &a, &bad, &fx),
            Err(RenderError::BadWeights(_))
        ));
        let bad = RenderLossWeights { content_layers: vec![7], ..RenderLossWeights::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn transfer_loss_gradient_matches_finite_differences() {
        let fx = FeatureExtractor::seeded(23);
        let w = RenderLossWeights { gamma: 0.05, ..RenderLossWeights::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let gen = random_image(&mut rng, 8);
        let goal = random_image(&mut rng, 8);
        let reference = random_image(&mut rng, 8);

        let t = Tape::new();
        let g = t.leaf(gen.clone().into_dyn());
        let go = t.leaf(goal.clone().into_dyn());
        let rf = t.leaf(reference.clone().into_dyn());
        let graph = transfer_loss_graph(&t, g, go, rf, &w, &fx).unwrap();
        let grads = t.backward(graph.total);
        let analytic = grads.wrt(g).expect("gradient w.r.t. generated image");

        let flat: Vec<f64> = gen.iter().cloned().collect();
        let numeric = check::central_diff_grad(
            |xs| {
                let img = Array3::from_shape_vec((3, 8, 8), xs.to_vec()).unwrap();
                transfer_loss(&img, &goal, &reference, &w, &fx).unwrap().total
            },
            &flat,
            1e-6,
        );
        let rel = check::rel_error_norm(analytic.as_slice().unwrap(), &numeric);
        assert!(rel < 1e-3, "rel error {rel}");
    }

    fn toy_triples(n: usize, seed: u64) -> Vec<RenderTriple> {
        let cfg = TripleSynthConfig { count: n, resolution: 32, ..TripleSynthConfig::default() };
        synth_triples(&cfg, seed).unwrap()
    }

    fn toy_train_cfg() -> RenderTrainConfig {
        RenderTrainConfig {
            iters: 3,
            calibrate: false,
            weights: RenderLossWeights {
                beta: 0.0,
                gamma: 0.0,
                ..RenderLossWeights::default()
            },
            ..RenderTrainConfig::default()
        }
    }

    #[test]
    fn update_schedule_is_two_generator_steps_then_one_discriminator_step() {
        let arch = toy_arch();
        let mut gen = RenderModel::new(arch, 1).unwrap();
        let mut disc = Discriminator::new(&arch, 2).unwrap();
        let triples = toy_triples(3, 0);
        let fx = FeatureExtractor::seeded(0);
        let report = gan_train(&mut gen, &mut disc, &triples, &fx, &toy_train_cfg()).unwrap();
        let expected: Vec<UpdateKind> = std::iter::repeat([
            UpdateKind::Generator,
            UpdateKind::Generator,
            UpdateKind::Discriminator,
        ])
        .take(3)
        .flatten()
        .collect();
        assert_eq!(report.updates, expected);
    }

    #[test]
    fn supervised_training_descends_the_transfer_loss() {
        let arch = toy_arch();
        let mut gen = RenderModel::new(arch, 3).unwrap();
        let mut disc = Discriminator::new(&arch, 4).unwrap();
        let triples = toy_triples(4, 7);
        let fx = FeatureExtractor::seeded(0);
        let weights = RenderLossWeights {
            beta: 0.0,
            gamma: 0.0,
            ..RenderLossWeights::default()
        };
        let dataset_loss = |model: &RenderModel| -> f64 {
            triples
                .iter()
                .map(|tr| {
                    let bank = model.compute_filters(&tr.reference).unwrap();
                    let img = model.render(&tr.posemap, &bank).unwrap();
                    transfer_loss(&img, &tr.goal, &tr.reference, &weights, &fx).unwrap().total
                })
                .sum::<f64>()
        };
        let before = dataset_loss(&gen);
        let cfg = RenderTrainConfig {
            adv_weight: 0.0,
            iters: 200,
            calibrate: false,
            weights: weights.clone(),
            ..RenderTrainConfig::default()
        };
        let report = gan_train(&mut gen, &mut disc, &triples, &fx, &cfg).unwrap();
        let after = dataset_loss(&gen);
        assert!(
            after < before,
            "supervised descent failed: {before} -> {after}"
        );
        assert!(report.losses.iter().all(|r| r.gen_adv == 0.0));
        assert_eq!(report.losses.len(), 200);
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let arch = toy_arch();
        let fx = FeatureExtractor::seeded(0);
        let run = || {
            let mut gen = RenderModel::new(arch, 5).unwrap();
            let mut disc = Discriminator::new(&arch, 6).unwrap();
            let triples = toy_triples(3, 1);
            let cfg = RenderTrainConfig { iters: 4, ..toy_train_cfg() };
            let report = gan_train(&mut gen, &mut disc, &triples, &fx, &cfg).unwrap();
            let params: Vec<Vec<u64>> = gen
                .store
                .iter()
                .map(|p| p.value.iter().map(|x| x.to_bits()).collect())
                .collect();
            (report, params)
        };
        let (ra, pa) = run();
        let (rb, pb) = run();
        assert_eq!(pa, pb, "parameters must match bitwise");
        for (a, b) in ra.losses.iter().zip(&rb.losses) {
            assert_eq!(a.gen_total.to_bits(), b.gen_total.to_bits());
            assert_eq!(a.disc.to_bits(), b.disc.to_bits());
        }
    }

    #[test]
    fn collapse_monitor_fires_after_a_hundred_flat_iterations() {
        let mut m = CollapseMonitor::default();
        for i in 0..99 {
            m.observe(i, 0.0);
        }
        assert_eq!(m.flagged_at, None);
        m.observe(99, 0.5);
        for i in 100..199 {
            m.observe(i, 0.0);
        }
        assert_eq!(m.flagged_at, None, "a non-zero loss must reset the run");
        m.observe(199, 0.0);
        assert_eq!(m.flagged_at, Some(199));
        m.observe(200, 0.0);
        assert_eq!(m.flagged_at, Some(199), "first firing wins");
    }

    #[test]
    fn gamma_calibration_balances_content_and_style_terms() {
        let arch = toy_arch();
        let model = RenderModel::new(arch, 8).unwrap();
        let triples = toy_triples(5, 3);
        let fx = FeatureExtractor::seeded(0);
        let w = RenderLossWeights::default();
        let gamma = calibrate_gamma(&model, &triples, &w, &fx, 32).unwrap();
        assert!(gamma.is_finite() && gamma > 0.0);

        // With the calibrated weight, mean weighted style equals mean
        // weighted content across the calibration set.
        let probe = RenderLossWeights { beta: 1.0, gamma: 1.0, ..w.clone() };
        let (mut mc, mut ms) = (0.0, 0.0);
        for tr in &triples {
            let bank = model.compute_filters(&tr.reference).unwrap();
            let img = model.render(&tr.posemap, &bank).unwrap();
            let parts = transfer_loss(&img, &tr.goal, &tr.reference, &probe, &fx).unwrap();
            mc += parts.content;
            ms += parts.style;
        }
        let lhs = gamma * ms / triples.len() as f64;
        let rhs = w.beta * mc / triples.len() as f64;
        assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0), "{lhs} vs {rhs}");

        assert!(matches!(
            calibrate_gamma(&model, &[], &w, &fx, 32),
            Err(RenderError::EmptyDataset)
        ));
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let arch = toy_arch();
        let mut gen = RenderModel::new(arch, 1).unwrap();
        let mut disc = Discriminator::new(&arch, 2).unwrap();
        let fx = FeatureExtractor::seeded(0);
        assert!(matches!(
            gan_train(&mut gen, &mut disc, &[], &fx, &toy_train_cfg()),
            Err(RenderError::EmptyDataset)
        ));

        let bad_cfg = RenderTrainConfig { lr: 0.0, ..toy_train_cfg() };
        let triples = toy_triples(2, 0);
        assert!(matches!(
            gan_train(&mut gen, &mut disc, &triples, &fx, &bad_cfg),
            Err(RenderError::BadConfig(_))
        ));

        let wrong_res =
            synth_triples(&TripleSynthConfig { count: 1, ..TripleSynthConfig::default() }, 0)
                .unwrap();
        assert!(matches!(
            gan_train(&mut gen, &mut disc, &wrong_res, &fx, &toy_train_cfg()),
            Err(RenderError::BadResolution { .. })
        ));
    }

    #[test]
    fn synthetic_triples_are_paired_and_colored() {
        let cfg = TripleSynthConfig { count: 6, resolution: 32, ..TripleSynthConfig::default() };
        let triples = synth_triples(&cfg, 4).unwrap();
        assert_eq!(triples.len(), 6);
        for tr in &triples {
            assert_eq!(tr.goal.dim(), (3, 32, 32));
            assert_eq!((tr.posemap.h, tr.posemap.w), (32, 32));
            assert!(tr.posemap.white_count() > 0);

            // Every posemap dot sits on goal-figure pixels.
            let goal_mask: Vec<(usize, usize)> = figure_indices(&tr.goal);
            for y in 0..32 {
                for x in 0..32 {
                    if tr.posemap.pixels[y * 32 + x] > 0 {
                        assert!(goal_mask.contains(&(y, x)), "posemap dot off-figure at {y},{x}");
                    }
                }
            }

            // Goal and reference share one color: figure means agree closely.
            let gc = figure_mean_color(&tr.goal);
            let rc = figure_mean_color(&tr.reference);
            assert!(color_dist(gc, rc) < 0.05, "{gc:?} vs {rc:?}");
            assert!(gc.iter().all(|&c| c > 0.2), "figures must not be black");
        }
        // Colors vary across triples.
        let c0 = figure_mean_color(&triples[0].reference);
        let c1 = figure_mean_color(&triples[1].reference);
        assert!(color_dist(c0, c1) > 1e-3);

        assert!(synth_triples(
            &TripleSynthConfig { resolution: 8, ..TripleSynthConfig::default() },
            0
        )
        .is_err());
    }

    #[test]
    fn appearance_rate_is_perfect_for_an_oracle_and_poor_for_a_constant() {
        let triples = toy_triples(12, 9);
        let perfect =
            appearance_transfer_rate_with(|tr| Ok(tr.goal.clone()), &triples, 9, 0).unwrap();
        assert_eq!(perfect, 1.0, "echoing the goal image must always win");

        let gray = Array3::from_elem((3, 32, 32), 0.5);
        let constant =
            appearance_transfer_rate_with(|_| Ok(gray.clone()), &triples, 9, 0).unwrap();
        assert!(constant < 0.5, "a color-blind renderer should rarely win, got {constant}");

        assert!(appearance_transfer_rate_with(|tr| Ok(tr.goal.clone()), &triples[..1], 9, 0)
            .is_err());
    }

    #[test]
    fn triples_round_trip_through_png_index() {
        let dir = tempfile::tempdir().unwrap();
        let triples = toy_triples(3, 2);
        let index = save_triples(dir.path(), &triples).unwrap();
        assert_eq!(index, dir.path().join("index.jsonl"));
        let loaded = load_triples(&index).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in triples.iter().zip(&loaded) {
            assert_eq!(a.posemap, b.posemap, "posemaps are binary and must survive exactly");
            let max_err = a
                .goal
                .iter()
                .zip(b.goal.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-12, "8-bit quantization only, got {max_err}");
        }

        fs::write(dir.path().join("bad.jsonl"), "{\"posemap\": 3}\n").unwrap();
        assert!(matches!(
            load_triples(&dir.path().join("bad.jsonl")),
            Err(RenderError::Index { line: 1, .. })
        ));
    }

    #[test]
    fn render_loss_csv_has_expected_layout() {
        let rows = vec![RenderLossRow {
            iteration: 0,
            gen_total: 1.5,
            gen_adv: 0.25,
            transfer_total: 1.25,
            pixel: 0.25,
            content: 0.0,
            style: 0.0,
            disc: 1.4,
        }];
        let csv = render_loss_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,gen_total,gen_adv,transfer_total,pixel,content,style,disc"
        );
        assert_eq!(lines.next().unwrap(), "0,1.5,0.25,1.25,0.25,0,0,1.4");
    }
}
