//! The full colorization system: preprocessing, the convolutional feature
//! extractor, per-layer feature normalization, hyper-column assembly, the
//! 9-head feature translator, the training loop, and end-to-end inference
//! from a single intensity channel to a covariance raster.
//!
//! The extractor is seven cascaded 3×3 convolutions with ReLUs and two 2×2
//! max-pools; every ReLU output is bilinearly upsampled back to patch size,
//! standardized with training-set statistics, and stacked together with the
//! input pixel into a hyper-column. The translator is a shared two-layer
//! trunk followed by nine independent two-layer softmax heads, one per
//! polarimetric parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis, IxDyn};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::neuralnet::{
    bilinear_upsample, bilinear_upsample_backward, conv3x3_backward, conv3x3_forward,
    cross_entropy, cross_entropy_logit_grads, fc_backward, fc_forward, init_uniform,
    maxpool2x2_backward, maxpool2x2_forward, relu2_backward, relu2_forward, relu3_backward,
    relu3_forward, AdamState, ParamSet, Scalar,
};
use crate::polmath::{power_from_channel, psd_correct, Channel, CovarianceMatrix, PolFeature};
use crate::quantizer::{fit_all, DecodeRule, QuantizerTable};
use crate::raster::{Layout, PolRaster};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Default dB floor of the intensity preprocessing window.
pub const DEFAULT_DB_FLOOR: f64 = -25.0;

/// Flag bits of the per-pixel colorize diagnostics plane.
pub const FLAG_POWER_FALLBACK: u32 = 1;
pub const FLAG_DELTA_RENORM: u32 = 2;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Channel widths of the seven extractor convolutions. The layer order is
/// fixed: (conv, relu) ×2, pool, (conv, relu) ×2, pool, (conv, relu) ×3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub widths: [usize; 7],
}

impl ExtractorConfig {
    /// Desk-scale widths (an eighth of the full-scale pattern).
    pub fn desk() -> Self {
        Self {
            widths: [8, 8, 16, 16, 32, 32, 32],
        }
    }

    /// Full-scale widths matching the VGG-style 64/64/128/128/256/256/256
    /// pattern.
    pub fn paper() -> Self {
        Self {
            widths: [64, 64, 128, 128, 256, 256, 256],
        }
    }

    /// Hyper-column length: the input pixel plus every tap's channels.
    pub fn feature_dim(&self) -> usize {
        1 + self.widths.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("extractor width 0".into()));
        }
        Ok(())
    }
}

/// Translator trunk and head sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslatorConfig {
    pub trunk: [usize; 2],
    pub head_hidden: usize,
    pub heads: usize,
    pub bins: usize,
}

impl TranslatorConfig {
    pub fn desk() -> Self {
        Self {
            trunk: [128, 64],
            head_hidden: 32,
            heads: 9,
            bins: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            trunk: [2048, 1024],
            head_hidden: 512,
            heads: 9,
            bins: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads != 9 {
            return Err(Error::InvalidConfig(format!(
                "translator must have 9 heads, got {}",
                self.heads
            )));
        }
        if self.bins < 2 || self.trunk.iter().any(|&w| w == 0) || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("degenerate translator dims".into()));
        }
        Ok(())
    }
}

/// Per-feature-layer standardization statistics (one scalar pair per tap).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Elementwise numeric precision of the training computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Pixels per mini-batch.
    pub batch_pixels: usize,
    /// Side length of the training tiles; must be divisible by 4.
    pub patch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub learning_rate: f64,
    /// Lower edge of the dB window used by intensity preprocessing.
    pub db_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_pixels: 2000,
            patch: 64,
            epochs: 10,
            seed: 0,
            precision: Precision::Double,
            learning_rate: 1e-4,
            db_floor: DEFAULT_DB_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pixels == 0 {
            return Err(Error::InvalidConfig("batch_pixels must be >= 1".into()));
        }
        if self.patch < 4 || self.patch % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch {} must be a positive multiple of 4",
                self.patch
            )));
        }
        if !(self.db_floor < 0.0) {
            return Err(Error::InvalidConfig("db_floor must be negative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Network layout
// ---------------------------------------------------------------------------

/// Index map from layers to slots in the flat [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Network {
    pub extractor: ExtractorConfig,
    pub translator: TranslatorConfig,
    conv: Vec<(usize, usize)>,
    trunk: Vec<(usize, usize)>,
    heads: Vec<[usize; 4]>,
}

impl Network {
    /// Parameter layout in deterministic push order. `build` controls
    /// whether arrays are actually allocated (fresh init) or only indexed
    /// (when loading a checkpoint).
    fn layout<F: Scalar>(
        extractor: ExtractorConfig,
        translator: TranslatorConfig,
        mut init: Option<(&mut ParamSet<F>, &mut ChaCha8Rng)>,
    ) -> Result<Self> {
        extractor.validate()?;
        translator.validate()?;
        let mut counter = 0usize;
        let mut index = |name: String, shape: Vec<usize>, fan_in: usize, scale: f64| -> usize {
            if let Some((params, rng)) = init.as_mut() {
                let arr = if scale == 0.0 {
                    ArrayD::zeros(IxDyn(&shape))
                } else {
                    init_uniform::<F>(rng, &shape, fan_in, scale)
                };
                params.push(name, arr)
            } else {
                let idx = counter;
                counter += 1;
                idx
            }
        };

        let mut conv = Vec::with_capacity(7);
        let mut in_ch = 1usize;
        for (i, &out_ch) in extractor.widths.iter().enumerate() {
            let w = index(
                format!("extractor.conv{i}.weight"),
                vec![out_ch, in_ch, 3, 3],
                in_ch * 9,
                1.0,
            );
            let b = index(format!("extractor.conv{i}.bias"), vec![out_ch], in_ch * 9, 0.0);
            conv.push((w, b));
            in_ch = out_ch;
        }

        let dims = [extractor.feature_dim(), translator.trunk[0], translator.trunk[1]];
        let mut trunk = Vec::with_capacity(2);
        for i in 0..2 {
            let w = index(
                format!("translator.trunk{i}.weight"),
                vec![dims[i], dims[i + 1]],
                dims[i],
                1.0,
            );
            let b = index(format!("translator.trunk{i}.bias"), vec![dims[i + 1]], dims[i], 0.0);
            trunk.push((w, b));
        }

        let mut heads = Vec::with_capacity(translator.heads);
        for j in 0..translator.heads {
            let w1 = index(
                format!("translator.head{j}.fc1.weight"),
                vec![translator.trunk[1], translator.head_hidden],
                translator.trunk[1],
                1.0,
            );
            let b1 = index(
                format!("translator.head{j}.fc1.bias"),
                vec![translator.head_hidden],
                translator.trunk[1],
                0.0,
            );
            // The output layer starts small so the initial head
            // distributions are close to uniform.
            let w2 = index(
                format!("translator.head{j}.fc2.weight"),
                vec![translator.head_hidden, translator.bins],
                translator.head_hidden,
                0.1,
            );
            let b2 = index(
                format!("translator.head{j}.fc2.bias"),
                vec![translator.bins],
                translator.head_hidden,
                0.0,
            );
            heads.push([w1, b1, w2, b2]);
        }

        Ok(Self {
            extractor,
            translator,
            conv,
            trunk,
            heads,
        })
    }

    /// Fresh network with seeded initialization.
    pub fn init<F: Scalar>(
        extractor: ExtractorConfig,
        translator: TranslatorConfig,
        seed: u64,
    ) -> Result<(Self, ParamSet<F>)> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::layout(extractor, translator, Some((&mut params, &mut rng)))?;
        Ok((net, params))
    }

    /// Index-only layout for parameters loaded elsewhere.
    pub fn for_params(
        extractor: ExtractorConfig,
        translator: TranslatorConfig,
    ) -> Result<Self> {
        Self::layout::<f64>(extractor, translator, None)
    }
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Map a nonnegative linear intensity into [0, 1] through a clamped dB
/// window: 10·log10(I) clamped to [db_floor, 0], then scaled linearly.
/// Zero intensity maps to 0.
pub fn preprocess_intensity(intensity: f64, db_floor: f64) -> Result<f64> {
    if !(intensity >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "negative intensity {intensity}"
        )));
    }
    if intensity == 0.0 {
        return Ok(0.0);
    }
    let db = 10.0 * intensity.log10();
    Ok(((db - db_floor) / -db_floor).clamp(0.0, 1.0))
}

fn preprocess_patch<F: Scalar>(raw: &ArrayView2<'_, f64>, db_floor: f64) -> Result<Array2<F>> {
    let mut out = Array2::zeros(raw.raw_dim());
    for (o, &v) in out.iter_mut().zip(raw.iter()) {
        *o = F::from_f64(preprocess_intensity(v, db_floor)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Extractor forward/backward
// ---------------------------------------------------------------------------

/// Activations the extractor keeps for its backward pass.
pub struct ExtractorTrace<F> {
    conv_in: Vec<Array3<F>>,
    conv_out: Vec<Array3<F>>,
    /// ReLU outputs, the seven feature taps.
    pub taps: Vec<Array3<F>>,
    pool_arg: Vec<Array3<u8>>,
    pool_in_dims: Vec<(usize, usize, usize)>,
}

/// Taps at which the two pools sit (after these tap indices).
const POOL_AFTER: [usize; 2] = [1, 3];

pub fn extractor_forward<F: Scalar>(
    net: &Network,
    params: &ParamSet<F>,
    patch: &ArrayView2<'_, F>,
) -> Result<ExtractorTrace<F>> {
    let (h, w) = patch.dim();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::ShapeMismatch {
            expected: "patch dims divisible by 4".into(),
            got: format!("{h}x{w}"),
        });
    }
    let mut cur: Array3<F> = patch.to_owned().insert_axis(Axis(0));
    let mut trace = ExtractorTrace {
        conv_in: Vec::with_capacity(7),
        conv_out: Vec::with_capacity(7),
        taps: Vec::with_capacity(7),
        pool_arg: Vec::with_capacity(2),
        pool_in_dims: Vec::with_capacity(2),
    };
    for (li, &(wi, bi)) in net.conv.iter().enumerate() {
        trace.conv_in.push(cur.clone());
        let z = conv3x3_forward(&cur.view(), &params.view4(wi), &params.view1(bi))?;
        let tap = relu3_forward(&z.view());
        trace.conv_out.push(z);
        trace.taps.push(tap.clone());
        cur = tap;
        if POOL_AFTER.contains(&li) {
            trace.pool_in_dims.push(cur.dim());
            let (pooled, arg) = maxpool2x2_forward(&cur.view())?;
            trace.pool_arg.push(arg);
            cur = pooled;
        }
    }
    Ok(trace)
}

/// Upsample every tap to patch size and standardize with the given stats.
pub fn features_from_trace<F: Scalar>(
    trace: &ExtractorTrace<F>,
    stats: Option<&NormStats>,
    h: usize,
    w: usize,
) -> Vec<Array3<F>> {
    trace
        .taps
        .iter()
        .enumerate()
        .map(|(k, tap)| {
            let mut up = bilinear_upsample(&tap.view(), h, w);
            if let Some(s) = stats {
                let mu = F::from_f64(s.mean[k]);
                let sigma = F::from_f64(s.std[k]);
                up.mapv_inplace(|v| (v - mu) / sigma);
            }
            up
        })
        .collect()
}

/// Stack the input pixel and every feature layer's value at (y, x) into
/// one descriptor per requested pixel: input first, then taps in network
/// order.
pub fn hypercolumn_batch<F: Scalar>(
    patch: &ArrayView2<'_, F>,
    features: &[Array3<F>],
    pixels: &[(usize, usize)],
) -> Array2<F> {
    let dim = 1 + features.iter().map(|f| f.dim().0).sum::<usize>();
    let mut out = Array2::zeros((pixels.len(), dim));
    for (row, &(y, x)) in pixels.iter().enumerate() {
        let mut col = 0usize;
        out[(row, col)] = patch[(y, x)];
        col += 1;
        for f in features {
            for c in 0..f.dim().0 {
                out[(row, col)] = f[(c, y, x)];
                col += 1;
            }
        }
    }
    out
}

/// Single-pixel hyper-column.
pub fn build_hypercolumn<F: Scalar>(
    patch: &ArrayView2<'_, F>,
    features: &[Array3<F>],
    y: usize,
    x: usize,
) -> Vec<F> {
    hypercolumn_batch(patch, features, &[(y, x)])
        .row(0)
        .to_vec()
}

// ---------------------------------------------------------------------------
// Translator forward/backward
// ---------------------------------------------------------------------------

pub struct TranslatorTrace<F> {
    hyper: Array2<F>,
    z: [Array2<F>; 2],
    h: [Array2<F>; 2],
    head_z: Vec<Array2<F>>,
    head_h: Vec<Array2<F>>,
    /// Softmax output of each head, (batch, bins).
    pub probs: Vec<Array2<F>>,
}

pub fn translator_forward<F: Scalar>(
    net: &Network,
    params: &ParamSet<F>,
    hyper: Array2<F>,
) -> Result<TranslatorTrace<F>> {
    if hyper.dim().1 != net.extractor.feature_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("hypercolumns of length {}", net.extractor.feature_dim()),
            got: format!("{}", hyper.dim().1),
        });
    }
    let (w0, b0) = net.trunk[0];
    let (w1, b1) = net.trunk[1];
    let z0 = fc_forward(&hyper.view(), &params.view2(w0), &params.view1(b0))?;
    let h0 = relu2_forward(&z0.view());
    let z1 = fc_forward(&h0.view(), &params.view2(w1), &params.view1(b1))?;
    let h1 = relu2_forward(&z1.view());

    let mut head_z = Vec::with_capacity(net.heads.len());
    let mut head_h = Vec::with_capacity(net.heads.len());
    let mut probs = Vec::with_capacity(net.heads.len());
    for &[hw1, hb1, hw2, hb2] in &net.heads {
        let za = fc_forward(&h1.view(), &params.view2(hw1), &params.view1(hb1))?;
        let ha = relu2_forward(&za.view());
        let logits = fc_forward(&ha.view(), &params.view2(hw2), &params.view1(hb2))?;
        probs.push(crate::neuralnet::softmax_rows(&logits.view()));
        head_z.push(za);
        head_h.push(ha);
    }
    Ok(TranslatorTrace {
        hyper,
        z: [z0, z1],
        h: [h0, h1],
        head_z,
        head_h,
        probs,
    })
}

/// Backward through translator, hyper-column assembly, normalization,
/// upsampling, and the extractor, accumulating parameter gradients.
#[allow(clippy::too_many_arguments)]
fn backward_batch<F: Scalar>(
    net: &Network,
    params: &ParamSet<F>,
    ext: &ExtractorTrace<F>,
    tr: &TranslatorTrace<F>,
    logit_grads: &[Array2<F>],
    pixels: &[(usize, usize)],
    stats: &NormStats,
    patch_dims: (usize, usize),
    grads: &mut [ArrayD<F>],
) {
    // Heads.
    let mut gh1 = Array2::<F>::zeros(tr.h[1].dim());
    for (j, &[hw1, hb1, hw2, hb2]) in net.heads.iter().enumerate() {
        let (gha, gw2, gb2) =
            fc_backward(&tr.head_h[j].view(), &params.view2(hw2), &logit_grads[j].view());
        grads[hw2] += &gw2.into_dyn();
        grads[hb2] += &gb2.into_dyn();
        let gza = relu2_backward(&tr.head_z[j].view(), &gha.view());
        let (gh, gw1, gb1) = fc_backward(&tr.h[1].view(), &params.view2(hw1), &gza.view());
        grads[hw1] += &gw1.into_dyn();
        grads[hb1] += &gb1.into_dyn();
        gh1 += &gh;
    }

    // Trunk.
    let (tw0, tb0) = net.trunk[0];
    let (tw1, tb1) = net.trunk[1];
    let gz1 = relu2_backward(&tr.z[1].view(), &gh1.view());
    let (gh0, gw, gb) = fc_backward(&tr.h[0].view(), &params.view2(tw1), &gz1.view());
    grads[tw1] += &gw.into_dyn();
    grads[tb1] += &gb.into_dyn();
    let gz0 = relu2_backward(&tr.z[0].view(), &gh0.view());
    let (ghyper, gw, gb) = fc_backward(&tr.hyper.view(), &params.view2(tw0), &gz0.view());
    grads[tw0] += &gw.into_dyn();
    grads[tb0] += &gb.into_dyn();

    // Scatter hyper-column grads into per-tap full-resolution maps,
    // un-standardize, and shrink back to each tap's native resolution.
    // The input-pixel column is not a parameter path, so it is dropped.
    let (ph, pw) = patch_dims;
    let mut tap_grads: Vec<Array3<F>> = Vec::with_capacity(7);
    let mut col = 1usize;
    for (k, tap) in ext.taps.iter().enumerate() {
        let channels = tap.dim().0;
        let inv_sigma = F::from_f64(1.0 / stats.std[k]);
        let mut gmap = Array3::<F>::zeros((channels, ph, pw));
        for (row, &(y, x)) in pixels.iter().enumerate() {
            for c in 0..channels {
                gmap[(c, y, x)] = ghyper[(row, col + c)] * inv_sigma;
            }
        }
        col += channels;
        let (_, th, tw) = tap.dim();
        tap_grads.push(bilinear_upsample_backward(&gmap.view(), th, tw));
    }

    // Extractor chain, threading pool adjoints and adding each tap's
    // hyper-column contribution where the tap also feeds the next conv.
    let mut g = tap_grads.pop().expect("seven taps");
    for li in (0..7).rev() {
        let (wi, bi) = net.conv[li];
        let gz = relu3_backward(&ext.conv_out[li].view(), &g.view());
        let (gx, gw, gb) = conv3x3_backward(&ext.conv_in[li].view(), &params.view4(wi), &gz.view());
        grads[wi] += &gw.into_dyn();
        grads[bi] += &gb.into_dyn();
        if li == 0 {
            break;
        }
        let mut gx = gx;
        if li == 2 || li == 4 {
            let pi = if li == 2 { 0 } else { 1 };
            let (_, ih, iw) = ext.pool_in_dims[pi];
            gx = maxpool2x2_backward(&ext.pool_arg[pi], &gx.view(), ih, iw);
        }
        let mut prev = tap_grads.pop().expect("tap grad");
        prev += &gx;
        g = prev;
    }
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

/// Fit per-layer mean and standard deviation of the upsampled feature maps
/// over all training patches. Standard deviations are floored at 1e-8.
pub fn fit_norm_stats<F: Scalar>(
    net: &Network,
    params: &ParamSet<F>,
    patches: &[Array2<F>],
) -> Result<NormStats> {
    if patches.is_empty() {
        return Err(Error::InvalidInput("no patches".into()));
    }
    let mut sum = vec![0.0f64; 7];
    let mut sumsq = vec![0.0f64; 7];
    let mut count = vec![0.0f64; 7];
    for patch in patches {
        let (h, w) = patch.dim();
        let trace = extractor_forward(net, params, &patch.view())?;
        let features = features_from_trace(&trace, None, h, w);
        for (k, f) in features.iter().enumerate() {
            for v in f.iter() {
                let v = v.as_f64();
                sum[k] += v;
                sumsq[k] += v * v;
            }
            count[k] += f.len() as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, n)| s / n).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&count)
        .zip(&mean)
        .map(|((sq, n), m)| ((sq / n - m * m).max(0.0)).sqrt().max(1e-8))
        .collect();
    Ok(NormStats { mean, std })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One training tile: a raw intensity patch and the per-pixel target bins.
struct Tile {
    raw: Array2<f64>,
    targets: Array2<usize>,
}

/// Loss trace entry: one Adam step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

pub struct TrainOutput {
    pub checkpoint: ModelCheckpoint,
    pub loss_trace: Vec<LossRecord>,
}

/// Adam and epoch state carried inside a checkpoint for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step_count: u64,
    pub next_epoch: usize,
    pub first_moment: Vec<ArrayD<f64>>,
    pub second_moment: Vec<ArrayD<f64>>,
}

/// Everything needed to run inference, in one self-describing file.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub extractor: ExtractorConfig,
    pub translator: TranslatorConfig,
    pub params: ParamSet<f64>,
    pub norm_stats: NormStats,
    pub quantizers: [QuantizerTable; 9],
    pub channel: Channel,
    pub patch: usize,
    pub db_floor: f64,
    pub train_state: Option<TrainState>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cut a (GRAY1 intensity, COV9 truth) pair into training tiles and encode
/// the per-pixel targets with the given tables.
fn tile_pairs(
    pairs: &[(&PolRaster, &PolRaster)],
    patch: usize,
    tables: &[QuantizerTable; 9],
) -> Result<Vec<Tile>> {
    let mut tiles = Vec::new();
    for (intensity, truth) in pairs {
        validate_pair(intensity, truth)?;
        let (w, h) = (intensity.width as usize, intensity.height as usize);
        let ph = patch.min(h);
        let pw = patch.min(w);
        let mut y0 = 0usize;
        while y0 < h {
            let th = ph.min(h - y0);
            let mut x0 = 0usize;
            while x0 < w {
                let tw = pw.min(w - x0);
                if th % 4 != 0 || tw % 4 != 0 {
                    return Err(Error::ShapeMismatch {
                        expected: "tiles divisible by 4".into(),
                        got: format!("{tw}x{th}"),
                    });
                }
                let mut raw = Array2::<f64>::zeros((th, tw));
                let mut targets = Array2::<usize>::zeros((th * tw, 9));
                for y in 0..th {
                    for x in 0..tw {
                        let gx = (x0 + x) as u32;
                        let gy = (y0 + y) as u32;
                        raw[(y, x)] = intensity.get(gx, gy, 0) as f64;
                        let cov = truth.covariance(gx, gy)?;
                        let (feat, _) = cov.normalize()?;
                        let p = feat.params();
                        for (i, &v) in p.iter().enumerate() {
                            targets[(y * tw + x, i)] = tables[i].encode(v);
                        }
                    }
                }
                tiles.push(Tile { raw, targets });
                x0 += tw;
            }
            y0 += th;
        }
    }
    Ok(tiles)
}

fn validate_pair(intensity: &PolRaster, truth: &PolRaster) -> Result<()> {
    if intensity.layout != Layout::Gray1 || truth.layout != Layout::Cov9 {
        return Err(Error::ShapeMismatch {
            expected: "(GRAY1, COV9) pair".into(),
            got: format!("({:?}, {:?})", intensity.layout, truth.layout),
        });
    }
    if intensity.width != truth.width || intensity.height != truth.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", truth.width, truth.height),
            got: format!("{}x{}", intensity.width, intensity.height),
        });
    }
    if intensity.width % 4 != 0 || intensity.height % 4 != 0 {
        return Err(Error::ShapeMismatch {
            expected: "dims divisible by 4".into(),
            got: format!("{}x{}", intensity.width, intensity.height),
        });
    }
    Ok(())
}

/// Fit the nine quantizer tables on the truth parameter planes of the
/// training pairs.
pub fn fit_quantizers(
    pairs: &[(&PolRaster, &PolRaster)],
    bins: usize,
) -> Result<[QuantizerTable; 9]> {
    let mut planes: [Vec<f64>; 9] = std::array::from_fn(|_| Vec::new());
    for (intensity, truth) in pairs {
        validate_pair(intensity, truth)?;
        for y in 0..truth.height {
            for x in 0..truth.width {
                let (feat, _) = truth.covariance(x, y)?.normalize()?;
                for (i, v) in feat.params().iter().enumerate() {
                    planes[i].push(*v);
                }
            }
        }
    }
    fit_all(&planes, bins)
}

/// Train the full pipeline. `resume_from` continues a previous run: its
/// parameters, statistics, tables, and Adam state are reused and epochs
/// run from where it stopped up to `config.epochs`.
pub fn train(
    pairs: &[(&PolRaster, &PolRaster)],
    extractor: ExtractorConfig,
    translator: TranslatorConfig,
    config: &TrainConfig,
    channel: Channel,
    resume_from: Option<ModelCheckpoint>,
) -> Result<TrainOutput> {
    config.validate()?;
    match config.precision {
        Precision::Double => train_impl::<f64>(pairs, extractor, translator, config, channel, resume_from),
        Precision::Single => train_impl::<f32>(pairs, extractor, translator, config, channel, resume_from),
    }
}

fn train_impl<F: Scalar>(
    pairs: &[(&PolRaster, &PolRaster)],
    extractor: ExtractorConfig,
    translator: TranslatorConfig,
    config: &TrainConfig,
    channel: Channel,
    resume_from: Option<ModelCheckpoint>,
) -> Result<TrainOutput> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }

    let (net, mut params, stats, tables, mut adam, start_epoch) = match resume_from {
        Some(ckpt) => {
            if ckpt.extractor != extractor || ckpt.translator != translator {
                return Err(Error::InvalidConfig(
                    "resume checkpoint disagrees with requested configs".into(),
                ));
            }
            let net = Network::for_params(extractor, translator)?;
            let params: ParamSet<F> = ckpt.params.convert();
            let mut adam = AdamState::new(&params);
            adam.learning_rate = config.learning_rate;
            let state = ckpt
                .train_state
                .as_ref()
                .ok_or_else(|| Error::InvalidCheckpoint("no training state to resume".into()))?;
            adam.step_count = state.step_count;
            adam.first_moment = state.first_moment.iter().map(|a| a.mapv(F::from_f64)).collect();
            adam.second_moment = state.second_moment.iter().map(|a| a.mapv(F::from_f64)).collect();
            (
                net,
                params,
                ckpt.norm_stats.clone(),
                ckpt.quantizers.clone(),
                adam,
                state.next_epoch,
            )
        }
        None => {
            let (net, params) = Network::init::<F>(extractor, translator, config.seed)?;
            let tables = fit_quantizers(pairs, translator.bins)?;
            let inputs: Vec<Array2<F>> = pairs
                .iter()
                .map(|(intensity, _)| {
                    let raw = raster_to_array(intensity);
                    preprocess_patch::<F>(&raw.view(), config.db_floor)
                })
                .collect::<Result<_>>()?;
            let stats = fit_norm_stats(&net, &params, &inputs)?;
            let mut adam = AdamState::new(&params);
            adam.learning_rate = config.learning_rate;
            (net, params, stats, tables, adam, 0)
        }
    };

    let tiles = tile_pairs(pairs, config.patch, &tables)?;
    let mut trace = Vec::new();

    for epoch in start_epoch..config.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ splitmix64(epoch as u64 + 1)));
        let mut tile_order: Vec<usize> = (0..tiles.len()).collect();
        tile_order.shuffle(&mut rng);
        for &ti in &tile_order {
            let tile = &tiles[ti];
            let (th, tw) = tile.raw.dim();
            let input = preprocess_patch::<F>(&tile.raw.view(), config.db_floor)?;
            let mut order: Vec<usize> = (0..th * tw).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_pixels) {
                let pixels: Vec<(usize, usize)> =
                    chunk.iter().map(|&p| (p / tw, p % tw)).collect();
                let ext = extractor_forward(&net, &params, &input.view())?;
                let features = features_from_trace(&ext, Some(&stats), th, tw);
                let hyper = hypercolumn_batch(&input.view(), &features, &pixels);
                let tr = translator_forward(&net, &params, hyper)?;
                let targets = Array2::from_shape_fn((pixels.len(), 9), |(i, j)| {
                    tile.targets[(chunk[i], j)]
                });
                let loss = cross_entropy(&tr.probs, &targets)?;
                let logit_grads = cross_entropy_logit_grads(&tr.probs, &targets);
                let mut grads = params.zero_grads();
                backward_batch(
                    &net,
                    &params,
                    &ext,
                    &tr,
                    &logit_grads,
                    &pixels,
                    &stats,
                    (th, tw),
                    &mut grads,
                );
                adam.step(&mut params, &grads);
                trace.push(LossRecord {
                    epoch,
                    step: adam.step_count,
                    loss,
                });
            }
        }
    }

    let train_state = TrainState {
        step_count: adam.step_count,
        next_epoch: config.epochs,
        first_moment: adam.first_moment.iter().map(|a| a.mapv(|v| v.as_f64())).collect(),
        second_moment: adam.second_moment.iter().map(|a| a.mapv(|v| v.as_f64())).collect(),
    };
    let checkpoint = ModelCheckpoint {
        extractor,
        translator,
        params: params.convert(),
        norm_stats: stats,
        quantizers: tables,
        channel,
        patch: config.patch,
        db_floor: config.db_floor,
        train_state: Some(train_state),
    };
    Ok(TrainOutput {
        checkpoint,
        loss_trace: trace,
    })
}

fn raster_to_array(r: &PolRaster) -> Array2<f64> {
    Array2::from_shape_fn((r.height as usize, r.width as usize), |(y, x)| {
        r.get(x as u32, y as u32, 0) as f64
    })
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

pub struct ColorizeOutput {
    pub width: u32,
    pub height: u32,
    /// Reconstructed covariance per pixel, row-major, in full precision.
    pub covariance: Vec<CovarianceMatrix>,
    /// Per-pixel diagnostic bits ([`FLAG_POWER_FALLBACK`],
    /// [`FLAG_DELTA_RENORM`]).
    pub flags: Vec<u32>,
}

impl ColorizeOutput {
    pub fn get(&self, x: u32, y: u32) -> &CovarianceMatrix {
        &self.covariance[(y * self.width + x) as usize]
    }

    pub fn flag(&self, x: u32, y: u32) -> u32 {
        self.flags[(y * self.width + x) as usize]
    }

    /// Pack into the float32 file rasters (COV9 plus the flag plane).
    pub fn to_rasters(&self) -> (PolRaster, PolRaster) {
        let mut cov = PolRaster::new(self.width, self.height, Layout::Cov9);
        let mut flags = PolRaster::new(self.width, self.height, Layout::Gray1);
        for y in 0..self.height {
            for x in 0..self.width {
                cov.set_covariance(x, y, self.get(x, y));
                flags.set(x, y, 0, self.flag(x, y) as f32);
            }
        }
        (cov, flags)
    }
}

/// Reconstruct a covariance raster from a single-channel intensity raster.
///
/// The image is processed as non-overlapping tiles of the checkpoint's
/// training patch size. Per pixel: decode each head (mode by default),
/// clamp and renormalize the δ ratios, clamp |ρ| to 1, repair positive
/// semi-definiteness, recover total power from the unpreprocessed input
/// intensity, and rebuild the covariance.
pub fn colorize(
    intensity: &PolRaster,
    channel: Channel,
    ckpt: &ModelCheckpoint,
    rule: DecodeRule,
) -> Result<ColorizeOutput> {
    if intensity.layout != Layout::Gray1 {
        return Err(Error::ShapeMismatch {
            expected: "GRAY1 input".into(),
            got: format!("{:?}", intensity.layout),
        });
    }
    let (w, h) = (intensity.width as usize, intensity.height as usize);
    if w % 4 != 0 || h % 4 != 0 {
        return Err(Error::ShapeMismatch {
            expected: "dims divisible by 4".into(),
            got: format!("{w}x{h}"),
        });
    }
    let net = Network::for_params(ckpt.extractor, ckpt.translator)?;
    let mut out = ColorizeOutput {
        width: intensity.width,
        height: intensity.height,
        covariance: vec![CovarianceMatrix::zero(); w * h],
        flags: vec![0; w * h],
    };

    let patch = ckpt.patch.min(w).min(h);
    let mut y0 = 0usize;
    while y0 < h {
        let th = patch.min(h - y0);
        let mut x0 = 0usize;
        while x0 < w {
            let tw = patch.min(w - x0);
            colorize_tile(intensity, channel, ckpt, &net, rule, (x0, y0, tw, th), &mut out)?;
            x0 += tw;
        }
        y0 += th;
    }
    Ok(out)
}

fn colorize_tile(
    intensity: &PolRaster,
    channel: Channel,
    ckpt: &ModelCheckpoint,
    net: &Network,
    rule: DecodeRule,
    rect: (usize, usize, usize, usize),
    out: &mut ColorizeOutput,
) -> Result<()> {
    let (x0, y0, tw, th) = rect;
    let mut raw = Array2::<f64>::zeros((th, tw));
    for y in 0..th {
        for x in 0..tw {
            raw[(y, x)] = intensity.get((x0 + x) as u32, (y0 + y) as u32, 0) as f64;
        }
    }
    let input = preprocess_patch::<f64>(&raw.view(), ckpt.db_floor)?;
    let ext = extractor_forward(net, &ckpt.params, &input.view())?;
    let features = features_from_trace(&ext, Some(&ckpt.norm_stats), th, tw);

    let all_pixels: Vec<(usize, usize)> = (0..th * tw).map(|p| (p / tw, p % tw)).collect();
    for batch in all_pixels.chunks(4096) {
        let hyper = hypercolumn_batch(&input.view(), &features, batch);
        let tr = translator_forward(net, &ckpt.params, hyper)?;
        for (row, &(y, x)) in batch.iter().enumerate() {
            let mut decoded = [0.0f64; 9];
            for (j, table) in ckpt.quantizers.iter().enumerate() {
                let probs = tr.probs[j].row(row);
                decoded[j] = table.decode(probs.as_slice().unwrap(), rule)?;
            }
            let mut flag = 0u32;

            let mut delta = [
                decoded[0].clamp(0.0, 1.0),
                decoded[1].clamp(0.0, 1.0),
                decoded[2].clamp(0.0, 1.0),
            ];
            let sum: f64 = delta.iter().sum();
            if sum < 1e-6 {
                delta = [1.0 / 3.0; 3];
                flag |= FLAG_DELTA_RENORM;
            } else {
                for d in delta.iter_mut() {
                    *d /= sum;
                }
            }

            let mut rho = [
                Complex64::new(decoded[3], decoded[4]),
                Complex64::new(decoded[5], decoded[6]),
                Complex64::new(decoded[7], decoded[8]),
            ];
            for r in rho.iter_mut() {
                let n = r.norm();
                if n > 1.0 {
                    *r /= n;
                }
            }

            let (feat, _) = psd_correct(&PolFeature { delta, rho });
            let raw_i = raw[(y, x)];
            let power = match power_from_channel(raw_i, &feat, channel) {
                Ok(p) => p,
                Err(Error::UnrecoverablePower { .. }) => {
                    flag |= FLAG_POWER_FALLBACK;
                    raw_i
                }
                Err(e) => return Err(e),
            };
            let mut cov = CovarianceMatrix::from_feature(&feat, power.max(0.0));
            if flag & FLAG_POWER_FALLBACK == 0 {
                // (I/δ)·δ reproduces I only to rounding; pin the input
                // channel's intensity bit-exactly.
                cov = pin_channel_intensity(&cov, channel, raw_i);
            }
            let idx = (y0 + y) * out.width as usize + (x0 + x);
            out.covariance[idx] = cov;
            out.flags[idx] = flag;
        }
    }
    Ok(())
}

fn pin_channel_intensity(
    cov: &CovarianceMatrix,
    channel: Channel,
    intensity: f64,
) -> CovarianceMatrix {
    let mut d = cov.diag();
    d[channel.diag_index()] = intensity;
    CovarianceMatrix::new(d[0], d[1], d[2], cov.get(0, 1), cov.get(0, 2), cov.get(1, 2))
        .expect("pinning a nonnegative intensity keeps the matrix valid")
}

// ---------------------------------------------------------------------------
// End-to-end gradient check
// ---------------------------------------------------------------------------

/// Finite-difference validation of the complete network (extractor,
/// normalization, upsampling, hyper-columns, translator, loss) at an
/// arbitrary scale. Returns the maximum per-array-scaled relative error.
pub fn end_to_end_grad_check(
    extractor: ExtractorConfig,
    translator: TranslatorConfig,
    patch_size: usize,
    batch: usize,
    seed: u64,
    h: f64,
    samples_per_array: usize,
) -> Result<f64> {
    let (net, mut params) = Network::init::<f64>(extractor, translator, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xE2E));
    let patch = Array2::from_shape_simple_fn((patch_size, patch_size), || rng.gen_range(0.0..1.0));
    let stats = fit_norm_stats(&net, &params, std::slice::from_ref(&patch))?;
    let mut order: Vec<usize> = (0..patch_size * patch_size).collect();
    order.shuffle(&mut rng);
    let pixels: Vec<(usize, usize)> = order
        .iter()
        .take(batch)
        .map(|&p| (p / patch_size, p % patch_size))
        .collect();
    let targets = Array2::from_shape_simple_fn((pixels.len(), 9), || {
        rng.gen_range(0..translator.bins)
    });

    let loss_of = |p: &ParamSet<f64>| -> f64 {
        let ext = extractor_forward(&net, p, &patch.view()).unwrap();
        let features = features_from_trace(&ext, Some(&stats), patch_size, patch_size);
        let hyper = hypercolumn_batch(&patch.view(), &features, &pixels);
        let tr = translator_forward(&net, p, hyper).unwrap();
        cross_entropy(&tr.probs, &targets).unwrap()
    };

    let ext = extractor_forward(&net, &params, &patch.view())?;
    let features = features_from_trace(&ext, Some(&stats), patch_size, patch_size);
    let hyper = hypercolumn_batch(&patch.view(), &features, &pixels);
    let tr = translator_forward(&net, &params, hyper)?;
    let logit_grads = cross_entropy_logit_grads(&tr.probs, &targets);
    let mut grads = params.zero_grads();
    backward_batch(
        &net,
        &params,
        &ext,
        &tr,
        &logit_grads,
        &pixels,
        &stats,
        (patch_size, patch_size),
        &mut grads,
    );
    Ok(crate::neuralnet::finite_diff_max_rel_error(
        &mut params,
        &grads,
        loss_of,
        h,
        samples_per_array,
        splitmix64(seed ^ 0xFD),
    ))
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

fn write_section(w: &mut impl Write, name: &str, payload: &[u8]) -> Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

fn write_arrays(buf: &mut Vec<u8>, names: Option<&ParamSet<f64>>, arrays: &[ArrayD<f64>]) {
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (i, a) in arrays.iter().enumerate() {
        let name = names.map_or(String::new(), |p| p.name(i).to_string());
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(a.ndim() as u8);
        for &d in a.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::TruncatedPayload);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn read_arrays(cur: &mut Cursor<'_>) -> Result<(Vec<String>, Vec<ArrayD<f64>>)> {
    let count = cur.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::InvalidCheckpoint("non-utf8 array name".into()))?;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = cur.f64_vec(len)?;
        arrays.push(
            ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?,
        );
        names.push(name);
    }
    Ok((names, arrays))
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;

        let mut config = String::new();
        config.push_str(&format!(
            "extractor_widths = {}\n",
            join_usizes(&self.extractor.widths)
        ));
        config.push_str(&format!("trunk = {}\n", join_usizes(&self.translator.trunk)));
        config.push_str(&format!("head_hidden = {}\n", self.translator.head_hidden));
        config.push_str(&format!("heads = {}\n", self.translator.heads));
        config.push_str(&format!("bins = {}\n", self.translator.bins));
        config.push_str(&format!("patch = {}\n", self.patch));
        config.push_str(&format!(
            "channel = {}\n",
            match self.channel {
                Channel::Hh => "hh",
                Channel::Hv => "hv",
                Channel::Vv => "vv",
            }
        ));
        config.push_str(&format!("db_floor = {:?}\n", self.db_floor));
        write_section(&mut w, "config", config.as_bytes())?;

        let mut buf = Vec::new();
        write_arrays(&mut buf, Some(&self.params), self.params.arrays());
        write_section(&mut w, "params", &buf)?;

        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.norm_stats.mean.len() as u32).to_le_bytes());
        for v in self.norm_stats.mean.iter().chain(self.norm_stats.std.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_section(&mut w, "normstats", &buf)?;

        let mut buf = Vec::new();
        buf.push(9u8);
        for t in &self.quantizers {
            buf.push(t.param_id as u8);
            buf.push(t.uniform_fallback as u8);
            buf.extend_from_slice(&(t.bins() as u32).to_le_bytes());
            for v in t.edges.iter().chain(t.centers.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_section(&mut w, "quantizers", &buf)?;

        if let Some(state) = &self.train_state {
            let mut buf = Vec::new();
            buf.extend_from_slice(&state.step_count.to_le_bytes());
            buf.extend_from_slice(&(state.next_epoch as u32).to_le_bytes());
            write_arrays(&mut buf, None, &state.first_moment);
            write_arrays(&mut buf, None, &state.second_moment);
            write_section(&mut w, "trainstate", &buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 6 {
            return Err(Error::TruncatedPayload);
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnknownVersion(version));
        }

        let mut sections = std::collections::HashMap::new();
        let mut cur = Cursor {
            data: &bytes,
            pos: 6,
        };
        while cur.pos < bytes.len() {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::InvalidCheckpoint("non-utf8 section name".into()))?;
            let payload_len = cur.u64()? as usize;
            let payload = cur.take(payload_len)?;
            sections.insert(name, payload);
        }

        let config_text = std::str::from_utf8(
            sections
                .get("config")
                .ok_or_else(|| Error::InvalidCheckpoint("missing config".into()))?,
        )
        .map_err(|_| Error::InvalidCheckpoint("non-utf8 config".into()))?;
        let kv = parse_kv(config_text)?;
        let widths = parse_usizes::<7>(get(&kv, "extractor_widths")?)?;
        let trunk = parse_usizes::<2>(get(&kv, "trunk")?)?;
        let extractor = ExtractorConfig { widths };
        let translator = TranslatorConfig {
            trunk,
            head_hidden: get(&kv, "head_hidden")?.parse().map_err(bad_config)?,
            heads: get(&kv, "heads")?.parse().map_err(bad_config)?,
            bins: get(&kv, "bins")?.parse().map_err(bad_config)?,
        };
        let patch: usize = get(&kv, "patch")?.parse().map_err(bad_config)?;
        let channel = match get(&kv, "channel")? {
            "hh" => Channel::Hh,
            "hv" => Channel::Hv,
            "vv" => Channel::Vv,
            other => {
                return Err(Error::InvalidCheckpoint(format!("bad channel {other}")));
            }
        };
        let db_floor: f64 = get(&kv, "db_floor")?.parse().map_err(bad_config)?;

        let mut cur = Cursor {
            data: sections
                .get("params")
                .ok_or_else(|| Error::InvalidCheckpoint("missing params".into()))?,
            pos: 0,
        };
        let (names, arrays) = read_arrays(&mut cur)?;
        let mut params = ParamSet::new();
        for (n, a) in names.into_iter().zip(arrays) {
            params.push(n, a);
        }
        let net = Network::for_params(extractor, translator)?;
        let expected = net.conv.len() * 2 + 4 + net.heads.len() * 4;
        if params.len() != expected {
            return Err(Error::InvalidCheckpoint(format!(
                "expected {expected} parameter arrays, found {}",
                params.len()
            )));
        }

        let mut cur = Cursor {
            data: sections
                .get("normstats")
                .ok_or_else(|| Error::InvalidCheckpoint("missing normstats".into()))?,
            pos: 0,
        };
        let n = cur.u32()? as usize;
        let mean = cur.f64_vec(n)?;
        let std = cur.f64_vec(n)?;
        let norm_stats = NormStats { mean, std };

        let mut cur = Cursor {
            data: sections
                .get("quantizers")
                .ok_or_else(|| Error::InvalidCheckpoint("missing quantizers".into()))?,
            pos: 0,
        };
        let count = cur.u8()? as usize;
        if count != 9 {
            return Err(Error::InvalidCheckpoint(format!("{count} quantizers")));
        }
        let mut quantizers = Vec::with_capacity(9);
        for _ in 0..9 {
            let param_id = cur.u8()? as usize;
            let uniform_fallback = cur.u8()? != 0;
            let k = cur.u32()? as usize;
            let edges = cur.f64_vec(k + 1)?;
            let centers = cur.f64_vec(k)?;
            quantizers.push(QuantizerTable {
                param_id,
                edges,
                centers,
                uniform_fallback,
            });
        }
        let quantizers: [QuantizerTable; 9] = quantizers
            .try_into()
            .map_err(|_| Error::InvalidCheckpoint("quantizer count".into()))?;

        let train_state = match sections.get("trainstate") {
            Some(payload) => {
                let mut cur = Cursor { data: payload, pos: 0 };
                let step_count = cur.u64()?;
                let next_epoch = cur.u32()? as usize;
                let (_, first_moment) = read_arrays(&mut cur)?;
                let (_, second_moment) = read_arrays(&mut cur)?;
                Some(TrainState {
                    step_count,
                    next_epoch,
                    first_moment,
                    second_moment,
                })
            }
            None => None,
        };

        Ok(Self {
            extractor,
            translator,
            params,
            norm_stats,
            quantizers,
            channel,
            patch,
            db_floor,
            train_state,
        })
    }
}

fn bad_config<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidCheckpoint(e.to_string())
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usizes<const N: usize>(s: &str) -> Result<[usize; N]> {
    let vals: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(bad_config))
        .collect::<Result<_>>()?;
    vals.try_into()
        .map_err(|_| Error::InvalidCheckpoint(format!("expected {N} values in `{s}`")))
}

fn parse_kv(text: &str) -> Result<std::collections::HashMap<String, String>> {
    let mut out = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("bad line `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn get<'a>(kv: &'a std::collections::HashMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::InvalidCheckpoint(format!("missing key {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{default_archetypes, render_scene, RegionModel, SceneSpec};
    use approx::assert_relative_eq;
    use tempfile::tempdir;

    fn tiny_extractor() -> ExtractorConfig {
        ExtractorConfig {
            widths: [2, 2, 3, 3, 4, 4, 4],
        }
    }

    fn tiny_translator(bins: usize) -> TranslatorConfig {
        TranslatorConfig {
            trunk: [10, 8],
            head_hidden: 6,
            heads: 9,
            bins,
        }
    }

    fn scene(seed: u64, size: u32) -> crate::synthdata::Scene {
        render_scene(&SceneSpec {
            width: size,
            height: size,
            seed,
            region_model: RegionModel::Voronoi,
            classes: default_archetypes(),
            looks: 9,
        })
        .unwrap()
    }

    #[test]
    fn preprocess_endpoints() {
        assert_relative_eq!(preprocess_intensity(1.0, -25.0).unwrap(), 1.0);
        assert_relative_eq!(
            preprocess_intensity(10f64.powf(-2.5), -25.0).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(preprocess_intensity(10.0, -25.0).unwrap(), 1.0);
        assert_eq!(preprocess_intensity(0.0, -25.0).unwrap(), 0.0);
        assert!(preprocess_intensity(-0.1, -25.0).is_err());
    }

    #[test]
    fn hypercolumn_lengths() {
        assert_eq!(ExtractorConfig::desk().feature_dim(), 145);
        assert_eq!(ExtractorConfig::paper().feature_dim(), 1153);
        assert_eq!(tiny_extractor().feature_dim(), 23);
    }

    #[test]
    fn extractor_shapes_and_constant_input() {
        let (net, params) = Network::init::<f64>(tiny_extractor(), tiny_translator(8), 1).unwrap();
        let patch = Array2::from_elem((64, 64), 0.5);
        let trace = extractor_forward(&net, &params, &patch.view()).unwrap();
        // Stage resolutions: full, full, half, half, quarter ×3.
        let dims: Vec<(usize, usize, usize)> = trace.taps.iter().map(|t| t.dim()).collect();
        assert_eq!(dims[0], (2, 64, 64));
        assert_eq!(dims[1], (2, 64, 64));
        assert_eq!(dims[2], (3, 32, 32));
        assert_eq!(dims[3], (3, 32, 32));
        assert_eq!(dims[4], (4, 16, 16));
        assert_eq!(dims[5], (4, 16, 16));
        assert_eq!(dims[6], (4, 16, 16));
        // Constant input: by translation invariance the maps are constant
        // wherever the receptive field stays clear of the zero padding
        // (about 21 input pixels); compare positions near each map center.
        for tap in &trace.taps {
            let (c, th, _) = tap.dim();
            let mid = th / 2;
            for ch in 0..c {
                let v = tap[(ch, mid, mid)];
                assert_relative_eq!(tap[(ch, mid, mid + 1)], v, epsilon = 1e-12);
                assert_relative_eq!(tap[(ch, mid - 1, mid)], v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn normalized_features_have_zero_mean_unit_std() {
        let (net, params) = Network::init::<f64>(tiny_extractor(), tiny_translator(8), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_simple_fn((16, 16), || rng.gen_range(0.0..1.0)))
            .collect();
        let stats = fit_norm_stats(&net, &params, &patches).unwrap();
        let mut sum = vec![0.0f64; 7];
        let mut sumsq = vec![0.0f64; 7];
        let mut count = vec![0.0f64; 7];
        for patch in &patches {
            let trace = extractor_forward(&net, &params, &patch.view()).unwrap();
            let features = features_from_trace(&trace, Some(&stats), 16, 16);
            for (k, f) in features.iter().enumerate() {
                for v in f.iter() {
                    sum[k] += v;
                    sumsq[k] += v * v;
                }
                count[k] += f.len() as f64;
            }
        }
        for k in 0..7 {
            let mean = sum[k] / count[k];
            let std = (sumsq[k] / count[k] - mean * mean).sqrt();
            assert!(mean.abs() < 1e-6, "layer {k} mean {mean}");
            assert!((std - 1.0).abs() < 1e-6, "layer {k} std {std}");
        }
    }

    #[test]
    fn norm_stats_duplicate_patches_match_single() {
        let (net, params) = Network::init::<f64>(tiny_extractor(), tiny_translator(8), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patch = Array2::from_shape_simple_fn((16, 16), || rng.gen_range(0.0..1.0));
        let single = fit_norm_stats(&net, &params, std::slice::from_ref(&patch)).unwrap();
        let many =
            fit_norm_stats(&net, &params, &[patch.clone(), patch.clone(), patch]).unwrap();
        for k in 0..7 {
            assert_relative_eq!(single.mean[k], many.mean[k], max_relative = 1e-12);
            assert_relative_eq!(single.std[k], many.std[k], max_relative = 1e-12);
        }
    }

    #[test]
    fn norm_stats_constant_layer_floors_sigma() {
        let (net, params) = Network::init::<f64>(tiny_extractor(), tiny_translator(8), 6).unwrap();
        // All-zero input: taps are relu(bias) = 0 everywhere (zero biases),
        // variance 0 → sigma floored, normalized output 0.
        let patch = Array2::<f64>::zeros((16, 16));
        let stats = fit_norm_stats(&net, &params, std::slice::from_ref(&patch)).unwrap();
        for k in 0..7 {
            assert_eq!(stats.std[k], 1e-8, "layer {k}");
        }
        let trace = extractor_forward(&net, &params, &patch.view()).unwrap();
        let features = features_from_trace(&trace, Some(&stats), 16, 16);
        for f in &features {
            assert!(f.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_image_gives_identical_hypercolumns() {
        let (net, params) = Network::init::<f64>(tiny_extractor(), tiny_translator(8), 7).unwrap();
        let patch = Array2::from_elem((64, 64), 0.3);
        let stats = fit_norm_stats(&net, &params, std::slice::from_ref(&patch)).unwrap();
        let trace = extractor_forward(&net, &params, &patch.view()).unwrap();
        let features = features_from_trace(&trace, Some(&stats), 64, 64);
        // Central pixels share a fully interior receptive field.
        let a = build_hypercolumn(&patch.view(), &features, 30, 30);
        let b = build_hypercolumn(&patch.view(), &features, 33, 31);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn translator_zero_weights_give_uniform_heads() {
        let ext = tiny_extractor();
        let tr = tiny_translator(8);
        let (net, mut params) = Network::init::<f64>(ext, tr, 8).unwrap();
        for a in params.arrays_mut() {
            a.fill(0.0);
        }
        let hyper = Array2::from_elem((5, ext.feature_dim()), 0.7);
        let out = translator_forward(&net, &params, hyper).unwrap();
        assert_eq!(out.probs.len(), 9);
        for p in &out.probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                for &v in row {
                    assert_relative_eq!(v, 1.0 / 8.0, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn translator_is_deterministic() {
        let ext = tiny_extractor();
        let (net, params) = Network::init::<f64>(ext, tiny_translator(8), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let hyper = Array2::from_shape_simple_fn((4, ext.feature_dim()), || rng.gen_range(-1.0..1.0));
        let a = translator_forward(&net, &params, hyper.clone()).unwrap();
        let b = translator_forward(&net, &params, hyper).unwrap();
        for (pa, pb) in a.probs.iter().zip(&b.probs) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn translator_rejects_wrong_width() {
        let (net, params) = Network::init::<f64>(tiny_extractor(), tiny_translator(8), 11).unwrap();
        let hyper = Array2::<f64>::zeros((2, 99));
        assert!(translator_forward(&net, &params, hyper).is_err());
    }

    #[test]
    fn end_to_end_gradients_at_toy_scale() {
        let err = end_to_end_grad_check(
            tiny_extractor(),
            tiny_translator(8),
            8,
            16,
            123,
            1e-5,
            12,
        )
        .unwrap();
        assert!(err <= 1e-5, "end-to-end gradient error {err}");
    }

    fn quick_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_pixels: 256,
            patch: 16,
            epochs,
            seed: 7,
            precision: Precision::Double,
            learning_rate: 1e-4,
            db_floor: -25.0,
        }
    }

    #[test]
    fn initial_loss_is_near_uniform_prediction() {
        let s = scene(21, 16);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let out = train(
            &pairs,
            tiny_extractor(),
            tiny_translator(32),
            &quick_train_config(1),
            Channel::Vv,
            None,
        )
        .unwrap();
        let uniform = 32f64.ln() / 32.0;
        let first = out.loss_trace.first().unwrap().loss;
        assert!(
            (first - uniform).abs() / uniform < 0.05,
            "initial loss {first} vs uniform {uniform}"
        );
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let s = scene(22, 16);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let cfg = quick_train_config(2);
        let a = train(&pairs, tiny_extractor(), tiny_translator(32), &cfg, Channel::Vv, None)
            .unwrap();
        let b = train(&pairs, tiny_extractor(), tiny_translator(32), &cfg, Channel::Vv, None)
            .unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn resume_reproduces_uninterrupted_trace() {
        let s = scene(23, 16);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let full = train(
            &pairs,
            tiny_extractor(),
            tiny_translator(32),
            &quick_train_config(4),
            Channel::Vv,
            None,
        )
        .unwrap();
        let part = train(
            &pairs,
            tiny_extractor(),
            tiny_translator(32),
            &quick_train_config(2),
            Channel::Vv,
            None,
        )
        .unwrap();
        let resumed = train(
            &pairs,
            tiny_extractor(),
            tiny_translator(32),
            &quick_train_config(4),
            Channel::Vv,
            Some(part.checkpoint),
        )
        .unwrap();
        let mut combined = part.loss_trace.clone();
        combined.extend(resumed.loss_trace.iter().copied());
        assert_eq!(combined, full.loss_trace);
        assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    }

    #[test]
    fn single_precision_training_runs_deterministically() {
        let s = scene(24, 16);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let mut cfg = quick_train_config(1);
        cfg.precision = Precision::Single;
        let a = train(&pairs, tiny_extractor(), tiny_translator(32), &cfg, Channel::Vv, None)
            .unwrap();
        let b = train(&pairs, tiny_extractor(), tiny_translator(32), &cfg, Channel::Vv, None)
            .unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert!(a.loss_trace.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn colorize_output_is_psd_and_intensity_consistent() {
        let s = scene(25, 16);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let out = train(
            &pairs,
            tiny_extractor(),
            tiny_translator(32),
            &quick_train_config(1),
            Channel::Vv,
            None,
        )
        .unwrap();
        let col = colorize(&s.intensity_vv, Channel::Vv, &out.checkpoint, DecodeRule::Mode)
            .unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let cov = col.get(x, y);
                let (feat, _) = cov.normalize().unwrap();
                assert!(
                    crate::polmath::psd_check(&feat, 1e-9).satisfied,
                    "pixel ({x},{y})"
                );
                if col.flag(x, y) & FLAG_POWER_FALLBACK == 0 {
                    let input = s.intensity_vv.get(x, y, 0) as f64;
                    assert_eq!(cov.diag()[2], input, "pixel ({x},{y})");
                }
            }
        }
        // The packed raster roundtrips through the file format.
        let (cov_raster, flag_raster) = col.to_rasters();
        assert_eq!(cov_raster.layout, Layout::Cov9);
        assert_eq!(flag_raster.pixels(), 256);
    }

    #[test]
    fn colorize_constant_image_is_constant() {
        let s = scene(26, 16);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let mut cfg = quick_train_config(1);
        cfg.patch = 64;
        let out = train(
            &pairs,
            tiny_extractor(),
            tiny_translator(32),
            &cfg,
            Channel::Vv,
            None,
        )
        .unwrap();
        let mut flat = PolRaster::new(64, 64, Layout::Gray1);
        for v in flat.data.iter_mut() {
            *v = 0.2;
        }
        let col = colorize(&flat, Channel::Vv, &out.checkpoint, DecodeRule::Mode).unwrap();
        let first = *col.get(32, 32);
        // Central pixels have fully interior receptive fields.
        for (x, y) in [(30u32, 33u32), (29, 29), (34, 31)] {
            let cov = col.get(x, y);
            assert!(cov.rel_frobenius(&first) < 1e-9, "pixel ({x},{y})");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_and_colorize_identical() {
        let dir = tempdir().unwrap();
        let s = scene(27, 16);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let out = train(
            &pairs,
            tiny_extractor(),
            tiny_translator(32),
            &quick_train_config(2),
            Channel::Vv,
            None,
        )
        .unwrap();
        let path = dir.path().join("model.pckp");
        out.checkpoint.save(&path).unwrap();
        let loaded = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(loaded.params, out.checkpoint.params);
        assert_eq!(loaded.quantizers, out.checkpoint.quantizers);
        assert_eq!(loaded.norm_stats, out.checkpoint.norm_stats);
        assert_eq!(loaded.db_floor, out.checkpoint.db_floor);
        assert_eq!(
            loaded.train_state.as_ref().unwrap().step_count,
            out.checkpoint.train_state.as_ref().unwrap().step_count
        );

        let a = colorize(&s.intensity_vv, Channel::Vv, &out.checkpoint, DecodeRule::Mode)
            .unwrap();
        let b = colorize(&s.intensity_vv, Channel::Vv, &loaded, DecodeRule::Mode).unwrap();
        assert_eq!(a.covariance, b.covariance);
        assert_eq!(a.flags, b.flags);

        // Save the loaded checkpoint again: byte-identical files.
        let path2 = dir.path().join("model2.pckp");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempdir().unwrap();
        let s = scene(28, 16);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let out = train(
            &pairs,
            tiny_extractor(),
            tiny_translator(32),
            &quick_train_config(1),
            Channel::Vv,
            None,
        )
        .unwrap();
        let path = dir.path().join("model.pckp");
        out.checkpoint.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ModelCheckpoint::load(&path), Err(Error::BadMagic)));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(ModelCheckpoint::load(&path).is_err());
    }

    /// Memorization: a small patch trained long enough reconstructs its own
    /// training scene with small median Bartlett distance.
    #[test]
    fn memorization_colorize_matches_truth() {
        let s = scene(29, 12);
        let pairs = [(&s.intensity_vv, &s.covariance)];
        let cfg = TrainConfig {
            batch_pixels: 144,
            patch: 12,
            epochs: 2000,
            seed: 3,
            precision: Precision::Double,
            learning_rate: 1e-4,
            db_floor: -25.0,
        };
        let translator = TranslatorConfig {
            trunk: [48, 32],
            head_hidden: 32,
            heads: 9,
            bins: 32,
        };
        let out = train(
            &pairs,
            tiny_extractor(),
            translator,
            &cfg,
            Channel::Vv,
            None,
        )
        .unwrap();
        let first = out.loss_trace.first().unwrap().loss;
        let last = out.loss_trace.last().unwrap().loss;
        assert!(
            last < 0.1 * first,
            "overfit run: loss {last} from {first}"
        );
        let col = colorize(&s.intensity_vv, Channel::Vv, &out.checkpoint, DecodeRule::Mode)
            .unwrap();
        let mut distances: Vec<f64> = Vec::new();
        for y in 0..12 {
            for x in 0..12 {
                let d = crate::evalmetrics::bartlett(
                    col.get(x, y),
                    &s.covariance.covariance(x, y).unwrap(),
                )
                .unwrap();
                distances.push(d);
            }
        }
        distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = distances[distances.len() / 2];
        assert!(median < 0.5, "median Bartlett {median}");
    }
}
