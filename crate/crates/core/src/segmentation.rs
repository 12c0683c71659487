//! Downstream semantic segmentation: a U-net style encoder-decoder trained
//! with masked pixelwise cross-entropy, patchwise prediction with
//! probability averaging, and IoU scoring.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Group, ParamSet, Var};
use crate::error::{Error, Result};
use crate::imaging::{stitch, Class, DomainImage, LabelMap, PatchGrid};
use crate::nn::{Adam, Conv2d, ConvSpec, ConvTranspose2d, Init};
use crate::tensor::{Scalar, Tensor};

/// Foreground classes predicted by the network (void is never predicted).
pub const N_CLASSES: usize = 3;

/// Number of 2x downsampling stages.
pub const DEPTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub overlap: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            epochs: 35,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 32,
            patch_size: 256,
            overlap: 32,
            width: 64,
            seed: 0,
        }
    }
}

impl SegConfig {
    /// Reduced setting for single-CPU runs on 64-pixel patches.
    pub fn desk() -> Self {
        SegConfig {
            epochs: 8,
            lr: 1e-3,
            batch_size: 8,
            patch_size: 64,
            overlap: 8,
            width: 16,
            ..SegConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.width == 0 {
            return Err(Error::Config(
                "epochs, batch_size and width must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        let div = 1 << DEPTH;
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {div}",
                self.patch_size
            )));
        }
        if self.overlap >= self.patch_size {
            return Err(Error::Config(
                "overlap must be smaller than patch_size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new<R: Rng + ?Sized>(
        p: &mut ParamSet<f32>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let g = Group::GENERATOR;
        DoubleConv {
            a: Conv2d::new(
                p,
                &format!("{name}.a"),
                g,
                ConvSpec::new(c_in, c_out, 3, 1, 1),
                Init::He,
                rng,
            ),
            b: Conv2d::new(
                p,
                &format!("{name}.b"),
                g,
                ConvSpec::new(c_out, c_out, 3, 1, 1),
                Init::He,
                rng,
            ),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.a.forward(g, x);
        let h = g.relu(h);
        let h = self.b.forward(g, h);
        g.relu(h)
    }
}

/// Encoder-decoder with skip connections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNet {
    width: usize,
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<ConvTranspose2d>,
    merge: Vec<DoubleConv>,
    head: Conv2d,
}

impl UNet {
    pub fn build<R: Rng + ?Sized>(width: usize, params: &mut ParamSet<f32>, rng: &mut R) -> Self {
        let ch = |l: usize| width << l;
        let mut down = Vec::new();
        for l in 0..DEPTH {
            let c_in = if l == 0 { 3 } else { ch(l - 1) };
            down.push(DoubleConv::new(
                params,
                &format!("down{l}"),
                c_in,
                ch(l),
                rng,
            ));
        }
        let bottom = DoubleConv::new(params, "bottom", ch(DEPTH - 1), ch(DEPTH), rng);
        let mut up = Vec::new();
        let mut merge = Vec::new();
        for l in (0..DEPTH).rev() {
            up.push(ConvTranspose2d::new(
                params,
                &format!("up{l}"),
                Group::GENERATOR,
                ConvSpec::new(ch(l + 1), ch(l), 2, 2, 0),
                Init::He,
                rng,
            ));
            merge.push(DoubleConv::new(
                params,
                &format!("merge{l}"),
                2 * ch(l),
                ch(l),
                rng,
            ));
        }
        let head = Conv2d::new(
            params,
            "head",
            Group::GENERATOR,
            ConvSpec::new(width, N_CLASSES, 1, 1, 0),
            Init::He,
            rng,
        );
        UNet {
            width,
            down,
            bottom,
            up,
            merge,
            head,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Class logits `[3, H, W]` for a `[3, H, W]` patch.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let mut skips = Vec::with_capacity(DEPTH);
        let mut h = x;
        for block in &self.down {
            h = block.forward(g, h);
            skips.push(h);
            h = g.max_pool2(h);
        }
        h = self.bottom.forward(g, h);
        for (upc, block) in self.up.iter().zip(&self.merge) {
            let u = upc.forward(g, h);
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat(skip, u);
            h = block.forward(g, cat);
        }
        self.head.forward(g, h)
    }
}

/// Trained segmenter and the tiling it expects.
#[derive(Clone, Debug)]
pub struct SegmenterWeights {
    pub net: UNet,
    pub params: ParamSet<f32>,
    pub patch_size: usize,
    pub overlap: usize,
}

impl SegmenterWeights {
    pub fn new(cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let net = UNet::build(cfg.width, &mut params, rng);
        SegmenterWeights {
            net,
            params,
            patch_size: cfg.patch_size,
            overlap: cfg.overlap,
        }
    }

    /// Softmax class probabilities `[3, h, w]` of one patch.
    pub fn patch_probabilities(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = patch.dims3()?;
        let div = 1 << DEPTH;
        if c != 3 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "segmenter needs 3 x (multiple of {div}) patches, got {:?}",
                patch.shape()
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(patch.clone());
        let logits = self.net.forward(&mut g, x);
        let lv = g.value(logits);
        let plane = h * w;
        let mut out = Tensor::zeros(&[N_CLASSES, h, w]);
        let mut buf = [0.0f32; N_CLASSES];
        for p in 0..plane {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = lv.data()[k * plane + p];
            }
            let (_, probs) = crate::autograd::log_softmax_parts(&buf);
            for (k, pr) in probs.into_iter().enumerate() {
                out.data_mut()[k * plane + p] = pr;
            }
        }
        Ok(out)
    }

    /// Overlap-averaged class probabilities of a whole image.
    pub fn probabilities(&self, image: &DomainImage) -> Result<Tensor<f32>> {
        let grid = PatchGrid::new(image.height(), image.width(), self.patch_size, self.overlap)?;
        let probs: Vec<Tensor<f32>> = (0..grid.len())
            .into_par_iter()
            .map(|i| self.patch_probabilities(&grid.crop(image.pixels(), i)))
            .collect::<Result<_>>()?;
        stitch(&probs, &grid)
    }
}

/// Per-pixel argmax of `[3, H, W]` scores as a class map (classes 1..=3).
pub fn argmax_map(scores: &Tensor<f32>) -> Result<LabelMap> {
    let (k, h, w) = scores.dims3()?;
    let plane = h * w;
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if scores.data()[c * plane + p] > scores.data()[best * plane + p] {
                    best = c;
                }
            }
            best as u8 + 1
        })
        .collect();
    LabelMap::new(h, w, data)
}

pub fn predict(image: &DomainImage, weights: &SegmenterWeights) -> Result<LabelMap> {
    argmax_map(&weights.probabilities(image)?)
}

/// Rotates a square patch by `quarter_turns * 90` degrees counter-clockwise,
/// then mirrors it left-right when `flip` is set. Labels follow the pixels.
pub fn transform(
    pixels: &Tensor<f32>,
    labels: &LabelMap,
    quarter_turns: u8,
    flip: bool,
) -> Result<(Tensor<f32>, LabelMap)> {
    let (c, h, w) = pixels.dims3()?;
    if h != w || labels.height() != h || labels.width() != w {
        return Err(Error::Shape(format!(
            "augmentation needs a square patch with matching labels, got {h}x{w} and {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    let s = h;
    // source coordinate of output (r, c)
    let src = |r: usize, col: usize| -> usize {
        let col = if flip { s - 1 - col } else { col };
        let (mut rr, mut cc) = (r, col);
        for _ in 0..quarter_turns % 4 {
            // inverse of one counter-clockwise quarter turn
            let (nr, nc) = (cc, s - 1 - rr);
            rr = nr;
            cc = nc;
        }
        rr * s + cc
    };
    let mut px = Tensor::zeros(&[c, s, s]);
    let mut lab = vec![0u8; s * s];
    for r in 0..s {
        for col in 0..s {
            let i = src(r, col);
            for ch in 0..c {
                px.channel_mut(ch)[r * s + col] = pixels.channel(ch)[i];
            }
            lab[r * s + col] = labels.data()[i];
        }
    }
    Ok((px, LabelMap::new(s, s, lab)?))
}

/// Uniformly random rotation by a multiple of 90 degrees and optional flip.
pub fn augment<R: Rng + ?Sized>(
    pixels: &Tensor<f32>,
    labels: &LabelMap,
    rng: &mut R,
) -> Result<(Tensor<f32>, LabelMap)> {
    let turns = rng.random_range(0..4u8);
    let flip = rng.random_bool(0.5);
    transform(pixels, labels, turns, flip)
}

fn targets(labels: &LabelMap) -> Vec<i32> {
    labels.data().iter().map(|&v| v as i32 - 1).collect()
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Masked cross-entropy and its gradients for one sample.
fn sample_step(
    weights: &SegmenterWeights,
    pixels: &Tensor<f32>,
    labels: &LabelMap,
) -> (f64, Gradients<f32>) {
    let mut g = Graph::new(&weights.params);
    let x = g.input(pixels.clone());
    let logits = weights.net.forward(&mut g, x);
    let loss = g.pixel_cross_entropy(logits, targets(labels));
    (
        g.value(loss).item() as f64,
        g.backward(loss, Group::GENERATOR),
    )
}

pub fn train_segmenter(
    sources: &[DomainImage],
    cfg: &SegConfig,
) -> Result<(SegmenterWeights, SegTrainReport)> {
    cfg.validate()?;
    let mut samples = Vec::new();
    for (i, im) in sources.iter().enumerate() {
        let labels = im
            .labels()
            .ok_or_else(|| Error::Data(format!("source image {i} has no labels")))?;
        let grid = PatchGrid::new(im.height(), im.width(), cfg.patch_size, cfg.overlap)?;
        for p in 0..grid.len() {
            samples.push((grid.crop(im.pixels(), p), grid.crop_labels(labels, p)));
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = SegmenterWeights::new(cfg, &mut rng);
    let ids = weights.params.ids_in(Group::GENERATOR);
    let mut opt = Adam::new(&weights.params, ids, cfg.lr, cfg.beta1, cfg.beta2);
    let batch = cfg.batch_size.min(samples.len());
    let iters = samples.len() / batch;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = SegTrainReport {
        epoch_losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for it in 0..iters {
            let picked = &order[it * batch..(it + 1) * batch];
            let augmented: Vec<(Tensor<f32>, LabelMap)> = picked
                .iter()
                .map(|&i| augment(&samples[i].0, &samples[i].1, &mut rng))
                .collect::<Result<_>>()?;
            let w = &weights;
            let results: Vec<(f64, Gradients<f32>)> = augmented
                .par_iter()
                .map(|(px, lab)| sample_step(w, px, lab))
                .collect();
            let mut grads = Gradients::empty(weights.params.len());
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch as f32);
            opt.update(&mut weights.params, &grads);
            epoch_loss += loss / batch as f64;
        }
        let mean = epoch_loss / iters as f64;
        if !mean.is_finite() {
            return Err(Error::Consistency(format!(
                "segmentation loss diverged in epoch {}",
                epoch + 1
            )));
        }
        info!(
            "segmenter epoch {}/{}: loss {mean:.4}",
            epoch + 1,
            cfg.epochs
        );
        report.epoch_losses.push(mean);
    }
    Ok((weights, report))
}

/// Truth-by-prediction pixel counts over non-void truth pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 4]; 4]);

impl Confusion {
    pub fn from_maps(prediction: &LabelMap, truth: &LabelMap) -> Result<Self> {
        if (prediction.height(), prediction.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                prediction.height(),
                prediction.width(),
                truth.height(),
                truth.width()
            )));
        }
        let mut m = [[0u64; 4]; 4];
        for (&p, &t) in prediction.data().iter().zip(truth.data()) {
            if t != Class::Void as u8 {
                m[t as usize][p as usize] += 1;
            }
        }
        Ok(Confusion(m))
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither
    /// map.
    pub fn iou(&self, class: Class) -> Option<f64> {
        let c = class as usize;
        let tp = self.0[c][c];
        let fn_: u64 = (0..4).filter(|&p| p != c).map(|p| self.0[c][p]).sum();
        let fp: u64 = (1..4).filter(|&t| t != c).map(|t| self.0[t][c]).sum();
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

/// Unweighted mean of the available class IoUs.
pub fn overall_iou(per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// Building, road and tree IoU; `None` when the class is absent from
    /// both prediction and truth.
    pub per_class_iou: [Option<f64>; 3],
    pub overall_iou: Option<f64>,
    pub confusion: Confusion,
    pub prediction: Vec<LabelMap>,
}

impl SegmentationResult {
    pub fn from_confusion(confusion: Confusion, prediction: Vec<LabelMap>) -> Self {
        let per_class_iou = Class::FOREGROUND.map(|c| confusion.iou(c));
        for (c, v) in Class::FOREGROUND.iter().zip(&per_class_iou) {
            if v.is_none() {
                warn!(
                    "class {} absent from prediction and truth; IoU undefined",
                    c.name()
                );
            }
        }
        SegmentationResult {
            overall_iou: overall_iou(&per_class_iou),
            per_class_iou,
            confusion,
            prediction,
        }
    }

    pub fn iou(&self, class: Class) -> Option<f64> {
        Class::FOREGROUND
            .iter()
            .position(|&c| c == class)
            .and_then(|i| self.per_class_iou[i])
    }
}

pub fn evaluate(prediction: &LabelMap, truth: &LabelMap) -> Result<SegmentationResult> {
    let confusion = Confusion::from_maps(prediction, truth)?;
    Ok(SegmentationResult::from_confusion(
        confusion,
        vec![prediction.clone()],
    ))
}

/// Pools the confusion counts of several (prediction, truth) pairs.
pub fn evaluate_many(pairs: &[(LabelMap, LabelMap)]) -> Result<SegmentationResult> {
    let mut total = Confusion::default();
    for (p, t) in pairs {
        total.merge(&Confusion::from_maps(p, t)?);
    }
    Ok(SegmentationResult::from_confusion(
        total,
        pairs.iter().map(|(p, _)| p.clone()).collect(),
    ))
}

/// Predicts and scores every labelled image of the target domain.
pub fn evaluate_domain(
    images: &[DomainImage],
    weights: &SegmenterWeights,
) -> Result<SegmentationResult> {
    let pairs = images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let truth = im
                .labels()
                .ok_or_else(|| Error::Data(format!("target image {i} has no labels")))?
                .clone();
            Ok((predict(im, weights)?, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_many(&pairs)
}

pub const CSV_HEADER: &str = "method,building,road,tree,overall";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

pub fn csv_row(method: &str, r: &SegmentationResult) -> String {
    let [b, ro, t] = r.per_class_iou;
    format!(
        "{method},{},{},{},{}",
        cell(b),
        cell(ro),
        cell(t),
        cell(r.overall_iou)
    )
}

pub fn results_csv(rows: &[(String, SegmentationResult)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (m, r) in rows {
        let _ = writeln!(out, "{}", csv_row(m, r));
    }
    out
}

const SEG_MAGIC: &[u8; 8] = b"STDGANSG";
const SEG_VERSION: &str = "1.0.0";

#[derive(Serialize, Deserialize)]
struct SegHeader {
    version: String,
    net: UNet,
    patch_size: usize,
    overlap: usize,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

pub fn save_segmenter(w: &SegmenterWeights, path: &Path) -> Result<()> {
    let header = SegHeader {
        version: SEG_VERSION.into(),
        net: w.net.clone(),
        patch_size: w.patch_size,
        overlap: w.overlap,
        names: w.params.iter().map(|(_, p)| p.name.clone()).collect(),
        shapes: w
            .params
            .iter()
            .map(|(_, p)| p.value.shape().to_vec())
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = SEG_MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in w.params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::checkpoint::write_atomic(path, &out)
}

pub fn load_segmenter(path: &Path) -> Result<SegmenterWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::Checkpoint(format!("{} is not a segmenter file", path.display()));
    if bytes.len() < 12 || &bytes[..8] != SEG_MAGIC {
        return Err(corrupt());
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(corrupt)?;
    let h: SegHeader = serde_json::from_slice(body).map_err(|_| corrupt())?;
    if h.version.split('.').next() != SEG_VERSION.split('.').next() {
        return Err(Error::CheckpointVersion {
            found: h.version,
            expected: SEG_VERSION.into(),
        });
    }
    let mut params = ParamSet::new();
    let mut pos = 12 + len;
    for (name, shape) in h.names.iter().zip(&h.shapes) {
        let n: usize = shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(corrupt)?;
        pos += 4 * n;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.add(
            name.clone(),
            Group::GENERATOR,
            Tensor::from_vec(shape, data)?,
        );
    }
    if pos != bytes.len() {
        return Err(corrupt());
    }
    Ok(SegmenterWeights {
        net: h.net,
        params,
        patch_size: h.patch_size,
        overlap: h.overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn map(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, data).unwrap()
    }

    fn brute_iou(pred: &LabelMap, truth: &LabelMap, class: u8) -> Option<f64> {
        let mut inter = 0;
        let mut union = 0;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == 0 {
                continue;
            }
            let (a, b) = (p == class, t == class);
            inter += (a && b) as u32;
            union += (a || b) as u32;
        }
        (union > 0).then(|| inter as f64 / union as f64)
    }

    #[test]
    fn iou_examples() {
        let truth = map(2, 2, vec![1, 2, 3, 1]);
        let r = evaluate(&truth, &truth).unwrap();
        assert_eq!(r.per_class_iou, [Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(r.overall_iou, Some(1.0));

        let disjoint = evaluate(&map(1, 2, vec![2, 2]), &map(1, 2, vec![1, 1])).unwrap();
        assert_eq!(disjoint.iou(Class::Building), Some(0.0));
        assert_eq!(disjoint.iou(Class::Tree), None);

        let pred = map(1, 3, vec![1, 1, 2]);
        let truth = map(1, 3, vec![2, 1, 1]);
        let r = evaluate(&pred, &truth).unwrap();
        assert!((r.iou(Class::Building).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion.total(), 3);
        assert!(evaluate(&pred, &map(3, 1, vec![1, 1, 1])).is_err());
    }

    #[test]
    fn overall_column_arithmetic() {
        let v = overall_iou(&[Some(45.36), Some(18.81), Some(82.43)]).unwrap();
        assert_eq!((v * 100.0).round() / 100.0, 48.87);
        assert_eq!(overall_iou(&[Some(0.5), None, Some(0.7)]), Some(0.6));
        assert_eq!(overall_iou(&[None, None, None]), None);
    }

    #[test]
    fn csv_layout() {
        let r = evaluate(&map(1, 3, vec![1, 2, 3]), &map(1, 3, vec![1, 2, 2])).unwrap();
        let text = results_csv(&[("raw".into(), r.clone())]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let cols: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        assert!(((cols[0] + cols[1] + cols[2]) / 3.0 - cols[3]).abs() < 1e-9);
    }

    #[test]
    fn transforms_form_the_dihedral_group() {
        let px = Tensor::from_fn(&[3, 4, 4], |i| i as f32);
        let lab = map(4, 4, (0..16).map(|i| (i % 4) as u8).collect());
        let (mut p, mut l) = (px.clone(), lab.clone());
        for _ in 0..4 {
            (p, l) = transform(&p, &l, 1, false).unwrap();
        }
        assert_eq!((&p, &l), (&px, &lab));
        let (p0, l0) = transform(&px, &lab, 0, false).unwrap();
        assert_eq!((p0, l0), (px.clone(), lab.clone()));
        // one counter-clockwise turn moves the top-right corner to the top-left
        let (p1, _) = transform(&px, &lab, 1, false).unwrap();
        assert_eq!(p1.channel(0)[0], px.channel(0)[3]);
        let (f, _) = transform(&px, &lab, 0, true).unwrap();
        assert_eq!(f.channel(0)[0], px.channel(0)[3]);
        assert!(transform(&Tensor::zeros(&[3, 4, 2]), &map(4, 2, vec![0; 8]), 0, false).is_err());
    }

    #[test]
    fn argmax_ignores_positive_scaling() {
        let scores = Tensor::from_vec(&[3, 1, 2], vec![0.2, 0.5, 0.7, 0.1, 0.1, 0.4]).unwrap();
        let m = argmax_map(&scores).unwrap();
        assert_eq!(m.data(), &[2, 1]);
        assert_eq!(argmax_map(&scores.map(|v| v * 3.5)).unwrap(), m);
    }

    fn toy_images(n: usize, size: usize) -> Vec<DomainImage> {
        let ds = crate::synthetic::generate(&crate::synthetic::SyntheticConfig {
            images_per_domain: n,
            size,
            ..Default::default()
        })
        .unwrap();
        ds.domains[0].clone()
    }

    fn tiny_cfg() -> SegConfig {
        SegConfig {
            epochs: 6,
            lr: 3e-3,
            batch_size: 4,
            patch_size: 32,
            overlap: 0,
            width: 4,
            seed: 1,
            ..SegConfig::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let images = toy_images(1, 64);
        let (w1, r1) = train_segmenter(&images, &tiny_cfg()).unwrap();
        let (w2, r2) = train_segmenter(&images, &tiny_cfg()).unwrap();
        assert_eq!(r1, r2);
        assert!(
            r1.epoch_losses.last().unwrap() < &r1.epoch_losses[0],
            "{:?}",
            r1.epoch_losses
        );
        let p1 = predict(&images[0], &w1).unwrap();
        assert_eq!(p1, predict(&images[0], &w2).unwrap());
        assert_eq!((p1.height(), p1.width()), (64, 64));
        assert_eq!(
            w1.patch_probabilities(&Tensor::zeros(&[3, 32, 32]))
                .unwrap()
                .shape()[0],
            N_CLASSES
        );

        let mut unlabeled = images.clone();
        unlabeled[0] = DomainImage::new(images[0].pixels().clone(), None, 0).unwrap();
        assert!(matches!(
            train_segmenter(&unlabeled, &tiny_cfg()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn overfits_a_handful_of_patches() {
        let images = toy_images(2, 64);
        let cfg = SegConfig {
            epochs: 150,
            lr: 3e-3,
            batch_size: 8,
            patch_size: 32,
            overlap: 0,
            width: 8,
            seed: 3,
            ..SegConfig::default()
        };
        // 2 images x 4 patches = 8 patches
        let (w, _) = train_segmenter(&images, &cfg).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for im in &images {
            let p = predict(im, &w).unwrap();
            for (&a, &b) in p.data().iter().zip(im.labels().unwrap().data()) {
                if b != 0 {
                    total += 1;
                    correct += (a == b) as usize;
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn segmenter_file_round_trip() {
        let cfg = tiny_cfg();
        let w = SegmenterWeights::new(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.bin");
        save_segmenter(&w, &p).unwrap();
        let back = load_segmenter(&p).unwrap();
        assert_eq!(back.net, w.net);
        for ((_, a), (_, b)) in back.params.iter().zip(w.params.iter()) {
            assert_eq!(a.value, b.value);
        }
        fs::write(&p, b"junk").unwrap();
        assert!(load_segmenter(&p).is_err());
    }

    proptest! {
        #[test]
        fn evaluate_matches_set_counting(
            pred in proptest::collection::vec(0u8..4, 256),
            truth in proptest::collection::vec(0u8..4, 256),
        ) {
            let (p, t) = (map(16, 16, pred.clone()), map(16, 16, truth.clone()));
            let r = evaluate(&p, &t).unwrap();
            for (i, class) in (1..=3u8).enumerate() {
                prop_assert_eq!(r.per_class_iou[i], brute_iou(&p, &t, class));
            }
            // void truth pixels never matter
            let flipped: Vec<u8> = pred.iter().zip(&truth).map(|(&a, &b)| if b == 0 { (a + 1) % 4 } else { a }).collect();
            prop_assert_eq!(evaluate(&map(16, 16, flipped), &t).unwrap().per_class_iou, r.per_class_iou);
        }

        #[test]
        fn augmentation_preserves_class_counts(labels in proptest::collection::vec(0u8..4, 36), seed in 0u64..1000) {
            let l = map(6, 6, labels);
            let px = Tensor::from_fn(&[3, 6, 6], |i| (i % 7) as f32 / 7.0);
            let (p2, l2) = augment(&px, &l, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for c in 0..4u8 {
                prop_assert_eq!(l.data().iter().filter(|&&v| v == c).count(), l2.data().iter().filter(|&&v| v == c).count());
            }
            // pixel/label alignment: every output pixel keeps its label partner
            for i in 0..36 {
                let value = p2.channel(0)[i];
                let j = px.channel(0).iter().zip(l.data()).position(|(&v, &lab)| v == value && lab == l2.data()[i]);
                prop_assert!(j.is_some());
            }
        }
    }
}
