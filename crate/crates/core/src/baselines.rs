//! Classical standardization baselines: Z-score normalization, gray-world
//! colour constancy and per-channel histogram equalization.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::DomainImage;
use crate::tensor::Tensor;

/// Number of quantization levels used by histogram equalization.
pub const LEVELS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMethod {
    ZScore,
    GrayWorld,
    HistEq,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 3] = [
        BaselineMethod::ZScore,
        BaselineMethod::GrayWorld,
        BaselineMethod::HistEq,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::ZScore => "zscore",
            BaselineMethod::GrayWorld => "grayworld",
            BaselineMethod::HistEq => "histeq",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(BaselineMethod::ZScore),
            "grayworld" => Ok(BaselineMethod::GrayWorld),
            "histeq" => Ok(BaselineMethod::HistEq),
            other => Err(Error::Config(format!(
                "unknown baseline method `{other}` (expected zscore, grayworld or histeq)"
            ))),
        }
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ZScoreStats {
    /// Statistics over every pixel of every raster supplied.
    pub fn from_rasters<'a>(
        rasters: impl IntoIterator<Item = &'a Tensor<f32>> + Clone,
    ) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for t in rasters.clone() {
            let (c, h, w) = t.dims3()?;
            if sum.is_empty() {
                sum = vec![0.0; c];
            }
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += t.channel(ch).iter().map(|&v| v as f64).sum::<f64>();
            }
            n += h * w;
        }
        if n == 0 {
            return Err(Error::Data("z-score statistics over no pixels".into()));
        }
        let mu: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; mu.len()];
        for t in rasters {
            for (ch, s) in sq.iter_mut().enumerate() {
                *s += t
                    .channel(ch)
                    .iter()
                    .map(|&v| (v as f64 - mu[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let sigma = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(ZScoreStats { mu, sigma })
    }

    pub fn of_domain(images: &[DomainImage]) -> Result<Self> {
        Self::from_rasters(images.iter().map(|i| i.pixels()))
    }
}

/// `(x - mu) / sigma` per channel. A zero sigma is replaced by one.
pub fn zscore_normalize(image: &DomainImage, stats: &ZScoreStats) -> Result<Tensor<f64>> {
    let px = image.pixels();
    let (c, h, w) = px.dims3()?;
    if stats.mu.len() != c || stats.sigma.len() != c {
        return Err(Error::Shape(format!(
            "z-score stats for {} channels, image has {c}",
            stats.mu.len()
        )));
    }
    let mut out = Tensor::<f64>::zeros(&[c, h, w]);
    for ch in 0..c {
        let mut sigma = stats.sigma[ch];
        if sigma <= 0.0 {
            warn!("channel {ch} has zero standard deviation; using sigma = 1");
            sigma = 1.0;
        }
        let mu = stats.mu[ch];
        for (o, &v) in out.channel_mut(ch).iter_mut().zip(px.channel(ch)) {
            *o = (v as f64 - mu) / sigma;
        }
    }
    Ok(out)
}

/// Maps z-scores into `[0, 1]` via `clip((z + 3) / 6)`.
pub fn zscore_to_unit(z: &Tensor<f64>) -> Tensor<f32> {
    Tensor::from_vec(
        z.shape(),
        z.data()
            .iter()
            .map(|&v| ((v + 3.0) / 6.0).clamp(0.0, 1.0) as f32)
            .collect(),
    )
    .expect("same shape")
}

/// Gray-world gains `mean(m) / m_c` per channel; all-black channels keep gain 1.
pub fn gray_world_gains(image: &DomainImage) -> Result<Vec<f64>> {
    let px = image.pixels();
    let (c, _, _) = px.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!(
            "gray-world needs 3 channels, got {c}"
        )));
    }
    let means: Vec<f64> = (0..c)
        .map(|ch| {
            px.channel(ch).iter().map(|&v| v as f64).sum::<f64>() / px.channel(ch).len() as f64
        })
        .collect();
    let grand = means.iter().sum::<f64>() / c as f64;
    Ok(means
        .iter()
        .enumerate()
        .map(|(ch, &m)| {
            if m <= 0.0 {
                warn!("channel {ch} is all black; gray-world gain left at 1");
                1.0
            } else {
                grand / m
            }
        })
        .collect())
}

/// Gray-world rescaling before clipping.
pub fn gray_world_unclipped(image: &DomainImage) -> Result<Tensor<f64>> {
    let gains = gray_world_gains(image)?;
    let px = image.pixels();
    let mut out = Tensor::<f64>::zeros(px.shape());
    for (ch, g) in gains.iter().enumerate() {
        for (o, &v) in out.channel_mut(ch).iter_mut().zip(px.channel(ch)) {
            *o = v as f64 * g;
        }
    }
    Ok(out)
}

pub fn gray_world(image: &DomainImage) -> Result<DomainImage> {
    let scaled = gray_world_unclipped(image)?;
    image.with_pixels(scaled.cast())
}

fn level_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * (LEVELS - 1) as f32).round() as usize).min(LEVELS - 1)
}

/// Lookup table `level -> equalized value in [0, 1]` for one channel, or
/// `None` when the channel is constant.
pub fn equalization_map(channel: &[f32]) -> Option<Vec<f32>> {
    let mut hist = [0usize; LEVELS];
    for &v in channel {
        hist[level_of(v)] += 1;
    }
    let n = channel.len() as f64;
    let mut cdf = [0.0f64; LEVELS];
    let mut run = 0usize;
    for (l, &count) in hist.iter().enumerate() {
        run += count;
        cdf[l] = run as f64 / n;
    }
    let first = hist.iter().position(|&c| c > 0)?;
    let cdf_min = cdf[first];
    if cdf_min >= 1.0 {
        return None;
    }
    Some(
        cdf.iter()
            .map(|&c| (((c - cdf_min) / (1.0 - cdf_min)).max(0.0)) as f32)
            .collect(),
    )
}

/// Per-channel histogram equalization over 256 levels.
pub fn hist_equalize(image: &DomainImage) -> Result<DomainImage> {
    let mut out = image.pixels().clone();
    let (c, _, _) = out.dims3()?;
    for ch in 0..c {
        match equalization_map(out.channel(ch)) {
            Some(map) => out
                .channel_mut(ch)
                .iter_mut()
                .for_each(|v| *v = map[level_of(*v)]),
            None => warn!("channel {ch} is constant; histogram equalization leaves it unchanged"),
        }
    }
    image.with_pixels(out)
}

/// Applies `method` to one domain. Z-score statistics come from the whole
/// domain unless `per_image` is set.
pub fn apply_to_domain(
    method: BaselineMethod,
    images: &[DomainImage],
    per_image: bool,
) -> Result<Vec<DomainImage>> {
    match method {
        BaselineMethod::ZScore => {
            let domain_stats = if per_image {
                None
            } else {
                Some(ZScoreStats::of_domain(images)?)
            };
            images
                .iter()
                .map(|img| {
                    let stats = match &domain_stats {
                        Some(s) => s.clone(),
                        None => ZScoreStats::of_domain(std::slice::from_ref(img))?,
                    };
                    let z = zscore_normalize(img, &stats)?;
                    img.with_pixels(zscore_to_unit(&z))
                })
                .collect()
        }
        BaselineMethod::GrayWorld => images.iter().map(gray_world).collect(),
        BaselineMethod::HistEq => images.iter().map(hist_equalize).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(c0: Vec<f32>, c1: Vec<f32>, c2: Vec<f32>, h: usize, w: usize) -> DomainImage {
        let mut d = c0;
        d.extend(c1);
        d.extend(c2);
        DomainImage::new(Tensor::from_vec(&[3, h, w], d).unwrap(), None, 0).unwrap()
    }

    #[test]
    fn zscore_direct_arithmetic() {
        let im = img(vec![0.1, 0.3], vec![0.5, 0.5], vec![0.0, 1.0], 1, 2);
        let stats = ZScoreStats {
            mu: vec![0.2, 0.5, 0.5],
            sigma: vec![0.1, 0.0, 0.5],
        };
        let z = zscore_normalize(&im, &stats).unwrap();
        let d = z.data();
        assert!((d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
        assert_eq!(&d[2..4], &[0.0, 0.0]); // constant channel with sigma guard
        assert_eq!(&d[4..6], &[-1.0, 1.0]);
    }

    #[test]
    fn gray_world_examples() {
        let balanced = img(vec![0.4; 4], vec![0.4; 4], vec![0.4; 4], 2, 2);
        assert_eq!(gray_world_gains(&balanced).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(gray_world(&balanced).unwrap(), balanced);

        let tinted = img(vec![0.2; 4], vec![0.4; 4], vec![0.6; 4], 2, 2);
        let g = gray_world_gains(&tinted).unwrap();
        for (got, want) in g.iter().zip([2.0, 1.0, 2.0 / 3.0]) {
            assert!((got - want).abs() < 1e-6, "{g:?}");
        }

        let black = img(vec![0.0; 4], vec![0.5; 4], vec![0.9; 4], 2, 2);
        assert_eq!(gray_world_gains(&black).unwrap()[0], 1.0);
        assert!(gray_world(&black)
            .unwrap()
            .pixels()
            .data()
            .iter()
            .all(|&v| v <= 1.0));
    }

    #[test]
    fn hist_equalize_two_levels_map_to_endpoints() {
        let ch = vec![0.0, 1.0, 0.0, 1.0];
        let im = img(ch.clone(), ch.clone(), ch, 2, 2);
        let out = hist_equalize(&im).unwrap();
        assert_eq!(out.pixels().channel(0), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn hist_equalize_uniform_is_identity() {
        let ch: Vec<f32> = (0..256).map(|l| l as f32 / 255.0).collect();
        let im = img(ch.clone(), ch.clone(), ch.clone(), 16, 16);
        let out = hist_equalize(&im).unwrap();
        for (a, b) in out.pixels().channel(1).iter().zip(&ch) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }

    #[test]
    fn hist_equalize_constant_channel_is_unchanged() {
        let im = img(vec![0.3; 4], vec![0.0, 0.2, 0.4, 0.6], vec![0.7; 4], 2, 2);
        let out = hist_equalize(&im).unwrap();
        assert_eq!(out.pixels().channel(0), im.pixels().channel(0));
        assert_eq!(out.pixels().channel(2), im.pixels().channel(2));
    }

    #[test]
    fn method_names_parse() {
        for m in BaselineMethod::ALL {
            assert_eq!(m.as_str().parse::<BaselineMethod>().unwrap(), m);
        }
        assert!("gamut".parse::<BaselineMethod>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn zscore_is_affine_invariant(vals in proptest::collection::vec(0.05f32..0.5, 48), a in 0.5f32..1.8, b in 0.0f32..0.05) {
            let base = DomainImage::new(Tensor::from_vec(&[3, 4, 4], vals.clone()).unwrap(), None, 0).unwrap();
            let lit = DomainImage::new(Tensor::from_vec(&[3, 4, 4], vals.iter().map(|v| a * v + b).collect()).unwrap(), None, 0).unwrap();
            let z0 = zscore_normalize(&base, &ZScoreStats::of_domain(std::slice::from_ref(&base)).unwrap()).unwrap();
            let z1 = zscore_normalize(&lit, &ZScoreStats::of_domain(std::slice::from_ref(&lit)).unwrap()).unwrap();
            for (x, y) in z0.data().iter().zip(z1.data()) {
                prop_assert!((x - y).abs() < 1e-3, "{} vs {}", x, y);
            }
        }

        #[test]
        fn gray_world_idempotent_without_clipping(vals in proptest::collection::vec(0.05f32..0.3, 48)) {
            let im = DomainImage::new(Tensor::from_vec(&[3, 4, 4], vals).unwrap(), None, 0).unwrap();
            let once = gray_world(&im).unwrap();
            prop_assume!(gray_world_unclipped(&im).unwrap().data().iter().all(|&v| v <= 1.0));
            let twice = gray_world(&once).unwrap();
            for (x, y) in once.pixels().data().iter().zip(twice.pixels().data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn hist_equalize_preserves_rank_order(levels in proptest::collection::vec(0u8..=255, 48)) {
            let vals: Vec<f32> = levels.iter().map(|&l| l as f32 / 255.0).collect();
            let im = DomainImage::new(Tensor::from_vec(&[3, 4, 4], vals.clone()).unwrap(), None, 0).unwrap();
            let out = hist_equalize(&im).unwrap();
            let o = out.pixels().data();
            for ch in 0..3 {
                for i in 0..16 {
                    for j in 0..16 {
                        let (a, b) = (vals[ch * 16 + i], vals[ch * 16 + j]);
                        if a < b {
                            prop_assert!(o[ch * 16 + i] <= o[ch * 16 + j]);
                        }
                    }
                }
            }
        }
    }
}
