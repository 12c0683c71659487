//! Rendering trained models: standardization with the domain-averaged
//! global AdaIN parameters, style transfer with one domain's parameters,
//! and the all-pairs style-transfer matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DomainImage, PatchGrid};
use crate::networks::{AdaINParams, ModelWeights};
use crate::tensor::Tensor;
use crate::trainer::EmaState;

/// Patch layout used at inference; normally the training patch size and
/// overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub patch_size: usize,
    pub overlap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationProfile {
    pub gamma_avg: Vec<f64>,
    pub beta_avg: Vec<f64>,
    /// Free-form identifier of the checkpoint the profile came from.
    pub source: String,
    pub n_domains: usize,
}

impl StandardizationProfile {
    pub fn channels(&self) -> usize {
        self.gamma_avg.len()
    }

    pub fn params(&self) -> Result<AdaINParams<f32>> {
        AdaINParams::new(self.gamma_avg.clone(), self.beta_avg.clone()).map(|p| p.cast())
    }

    pub fn is_finite(&self) -> bool {
        self.gamma_avg
            .iter()
            .chain(&self.beta_avg)
            .all(|v| v.is_finite())
    }
}

/// Elementwise mean of every domain's global `(gamma, beta)`.
pub fn average_params(ema: &EmaState) -> Result<StandardizationProfile> {
    let n = ema.n_domains();
    if n == 0 {
        return Err(Error::Config(
            "cannot average the parameters of zero domains".into(),
        ));
    }
    let k = ema.channels();
    let mean = |rows: &[Vec<f64>]| {
        (0..k)
            .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n as f64)
            .collect()
    };
    Ok(StandardizationProfile {
        gamma_avg: mean(&ema.gamma),
        beta_avg: mean(&ema.beta),
        source: String::new(),
        n_domains: n,
    })
}

/// Renders `image` patchwise with fixed AdaIN parameters, averaging the
/// overlaps. Labels are carried over untouched.
pub fn render_with(
    image: &DomainImage,
    params: &AdaINParams<f32>,
    weights: &ModelWeights<f32>,
    tiling: Tiling,
) -> Result<DomainImage> {
    let k = weights.arch().embed_channels();
    if params.channels() != k {
        return Err(Error::Shape(format!(
            "profile has {} channels, the model uses {k}",
            params.channels()
        )));
    }
    let grid = PatchGrid::new(
        image.height(),
        image.width(),
        tiling.patch_size,
        tiling.overlap,
    )?;
    let outputs: Vec<Tensor<f32>> = (0..grid.len())
        .into_par_iter()
        .map(|i| weights.translate(&grid.crop(image.pixels(), i), params))
        .collect::<Result<_>>()?;
    let stitched = crate::imaging::stitch(&outputs, &grid)?;
    DomainImage::from_clipped(stitched, image.labels().cloned(), image.domain_id)
}

pub fn standardize_image(
    image: &DomainImage,
    profile: &StandardizationProfile,
    weights: &ModelWeights<f32>,
    tiling: Tiling,
) -> Result<DomainImage> {
    render_with(image, &profile.params()?, weights, tiling)
}

/// Renders `image` in the style of `target_domain`.
pub fn style_transfer_image(
    image: &DomainImage,
    target_domain: usize,
    ema: &EmaState,
    weights: &ModelWeights<f32>,
    tiling: Tiling,
) -> Result<DomainImage> {
    let params = ema.domain_params(target_domain)?.cast();
    render_with(image, &params, weights, tiling)
}

/// `matrix[i][j]` is domain `i`'s sample rendered with domain `j`'s style.
pub fn style_matrix(
    samples: &[DomainImage],
    ema: &EmaState,
    weights: &ModelWeights<f32>,
    tiling: Tiling,
) -> Result<Vec<Vec<DomainImage>>> {
    samples
        .iter()
        .map(|s| {
            (0..ema.n_domains())
                .map(|j| style_transfer_image(s, j, ema, weights, tiling))
                .collect()
        })
        .collect()
}

/// Lays out equally sized rasters on a grid with `gap` white pixels between
/// cells.
pub fn mosaic(cells: &[Vec<Tensor<f32>>], gap: usize) -> Result<Tensor<f32>> {
    let first = cells
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Shape("mosaic needs at least one cell".into()))?;
    let (c, h, w) = first.dims3()?;
    let rows = cells.len();
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let (hh, ww) = (rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap);
    let mut out = Tensor::full(&[c, hh, ww], 1.0f32);
    for (r, row) in cells.iter().enumerate() {
        for (q, cell) in row.iter().enumerate() {
            if cell.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "mosaic cell {:?} differs from {:?}",
                    cell.shape(),
                    first.shape()
                )));
            }
            let (y0, x0) = (r * (h + gap), q * (w + gap));
            for ch in 0..c {
                let src = cell.channel(ch);
                let dst = out.channel_mut(ch);
                for y in 0..h {
                    dst[(y0 + y) * ww + x0..(y0 + y) * ww + x0 + w]
                        .copy_from_slice(&src[y * w..(y + 1) * w]);
                }
            }
        }
    }
    Ok(out)
}

/// Gradient magnitude of one channel by central differences (one-sided at
/// the border).
pub fn gradient_magnitude(plane: &[f32], h: usize, w: usize) -> Vec<f64> {
    let at = |r: usize, c: usize| plane[r * w + c] as f64;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (ru, rd) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let gx = (at(r, cr) - at(r, cl)) / (cr - cl).max(1) as f64;
            let gy = (at(rd, c) - at(ru, c)) / (rd - ru).max(1) as f64;
            out[r * w + c] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Mean over channels of the Pearson correlation between the gradient
/// magnitude maps of two equally sized rasters: an edge-preservation score.
pub fn edge_correlation(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "edge correlation of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = a.dims3()?;
    let total: f64 = (0..c)
        .map(|ch| {
            pearson(
                &gradient_magnitude(a.channel(ch), h, w),
                &gradient_magnitude(b.channel(ch), h, w),
            )
        })
        .sum();
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ArchConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelWeights<f32> {
        ModelWeights::new(ArchConfig::new(2, 2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn image(h: usize, w: usize) -> DomainImage {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let px = Tensor::from_fn(&[3, h, w], |_| rng.random::<f32>());
        let labels =
            crate::imaging::LabelMap::new(h, w, (0..h * w).map(|i| (i % 4) as u8).collect())
                .unwrap();
        DomainImage::new(px, Some(labels), 1).unwrap()
    }

    fn ema() -> EmaState {
        let mut e = EmaState::new(2, 8);
        e.gamma[0] = vec![1.0; 8];
        e.gamma[1] = vec![3.0; 8];
        e.beta[1] = vec![0.5; 8];
        e.recompute_average();
        e
    }

    #[test]
    fn averaging() {
        let mut e = EmaState::new(2, 2);
        e.gamma = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let p = average_params(&e).unwrap();
        assert_eq!(p.gamma_avg, vec![2.0, 3.0]);
        let mut one = EmaState::new(1, 2);
        one.beta[0] = vec![0.3, -0.2];
        assert_eq!(average_params(&one).unwrap().beta_avg, vec![0.3, -0.2]);
        assert!(average_params(&EmaState::new(0, 2)).is_err());
    }

    #[test]
    fn standardization_keeps_geometry_and_labels() {
        let (m, im) = (model(), image(40, 56));
        let profile = average_params(&ema()).unwrap();
        let tiling = Tiling {
            patch_size: 16,
            overlap: 4,
        };
        let out = standardize_image(&im, &profile, &m, tiling).unwrap();
        assert_eq!(out.pixels().shape(), im.pixels().shape());
        assert_eq!(out.labels(), im.labels());
        assert!(out.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out, standardize_image(&im, &profile, &m, tiling).unwrap());

        let bad = StandardizationProfile {
            gamma_avg: vec![1.0; 3],
            beta_avg: vec![0.0; 3],
            source: String::new(),
            n_domains: 2,
        };
        assert!(standardize_image(&im, &bad, &m, tiling).is_err());
        assert!(style_transfer_image(&im, 2, &ema(), &m, tiling).is_err());
    }

    #[test]
    fn single_patch_rendering_is_translate() {
        let (m, im) = (model(), image(16, 16));
        let e = ema();
        let out = style_transfer_image(
            &im,
            1,
            &e,
            &m,
            Tiling {
                patch_size: 16,
                overlap: 0,
            },
        )
        .unwrap();
        let direct = m
            .translate(im.pixels(), &e.domain_params(1).unwrap().cast())
            .unwrap();
        assert_eq!(out.pixels(), &direct);
    }

    #[test]
    fn matrix_and_mosaic_shapes() {
        let (m, im) = (model(), image(16, 16));
        let mat = style_matrix(
            &[im.clone(), im],
            &ema(),
            &m,
            Tiling {
                patch_size: 16,
                overlap: 0,
            },
        )
        .unwrap();
        assert_eq!((mat.len(), mat[0].len()), (2, 2));
        let cells: Vec<Vec<Tensor<f32>>> = mat
            .iter()
            .map(|r| r.iter().map(|d| d.pixels().clone()).collect())
            .collect();
        let mos = mosaic(&cells, 2).unwrap();
        assert_eq!(mos.shape(), &[3, 34, 34]);
        assert_eq!(&mos.channel(0)[..16], &cells[0][0].channel(0)[..16]);
    }

    #[test]
    fn edge_correlation_properties() {
        let im = image(20, 20);
        let px = im.pixels();
        assert!((edge_correlation(px, px).unwrap() - 1.0).abs() < 1e-12);
        // a per-channel affine map with positive gain keeps the edges
        let scaled = px.map(|v| 0.3 + 0.5 * v);
        assert!((edge_correlation(px, &scaled).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), 0.0);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
