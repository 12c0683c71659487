//! Seeded end-to-end run on a synthetic multi-domain set: train the
//! translation network, standardize every domain, measure how much closer
//! the domains got, and compare a segmenter trained on raw versus
//! standardized sources.

use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};

use crate::dataset::domain_patches;
use crate::error::{Error, Result};
use crate::imaging::{histogram_distance, pooled_histogram, DomainImage, DEFAULT_BINS};
use crate::segmentation::{evaluate_domain, train_segmenter, SegConfig, SegmentationResult};
use crate::standardizer::{
    average_params, edge_correlation, standardize_image, StandardizationProfile, Tiling,
};
use crate::synthetic::{generate, SyntheticConfig};
use crate::trainer::{train, LogRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub gan: TrainConfig,
    pub seg: SegConfig,
    /// Labelled domains the segmenter is trained on.
    pub sources: Vec<usize>,
    /// Domain the segmenter is evaluated on.
    pub target: usize,
}

impl ExperimentConfig {
    /// The single-CPU configuration: 3 domains of 8 tiles at 256 pixels
    /// (200 patches of 64 pixels each), 5 GAN epochs at width 16.
    pub fn desk(seed: u64) -> Self {
        ExperimentConfig {
            data: SyntheticConfig {
                n_domains: 3,
                images_per_domain: 8,
                size: 256,
                seed,
            },
            gan: TrainConfig {
                seed,
                ..TrainConfig::desk()
            },
            seg: SegConfig {
                seed,
                ..SegConfig::desk()
            },
            sources: vec![0, 1],
            target: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.gan.validate()?;
        self.seg.validate()?;
        let n = self.data.n_domains;
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source domain is needed".into()));
        }
        for &d in self.sources.iter().chain([&self.target]) {
            if d >= n {
                return Err(Error::UnknownDomain { id: d, count: n });
            }
        }
        if self.sources.contains(&self.target) {
            return Err(Error::Config(format!(
                "target domain {} is also a source",
                self.target
            )));
        }
        Ok(())
    }
}

/// Raw versus standardized segmentation scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SegComparison {
    pub raw: SegmentationResult,
    pub standardized: SegmentationResult,
    pub raw_losses: Vec<f64>,
    pub standardized_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub gan: Duration,
    pub standardize: Duration,
    pub segmentation: Duration,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub patches_per_domain: Vec<usize>,
    /// Mean over domain pairs of the pooled histogram distance.
    pub raw_distance: f64,
    pub standardized_distance: f64,
    /// Distance between once- and twice-standardized domains, averaged
    /// over domains.
    pub restandardized_distance: f64,
    /// Distance between each raw domain and its standardized version,
    /// averaged over domains.
    pub raw_to_standardized_distance: f64,
    /// Mean over images of the input/output edge correlation.
    pub edge_correlation: f64,
    pub profile: StandardizationProfile,
    pub log: Vec<LogRecord>,
    pub segmentation: Option<SegComparison>,
    pub timings: Timings,
}

impl ExperimentReport {
    pub fn distance_ratio(&self) -> f64 {
        self.standardized_distance / self.raw_distance
    }
}

/// Mean pairwise distance between domain-pooled histograms.
pub fn mean_pairwise_distance(domains: &[Vec<DomainImage>]) -> Result<f64> {
    let hists = domains
        .iter()
        .map(|d| pooled_histogram(d.iter().map(DomainImage::pixels), DEFAULT_BINS))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            total += histogram_distance(&hists[i], &hists[j])?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Config(
            "pairwise distance needs at least two domains".into(),
        ));
    }
    Ok(total / pairs as f64)
}

fn pick(domains: &[Vec<DomainImage>], ids: &[usize]) -> Vec<DomainImage> {
    ids.iter()
        .flat_map(|&d| domains[d].iter().cloned())
        .collect()
}

fn seg_run(
    domains: &[Vec<DomainImage>],
    cfg: &ExperimentConfig,
) -> Result<(SegmentationResult, Vec<f64>)> {
    let (weights, report) = train_segmenter(&pick(domains, &cfg.sources), &cfg.seg)?;
    Ok((
        evaluate_domain(&domains[cfg.target], &weights)?,
        report.epoch_losses,
    ))
}

/// Runs the whole pipeline. With `with_segmentation` false only the
/// standardization metrics are computed.
pub fn run(cfg: &ExperimentConfig, with_segmentation: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    let raw = data.domains;
    let patches = raw
        .iter()
        .map(|d| domain_patches(d, cfg.gan.patch_size, cfg.gan.overlap))
        .collect::<Result<Vec<_>>>()?;
    let patches_per_domain = patches.iter().map(Vec::len).collect();

    let t0 = Instant::now();
    let outcome = train(&patches, &cfg.gan)?;
    let gan_time = t0.elapsed();
    info!("translation network trained in {gan_time:.1?}");

    let t1 = Instant::now();
    let mut profile = average_params(&outcome.ema)?;
    profile.source = format!("synthetic seed {}", cfg.data.seed);
    let tiling = Tiling {
        patch_size: cfg.gan.patch_size,
        overlap: cfg.gan.overlap,
    };
    let render = |domains: &[Vec<DomainImage>]| -> Result<Vec<Vec<DomainImage>>> {
        domains
            .iter()
            .map(|d| {
                d.iter()
                    .map(|im| standardize_image(im, &profile, &outcome.model, tiling))
                    .collect()
            })
            .collect()
    };
    let standardized = render(&raw)?;
    let twice = render(&standardized)?;
    let standardize_time = t1.elapsed();

    let raw_distance = mean_pairwise_distance(&raw)?;
    let standardized_distance = mean_pairwise_distance(&standardized)?;
    let mut re = 0.0;
    for (a, b) in standardized.iter().zip(&twice) {
        re += mean_pairwise_distance(&[a.clone(), b.clone()])?;
    }
    let restandardized_distance = re / raw.len() as f64;
    let mut shift = 0.0;
    for (a, b) in raw.iter().zip(&standardized) {
        shift += mean_pairwise_distance(&[a.clone(), b.clone()])?;
    }
    let raw_to_standardized_distance = shift / raw.len() as f64;
    let mut edges = 0.0;
    let mut count = 0;
    for (a, b) in raw.iter().flatten().zip(standardized.iter().flatten()) {
        edges += edge_correlation(a.pixels(), b.pixels())?;
        count += 1;
    }
    let edge_correlation = edges / count as f64;
    info!(
        "histogram distance raw {raw_distance:.4} standardized {standardized_distance:.4}, edge correlation {edge_correlation:.3}"
    );

    let t2 = Instant::now();
    let segmentation = if with_segmentation {
        let (raw_res, raw_losses) = seg_run(&raw, cfg)?;
        let (std_res, std_losses) = seg_run(&standardized, cfg)?;
        info!(
            "segmentation overall IoU raw {:?} standardized {:?}",
            raw_res.overall_iou, std_res.overall_iou
        );
        Some(SegComparison {
            raw: raw_res,
            standardized: std_res,
            raw_losses,
            standardized_losses: std_losses,
        })
    } else {
        None
    };

    Ok(ExperimentReport {
        patches_per_domain,
        raw_distance,
        standardized_distance,
        restandardized_distance,
        raw_to_standardized_distance,
        edge_correlation,
        profile,
        log: outcome.log,
        segmentation,
        timings: Timings {
            gan: gan_time,
            standardize: standardize_time,
            segmentation: t2.elapsed(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_shape() {
        let cfg = ExperimentConfig::desk(7);
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.target = 0;
        assert!(bad.validate().is_err());
        bad.target = 3;
        assert!(matches!(bad.validate(), Err(Error::UnknownDomain { .. })));
    }

    #[test]
    fn pairwise_distance_of_identical_domains_is_zero() {
        let ds = generate(&SyntheticConfig {
            images_per_domain: 1,
            size: 32,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let d = &ds.domains;
        assert_eq!(
            mean_pairwise_distance(&[d[0].clone(), d[0].clone()]).unwrap(),
            0.0
        );
        assert!(mean_pairwise_distance(d).unwrap() > 0.05);
        assert!(mean_pairwise_distance(&d[..1]).is_err());
    }

    #[test]
    fn miniature_pipeline_runs() {
        let cfg = ExperimentConfig {
            data: SyntheticConfig {
                n_domains: 3,
                images_per_domain: 1,
                size: 32,
                seed: 1,
            },
            gan: TrainConfig {
                num_epochs: 2,
                decay_epoch: 1,
                patch_size: 16,
                overlap: 0,
                width: 2,
                seed: 1,
                ..TrainConfig::default()
            },
            seg: SegConfig {
                epochs: 1,
                batch_size: 2,
                patch_size: 16,
                overlap: 0,
                width: 2,
                seed: 1,
                ..SegConfig::default()
            },
            sources: vec![0, 1],
            target: 2,
        };
        let r = run(&cfg, true).unwrap();
        assert_eq!(r.patches_per_domain, vec![4, 4, 4]);
        assert_eq!(r.log.len(), 2 * 4 * 3);
        assert!(r.raw_distance > 0.0 && r.standardized_distance.is_finite());
        assert!(r.segmentation.unwrap().raw.overall_iou.is_some());
    }
}
