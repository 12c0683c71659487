use std::fs;
use std::path::{Component, Path, PathBuf};

use log::info;
use stdgan_core::baselines::{apply_to_domain, BaselineMethod};
use stdgan_core::checkpoint;
use stdgan_core::dataset::{self, Manifest, NamedImage, IMAGES_DIR};
use stdgan_core::imaging::{self, pooled_histogram, ChannelHistogram, DomainImage, DEFAULT_BINS};
use stdgan_core::segmentation::{self, evaluate_many, predict, train_segmenter};
use stdgan_core::standardizer::{
    average_params, mosaic, standardize_image, style_matrix as render_matrix, Tiling,
};
use stdgan_core::synthetic::{domain_gap, domain_means, generate, SyntheticConfig};
use stdgan_core::trainer::train_in_dir;
use stdgan_core::{Error, Tensor};

use crate::config::RunConfig;
use crate::{plot, CliError, ConfigArgs};

pub const PROFILE_FILE: &str = "profile.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const SEGMENTER_FILE: &str = "segmenter.bin";
pub const RESULTS_FILE: &str = "results.csv";
pub const HISTOGRAM_DIR: &str = "histograms";
pub const PREDICTIONS_DIR: &str = "predictions";

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Creates `dir`, refusing to touch a non-empty one unless `force` is set,
/// in which case its contents are removed first.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let occupied =
        dir.exists() && (dir.is_file() || fs::read_dir(dir).map_err(io(dir))?.next().is_some());
    if occupied {
        if !force {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        if dir.is_file() {
            fs::remove_file(dir).map_err(io(dir))?;
        } else {
            fs::remove_dir_all(dir).map_err(io(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

fn load_manifest(path: &Path) -> Result<(Manifest, Vec<Vec<NamedImage>>)> {
    let m = Manifest::read(path)?;
    let data = dataset::load_manifest(&m)?;
    Ok((m, data))
}

fn images_of(named: &[NamedImage]) -> Vec<DomainImage> {
    named.iter().map(|n| n.image.clone()).collect()
}

/// Relative output location mirroring a manifest entry. Entries that would
/// escape the output directory fall back to a generated name.
fn mirror_entry(entry: &Path, id: usize) -> PathBuf {
    if entry
        .components()
        .all(|c| matches!(c, Component::Normal(_)))
    {
        entry.to_path_buf()
    } else {
        PathBuf::from(dataset::domain_name(id))
    }
}

fn histogram_csv(hists: &[ChannelHistogram]) -> String {
    let bins = hists.first().map_or(0, |h| h.bins);
    let mut out = String::from("domain,channel");
    for b in 0..bins {
        out.push_str(&format!(",b{b}"));
    }
    out.push('\n');
    for (d, h) in hists.iter().enumerate() {
        for (c, counts) in h.counts.iter().enumerate() {
            out.push_str(&format!("{d},{c}"));
            for v in counts {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

fn domain_histograms(domains: &[Vec<DomainImage>]) -> Result<Vec<ChannelHistogram>> {
    Ok(domains
        .iter()
        .map(|d| pooled_histogram(d.iter().map(DomainImage::pixels), DEFAULT_BINS))
        .collect::<stdgan_core::Result<_>>()?)
}

/// Writes transformed domains mirroring the input layout, copies the label
/// files byte for byte and emits before/after histograms.
fn write_mirrored(
    manifest: &Manifest,
    inputs: &[Vec<NamedImage>],
    outputs: &[Vec<DomainImage>],
    out: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    for (d, (named, rendered)) in inputs.iter().zip(outputs).enumerate() {
        let rel = mirror_entry(&manifest.entries[d], d);
        let dir = out.join(&rel);
        let img_dir = dir.join(IMAGES_DIR);
        fs::create_dir_all(&img_dir).map_err(io(&img_dir))?;
        for (n, im) in named.iter().zip(rendered) {
            // keep 8-bit PNG output even for TIFF inputs
            let name = Path::new(&n.name).with_extension("png");
            imaging::save_rgb(&img_dir.join(name), im.pixels())?;
        }
        dataset::copy_labels(&manifest.domain_dir(d), &dir)?;
        entries.push(rel);
    }
    Manifest {
        root: out.to_path_buf(),
        entries,
    }
    .write(&out.join(dataset::MANIFEST_FILE))?;

    let hist_dir = out.join(HISTOGRAM_DIR);
    fs::create_dir_all(&hist_dir).map_err(io(&hist_dir))?;
    let before: Vec<Vec<DomainImage>> = inputs.iter().map(|d| images_of(d)).collect();
    for (stage, domains) in [("before", before.as_slice()), ("after", outputs)] {
        let hists = domain_histograms(domains)?;
        write_text(
            &hist_dir.join(format!("{stage}.csv")),
            &histogram_csv(&hists),
        )?;
        imaging::save_rgb(
            &hist_dir.join(format!("{stage}.png")),
            &plot::histogram_figure(&hists),
        )?;
    }
    Ok(())
}

pub fn make_synthetic(
    out: &Path,
    seed: u64,
    domains: usize,
    images: usize,
    size: usize,
    force: bool,
) -> Result<()> {
    let cfg = SyntheticConfig {
        n_domains: domains,
        images_per_domain: images,
        size,
        seed,
    };
    cfg.validate()?;
    prepare_out(out, force)?;
    let ds = generate(&cfg)?;
    dataset::write_synthetic(&ds, out)?;
    let means: Vec<[f64; 3]> = ds.domains.iter().map(|d| domain_means(d)).collect();
    let mut min_gap = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            min_gap = min_gap.min(domain_gap(&means[i], &means[j]));
        }
    }
    info!(
        "wrote {domains} domains of {images} tiles to {}; smallest domain gap {min_gap:.3}",
        out.display()
    );
    Ok(())
}

pub fn train_gan(
    manifest: &Path,
    out: &Path,
    args: &ConfigArgs,
    resume: bool,
    force: bool,
) -> Result<()> {
    let cfg = RunConfig::resolve(
        args.desk_scale,
        args.config.as_deref(),
        &args.sets,
        args.seed,
    )?;
    let (_, data) = load_manifest(manifest)?;
    if data.len() < 2 {
        return Err(Error::Data(format!(
            "the manifest lists {} domain(s); at least 2 are needed",
            data.len()
        ))
        .into());
    }
    let patches = data
        .iter()
        .map(|d| dataset::domain_patches(&images_of(d), cfg.gan.patch_size, cfg.gan.overlap))
        .collect::<stdgan_core::Result<Vec<_>>>()?;
    if resume {
        if checkpoint::latest(out)?.is_none() {
            return Err(CliError::Usage(format!(
                "{} holds no run to resume",
                out.display()
            )));
        }
    } else {
        prepare_out(out, force)?;
    }
    write_text(&out.join(CONFIG_FILE), &cfg.render())?;
    let trainer = train_in_dir(&patches, &cfg.gan, out)?;
    let mut profile = average_params(&trainer.ema)?;
    profile.source = out.display().to_string();
    let json = serde_json::to_string_pretty(&profile).map_err(Error::from)?;
    write_text(&out.join(PROFILE_FILE), &json)?;
    info!("training finished after {} epochs", trainer.epoch);
    Ok(())
}

fn load_checkpoint(path: &Path, n_domains: usize) -> Result<checkpoint::Checkpoint> {
    let ck = checkpoint::load(&checkpoint::resolve(path)?)?;
    ck.check_domains(n_domains)?;
    Ok(ck)
}

pub fn standardize(manifest: &Path, ckpt: &Path, out: &Path, force: bool) -> Result<()> {
    let (m, data) = load_manifest(manifest)?;
    let ck = load_checkpoint(ckpt, data.len())?;
    prepare_out(out, force)?;
    let mut profile = average_params(&ck.ema)?;
    profile.source = ckpt.display().to_string();
    let tiling = Tiling {
        patch_size: ck.cfg.patch_size,
        overlap: ck.cfg.overlap,
    };
    let outputs = data
        .iter()
        .map(|d| {
            d.iter()
                .map(|n| standardize_image(&n.image, &profile, &ck.model, tiling))
                .collect()
        })
        .collect::<stdgan_core::Result<Vec<Vec<_>>>>()?;
    write_mirrored(&m, &data, &outputs, out)?;
    let json = serde_json::to_string_pretty(&profile).map_err(Error::from)?;
    write_text(&out.join(PROFILE_FILE), &json)?;
    info!("standardized {} domains into {}", data.len(), out.display());
    Ok(())
}

pub fn baseline(
    manifest: &Path,
    method: BaselineMethod,
    out: &Path,
    per_image: bool,
    force: bool,
) -> Result<()> {
    let (m, data) = load_manifest(manifest)?;
    prepare_out(out, force)?;
    let outputs = data
        .iter()
        .map(|d| apply_to_domain(method, &images_of(d), per_image))
        .collect::<stdgan_core::Result<Vec<_>>>()?;
    write_mirrored(&m, &data, &outputs, out)?;
    info!("applied {method} to {} domains", data.len());
    Ok(())
}

fn check_domain_id(id: usize, count: usize) -> Result<()> {
    if id >= count {
        return Err(Error::UnknownDomain { id, count }.into());
    }
    Ok(())
}

pub fn train_seg(
    manifest: &Path,
    sources: &[usize],
    out: &Path,
    args: &ConfigArgs,
    force: bool,
) -> Result<()> {
    let cfg = RunConfig::resolve(
        args.desk_scale,
        args.config.as_deref(),
        &args.sets,
        args.seed,
    )?;
    let (_, data) = load_manifest(manifest)?;
    for &s in sources {
        check_domain_id(s, data.len())?;
    }
    let images: Vec<DomainImage> = sources.iter().flat_map(|&s| images_of(&data[s])).collect();
    if let Some(i) = images.iter().position(|im| im.labels().is_none()) {
        return Err(Error::Data(format!("source image {i} has no label raster")).into());
    }
    prepare_out(out, force)?;
    write_text(&out.join(CONFIG_FILE), &cfg.render())?;
    let (weights, report) = train_segmenter(&images, &cfg.seg)?;
    segmentation::save_segmenter(&weights, &out.join(SEGMENTER_FILE))?;
    let mut losses = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{},{l}\n", e + 1));
    }
    write_text(&out.join("losses.csv"), &losses)?;
    info!(
        "segmenter written to {}",
        out.join(SEGMENTER_FILE).display()
    );
    Ok(())
}

pub fn eval(
    manifest: &Path,
    model: &Path,
    target: usize,
    method: &str,
    out: &Path,
    force: bool,
) -> Result<()> {
    if method.is_empty() || method.contains([',', '\n']) {
        return Err(CliError::Usage(format!(
            "method label `{method}` must be non-empty without commas"
        )));
    }
    let (_, data) = load_manifest(manifest)?;
    check_domain_id(target, data.len())?;
    if let Some(n) = data[target].iter().find(|n| n.image.labels().is_none()) {
        return Err(Error::Data(format!("target image {} has no label raster", n.name)).into());
    }
    let weights = segmentation::load_segmenter(model)?;
    prepare_out(out, force)?;
    let pred_dir = out.join(PREDICTIONS_DIR);
    fs::create_dir_all(&pred_dir).map_err(io(&pred_dir))?;
    let mut pairs = Vec::new();
    for n in &data[target] {
        let p = predict(&n.image, &weights)?;
        let stem = Path::new(&n.name).with_extension("png");
        imaging::save_class_map_png(&pred_dir.join(stem), &p)?;
        pairs.push((p, n.image.labels().expect("checked above").clone()));
    }
    let result = evaluate_many(&pairs)?;
    write_text(
        &out.join(RESULTS_FILE),
        &segmentation::results_csv(&[(method.to_string(), result.clone())]),
    )?;
    info!("{}", segmentation::csv_row(method, &result));
    Ok(())
}

fn top_left(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (c, _, src_w) = t.dims3().expect("validated image");
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        t.channel(ch)[(rest / w) * src_w + rest % w]
    })
}

pub fn style_matrix(
    manifest: &Path,
    ckpt: &Path,
    out: &Path,
    sample: usize,
    force: bool,
) -> Result<()> {
    let (_, data) = load_manifest(manifest)?;
    let ck = load_checkpoint(ckpt, data.len())?;
    if out.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    let picked = data
        .iter()
        .enumerate()
        .map(|(d, named)| {
            named
                .get(sample)
                .map(|n| n.image.clone())
                .ok_or_else(|| CliError::Usage(format!("domain {d} has no sample {sample}")))
        })
        .collect::<Result<Vec<_>>>()?;
    // a common crop keeps the mosaic rectangular
    let h = picked.iter().map(DomainImage::height).min().unwrap_or(0);
    let w = picked.iter().map(DomainImage::width).min().unwrap_or(0);
    let samples = picked
        .iter()
        .map(|im| DomainImage::new(top_left(im.pixels(), h, w), None, im.domain_id))
        .collect::<stdgan_core::Result<Vec<_>>>()?;
    let tiling = Tiling {
        patch_size: ck.cfg.patch_size,
        overlap: ck.cfg.overlap,
    };
    let matrix = render_matrix(&samples, &ck.ema, &ck.model, tiling)?;
    // first column holds the inputs, then one column per target style
    let cells: Vec<Vec<Tensor<f32>>> = samples
        .iter()
        .zip(&matrix)
        .map(|(s, row)| {
            std::iter::once(s.pixels().clone())
                .chain(row.iter().map(|d| d.pixels().clone()))
                .collect()
        })
        .collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    imaging::save_rgb(out, &mosaic(&cells, 4)?)?;
    info!("style matrix written to {}", out.display());
    Ok(())
}
