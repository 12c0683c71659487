//! Images, label rasters, patch tiling and channel histograms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Number of image channels handled throughout (red, green, blue).
pub const CHANNELS: usize = 3;

/// Default histogram resolution, one bin per 8-bit level.
pub const DEFAULT_BINS: usize = 256;

/// Semantic classes of the label rasters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Void = 0,
    Building = 1,
    Road = 2,
    Tree = 3,
}

impl Class {
    pub const FOREGROUND: [Class; 3] = [Class::Building, Class::Road, Class::Tree];

    pub fn from_index(v: u8) -> Option<Class> {
        match v {
            0 => Some(Class::Void),
            1 => Some(Class::Building),
            2 => Some(Class::Road),
            3 => Some(Class::Tree),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Void => "void",
            Class::Building => "building",
            Class::Road => "road",
            Class::Tree => "tree",
        }
    }
}

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| Class::from_index(v).is_none()) {
            return Err(Error::Data(format!(
                "label value {bad} outside the class set 0..=3"
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: Class) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn crop(&self, row: usize, col: usize, size: usize) -> LabelMap {
        let mut data = Vec::with_capacity(size * size);
        for r in row..row + size {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + size]);
        }
        LabelMap {
            height: size,
            width: size,
            data,
        }
    }
}

/// An RGB raster with values in `[0, 1]`, optional labels and the id of the
/// domain it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainImage {
    pixels: Tensor<f32>,
    labels: Option<LabelMap>,
    pub domain_id: usize,
}

impl DomainImage {
    pub fn new(pixels: Tensor<f32>, labels: Option<LabelMap>, domain_id: usize) -> Result<Self> {
        let (c, h, w) = pixels.dims3()?;
        if c != CHANNELS {
            return Err(Error::Shape(format!(
                "expected {CHANNELS} channels, got {c}"
            )));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if (l.height, l.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "labels {}x{} do not match image {h}x{w}",
                    l.height, l.width
                )));
            }
        }
        Ok(DomainImage {
            pixels,
            labels,
            domain_id,
        })
    }

    /// Builds an image from arbitrary reals, clipping into `[0, 1]`.
    pub fn from_clipped(
        mut pixels: Tensor<f32>,
        labels: Option<LabelMap>,
        domain_id: usize,
    ) -> Result<Self> {
        pixels
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(pixels, labels, domain_id)
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&LabelMap> {
        self.labels.as_ref()
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn with_pixels(&self, pixels: Tensor<f32>) -> Result<Self> {
        Self::from_clipped(pixels, self.labels.clone(), self.domain_id)
    }
}

/// Anchors of a tiling of an `H×W` raster into square patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub overlap: usize,
    pub origins: Vec<(usize, usize)>,
    pub source_shape: (usize, usize),
}

/// Regular anchors `0, stride, 2·stride, …` that fit, plus `dim - size`
/// when the last regular patch stops short of the border.
fn axis_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + size <= dim {
        out.push(o);
        o += stride;
    }
    if let Some(&last) = out.last() {
        if last + size < dim {
            out.push(dim - size);
        }
    }
    out
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, overlap: usize) -> Result<Self> {
        if patch_size == 0 || overlap >= patch_size {
            return Err(Error::Config(format!(
                "overlap {overlap} must be smaller than patch size {patch_size}"
            )));
        }
        if patch_size > height.min(width) {
            return Err(Error::Dimension(format!(
                "image {height}x{width} is smaller than patch size {patch_size}"
            )));
        }
        let stride = patch_size - overlap;
        let rows = axis_origins(height, patch_size, stride);
        let cols = axis_origins(width, patch_size, stride);
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(PatchGrid {
            patch_size,
            overlap,
            origins,
            source_shape: (height, width),
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.patch_size - self.overlap
    }

    /// Patch `index` cut out of a `[C, H, W]` tensor of the grid's source shape.
    pub fn crop<T: Scalar>(&self, source: &Tensor<T>, index: usize) -> Tensor<T> {
        let (c, _, w) = source.dims3().expect("crop source");
        let (r0, c0) = self.origins[index];
        let s = self.patch_size;
        let mut data = Vec::with_capacity(c * s * s);
        for ch in 0..c {
            let plane = source.channel(ch);
            for r in r0..r0 + s {
                data.extend_from_slice(&plane[r * w + c0..r * w + c0 + s]);
            }
        }
        Tensor::from_vec(&[c, s, s], data).unwrap()
    }

    pub fn crop_labels(&self, labels: &LabelMap, index: usize) -> LabelMap {
        let (r, c) = self.origins[index];
        labels.crop(r, c, self.patch_size)
    }
}

/// Tiles `image` into `patch_size` squares overlapping by `overlap` pixels;
/// the last patch on each axis is snapped to the border instead of padding.
pub fn extract_patches(
    image: &DomainImage,
    patch_size: usize,
    overlap: usize,
) -> Result<PatchGrid> {
    PatchGrid::new(image.height(), image.width(), patch_size, overlap)
}

/// Reassembles per-patch `[K, s, s]` arrays into a `[K, H, W]` array,
/// averaging wherever patches overlap.
pub fn stitch<T: Scalar>(patches: &[Tensor<T>], grid: &PatchGrid) -> Result<Tensor<T>> {
    if patches.len() != grid.len() {
        return Err(Error::Consistency(format!(
            "{} patches supplied for a grid of {}",
            patches.len(),
            grid.len()
        )));
    }
    let s = grid.patch_size;
    let k = match patches.first() {
        Some(p) => p.dims3()?.0,
        None => return Err(Error::Consistency("empty patch grid".into())),
    };
    let (h, w) = grid.source_shape;
    // f64 accumulation keeps the mean of identical overlapping values exact
    let mut sum = vec![0f64; k * h * w];
    let mut count = vec![0u32; h * w];
    for (patch, &(r0, c0)) in patches.iter().zip(&grid.origins) {
        if patch.shape() != [k, s, s] {
            return Err(Error::Consistency(format!(
                "patch shape {:?} does not match [{k}, {s}, {s}]",
                patch.shape()
            )));
        }
        for ch in 0..k {
            let src = patch.channel(ch);
            let dst = &mut sum[ch * h * w..(ch + 1) * h * w];
            for r in 0..s {
                let row = &mut dst[(r0 + r) * w + c0..(r0 + r) * w + c0 + s];
                for (d, &v) in row.iter_mut().zip(&src[r * s..(r + 1) * s]) {
                    *d += v.to_f64().unwrap();
                }
            }
        }
        for r in 0..s {
            count[(r0 + r) * w + c0..(r0 + r) * w + c0 + s]
                .iter_mut()
                .for_each(|c| *c += 1);
        }
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, &v)| T::from_f64(v / f64::from(count[i % (h * w)].max(1))).unwrap())
        .collect();
    Tensor::from_vec(&[k, h, w], data)
}

/// Normalized per-channel histogram over uniform bins partitioning `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelHistogram {
    pub bins: usize,
    /// `counts[channel][bin]`, each channel summing to one.
    pub counts: Vec<Vec<f64>>,
}

impl ChannelHistogram {
    pub fn channels(&self) -> usize {
        self.counts.len()
    }

    /// Left edge of each bin.
    pub fn edges(&self) -> Vec<f64> {
        (0..self.bins)
            .map(|b| b as f64 / self.bins as f64)
            .collect()
    }
}

fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

/// Histogram pooled over several `[C, H, W]` rasters (e.g. a whole domain).
pub fn pooled_histogram<'a>(
    rasters: impl IntoIterator<Item = &'a Tensor<f32>>,
    bins: usize,
) -> Result<ChannelHistogram> {
    if bins < 2 {
        return Err(Error::Config(format!(
            "histograms need at least 2 bins, got {bins}"
        )));
    }
    let mut counts: Vec<Vec<f64>> = Vec::new();
    for t in rasters {
        let (c, _, _) = t.dims3()?;
        if counts.is_empty() {
            counts = vec![vec![0.0; bins]; c];
        } else if counts.len() != c {
            return Err(Error::Consistency(
                "rasters with different channel counts".into(),
            ));
        }
        for (ch, hist) in counts.iter_mut().enumerate() {
            for &v in t.channel(ch) {
                hist[bin_of(v, bins)] += 1.0;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("histogram of no pixels".into()));
    }
    for hist in &mut counts {
        let total: f64 = hist.iter().sum();
        hist.iter_mut().for_each(|v| *v /= total);
    }
    Ok(ChannelHistogram { bins, counts })
}

pub fn channel_histogram(image: &DomainImage, bins: usize) -> Result<ChannelHistogram> {
    pooled_histogram([image.pixels()], bins)
}

/// Mean over channels of the 1-Wasserstein distance between binned
/// distributions, i.e. the L1 distance of their CDFs times the bin width.
pub fn histogram_distance(a: &ChannelHistogram, b: &ChannelHistogram) -> Result<f64> {
    if a.bins != b.bins || a.channels() != b.channels() {
        return Err(Error::Consistency(format!(
            "histograms differ in shape: {}x{} vs {}x{}",
            a.channels(),
            a.bins,
            b.channels(),
            b.bins
        )));
    }
    let width = 1.0 / a.bins as f64;
    let total: f64 = a
        .counts
        .iter()
        .zip(&b.counts)
        .map(|(ha, hb)| {
            let (mut ca, mut cb, mut d) = (0.0, 0.0, 0.0);
            for (&x, &y) in ha.iter().zip(hb) {
                ca += x;
                cb += y;
                d += (ca - cb).abs();
            }
            d * width
        })
        .sum();
    Ok(total / a.channels() as f64)
}

/// Reads an 8-bit RGB PNG or TIFF into a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` tensor as an 8-bit RGB image (format from the extension).
pub fn save_rgb(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = pixels.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!(
            "RGB output needs 3 channels, got {c}"
        )));
    }
    let plane = h * w;
    let d = pixels.data();
    let buf: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |ch| to_u8(d[ch * plane + i])))
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized above");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a single-channel label PNG with class indices `0..=3`.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(h, w, img.into_raw()).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let img = image::GrayImage::from_raw(
        labels.width as u32,
        labels.height as u32,
        labels.data.clone(),
    )
    .expect("buffer sized by construction");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Display colours for class maps: building red, road green, tree white,
/// void black.
pub const CLASS_PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [255, 0, 0], [0, 255, 0], [255, 255, 255]];

/// Writes a class map as an indexed-colour PNG using [`CLASS_PALETTE`].
pub fn save_class_map_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        std::io::BufWriter::new(file),
        labels.width as u32,
        labels.height as u32,
    );
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(CLASS_PALETTE.iter().flatten().copied().collect::<Vec<u8>>());
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&labels.data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_of(h: usize, w: usize, f: impl Fn(usize) -> f32) -> DomainImage {
        DomainImage::new(Tensor::from_fn(&[3, h, w], f), None, 0).unwrap()
    }

    /// Every anchor position whose patch fits, kept only if no earlier
    /// anchor set already covers it: the reference enumeration for one axis.
    fn enumerate_axis(dim: usize, size: usize, overlap: usize) -> Vec<usize> {
        let stride = size - overlap;
        let mut anchors: Vec<usize> = (0..=dim - size).filter(|o| o % stride == 0).collect();
        let covered = anchors.last().map_or(0, |&o| o + size);
        if covered < dim {
            anchors.push(dim - size);
        }
        anchors
    }

    #[test]
    fn anchors_for_512_and_288() {
        let g = PatchGrid::new(512, 512, 256, 32).unwrap();
        assert_eq!(g.len(), 9);
        let rows: Vec<usize> = g.origins.iter().map(|o| o.0).step_by(3).collect();
        assert_eq!(rows, vec![0, 224, 256]);
        assert_eq!(rows, enumerate_axis(512, 256, 32));

        let g = PatchGrid::new(288, 288, 256, 32).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.origins, vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
        assert_eq!(enumerate_axis(288, 256, 32), vec![0, 32]);
    }

    #[test]
    fn exact_fit_is_one_patch() {
        for overlap in [0, 5, 32, 255] {
            let g = PatchGrid::new(256, 256, 256, overlap).unwrap();
            assert_eq!(g.origins, vec![(0, 0)]);
        }
    }

    #[test]
    fn undersized_image_is_a_dimension_error() {
        let img = image_of(100, 300, |_| 0.5);
        assert!(matches!(
            extract_patches(&img, 256, 32),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            extract_patches(&img, 64, 64),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stitch_averages_overlaps() {
        let grid = PatchGrid {
            patch_size: 4,
            overlap: 2,
            origins: vec![(0, 0), (0, 2)],
            source_shape: (4, 6),
        };
        let a = Tensor::<f64>::zeros(&[1, 4, 4]);
        let b = Tensor::<f64>::full(&[1, 4, 4], 1.0);
        let out = stitch(&[a, b], &grid).unwrap();
        for r in 0..4 {
            let row = &out.data()[r * 6..r * 6 + 6];
            assert_eq!(row, &[0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
        }
    }

    #[test]
    fn single_patch_stitch_is_identity() {
        let t = Tensor::<f32>::from_fn(&[2, 8, 8], |i| i as f32);
        let grid = PatchGrid::new(8, 8, 8, 3).unwrap();
        assert_eq!(stitch(&[t.clone()], &grid).unwrap(), t);
    }

    #[test]
    fn stitch_rejects_wrong_patch_count() {
        let grid = PatchGrid::new(20, 20, 8, 2).unwrap();
        let p = Tensor::<f32>::zeros(&[3, 8, 8]);
        assert!(matches!(stitch(&[p], &grid), Err(Error::Consistency(_))));
    }

    #[test]
    fn histogram_examples() {
        let h = channel_histogram(&image_of(4, 4, |_| 0.5), 10).unwrap();
        for ch in &h.counts {
            assert_eq!(ch[5], 1.0);
        }
        let half = image_of(4, 4, |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        let h = channel_histogram(&half, 2).unwrap();
        for ch in &h.counts {
            assert_eq!(ch, &vec![0.5, 0.5]);
        }
        assert!(channel_histogram(&half, 1).is_err());
    }

    #[test]
    fn distance_between_point_masses() {
        let mut lo = vec![0.0; 10];
        lo[0] = 1.0;
        let mut hi = vec![0.0; 10];
        hi[9] = 1.0;
        let a = ChannelHistogram {
            bins: 10,
            counts: vec![lo.clone(); 3],
        };
        let b = ChannelHistogram {
            bins: 10,
            counts: vec![hi.clone(); 3],
        };
        assert!((histogram_distance(&a, &b).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(histogram_distance(&a, &a).unwrap(), 0.0);
        let c = ChannelHistogram {
            bins: 5,
            counts: vec![vec![0.2; 5]; 3],
        };
        assert!(matches!(
            histogram_distance(&a, &c),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn labels_must_match_and_be_in_class_set() {
        assert!(LabelMap::new(2, 2, vec![0, 1, 2, 4]).is_err());
        let l = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let px = Tensor::<f32>::zeros(&[3, 3, 2]);
        assert!(DomainImage::new(px, Some(l), 0).is_err());
        let bad = Tensor::<f32>::full(&[3, 2, 2], 1.5);
        assert!(DomainImage::new(bad, None, 0).is_err());
    }

    #[test]
    fn rgb_and_label_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::from_fn(&[3, 5, 7], |i| (i % 256) as f32 / 255.0);
        for ext in ["png", "tif"] {
            let p = dir.path().join(format!("x.{ext}"));
            save_rgb(&p, &t).unwrap();
            let back = load_rgb(&p).unwrap();
            assert_eq!(back, t);
        }
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 2, 1]).unwrap();
        let p = dir.path().join("l.png");
        save_labels(&p, &l).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);
        let p = dir.path().join("pred.png");
        save_class_map_png(&p, &l).unwrap();
        let rgb = image::open(&p).unwrap().to_rgb8();
        assert_eq!(rgb.get_pixel(1, 0).0, [255, 0, 0]);
        assert_eq!(rgb.get_pixel(0, 1).0, [255, 255, 255]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tiling_round_trip_and_coverage(h in 16usize..90, w in 16usize..90, size in 4usize..16, ov in 0usize..15) {
            let overlap = ov.min(size - 1);
            let t = Tensor::<f32>::from_fn(&[2, h, w], |i| ((i * 37) % 101) as f32);
            let grid = PatchGrid::new(h, w, size, overlap).unwrap();
            let mut covered = vec![false; h * w];
            for &(r, c) in &grid.origins {
                prop_assert!(r + size <= h && c + size <= w);
                for rr in r..r + size {
                    for cc in c..c + size {
                        covered[rr * w + cc] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            let rows: Vec<usize> = grid.origins.iter().map(|o| o.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            for pair in rows.windows(2).take(rows.len().saturating_sub(2)) {
                prop_assert_eq!(pair[1] - pair[0], size - overlap);
            }
            let patches: Vec<_> = (0..grid.len()).map(|i| grid.crop(&t, i)).collect();
            prop_assert_eq!(stitch(&patches, &grid).unwrap(), t);
        }

        #[test]
        fn histogram_mass_and_pseudometric(vals in proptest::collection::vec(0.0f32..=1.0, 48), other in proptest::collection::vec(0.0f32..=1.0, 48), bins in 2usize..40) {
            let a = DomainImage::new(Tensor::from_vec(&[3, 4, 4], vals).unwrap(), None, 0).unwrap();
            let b = DomainImage::new(Tensor::from_vec(&[3, 4, 4], other).unwrap(), None, 0).unwrap();
            let ha = channel_histogram(&a, bins).unwrap();
            let hb = channel_histogram(&b, bins).unwrap();
            for ch in &ha.counts {
                prop_assert!((ch.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(ch.iter().all(|&v| v >= 0.0));
            }
            let d = histogram_distance(&ha, &hb).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - histogram_distance(&hb, &ha).unwrap()).abs() < 1e-12);
            prop_assert_eq!(histogram_distance(&ha, &ha).unwrap(), 0.0);
        }
    }
}
