//! Evaluation formulas: decoded rate, cover changing rate, payload
//! capacity, residual images, enhancement and channel histograms.

use std::collections::BTreeMap;
use std::io::Write;

use crate::classic::ByteImage;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("image data has {found} values, 3x{height}x{width} needs {expected}")]
    DataLength {
        height: usize,
        width: usize,
        expected: usize,
        found: usize,
    },
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("images differ in size: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// RGB image with values in `[0, 1]`, stored channel-major (`3 × h × w`).
#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageTensor(3x{}x{})", self.height, self.width)
    }
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = 3 * height * width;
        if expected == 0 || data.len() != expected {
            return Err(MetricsError::DataLength {
                height,
                width,
                expected,
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(MetricsError::OutOfRange { index, value });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn from_bytes(img: &ByteImage) -> Self {
        let (h, w) = (img.height(), img.width());
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Self { height: h, width: w, data }
    }

    /// Rounds to the nearest byte.
    pub fn to_bytes(&self) -> ByteImage {
        let plane = self.height * self.width;
        let mut out = vec![0u8; 3 * plane];
        for (i, px) in out.chunks_exact_mut(3).enumerate() {
            for c in 0..3 {
                px[c] = (self.data[c * plane + i] * 255.0).round() as u8;
            }
        }
        ByteImage::new(self.height, self.width, out).expect("same dimensions")
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(MetricsError::ShapeMismatch(
                (self.height, self.width),
                (other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// Stacks images into an `[n, 3, h, w]` tensor.
pub fn images_to_tensor(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| MetricsError::Argument("no images to stack".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        first.check_same(img)?;
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(&[images.len(), 3, first.height, first.width], data)?)
}

pub fn tensor_to_images(t: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
    let &[n, 3, h, w] = t.shape() else {
        return Err(MetricsError::Argument(format!("expected [n, 3, h, w], got {:?}", t.shape())));
    };
    let per = 3 * h * w;
    (0..n)
        .map(|i| ImageTensor::new(h, w, t.data()[i * per..(i + 1) * per].to_vec()))
        .collect()
}

fn mean_abs_diff(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same(b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.data.len() as f64)
}

/// `1 - mean |H - D|` over rows, columns and channels.
pub fn decoded_rate(hidden: &ImageTensor, decoded: &ImageTensor) -> Result<f64> {
    Ok(1.0 - mean_abs_diff(hidden, decoded)?)
}

/// `mean |C - E|` over rows, columns and channels.
pub fn cover_changing_rate(cover: &ImageTensor, embedded: &ImageTensor) -> Result<f64> {
    mean_abs_diff(cover, embedded)
}

/// Bits per pixel carried at a given decoded rate: `rate × 8 × 3`.
pub fn capacity_bpp(decoded_rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&decoded_rate) {
        return Err(MetricsError::Argument(format!("decoded rate {decoded_rate} outside [0, 1]")));
    }
    Ok(decoded_rate * 8.0 * 3.0)
}

/// `|a - b| / max |a - b|`, or all zeros for identical images.
pub fn residual(a: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
    a.check_same(b)?;
    let diff: Vec<f32> = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect();
    let max = diff.iter().copied().fold(0.0f32, f32::max);
    let data = if max == 0.0 {
        diff
    } else {
        diff.into_iter().map(|d| (d / max).min(1.0)).collect()
    };
    Ok(ImageTensor {
        height: a.height,
        width: a.width,
        data,
    })
}

/// `clip(I · M, 0, 1)`.
pub fn enhance(img: &ImageTensor, magnification: f64) -> Result<ImageTensor> {
    if !(magnification > 0.0) || !magnification.is_finite() {
        return Err(MetricsError::Argument(format!("magnification must be positive, got {magnification}")));
    }
    let m = magnification as f32;
    Ok(ImageTensor {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|&v| (v * m).clamp(0.0, 1.0)).collect(),
    })
}

/// Per-channel counts over bins `[i/b, (i+1)/b)`, the last bin closed.
pub fn histogram(img: &ImageTensor, bins: usize) -> Result<[Vec<u64>; 3]> {
    if bins < 2 {
        return Err(MetricsError::Argument(format!("need at least 2 bins, got {bins}")));
    }
    let plane = img.height * img.width;
    let mut out = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
    for (c, counts) in out.iter_mut().enumerate() {
        for &v in &img.data[c * plane..(c + 1) * plane] {
            let i = ((v as f64 * bins as f64).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
    }
    Ok(out)
}

/// `1 - Σ min(h_a, h_b) / pixels`, averaged over channels: 0 for identical
/// histograms, 1 for disjoint ones.
pub fn histogram_intersection_distance(a: &ImageTensor, b: &ImageTensor, bins: usize) -> Result<f64> {
    a.check_same(b)?;
    let (ha, hb) = (histogram(a, bins)?, histogram(b, bins)?);
    let pixels = (a.height * a.width) as f64;
    let shared: f64 = ha
        .iter()
        .zip(&hb)
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p.min(q)).sum::<u64>() as f64 / pixels)
        .sum();
    Ok(1.0 - shared / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StegoReport {
    pub id: String,
    pub decoded_rate: f64,
    pub cover_changing_rate: f64,
    pub capacity_bpp: f64,
    pub detector_scores: BTreeMap<String, f64>,
}

impl StegoReport {
    pub fn evaluate(
        id: impl Into<String>,
        cover: &ImageTensor,
        embedded: &ImageTensor,
        hidden: &ImageTensor,
        decoded: &ImageTensor,
    ) -> Result<Self> {
        let decoded_rate = decoded_rate(hidden, decoded)?;
        Ok(Self {
            id: id.into(),
            decoded_rate,
            cover_changing_rate: cover_changing_rate(cover, embedded)?,
            capacity_bpp: capacity_bpp(decoded_rate)?,
            detector_scores: BTreeMap::new(),
        })
    }
}

/// One row per report; detector columns are the union of all score names.
pub fn write_reports_csv<W: Write>(out: W, reports: &[StegoReport]) -> Result<()> {
    let detectors: Vec<&String> = reports
        .iter()
        .flat_map(|r| r.detector_scores.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id", "decoded_rate", "cover_changing_rate", "capacity_bpp"];
    header.extend(detectors.iter().map(|s| s.as_str()));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.id.clone(),
            format!("{:.6}", r.decoded_rate),
            format!("{:.6}", r.cover_changing_rate),
            format!("{:.4}", r.capacity_bpp),
        ];
        row.extend(
            detectors
                .iter()
                .map(|d| r.detector_scores.get(*d).map(|s| format!("{s:.6}")).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
