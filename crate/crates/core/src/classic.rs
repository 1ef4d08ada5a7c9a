//! Classical baselines: k-bit LSB image-in-image hiding and a detector for
//! payloads appended after a JPEG's end-of-image marker.

use std::path::Path;

use image::{ImageFormat, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum StegError {
    #[error("image data has {found} bytes, {height}x{width}x3 needs {expected}")]
    DataLength {
        height: usize,
        width: usize,
        expected: usize,
        found: usize,
    },
    #[error("image dimensions must be positive")]
    EmptyImage,
    #[error("cover is {cover:?} but hidden is {hidden:?} (height, width)")]
    DimensionMismatch {
        cover: (usize, usize),
        hidden: (usize, usize),
    },
    #[error("bits per channel must be in 1..=8, got {0}")]
    BadBitCount(u8),
    #[error("not a JPEG file (missing FF D8 start marker)")]
    NotJpeg,
    #[error("malformed JPEG: no FF D9 end-of-image marker")]
    NoEndOfImage,
    #[error("unsupported image extension for {0} (use .png or .ppm)")]
    Extension(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = StegError> = std::result::Result<T, E>;

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ByteImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ByteImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ByteImage({}x{})", self.height, self.width)
    }
}

impl ByteImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(StegError::EmptyImage);
        }
        let expected = height * width * 3;
        if data.len() != expected {
            return Err(StegError::DataLength {
                height,
                width,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Bytes of one channel in raster order.
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    /// Writes PNG or binary PPM depending on the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => ImageFormat::Png,
            Some("ppm") | Some("pnm") => ImageFormat::Pnm,
            _ => return Err(StegError::Extension(path.display().to_string())),
        };
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("length checked at construction");
        img.save_with_format(path, format)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LsbConfig {
    bits: u8,
    pub scatter_seed: Option<u64>,
}

impl LsbConfig {
    pub fn new(bits: u8, scatter_seed: Option<u64>) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(StegError::BadBitCount(bits));
        }
        Ok(Self { bits, scatter_seed })
    }

    pub fn sequential(bits: u8) -> Result<Self> {
        Self::new(bits, None)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Payload in bits per pixel: a `k`-bit embedding recovers the top `k`
    /// of 8 bits in each of 3 channels exactly.
    pub fn capacity_bpp(&self) -> f64 {
        crate::metrics::capacity_bpp(self.bits as f64 / 8.0).expect("k/8 lies in [0, 1]")
    }

    fn mask(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }
}

/// SplitMix64, the generator both sides use to derive the scatter order.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Fisher–Yates over `0..len`: for i from len-1 down to 1, swap i with
/// `next_u64() % (i + 1)`.
pub fn scatter_permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut perm: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    perm
}

/// Low `k` bits of each cover byte are replaced by the top `k` bits of the
/// matching hidden byte. With a scatter seed, byte `i` of the stego image
/// carries hidden byte `perm[i]`.
pub fn lsb_embed_image(cover: &ByteImage, hidden: &ByteImage, cfg: &LsbConfig) -> Result<ByteImage> {
    if (cover.height, cover.width) != (hidden.height, hidden.width) {
        return Err(StegError::DimensionMismatch {
            cover: (cover.height, cover.width),
            hidden: (hidden.height, hidden.width),
        });
    }
    let mask = cfg.mask();
    let shift = 8 - cfg.bits;
    let put = |c: u8, h: u8| (c & !mask) | (h >> shift);
    let data = match cfg.scatter_seed {
        None => cover.data.iter().zip(&hidden.data).map(|(&c, &h)| put(c, h)).collect(),
        Some(seed) => {
            let perm = scatter_permutation(cover.data.len(), seed);
            cover.data.iter().zip(&perm).map(|(&c, &p)| put(c, hidden.data[p])).collect()
        }
    };
    ByteImage::new(cover.height, cover.width, data)
}

/// Inverse of [`lsb_embed_image`]; the low `8 - k` bits of each recovered
/// byte are zero.
pub fn lsb_extract_image(embedded: &ByteImage, cfg: &LsbConfig) -> ByteImage {
    let mask = cfg.mask();
    let shift = 8 - cfg.bits;
    let take = |s: u8| ((s & mask) as u16) << shift;
    let data = match cfg.scatter_seed {
        None => embedded.data.iter().map(|&s| take(s) as u8).collect(),
        Some(seed) => {
            let perm = scatter_permutation(embedded.data.len(), seed);
            let mut out = vec![0u8; embedded.data.len()];
            for (&s, &p) in embedded.data.iter().zip(&perm) {
                out[p] = take(s) as u8;
            }
            out
        }
    };
    ByteImage {
        height: embedded.height,
        width: embedded.width,
        data,
    }
}

const RAR_MAGIC: [u8; 7] = [0x52, 0x61, 0x72, 0x21, 0x1a, 0x07, 0x00];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JpegVerdict {
    Clean,
    Appended { offset: usize, is_rar: bool },
}

/// Looks for data after the JPEG end-of-image marker.
///
/// The last `FF D9` is taken as the end of the image so that embedded
/// thumbnails do not end the scan early. An `FF D9` directly followed by the
/// RAR signature wins over later markers, since archive bodies can contain
/// that byte pair themselves. Trailing bytes that are all zero count as
/// padding, not payload.
pub fn jpeg_append_detect(bytes: &[u8]) -> Result<JpegVerdict> {
    if !bytes.starts_with(&[0xFF, 0xD8]) {
        return Err(StegError::NotJpeg);
    }
    let eoi: Vec<usize> = bytes
        .windows(2)
        .enumerate()
        .skip(2)
        .filter(|(_, w)| w == &[0xFF, 0xD9])
        .map(|(i, _)| i + 2)
        .collect();
    if let Some(&offset) = eoi.iter().find(|&&end| bytes[end..].starts_with(&RAR_MAGIC)) {
        return Ok(JpegVerdict::Appended { offset, is_rar: true });
    }
    let offset = *eoi.last().ok_or(StegError::NoEndOfImage)?;
    let tail = &bytes[offset..];
    if tail.iter().all(|&b| b == 0) {
        Ok(JpegVerdict::Clean)
    } else {
        Ok(JpegVerdict::Appended { offset, is_rar: false })
    }
}
