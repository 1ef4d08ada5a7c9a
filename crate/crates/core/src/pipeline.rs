//! Dataset preparation and the training loop.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classic::ByteImage;
use crate::metrics::{images_to_tensor, tensor_to_images, ImageTensor, MetricsError};
use crate::model::{train_step, Checkpoint, LossComponents, StegNet, IMAGE_SIZE};
use crate::tensor::{AdamConfig, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{dir}: only {found} usable images, need at least {MIN_IMAGES}")]
    TooFewImages { dir: PathBuf, found: usize },
    #[error("non-finite loss at step {step}; cover indices {covers:?}, hidden indices {hiddens:?}")]
    NonFinite {
        step: u64,
        covers: Vec<usize>,
        hiddens: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub const MIN_IMAGES: usize = 4;

/// A smooth colour gradient with a few soft-edged discs and bars and mild
/// sensor-like noise. Same seed, same image.
pub fn synthetic_image(seed: u64, size: usize) -> ByteImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let base: [f64; 3] = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
    let gx: [f64; 3] = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
    let gy: [f64; 3] = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
    let mut img = vec![0.0f64; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            for c in 0..3 {
                img[(y * size + x) * 3 + c] = base[c] + gx[c] * u + gy[c] * v;
            }
        }
    }
    let shapes = rng.gen_range(2..=5);
    for _ in 0..shapes {
        let colour: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let r = rng.gen_range(0.08..0.3) * s;
        let bar = rng.gen_bool(0.3);
        let edge = 0.02 * s + 0.5;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let dist = if bar { dx.abs().max(dy.abs() * 3.0) } else { (dx * dx + dy * dy).sqrt() };
                let alpha = ((r - dist) / edge + 0.5).clamp(0.0, 1.0);
                for c in 0..3 {
                    let p = &mut img[(y * size + x) * 3 + c];
                    *p = *p * (1.0 - alpha) + colour[c] * alpha;
                }
            }
        }
    }
    let noise = Normal::new(0.0, 1.5).expect("valid deviation");
    let data = img
        .iter()
        .map(|&v| (v * 255.0 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    ByteImage::new(size, size, data).expect("square image")
}

/// `count` synthetic images; image `i` uses seed `seed + i`.
pub fn synthetic_corpus(count: usize, seed: u64, size: usize) -> Vec<ByteImage> {
    (0..count as u64).map(|i| synthetic_image(seed.wrapping_add(i), size)).collect()
}

/// Centre crop to a square, bilinear resize to `size × size`, scale to `[0, 1]`.
pub fn prepare_image(img: &ByteImage, size: usize) -> ImageTensor {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let rgb = RgbImage::from_raw(w, h, img.data().to_vec()).expect("consistent dimensions");
    let side = h.min(w);
    let cropped = imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = if side as usize == size {
        cropped
    } else {
        imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    };
    let bytes = ByteImage::new(size, size, resized.into_raw()).expect("resized to size");
    ImageTensor::from_bytes(&bytes)
}

/// Decodes every image directly inside `dir` in file-name order, skipping
/// files that fail to decode.
pub fn ingest(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, ImageTensor)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        match ByteImage::load(&path) {
            Ok(img) => out.push((path, prepare_image(&img, IMAGE_SIZE))),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if out.len() < MIN_IMAGES {
        return Err(PipelineError::TooFewImages {
            dir: dir.to_path_buf(),
            found: out.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of the file names, then the first `round(n · fraction)`
/// (at least one, at most `n - 1`) go to training. Indices refer to the
/// order of `names`; both halves come back sorted.
pub fn split<S: AsRef<str>>(names: &[S], seed: u64, train_fraction: f64) -> Split {
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| names[a].as_ref().cmp(names[b].as_ref()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = names.len();
    let k = ((n as f64 * train_fraction).round() as usize).clamp(n.min(1), n.saturating_sub(1).max(1));
    let mut train = order[..k.min(n)].to_vec();
    let mut test = order[k.min(n)..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pairing {
    /// Cover and hidden drawn independently each step.
    #[default]
    Random,
    /// Pairs `(i, i + 1 mod n)` over the pool, visited in shuffled epochs.
    Fixed,
}

impl FromStr for Pairing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Pairing::Random),
            "fixed" => Ok(Pairing::Fixed),
            _ => Err(format!("pairing must be random or fixed, got {s:?}")),
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::Random => "random",
            Pairing::Fixed => "fixed",
        })
    }
}

/// The `(cover, hidden)` pairs fixed pairing trains on.
pub fn fixed_pairs(pool: usize) -> Vec<(usize, usize)> {
    (0..pool).map(|i| (i, (i + 1) % pool)).collect()
}

/// Draws `(cover, hidden)` index pairs with cover ≠ hidden.
#[derive(Debug, Clone)]
pub struct PairSampler {
    rng: ChaCha8Rng,
    pool: usize,
    pairing: Pairing,
    queue: Vec<(usize, usize)>,
}

impl PairSampler {
    pub fn new(pool: usize, seed: u64, pairing: Pairing) -> Result<Self> {
        if pool < 2 {
            return Err(PipelineError::Config(format!("pairing needs at least 2 images, got {pool}")));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            pool,
            pairing,
            queue: Vec::new(),
        })
    }

    pub fn next_pair(&mut self) -> (usize, usize) {
        match self.pairing {
            Pairing::Random => {
                let cover = self.rng.gen_range(0..self.pool);
                let hidden = (cover + self.rng.gen_range(1..self.pool)) % self.pool;
                (cover, hidden)
            }
            Pairing::Fixed => {
                if self.queue.is_empty() {
                    self.queue = fixed_pairs(self.pool);
                    self.queue.shuffle(&mut self.rng);
                    self.queue.reverse();
                }
                self.queue.pop().expect("refilled above")
            }
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<(usize, usize)> {
        (0..batch).map(|_| self.next_pair()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub image_dir: Option<PathBuf>,
    /// Train on this many generated images instead of a directory.
    pub synthetic: Option<usize>,
    pub image_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub seed: u64,
    pub train_fraction: f64,
    pub pairing: Pairing,
    pub checkpoint_path: PathBuf,
    pub log_csv_path: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_dir: None,
            synthetic: None,
            image_size: IMAGE_SIZE,
            batch_size: 8,
            learning_rate: 1e-5,
            steps: 1000,
            seed: 0,
            train_fraction: 0.8,
            pairing: Pairing::Random,
            checkpoint_path: PathBuf::from("stegnet.stgn"),
            log_csv_path: PathBuf::from("loss.csv"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: {e}"))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "image_dir",
        "synthetic",
        "image_size",
        "batch_size",
        "learning_rate",
        "steps",
        "seed",
        "train_fraction",
        "pairing",
        "checkpoint_path",
        "log_csv_path",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "image_dir" => self.image_dir = Some(PathBuf::from(value)),
            "synthetic" => self.synthetic = Some(parse_value(key, value)?),
            "image_size" => self.image_size = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "train_fraction" => self.train_fraction = parse_value(key, value)?,
            "pairing" => self.pairing = value.parse()?,
            "checkpoint_path" => self.checkpoint_path = PathBuf::from(value),
            "log_csv_path" => self.log_csv_path = PathBuf::from(value),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: String| PipelineError::ConfigSyntax { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key = value, got {line:?}")))?;
            self.set(key.trim(), value.trim()).map_err(syntax)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.image_size != IMAGE_SIZE {
            return fail(format!("image_size must be {IMAGE_SIZE}, got {}", self.image_size));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        match (&self.image_dir, self.synthetic) {
            (Some(_), Some(_)) => fail("set either image_dir or synthetic, not both".into()),
            (None, None) => fail("set image_dir or synthetic".into()),
            (None, Some(n)) if n < MIN_IMAGES => fail(format!("synthetic needs at least {MIN_IMAGES} images")),
            _ => Ok(()),
        }
    }

    /// The images named by the config, in deterministic order.
    pub fn load_images(&self) -> Result<Vec<(String, ImageTensor)>> {
        match (&self.image_dir, self.synthetic) {
            (Some(dir), _) => Ok(ingest(dir)?
                .into_iter()
                .map(|(p, t)| (p.file_name().unwrap_or_default().to_string_lossy().into_owned(), t))
                .collect()),
            (None, Some(n)) => Ok(synthetic_corpus(n, self.seed, IMAGE_SIZE)
                .iter()
                .enumerate()
                .map(|(i, img)| (format!("synthetic-{i:04}"), ImageTensor::from_bytes(img)))
                .collect()),
            (None, None) => Err(PipelineError::Config("set image_dir or synthetic".into())),
        }
    }
}

/// Loss-log columns.
pub const LOSS_HEADER: [&str; 6] = ["step", "loss", "l_ce", "l_hd", "var_ce", "var_hd"];

fn batch_tensor(pool: &[ImageTensor], idx: impl Iterator<Item = usize>) -> Result<crate::tensor::Tensor<f32>> {
    let imgs: Vec<ImageTensor> = idx.map(|i| pool[i].clone()).collect();
    Ok(images_to_tensor(&imgs)?)
}

/// Runs `cfg.steps` optimizer steps on `pool` from a fresh model seeded by
/// `cfg.seed`, writing one loss row per step to `log`. `on_step` sees every
/// step's losses, e.g. for progress output.
pub fn train(
    cfg: &TrainConfig,
    pool: &[ImageTensor],
    log: impl Write,
    mut on_step: impl FnMut(u64, &LossComponents),
) -> Result<Checkpoint> {
    if pool.iter().any(|img| (img.height(), img.width()) != (IMAGE_SIZE, IMAGE_SIZE)) {
        return Err(PipelineError::Config(format!("training images must be {IMAGE_SIZE}x{IMAGE_SIZE}")));
    }
    let mut ckpt = Checkpoint::init(cfg.seed, AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut sampler = PairSampler::new(pool.len(), cfg.seed ^ 0x5EED_0F_9A12, cfg.pairing)?;
    let mut w = csv::Writer::from_writer(log);
    w.write_record(LOSS_HEADER)?;
    for _ in 0..cfg.steps {
        let pairs = sampler.next_batch(cfg.batch_size);
        let cover = batch_tensor(pool, pairs.iter().map(|p| p.0))?;
        let hidden = batch_tensor(pool, pairs.iter().map(|p| p.1))?;
        let step = ckpt.step + 1;
        let non_finite = || PipelineError::NonFinite {
            step,
            covers: pairs.iter().map(|p| p.0).collect(),
            hiddens: pairs.iter().map(|p| p.1).collect(),
        };
        let loss = match train_step(&mut ckpt, &cover, &hidden) {
            Ok(l) => l,
            Err(TensorError::NonFiniteGradient(_)) => return Err(non_finite()),
            Err(e) => return Err(e.into()),
        };
        if !loss.total.is_finite() {
            return Err(non_finite());
        }
        w.write_record([
            ckpt.step.to_string(),
            loss.total.to_string(),
            loss.l_ce.to_string(),
            loss.l_hd.to_string(),
            loss.var_ce.to_string(),
            loss.var_hd.to_string(),
        ])?;
        on_step(ckpt.step, &loss);
    }
    w.flush()?;
    Ok(ckpt)
}

/// Embedded and decoded images for `(cover, hidden)` pairs, in eval mode.
pub fn run_pairs(model: &StegNet<f32>, covers: &[ImageTensor], hiddens: &[ImageTensor]) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
    if covers.len() != hiddens.len() {
        return Err(PipelineError::Config(format!("{} covers but {} hidden images", covers.len(), hiddens.len())));
    }
    let mut embedded = Vec::with_capacity(covers.len());
    let mut decoded = Vec::with_capacity(covers.len());
    for (c, h) in covers.chunks(16).zip(hiddens.chunks(16)) {
        let e = model.encode(&images_to_tensor(c)?, &images_to_tensor(h)?)?;
        let d = model.decode(&e)?;
        embedded.extend(tensor_to_images(&e)?);
        decoded.extend(tensor_to_images(&d)?);
    }
    Ok((embedded, decoded))
}
