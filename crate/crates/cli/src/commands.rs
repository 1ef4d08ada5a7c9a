use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use stegnet::classic::{jpeg_append_detect, lsb_embed_image, lsb_extract_image, ByteImage, JpegVerdict, LsbConfig};
use stegnet::metrics::{
    cover_changing_rate, enhance, residual, write_reports_csv, ImageTensor, StegoReport,
};
use stegnet::model::{load_checkpoint, save_checkpoint, Checkpoint, IMAGE_SIZE};
use stegnet::pipeline::{self, fixed_pairs, prepare_image, split, PipelineError, TrainConfig};
use stegnet::steganalysis::{fuse, roc_sweep, run_detectors, scan_image, write_roc_csv, write_scan_csv};

use crate::{
    AnalyzeArgs, DecodeArgs, EmbedArgs, JpegScanArgs, LsbEmbedArgs, LsbExtractArgs, MetricsArgs, RocArgs, TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing inputs or an invalid configuration.
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("no such directory: {}", path.display())))
    }
}

fn load_image(path: &Path) -> Result<ByteImage, CliError> {
    require_file(path)?;
    Ok(ByteImage::load(path).with_context(|| format!("reading {}", path.display()))?)
}

fn save_image(img: &ByteImage, path: &Path) -> CliResult {
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn model_input(path: &Path) -> Result<ImageTensor, CliError> {
    Ok(prepare_image(&load_image(path)?, IMAGE_SIZE))
}

fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    require_file(path)?;
    Ok(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        require_file(path)?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    let flags: [(&str, Option<String>); 10] = [
        ("image_dir", a.image_dir.as_ref().map(|p| p.display().to_string())),
        ("synthetic", a.synthetic.map(|v| v.to_string())),
        ("steps", a.steps.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("learning_rate", a.learning_rate.map(|v| v.to_string())),
        ("train_fraction", a.train_fraction.map(|v| v.to_string())),
        ("pairing", a.pairing.clone()),
        ("checkpoint_path", a.checkpoint.as_ref().map(|p| p.display().to_string())),
        ("log_csv_path", a.log.as_ref().map(|p| p.display().to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            if key == "image_dir" {
                cfg.synthetic = None;
            } else if key == "synthetic" {
                cfg.image_dir = None;
            }
            cfg.set(key, &v).map_err(usage)?;
        }
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if let Some(dir) = &cfg.image_dir {
        require_dir(dir)?;
    }
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> CliResult {
    let cfg = train_config(&a)?;
    let images = match cfg.load_images() {
        Ok(images) => images,
        Err(e @ PipelineError::TooFewImages { .. }) => return Err(usage(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let names: Vec<&str> = images.iter().map(|(n, _)| n.as_str()).collect();
    let parts = split(&names, cfg.seed, cfg.train_fraction);
    let pool: Vec<ImageTensor> = parts.train.iter().map(|&i| images[i].1.clone()).collect();
    eprintln!(
        "training on {} of {} images ({} held out), {} steps",
        pool.len(),
        images.len(),
        parts.test.len(),
        cfg.steps
    );

    let log = BufWriter::new(
        File::create(&cfg.log_csv_path).with_context(|| format!("creating {}", cfg.log_csv_path.display()))?,
    );
    let every = a.progress;
    let ckpt = pipeline::train(&cfg, &pool, log, |step, loss| {
        if every > 0 && step % every == 0 {
            eprintln!(
                "step {step:>6}  loss {:.5}  l_ce {:.5}  l_hd {:.5}",
                loss.total, loss.l_ce, loss.l_hd
            );
        }
    })?;
    save_checkpoint(&ckpt, &cfg.checkpoint_path).with_context(|| format!("writing {}", cfg.checkpoint_path.display()))?;

    let pairs = fixed_pairs(pool.len());
    let covers: Vec<ImageTensor> = pairs.iter().map(|p| pool[p.0].clone()).collect();
    let hiddens: Vec<ImageTensor> = pairs.iter().map(|p| pool[p.1].clone()).collect();
    let (embedded, decoded) = pipeline::run_pairs(&ckpt.model, &covers, &hiddens)?;
    let mut dr = 0.0;
    let mut ccr = 0.0;
    for i in 0..pairs.len() {
        let r = StegoReport::evaluate("", &covers[i], &embedded[i], &hiddens[i], &decoded[i])?;
        dr += r.decoded_rate / pairs.len() as f64;
        ccr += r.cover_changing_rate / pairs.len() as f64;
    }
    eprintln!("training pairs: decoded rate {dr:.4}, cover changing rate {ccr:.4}");
    eprintln!("wrote {} and {}", cfg.checkpoint_path.display(), cfg.log_csv_path.display());
    Ok(())
}

pub fn embed(a: EmbedArgs) -> CliResult {
    let ckpt = load_model(&a.checkpoint)?;
    let cover = model_input(&a.cover)?;
    let hidden = model_input(&a.hidden)?;
    let (embedded, _) = pipeline::run_pairs(&ckpt.model, &[cover.clone()], &[hidden])?;
    let bytes = embedded[0].to_bytes();
    save_image(&bytes, &a.out)?;
    let rate = cover_changing_rate(&cover, &ImageTensor::from_bytes(&bytes))?;
    println!("cover_changing_rate,{rate:.6}");
    Ok(())
}

pub fn decode(a: DecodeArgs) -> CliResult {
    let ckpt = load_model(&a.checkpoint)?;
    let embedded = model_input(&a.embedded)?;
    let e = stegnet::metrics::images_to_tensor(&[embedded])?;
    let d = ckpt.model.decode(&e)?;
    let decoded = stegnet::metrics::tensor_to_images(&d)?;
    save_image(&decoded[0].to_bytes(), &a.out)?;
    Ok(())
}

fn lsb_config(bits: u8, seed: Option<u64>) -> Result<LsbConfig, CliError> {
    LsbConfig::new(bits, seed).map_err(|e| usage(e.to_string()))
}

pub fn lsb_embed(a: LsbEmbedArgs) -> CliResult {
    let cfg = lsb_config(a.bits, a.seed)?;
    let cover = load_image(&a.cover)?;
    let hidden = load_image(&a.hidden)?;
    let stego = lsb_embed_image(&cover, &hidden, &cfg).map_err(|e| usage(e.to_string()))?;
    save_image(&stego, &a.out)?;
    let rate = cover_changing_rate(&ImageTensor::from_bytes(&cover), &ImageTensor::from_bytes(&stego))?;
    println!("cover_changing_rate,{rate:.6}");
    println!("capacity_bpp,{:.4}", cfg.capacity_bpp());
    Ok(())
}

pub fn lsb_extract(a: LsbExtractArgs) -> CliResult {
    let cfg = lsb_config(a.bits, a.seed)?;
    let stego = load_image(&a.embedded)?;
    save_image(&lsb_extract_image(&stego, &cfg), &a.out)?;
    Ok(())
}

pub fn metrics(a: MetricsArgs) -> CliResult {
    let [c, e, h, d] = [&a.cover, &a.embedded, &a.hidden, &a.decoded].map(|p| load_image(p));
    let (c, e, h, d) = (c?, e?, h?, d?);
    let dims = |x: &ByteImage| (x.height(), x.width());
    if dims(&c) != dims(&e) || dims(&h) != dims(&d) || dims(&c) != dims(&h) {
        return Err(usage("cover, embedded, hidden and decoded must share one size"));
    }
    let [c, e, h, d] = [&c, &e, &h, &d].map(ImageTensor::from_bytes);
    let id = a
        .id
        .clone()
        .unwrap_or_else(|| a.embedded.file_name().unwrap_or_default().to_string_lossy().into_owned());
    let mut report = StegoReport::evaluate(id, &c, &e, &h, &d)?;
    let stego_bytes = e.to_bytes();
    for s in run_detectors(&stego_bytes) {
        if !s.is_degenerate() {
            report.detector_scores.insert(s.name.to_string(), s.score);
        }
    }
    match &a.out {
        Some(path) => write_reports_csv(File::create(path).with_context(|| format!("creating {}", path.display()))?, &[report])?,
        None => write_reports_csv(io::stdout().lock(), &[report])?,
    }
    if let Some(path) = &a.residual {
        let r = enhance(&residual(&c, &e)?, a.magnify).map_err(|e| usage(e.to_string()))?;
        save_image(&r.to_bytes(), path)?;
    }
    Ok(())
}

fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png") | Some("ppm") | Some("pnm")
    )
}

/// Files named directly plus the image files inside named directories,
/// each directory listed in file-name order.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_image_path(f))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            require_file(p)?;
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn decode_all(paths: &[PathBuf]) -> Result<Vec<ByteImage>, CliError> {
    paths
        .par_iter()
        .map(|p| ByteImage::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(CliError::Runtime)
}

pub fn analyze(a: AnalyzeArgs) -> CliResult {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage(format!("threshold must be in [0, 1], got {}", a.threshold)));
    }
    let paths = expand_inputs(&a.inputs)?;
    let images = decode_all(&paths)?;
    let rows: Vec<_> = paths
        .par_iter()
        .zip(images.par_iter())
        .map(|(p, img)| scan_image(p.display().to_string(), img, a.threshold))
        .collect();
    match &a.out {
        Some(path) => write_scan_csv(File::create(path).with_context(|| format!("creating {}", path.display()))?, &rows)?,
        None => write_scan_csv(io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn fused_scores(dir: &Path) -> Result<Vec<f64>, CliError> {
    require_dir(dir)?;
    let paths = expand_inputs(&[dir.to_path_buf()])?;
    if paths.is_empty() {
        return Err(usage(format!("no PNG or PPM images in {}", dir.display())));
    }
    let images = decode_all(&paths)?;
    let scores: Vec<Option<f64>> = images.par_iter().map(|img| fuse(&run_detectors(img)).ok()).collect();
    let mut out = Vec::with_capacity(scores.len());
    for (p, s) in paths.iter().zip(scores) {
        match s {
            Some(s) => out.push(s),
            None => log::warn!("{}: no detector produced a score; left out of the sweep", p.display()),
        }
    }
    Ok(out)
}

pub fn roc(a: RocArgs) -> CliResult {
    let clean = fused_scores(&a.clean_dir)?;
    let stego = fused_scores(&a.stego_dir)?;
    let curve = roc_sweep(&clean, &stego).map_err(|e| usage(e.to_string()))?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    write_roc_csv(&mut w, &curve)?;
    w.flush()?;
    println!("auc,{:.6}", curve.auc);
    Ok(())
}

pub fn jpeg_scan(a: JpegScanArgs) -> CliResult {
    for f in &a.files {
        require_file(f)?;
    }
    let mut out = io::stdout().lock();
    writeln!(out, "path,verdict,offset,is_rar")?;
    let mut failed = 0;
    for f in &a.files {
        let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        match jpeg_append_detect(&bytes) {
            Ok(JpegVerdict::Clean) => writeln!(out, "{},clean,,", f.display())?,
            Ok(JpegVerdict::Appended { offset, is_rar }) => writeln!(out, "{},appended,{offset},{is_rar}", f.display())?,
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", f.display());
                writeln!(out, "{},error,,", f.display())?;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!("{failed} file(s) could not be scanned")));
    }
    Ok(())
}
