//! LSB-replacement detectors in the spirit of StegExpose: chi-square
//! attack, RS analysis, sample pair analysis and primary sets, fused by
//! averaging, plus the ROC sweep used to compare them.
//!
//! Every detector runs on each RGB channel separately and reports the mean
//! of the channel estimates, clamped to `[0, 1]`.

use std::io::Write;

use statrs::function::gamma::gamma_ur;

use crate::classic::ByteImage;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Argument(String),
    #[error("no usable detector scores")]
    Inconclusive,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreStatus {
    Ok,
    /// Usable, but an assumption of the estimator did not hold.
    Warning(String),
    /// No estimate possible; excluded from fusion.
    Degenerate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorScore {
    pub name: &'static str,
    pub score: f64,
    pub status: ScoreStatus,
}

impl DetectorScore {
    fn new(name: &'static str, score: f64, warnings: Vec<String>) -> Self {
        let status = if warnings.is_empty() {
            ScoreStatus::Ok
        } else {
            ScoreStatus::Warning(warnings.join("; "))
        };
        Self {
            name,
            score: score.clamp(0.0, 1.0),
            status,
        }
    }

    fn degenerate(name: &'static str, why: impl Into<String>) -> Self {
        Self {
            name,
            score: 0.0,
            status: ScoreStatus::Degenerate(why.into()),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.status, ScoreStatus::Degenerate(_))
    }
}

/// Averages per-channel estimates, skipping channels that gave none.
fn combine_channels(name: &'static str, per_channel: Vec<Result<(f64, Option<String>), String>>) -> DetectorScore {
    let mut values = Vec::new();
    let mut warnings = Vec::new();
    let mut failures = Vec::new();
    for (c, r) in per_channel.into_iter().enumerate() {
        match r {
            Ok((v, w)) => {
                values.push(v.clamp(0.0, 1.0));
                warnings.extend(w.map(|w| format!("channel {c}: {w}")));
            }
            Err(e) => failures.push(format!("channel {c}: {e}")),
        }
    }
    if values.is_empty() {
        return DetectorScore::degenerate(name, failures.join("; "));
    }
    warnings.extend(failures);
    DetectorScore::new(name, values.iter().sum::<f64>() / values.len() as f64, warnings)
}

/// Upper regularized incomplete gamma `Q(df/2, x/2)`: the chi-square
/// survival function.
pub fn chi_square_sf(statistic: f64, df: f64) -> f64 {
    if statistic <= 0.0 {
        return 1.0;
    }
    gamma_ur(df / 2.0, statistic / 2.0)
}

/// Smallest expected count for a value pair to enter the chi-square sum.
pub const CHI_MIN_EXPECTED: f64 = 5.0;

/// Pairs-of-values test. LSB replacement equalizes the counts of `2i` and
/// `2i+1`; a high p-value for the fit to the pair means suggests a payload.
pub fn chi_square_attack(img: &ByteImage) -> DetectorScore {
    let per_channel = (0..3)
        .map(|c| {
            let mut hist = [0u64; 256];
            for v in img.channel(c) {
                hist[v as usize] += 1;
            }
            let mut stat = 0.0;
            let mut categories = 0usize;
            for k in 0..128 {
                let expected = (hist[2 * k] + hist[2 * k + 1]) as f64 / 2.0;
                if expected >= CHI_MIN_EXPECTED {
                    let d = hist[2 * k] as f64 - expected;
                    stat += d * d / expected;
                    categories += 1;
                }
            }
            if categories < 2 {
                return Err(format!("{categories} value pair(s) with enough samples"));
            }
            Ok((chi_square_sf(stat, (categories - 1) as f64), None))
        })
        .collect();
    combine_channels("chi_square", per_channel)
}

/// Relative counts of regular and singular groups under one flipping mask.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RsCounts {
    regular: f64,
    singular: f64,
}

fn flip_positive(v: u8) -> u8 {
    v ^ 1
}

fn flip_negative(v: u8) -> u8 {
    // -1 <-> 0, 1 <-> 2, ...; 255 <-> 256 clamps to staying put
    if v & 1 == 1 {
        v.saturating_add(1)
    } else if v == 0 {
        0
    } else {
        v - 1
    }
}

const RS_MASK: [bool; 4] = [false, true, true, false];

fn smoothness(g: &[u8; 4]) -> i32 {
    g.windows(2).map(|w| (w[1] as i32 - w[0] as i32).abs()).sum()
}

fn rs_counts(rows: &[Vec<u8>], flip: fn(u8) -> u8) -> RsCounts {
    let (mut r, mut s, mut total) = (0u64, 0u64, 0u64);
    for row in rows {
        for g in row.chunks_exact(4) {
            let g: [u8; 4] = g.try_into().expect("chunk of four");
            let mut f = g;
            for (v, &m) in f.iter_mut().zip(&RS_MASK) {
                if m {
                    *v = flip(*v);
                }
            }
            let (before, after) = (smoothness(&g), smoothness(&f));
            total += 1;
            if after > before {
                r += 1;
            } else if after < before {
                s += 1;
            }
        }
    }
    let t = total.max(1) as f64;
    RsCounts {
        regular: r as f64 / t,
        singular: s as f64 / t,
    }
}

/// Below this spread between the regular and singular fractions the RS
/// statistics carry no signal (typical of noise-like content).
pub const RS_MIN_SEPARATION: f64 = 0.02;

fn rs_channel(rows: Vec<Vec<u8>>) -> Result<(f64, Option<String>), String> {
    let flipped: Vec<Vec<u8>> = rows.iter().map(|r| r.iter().map(|&v| v ^ 1).collect()).collect();
    let pm = rs_counts(&rows, flip_positive);
    let nm = rs_counts(&rows, flip_negative);
    let pm1 = rs_counts(&flipped, flip_positive);
    let nm1 = rs_counts(&flipped, flip_negative);
    let d0 = pm.regular - pm.singular;
    let d1 = pm1.regular - pm1.singular;
    let n0 = nm.regular - nm.singular;
    let n1 = nm1.regular - nm1.singular;
    let mut warning = None;
    if d0.abs().max(n0.abs()) < RS_MIN_SEPARATION {
        warning = Some("regular and singular groups balance; estimate unreliable".to_string());
    }
    let a = 2.0 * (d1 + d0);
    let b = n0 - n1 - d1 - 3.0 * d0;
    let c = d0 - n0;
    let disc = b * b - 4.0 * a * c;
    let z = if a.abs() > 1e-12 && disc >= 0.0 {
        let r1 = (-b + disc.sqrt()) / (2.0 * a);
        let r2 = (-b - disc.sqrt()) / (2.0 * a);
        if r1.abs() <= r2.abs() {
            r1
        } else {
            r2
        }
    } else if b.abs() > 1e-12 {
        warning = Some("no real root; linear estimate used".to_string());
        -c / b
    } else {
        return Err("RS polynomial vanishes".into());
    };
    let p = z / (z - 0.5);
    if !p.is_finite() {
        return Err("RS estimate is not finite".into());
    }
    Ok((p, warning))
}

fn channel_rows(img: &ByteImage, c: usize) -> Vec<Vec<u8>> {
    img.channel(c).chunks(img.width()).map(<[u8]>::to_vec).collect()
}

/// Fridrich's RS steganalysis with groups of four horizontally adjacent
/// pixels and the mask `[0, 1, 1, 0]`.
pub fn rs_analysis(img: &ByteImage) -> DetectorScore {
    if img.width() < 4 {
        return DetectorScore::degenerate("rs", "image narrower than one group of four");
    }
    combine_channels("rs", (0..3).map(|c| rs_channel(channel_rows(img, c))).collect())
}

/// Smaller-magnitude real root of `a p² + b p + c`, or the linear solution
/// when the quadratic term vanishes.
fn small_root(a: f64, b: f64, c: f64) -> Result<f64, String> {
    if a.abs() < 1e-12 {
        return if b.abs() < 1e-12 {
            Err("estimator polynomial vanishes".into())
        } else {
            Ok(-c / b)
        };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err("no real root".into());
    }
    let r1 = (-b + disc.sqrt()) / (2.0 * a);
    let r2 = (-b - disc.sqrt()) / (2.0 * a);
    Ok(if r1.abs() <= r2.abs() { r1 } else { r2 })
}

fn horizontal_pairs(rows: &[Vec<u8>]) -> impl Iterator<Item = (u8, u8)> + '_ {
    rows.iter().flat_map(|r| r.windows(2).map(|w| (w[0], w[1])))
}

/// Dumitrescu–Wu–Wang sample pair analysis over horizontally adjacent
/// pixels: solves `(W+Z)/2 p² + (2X − P) p + (Y − X) = 0`.
pub fn sample_pairs(img: &ByteImage) -> DetectorScore {
    if img.width() < 2 {
        return DetectorScore::degenerate("sample_pairs", "no adjacent pixel pairs");
    }
    let per_channel = (0..3)
        .map(|c| {
            let rows = channel_rows(img, c);
            let (mut x, mut y, mut z, mut w, mut p) = (0f64, 0f64, 0f64, 0f64, 0f64);
            for (u, v) in horizontal_pairs(&rows) {
                if u >> 1 == v >> 1 && u != v {
                    w += 1.0;
                }
                if u == v {
                    z += 1.0;
                }
                if (v % 2 == 0 && u < v) || (v % 2 == 1 && u > v) {
                    x += 1.0;
                }
                if (v % 2 == 0 && u > v) || (v % 2 == 1 && u < v) {
                    y += 1.0;
                }
                p += 1.0;
            }
            small_root((w + z) / 2.0, 2.0 * x - p, y - x).map(|r| (r, None))
        })
        .collect();
    combine_channels("sample_pairs", per_channel)
}

/// Highest trace index whose equation enters the primary-sets estimate.
pub const PRIMARY_SETS_MAX_TRACE: usize = 4;

/// Primary-set (trace multiset) estimator. For pairs `(u, v)` let `C_m`
/// hold pairs with `|⌊u/2⌋ − ⌊v/2⌋| = m`, `D_n` pairs with `|u − v| = n`,
/// and split `D_{2m+1}` into `X` (also in `C_{m+1}`) and `Y` (also in
/// `C_m`). LSB replacement leaves every `C_m` intact and moves pairs
/// between the other sets at rates fixed by the embedding rate `p`, giving
/// one quadratic per `m`. The equations for `m = 0..=4` are summed and the
/// result solved.
pub fn primary_sets(img: &ByteImage) -> DetectorScore {
    if img.width() < 2 {
        return DetectorScore::degenerate("primary_sets", "no adjacent pixel pairs");
    }
    let per_channel = (0..3)
        .map(|c| {
            let rows = channel_rows(img, c);
            let mut cm = [0f64; 257];
            let mut dn = [0f64; 257];
            let mut xn = [0f64; 257];
            let mut yn = [0f64; 257];
            for (u, v) in horizontal_pairs(&rows) {
                let n = (u as i32 - v as i32).unsigned_abs() as usize;
                let m = ((u >> 1) as i32 - (v >> 1) as i32).unsigned_abs() as usize;
                cm[m] += 1.0;
                dn[n] += 1.0;
                if n % 2 == 1 {
                    if m == (n + 1) / 2 {
                        xn[n] += 1.0;
                    } else {
                        yn[n] += 1.0;
                    }
                }
            }
            let (mut a, mut b, mut k) = (0.0, 0.0, 0.0);
            for m in 0..=PRIMARY_SETS_MAX_TRACE {
                let (yy, xx) = (yn[2 * m + 1], xn[2 * m + 1]);
                if m == 0 {
                    a += (2.0 * cm[0] - cm[1]) / 4.0;
                    b -= (2.0 * dn[0] - dn[2] + 2.0 * yy - 2.0 * xx) / 2.0;
                } else {
                    a += (cm[m] - cm[m + 1]) / 4.0;
                    b -= (dn[2 * m] - dn[2 * m + 2] + 2.0 * yy - 2.0 * xx) / 2.0;
                }
                k += yy - xx;
            }
            small_root(a, b, k).map(|r| (r, None))
        })
        .collect();
    combine_channels("primary_sets", per_channel)
}

/// All four detectors in a fixed order.
pub fn run_detectors(img: &ByteImage) -> Vec<DetectorScore> {
    vec![chi_square_attack(img), rs_analysis(img), sample_pairs(img), primary_sets(img)]
}

pub const DETECTOR_NAMES: [&str; 4] = ["chi_square", "rs", "sample_pairs", "primary_sets"];

/// Arithmetic mean of the non-degenerate scores.
pub fn fuse(scores: &[DetectorScore]) -> Result<f64> {
    let valid: Vec<f64> = scores.iter().filter(|s| !s.is_degenerate()).map(|s| s.score).collect();
    if valid.is_empty() {
        return Err(AnalysisError::Inconclusive);
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

pub const ROC_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Thresholds `0.00, 0.01, …, 1.00`; a score at or above the threshold is
/// called stego. The AUC integrates the points sorted by false-positive
/// rate, anchored at `(0, 0)`.
pub fn roc_sweep(clean: &[f64], stego: &[f64]) -> Result<RocCurve> {
    if clean.is_empty() || stego.is_empty() {
        return Err(AnalysisError::Argument("ROC sweep needs clean and stego scores".into()));
    }
    let rate = |scores: &[f64], t: f64| scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64;
    let points: Vec<RocPoint> = (0..=ROC_STEPS)
        .map(|i| {
            let threshold = i as f64 / ROC_STEPS as f64;
            RocPoint {
                threshold,
                tpr: rate(stego, threshold),
                fpr: rate(clean, threshold),
            }
        })
        .collect();
    let mut curve: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    curve.push((0.0, 0.0));
    curve.sort_by(|a, b| a.partial_cmp(b).expect("rates are finite"));
    let auc = curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

pub fn write_roc_csv<W: Write>(mut out: W, curve: &RocCurve) -> Result<()> {
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["threshold", "tpr", "fpr"])?;
        for p in &curve.points {
            w.write_record([format!("{:.2}", p.threshold), format!("{:.6}", p.tpr), format!("{:.6}", p.fpr)])?;
        }
        w.flush()?;
    }
    writeln!(out, "# auc = {:.6}", curve.auc)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Clean,
    Stego,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Clean => "clean",
            Verdict::Stego => "stego",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub path: String,
    pub scores: Vec<DetectorScore>,
    pub fused: Option<f64>,
    pub verdict: Verdict,
}

pub fn scan_image(path: impl Into<String>, img: &ByteImage, threshold: f64) -> ScanRow {
    let scores = run_detectors(img);
    let fused = fuse(&scores).ok();
    let verdict = match fused {
        None => Verdict::Inconclusive,
        Some(f) if f >= threshold => Verdict::Stego,
        Some(_) => Verdict::Clean,
    };
    ScanRow {
        path: path.into(),
        scores,
        fused,
        verdict,
    }
}

/// `path, chi_square, rs, sample_pairs, primary_sets, fused, verdict`;
/// degenerate scores are left empty.
pub fn write_scan_csv<W: Write>(out: W, rows: &[ScanRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["path"];
    header.extend(DETECTOR_NAMES);
    header.extend(["fused", "verdict"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.path.clone()];
        rec.extend(r.scores.iter().map(|s| {
            if s.is_degenerate() {
                String::new()
            } else {
                format!("{:.6}", s.score)
            }
        }));
        rec.push(r.fused.map(|f| format!("{f:.6}")).unwrap_or_default());
        rec.push(r.verdict.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classic::{lsb_embed_image, LsbConfig, SplitMix64};

    /// (a, x, Q(a, x)) from a 40-digit reference evaluation.
    const GAMMA_Q: [(f64, f64, f64); 20] = [
        (0.5, 0.1, 0.65472084601857702044),
        (0.5, 2.0, 0.045500263896358414401),
        (1.0, 1.0, 0.3678794411714423216),
        (1.5, 0.3, 0.8964323733419114255),
        (2.0, 5.0, 0.04042768199451280258),
        (3.5, 1.0, 0.95984036873010155712),
        (5.0, 5.0, 0.44049328506521241144),
        (10.0, 3.0, 0.99889751186988452026),
        (10.0, 15.0, 0.069853660699409767692),
        (25.0, 20.0, 0.84322737817376227362),
        (50.0, 40.0, 0.92966493334060504556),
        (63.5, 70.0, 0.2030112817703343232),
        (100.0, 90.0, 0.8417790108135698319),
        (127.0, 120.0, 0.72681919230107672899),
        (127.0, 160.0, 0.0031069854875162984494),
        (30.0, 10.0, 0.99999974900487984721),
        (7.5, 7.5, 0.45141721122572523585),
        (2.5, 12.0, 0.00021711294345272331926),
        (60.0, 45.0, 0.98134886535142455009),
        (0.5, 8.0, 0.000063342483666239842508),
    ];

    #[test]
    fn survival_function_matches_reference() {
        for (a, x, q) in GAMMA_Q {
            let got = chi_square_sf(2.0 * x, 2.0 * a);
            assert!(((got - q) / q).abs() <= 1e-8, "Q({a}, {x}) = {got}, want {q}");
        }
    }

    fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> u8) -> ByteImage {
        let mut d = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    d.push(f(y, x, c));
                }
            }
        }
        ByteImage::new(h, w, d).unwrap()
    }

    fn ramp() -> ByteImage {
        from_fn(64, 64, |y, x, c| ((x * 3 + y * 2 + c * 20) / 2 % 256) as u8)
    }

    fn noise(h: usize, w: usize, seed: u64) -> ByteImage {
        let mut r = SplitMix64::new(seed);
        ByteImage::new(h, w, (0..h * w * 3).map(|_| r.next_u64() as u8).collect()).unwrap()
    }

    fn full_embed(img: &ByteImage) -> ByteImage {
        lsb_embed_image(img, &noise(img.height(), img.width(), 99), &LsbConfig::sequential(1).unwrap()).unwrap()
    }

    #[test]
    fn chi_square_equalized_even_and_constant() {
        let eq = from_fn(32, 32, |y, x, _| ((y * 32 + x) % 64) as u8);
        let s = chi_square_attack(&eq);
        assert_eq!(s.score, 1.0);
        let even = from_fn(32, 32, |y, x, _| (((y * 32 + x) % 64) * 2) as u8);
        assert!(chi_square_attack(&even).score < 1e-6);
        let flat = ByteImage::filled(8, 8, 77).unwrap();
        let s = chi_square_attack(&flat);
        assert!(s.is_degenerate());
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn rs_clean_ramp_vs_embedded() {
        let clean = rs_analysis(&ramp());
        let stego = rs_analysis(&full_embed(&ramp()));
        assert!(clean.score < 0.1, "{clean:?}");
        assert!(stego.score > 0.7, "{stego:?}");
        assert!(matches!(rs_analysis(&noise(32, 32, 5)).status, ScoreStatus::Warning(_)));
    }

    #[test]
    fn pair_detectors_clean_ramp_vs_embedded() {
        for det in [sample_pairs, primary_sets] {
            let clean = det(&ramp());
            let stego = det(&full_embed(&ramp()));
            assert!(clean.score < 0.1, "{clean:?}");
            assert!(stego.score > 0.7, "{stego:?}");
        }
    }

    #[test]
    fn tiny_images_do_not_panic() {
        let img = ByteImage::new(1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        for s in run_detectors(&img) {
            assert!((0.0..=1.0).contains(&s.score));
        }
    }

    fn score(v: f64) -> DetectorScore {
        DetectorScore::new("t", v, vec![])
    }

    #[test]
    fn fusion_rules() {
        assert_eq!(fuse(&[score(0.0), score(0.0)]).unwrap(), 0.0);
        assert!((fuse(&[score(0.2), score(0.4), score(0.6)]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(fuse(&[DetectorScore::degenerate("x", "why"), score(0.5)]).unwrap(), 0.5);
        assert!(matches!(fuse(&[DetectorScore::degenerate("x", "why")]), Err(AnalysisError::Inconclusive)));
    }

    #[test]
    fn roc_extremes() {
        let perfect = roc_sweep(&[0.0; 5], &[1.0; 5]).unwrap();
        assert_eq!(perfect.points.len(), 101);
        assert_eq!(perfect.auc, 1.0);
        let same = roc_sweep(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]).unwrap();
        assert!((same.auc - 0.5).abs() < 1e-12);
        assert!(roc_sweep(&[], &[0.5]).is_err());
    }

    #[test]
    fn roc_csv_layout() {
        let curve = roc_sweep(&[0.2], &[0.8]).unwrap();
        let mut buf = Vec::new();
        write_roc_csv(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,tpr,fpr");
        assert_eq!(lines.len(), 1 + 101 + 1);
        assert_eq!(lines[1], "0.00,1.000000,1.000000");
        assert_eq!(lines[101], "1.00,0.000000,0.000000");
        assert_eq!(lines[102], "# auc = 1.000000");
    }
}
