use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use wsdt::diffusion::sr_sample;
use wsdt::image::Image;
use wsdt::metrics::MetricReport;
use wsdt::training::{generate_synth, Trainer};
use wsdt::wavelet::{imdwt, mdwt, SubBand, WaveletSpectrum};
use wsdt::Error;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::pnm::Pnm;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let mut root = &e;
        while let Error::Stage { source, .. } = root {
            root = source;
        }
        let code = match root {
            Error::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

fn with_path<T>(r: wsdt::Result<T>, path: &Path) -> CliResult<T> {
    r.map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    })
}

// ---------------------------------------------------------------- dwt / idwt

const SIDECAR_MAGIC: &[u8; 8] = b"WSDTSPEC";

/// Sidecar path written next to a spectrum visualization.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".f32");
    PathBuf::from(p)
}

pub fn dwt(input: &Path, levels: usize, out: &Path) -> CliResult {
    if levels == 0 {
        return Err(CliError::usage("--levels must be at least 1"));
    }
    let pnm = with_path(Pnm::read(input), input)?;
    let step = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| CliError::usage(format!("--levels {levels} is too large")))?;
    if pnm.height % step != 0 || pnm.width % step != 0 {
        return Err(CliError::usage(format!(
            "dims not divisible: {}×{} image cannot take {levels} levels (needs multiples of {step})",
            pnm.width, pnm.height
        )));
    }
    let spectrum = mdwt(&pnm.to_image(), levels)?;
    Pnm::from_image(&visualize(&spectrum))?.write(out)?;

    let packed = spectrum.packed();
    let mut side = Vec::new();
    side.extend_from_slice(SIDECAR_MAGIC);
    side.extend_from_slice(&(levels as u32).to_le_bytes());
    side.extend_from_slice(&(pnm.header.len() as u64).to_le_bytes());
    side.extend_from_slice(&pnm.header);
    for d in [pnm.height, pnm.width, pnm.channels] {
        side.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in packed.data() {
        side.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(sidecar_path(out), side)?;
    Ok(())
}

/// Each sub-band is mapped to `[-1, 1]` independently: the LF band by
/// min–max, detail bands symmetrically about zero so that zero lands on mid
/// gray. A constant band becomes mid gray.
pub fn visualize(spec: &WaveletSpectrum<f32>) -> Image<f32> {
    let (h, w, c) = spec.dims();
    let mut out = Image::zeros(h, w, c);
    let mut paint = |y0: usize, x0: usize, band: &Image<f32>, symmetric: bool| {
        let (lo, hi) = band
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let (lo, hi) = if symmetric {
            let m = lo.abs().max(hi.abs());
            (-m, m)
        } else {
            (lo, hi)
        };
        let (bh, bw, _) = band.dims();
        for y in 0..bh {
            for x in 0..bw {
                for ch in 0..c {
                    let v = if hi > lo {
                        2.0 * (band.get(y, x, ch) - lo) / (hi - lo) - 1.0
                    } else {
                        0.0
                    };
                    out.set(y0 + y, x0 + x, ch, v);
                }
            }
        }
    };
    let levels = spec.levels();
    paint(0, 0, &spec.low(), false);
    for level in 1..=levels {
        for band in [SubBand::Vertical, SubBand::Horizontal, SubBand::Diagonal] {
            let (y0, x0) = spec.band_origin(level, Some(band));
            paint(y0, x0, &spec.band(level, band).expect("level in range"), true);
        }
    }
    out
}

pub fn idwt(sidecar: &Path, out: &Path) -> CliResult {
    let bytes = fs::read(sidecar)?;
    let bad = || CliError::usage(format!("{}: not a spectrum sidecar", sidecar.display()));
    let mut pos = 0;
    let mut take = |n: usize| -> CliResult<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
        pos += n;
        Ok(s)
    };
    if take(8)? != SIDECAR_MAGIC {
        return Err(bad());
    }
    let levels = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap()) as usize;
    let header_len = u64_at(take(8)?);
    let header = take(header_len)?.to_vec();
    let (h, w, c) = (u64_at(take(8)?), u64_at(take(8)?), u64_at(take(8)?));
    let n = h.checked_mul(w).and_then(|v| v.checked_mul(c)).ok_or_else(bad)?;
    let data = take(n * 4)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(bad());
    }
    let spectrum = WaveletSpectrum::from_packed(Image::new(h, w, c, data)?, levels)?;
    let mut pnm = Pnm::from_image(&imdwt(&spectrum)?)?;
    pnm.header = header;
    pnm.write(out)?;
    Ok(())
}

// ------------------------------------------------------------------ gen-data

/// Writes `hr/NNNN.ppm` and `lr/NNNN.ppm` (PGM for one channel).
pub fn gen_data(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> CliResult {
    let mut spec = cfg.data.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let pairs = generate_synth::<f32>(&spec)?;
    let ext = if spec.channels == 1 { "pgm" } else { "ppm" };
    for sub in ["hr", "lr"] {
        fs::create_dir_all(out.join(sub))?;
    }
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:04}.{ext}");
        Pnm::from_image(&p.hr)?.write(&out.join("hr").join(&name))?;
        Pnm::from_image(&p.lr)?.write(&out.join("lr").join(&name))?;
    }
    Ok(())
}

// --------------------------------------------------------------------- train

pub const CHECKPOINT_FILE: &str = "checkpoint.wsdt";
pub const LOSS_LOG: &str = "loss.jsonl";

#[derive(Serialize)]
struct LogLine {
    iteration: u64,
    l_d: f64,
    l_adv_g: f64,
    l_pixel: f64,
    l_fre: f64,
}

/// Trains to `train.iterations`, checkpointing into `out`. When resuming, the
/// checkpoint's configuration must agree with `cfg` and the log is appended.
pub fn train(cfg: &RunConfig, seed: Option<u64>, resume: Option<&Path>, out: &Path) -> CliResult {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let mut trainer = match resume {
        Some(path) => {
            let ck = with_path(Checkpoint::load(path), path)?;
            if ck.meta.model != cfg.model || ck.meta.schedule != cfg.schedule {
                return Err(CliError::usage(format!(
                    "{}: checkpoint geometry or schedule does not match the config",
                    path.display()
                )));
            }
            let mut tr = with_path(ck.into_trainer(), path)?;
            // the step count may be extended on resume, the rest may not change
            let mut expected = cfg.train.clone();
            expected.iterations = tr.config.iterations;
            if expected != tr.config {
                return Err(CliError::usage(format!(
                    "{}: training settings differ from the config",
                    path.display()
                )));
            }
            tr.config.iterations = cfg.train.iterations;
            tr
        }
        None => Trainer::<f32>::new(cfg.model, cfg.train.clone(), cfg.schedule.clone())?,
    };
    let data = generate_synth::<f32>(&cfg.data)?;
    fs::create_dir_all(out)?;
    let log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(out.join(LOSS_LOG))?
    } else {
        File::create(out.join(LOSS_LOG))?
    };
    let mut log = BufWriter::new(log_file);
    let ck_path = out.join(CHECKPOINT_FILE);
    while trainer.iteration < cfg.train.iterations {
        let l = match trainer.step(&data) {
            Ok(l) => l,
            Err(e) => {
                log.flush()?;
                return Err(e.into());
            }
        };
        let line = LogLine {
            iteration: l.iteration,
            l_d: l.l_d,
            l_adv_g: l.l_adv_g,
            l_pixel: l.l_pixel,
            l_fre: l.l_fre,
        };
        serde_json::to_writer(&mut log, &line).map_err(Error::from)?;
        log.write_all(b"\n")?;
        if cfg.checkpoint_every > 0 && trainer.iteration % cfg.checkpoint_every == 0 {
            log.flush()?;
            Checkpoint::from_trainer(&trainer).save(&ck_path)?;
        }
    }
    log.flush()?;
    Checkpoint::from_trainer(&trainer).save(&ck_path)?;
    Ok(())
}

// -------------------------------------------------------------------- sample

/// Super-resolves one LR image, or every image of a directory into `out`.
pub fn sample(checkpoint: &Path, input: &Path, seed: u64, out: &Path) -> CliResult {
    let (model, schedule) = with_path(
        Checkpoint::load(checkpoint).and_then(Checkpoint::into_generator),
        checkpoint,
    )?;
    let run = |lr_path: &Path, out_path: &Path| -> CliResult {
        let lr = with_path(Pnm::read(lr_path), lr_path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sr = with_path(sr_sample(&lr.to_image(), &model, &schedule, &mut rng), lr_path)?;
        Pnm::from_image(&sr)?.write(out_path)?;
        Ok(())
    };
    if input.is_dir() {
        fs::create_dir_all(out)?;
        for p in list_images(input)? {
            run(&p, &out.join(p.file_name().unwrap()))?;
        }
        Ok(())
    } else {
        run(input, out)
    }
}

// ---------------------------------------------------------------------- eval

fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    v.sort();
    Ok(v)
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub images: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

fn threads() -> CliResult<usize> {
    match std::env::var("WSDT_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("WSDT_THREADS={v} is not a positive integer"))),
        Err(_) => Ok(0),
    }
}

/// Pairs images by sorted position; the scale factor is inferred from HR/LR.
pub fn eval(sr_dir: &Path, hr_dir: &Path, lr_dir: &Path) -> CliResult<EvalOutput> {
    let (sr, hr, lr) = (list_images(sr_dir)?, list_images(hr_dir)?, list_images(lr_dir)?);
    if sr.len() != hr.len() || hr.len() != lr.len() {
        return Err(CliError::usage(format!(
            "image counts differ: {} SR, {} HR, {} LR",
            sr.len(),
            hr.len(),
            lr.len()
        )));
    }
    if sr.is_empty() {
        return Err(CliError::usage("no PPM/PGM images to evaluate"));
    }
    let one = |s: &PathBuf, h: &PathBuf, l: &PathBuf| -> CliResult<MetricReport> {
        let (s, h, l) = (
            with_path(Pnm::read(s), s)?.to_unit_image(),
            with_path(Pnm::read(h), h)?.to_unit_image(),
            with_path(Pnm::read(l), l)?.to_unit_image(),
        );
        let up = h.height() / l.height().max(1);
        if up == 0 || l.height() * up != h.height() || l.width() * up != h.width() {
            return Err(CliError::usage(format!(
                "{}: HR {}×{} is not an integer multiple of LR {}×{}",
                sr_dir.display(),
                h.width(),
                h.height(),
                l.width(),
                l.height()
            )));
        }
        Ok(MetricReport::evaluate(&s, &h, &l, up)?)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let images: Vec<(String, MetricReport)> = pool.install(|| {
        sr.par_iter()
            .zip(&hr)
            .zip(&lr)
            .map(|((s, h), l)| one(s, h, l).map(|r| (file_name(s), r)))
            .collect::<CliResult<_>>()
    })?;
    let reports: Vec<MetricReport> = images.iter().map(|(_, r)| *r).collect();
    let mean = MetricReport::mean(&reports).expect("non-empty");
    Ok(EvalOutput { images, mean })
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `key=value` text: one block per image, then the mean.
pub fn format_report(out: &EvalOutput) -> String {
    let mut s = String::new();
    for (name, r) in &out.images {
        s.push_str(&format!("image={name}\n{}", r.to_key_values()));
    }
    s.push_str(&format!("image=mean\n{}", out.mean.to_key_values()));
    s
}
