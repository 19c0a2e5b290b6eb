use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fid, lpips_like, psnr, ssim_with, FeatureExtractor, SsimConfig};
use crate::error::{Error, Result};
use crate::guidance::{cosine, GuidanceBackend};
use crate::image::ColorImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub max_val: f64,
    pub ssim: SsimConfig,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { max_val: 1.0, ssim: SsimConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub file: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub count: usize,
    /// `None` with fewer than two images.
    pub fid: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: ReportSummary,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

struct Scored {
    row: ReportRow,
    feat_out: Vec<f64>,
    feat_ref: Vec<f64>,
}

/// Scores every PNG in `outputs` against the same-named PNG in
/// `references`. `prompts` is an optional JSON object mapping file names to
/// prompts; when given, each row also gets a text relevance score.
pub fn run_report<F, G>(
    outputs: &Path,
    references: &Path,
    prompts: Option<&Path>,
    cfg: &ReportConfig,
    extractor: &F,
    guidance: &G,
) -> Result<Report>
where
    F: FeatureExtractor + ?Sized,
    G: GuidanceBackend + ?Sized,
{
    let out_names = png_names(outputs)?;
    let ref_names = png_names(references)?;
    if let Some(missing) = out_names.iter().find(|n| !ref_names.contains(n)) {
        return Err(Error::MissingPair(references.join(missing).display().to_string()));
    }
    if let Some(missing) = ref_names.iter().find(|n| !out_names.contains(n)) {
        return Err(Error::MissingPair(outputs.join(missing).display().to_string()));
    }
    if out_names.is_empty() {
        return Err(Error::InsufficientSamples(0));
    }
    let prompt_map: Option<BTreeMap<String, String>> = match prompts {
        Some(p) => Some(serde_json::from_slice(&std::fs::read(p).map_err(|e| Error::io(p, e))?)?),
        None => None,
    };
    if let Some(map) = &prompt_map {
        if let Some(missing) = out_names.iter().find(|n| !map.contains_key(*n)) {
            return Err(Error::MissingPair(format!("prompt for {missing}")));
        }
    }

    let score = |name: &String| -> Result<Scored> {
        let out = ColorImage::load(outputs.join(name))?;
        let reference = ColorImage::load(references.join(name))?;
        let clip = match &prompt_map {
            Some(map) => {
                let e_img = guidance.encode_image(&out)?;
                let e_txt = guidance.encode_text(&map[name]);
                Some(100.0 * cosine(e_img.as_slice(), e_txt.as_slice())?.max(0.0))
            }
            None => None,
        };
        Ok(Scored {
            row: ReportRow {
                file: name.clone(),
                psnr: psnr(&out, &reference, cfg.max_val)?,
                ssim: ssim_with(&out, &reference, &cfg.ssim)?,
                lpips: lpips_like(&out, &reference, extractor)?,
                clip,
            },
            feat_out: extractor.extract(&out)?,
            feat_ref: extractor.extract(&reference)?,
        })
    };

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(out_names.len());
    let chunk = out_names.len().div_ceil(workers);
    let scored: Vec<Scored> = std::thread::scope(|s| {
        let handles: Vec<_> = out_names
            .chunks(chunk)
            .map(|names| s.spawn(move || names.iter().map(score).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("metric worker panicked")).collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();

    let fid = if scored.len() >= 2 {
        let a: Vec<Vec<f64>> = scored.iter().map(|s| s.feat_out.clone()).collect();
        let b: Vec<Vec<f64>> = scored.iter().map(|s| s.feat_ref.clone()).collect();
        Some(fid(&a, &b)?)
    } else {
        None
    };
    let rows: Vec<ReportRow> = scored.into_iter().map(|s| s.row).collect();
    let summary = ReportSummary {
        count: rows.len(),
        fid,
        psnr: mean(rows.iter().map(|r| r.psnr)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        lpips: mean(rows.iter().map(|r| r.lpips)),
        clip: prompt_map.as_ref().map(|_| mean(rows.iter().filter_map(|r| r.clip))),
    };
    Ok(Report { rows, summary })
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    file: &'a str,
    fid: Option<f64>,
    psnr: f64,
    ssim: f64,
    lpips: f64,
    clip: Option<f64>,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl Report {
    /// Per-image rows followed by a `mean` row carrying FID.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        for r in &self.rows {
            w.serialize(CsvRecord { file: &r.file, fid: None, psnr: r.psnr, ssim: r.ssim, lpips: r.lpips, clip: r.clip })
                .map_err(csv_err)?;
        }
        let s = &self.summary;
        w.serialize(CsvRecord { file: "mean", fid: s.fid, psnr: s.psnr, ssim: s.ssim, lpips: s.lpips, clip: s.clip })
            .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_markdown(&self, label: &str) -> String {
        let s = &self.summary;
        let mut md = String::new();
        md.push_str("| Method | FID ↓ | PSNR ↑ | SSIM ↑ | LPIPS ↓ | CLIP ↑ |\n|---|---|---|---|---|---|\n");
        let _ = writeln!(
            md,
            "| {label} | {} | {:.2} | {:.4} | {:.4} | {} |",
            opt(s.fid, 2),
            s.psnr,
            s.ssim,
            s.lpips,
            opt(s.clip, 2)
        );
        md.push_str("\n| File | PSNR | SSIM | LPIPS | CLIP |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(md, "| {} | {:.2} | {:.4} | {:.4} | {} |", r.file, r.psnr, r.ssim, r.lpips, opt(r.clip, 2));
        }
        md
    }

    /// Writes `report.csv` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path, label: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        let md_path = dir.join("report.md");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        std::fs::write(&md_path, self.to_markdown(label)).map_err(|e| Error::io(&md_path, e))?;
        Ok((csv_path, md_path))
    }
}
