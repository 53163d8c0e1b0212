//! Sequence ingestion, synthetic sequences, result files and metrics.

mod metrics;
mod results;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

pub use metrics::{precision_curve, precision_rate, success_rate, MetricsReport, PR_POINTS, SR_POINTS};
pub use results::{read_results, write_results, Branch, ResultRow};
pub use synth::{fusion_pairs, synth_sequence, Illumination, Motion, SynthSpec};

use crate::frame::{read_gray, read_rgb, save_png, FrameError, FramePair};
use crate::tensor::Real;
use crate::tracker::BBox;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("missing {0}")]
    Missing(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{path} line {line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("results: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Frames of one sequence with a ground-truth box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord<R> {
    pub name: String,
    pub frames: Vec<FramePair<R>>,
    pub gt: Vec<BBox>,
    pub attributes: Vec<String>,
}

impl<R: Real> SequenceRecord<R> {
    pub fn new(
        name: impl Into<String>,
        frames: Vec<FramePair<R>>,
        gt: Vec<BBox>,
        attributes: Vec<String>,
    ) -> Result<Self, DataError> {
        if frames.len() != gt.len() {
            return Err(DataError::Mismatch(format!(
                "{} frames but {} ground-truth boxes",
                frames.len(),
                gt.len()
            )));
        }
        if frames.len() < 2 {
            return Err(DataError::Mismatch("a sequence needs at least 2 frames".into()));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        if let Some(i) = frames.iter().position(|f| (f.height(), f.width()) != (h, w)) {
            return Err(DataError::Mismatch(format!(
                "frame {i} is {}x{}, frame 0 is {w}x{h}",
                frames[i].width(),
                frames[i].height()
            )));
        }
        Ok(SequenceRecord {
            name: name.into(),
            frames,
            gt,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

/// Parses one ground-truth line: four numbers separated by spaces, tabs or commas.
pub fn parse_gt_line(line: &str) -> Option<BBox> {
    let v: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .ok()?;
    match v[..] {
        [x, y, w, h] => Some(BBox::new(x, y, w, h)),
        _ => None,
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    if !dir.is_dir() {
        return Err(DataError::Missing(dir.display().to_string()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a `groundTruth.txt`-style file, one box per non-empty line.
pub fn load_ground_truth(gt_path: &Path) -> Result<Vec<BBox>, DataError> {
    if !gt_path.is_file() {
        return Err(DataError::Missing(gt_path.display().to_string()));
    }
    let text = fs::read_to_string(gt_path).map_err(io_err(gt_path))?;
    let mut gt = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b = parse_gt_line(line).ok_or_else(|| DataError::Parse {
            path: gt_path.display().to_string(),
            line: i + 1,
            detail: format!("expected 'x y w h', found {line:?}"),
        })?;
        gt.push(b);
    }
    Ok(gt)
}

/// Loads a directory holding `visible/`, `infrared/` and `groundTruth.txt`.
pub fn load_sequence<R: Real>(dir: &Path) -> Result<SequenceRecord<R>, DataError> {
    let gt = load_ground_truth(&dir.join("groundTruth.txt"))?;
    let visible = image_files(&dir.join("visible"))?;
    let infrared = image_files(&dir.join("infrared"))?;
    if visible.len() != infrared.len() || visible.len() != gt.len() {
        return Err(DataError::Mismatch(format!(
            "{}: {} visible frames, {} infrared frames, {} ground-truth lines",
            dir.display(),
            visible.len(),
            infrared.len(),
            gt.len()
        )));
    }
    let frames = visible
        .iter()
        .zip(&infrared)
        .map(|(v, t)| Ok(FramePair::new(read_rgb(v)?, read_gray(t)?)?))
        .collect::<Result<Vec<_>, DataError>>()?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    SequenceRecord::new(name, frames, gt, Vec::new())
}

/// Writes a sequence in the layout `load_sequence` reads.
pub fn save_sequence<R: Real>(seq: &SequenceRecord<R>, dir: &Path) -> Result<(), DataError> {
    for sub in ["visible", "infrared"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut gt = String::new();
    for (i, (f, b)) in seq.frames.iter().zip(&seq.gt).enumerate() {
        save_png(&f.rgb, &dir.join("visible").join(format!("{:05}.png", i + 1)))?;
        save_png(&f.thermal, &dir.join("infrared").join(format!("{:05}.png", i + 1)))?;
        gt.push_str(&format!("{:.3} {:.3} {:.3} {:.3}\n", b.x, b.y, b.w, b.h));
    }
    let p = dir.join("groundTruth.txt");
    fs::write(&p, gt).map_err(io_err(&p))
}
