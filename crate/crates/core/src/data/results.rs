use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tracker::BBox;

/// Which decision-level branch produced a frame's box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Refine,
    Flow,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultRow {
    pub frame: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub branch: Branch,
}

#[derive(Serialize, Deserialize)]
struct Record {
    frame: usize,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    confidence: String,
    branch: Branch,
}

/// Writes `frame,x,y,w,h,confidence,branch` with boxes rounded to pixels.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(Record {
            frame: r.frame,
            x: r.bbox.x.round() as i64,
            y: r.bbox.y.round() as i64,
            w: r.bbox.w.round() as i64,
            h: r.bbox.h.round() as i64,
            confidence: format!("{:.6}", r.confidence),
            branch: r.branch,
        })?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, DataError> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize::<Record>()
        .map(|r| {
            let r = r?;
            let confidence = r.confidence.parse().map_err(|_| DataError::Parse {
                path: path.display().to_string(),
                line: r.frame + 2,
                detail: format!("bad confidence {:?}", r.confidence),
            })?;
            Ok(ResultRow {
                frame: r.frame,
                bbox: BBox::new(r.x as f64, r.y as f64, r.w as f64, r.h as f64),
                confidence,
                branch: r.branch,
            })
        })
        .collect()
}
