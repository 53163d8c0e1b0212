//! `--dataset` arguments: a sequence directory or `synth:<spec.json>`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use xnet_core::data::{load_ground_truth, load_sequence, synth_sequence};
use xnet_core::{BBox, Real, SequenceRecord, SynthSpec};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Dir(PathBuf),
    /// `None` selects the default spec.
    Synth(Option<PathBuf>),
}

impl DatasetSource {
    pub fn parse(arg: &str) -> Result<Self, UsageError> {
        let src = match arg.strip_prefix("synth:") {
            Some("default") => DatasetSource::Synth(None),
            Some(p) => DatasetSource::Synth(Some(PathBuf::from(p))),
            None if arg == "synth" => DatasetSource::Synth(None),
            None => DatasetSource::Dir(PathBuf::from(arg)),
        };
        let path = match &src {
            DatasetSource::Dir(p) => Some(p),
            DatasetSource::Synth(p) => p.as_ref(),
        };
        if let Some(p) = path {
            if !p.exists() {
                return Err(UsageError(format!("dataset path {} does not exist", p.display())));
            }
        }
        Ok(src)
    }

    pub fn spec(&self) -> anyhow::Result<Option<SynthSpec>> {
        match self {
            DatasetSource::Dir(_) => Ok(None),
            DatasetSource::Synth(None) => Ok(Some(SynthSpec::default())),
            DatasetSource::Synth(Some(p)) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let spec: SynthSpec =
                    serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
                Ok(Some(spec))
            }
        }
    }

    pub fn load<R: Real>(&self) -> anyhow::Result<SequenceRecord<R>> {
        match self {
            DatasetSource::Dir(d) => Ok(load_sequence(d)?),
            DatasetSource::Synth(_) => {
                let spec = self.spec()?.expect("synthetic source");
                spec.validate().map_err(|e| UsageError(e.to_string()))?;
                Ok(synth_sequence(&spec)?)
            }
        }
    }

    /// Ground truth without decoding frames where possible.
    pub fn ground_truth(&self) -> anyhow::Result<Vec<BBox>> {
        match self {
            DatasetSource::Dir(d) => Ok(load_ground_truth(&d.join("groundTruth.txt"))?),
            DatasetSource::Synth(_) => Ok(self.load::<f64>()?.gt),
        }
    }

    /// Files whose bytes define the input.
    pub fn files(&self) -> anyhow::Result<Vec<PathBuf>> {
        match self {
            DatasetSource::Synth(None) => Ok(Vec::new()),
            DatasetSource::Synth(Some(p)) => Ok(vec![p.clone()]),
            DatasetSource::Dir(d) => {
                let mut out = vec![d.join("groundTruth.txt")];
                for sub in ["visible", "infrared"] {
                    out.extend(sorted_files(&d.join(sub))?);
                }
                Ok(out)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DatasetSource::Dir(d) => d.display().to_string(),
            DatasetSource::Synth(None) => "synth:default".into(),
            DatasetSource::Synth(Some(p)) => format!("synth:{}", p.display()),
        }
    }
}

fn sorted_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    Ok(v)
}
