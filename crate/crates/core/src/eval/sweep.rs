//! Ablation sweeps: the same run repeated with one attack parameter varied,
//! each in its own output directory, and joined into one report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::fid::{fid_pair, FeatureExtractor};
use crate::eval::report::Series;
use crate::eval::success::{ratio, success_report, SuccessReport};
use crate::image::Image;
use crate::ingest::ImageSource;
use crate::run::config::RunConfig;
use crate::run::manifest::RunManifest;
use crate::run::pipeline::{resume, run_pipeline, RunContext, RunOptions};
use crate::run::store::ImageStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Tau,
    LambdaClip,
    LambdaReg,
}

impl SweepParam {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::Tau => vec![0.5, 0.6, 0.7, 0.8, 0.9],
            Self::LambdaClip => vec![5.0, 10.0, 15.0, 20.0],
            Self::LambdaReg => vec![1.0, 1.5, 2.0],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tau => "tau",
            Self::LambdaClip => "lambda-clip",
            Self::LambdaReg => "lambda-reg",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        let attack = &mut cfg.profile_mut()?.attack;
        match self {
            Self::Tau => attack.tau_yes = value,
            Self::LambdaClip => attack.lambda_clip = value,
            Self::LambdaReg => attack.lambda_reg = value,
        }
        attack.validate()
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(Self::Tau),
            "lambda-clip" | "lambda_clip" => Ok(Self::LambdaClip),
            "lambda-reg" | "lambda_reg" => Ok(Self::LambdaReg),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub output_dir: PathBuf,
    pub report: SuccessReport,
    /// Detector-discarded candidates over generated candidates.
    pub detection_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paired_fid: Vec<PairedFid>,
}

impl SweepReport {
    pub fn success_series(&self) -> Series {
        Series {
            name: "success rate (%)".into(),
            points: self.points.iter().map(|p| (p.value, p.report.overall.percent())).collect(),
        }
    }

    pub fn detection_series(&self) -> Series {
        Series {
            name: "detection rate (%)".into(),
            points: self.points.iter().map(|p| (p.value, p.detection_rate.map(|r| 100.0 * r))).collect(),
        }
    }
}

pub fn point_dir(root: &Path, param: SweepParam, value: f64) -> PathBuf {
    root.join(format!("{}-{value}", param.as_str()))
}

/// Runs (or resumes) one pipeline per value under `root`.
pub fn run_sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[f64],
    root: &Path,
    make_ctx: &dyn Fn(RunConfig) -> Result<RunContext>,
) -> Result<SweepReport> {
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value)?;
        cfg.output_dir = point_dir(root, param, value);
        let ctx = make_ctx(cfg)?;
        let path = ctx.cfg.manifest_path();
        let manifest = if path.exists() {
            resume(&path, &ctx, RunOptions::default())?
        } else {
            run_pipeline(&ctx, RunOptions::default())?
        };
        let report = success_report(&manifest)?;
        points.push(SweepPoint {
            value,
            output_dir: ctx.cfg.output_dir.clone(),
            detection_rate: ratio(report.overall.filtered, report.overall.generated),
            report,
        });
    }
    Ok(SweepReport {
        param,
        points,
        paired_fid: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedFid {
    pub value_a: f64,
    pub value_b: f64,
    /// Samples successful under both settings.
    pub samples: usize,
    /// Success images vs their source images, per setting.
    pub fid_a: Option<f64>,
    pub fid_b: Option<f64>,
}

/// Sample ids that succeeded in both manifests.
pub fn intersected_successes(a: &RunManifest, b: &RunManifest) -> BTreeSet<String> {
    let ok = |m: &RunManifest| -> BTreeSet<String> {
        m.records
            .iter()
            .filter(|r| r.success_image.is_some())
            .map(|r| r.sample_id.clone())
            .collect()
    };
    ok(a).intersection(&ok(b)).cloned().collect()
}

fn success_and_source(
    m: &RunManifest,
    store: &ImageStore,
    ids: &BTreeSet<String>,
    sources: &dyn ImageSource,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let by_id: BTreeMap<&str, _> = m.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut gen = Vec::with_capacity(ids.len());
    let mut src = Vec::with_capacity(ids.len());
    for id in ids {
        let r = by_id[id.as_str()];
        gen.push(store.get(r.success_image.as_ref().expect("intersected ids are successes"))?);
        src.push(sources.image(r.image_id)?);
    }
    Ok((gen, src))
}

/// Semantic-fidelity FID on the intersected success set of two runs.
/// Values are absent with fewer than two shared successes.
#[allow(clippy::too_many_arguments)]
pub fn paired_fid(
    value_a: f64,
    a: &RunManifest,
    store_a: &ImageStore,
    value_b: f64,
    b: &RunManifest,
    store_b: &ImageStore,
    sources: &dyn ImageSource,
    extractor: &dyn FeatureExtractor,
) -> Result<PairedFid> {
    let ids = intersected_successes(a, b);
    let mut out = PairedFid {
        value_a,
        value_b,
        samples: ids.len(),
        fid_a: None,
        fid_b: None,
    };
    if ids.len() < 2 {
        return Ok(out);
    }
    let (gen_a, src) = success_and_source(a, store_a, &ids, sources)?;
    let (gen_b, _) = success_and_source(b, store_b, &ids, sources)?;
    out.fid_a = Some(fid_pair(&gen_a, &src, extractor)?);
    out.fid_b = Some(fid_pair(&gen_b, &src, extractor)?);
    Ok(out)
}

/// Adds paired FID for each consecutive pair of points.
pub fn add_paired_fid(report: &mut SweepReport, sources: &dyn ImageSource, extractor: &dyn FeatureExtractor) -> Result<()> {
    let loaded = report
        .points
        .iter()
        .map(|p| {
            Ok((
                p.value,
                RunManifest::load(&p.output_dir.join("manifest.jsonl"))?,
                ImageStore::open(&p.output_dir)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    report.paired_fid = loaded
        .windows(2)
        .map(|w| paired_fid(w[0].0, &w[0].1, &w[0].2, w[1].0, &w[1].1, &w[1].2, sources, extractor))
        .collect::<Result<_>>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_round_trip() {
        for p in [SweepParam::Tau, SweepParam::LambdaClip, SweepParam::LambdaReg] {
            assert_eq!(p.as_str().parse::<SweepParam>().unwrap(), p);
        }
        assert_eq!(SweepParam::LambdaReg.default_values(), vec![1.0, 1.5, 2.0]);
    }
}
