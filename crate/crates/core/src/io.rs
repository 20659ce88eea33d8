//! On-disk formats: problem directories (instance JSON, demand CSV, splits
//! JSON) and the JSON artifacts passed between commands.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ccg::CcgResult;
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::linalg::DenseMatrix;
use crate::lp::Instance;
use crate::neuralgen::VaeModel;
use crate::probgen::{DemandDataset, GeneratedProblem, MixtureParams, Splits};
use crate::uncertainty::UncertaintySet;

pub const INSTANCE_FILE: &str = "instance.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const SPLITS_FILE: &str = "splits.json";

/// Sidecar describing how `dataset.csv` was produced and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub n_facilities: usize,
    pub n_destinations: usize,
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureParams>,
}

#[derive(Debug, Clone)]
pub struct ProblemDir {
    pub instance: Instance,
    pub dataset: DemandDataset,
    pub meta: SplitsFile,
}

pub fn parse_instance(text: &str) -> Result<Instance> {
    Ok(serde_json::from_str(text)?)
}

pub fn parse_splits(text: &str) -> Result<SplitsFile> {
    Ok(serde_json::from_str(text)?)
}

pub fn parse_model(text: &str) -> Result<VaeModel> {
    Ok(serde_json::from_str(text)?)
}

pub fn parse_uncertainty_set(text: &str) -> Result<UncertaintySet> {
    Ok(serde_json::from_str(text)?)
}

/// Any solver output; AGRO extras are ignored.
pub fn parse_result(text: &str) -> Result<CcgResult> {
    Ok(serde_json::from_str(text)?)
}

pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Demand rows under a header naming one column per destination.
pub fn parse_dataset_csv<R: Read>(reader: R) -> Result<DenseMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let width = rdr.headers()?.len();
    if width == 0 {
        return Err(Error::Parse("dataset header is empty".into()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != width {
            return Err(Error::Parse(format!(
                "row {k} has {} fields, expected {width}",
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {k}: bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("row {k}: non-finite value")));
            }
            data.push(v);
        }
        rows += 1;
    }
    DenseMatrix::from_row_major(rows, width, data)
}

pub fn write_dataset_csv<W: std::io::Write>(data: &DenseMatrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..data.cols()).map(|j| format!("d{j}")))?;
    for i in 0..data.rows() {
        w.write_record(data.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn write_problem_dir(dir: &Path, problem: &GeneratedProblem, seed: Option<u64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(INSTANCE_FILE), &problem.instance)?;
    write_dataset_csv(
        &problem.dataset.data,
        fs::File::create(dir.join(DATASET_FILE))?,
    )?;
    let meta = SplitsFile {
        seed,
        n_facilities: problem.instance.n_facilities(),
        n_destinations: problem.instance.n_destinations(),
        splits: problem.dataset.split.clone(),
        mixture: Some(problem.mixture.clone()),
    };
    write_json(&dir.join(SPLITS_FILE), &meta)
}

pub fn read_problem_dir(dir: &Path) -> Result<ProblemDir> {
    let instance = parse_instance(&read_to_string(&dir.join(INSTANCE_FILE))?)?;
    let data = parse_dataset_csv(fs::File::open(dir.join(DATASET_FILE))?)?;
    let meta = parse_splits(&read_to_string(&dir.join(SPLITS_FILE))?)?;
    if data.cols() != instance.n_destinations() || meta.n_destinations != data.cols() {
        return Err(Error::Dimension(
            "dataset columns, instance destinations and splits disagree".into(),
        ));
    }
    if meta.n_facilities != instance.n_facilities() {
        return Err(Error::Dimension(
            "splits file and instance disagree on facilities".into(),
        ));
    }
    let dataset = DemandDataset::new(data, meta.splits.clone())?;
    Ok(ProblemDir {
        instance,
        dataset,
        meta,
    })
}
