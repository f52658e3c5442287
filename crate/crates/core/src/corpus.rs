//! Corpus evaluation: per-sample isolation, bounded parallelism and report
//! aggregation.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::imaging::RasterImage;
use crate::metrics::{compensated_sum, MetricReport};
use crate::model::{ClassifierHandle, ModelError};
use crate::pipeline::{
    evaluate_sample, ExplainSettings, MethodSpec, MetricSettings, PipelineError, SampleOutcome,
};

/// Fraction of failed samples above which a corpus run counts as failed.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone)]
pub struct CorpusSample {
    pub name: String,
    /// Encoded image file contents (PNG, PGM or PPM).
    pub bytes: Vec<u8>,
    pub true_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Evaluated,
    /// Skipped because the prediction disagrees with the true class.
    Misclassified,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The image could not be decoded.
    Input,
    /// The model process violated the wire protocol.
    ModelProtocol,
    Model,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub name: String,
    pub true_class: Option<usize>,
    pub predicted: Option<usize>,
    pub target: Option<usize>,
    pub status: SampleStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Keyed by method label.
    pub metrics: BTreeMap<String, MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCurves {
    pub fractions: Vec<f64>,
    pub morf: Vec<f64>,
    pub lerf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    /// Method labels in request order.
    pub methods: Vec<String>,
    pub samples: Vec<SampleRow>,
    pub aggregates: BTreeMap<String, MetricReport>,
    pub curves: BTreeMap<String, MeanCurves>,
    pub n_evaluated: usize,
    pub n_misclassified: usize,
    pub n_failed: usize,
}

/// Attribution maps of one evaluated sample, in method order.
pub type SampleMaps = Vec<(String, AttributionMap)>;

#[derive(Debug, Clone)]
pub struct CorpusSettings {
    pub methods: Vec<MethodSpec>,
    pub explain: ExplainSettings,
    pub metrics: MetricSettings,
    pub seed: u64,
    pub target: Option<usize>,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
}

struct SampleResult {
    row: SampleRow,
    maps: Option<SampleMaps>,
    curves: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn classify(err: &PipelineError) -> FailureKind {
    match err.model_error() {
        Some(ModelError::Protocol(_)) => FailureKind::ModelProtocol,
        Some(_) => FailureKind::Model,
        None => match err {
            PipelineError::Imaging(_) => FailureKind::Input,
            _ => FailureKind::Internal,
        },
    }
}

fn run_one(
    model: &ClassifierHandle,
    index: usize,
    sample: &CorpusSample,
    settings: &CorpusSettings,
) -> SampleResult {
    let mut row = SampleRow {
        index,
        name: sample.name.clone(),
        true_class: sample.true_class,
        predicted: None,
        target: None,
        status: SampleStatus::Failed,
        failure: None,
        error: None,
        metrics: BTreeMap::new(),
    };
    let seed = settings.seed.wrapping_add(index as u64);
    // Method-level seed overrides advance per sample like the run seed.
    let specs: Vec<MethodSpec> = settings
        .methods
        .iter()
        .map(|m| MethodSpec {
            method: m.method,
            seed: m.seed.map(|s| s.wrapping_add(index as u64)),
        })
        .collect();
    let attempt = catch_unwind(AssertUnwindSafe(|| -> Result<SampleOutcome, PipelineError> {
        let page = RasterImage::decode(&sample.bytes)?;
        evaluate_sample(
            model,
            &page,
            sample.true_class,
            settings.target,
            &specs,
            &settings.explain,
            &settings.metrics,
            seed,
        )
    }));
    let mut maps = None;
    let mut curves = Vec::new();
    match attempt {
        Ok(Ok(SampleOutcome::Evaluated(e))) => {
            row.status = SampleStatus::Evaluated;
            row.predicted = Some(e.predicted);
            row.target = Some(e.target);
            let mut out = Vec::with_capacity(e.methods.len());
            for (spec, m) in settings.methods.iter().zip(e.methods) {
                let label = spec.label();
                row.metrics.insert(label.clone(), m.metrics);
                curves.push((
                    m.morf.steps.iter().map(|s| s.fraction_removed).collect(),
                    m.morf.steps.iter().map(|s| s.score_drop).collect(),
                    m.lerf.steps.iter().map(|s| s.score_drop).collect(),
                ));
                out.push((label, m.map));
            }
            maps = Some(out);
        }
        Ok(Ok(SampleOutcome::Misclassified { predicted, .. })) => {
            row.status = SampleStatus::Misclassified;
            row.predicted = Some(predicted);
        }
        Ok(Err(err)) => {
            row.failure = Some(classify(&err));
            row.error = Some(err.to_string());
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            row.failure = Some(FailureKind::Internal);
            row.error = Some(format!("panic: {msg}"));
        }
    }
    SampleResult { row, maps, curves }
}

fn mean_columns(columns: &[&Vec<f64>]) -> Vec<f64> {
    let n = columns.len() as f64;
    (0..columns[0].len())
        .map(|i| compensated_sum(columns.iter().map(|c| c[i])) / n)
        .collect()
}

/// Evaluates every sample; failures are recorded per sample and never abort
/// the run. Returns the report and, per sample, the maps that were computed.
pub fn run_corpus(
    model: &ClassifierHandle,
    samples: &[CorpusSample],
    settings: &CorpusSettings,
) -> (CorpusReport, Vec<Option<SampleMaps>>) {
    let work = || -> Vec<SampleResult> {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| run_one(model, i, s, settings))
            .collect()
    };
    let results = if settings.workers > 0 {
        match rayon::ThreadPoolBuilder::new().num_threads(settings.workers).build() {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        }
    } else {
        work()
    };

    let labels: Vec<String> = settings.methods.iter().map(MethodSpec::label).collect();
    let mut aggregates = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for (k, label) in labels.iter().enumerate() {
        let reports: Vec<MetricReport> = results
            .iter()
            .filter_map(|r| r.row.metrics.get(label).cloned())
            .collect();
        if let Some(agg) = MetricReport::aggregate(&reports) {
            aggregates.insert(label.clone(), agg);
        }
        let per_sample: Vec<&(Vec<f64>, Vec<f64>, Vec<f64>)> =
            results.iter().filter_map(|r| r.curves.get(k)).collect();
        if let Some(first) = per_sample.first() {
            // Samples are only averaged on a shared step grid.
            let same: Vec<_> = per_sample.iter().filter(|c| c.0 == first.0).collect();
            curves.insert(
                label.clone(),
                MeanCurves {
                    fractions: first.0.clone(),
                    morf: mean_columns(&same.iter().map(|c| &c.1).collect::<Vec<_>>()),
                    lerf: mean_columns(&same.iter().map(|c| &c.2).collect::<Vec<_>>()),
                },
            );
        }
    }
    let count = |s: SampleStatus| results.iter().filter(|r| r.row.status == s).count();
    let report = CorpusReport {
        methods: labels,
        n_evaluated: count(SampleStatus::Evaluated),
        n_misclassified: count(SampleStatus::Misclassified),
        n_failed: count(SampleStatus::Failed),
        aggregates,
        curves,
        samples: Vec::new(),
    };
    let mut maps = Vec::with_capacity(results.len());
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r.row);
        maps.push(r.maps);
    }
    (CorpusReport { samples: rows, ..report }, maps)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CorpusReport {
    pub fn failure_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.n_failed as f64 / self.samples.len() as f64
        }
    }

    pub fn has_protocol_failure(&self) -> bool {
        self.samples
            .iter()
            .any(|s| s.failure == Some(FailureKind::ModelProtocol))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per sample with one column group per method.
    pub fn samples_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["index", "name", "true_class", "predicted", "target", "status", "error"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for m in &self.methods {
            for col in ["aopc_morf", "aopc_lerf", "abpc", "sensitivity", "infidelity", "continuity"] {
                header.push(format!("{m}_{col}"));
            }
        }
        w.write_record(&header).expect("in-memory csv");
        for s in &self.samples {
            let status = serde_json::to_value(s.status).expect("status serializes");
            let mut rec = vec![
                s.index.to_string(),
                s.name.clone(),
                s.true_class.map(|c| c.to_string()).unwrap_or_default(),
                s.predicted.map(|c| c.to_string()).unwrap_or_default(),
                s.target.map(|c| c.to_string()).unwrap_or_default(),
                status.as_str().unwrap_or_default().to_string(),
                s.error.clone().unwrap_or_default(),
            ];
            for m in &self.methods {
                match s.metrics.get(m) {
                    Some(r) => rec.extend([
                        r.aopc_morf.to_string(),
                        r.aopc_lerf.to_string(),
                        r.abpc.to_string(),
                        opt(r.sensitivity),
                        opt(r.infidelity),
                        r.continuity.to_string(),
                    ]),
                    None => rec.extend(std::iter::repeat_n(String::new(), 6)),
                }
            }
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// One row per method with aggregate means.
    pub fn comparison_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method", "n_samples", "aopc_morf", "aopc_lerf", "abpc", "sensitivity", "infidelity", "continuity",
        ])
        .expect("in-memory csv");
        for m in &self.methods {
            if let Some(r) = self.aggregates.get(m) {
                w.write_record([
                    m.clone(),
                    r.n_samples.to_string(),
                    r.aopc_morf.to_string(),
                    r.aopc_lerf.to_string(),
                    r.abpc.to_string(),
                    opt(r.sensitivity),
                    opt(r.infidelity),
                    r.continuity.to_string(),
                ])
                .expect("in-memory csv");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// `(fraction, mean_drop)` CSV of the mean MoRF and LeRF curves.
    pub fn curve_csvs(&self, method: &str) -> Option<(String, String)> {
        let c = self.curves.get(method)?;
        let render = |drops: &[f64]| {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["fraction", "mean_drop"]).expect("in-memory csv");
            for (f, d) in c.fractions.iter().zip(drops) {
                w.write_record([f.to_string(), d.to_string()]).expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
        };
        Some((render(&c.morf), render(&c.lerf)))
    }

    /// Fixed-width table of the aggregate rows for terminal output.
    pub fn comparison_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>5} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11}\n",
            "method", "n", "AOPC-MoRF", "AOPC-LeRF", "ABPC", "Sens.", "Inf.", "Cont."
        );
        let cell = |v: Option<f64>| v.map(|x| format!("{x:>11.5}")).unwrap_or_else(|| format!("{:>11}", "-"));
        for m in &self.methods {
            if let Some(r) = self.aggregates.get(m) {
                out.push_str(&format!(
                    "{:<18} {:>5} {} {} {} {} {} {}\n",
                    m,
                    r.n_samples,
                    cell(Some(r.aopc_morf)),
                    cell(Some(r.aopc_lerf)),
                    cell(Some(r.abpc)),
                    cell(r.sensitivity),
                    cell(r.infidelity),
                    cell(Some(r.continuity)),
                ));
            }
        }
        out
    }
}
