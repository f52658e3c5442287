//! End-to-end explanation and per-sample evaluation of attribution methods.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    attribute, attribute_both, occlusion, random_baseline, AblationMode, AttributionError,
    AttributionMap, OcclusionParams,
};
use crate::imaging::{ImagingError, RasterImage};
use crate::metrics::{
    abpc, aopc_curve, continuity, infidelity, sensitivity, AopcParams, Direction, InfidelityParams,
    MetricError, MetricReport, PerturbationCurve, SensitivityParams,
};
use crate::model::{ClassifierHandle, ModelError};
use crate::segmentation::{build_masks, PipelineConfig, SegmentationError, SegmentationMask};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// The underlying model error, if the failure came from the classifier.
    pub fn model_error(&self) -> Option<&ModelError> {
        match self {
            PipelineError::Model(e) => Some(e),
            PipelineError::Attribution(AttributionError::Model(e)) => Some(e),
            PipelineError::Metric(MetricError::Model(e)) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DocxplainFg,
    DocxplainFgbg,
    Occlusion,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DocxplainFg,
        Method::DocxplainFgbg,
        Method::Occlusion,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DocxplainFg => "docxplain_fg",
            Method::DocxplainFgbg => "docxplain_fgbg",
            Method::Occlusion => "occlusion",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// A method plus an optional seed override, written `method` or `method:seed`.
/// The label is the written form and names the method in reports.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodSpec {
    pub method: Method,
    pub seed: Option<u64>,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self { method, seed: None }
    }

    pub fn label(&self) -> String {
        match self.seed {
            Some(s) => format!("{}:{s}", self.method),
            None => self.method.to_string(),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, seed) = match s.split_once(':') {
            Some((n, seed)) => (
                n,
                Some(seed.parse::<u64>().map_err(|e| format!("method seed {seed:?}: {e}"))?),
            ),
            None => (s, None),
        };
        Ok(Self {
            method: name.parse()?,
            seed,
        })
    }
}

impl TryFrom<String> for MethodSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.label()
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Methods requested by an ablation mode selector: `fg`, `fgbg` or `both`.
pub fn methods_for_mode(mode: &str) -> Result<Vec<MethodSpec>, String> {
    match mode {
        "fg" => Ok(vec![MethodSpec::new(Method::DocxplainFg)]),
        "fgbg" => Ok(vec![MethodSpec::new(Method::DocxplainFgbg)]),
        "both" => Ok(vec![
            MethodSpec::new(Method::DocxplainFg),
            MethodSpec::new(Method::DocxplainFgbg),
        ]),
        other => Err(format!("mode must be fg, fgbg or both, got {other:?}")),
    }
}

/// The page as the classifier sees it: padded to a white square, resized to
/// the model input with nearest sampling, with the model's channel count.
pub fn model_input(page: &RasterImage, model: &ClassifierHandle) -> Result<RasterImage, ImagingError> {
    let (w, h) = model.input_size();
    page.pad_to_square(1.0)
        .resize_nearest(w, h)?
        .with_channels(model.info().input_channels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSettings {
    pub segmentation: PipelineConfig,
    /// `None` picks patch and stride from the model input size.
    pub occlusion: Option<OcclusionParams>,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            segmentation: PipelineConfig::default(),
            occlusion: None,
        }
    }
}

impl ExplainSettings {
    fn occlusion_for(&self, model: &ClassifierHandle) -> OcclusionParams {
        self.occlusion.unwrap_or_else(|| {
            let (w, h) = model.input_size();
            OcclusionParams::for_input(w.max(h))
        })
    }
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub input: RasterImage,
    pub target: usize,
    pub masks: Vec<SegmentationMask>,
    /// One map per requested method, in request order.
    pub maps: Vec<(MethodSpec, AttributionMap)>,
}

fn needs_masks(methods: &[MethodSpec]) -> bool {
    methods
        .iter()
        .any(|m| matches!(m.method, Method::DocxplainFg | Method::DocxplainFgbg))
}

/// Maps for `methods` on a prepared model input with precomputed masks.
/// `seed` drives the random method unless a spec overrides it.
fn explain_input(
    model: &ClassifierHandle,
    input: &RasterImage,
    masks: &[SegmentationMask],
    target: usize,
    methods: &[MethodSpec],
    settings: &ExplainSettings,
    seed: u64,
) -> Result<Vec<(MethodSpec, AttributionMap)>, PipelineError> {
    let wants = |m: Method| methods.iter().any(|s| s.method == m);
    let docxplain = match (wants(Method::DocxplainFg), wants(Method::DocxplainFgbg)) {
        (true, true) => {
            let (fg, full) = attribute_both(model, input, masks, target)?;
            (Some(fg), Some(full))
        }
        (true, false) => (Some(attribute(model, input, masks, target, AblationMode::Fg)?), None),
        (false, true) => (None, Some(attribute(model, input, masks, target, AblationMode::FgBg)?)),
        (false, false) => (None, None),
    };
    let occ = if wants(Method::Occlusion) {
        Some(occlusion(model, input, target, settings.occlusion_for(model))?)
    } else {
        None
    };
    Ok(methods
        .iter()
        .map(|spec| {
            let map = match spec.method {
                Method::DocxplainFg => docxplain.0.clone().expect("computed above"),
                Method::DocxplainFgbg => docxplain.1.clone().expect("computed above"),
                Method::Occlusion => occ.clone().expect("computed above"),
                Method::Random => random_baseline(
                    input.width(),
                    input.height(),
                    spec.seed.unwrap_or(seed),
                    target,
                ),
            };
            (spec.clone(), map)
        })
        .collect())
}

/// Segments `page`, picks the target (argmax unless given) and computes the
/// requested maps at model resolution.
pub fn explain(
    model: &ClassifierHandle,
    page: &RasterImage,
    methods: &[MethodSpec],
    target: Option<usize>,
    settings: &ExplainSettings,
    seed: u64,
) -> Result<Explanation, PipelineError> {
    let input = model_input(page, model)?;
    let target = match target {
        Some(t) => {
            model.check_target(t)?;
            t
        }
        None => model.score(&input)?.argmax(),
    };
    let masks = if needs_masks(methods) {
        build_masks(page, &settings.segmentation, model.input_size())?
    } else {
        Vec::new()
    };
    let maps = explain_input(model, &input, &masks, target, methods, settings, seed)?;
    Ok(Explanation {
        input,
        target,
        masks,
        maps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSettings {
    pub aopc: AopcParams,
    /// `n_samples = 0` disables the metric.
    pub sensitivity: SensitivityParams,
    /// `n_samples = 0` disables the metric.
    pub infidelity: InfidelityParams,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            aopc: AopcParams::default(),
            sensitivity: SensitivityParams::default(),
            infidelity: InfidelityParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodEvaluation {
    pub method: MethodSpec,
    pub map: AttributionMap,
    pub metrics: MetricReport,
    pub morf: PerturbationCurve,
    pub lerf: PerturbationCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEvaluation {
    pub predicted: usize,
    pub target: usize,
    pub methods: Vec<MethodEvaluation>,
}

#[derive(Debug, Clone)]
pub enum SampleOutcome {
    Evaluated(SampleEvaluation),
    /// A true class was given and the model predicted another one.
    Misclassified { predicted: usize, true_class: usize },
}

/// Explains one page with every method and scores the maps.
///
/// Sensitivity re-runs the method on perturbed copies of the model input,
/// which is treated as a page of its own.
pub fn evaluate_sample(
    model: &ClassifierHandle,
    page: &RasterImage,
    true_class: Option<usize>,
    target: Option<usize>,
    methods: &[MethodSpec],
    settings: &ExplainSettings,
    metric_settings: &MetricSettings,
    seed: u64,
) -> Result<SampleOutcome, PipelineError> {
    if methods.is_empty() {
        return Err(PipelineError::Invalid("no methods requested".into()));
    }
    let input = model_input(page, model)?;
    let predicted = model.score(&input)?.argmax();
    if let Some(t) = true_class {
        model.check_target(t)?;
        if t != predicted {
            return Ok(SampleOutcome::Misclassified {
                predicted,
                true_class: t,
            });
        }
    }
    let target = match target {
        Some(t) => {
            model.check_target(t)?;
            t
        }
        None => predicted,
    };
    let masks = if needs_masks(methods) {
        build_masks(page, &settings.segmentation, model.input_size())?
    } else {
        Vec::new()
    };
    let maps = explain_input(model, &input, &masks, target, methods, settings, seed)?;

    let mut out = Vec::with_capacity(maps.len());
    for (spec, map) in maps {
        let morf = aopc_curve(model, &input, &map, target, Direction::MoRF, metric_settings.aopc)?;
        let lerf = aopc_curve(model, &input, &map, target, Direction::LeRF, metric_settings.aopc)?;
        let infid = if metric_settings.infidelity.n_samples > 0 {
            Some(infidelity(model, &input, &map, target, metric_settings.infidelity, seed)?)
        } else {
            None
        };
        let sens = if metric_settings.sensitivity.n_samples > 0 {
            let single = [spec.clone()];
            let explain_perturbed = |x: &RasterImage| -> Result<AttributionMap, PipelineError> {
                let masks = if needs_masks(&single) {
                    build_masks(x, &settings.segmentation, model.input_size())?
                } else {
                    Vec::new()
                };
                let mut maps = explain_input(model, x, &masks, target, &single, settings, seed)?;
                Ok(maps.pop().expect("one method").1)
            };
            Some(sensitivity(explain_perturbed, &input, metric_settings.sensitivity, seed)?)
        } else {
            None
        };
        out.push(MethodEvaluation {
            metrics: MetricReport {
                aopc_morf: morf.aopc(),
                aopc_lerf: lerf.aopc(),
                abpc: abpc(&morf, &lerf)?,
                sensitivity: sens.map(|s| s.value),
                sensitivity_zero_denominator: sens.is_some_and(|s| s.zero_denominator),
                infidelity: infid,
                continuity: continuity(&map)?,
                n_samples: 1,
            },
            method: spec,
            map,
            morf,
            lerf,
        });
    }
    Ok(SampleOutcome::Evaluated(SampleEvaluation {
        predicted,
        target,
        methods: out,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Rect, SyntheticClassifier};
    use crate::synth::document_page;

    #[test]
    fn method_specs_parse() {
        let m: MethodSpec = "random:7".parse().unwrap();
        assert_eq!(m, MethodSpec { method: Method::Random, seed: Some(7) });
        assert_eq!(m.label(), "random:7");
        assert_eq!("occlusion".parse::<MethodSpec>().unwrap().seed, None);
        assert!("lime".parse::<MethodSpec>().is_err());
        assert!("random:x".parse::<MethodSpec>().is_err());
        assert_eq!(methods_for_mode("both").unwrap().len(), 2);
        assert!(methods_for_mode("all").is_err());
    }

    #[test]
    fn model_input_pads_and_resizes() {
        let model = ClassifierHandle::synthetic(SyntheticClassifier::constant(8, 8, 0.5).unwrap());
        let page = RasterImage::filled(4, 2, 1, 0.0);
        let input = model_input(&page, &model).unwrap();
        assert_eq!((input.width(), input.height()), (8, 8));
        // Top half is the page, bottom half the white padding.
        assert!(input.data()[..32].iter().all(|&v| v == 0.0));
        assert!(input.data()[32..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn explain_both_modes_share_target_and_size() {
        let model = ClassifierHandle::synthetic(
            SyntheticClassifier::region_density(64, 64, Rect::new(0, 0, 32, 32)).unwrap(),
        );
        let page = document_page(256, 1);
        let settings = ExplainSettings::default();
        let methods = methods_for_mode("both").unwrap();
        let e = explain(&model, &page, &methods, Some(0), &settings, 0).unwrap();
        assert_eq!(e.masks.len(), 3);
        assert_eq!(e.maps.len(), 2);
        for (_, m) in &e.maps {
            assert_eq!((m.width, m.height, m.target_class), (64, 64, 0));
        }
        // FG map is zero wherever FG+BG background groups sit outside all fg groups.
        let fg = &e.maps[0].1;
        assert!(fg.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn misclassified_samples_are_skipped() {
        let model = ClassifierHandle::synthetic(SyntheticClassifier::constant(32, 32, 0.8).unwrap());
        let page = RasterImage::filled(32, 32, 1, 1.0);
        let methods = vec![MethodSpec::new(Method::Random)];
        let out = evaluate_sample(
            &model,
            &page,
            Some(1),
            None,
            &methods,
            &ExplainSettings::default(),
            &MetricSettings::default(),
            0,
        )
        .unwrap();
        assert!(matches!(out, SampleOutcome::Misclassified { predicted: 0, true_class: 1 }));
    }

    #[test]
    fn constant_model_metrics_vanish() {
        let model = ClassifierHandle::synthetic(SyntheticClassifier::constant(32, 32, 0.8).unwrap());
        let page = document_page(128, 2);
        let methods: Vec<MethodSpec> = Method::ALL.into_iter().map(MethodSpec::new).collect();
        let metric_settings = MetricSettings {
            sensitivity: SensitivityParams { n_samples: 2, ..Default::default() },
            infidelity: InfidelityParams { n_samples: 8, ..Default::default() },
            ..Default::default()
        };
        let SampleOutcome::Evaluated(e) = evaluate_sample(
            &model,
            &page,
            None,
            None,
            &methods,
            &ExplainSettings::default(),
            &metric_settings,
            0,
        )
        .unwrap() else {
            panic!("expected evaluation");
        };
        for m in &e.methods {
            assert_eq!(m.metrics.abpc, 0.0, "{}", m.method);
            assert_eq!(m.metrics.aopc_morf, 0.0);
            if m.method.method != Method::Random {
                assert!(m.map.values.iter().all(|&v| v == 0.0));
                assert!(m.metrics.sensitivity_zero_denominator);
                assert_eq!(m.metrics.infidelity, Some(0.0));
            }
        }
    }
}
