//! Preprocessing and classification primitives, implemented natively, and
//! the glue that fits a workflow left to right and predicts with it.

mod bayes;
mod decomposition;
mod linear;
mod linalg;
mod mlp;
mod neighbors;
mod preprocess;
mod tree;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::RngCore;
use thiserror::Error;

use crate::grammar::AlgorithmKind;
use crate::search::{HyperValue, WorkflowSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("{rows} feature rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("dataset needs at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("non-finite feature value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("dataset has no feature columns")]
    NoFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub name: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self, DatasetError> {
        if features.nrows() != labels.len() {
            return Err(DatasetError::LengthMismatch {
                rows: features.nrows(),
                labels: labels.len(),
            });
        }
        if features.ncols() == 0 {
            return Err(DatasetError::NoFeatures);
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(DatasetError::BadLabel {
                label,
                classes: class_names.len(),
            });
        }
        let present = class_counts(&labels, class_names.len())
            .iter()
            .filter(|&&c| c > 0)
            .count();
        if present < 2 {
            return Err(DatasetError::TooFewClasses(present));
        }
        if let Some(((row, column), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DatasetError::NonFinite { row, column });
        }
        Ok(Self {
            features,
            labels,
            class_names,
            name: name.into(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Rows at `indices`, keeping the full class vocabulary. Not validated:
    /// a subset may legitimately miss classes.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            name: self.name.clone(),
        }
    }
}

pub(crate) fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub enum HyperDomain {
    Categorical(Vec<&'static str>),
    Integer { lo: i64, hi: i64 },
    Float { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmDescriptor {
    pub id: &'static str,
    pub kind: AlgorithmKind,
    pub hyperparams: Vec<(&'static str, HyperDomain)>,
}

fn desc(id: &'static str, kind: AlgorithmKind, hyperparams: Vec<(&'static str, HyperDomain)>) -> AlgorithmDescriptor {
    AlgorithmDescriptor { id, kind, hyperparams }
}

fn cat(values: &[&'static str]) -> HyperDomain {
    HyperDomain::Categorical(values.to_vec())
}

fn int(lo: i64, hi: i64) -> HyperDomain {
    HyperDomain::Integer { lo, hi }
}

fn float(lo: f64, hi: f64) -> HyperDomain {
    HyperDomain::Float { lo, hi }
}

/// The shipped primitives, preprocessors first.
pub fn catalog() -> Vec<AlgorithmDescriptor> {
    use AlgorithmKind::{Classifier as C, Preprocessor as P};
    vec![
        desc("standardScaler", P, vec![]),
        desc("minMaxScaler", P, vec![]),
        desc("varianceThreshold", P, vec![("threshold", float(0.0, 0.2))]),
        desc("selectKBest", P, vec![("k", int(1, 10)), ("score_func", cat(&["f_classif", "chi2"]))]),
        desc("pca", P, vec![("n_components", int(1, 10)), ("whiten", cat(&["false", "true"]))]),
        desc("truncatedSVD", P, vec![("n_components", int(1, 10))]),
        desc("fastICA", P, vec![("n_components", int(1, 10)), ("fun", cat(&["logcosh", "exp", "cube"]))]),
        desc("fagg", P, vec![("n_clusters", int(1, 10)), ("linkage", cat(&["ward", "complete", "average"]))]),
        desc("rus", P, vec![("sampling_strategy", cat(&["majority", "not_minority", "all"]))]),
        desc("ros", P, vec![("sampling_strategy", cat(&["minority", "not_majority", "all"]))]),
        desc("kNN", C, vec![("n_neighbors", int(1, 30)), ("weights", cat(&["uniform", "distance"]))]),
        desc("decisionTree", C, vec![("criterion", cat(&["gini", "entropy"])), ("maxDepth", int(1, 20))]),
        desc("logisticRegression", C, vec![("penalty", cat(&["l1", "l2"])), ("C", float(0.01, 10.0))]),
        desc("gaussianNB", C, vec![("var_smoothing", float(1e-10, 1e-6))]),
        desc("multinomialNB", C, vec![("alpha", float(0.01, 1.0)), ("fit_prior", cat(&["true", "false"]))]),
        desc("lda", C, vec![("priors", cat(&["empirical", "uniform"]))]),
        desc("lsvc", C, vec![("penalty", cat(&["l1", "l2"])), ("C", float(0.01, 10.0))]),
        desc("passiveAggressiveClassifier", C, vec![("C", float(0.01, 10.0)), ("loss", cat(&["hinge", "squared_hinge"]))]),
        desc("extraTreeClassifier", C, vec![("criterion", cat(&["gini", "entropy"])), ("maxDepth", int(1, 20))]),
        desc("mlpClassifier", C, vec![("hidden_layer_size", int(4, 32)), ("activation", cat(&["relu", "tanh", "logistic"]))]),
    ]
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlError {
    #[error("{algorithm} failed: {reason}")]
    AlgorithmFailure { algorithm: String, reason: String },
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("{algorithm}: bad hyperparameter `{name}`")]
    BadHyperparameter { algorithm: String, name: String },
    #[error("expected {expected} feature columns, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("workflow has no steps")]
    EmptyWorkflow,
}

impl MlError {
    /// Id of the failing step, when the error is an algorithm failure.
    pub fn algorithm(&self) -> Option<&str> {
        match self {
            MlError::AlgorithmFailure { algorithm, .. } => Some(algorithm),
            _ => None,
        }
    }
}

pub(crate) fn failure(algorithm: &str, reason: impl Into<String>) -> MlError {
    MlError::AlgorithmFailure {
        algorithm: algorithm.to_string(),
        reason: reason.into(),
    }
}

/// Typed access to one step's hyperparameters; missing keys take defaults.
pub(crate) struct Params<'a> {
    algorithm: &'a str,
    values: &'a BTreeMap<String, HyperValue>,
}

impl<'a> Params<'a> {
    fn bad(&self, name: &str) -> MlError {
        MlError::BadHyperparameter {
            algorithm: self.algorithm.to_string(),
            name: name.to_string(),
        }
    }

    pub fn int(&self, name: &str, default: i64) -> Result<i64, MlError> {
        match self.values.get(name) {
            None => Ok(default),
            Some(HyperValue::Integer(i)) => Ok(*i),
            Some(_) => Err(self.bad(name)),
        }
    }

    pub fn float(&self, name: &str, default: f64) -> Result<f64, MlError> {
        match self.values.get(name) {
            None => Ok(default),
            Some(HyperValue::Float(x)) => Ok(*x),
            Some(HyperValue::Integer(i)) => Ok(*i as f64),
            Some(_) => Err(self.bad(name)),
        }
    }

    pub fn cat<'d>(&self, name: &str, allowed: &[&'d str]) -> Result<&'d str, MlError> {
        match self.values.get(name) {
            None => Ok(allowed[0]),
            Some(HyperValue::Categorical(s)) => allowed
                .iter()
                .find(|a| **a == s.as_str())
                .copied()
                .ok_or_else(|| self.bad(name)),
            Some(_) => Err(self.bad(name)),
        }
    }
}

pub(crate) trait Transformer: fmt::Debug + Send + Sync {
    fn transform(&self, x: ArrayView2<f64>) -> Array2<f64>;
}

pub(crate) trait Classifier: fmt::Debug + Send + Sync {
    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize>;
}

#[derive(Debug)]
enum Model {
    /// Row samplers: they act during fit only.
    Identity,
    Transform(Box<dyn Transformer>),
    Predict(Box<dyn Classifier>),
}

#[derive(Debug)]
pub struct FittedStep {
    pub algorithm: String,
    input_width: usize,
    model: Model,
}

impl FittedStep {
    pub fn is_classifier(&self) -> bool {
        matches!(self.model, Model::Predict(_))
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }
}

/// Training data as seen by one step.
pub(crate) struct TrainView<'a> {
    pub x: &'a Array2<f64>,
    pub y: &'a [usize],
    pub n_classes: usize,
}

fn check_finite(algorithm: &str, x: &Array2<f64>) -> Result<(), MlError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(failure(algorithm, "produced non-finite values"))
    }
}

/// Fits every step in order on `train`; the last step is the classifier.
pub fn fit_pipeline(w: &WorkflowSpec, train: &Dataset, rng: &mut dyn RngCore) -> Result<Vec<FittedStep>, MlError> {
    let Some((clf, preprocs)) = w.steps.split_last() else {
        return Err(MlError::EmptyWorkflow);
    };
    let n_classes = train.n_classes();
    let mut x = train.features.clone();
    let mut y = train.labels.clone();
    let mut fitted = Vec::with_capacity(w.steps.len());
    for step in preprocs {
        let params = Params {
            algorithm: &step.algorithm,
            values: &step.hyperparams,
        };
        let input_width = x.ncols();
        let model = match step.algorithm.as_str() {
            "rus" | "ros" => {
                let (nx, ny) = preprocess::resample(&step.algorithm, &params, &x, &y, n_classes, rng)?;
                x = nx;
                y = ny;
                Model::Identity
            }
            other => {
                let view = TrainView {
                    x: &x,
                    y: &y,
                    n_classes,
                };
                let t = fit_transformer(other, &params, &view, rng)?;
                x = t.transform(x.view());
                check_finite(other, &x)?;
                if x.ncols() == 0 {
                    return Err(failure(other, "no features left"));
                }
                Model::Transform(t)
            }
        };
        fitted.push(FittedStep {
            algorithm: step.algorithm.clone(),
            input_width,
            model,
        });
    }
    let params = Params {
        algorithm: &clf.algorithm,
        values: &clf.hyperparams,
    };
    let view = TrainView {
        x: &x,
        y: &y,
        n_classes,
    };
    let c = fit_classifier(&clf.algorithm, &params, &view, rng)?;
    fitted.push(FittedStep {
        algorithm: clf.algorithm.clone(),
        input_width: x.ncols(),
        model: Model::Predict(c),
    });
    Ok(fitted)
}

/// Runs the fitted transforms, then the classifier.
pub fn predict_pipeline(steps: &[FittedStep], features: ArrayView2<f64>) -> Result<Vec<usize>, MlError> {
    let mut x = features.to_owned();
    for step in steps {
        if x.ncols() != step.input_width {
            return Err(MlError::WidthMismatch {
                expected: step.input_width,
                got: x.ncols(),
            });
        }
        match &step.model {
            Model::Identity => {}
            Model::Transform(t) => x = t.transform(x.view()),
            Model::Predict(c) => return Ok(c.predict(x.view())),
        }
    }
    Err(MlError::EmptyWorkflow)
}

fn fit_transformer(
    id: &str,
    p: &Params,
    d: &TrainView,
    rng: &mut dyn RngCore,
) -> Result<Box<dyn Transformer>, MlError> {
    Ok(match id {
        "standardScaler" => Box::new(preprocess::StandardScaler::fit(d.x)),
        "minMaxScaler" => Box::new(preprocess::MinMaxScaler::fit(d.x)),
        "varianceThreshold" => Box::new(preprocess::VarianceThreshold::fit(p, d.x)?),
        "selectKBest" => Box::new(preprocess::SelectKBest::fit(p, d)?),
        "fagg" => Box::new(preprocess::FeatureAgglomeration::fit(p, d.x)?),
        "pca" => Box::new(decomposition::Pca::fit(p, d.x, rng)?),
        "truncatedSVD" => Box::new(decomposition::TruncatedSvd::fit(p, d.x, rng)?),
        "fastICA" => Box::new(decomposition::FastIca::fit(p, d.x, rng)?),
        other => return Err(MlError::UnknownAlgorithm(other.to_string())),
    })
}

fn fit_classifier(
    id: &str,
    p: &Params,
    d: &TrainView,
    rng: &mut dyn RngCore,
) -> Result<Box<dyn Classifier>, MlError> {
    if d.y.is_empty() {
        return Err(failure(id, "no training rows"));
    }
    Ok(match id {
        "kNN" => Box::new(neighbors::KNearest::fit(p, d)?),
        "decisionTree" => Box::new(tree::DecisionTree::fit(p, d, false, rng)?),
        "extraTreeClassifier" => Box::new(tree::DecisionTree::fit(p, d, true, rng)?),
        "gaussianNB" => Box::new(bayes::GaussianNb::fit(p, d)?),
        "multinomialNB" => Box::new(bayes::MultinomialNb::fit(p, d)?),
        "lda" => Box::new(linear::Lda::fit(p, d)?),
        "logisticRegression" => Box::new(linear::OneVsRest::fit_logistic(p, d, rng)?),
        "lsvc" => Box::new(linear::OneVsRest::fit_svc(p, d, rng)?),
        "passiveAggressiveClassifier" => Box::new(linear::OneVsRest::fit_passive_aggressive(p, d, rng)?),
        "mlpClassifier" => Box::new(mlp::Mlp::fit(p, d, rng)?),
        other => return Err(MlError::UnknownAlgorithm(other.to_string())),
    })
}

/// Classes with at least one training row, ascending.
pub(crate) fn present_classes(y: &[usize], n_classes: usize) -> Vec<usize> {
    class_counts(y, n_classes)
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, _)| k)
        .collect()
}

/// Index of the largest score; ties go to the first.
pub(crate) fn argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in scores.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
