//! Softmax output layer over frozen features.
//!
//! The output layer is the only trainable (and the only exchanged) part of a
//! peer's network. Parameters live in one flat buffer: the `C x F` weight
//! matrix in row-major order followed by the `C` biases. Row `c` of the weights
//! together with bias `c` forms the class-specific parameters of class `c`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use thiserror::Error;

/// Size of the `(classes, features)` header in the wire format.
pub const WIRE_HEADER_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("invalid layer dimensions {classes}x{features}: need at least 2 classes and 1 feature")]
    Dimensions { classes: usize, features: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("malformed serialized layer: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    classes: usize,
    features: usize,
    params: Vec<f64>,
}

impl OutputLayer {
    pub fn zeros(classes: usize, features: usize) -> Result<Self, ModelError> {
        check_dims(classes, features)?;
        Ok(Self {
            classes,
            features,
            params: vec![0.0; classes * (features + 1)],
        })
    }

    pub fn from_parts(weights: Array2<f64>, biases: Array1<f64>) -> Result<Self, ModelError> {
        let (classes, features) = weights.dim();
        check_dims(classes, features)?;
        if biases.len() != classes {
            return Err(ModelError::Shape {
                expected: format!("{classes} biases"),
                actual: format!("{} biases", biases.len()),
            });
        }
        let mut params = Vec::with_capacity(classes * (features + 1));
        params.extend(weights.iter().copied());
        params.extend(biases.iter().copied());
        Ok(Self {
            classes,
            features,
            params,
        })
    }

    /// Builds a layer from the flat parameter layout (weights row-major, then biases).
    pub fn from_flat(classes: usize, features: usize, params: Vec<f64>) -> Result<Self, ModelError> {
        check_dims(classes, features)?;
        let expected = classes * (features + 1);
        if params.len() != expected {
            return Err(ModelError::Shape {
                expected: format!("{expected} parameters"),
                actual: format!("{} parameters", params.len()),
            });
        }
        Ok(Self {
            classes,
            features,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        let n = self.classes * self.features;
        ArrayView2::from_shape((self.classes, self.features), &self.params[..n])
            .expect("layer buffer sized at construction")
    }

    pub fn biases(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.classes * self.features..])
    }

    pub fn weights_and_biases_mut(&mut self) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
        let n = self.classes * self.features;
        let (w, b) = self.params.split_at_mut(n);
        (
            ArrayViewMut2::from_shape((self.classes, self.features), w)
                .expect("layer buffer sized at construction"),
            ArrayViewMut1::from(b),
        )
    }

    /// Weight row and bias belonging to `class`.
    pub fn class_params(&self, class: usize) -> (&[f64], f64) {
        let row = &self.params[class * self.features..(class + 1) * self.features];
        (row, self.params[self.classes * self.features + class])
    }

    pub fn set_class_params(&mut self, class: usize, row: &[f64], bias: f64) {
        debug_assert_eq!(row.len(), self.features);
        self.params[class * self.features..(class + 1) * self.features].copy_from_slice(row);
        self.params[self.classes * self.features + class] = bias;
    }

    pub fn same_shape(&self, other: &OutputLayer) -> bool {
        self.classes == other.classes && self.features == other.features
    }

    pub fn check_same_shape(&self, other: &OutputLayer) -> Result<(), ModelError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ModelError::Shape {
                expected: format!("{}x{}", self.classes, self.features),
                actual: format!("{}x{}", other.classes, other.features),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    pub fn squared_distance(&self, other: &OutputLayer) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Euclidean distance over all weights and biases.
    pub fn distance(&self, other: &OutputLayer) -> f64 {
        self.squared_distance(other).sqrt()
    }

    /// Raw scores `X W^T + b` for a batch of feature rows.
    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
        if features.ncols() != self.features {
            return Err(ModelError::Shape {
                expected: format!("{} features", self.features),
                actual: format!("{} features", features.ncols()),
            });
        }
        let mut out = features.dot(&self.weights().t());
        out += &self.biases();
        Ok(out)
    }

    /// Class probabilities for a single feature vector.
    pub fn predict(&self, features: &[f64]) -> Result<Array1<f64>, ModelError> {
        let x = ArrayView2::from_shape((1, features.len()), features).expect("one row");
        let mut logits = self.logits(x)?;
        softmax_rows(&mut logits);
        Ok(logits.row(0).to_owned())
    }

    pub fn predict_proba(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
        let mut logits = self.logits(features)?;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn classify(&self, features: ArrayView2<'_, f64>) -> Result<Vec<usize>, ModelError> {
        let logits = self.logits(features)?;
        Ok(logits.rows().into_iter().map(|r| argmax(r)).collect())
    }

    pub fn serialized_len(classes: usize, features: usize) -> usize {
        WIRE_HEADER_LEN + 4 * classes * (features + 1)
    }

    /// Canonical wire encoding: `u32` classes and features (little endian),
    /// then every parameter as a little-endian `f32` in flat order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::serialized_len(self.classes, self.features));
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.features as u32).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < WIRE_HEADER_LEN {
            return Err(ModelError::Malformed(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let classes = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let features = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        check_dims(classes, features)?;
        let expected = Self::serialized_len(classes, features);
        if bytes.len() != expected {
            return Err(ModelError::Malformed(format!(
                "expected {expected} bytes for a {classes}x{features} layer, got {}",
                bytes.len()
            )));
        }
        let params = bytes[WIRE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_flat(classes, features, params)
    }
}

fn check_dims(classes: usize, features: usize) -> Result<(), ModelError> {
    if classes < 2 || features < 1 {
        return Err(ModelError::Dimensions { classes, features });
    }
    Ok(())
}

pub(crate) fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_batch(layer: &OutputLayer, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(), ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if features.nrows() != labels.len() {
        return Err(ModelError::Shape {
            expected: format!("{} feature rows", labels.len()),
            actual: format!("{} feature rows", features.nrows()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= layer.classes) {
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: layer.classes,
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of the true labels.
pub fn nll_loss(layer: &OutputLayer, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64, ModelError> {
    check_batch(layer, features, labels)?;
    let logits = layer.logits(features)?;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Training objective: mean NLL plus `l2 * ||W||^2` (biases are not penalised).
pub fn objective(layer: &OutputLayer, features: ArrayView2<'_, f64>, labels: &[usize], l2: f64) -> Result<f64, ModelError> {
    let penalty: f64 = layer.weights().iter().map(|w| w * w).sum();
    Ok(nll_loss(layer, features, labels)? + l2 * penalty)
}

/// Analytic gradient of [`objective`], returned in the layer's own shape.
pub fn gradient(layer: &OutputLayer, features: ArrayView2<'_, f64>, labels: &[usize], l2: f64) -> Result<OutputLayer, ModelError> {
    check_batch(layer, features, labels)?;
    let n = labels.len() as f64;
    let mut delta = layer.predict_proba(features)?;
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    let mut grad_w = delta.t().dot(&features) / n;
    grad_w.scaled_add(2.0 * l2, &layer.weights());
    let grad_b = delta.sum_axis(Axis(0)) / n;
    OutputLayer::from_parts(grad_w, grad_b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            l2: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for one output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    classes: usize,
    features: usize,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(layer: &OutputLayer, config: AdamConfig) -> Self {
        Self {
            config,
            classes: layer.classes,
            features: layer.features,
            first_moment: vec![0.0; layer.param_count()],
            second_moment: vec![0.0; layer.param_count()],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advances `layer` by one Adam step in place.
    pub fn apply(&mut self, layer: &mut OutputLayer, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(), ModelError> {
        if layer.classes != self.classes || layer.features != self.features {
            return Err(ModelError::Shape {
                expected: format!("{}x{}", self.classes, self.features),
                actual: format!("{}x{}", layer.classes, layer.features),
            });
        }
        let grad = gradient(layer, features, labels, self.config.l2)?;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in layer
            .params
            .iter_mut()
            .zip(grad.params())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// One mini-batch Adam step on mean NLL plus L2; inputs are left untouched.
pub fn train_step(
    layer: &OutputLayer,
    opt: &OptimizerState,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(OutputLayer, OptimizerState), ModelError> {
    let mut layer = layer.clone();
    let mut opt = opt.clone();
    opt.apply(&mut layer, features, labels)?;
    Ok((layer, opt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_f1: BTreeMap<usize, f64>,
    pub per_class_support: BTreeMap<usize, usize>,
}

/// Accuracy plus one-vs-rest F1 for each requested class (all classes when
/// `classes` is `None`). Classes without support get no F1 entry.
pub fn evaluate(
    layer: &OutputLayer,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: Option<&[usize]>,
) -> Result<EvalReport, ModelError> {
    check_batch(layer, features, labels)?;
    let predictions = layer.classify(features)?;
    Ok(report_from_predictions(&predictions, labels, layer.classes, classes))
}

pub(crate) fn report_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    classes: Option<&[usize]>,
) -> EvalReport {
    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        predicted[p] += 1;
        support[y] += 1;
        if p == y {
            tp[p] += 1;
            correct += 1;
        }
    }
    let all: Vec<usize> = (0..num_classes).collect();
    let wanted = classes.unwrap_or(&all);
    let mut per_class_f1 = BTreeMap::new();
    let mut per_class_support = BTreeMap::new();
    for &c in wanted {
        if c >= num_classes {
            continue;
        }
        per_class_support.insert(c, support[c]);
        if support[c] == 0 {
            continue;
        }
        let precision = if predicted[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / predicted[c] as f64
        };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class_f1.insert(c, f1);
    }
    EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_class_f1,
        per_class_support,
    }
}

/// Fraction of rows classified correctly.
pub fn accuracy(layer: &OutputLayer, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64, ModelError> {
    check_batch(layer, features, labels)?;
    let predictions = layer.classify(features)?;
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}
