//! Bristle aggregation: a distance-based prioritizer picks a mix of close and
//! far models, then a performance-based integrator merges them class by class,
//! weighting each class's parameters by how well the sender does on that class.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::{AggregationError, AggregationInput, AggregationRule, EvalSet, Received};
use crate::model::{evaluate, OutputLayer};

#[derive(Debug, Clone, PartialEq)]
pub struct DbpConfig {
    /// Exploration ratio in [0, 1]; 0 favours the closest models only.
    pub exploration: f64,
    /// Maximum number of models passed to the integrator.
    pub max_candidates: usize,
}

impl Default for DbpConfig {
    fn default() -> Self {
        Self {
            exploration: 0.4,
            max_candidates: 30,
        }
    }
}

impl DbpConfig {
    pub fn validate(&self) -> Result<(), AggregationError> {
        dbp_fractions(self.exploration)?;
        if self.max_candidates == 0 {
            return Err(AggregationError::InvalidParameter(
                "max_candidates must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbiConfig {
    /// Number of best familiar classes used for the certainty score.
    pub top_classes: usize,
    /// Multiplier applied to F1 gaps before cubing.
    pub discrepancy_boost: f64,
    pub familiar_scale: f64,
    pub familiar_offset: f64,
    pub foreign_scale: f64,
    pub foreign_offset: f64,
    /// Evaluation samples required for every familiar class before integrating.
    pub min_class_samples: usize,
    /// Ignore negative-infinite discrepancies when summing for the foreign weight.
    pub foreign_sum_skip_neg_inf: bool,
}

impl Default for PbiConfig {
    fn default() -> Self {
        Self {
            top_classes: 3,
            discrepancy_boost: 10.0,
            familiar_scale: 10.0,
            familiar_offset: 4.0,
            foreign_scale: 10.0,
            foreign_offset: 4.0,
            min_class_samples: 10,
            foreign_sum_skip_neg_inf: false,
        }
    }
}

impl PbiConfig {
    pub fn validate(&self) -> Result<(), AggregationError> {
        let bad = |msg: &str| Err(AggregationError::InvalidParameter(msg.into()));
        if self.top_classes == 0 {
            return bad("top_classes must be at least 1");
        }
        if !(self.discrepancy_boost.is_finite() && self.discrepancy_boost > 0.0) {
            return bad("discrepancy_boost must be positive");
        }
        if self.min_class_samples == 0 {
            return bad("min_class_samples must be at least 1");
        }
        if !(self.familiar_scale / 2.0 - self.familiar_offset > 0.0) {
            return bad("familiar_scale / 2 must exceed familiar_offset");
        }
        if ![self.foreign_scale, self.foreign_offset].iter().all(|v| v.is_finite()) {
            return bad("foreign weights must be finite");
        }
        Ok(())
    }
}

/// Sampling fractions for the (closest, middle, farthest) distance groups.
pub fn dbp_fractions(exploration: f64) -> Result<[f64; 3], AggregationError> {
    if !(0.0..=1.0).contains(&exploration) {
        return Err(AggregationError::InvalidParameter(format!(
            "exploration ratio {exploration} outside [0, 1]"
        )));
    }
    let a = exploration;
    Ok([(1.0 - a) * (1.0 - a), -2.0 * a * a + 2.0 * a, a * a])
}

/// Sizes of three contiguous groups over `m` sorted models; remainders go to
/// the lower groups first.
pub fn group_sizes(m: usize) -> [usize; 3] {
    let base = m / 3;
    let rem = m % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

/// Rounds `weights * total / sum(weights)` to integers summing to `total`.
/// Largest fractional parts round up; ties go to the lower index.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Number of models drawn from each group. The total is `min(max, sum(sizes))`.
/// Targets a group cannot fill move to the groups with spare members, in
/// proportion to their fractions.
pub fn allocate_draws(sizes: [usize; 3], fractions: [f64; 3], max: usize) -> [usize; 3] {
    let total = max.min(sizes.iter().sum());
    if total == 0 {
        return [0; 3];
    }
    let initial = largest_remainder(&fractions, total);
    let mut draws = [0usize; 3];
    let mut deficit = 0;
    for g in 0..3 {
        draws[g] = initial[g].min(sizes[g]);
        deficit += initial[g] - draws[g];
    }
    while deficit > 0 {
        let open: Vec<usize> = (0..3).filter(|&g| draws[g] < sizes[g]).collect();
        let mut weights: Vec<f64> = open.iter().map(|&g| fractions[g]).collect();
        if weights.iter().all(|&w| w <= 0.0) {
            weights = open.iter().map(|&g| (sizes[g] - draws[g]) as f64).collect();
        }
        let shares = largest_remainder(&weights, deficit);
        deficit = 0;
        for (&g, share) in open.iter().zip(shares) {
            let take = share.min(sizes[g] - draws[g]);
            draws[g] += take;
            deficit += share - take;
        }
    }
    draws
}

/// Selects up to `max_candidates` received models, mixing close and far ones.
/// The result is ordered by distance to `own`.
pub fn prioritize(
    own: &OutputLayer,
    received: &[Received],
    config: &DbpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Received>, AggregationError> {
    config.validate()?;
    let mut ranked: Vec<(f64, usize, usize)> = received
        .iter()
        .enumerate()
        .map(|(i, r)| {
            own.check_same_shape(&r.model)?;
            Ok((own.distance(&r.model), r.sender, i))
        })
        .collect::<Result<_, AggregationError>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let sizes = group_sizes(ranked.len());
    let draws = allocate_draws(sizes, dbp_fractions(config.exploration)?, config.max_candidates);
    let mut chosen = Vec::with_capacity(draws.iter().sum());
    let mut start = 0;
    for g in 0..3 {
        let group = &ranked[start..start + sizes[g]];
        let mut picks = sample(rng, group.len(), draws[g]).into_vec();
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|p| received[group[p].2].clone()));
        start += sizes[g];
    }
    Ok(chosen)
}

/// Per-class F1 scores over the familiar classes. Row 0 is the own model.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Matrix {
    pub classes: Vec<usize>,
    pub model_ids: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

/// F1 of the own and each prioritized model on the familiar classes.
/// Returns `None` when integration must wait for more local data.
pub fn measure_f1(
    own_id: usize,
    own: &OutputLayer,
    prioritized: &[Received],
    eval: &EvalSet,
    min_class_samples: usize,
) -> Result<Option<F1Matrix>, AggregationError> {
    let classes = &eval.familiar_classes;
    if classes.is_empty() || classes.iter().any(|&c| eval.class_count(c) < min_class_samples) {
        return Ok(None);
    }
    let models = std::iter::once((own_id, own)).chain(prioritized.iter().map(|r| (r.sender, r.model.as_ref())));
    let mut model_ids = Vec::with_capacity(prioritized.len() + 1);
    let mut rows = Vec::with_capacity(prioritized.len() + 1);
    for (id, model) in models {
        let report = evaluate(model, eval.features.view(), &eval.labels, Some(classes))?;
        model_ids.push(id);
        rows.push(classes.iter().map(|c| report.per_class_f1[c]).collect());
    }
    Ok(Some(F1Matrix {
        classes: classes.clone(),
        model_ids,
        rows,
    }))
}

/// Mean minus population standard deviation of the `top` best scores, floored at 0.
pub fn certainty(scores: &[f64], top: usize) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let best = &sorted[..top.clamp(1, sorted.len())];
    let n = best.len() as f64;
    let mean = best.iter().sum::<f64>() / n;
    let var = best.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean - var.sqrt()).max(0.0)
}

/// Cubed, boosted F1 gain over the own model; negative infinity when the
/// received model is worse.
pub fn discrepancy(other: f64, own: f64, boost: f64) -> f64 {
    if other >= own {
        ((other - own).abs() * boost).powi(3)
    } else {
        f64::NEG_INFINITY
    }
}

pub fn sigmoid_weight(score: f64, certainty: f64, scale: f64, offset: f64) -> f64 {
    if score == f64::NEG_INFINITY {
        return 0.0;
    }
    let s = scale / (1.0 + (-score / 100.0).exp()) - offset;
    s.max(0.0) * certainty
}

/// Weight for the classes the receiving peer has no data for, from the summed
/// discrepancies over its familiar classes.
pub fn foreign_weight(discrepancies: &[f64], certainty: f64, scale: f64, offset: f64, skip_neg_inf: bool) -> f64 {
    let sum = if skip_neg_inf {
        let finite: Vec<f64> = discrepancies.iter().copied().filter(|d| *d != f64::NEG_INFINITY).collect();
        if finite.is_empty() {
            f64::NEG_INFINITY
        } else {
            finite.iter().sum()
        }
    } else {
        discrepancies.iter().sum()
    };
    sigmoid_weight(sum, certainty, scale, offset)
}

/// Weights of the prioritized models (F1 rows 1..).
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationWeights {
    pub certainty: Vec<f64>,
    pub discrepancy: Vec<Vec<f64>>,
    /// `familiar[m][k]` weights model `m` on the `k`-th familiar class.
    pub familiar: Vec<Vec<f64>>,
    pub foreign: Vec<f64>,
}

pub fn compute_weights(f1: &F1Matrix, config: &PbiConfig) -> IntegrationWeights {
    let own = &f1.rows[0];
    let others = &f1.rows[1..];
    let certainty: Vec<f64> = others.iter().map(|row| certainty(row, config.top_classes)).collect();
    let discrepancy: Vec<Vec<f64>> = others
        .iter()
        .map(|row| {
            row.iter()
                .zip(own)
                .map(|(&o, &s)| discrepancy(o, s, config.discrepancy_boost))
                .collect()
        })
        .collect();
    let familiar = discrepancy
        .iter()
        .zip(&certainty)
        .map(|(row, &r)| {
            row.iter()
                .map(|&d| sigmoid_weight(d, r, config.familiar_scale, config.familiar_offset))
                .collect()
        })
        .collect();
    let foreign = discrepancy
        .iter()
        .zip(&certainty)
        .map(|(row, &r)| {
            foreign_weight(
                row,
                r,
                config.foreign_scale,
                config.foreign_offset,
                config.foreign_sum_skip_neg_inf,
            )
        })
        .collect();
    IntegrationWeights {
        certainty,
        discrepancy,
        familiar,
        foreign,
    }
}

/// Class-wise weighted average with the own model at weight 1. Classes whose
/// received weights are all zero keep the own parameters.
pub fn integrate(
    own: &OutputLayer,
    models: &[&OutputLayer],
    familiar_classes: &[usize],
    weights: &IntegrationWeights,
) -> Result<OutputLayer, AggregationError> {
    for m in models {
        own.check_same_shape(m)?;
    }
    let mut out = own.clone();
    let mut row = vec![0.0; own.feature_dim()];
    for class in 0..own.classes() {
        let slot = familiar_classes.iter().position(|&c| c == class);
        let class_weights: Vec<f64> = (0..models.len())
            .map(|m| match slot {
                Some(k) => weights.familiar[m][k],
                None => weights.foreign[m],
            })
            .collect();
        let total: f64 = class_weights.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let (own_row, own_bias) = own.class_params(class);
        row.copy_from_slice(own_row);
        let mut bias = own_bias;
        for (m, &w) in models.iter().zip(&class_weights) {
            if w == 0.0 {
                continue;
            }
            let (r, b) = m.class_params(class);
            for (acc, v) in row.iter_mut().zip(r) {
                *acc += w * v;
            }
            bias += w * b;
        }
        let norm = 1.0 + total;
        row.iter_mut().for_each(|v| *v /= norm);
        out.set_class_params(class, &row, bias / norm);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct Bristle {
    pub dbp: DbpConfig,
    pub pbi: PbiConfig,
}

impl AggregationRule for Bristle {
    fn name(&self) -> &'static str {
        "bristle"
    }

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("alpha", self.dbp.exploration),
            ("beta", self.dbp.max_candidates as f64),
            ("phi", self.pbi.top_classes as f64),
            ("eta", self.pbi.discrepancy_boost),
            ("kappa", self.pbi.min_class_samples as f64),
            ("omega_fa1", self.pbi.familiar_scale),
            ("omega_fa2", self.pbi.familiar_offset),
            ("omega_fo1", self.pbi.foreign_scale),
            ("omega_fo2", self.pbi.foreign_offset),
        ]
    }

    fn aggregate(&self, input: AggregationInput<'_>) -> Result<OutputLayer, AggregationError> {
        self.pbi.validate()?;
        input.check_shapes()?;
        let prioritized = prioritize(input.own, input.received, &self.dbp, input.rng)?;
        if prioritized.is_empty() {
            return Ok(input.own.clone());
        }
        let Some(f1) = measure_f1(
            input.own_id,
            input.own,
            &prioritized,
            input.eval,
            self.pbi.min_class_samples,
        )?
        else {
            return Ok(input.own.clone());
        };
        let weights = compute_weights(&f1, &self.pbi);
        let models: Vec<&OutputLayer> = prioritized.iter().map(|r| r.model.as_ref()).collect();
        integrate(input.own, &models, &f1.classes, &weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fractions_examples() {
        assert_eq!(dbp_fractions(0.0).unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(dbp_fractions(1.0).unwrap(), [0.0, 0.0, 1.0]);
        let f = dbp_fractions(0.4).unwrap();
        // (1 - 0.4)^2, 2 * 0.4 * 0.6, 0.4^2
        for (got, want) in f.iter().zip([0.6 * 0.6, 2.0 * 0.4 * 0.6, 0.4 * 0.4]) {
            assert!(close(*got, want, 1e-15));
        }
        assert!(close(f[0], 0.36, 1e-12) && close(f[1], 0.48, 1e-12) && close(f[2], 0.16, 1e-12));
        assert!(dbp_fractions(-0.1).is_err());
        assert!(dbp_fractions(1.5).is_err());
        assert!(dbp_fractions(f64::NAN).is_err());
    }

    #[test]
    fn group_sizes_favour_lower_groups() {
        assert_eq!(group_sizes(9), [3, 3, 3]);
        assert_eq!(group_sizes(10), [4, 3, 3]);
        assert_eq!(group_sizes(11), [4, 4, 3]);
        assert_eq!(group_sizes(1), [1, 0, 0]);
        assert_eq!(group_sizes(0), [0, 0, 0]);
    }

    #[test]
    fn allocation_largest_remainder_example() {
        let f = dbp_fractions(0.4).unwrap();
        assert_eq!(allocate_draws([3, 3, 3], f, 6), [2, 3, 1]);
    }

    #[test]
    fn allocation_exhausts_small_supply() {
        let f = dbp_fractions(0.4).unwrap();
        assert_eq!(allocate_draws(group_sizes(3), f, 30), [1, 1, 1]);
        assert_eq!(allocate_draws([0, 0, 0], f, 30), [0, 0, 0]);
    }

    #[test]
    fn allocation_redistributes_deficit() {
        // pure exploitation wants 5 from a group of 2; the rest spill over
        // by spare capacity since the other fractions are zero
        let d = allocate_draws([2, 2, 2], [1.0, 0.0, 0.0], 5);
        assert_eq!(d[0], 2);
        assert_eq!(d.iter().sum::<usize>(), 5);
        // middle fraction dominates the spill from a full low group
        let d = allocate_draws([1, 10, 10], [0.8, 0.14, 0.06], 10);
        assert_eq!(d, [1, 6, 3]);
    }

    fn scalar(v: f64) -> OutputLayer {
        let mut l = OutputLayer::zeros(2, 1).unwrap();
        l.params_mut()[0] = v;
        l
    }

    fn received(values: &[f64]) -> Vec<Received> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Received {
                sender: i + 1,
                model: Arc::new(scalar(v)),
            })
            .collect()
    }

    #[test]
    fn prioritize_respects_group_targets() {
        let recv = received(&[0.1, 0.2, 0.3, 1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
        let cfg = DbpConfig {
            exploration: 0.4,
            max_candidates: 6,
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = prioritize(&scalar(0.0), &recv, &cfg, &mut rng).unwrap();
            assert_eq!(out.len(), 6);
            let count = |lo: usize, hi: usize| out.iter().filter(|r| (lo..=hi).contains(&r.sender)).count();
            assert_eq!((count(1, 3), count(4, 6), count(7, 9)), (2, 3, 1));
        }
    }

    #[test]
    fn prioritize_passes_everything_when_supply_is_small() {
        let recv = received(&[5.0, 1.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = prioritize(&scalar(0.0), &recv, &DbpConfig::default(), &mut rng).unwrap();
        let senders: Vec<usize> = out.iter().map(|r| r.sender).collect();
        assert_eq!(senders, vec![2, 3, 1]);
        assert!(prioritize(&scalar(0.0), &[], &DbpConfig::default(), &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn certainty_examples() {
        assert!(close(certainty(&[0.9, 0.9, 0.9], 3), 0.9, 1e-12));
        assert_eq!(certainty(&[1.0, 0.0, 0.0], 3), 0.0);
        // mean 0.8, population std sqrt(0.02 / 3)
        let want = 0.8 - (0.02f64 / 3.0).sqrt();
        assert!(close(certainty(&[0.7, 0.9, 0.8], 3), want, 1e-12));
        assert!(close(want, 0.7184, 1e-4));
        // only the best three count; fewer classes than top uses all of them
        assert!(close(certainty(&[0.9, 0.1, 0.9, 0.9], 3), 0.9, 1e-12));
        assert!(close(certainty(&[0.6], 3), 0.6, 1e-12));
    }

    #[test]
    fn discrepancy_examples() {
        assert_eq!(discrepancy(0.5, 0.5, 10.0), 0.0);
        assert!(close(discrepancy(0.7, 0.5, 10.0), 8.0, 1e-9));
        assert_eq!(discrepancy(0.4, 0.5, 10.0), f64::NEG_INFINITY);
    }

    #[test]
    fn sigmoid_weight_examples() {
        assert!(close(sigmoid_weight(0.0, 1.0, 10.0, 4.0), 1.0, 1e-12));
        assert_eq!(sigmoid_weight(f64::NEG_INFINITY, 0.9, 10.0, 4.0), 0.0);
        assert!(close(sigmoid_weight(f64::INFINITY, 1.0, 10.0, 4.0), 6.0, 1e-12));
        assert!(close(sigmoid_weight(1e6, 1.0, 10.0, 4.0), 6.0, 1e-9));
        // large negative finite scores clamp at zero
        assert_eq!(sigmoid_weight(-500.0, 1.0, 10.0, 4.0), 0.0);
    }

    #[test]
    fn foreign_weight_examples() {
        assert!(close(foreign_weight(&[0.0, 0.0], 1.0, 10.0, 4.0, false), 1.0, 1e-12));
        assert!(close(foreign_weight(&[0.0, 0.0], 0.5, 10.0, 4.0, false), 0.5, 1e-12));
        let with_loss = [8.0, f64::NEG_INFINITY];
        assert_eq!(foreign_weight(&with_loss, 1.0, 10.0, 4.0, false), 0.0);
        assert!(foreign_weight(&with_loss, 1.0, 10.0, 4.0, true) > 1.0);
        assert_eq!(foreign_weight(&[f64::NEG_INFINITY], 1.0, 10.0, 4.0, true), 0.0);
        assert_eq!(foreign_weight(&[8.0, 8.0], 1.0, 0.0, 4.0, false), 0.0);
        assert_eq!(foreign_weight(&[8.0, 8.0], 1.0, 0.0, 0.0, false), 0.0);
    }

    fn weights(familiar: Vec<Vec<f64>>, foreign: Vec<f64>) -> IntegrationWeights {
        let n = foreign.len();
        IntegrationWeights {
            certainty: vec![1.0; n],
            discrepancy: vec![vec![]; n],
            familiar,
            foreign,
        }
    }

    #[test]
    fn integrate_weighted_mean_examples() {
        let own = scalar(0.0);
        let other = scalar(4.0);
        let w = weights(vec![vec![3.0]], vec![0.0]);
        let out = integrate(&own, &[&other], &[0], &w).unwrap();
        assert!(close(out.params()[0], 3.0, 1e-12));

        let w = weights(vec![vec![1.0]], vec![0.0]);
        let out = integrate(&own, &[&other], &[0], &w).unwrap();
        assert!(close(out.params()[0], 2.0, 1e-12));

        let w = weights(vec![vec![0.0]], vec![0.0]);
        assert_eq!(integrate(&own, &[&other], &[0], &w).unwrap(), own);
    }

    #[test]
    fn integrate_uses_foreign_weight_for_unfamiliar_classes() {
        let own = OutputLayer::from_flat(2, 1, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let other = OutputLayer::from_flat(2, 1, vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        // class 0 familiar with weight 0, class 1 foreign with weight 1
        let w = weights(vec![vec![0.0]], vec![1.0]);
        let out = integrate(&own, &[&other], &[0], &w).unwrap();
        assert_eq!(out.class_params(0), (&[0.0][..], 0.0));
        assert_eq!(out.class_params(1), (&[2.0][..], 4.0));
    }

    /// Two classes separated by the sign of one feature.
    fn two_class_eval(per_class: usize) -> EvalSet {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class {
            let x = 1.0 + i as f64;
            rows.extend([-x, x]);
            labels.extend([0, 1]);
        }
        EvalSet {
            features: Array2::from_shape_vec((rows.len(), 1), rows).unwrap(),
            labels,
            familiar_classes: vec![0, 1],
        }
    }

    fn honest(scale: f64) -> OutputLayer {
        OutputLayer::from_flat(2, 1, vec![-scale, scale, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn flipped_model_scores_zero_f1() {
        let eval = two_class_eval(10);
        let recv = vec![Received {
            sender: 1,
            model: Arc::new(honest(-1.0)),
        }];
        let f1 = measure_f1(0, &honest(1.0), &recv, &eval, 10).unwrap().unwrap();
        assert_eq!(f1.rows.len(), 2);
        assert_eq!(f1.model_ids, vec![0, 1]);
        assert_eq!(f1.rows[0], vec![1.0, 1.0]);
        assert_eq!(f1.rows[1], vec![0.0, 0.0]);
    }

    #[test]
    fn measure_f1_defers_without_enough_samples() {
        let eval = two_class_eval(5);
        assert_eq!(measure_f1(0, &honest(1.0), &[], &eval, 10).unwrap(), None);
        let mut empty = two_class_eval(20);
        empty.familiar_classes.clear();
        assert_eq!(measure_f1(0, &honest(1.0), &[], &empty, 10).unwrap(), None);
    }

    fn run(rule: &Bristle, own: &OutputLayer, recv: &[Received], eval: &EvalSet) -> OutputLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rule.aggregate(AggregationInput {
            own_id: 0,
            own,
            received: recv,
            eval,
            rng: &mut rng,
        })
        .unwrap()
    }

    #[test]
    fn aggregate_fixed_points() {
        let eval = two_class_eval(10);
        let rule = Bristle::default();
        let own = honest(1.0);
        assert_eq!(run(&rule, &own, &[], &eval), own);

        let worse = vec![Received {
            sender: 1,
            model: Arc::new(honest(-1.0)),
        }];
        assert_eq!(run(&rule, &own, &worse, &eval), own);

        let same = vec![Received {
            sender: 2,
            model: Arc::new(own.clone()),
        }];
        assert_eq!(run(&rule, &own, &same, &eval), own);

        let deferred = two_class_eval(3);
        let other = vec![Received {
            sender: 1,
            model: Arc::new(honest(2.0)),
        }];
        assert_eq!(run(&rule, &own, &other, &deferred), own);
    }

    #[test]
    fn aggregate_pulls_in_better_model() {
        let eval = two_class_eval(10);
        // own predicts class 1 everywhere: F1 0 for class 0 and 2/3 for class 1
        let own = OutputLayer::from_flat(2, 1, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let better = honest(1.0);
        let recv = vec![Received {
            sender: 1,
            model: Arc::new(better.clone()),
        }];
        let out = run(&Bristle::default(), &own, &recv, &eval);
        assert_ne!(out, own);
        let dist_before = own.distance(&better);
        assert!(out.distance(&better) < dist_before);
    }

    proptest! {
        #[test]
        fn fractions_sum_to_one_and_are_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let fa = dbp_fractions(a).unwrap();
            prop_assert!((fa.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(fa.iter().all(|&f| f >= -1e-15));
            if a < b {
                let fb = dbp_fractions(b).unwrap();
                prop_assert!(fa[0] > fb[0]);
                prop_assert!(fa[2] < fb[2]);
            }
        }

        #[test]
        fn prioritize_output_is_capped_submultiset(
            seed in any::<u64>(),
            m in 0usize..40,
            beta in 1usize..35,
            alpha in 0.0f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
            let recv = received(&values);
            let cfg = DbpConfig { exploration: alpha, max_candidates: beta };
            let own = scalar(0.0);
            let out = prioritize(&own, &recv, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(out.len(), beta.min(m));
            let mut senders: Vec<usize> = out.iter().map(|r| r.sender).collect();
            senders.sort_unstable();
            senders.dedup();
            prop_assert_eq!(senders.len(), out.len());
            prop_assert!(senders.iter().all(|s| (1..=m).contains(s)));
            let again = prioritize(&own, &recv, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let ids = |v: &[Received]| v.iter().map(|r| r.sender).collect::<Vec<_>>();
            prop_assert_eq!(ids(&out), ids(&again));
        }

        #[test]
        fn sigmoid_weight_monotone_and_linear(s1 in -1e4f64..1e4, s2 in -1e4f64..1e4, r in 0.0f64..5.0) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(sigmoid_weight(lo, 1.0, 10.0, 4.0) <= sigmoid_weight(hi, 1.0, 10.0, 4.0));
            let base = sigmoid_weight(s1, 1.0, 10.0, 4.0);
            prop_assert!((sigmoid_weight(s1, r, 10.0, 4.0) - base * r).abs() <= 1e-12 * (1.0 + base * r));
        }

        #[test]
        fn worse_classes_never_get_weight(
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 4), 2..8),
        ) {
            let f1 = F1Matrix { classes: vec![0, 1, 2, 3], model_ids: (0..rows.len()).collect(), rows: rows.clone() };
            let w = compute_weights(&f1, &PbiConfig::default());
            for (m, row) in rows[1..].iter().enumerate() {
                for k in 0..4 {
                    if row[k] < rows[0][k] {
                        prop_assert_eq!(w.familiar[m][k], 0.0);
                        prop_assert_eq!(w.foreign[m], 0.0);
                    }
                    prop_assert!(w.familiar[m][k] >= 0.0);
                }
            }
        }

        #[test]
        fn integration_stays_in_convex_hull(
            seed in any::<u64>(),
            n in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| OutputLayer::from_flat(3, 2, (0..9).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let own = mk(&mut rng);
            let others: Vec<OutputLayer> = (0..n).map(|_| mk(&mut rng)).collect();
            let refs: Vec<&OutputLayer> = others.iter().collect();
            let familiar: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(0.0..6.0)).collect()).collect();
            let foreign: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
            let w = weights(familiar, foreign);
            let out = integrate(&own, &refs, &[0, 2], &w).unwrap();
            for j in 0..out.param_count() {
                let vals = std::iter::once(&own).chain(&others).map(|m| m.params()[j]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.params()[j] >= lo - 1e-12 && out.params()[j] <= hi + 1e-12);
            }
        }
    }
}
