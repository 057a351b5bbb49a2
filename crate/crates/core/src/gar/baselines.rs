//! Baseline aggregation rules: FedAvg, coordinate-wise median, Krum,
//! BRIDGE (coordinate-wise trimmed mean) and MOZI.

use std::cmp::Ordering;

use ndarray::Axis;
use rand::seq::index::sample;

use super::{AggregationError, AggregationInput, AggregationRule};
use crate::model::{nll_loss, OutputLayer};

fn check_nonempty(models: &[&OutputLayer]) -> Result<(), AggregationError> {
    let first = models
        .first()
        .ok_or_else(|| AggregationError::Config("no models to aggregate".into()))?;
    for m in &models[1..] {
        first.check_same_shape(m)?;
    }
    Ok(())
}

/// Applies `reduce` to the values of every coordinate across `models`.
fn coordinatewise(models: &[&OutputLayer], mut reduce: impl FnMut(&mut [f64]) -> f64) -> OutputLayer {
    let first = models[0];
    let mut column = vec![0.0; models.len()];
    let params = (0..first.param_count())
        .map(|j| {
            for (slot, m) in column.iter_mut().zip(models) {
                *slot = m.params()[j];
            }
            reduce(&mut column)
        })
        .collect();
    OutputLayer::from_flat(first.classes(), first.feature_dim(), params).expect("shape of first model")
}

/// Unweighted coordinate mean.
pub fn mean(models: &[&OutputLayer]) -> Result<OutputLayer, AggregationError> {
    check_nonempty(models)?;
    let n = models.len() as f64;
    let mut params = models[0].params().to_vec();
    for m in &models[1..] {
        for (acc, v) in params.iter_mut().zip(m.params()) {
            *acc += v;
        }
    }
    params.iter_mut().for_each(|v| *v /= n);
    Ok(OutputLayer::from_flat(models[0].classes(), models[0].feature_dim(), params)?)
}

/// Coordinate-wise median; even counts average the two middle values.
pub fn coordinate_median(models: &[&OutputLayer]) -> Result<OutputLayer, AggregationError> {
    check_nonempty(models)?;
    let n = models.len();
    Ok(coordinatewise(models, |values| {
        let mid = n / 2;
        let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
        let upper = *upper;
        if n % 2 == 1 {
            upper
        } else {
            let lower = values[..mid].iter().copied().max_by(f64::total_cmp).expect("mid >= 1");
            (lower + upper) / 2.0
        }
    }))
}

/// Coordinate-wise mean after dropping the `trim` largest and smallest values.
pub fn trimmed_mean(models: &[&OutputLayer], trim: usize) -> Result<OutputLayer, AggregationError> {
    check_nonempty(models)?;
    let n = models.len();
    if n <= 2 * trim {
        return Err(AggregationError::Config(format!(
            "trimmed mean with b = {trim} needs more than {} models, got {n}",
            2 * trim
        )));
    }
    let kept = (n - 2 * trim) as f64;
    Ok(coordinatewise(models, |values| {
        values.sort_unstable_by(f64::total_cmp);
        values[trim..n - trim].iter().sum::<f64>() / kept
    }))
}

/// Krum score of each model: sum of squared distances to its `n - b - 2`
/// nearest other models.
pub fn krum_scores(models: &[&OutputLayer], assumed_attackers: usize) -> Result<Vec<f64>, AggregationError> {
    check_nonempty(models)?;
    let n = models.len();
    if n < assumed_attackers + 3 {
        return Err(AggregationError::Config(format!(
            "Krum with b = {assumed_attackers} needs at least {} models, got {n}",
            assumed_attackers + 3
        )));
    }
    let neighbours = n - assumed_attackers - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = models[i].squared_distance(models[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_unstable_by(f64::total_cmp);
            others[..neighbours].iter().sum()
        })
        .collect())
}

/// Index of the model Krum selects; ties go to the lowest id.
pub fn krum_select(models: &[(usize, &OutputLayer)], assumed_attackers: usize) -> Result<usize, AggregationError> {
    let layers: Vec<&OutputLayer> = models.iter().map(|(_, m)| *m).collect();
    let scores = krum_scores(&layers, assumed_attackers)?;
    let best = (0..models.len())
        .min_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then_with(|| models[a].0.cmp(&models[b].0))
        })
        .expect("at least three models");
    Ok(best)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FedAvg;

impl AggregationRule for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn aggregate(&self, input: AggregationInput<'_>) -> Result<OutputLayer, AggregationError> {
        input.check_shapes()?;
        let models: Vec<&OutputLayer> = input.all_models().into_iter().map(|(_, m)| m).collect();
        mean(&models)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Median;

impl AggregationRule for Median {
    fn name(&self) -> &'static str {
        "median"
    }

    fn aggregate(&self, input: AggregationInput<'_>) -> Result<OutputLayer, AggregationError> {
        input.check_shapes()?;
        let models: Vec<&OutputLayer> = input.all_models().into_iter().map(|(_, m)| m).collect();
        coordinate_median(&models)
    }
}

/// Keeps the own model when fewer than `b + 3` models are available.
#[derive(Debug, Clone, Copy)]
pub struct Krum {
    pub assumed_attackers: usize,
}

impl AggregationRule for Krum {
    fn name(&self) -> &'static str {
        "krum"
    }

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        vec![("b", self.assumed_attackers as f64)]
    }

    fn aggregate(&self, input: AggregationInput<'_>) -> Result<OutputLayer, AggregationError> {
        input.check_shapes()?;
        let models = input.all_models();
        if models.len() < self.assumed_attackers + 3 {
            return Ok(input.own.clone());
        }
        let chosen = krum_select(&models, self.assumed_attackers)?;
        Ok(models[chosen].1.clone())
    }
}

/// Coordinate-wise trimmed mean; keeps the own model when at most `2b`
/// models are available.
#[derive(Debug, Clone, Copy)]
pub struct Bridge {
    pub trim: usize,
}

impl AggregationRule for Bridge {
    fn name(&self) -> &'static str {
        "bridge"
    }

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        vec![("b", self.trim as f64)]
    }

    fn aggregate(&self, input: AggregationInput<'_>) -> Result<OutputLayer, AggregationError> {
        input.check_shapes()?;
        let models: Vec<&OutputLayer> = input.all_models().into_iter().map(|(_, m)| m).collect();
        if models.len() <= 2 * self.trim {
            return Ok(input.own.clone());
        }
        trimmed_mean(&models, self.trim)
    }
}

/// Two-stage filter: keep the `ceil(rho * m)` received models closest to the
/// own model, then those whose loss on a small local batch does not exceed
/// the own model's loss.
#[derive(Debug, Clone, Copy)]
pub struct Mozi {
    pub benign_ratio: f64,
    pub batch_cap: usize,
}

impl AggregationRule for Mozi {
    fn name(&self) -> &'static str {
        "mozi"
    }

    fn hyperparameters(&self) -> Vec<(&'static str, f64)> {
        vec![("rho", self.benign_ratio), ("batch", self.batch_cap as f64)]
    }

    fn aggregate(&self, input: AggregationInput<'_>) -> Result<OutputLayer, AggregationError> {
        if !(self.benign_ratio > 0.0 && self.benign_ratio <= 1.0) {
            return Err(AggregationError::InvalidParameter(format!(
                "rho = {} outside (0, 1]",
                self.benign_ratio
            )));
        }
        input.check_shapes()?;
        if input.received.is_empty() {
            return Ok(input.own.clone());
        }
        if input.eval.is_empty() || self.batch_cap == 0 {
            return Err(AggregationError::InvalidParameter(
                "MOZI needs a nonempty local evaluation batch".into(),
            ));
        }

        let m = input.received.len();
        let keep = ((self.benign_ratio * m as f64).ceil() as usize).clamp(1, m);
        let mut by_distance: Vec<(f64, usize, usize)> = input
            .received
            .iter()
            .enumerate()
            .map(|(i, r)| (input.own.squared_distance(&r.model), r.sender, i))
            .collect();
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let closest = &by_distance[..keep];

        let batch_size = self.batch_cap.min(input.eval.len());
        let mut picked = sample(input.rng, input.eval.len(), batch_size).into_vec();
        picked.sort_unstable();
        let batch_x = input.eval.features.select(Axis(0), &picked);
        let batch_y: Vec<usize> = picked.iter().map(|&i| input.eval.labels[i]).collect();

        let own_loss = nll_loss(input.own, batch_x.view(), &batch_y)?;
        let mut scored = Vec::with_capacity(keep);
        for &(_, sender, idx) in closest {
            let loss = nll_loss(&input.received[idx].model, batch_x.view(), &batch_y)?;
            scored.push((loss, sender, idx));
        }
        let mut survivors: Vec<&OutputLayer> = scored
            .iter()
            .filter(|(loss, _, _)| *loss <= own_loss)
            .map(|&(_, _, idx)| input.received[idx].model.as_ref())
            .collect();
        if survivors.is_empty() {
            let best = scored
                .iter()
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(Ordering::Equal))
                .expect("keep >= 1");
            survivors.push(input.received[best.2].model.as_ref());
        }
        survivors.insert(0, input.own);
        mean(&survivors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gar::{EvalSet, Received};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Layer whose first coordinate is `v` and every other coordinate zero.
    fn scalar(v: f64) -> OutputLayer {
        let mut l = OutputLayer::zeros(2, 1).unwrap();
        l.params_mut()[0] = v;
        l
    }

    fn from_values(values: &[f64]) -> OutputLayer {
        // 2 classes x (F + 1) parameters; pad to a valid layer size.
        let f = values.len().div_ceil(2).max(2) - 1;
        let mut params = values.to_vec();
        params.resize(2 * (f + 1), 0.0);
        OutputLayer::from_flat(2, f, params).unwrap()
    }

    fn empty_eval() -> EvalSet {
        EvalSet {
            features: Array2::zeros((0, 1)),
            labels: vec![],
            familiar_classes: vec![],
        }
    }

    fn received(models: Vec<OutputLayer>) -> Vec<Received> {
        models
            .into_iter()
            .enumerate()
            .map(|(i, m)| Received {
                sender: i + 1,
                model: Arc::new(m),
            })
            .collect()
    }

    fn run(rule: &dyn AggregationRule, own: &OutputLayer, recv: &[Received], eval: &EvalSet) -> OutputLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
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
    fn fedavg_two_point_mean_and_identity() {
        let eval = empty_eval();
        let out = run(&FedAvg, &scalar(1.0), &received(vec![scalar(3.0)]), &eval);
        assert_eq!(out.params()[0], 2.0);
        let own = scalar(1.5);
        assert_eq!(run(&FedAvg, &own, &[], &eval), own);
    }

    #[test]
    fn fedavg_rejects_shape_mismatch() {
        let eval = empty_eval();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recv = received(vec![OutputLayer::zeros(3, 1).unwrap()]);
        let err = FedAvg
            .aggregate(AggregationInput {
                own_id: 0,
                own: &scalar(0.0),
                received: &recv,
                eval: &eval,
                rng: &mut rng,
            })
            .unwrap_err();
        assert!(matches!(err, AggregationError::Model(_)));
    }

    #[test]
    fn median_odd_and_even() {
        let odd: Vec<OutputLayer> = [1.0, 2.0, 100.0].iter().map(|&v| scalar(v)).collect();
        let refs: Vec<&OutputLayer> = odd.iter().collect();
        assert_eq!(coordinate_median(&refs).unwrap().params()[0], 2.0);
        let even: Vec<OutputLayer> = [1.0, 2.0, 3.0, 100.0].iter().map(|&v| scalar(v)).collect();
        let refs: Vec<&OutputLayer> = even.iter().collect();
        assert_eq!(coordinate_median(&refs).unwrap().params()[0], 2.5);
    }

    #[test]
    fn trimmed_mean_examples() {
        let ms: Vec<OutputLayer> = [1.0, 2.0, 3.0, 4.0, 100.0].iter().map(|&v| scalar(v)).collect();
        let refs: Vec<&OutputLayer> = ms.iter().collect();
        assert_eq!(trimmed_mean(&refs, 1).unwrap().params()[0], 3.0);
        assert_eq!(trimmed_mean(&refs, 0).unwrap(), mean(&refs).unwrap());
        assert!(matches!(trimmed_mean(&refs[..2], 1), Err(AggregationError::Config(_))));
    }

    #[test]
    fn krum_example_selects_point_one() {
        let values = [0.0, 0.1, 0.2, 0.35, 10.0];
        let ms: Vec<OutputLayer> = values.iter().map(|&v| scalar(v)).collect();
        let refs: Vec<&OutputLayer> = ms.iter().collect();
        let scores = krum_scores(&refs, 1).unwrap();
        let expected = [0.05, 0.02, 0.0325, 0.085];
        for (s, e) in scores.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12, "{s} vs {e}");
        }
        assert!(scores[4] > 90.0);
        let tagged: Vec<(usize, &OutputLayer)> = refs.iter().copied().enumerate().collect();
        assert_eq!(krum_select(&tagged, 1).unwrap(), 1);
    }

    #[test]
    fn krum_requires_enough_models() {
        let ms: Vec<OutputLayer> = (0..4).map(|i| scalar(i as f64)).collect();
        let refs: Vec<&OutputLayer> = ms.iter().collect();
        assert!(matches!(krum_scores(&refs, 2), Err(AggregationError::Config(_))));
    }

    #[test]
    fn krum_and_bridge_keep_own_model_when_short_of_inputs() {
        let eval = empty_eval();
        let own = scalar(2.0);
        let recv = received(vec![scalar(9.0), scalar(7.0)]);
        assert_eq!(run(&Krum { assumed_attackers: 1 }, &own, &recv, &eval), own);
        assert_eq!(run(&Bridge { trim: 2 }, &own, &recv, &eval), own);
        assert_eq!(run(&Bridge { trim: 1 }, &own, &recv, &eval).params()[0], 7.0);
    }

    #[test]
    fn krum_identical_models_and_tie_break() {
        let own = scalar(4.0);
        let eval = empty_eval();
        let recv = received(vec![scalar(4.0); 4]);
        assert_eq!(run(&Krum { assumed_attackers: 1 }, &own, &recv, &eval), own);
        let tagged = vec![(7, &own), (3, &own), (5, &own)];
        assert_eq!(krum_select(&tagged, 0).unwrap(), 1);
    }

    fn mozi_eval() -> EvalSet {
        // one feature; class 1 when positive
        EvalSet {
            features: array![[1.0], [2.0], [-1.0], [-2.0]],
            labels: vec![1, 1, 0, 0],
            familiar_classes: vec![0, 1],
        }
    }

    fn separator(scale: f64) -> OutputLayer {
        OutputLayer::from_flat(2, 1, vec![-scale, scale, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn mozi_fixed_point_on_identical_models() {
        let own = separator(0.5);
        let recv = received(vec![own.clone(), own.clone(), own.clone()]);
        let rule = Mozi {
            benign_ratio: 0.5,
            batch_cap: 25,
        };
        assert_eq!(run(&rule, &own, &recv, &mozi_eval()), own);
    }

    #[test]
    fn mozi_filters_far_garbage_at_distance_stage() {
        // own separator 0.5; good model 1.0 (lower loss, distance ~0.7);
        // garbage model far away that would also have low loss.
        let own = separator(0.5);
        let good = separator(1.0);
        let garbage = separator(500.0);
        let recv = received(vec![good.clone(), garbage]);
        let rule = Mozi {
            benign_ratio: 0.5,
            batch_cap: 25,
        };
        let out = run(&rule, &own, &recv, &mozi_eval());
        assert_eq!(out, mean(&[&own, &good]).unwrap());
    }

    #[test]
    fn mozi_falls_back_to_lowest_loss_candidate() {
        let own = separator(3.0);
        // both received models are worse; the closer one by distance and better loss is taken
        let a = separator(1.0);
        let b = separator(-1.0);
        let recv = received(vec![a.clone(), b]);
        let rule = Mozi {
            benign_ratio: 1.0,
            batch_cap: 25,
        };
        let out = run(&rule, &own, &recv, &mozi_eval());
        assert_eq!(out, mean(&[&own, &a]).unwrap());
    }

    #[test]
    fn mozi_without_received_returns_own() {
        let own = separator(0.3);
        let rule = Mozi {
            benign_ratio: 0.5,
            batch_cap: 25,
        };
        assert_eq!(run(&rule, &own, &[], &mozi_eval()), own);
    }

    /// Reference order statistics by full sort.
    fn sorted_column(models: &[OutputLayer], j: usize) -> Vec<f64> {
        let mut v: Vec<f64> = models.iter().map(|m| m.params()[j]).collect();
        // insertion sort keeps the oracle free of the implementation's selection path
        for i in 1..v.len() {
            let mut k = i;
            while k > 0 && v[k - 1] > v[k] {
                v.swap(k - 1, k);
                k -= 1;
            }
        }
        v
    }

    fn random_models(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<OutputLayer> {
        (0..n)
            .map(|_| from_values(&(0..dim).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn median_and_trimmed_mean_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let n = rng.random_range(1..=9);
            let dim = rng.random_range(1..=8);
            let models = random_models(&mut rng, n, dim);
            let refs: Vec<&OutputLayer> = models.iter().collect();
            let med = coordinate_median(&refs).unwrap();
            let b = rng.random_range(0..=(n - 1) / 2);
            let tm = trimmed_mean(&refs, b).unwrap();
            for j in 0..models[0].param_count() {
                let col = sorted_column(&models, j);
                let expected_med = if n % 2 == 1 {
                    col[n / 2]
                } else {
                    (col[n / 2 - 1] + col[n / 2]) / 2.0
                };
                assert_eq!(med.params()[j], expected_med);
                let kept = &col[b..n - b];
                let expected_tm = kept.iter().sum::<f64>() / kept.len() as f64;
                assert_eq!(tm.params()[j], expected_tm);
            }
        }
    }

    /// Exhaustive Krum score: minimum over all subsets of the required size.
    fn exhaustive_score(models: &[OutputLayer], i: usize, k: usize) -> f64 {
        let others: Vec<usize> = (0..models.len()).filter(|&j| j != i).collect();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let s: f64 = others
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask & (1 << bit) != 0)
                .map(|(_, &j)| {
                    models[i]
                        .params()
                        .iter()
                        .zip(models[j].params())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
            best = best.min(s);
        }
        best
    }

    #[test]
    fn krum_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.random_range(3..=7);
            let b = rng.random_range(0..=n - 3);
            let dim = rng.random_range(1..=8);
            let models = random_models(&mut rng, n, dim);
            let refs: Vec<&OutputLayer> = models.iter().collect();
            let scores = krum_scores(&refs, b).unwrap();
            let oracle: Vec<f64> = (0..n).map(|i| exhaustive_score(&models, i, n - b - 2)).collect();
            for (s, o) in scores.iter().zip(&oracle) {
                assert!((s - o).abs() <= 1e-9 * o.abs().max(1.0));
            }
            let best = (0..n).min_by(|&a, &b| oracle[a].total_cmp(&oracle[b]).then(a.cmp(&b))).unwrap();
            let tagged: Vec<(usize, &OutputLayer)> = refs.iter().copied().enumerate().collect();
            assert_eq!(krum_select(&tagged, b).unwrap(), best);
        }
    }

    proptest! {
        #[test]
        fn robust_rules_ignore_huge_outliers(
            seed in any::<u64>(),
            n in 5usize..10,
            dim in 1usize..8,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = (n - 1) / 2;
            let b = b.min(n.saturating_sub(3)).max(1);
            let mut models: Vec<OutputLayer> = (0..n - b)
                .map(|_| from_values(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            for _ in 0..b {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                models.push(from_values(&(0..dim).map(|_| sign * 1e6 * rng.random_range(0.5..1.0)).collect::<Vec<_>>()));
            }
            let refs: Vec<&OutputLayer> = models.iter().collect();
            let benign = &models[..n - b];
            let lo: Vec<f64> = (0..models[0].param_count()).map(|j| benign.iter().map(|m| m.params()[j]).fold(f64::INFINITY, f64::min)).collect();
            let hi: Vec<f64> = (0..models[0].param_count()).map(|j| benign.iter().map(|m| m.params()[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
            if b < n - b {
                let med = coordinate_median(&refs).unwrap();
                let tm = trimmed_mean(&refs, b).unwrap();
                for j in 0..lo.len() {
                    prop_assert!(med.params()[j] >= lo[j] && med.params()[j] <= hi[j]);
                    prop_assert!(tm.params()[j] >= lo[j] - 1e-12 && tm.params()[j] <= hi[j] + 1e-12);
                }
            }
            if n >= 2 * b + 3 {
                let tagged: Vec<(usize, &OutputLayer)> = refs.iter().copied().enumerate().collect();
                prop_assert!(krum_select(&tagged, b).unwrap() < n - b);
            }
        }

        #[test]
        fn rules_are_permutation_invariant(seed in any::<u64>(), n in 3usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models = random_models(&mut rng, n, 4);
            let mut shuffled: Vec<&OutputLayer> = models.iter().collect();
            shuffled.reverse();
            let refs: Vec<&OutputLayer> = models.iter().collect();
            prop_assert_eq!(coordinate_median(&refs).unwrap(), coordinate_median(&shuffled).unwrap());
            prop_assert_eq!(trimmed_mean(&refs, 1).unwrap(), trimmed_mean(&shuffled, 1).unwrap());
            let a = mean(&refs).unwrap();
            let b = mean(&shuffled).unwrap();
            for (x, y) in a.params().iter().zip(b.params()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
