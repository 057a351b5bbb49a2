//! Byzantine behaviours. Label-flip attackers train honestly on remapped
//! labels; the other attacks craft an output layer each round, the Krum and
//! trimmed-mean attacks with full view of the honest models of that round.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::gar::baselines::{krum_select, mean};
use crate::gar::AggregationError;
use crate::model::OutputLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    None,
    LabelFlip,
    AdditiveNoise,
    KrumAttack,
    TrimmedMeanAttack,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::None,
        AttackKind::LabelFlip,
        AttackKind::AdditiveNoise,
        AttackKind::KrumAttack,
        AttackKind::TrimmedMeanAttack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label-flip",
            AttackKind::AdditiveNoise => "additive-noise",
            AttackKind::KrumAttack => "krum-attack",
            AttackKind::TrimmedMeanAttack => "trimmed-mean-attack",
        }
    }

    /// Attacks that build their model from the honest models of the round.
    pub fn needs_benign_view(self) -> bool {
        matches!(self, AttackKind::KrumAttack | AttackKind::TrimmedMeanAttack)
    }

    /// Attacks that replace training with a crafted model.
    pub fn is_crafted(self) -> bool {
        matches!(
            self,
            AttackKind::AdditiveNoise | AttackKind::KrumAttack | AttackKind::TrimmedMeanAttack
        )
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            format!("unknown attack `{s}` (expected none|label-flip|additive-noise|krum-attack|trimmed-mean-attack)")
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackParams {
    pub noise_mean: f64,
    pub noise_std: f64,
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub trim_scale: f64,
    pub trim_epsilon: f64,
    /// Label offset applied by label-flip attackers; 0 disables the remapping.
    pub label_shift: usize,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            noise_mean: 0.05,
            noise_std: 0.01,
            lambda_init: 10.0,
            lambda_min: 1e-5,
            trim_scale: 1.0,
            trim_epsilon: 1e-6,
            label_shift: 1,
        }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<(), AggregationError> {
        let bad = |msg: &str| Err(AggregationError::InvalidParameter(msg.into()));
        if !(self.noise_mean.is_finite() && self.noise_mean > 0.0) {
            return bad("noise mean must be positive");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise standard deviation must be nonnegative");
        }
        if !(self.lambda_min > 0.0 && self.lambda_init >= self.lambda_min && self.lambda_init.is_finite()) {
            return bad("need 0 < lambda_min <= lambda_init");
        }
        if !(self.trim_scale.is_finite() && self.trim_scale > 0.0) {
            return bad("trim scale must be positive");
        }
        if !(self.trim_epsilon.is_finite() && self.trim_epsilon >= 0.0) {
            return bad("trim epsilon must be nonnegative");
        }
        Ok(())
    }
}

pub fn flip_label(label: usize, classes: usize) -> usize {
    shift_label(label, 1, classes)
}

pub fn shift_label(label: usize, shift: usize, classes: usize) -> usize {
    (label + shift) % classes
}

/// Noise around `-mean` for the first half of the parameters and `+mean` for
/// the rest; an odd extra parameter lands in the positive half.
pub fn additive_noise_model<R: Rng + ?Sized>(
    classes: usize,
    features: usize,
    noise_mean: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<OutputLayer, AggregationError> {
    let low = Normal::new(-noise_mean, noise_std).map_err(|e| AggregationError::InvalidParameter(e.to_string()))?;
    let high = Normal::new(noise_mean, noise_std).map_err(|e| AggregationError::InvalidParameter(e.to_string()))?;
    let count = classes * (features + 1);
    let half = count / 2;
    let params = (0..count)
        .map(|i| if i < half { low.sample(rng) } else { high.sample(rng) })
        .collect();
    Ok(OutputLayer::from_flat(classes, features, params)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrumAttackOutcome {
    pub model: OutputLayer,
    /// Step length used; `None` when the noise fallback was taken.
    pub lambda: Option<f64>,
    pub accepted: bool,
}

/// Whether Krum, run over `benign` plus `copies` copies of `candidate`,
/// selects a copy. Copies rank after the honest models on ties.
pub fn krum_accepts(
    benign: &[&OutputLayer],
    candidate: &OutputLayer,
    copies: usize,
    assumed_attackers: usize,
) -> Result<bool, AggregationError> {
    let mut pool: Vec<(usize, &OutputLayer)> = benign.iter().copied().enumerate().collect();
    pool.extend((0..copies).map(|i| (benign.len() + i, candidate)));
    match krum_select(&pool, assumed_attackers) {
        Ok(i) => Ok(i >= benign.len()),
        Err(AggregationError::Config(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Steps against the honest progress direction as far as Krum still accepts.
pub fn krum_attack_model<R: Rng + ?Sized>(
    benign: &[&OutputLayer],
    previous_mean: &OutputLayer,
    copies: usize,
    assumed_attackers: usize,
    params: &AttackParams,
    rng: &mut R,
) -> Result<KrumAttackOutcome, AggregationError> {
    if benign.len() < 2 {
        let shape = benign.first().copied().unwrap_or(previous_mean);
        let model = additive_noise_model(shape.classes(), shape.feature_dim(), params.noise_mean, params.noise_std, rng)?;
        return Ok(KrumAttackOutcome {
            model,
            lambda: None,
            accepted: false,
        });
    }
    let centre = mean(benign)?;
    centre.check_same_shape(previous_mean)?;
    let direction = descent_direction(&centre, previous_mean);
    let candidate_at = |lambda: f64| {
        let mut c = centre.clone();
        for (v, d) in c.params_mut().iter_mut().zip(&direction) {
            *v += lambda * d;
        }
        c
    };

    let mut lambda = params.lambda_init;
    while lambda >= params.lambda_min {
        let candidate = candidate_at(lambda);
        if krum_accepts(benign, &candidate, copies, assumed_attackers)? {
            return Ok(KrumAttackOutcome {
                model: candidate,
                lambda: Some(lambda),
                accepted: true,
            });
        }
        lambda /= 2.0;
    }
    let candidate = candidate_at(params.lambda_min);
    let accepted = krum_accepts(benign, &candidate, copies, assumed_attackers)?;
    Ok(KrumAttackOutcome {
        model: candidate,
        lambda: Some(params.lambda_min),
        accepted,
    })
}

/// Unit vector opposite to the honest movement since the previous round.
/// Without movement it points against the current mean, or along the
/// negative diagonal when the mean is zero too.
fn descent_direction(centre: &OutputLayer, previous_mean: &OutputLayer) -> Vec<f64> {
    let normalise = |v: Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (norm > 0.0 && norm.is_finite()).then(|| v.into_iter().map(|x| x / norm).collect::<Vec<f64>>())
    };
    let movement: Vec<f64> = centre
        .params()
        .iter()
        .zip(previous_mean.params())
        .map(|(c, p)| -(c - p))
        .collect();
    normalise(movement)
        .or_else(|| normalise(centre.params().iter().map(|c| -c).collect()))
        .unwrap_or_else(|| {
            let n = centre.param_count() as f64;
            vec![-1.0 / n.sqrt(); centre.param_count()]
        })
}

/// Per coordinate, a value just past the honest range on the side opposite to
/// the honest movement.
pub fn trimmed_mean_attack_model(
    benign: &[&OutputLayer],
    previous_mean: &OutputLayer,
    scale: f64,
    epsilon: f64,
) -> Result<OutputLayer, AggregationError> {
    let centre = mean(benign)?;
    centre.check_same_shape(previous_mean)?;
    let mut out = centre.clone();
    for (j, v) in out.params_mut().iter_mut().enumerate() {
        let (lo, hi) = benign.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            (lo.min(m.params()[j]), hi.max(m.params()[j]))
        });
        let offset = scale * (hi - lo + epsilon);
        *v = if centre.params()[j] - previous_mean.params()[j] >= 0.0 {
            lo - offset
        } else {
            hi + offset
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn label_flip_examples() {
        assert_eq!(flip_label(3, 10), 4);
        assert_eq!(flip_label(9, 10), 0);
        for label in 0..10 {
            let mut l = label;
            for _ in 0..10 {
                l = flip_label(l, 10);
            }
            assert_eq!(l, label);
        }
    }

    #[test]
    fn attack_names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(k.as_str().parse::<AttackKind>().unwrap(), k);
        }
        assert!("flip".parse::<AttackKind>().is_err());
    }

    #[test]
    fn noise_without_spread_is_two_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // 2 * (2 + 1) = 6 parameters
        let m = additive_noise_model(2, 2, 0.05, 0.0, &mut rng).unwrap();
        assert_eq!(m.params(), &[-0.05, -0.05, -0.05, 0.05, 0.05, 0.05]);
        // 3 * (2 + 1) = 9 parameters: the odd one is positive
        let m = additive_noise_model(3, 2, 0.05, 0.0, &mut rng).unwrap();
        assert_eq!(m.params().iter().filter(|&&v| v > 0.0).count(), 5);
        assert_eq!(m.params().iter().filter(|&&v| v < 0.0).count(), 4);
    }

    #[test]
    fn noise_mean_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.01;
        let m = additive_noise_model(10, 800, 0.05, sigma, &mut rng).unwrap();
        let n = m.param_count() as f64;
        let avg = m.params().iter().sum::<f64>() / n;
        assert!(avg.abs() <= 3.0 * sigma / n.sqrt(), "mean {avg}");
        assert!(m.is_finite());
        let mut again = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(additive_noise_model(10, 800, 0.05, sigma, &mut again).unwrap(), m);
    }

    fn layer(values: &[f64]) -> OutputLayer {
        OutputLayer::from_flat(2, values.len() / 2 - 1, values.to_vec()).unwrap()
    }

    #[test]
    fn trimmed_mean_attack_example() {
        // first coordinate moves up with values (1, 2, 3); second moves down
        let benign = [layer(&[1.0, 5.0, 0.0, 0.0]), layer(&[2.0, 5.0, 0.0, 0.0]), layer(&[3.0, 5.0, 0.0, 0.0])];
        let refs: Vec<&OutputLayer> = benign.iter().collect();
        let prev = layer(&[0.0, 6.0, 0.0, 0.0]);
        let out = trimmed_mean_attack_model(&refs, &prev, 1.0, 0.0).unwrap();
        assert_eq!(out.params()[0], -1.0);
        assert_eq!(out.params()[1], 5.0);
        let out = trimmed_mean_attack_model(&refs, &prev, 1.0, 1e-6).unwrap();
        assert_eq!(out.params()[1], 5.0 + 1e-6);
        // zero movement counts as upward
        assert_eq!(out.params()[2], -1e-6);
    }

    #[test]
    fn krum_attack_on_identical_models_falls_to_minimum_step() {
        let honest = layer(&[1.0, 2.0, 3.0, 4.0]);
        let benign = vec![&honest; 5];
        let prev = layer(&[0.0, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = AttackParams::default();
        let out = krum_attack_model(&benign, &prev, 5, 4, &params, &mut rng).unwrap();
        assert_eq!(out.lambda, Some(params.lambda_min));
        assert!(!out.accepted);
        assert!(out.model.distance(&honest) <= params.lambda_min * (1.0 + 1e-9));
        assert!(out.model.is_finite());
    }

    #[test]
    fn krum_attack_with_few_benign_models_uses_noise() {
        let honest = layer(&[1.0, 2.0, 3.0, 4.0]);
        let prev = layer(&[0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = krum_attack_model(&[&honest], &prev, 5, 4, &AttackParams::default(), &mut rng).unwrap();
        assert_eq!(out.lambda, None);
        assert!(out.model.same_shape(&honest));
    }

    proptest! {
        #[test]
        fn krum_attack_acceptance_matches_krum(seed in any::<u64>(), benign_count in 2usize..7, copies in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models: Vec<OutputLayer> = (0..benign_count)
                .map(|_| layer(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            let refs: Vec<&OutputLayer> = models.iter().collect();
            let prev = layer(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let b = copies.min(benign_count + copies - 3);
            let out = krum_attack_model(&refs, &prev, copies, b, &AttackParams::default(), &mut rng).unwrap();
            prop_assert!(out.model.is_finite());
            prop_assert!(out.model.same_shape(&models[0]));
            // independent check with the aggregation rule itself
            let mut pool: Vec<(usize, &OutputLayer)> = refs.iter().copied().enumerate().collect();
            for i in 0..copies {
                pool.push((benign_count + i, &out.model));
            }
            let oracle = krum_select(&pool, b).map(|i| i >= benign_count).unwrap_or(false);
            prop_assert_eq!(out.accepted, oracle);
        }

        #[test]
        fn trimmed_mean_attack_leaves_benign_range(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models: Vec<OutputLayer> = (0..n)
                .map(|_| layer(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect();
            let refs: Vec<&OutputLayer> = models.iter().collect();
            let prev = layer(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let out = trimmed_mean_attack_model(&refs, &prev, 1.0, 1e-6).unwrap();
            prop_assert!(out.is_finite());
            for j in 0..6 {
                let lo = models.iter().map(|m| m.params()[j]).fold(f64::INFINITY, f64::min);
                let hi = models.iter().map(|m| m.params()[j]).fold(f64::NEG_INFINITY, f64::max);
                let v = out.params()[j];
                prop_assert!(v < lo || v > hi);
            }
        }
    }
}
