//! Post-unlearning measurements and the success verdict.

use serde::{Deserialize, Serialize};

use crate::data::Subset;
use crate::diffnet::MlpModel;
use crate::error::{Error, Result};
use crate::scalar::{sq_dist, Scalar};
use crate::unlearn::UnlearnOutcome;

pub const DEFAULT_EPSILON: f64 = 0.05;

/// Fraction of argmax-correct predictions; ties go to the lowest class index.
pub fn accuracy<F: Scalar>(model: &MlpModel<F>, split: &Subset<'_, F>) -> Result<F> {
    model.evaluate(split).map(|(_, acc)| acc)
}

pub fn mean_loss<F: Scalar>(model: &MlpModel<F>, split: &Subset<'_, F>) -> Result<F> {
    model.evaluate(split).map(|(loss, _)| loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct LayerDistances<F> {
    /// L2 norm of the weight-and-bias difference of each layer.
    pub per_layer: Vec<F>,
    /// L2 norm of the difference over all parameters.
    pub total: F,
}

fn check_same_spec<F: Scalar>(a: &MlpModel<F>, b: &MlpModel<F>) -> Result<()> {
    if a.spec() != b.spec() {
        return Err(Error::Comparison(format!(
            "models have different architectures: {:?} vs {:?}",
            a.spec().layer_sizes,
            b.spec().layer_sizes
        )));
    }
    Ok(())
}

pub fn layerwise_distance<F: Scalar>(a: &MlpModel<F>, b: &MlpModel<F>) -> Result<LayerDistances<F>> {
    check_same_spec(a, b)?;
    let per_sq: Vec<F> = a
        .layout()
        .iter()
        .map(|slot| sq_dist(&a.params()[slot.range()], &b.params()[slot.range()]))
        .collect();
    let total = per_sq.iter().copied().sum::<F>().sqrt();
    Ok(LayerDistances {
        per_layer: per_sq.into_iter().map(F::sqrt).collect(),
        total,
    })
}

/// Mean over probe rows and hidden layers of the L2 gap between hidden
/// activations. Zero for networks without hidden layers.
pub fn activation_distance<F: Scalar>(a: &MlpModel<F>, b: &MlpModel<F>, probe: &[F]) -> Result<F> {
    check_same_spec(a, b)?;
    let dim = a.spec().input_dim();
    if probe.is_empty() || !probe.len().is_multiple_of(dim) {
        return Err(Error::Argument(format!(
            "probe must be a nonempty row-major matrix with {dim} columns"
        )));
    }
    let hidden = a.spec().depth() - 1;
    if hidden == 0 {
        return Ok(F::zero());
    }
    let mut total = F::zero();
    for x in probe.chunks(dim) {
        let (ta, tb) = (a.forward(x)?, b.forward(x)?);
        for (ha, hb) in ta.activations.iter().zip(&tb.activations) {
            total = total + sq_dist(ha, hb).sqrt();
        }
    }
    Ok(total / F::from_usize_lossy(hidden * probe.len() / dim))
}

/// Probability each sample's true label receives.
pub fn confidences<F: Scalar>(model: &MlpModel<F>, split: &Subset<'_, F>) -> Result<Vec<F>> {
    split.iter().map(|(x, y)| Ok(model.forward(x)?.probs[y])).collect()
}

/// Threshold `tau` maximizing the balanced accuracy of "member iff
/// confidence >= tau", searched over the observed calibration confidences.
/// Ties resolve to the smaller threshold.
pub fn attack_threshold<F: Scalar>(members: &[F], nonmembers: &[F]) -> Result<F> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Argument("membership attack needs nonempty calibration sets".into()));
    }
    let mut candidates: Vec<F> = members.iter().chain(nonmembers).copied().collect();
    candidates.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite confidences"));
    candidates.dedup();
    let mut m_sorted = members.to_vec();
    let mut n_sorted = nonmembers.to_vec();
    m_sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    n_sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let (nm, nn) = (members.len() as f64, nonmembers.len() as f64);
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &tau in &candidates {
        let members_below = m_sorted.partition_point(|&c| c < tau) as f64;
        let nonmembers_below = n_sorted.partition_point(|&c| c < tau) as f64;
        let balanced = 0.5 * ((nm - members_below) / nm + nonmembers_below / nn);
        if balanced > best.0 {
            best = (balanced, tau);
        }
    }
    Ok(best.1)
}

/// Which model's outputs calibrate the attack threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiaCalibration {
    #[default]
    Unlearned,
    Original,
}

/// Fraction of `forget` the attack labels non-member, calibrating and
/// attacking the same model.
pub fn mia_efficacy<F: Scalar>(
    unlearned: &MlpModel<F>,
    forget: &Subset<'_, F>,
    member_cal: &Subset<'_, F>,
    nonmember_cal: &Subset<'_, F>,
) -> Result<F> {
    mia_efficacy_calibrated(unlearned, unlearned, forget, member_cal, nonmember_cal)
}

/// As [`mia_efficacy`], with the threshold taken from `calibration_model`.
pub fn mia_efficacy_calibrated<F: Scalar>(
    calibration_model: &MlpModel<F>,
    attacked: &MlpModel<F>,
    forget: &Subset<'_, F>,
    member_cal: &Subset<'_, F>,
    nonmember_cal: &Subset<'_, F>,
) -> Result<F> {
    if forget.is_empty() {
        return Err(Error::Argument("membership attack needs a nonempty forget set".into()));
    }
    let forget_ids: std::collections::HashSet<usize> = forget.ids().iter().copied().collect();
    if member_cal.ids().iter().chain(nonmember_cal.ids()).any(|id| forget_ids.contains(id)) {
        return Err(Error::Argument("calibration sets overlap the forget set".into()));
    }
    let tau = attack_threshold(
        &confidences(calibration_model, member_cal)?,
        &confidences(calibration_model, nonmember_cal)?,
    )?;
    let below = confidences(attacked, forget)?.into_iter().filter(|&c| c < tau).count();
    Ok(F::from_usize_lossy(below) / F::from_usize_lossy(forget.len()))
}

/// Splits a verdict is measured on. `targets` are the samples whose removal
/// was requested; `forget` may extend them with similar samples.
#[derive(Debug, Clone)]
pub struct EvalSplits<'a, F> {
    pub targets: Subset<'a, F>,
    pub forget: Subset<'a, F>,
    pub retain: Subset<'a, F>,
    pub test: Subset<'a, F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct UnlearnReport<F> {
    pub target_acc: F,
    pub forget_acc: F,
    pub retain_acc: F,
    pub test_acc: F,
    pub forget_loss: F,
    pub retain_loss: F,
    pub test_loss: F,
    pub test_acc_original: F,
    pub retain_loss_original: F,
    pub layer_distances: Vec<F>,
    pub total_param_distance: F,
    pub activation_distance: F,
    pub mia_efficacy: F,
    pub steps_taken: usize,
    pub success: bool,
    pub epsilon: F,
}

impl<F: Scalar> UnlearnReport<F> {
    pub fn test_drop(&self) -> F {
        self.test_acc_original - self.test_acc
    }
}

/// Every target misclassified and test accuracy down by at most `epsilon`.
pub fn is_success<F: Scalar>(target_acc: F, test_acc_original: F, test_acc: F, epsilon: F) -> bool {
    target_acc == F::zero() && test_acc_original - test_acc <= epsilon
}

pub fn verdict<F: Scalar>(
    original: &MlpModel<F>,
    outcome: &UnlearnOutcome<F>,
    splits: &EvalSplits<'_, F>,
    epsilon: F,
    calibration: MiaCalibration,
) -> Result<UnlearnReport<F>> {
    if !(epsilon >= F::zero()) {
        return Err(Error::Config(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let unlearned = &outcome.unlearned;
    let (forget_loss, forget_acc) = unlearned.evaluate(&splits.forget)?;
    let (retain_loss, retain_acc) = unlearned.evaluate(&splits.retain)?;
    let (test_loss, test_acc) = unlearned.evaluate(&splits.test)?;
    let target_acc = accuracy(unlearned, &splits.targets)?;
    let (retain_loss_original, _) = original.evaluate(&splits.retain)?;
    let test_acc_original = accuracy(original, &splits.test)?;
    let distances = layerwise_distance(original, unlearned)?;
    let probe: Vec<F> = splits.test.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let calibration_model = match calibration {
        MiaCalibration::Unlearned => unlearned,
        MiaCalibration::Original => original,
    };
    let mia = mia_efficacy_calibrated(calibration_model, unlearned, &splits.forget, &splits.retain, &splits.test)?;
    Ok(UnlearnReport {
        target_acc,
        forget_acc,
        retain_acc,
        test_acc,
        forget_loss,
        retain_loss,
        test_loss,
        test_acc_original,
        retain_loss_original,
        layer_distances: distances.per_layer,
        total_param_distance: distances.total,
        activation_distance: activation_distance(original, unlearned, &probe)?,
        mia_efficacy: mia,
        steps_taken: outcome.steps_taken,
        success: is_success(target_acc, test_acc_original, test_acc, epsilon),
        epsilon,
    })
}
