//! Global rank allocation: per-layer singular scores of the whitened weight,
//! benefit-cost ranking, and greedy budgeted selection.

use crate::error::{Error, Result};
use crate::linalg::{svd_role, Matrix};
use crate::netcore::{Layer, SequentialModel};

/// Per-layer retained ranks under a global parameter budget.
#[derive(Debug, Clone, PartialEq)]
pub struct RankPlan {
    pub ranks: Vec<usize>,
    /// Target compression ratio in (0, 1].
    pub eta: f64,
    /// Parameter budget `B = floor(eta * total linear parameters)`.
    pub budget: usize,
    /// Parameters actually spent, `sum_l k_l * (d_out + d_in)`.
    pub spent: usize,
    /// Candidates skipped because they would have exceeded the budget.
    pub skipped_components: usize,
}

/// Sorted squared singular values and the unit retention cost of one layer.
#[derive(Debug, Clone)]
pub struct LayerScores {
    /// `sigma^2`, nonincreasing.
    pub sigma_sq: Vec<f64>,
    /// Cost of retaining one more component: `d_out + d_in`.
    pub unit_cost: usize,
}

/// Score table over all layers, in layer order.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub layers: Vec<LayerScores>,
}

impl ScoreTable {
    pub fn total_sigma_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.sigma_sq.iter().sum::<f64>())
            .sum()
    }
}

/// Squared singular values of `fisher_factor * weight * clean_factor`,
/// descending. `fisher_factor` is the whitening matrix of the layer's Fisher
/// matrix, `clean_factor` the factor of the clean input covariance.
pub fn layer_scores(
    fisher_factor: &Matrix,
    weight: &Matrix,
    clean_factor: &Matrix,
) -> Result<Vec<f64>> {
    if fisher_factor.rows() != fisher_factor.cols() || fisher_factor.cols() != weight.rows() {
        return Err(Error::Contract(format!(
            "fisher factor {}x{} does not chain with weight {}x{}",
            fisher_factor.rows(),
            fisher_factor.cols(),
            weight.rows(),
            weight.cols()
        )));
    }
    if clean_factor.rows() != clean_factor.cols() || weight.cols() != clean_factor.rows() {
        return Err(Error::Contract(format!(
            "weight {}x{} does not chain with clean factor {}x{}",
            weight.rows(),
            weight.cols(),
            clean_factor.rows(),
            clean_factor.cols()
        )));
    }
    let product = fisher_factor.matmul(weight).matmul(clean_factor);
    let dec = svd_role(&product, "score matrix")?;
    Ok(dec.singular_values.iter().map(|s| s * s).collect())
}

/// Global parameter budget `floor(eta * sum_l d_out*d_in)`, biases excluded.
pub fn budget(eta: f64, model: &SequentialModel) -> Result<usize> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Config(format!("ratio {eta} must be in (0, 1]")));
    }
    let total: usize = model
        .layers()
        .iter()
        .map(|l| l.d_out() * l.d_in())
        .sum();
    Ok((eta * total as f64).floor() as usize)
}

/// Greedy budgeted selection: merge all `(sigma^2 / P, layer)` candidates,
/// sort descending (ties broken by lower layer then lower component index),
/// and retain each candidate whose unit cost still fits the budget.
/// Unaffordable candidates are skipped and scanning continues.
pub fn greedy_allocate(scores: &ScoreTable, budget: usize, eta: f64) -> RankPlan {
    struct Candidate {
        efficiency: f64,
        layer: usize,
        component: usize,
    }
    let mut pool = Vec::new();
    for (li, layer) in scores.layers.iter().enumerate() {
        for (ci, &s2) in layer.sigma_sq.iter().enumerate() {
            pool.push(Candidate {
                efficiency: s2 / layer.unit_cost as f64,
                layer: li,
                component: ci,
            });
        }
    }
    pool.sort_by(|a, b| {
        b.efficiency
            .partial_cmp(&a.efficiency)
            .expect("finite efficiencies")
            .then(a.layer.cmp(&b.layer))
            .then(a.component.cmp(&b.component))
    });

    let mut ranks = vec![0usize; scores.layers.len()];
    let mut spent = 0usize;
    let mut skipped = 0usize;
    for c in pool {
        let cost = scores.layers[c.layer].unit_cost;
        if spent + cost <= budget {
            ranks[c.layer] += 1;
            spent += cost;
        } else {
            skipped += 1;
        }
    }
    RankPlan {
        ranks,
        eta,
        budget,
        spent,
        skipped_components: skipped,
    }
}

/// Per-layer line of [`plan_summary`].
#[derive(Debug, Clone)]
pub struct PlanLayerSummary {
    pub layer: usize,
    pub rank: usize,
    pub dense_params: usize,
    pub factored_params: usize,
    pub retained_sigma_sq: f64,
    pub dropped_sigma_sq: f64,
}

/// Accounting of a rank plan: per-layer counts and retained/dropped score
/// mass. The dropped mass is the predicted loss degradation.
#[derive(Debug, Clone)]
pub struct PlanSummary {
    pub layers: Vec<PlanLayerSummary>,
    pub total_dense_params: usize,
    pub total_factored_params: usize,
    pub total_retained_sigma_sq: f64,
    pub total_dropped_sigma_sq: f64,
}

pub fn plan_summary(
    plan: &RankPlan,
    scores: &ScoreTable,
    model: &SequentialModel,
) -> Result<PlanSummary> {
    if plan.ranks.len() != model.num_layers() || scores.layers.len() != model.num_layers() {
        return Err(Error::Contract(
            "plan, scores and model disagree on the layer count".into(),
        ));
    }
    let mut layers = Vec::with_capacity(plan.ranks.len());
    let mut totals = (0usize, 0usize, 0.0f64, 0.0f64);
    for (li, layer) in model.layers().iter().enumerate() {
        let k = plan.ranks[li];
        let dense = layer.d_out() * layer.d_in();
        let factored = k * (layer.d_out() + layer.d_in());
        let retained: f64 = scores.layers[li].sigma_sq.iter().take(k).sum();
        let dropped: f64 = scores.layers[li].sigma_sq.iter().skip(k).sum();
        totals.0 += dense;
        totals.1 += factored;
        totals.2 += retained;
        totals.3 += dropped;
        layers.push(PlanLayerSummary {
            layer: li,
            rank: k,
            dense_params: dense,
            factored_params: factored,
            retained_sigma_sq: retained,
            dropped_sigma_sq: dropped,
        });
    }
    Ok(PlanSummary {
        layers,
        total_dense_params: totals.0,
        total_factored_params: totals.1,
        total_retained_sigma_sq: totals.2,
        total_dropped_sigma_sq: totals.3,
    })
}

/// Candidate ranks per layer are capped by `min(d_out, d_in)`.
pub fn max_rank(layer: &Layer) -> usize {
    layer.d_out().min(layer.d_in())
}
