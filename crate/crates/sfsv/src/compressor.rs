//! Per-layer loss-aware low-rank solver and the sequential whole-model
//! compression pipeline with error propagation.
//!
//! A layer with weight `W` is compressed by whitening with the Fisher factor
//! on the output side and the blended covariance factor on the input side,
//! truncating in the whitened space (where rank-k truncation is optimal for
//! the quadratic loss model), and mapping the factors back.

use crate::calibration::{
    accumulate_pair_stats, accumulate_pair_stats_grouped, BalancedStats, LayerStats, PairStats,
};
use crate::error::{Error, Result};
use crate::fields::Sample;
use crate::linalg::{
    factor_spd_role, solve_factor, truncated_svd, FactorMode, FactorResult, Matrix, SolveSide,
    DEFAULT_JITTER_SCHEDULE,
};
use crate::losses::LossConfig;
use crate::netcore::{
    forward_input_to, replace_layer, FactoredLayer, Layer, SequentialModel,
};
use crate::allocation::RankPlan;

/// Whether layer sensitivity uses the Fisher matrix or an identity proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMode {
    Fisher,
    Identity,
}

impl FisherMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FisherMode::Fisher => "fisher",
            FisherMode::Identity => "identity",
        }
    }
}

/// Pipeline configuration.
#[derive(Debug, Clone)]
pub struct CompressionConfig {
    /// Blend between the intra-layer term (weight `1 - alpha`) and the
    /// propagated term (weight `alpha`).
    pub alpha: f64,
    pub fisher_mode: FisherMode,
    /// Use trace-balanced statistics for whitening and reconstruction.
    pub balance: bool,
    /// Target compression ratio, recorded in reports.
    pub eta: f64,
    pub loss_cfg: LossConfig,
    pub jitter_schedule: Vec<f64>,
}

impl CompressionConfig {
    pub fn new(loss_cfg: LossConfig) -> Self {
        Self {
            alpha: 0.7,
            fisher_mode: FisherMode::Fisher,
            balance: false,
            eta: 1.0,
            loss_cfg,
            jitter_schedule: DEFAULT_JITTER_SCHEDULE.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} must be in [0, 1]",
                self.alpha
            )));
        }
        self.loss_cfg.validate()
    }
}

/// Inputs of the single-layer solve.
pub struct LayerSolveInputs<'a> {
    /// Original dense weight, `d_out x d_in`.
    pub weight: &'a Matrix,
    /// Factor of the (balanced) Fisher matrix, order `d_out`.
    pub fisher_factor: &'a FactorResult,
    /// Blended covariance `(1-alpha) Sigma_XX + alpha Sigma_X'X`; asymmetric
    /// in general and used transposed, never symmetrized.
    pub sigma_cov: &'a Matrix,
    /// Factor of `(1-alpha) Sigma_XX + alpha Sigma_X'X'`, order `d_in`.
    pub clean_cov_factor: &'a FactorResult,
    pub rank: usize,
}

/// Solve the whitened regression and return the back-mapped factors
/// `(left, right)` with `W' = left * right`, singular values split as square
/// roots between the two.
pub fn solve_layer_factors(inputs: &LayerSolveInputs) -> Result<(Matrix, Matrix)> {
    let w = inputs.weight;
    let (d_out, d_in) = (w.rows(), w.cols());
    if inputs.fisher_factor.order() != d_out {
        return Err(Error::Contract(format!(
            "fisher factor order {} does not match output dim {d_out}",
            inputs.fisher_factor.order()
        )));
    }
    if inputs.sigma_cov.rows() != d_in || inputs.sigma_cov.cols() != d_in {
        return Err(Error::Contract(format!(
            "sigma_cov is {}x{}, expected {d_in}x{d_in}",
            inputs.sigma_cov.rows(),
            inputs.sigma_cov.cols()
        )));
    }
    if inputs.clean_cov_factor.order() != d_in {
        return Err(Error::Contract(format!(
            "covariance factor order {} does not match input dim {d_in}",
            inputs.clean_cov_factor.order()
        )));
    }
    if inputs.rank > d_out.min(d_in) {
        return Err(Error::Contract(format!(
            "rank {} exceeds min dim {}",
            inputs.rank,
            d_out.min(d_in)
        )));
    }
    if inputs.rank == 0 {
        return Ok((Matrix::zeros(d_out, 0), Matrix::zeros(0, d_in)));
    }

    let whitener = inputs.fisher_factor.whitener();
    // M* = G W Sigma_cov^T R^{-T}, computed by triangular/pseudo solves.
    let gws = whitener.matmul(w).matmul(&inputs.sigma_cov.transpose());
    let m_star = solve_factor(
        inputs.clean_cov_factor,
        &gws,
        SolveSide::RightInverseTranspose,
    )?;
    let (a, b) = truncated_svd(&m_star, inputs.rank)?;
    // W' = G^{-1} (A B) R^{-1}
    let left = solve_factor(inputs.fisher_factor, &a, SolveSide::LeftInverseTranspose)?;
    let right = solve_factor(inputs.clean_cov_factor, &b, SolveSide::RightInverse)?;
    Ok((left, right))
}

/// [`solve_layer_factors`] wrapped into a layer, copying bias and activation
/// from the source layer.
pub fn compress_layer(inputs: &LayerSolveInputs, source: &Layer) -> Result<FactoredLayer> {
    let (left, right) = solve_layer_factors(inputs)?;
    FactoredLayer::new(left, right, source.bias().to_vec(), source.activation())
}

/// Clean statistics driving the pipeline: plain pooled per-layer statistics
/// or trace-balanced ones.
pub enum PipelineStats {
    Plain(Vec<LayerStats>),
    Balanced(BalancedStats),
}

impl PipelineStats {
    fn num_layers(&self) -> usize {
        match self {
            PipelineStats::Plain(v) => v.len(),
            PipelineStats::Balanced(b) => b.layers.len(),
        }
    }

    fn sigma_xx(&self, layer: usize) -> &Matrix {
        match self {
            PipelineStats::Plain(v) => &v[layer].sigma_xx,
            PipelineStats::Balanced(b) => &b.layers[layer].sigma_xx,
        }
    }

    fn fisher_z(&self, layer: usize) -> &Matrix {
        match self {
            PipelineStats::Plain(v) => &v[layer].fisher_z,
            PipelineStats::Balanced(b) => &b.layers[layer].fisher_z,
        }
    }
}

/// Empirical value of the blended objective at one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    /// Mean `||G (W X - W' X)||^2` over the samples (clean inputs).
    pub intra: f64,
    /// Mean `||G (W X - W' X')||^2` with `X'` from the compressed prefix.
    pub propagated: f64,
    /// `(1 - alpha) * intra + alpha * propagated`.
    pub total: f64,
}

/// Sample-average objective of layer `layer_index` for the pair
/// (original model, current model). `W` comes from the original layer, `W'`
/// from the current one; `X` and `X'` are the activations entering the layer
/// in the respective models.
pub fn empirical_objective(
    orig: &SequentialModel,
    current: &SequentialModel,
    layer_index: usize,
    whitener: &Matrix,
    alpha: f64,
    samples: &[Sample],
) -> Result<ObjectiveValue> {
    if samples.is_empty() {
        return Err(Error::Contract("empirical objective over no samples".into()));
    }
    let orig_layer = orig.layer(layer_index);
    let cur_layer = current.layer(layer_index);
    let mut intra = 0.0;
    let mut propagated = 0.0;
    for sample in samples {
        let x = forward_input_to(orig, sample.input.as_flat(), layer_index)?;
        let xp = forward_input_to(current, sample.input.as_flat(), layer_index)?;
        let wx = orig_layer.linear_map(&x);
        let wpx = cur_layer.linear_map(&x);
        let wpxp = cur_layer.linear_map(&xp);
        let d1: Vec<f64> = wx.iter().zip(&wpx).map(|(a, b)| a - b).collect();
        let d2: Vec<f64> = wx.iter().zip(&wpxp).map(|(a, b)| a - b).collect();
        intra += norm_sq(&whitener.mul_vec(&d1));
        propagated += norm_sq(&whitener.mul_vec(&d2));
    }
    let n = samples.len() as f64;
    intra /= n;
    propagated /= n;
    Ok(ObjectiveValue {
        intra,
        propagated,
        total: (1.0 - alpha) * intra + alpha * propagated,
    })
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// The variable part of the trace-form objective
/// `-2 Tr(G W' S_cov W^T G^T) + Tr(G W' S_ccov W'^T G^T)`; equal to the
/// empirical blended objective up to a constant independent of `W'`.
pub fn trace_objective(
    whitener: &Matrix,
    w: &Matrix,
    w_prime: &Matrix,
    sigma_cov: &Matrix,
    sigma_c_cov: &Matrix,
) -> f64 {
    let gwp = whitener.matmul(w_prime);
    let gw = whitener.matmul(w);
    let cross = gwp.matmul(sigma_cov).matmul(&gw.transpose());
    let quad = gwp.matmul(sigma_c_cov).matmul(&gwp.transpose());
    -2.0 * cross.trace() + quad.trace()
}

/// Per-layer record of a pipeline run.
#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: usize,
    pub rank: usize,
    pub objective_before: ObjectiveValue,
    pub objective_after: ObjectiveValue,
    pub fisher_mode: FactorMode,
    pub fisher_jitter: f64,
    pub cov_mode: FactorMode,
    pub cov_jitter: f64,
}

/// Structured report of one compression run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub alpha: f64,
    pub eta: f64,
    pub fisher: FisherMode,
    pub balanced: bool,
    pub layers: Vec<LayerReport>,
}

impl RunReport {
    /// True when any factorization fell back to the eigendecomposition.
    pub fn any_evd_fallback(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.fisher_mode == FactorMode::EvdFallback || l.cov_mode == FactorMode::EvdFallback)
    }
}

fn blend_pair_stats(
    stats: &PipelineStats,
    layer: usize,
    groups: &[(String, PairStats)],
) -> Result<(Matrix, Matrix)> {
    match stats {
        PipelineStats::Plain(_) => {
            // sample-weighted pooled mean
            let total: usize = groups.iter().map(|(_, p)| p.n_samples).sum();
            let d = groups[0].1.sigma_xpx.rows();
            let mut xpx = Matrix::zeros(d, d);
            let mut xpxp = Matrix::zeros(d, d);
            for (_, p) in groups {
                let w = p.n_samples as f64 / total as f64;
                xpx = xpx.add_scaled(&p.sigma_xpx, w);
                xpxp = xpxp.add_scaled(&p.sigma_xpxp, w);
            }
            Ok((xpx, xpxp))
        }
        PipelineStats::Balanced(bal) => {
            // the clean-covariance scales are reused for the perturbed
            // statistics, which live in the same input space
            let d = groups[0].1.sigma_xpx.rows();
            let count = groups.len() as f64;
            let mut xpx = Matrix::zeros(d, d);
            let mut xpxp = Matrix::zeros(d, d);
            for (tag, p) in groups {
                let s = bal.sigma_scale(layer, tag).ok_or_else(|| {
                    Error::Contract(format!(
                        "no balancing scale recorded for layer {layer}, tag '{tag}'"
                    ))
                })?;
                xpx = xpx.add_scaled(&p.sigma_xpx, s / count);
                xpxp = xpxp.add_scaled(&p.sigma_xpxp, s / count);
            }
            Ok((xpx, xpxp))
        }
    }
}

/// Sequential whole-model compression. Iterates layers first to last; each
/// layer is solved against pair statistics accumulated on the current
/// partially compressed model, then replaced. Fisher factors are computed
/// once from the original model's statistics and reused at every layer.
pub fn compress_model(
    model: &SequentialModel,
    stats: &PipelineStats,
    samples: &[Sample],
    plan: &RankPlan,
    cfg: &CompressionConfig,
) -> Result<(SequentialModel, RunReport)> {
    cfg.validate()?;
    let n = model.num_layers();
    if plan.ranks.len() != n {
        return Err(Error::Contract(format!(
            "plan covers {} layers, model has {n}",
            plan.ranks.len()
        )));
    }
    if stats.num_layers() != n {
        return Err(Error::Contract(format!(
            "statistics cover {} layers, model has {n}",
            stats.num_layers()
        )));
    }
    if model
        .layers()
        .iter()
        .any(|l| !matches!(l, Layer::Dense(_)))
    {
        return Err(Error::Contract(
            "compression expects an uncompressed dense model".into(),
        ));
    }

    // Fisher factors, once per layer from the original statistics.
    let fisher_factors: Vec<FactorResult> = (0..n)
        .map(|i| match cfg.fisher_mode {
            FisherMode::Identity => Ok(FactorResult::identity(model.layer(i).d_out())),
            FisherMode::Fisher => factor_spd_role(
                stats.fisher_z(i),
                &cfg.jitter_schedule,
                &format!("fisher matrix (layer {i})"),
            ),
        })
        .collect::<Result<_>>()?;

    let mut current = model.clone();
    let mut layer_reports = Vec::with_capacity(n);
    for i in 0..n {
        let step = |e: Error| Error::Contract(format!("layer {i}: {e}"));
        let k = plan.ranks[i];
        let layer = model.layer(i);
        if k > layer.d_out().min(layer.d_in()) {
            return Err(Error::Contract(format!(
                "layer {i}: plan rank {k} exceeds min dim {}",
                layer.d_out().min(layer.d_in())
            )));
        }

        let groups = accumulate_pair_stats_grouped(model, &current, samples, i)?;
        let (xpx, xpxp) = blend_pair_stats(stats, i, &groups)?;
        let sigma_xx = stats.sigma_xx(i);
        let sigma_cov = sigma_xx.scale(1.0 - cfg.alpha).add_scaled(&xpx, cfg.alpha);
        let sigma_c_cov = sigma_xx
            .scale(1.0 - cfg.alpha)
            .add_scaled(&xpxp, cfg.alpha);

        let cov_factor = factor_spd_role(
            &sigma_c_cov,
            &cfg.jitter_schedule,
            &format!("blended covariance (layer {i})"),
        )?;
        let fisher_factor = &fisher_factors[i];
        let whitener = fisher_factor.whitener();

        let before = empirical_objective(model, &current, i, &whitener, cfg.alpha, samples)?;

        let weight = layer.dense_weight();
        let inputs = LayerSolveInputs {
            weight: &weight,
            fisher_factor,
            sigma_cov: &sigma_cov,
            clean_cov_factor: &cov_factor,
            rank: k,
        };
        let factored = compress_layer(&inputs, layer).map_err(step)?;
        current = replace_layer(&current, i, factored)?;

        let after = empirical_objective(model, &current, i, &whitener, cfg.alpha, samples)?;
        layer_reports.push(LayerReport {
            layer: i,
            rank: k,
            objective_before: before,
            objective_after: after,
            fisher_mode: fisher_factor.mode,
            fisher_jitter: fisher_factor.jitter_used,
            cov_mode: cov_factor.mode,
            cov_jitter: cov_factor.jitter_used,
        });
    }
    Ok((
        current,
        RunReport {
            alpha: cfg.alpha,
            eta: plan.eta,
            fisher: cfg.fisher_mode,
            balanced: cfg.balance,
            layers: layer_reports,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::accumulate_clean_stats;
    use crate::fields::{gen_grf, DatasetFile, GridDims};
    use crate::linalg::{factor_spd, svd};
    use crate::losses::{BaseKind, LossConfig};
    use crate::netcore::{forward_output, Activation, LinearLayer};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ident_factor(n: usize) -> FactorResult {
        FactorResult::identity(n)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn toy_model(seed: u64, dims: &[usize]) -> SequentialModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = Matrix::from_fn(w[1], w[0], |_, _| {
                    (rng.random::<f64>() * 2.0 - 1.0) / (w[0] as f64).sqrt()
                });
                let bias: Vec<f64> = (0..w[1]).map(|_| 0.05 * rng.random::<f64>()).collect();
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Tanh
                };
                Layer::Dense(LinearLayer::new(weight, Some(bias), act).unwrap())
            })
            .collect();
        SequentialModel::new(layers).unwrap()
    }

    fn toy_dataset(seed: u64, n: usize, width: usize) -> DatasetFile {
        let d = GridDims::new(1, 1, width, 1.0 / width as f64).unwrap();
        let samples = (0..n)
            .map(|i| crate::fields::Sample {
                input: gen_grf(seed + i as u64, d, 6, 0.7).unwrap(),
                target: gen_grf(seed + 5000 + i as u64, d, 6, 0.7).unwrap(),
                tag: "main".into(),
            })
            .collect();
        DatasetFile::new(d, vec!["main".into()], samples).unwrap()
    }

    fn plan_of(ranks: Vec<usize>) -> RankPlan {
        RankPlan {
            spent: 0,
            budget: 0,
            eta: 1.0,
            skipped_components: 0,
            ranks,
        }
    }

    #[test]
    fn identity_whitening_full_rank_recovers_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_matrix(&mut rng, 4, 3);
        let inputs = LayerSolveInputs {
            weight: &w,
            fisher_factor: &ident_factor(4),
            sigma_cov: &Matrix::identity(3),
            clean_cov_factor: &ident_factor(3),
            rank: 3,
        };
        let (l, r) = solve_layer_factors(&inputs).unwrap();
        assert!(l.matmul(&r).max_abs_diff(&w) < 1e-8);
    }

    #[test]
    fn identity_whitening_reduces_to_plain_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_matrix(&mut rng, 5, 4);
        for k in 1..=4usize {
            let inputs = LayerSolveInputs {
                weight: &w,
                fisher_factor: &ident_factor(5),
                sigma_cov: &Matrix::identity(4),
                clean_cov_factor: &ident_factor(4),
                rank: k,
            };
            let (l, r) = solve_layer_factors(&inputs).unwrap();
            let (tl, tr) = truncated_svd(&w, k).unwrap();
            assert!(l.matmul(&r).max_abs_diff(&tl.matmul(&tr)) < 1e-8);
        }
    }

    #[test]
    fn fisher_weighting_keeps_loss_sensitive_component() {
        // W = diag(3,1), fisher factor diag(1,10), identity covariance,
        // k = 1: the sensitive small-weight component survives.
        let w = Matrix::diag(&[3.0, 1.0]);
        let fisher = FactorResult {
            factor: Matrix::diag(&[1.0, 10.0]),
            mode: FactorMode::Cholesky,
            jitter_used: 0.0,
        };
        let inputs = LayerSolveInputs {
            weight: &w,
            fisher_factor: &fisher,
            sigma_cov: &Matrix::identity(2),
            clean_cov_factor: &ident_factor(2),
            rank: 1,
        };
        let (l, r) = solve_layer_factors(&inputs).unwrap();
        let w_prime = l.matmul(&r);
        assert!(w_prime.max_abs_diff(&Matrix::diag(&[0.0, 1.0])) < 1e-10);

        // objective-evaluation oracle over both diagonal rank-1 candidates
        let whitener = fisher.whitener();
        let ident = Matrix::identity(2);
        let keep_big = Matrix::diag(&[3.0, 0.0]);
        let keep_small = Matrix::diag(&[0.0, 1.0]);
        let j_big = trace_objective(&whitener, &w, &keep_big, &ident, &ident);
        let j_small = trace_objective(&whitener, &w, &keep_small, &ident, &ident);
        assert!(j_small < j_big);
        let j_solved = trace_objective(&whitener, &w, &w_prime, &ident, &ident);
        assert!(j_solved <= j_small + 1e-10);
    }

    #[test]
    fn rank_zero_gives_zero_map() {
        let w = Matrix::diag(&[1.0, 2.0]);
        let inputs = LayerSolveInputs {
            weight: &w,
            fisher_factor: &ident_factor(2),
            sigma_cov: &Matrix::identity(2),
            clean_cov_factor: &ident_factor(2),
            rank: 0,
        };
        let (l, r) = solve_layer_factors(&inputs).unwrap();
        assert_eq!(l.cols(), 0);
        assert_eq!(r.rows(), 0);
    }

    #[test]
    fn whitened_truncation_beats_random_alternatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random_matrix(&mut rng, 4, 4);
        let b = random_matrix(&mut rng, 4, 4);
        let sigma = b.matmul(&b.transpose()).add(&Matrix::identity(4));
        let fb = random_matrix(&mut rng, 4, 4);
        let fisher = fb.matmul(&fb.transpose()).add(&Matrix::identity(4));
        let fisher_factor = factor_spd(&fisher, &DEFAULT_JITTER_SCHEDULE).unwrap();
        let cov_factor = factor_spd(&sigma, &DEFAULT_JITTER_SCHEDULE).unwrap();
        let whitener = fisher_factor.whitener();
        let inputs = LayerSolveInputs {
            weight: &w,
            fisher_factor: &fisher_factor,
            sigma_cov: &sigma,
            clean_cov_factor: &cov_factor,
            rank: 2,
        };
        let (l, r) = solve_layer_factors(&inputs).unwrap();
        let solved = trace_objective(&whitener, &w, &l.matmul(&r), &sigma, &sigma);
        for _ in 0..300 {
            let rl = random_matrix(&mut rng, 4, 2);
            let rr = random_matrix(&mut rng, 2, 4);
            let alt = trace_objective(&whitener, &w, &rl.matmul(&rr), &sigma, &sigma);
            assert!(solved <= alt + 1e-9, "alternative beat solver");
        }
    }

    #[test]
    fn objective_monotone_in_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_matrix(&mut rng, 5, 5);
        let b = random_matrix(&mut rng, 5, 5);
        let sigma = b.matmul(&b.transpose()).add(&Matrix::identity(5));
        let cov_factor = factor_spd(&sigma, &DEFAULT_JITTER_SCHEDULE).unwrap();
        let whitener = Matrix::identity(5);
        let mut last = f64::INFINITY;
        for k in 1..=5usize {
            let inputs = LayerSolveInputs {
                weight: &w,
                fisher_factor: &ident_factor(5),
                sigma_cov: &sigma,
                clean_cov_factor: &cov_factor,
                rank: k,
            };
            let (l, r) = solve_layer_factors(&inputs).unwrap();
            let j = trace_objective(&whitener, &w, &l.matmul(&r), &sigma, &sigma);
            assert!(j <= last + 1e-10, "objective rose from {last} to {j} at k={k}");
            last = j;
        }
    }

    #[test]
    fn full_rank_plan_is_end_to_end_identity() {
        let model = toy_model(3, &[8, 6, 8]);
        let ds = toy_dataset(100, 24, 8);
        let cfg = CompressionConfig::new(LossConfig::base_only(BaseKind::Mse));
        let stats = accumulate_clean_stats(&model, &ds, &cfg.loss_cfg).unwrap();
        let pooled = stats.pooled().unwrap();
        let ranks: Vec<usize> = model
            .layers()
            .iter()
            .map(|l| l.d_out().min(l.d_in()))
            .collect();
        let (compressed, report) = compress_model(
            &model,
            &PipelineStats::Plain(pooled),
            &ds.samples,
            &plan_of(ranks),
            &cfg,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for s in &ds.samples {
            let a = forward_output(&model, s.input.as_flat()).unwrap();
            let b = forward_output(&compressed, s.input.as_flat()).unwrap();
            for (u, v) in a.iter().zip(&b) {
                worst = worst.max((u - v).abs());
            }
        }
        assert!(worst <= 1e-8, "max deviation {worst}");
        for l in &report.layers {
            assert!(l.objective_after.total <= 1e-10);
        }
    }

    #[test]
    fn alpha_zero_is_prefix_independent() {
        let model = toy_model(5, &[6, 6, 6]);
        let ds = toy_dataset(200, 18, 6);
        let mut cfg = CompressionConfig::new(LossConfig::base_only(BaseKind::Mse));
        cfg.alpha = 0.0;
        let stats = accumulate_clean_stats(&model, &ds, &cfg.loss_cfg).unwrap();
        let pooled = stats.pooled().unwrap();
        let (compressed, _) = compress_model(
            &model,
            &PipelineStats::Plain(pooled.clone()),
            &ds.samples,
            &plan_of(vec![3, 3, 3]),
            &cfg,
        )
        .unwrap();

        // isolated per-layer solves from clean statistics only
        for i in 0..model.num_layers() {
            let layer = model.layer(i);
            let weight = layer.dense_weight();
            let cov_factor = factor_spd(&pooled[i].sigma_xx, &cfg.jitter_schedule).unwrap();
            let fisher_factor =
                factor_spd(&pooled[i].fisher_z, &cfg.jitter_schedule).unwrap();
            let inputs = LayerSolveInputs {
                weight: &weight,
                fisher_factor: &fisher_factor,
                sigma_cov: &pooled[i].sigma_xx,
                clean_cov_factor: &cov_factor,
                rank: 3,
            };
            let (l, r) = solve_layer_factors(&inputs).unwrap();
            let isolated = l.matmul(&r);
            let in_pipeline = compressed.layer(i).dense_weight();
            assert!(
                isolated.max_abs_diff(&in_pipeline) <= 1e-10,
                "layer {i} differs"
            );
        }
    }

    #[test]
    fn base_model_matches_naive_direct_implementation() {
        // identity fisher, alpha = 0.5: minimizer of
        // E[||WX - W'X||^2 + ||WX - W'X'||^2] via explicit inverses
        let model = toy_model(7, &[6, 5, 6]);
        let ds = toy_dataset(300, 20, 6);
        let mut cfg = CompressionConfig::new(LossConfig::base_only(BaseKind::Mse));
        cfg.alpha = 0.5;
        cfg.fisher_mode = FisherMode::Identity;
        cfg.jitter_schedule = vec![0.0];
        let stats = accumulate_clean_stats(&model, &ds, &cfg.loss_cfg).unwrap();
        let pooled = stats.pooled().unwrap();
        let ranks = vec![3, 3];
        let (compressed, _) = compress_model(
            &model,
            &PipelineStats::Plain(pooled.clone()),
            &ds.samples,
            &plan_of(ranks.clone()),
            &cfg,
        )
        .unwrap();

        // naive re-implementation, sequential over layers
        let mut current = model.clone();
        for i in 0..model.num_layers() {
            let pair = accumulate_pair_stats(&model, &current, &ds.samples, i).unwrap();
            let sigma_cov = pooled[i].sigma_xx.scale(0.5).add_scaled(&pair.sigma_xpx, 0.5);
            let sigma_c_cov = pooled[i]
                .sigma_xx
                .scale(0.5)
                .add_scaled(&pair.sigma_xpxp, 0.5);
            // explicit inverse route
            let na = nalgebra::DMatrix::from_row_slice(
                sigma_c_cov.rows(),
                sigma_c_cov.cols(),
                sigma_c_cov.data(),
            );
            let chol = nalgebra::linalg::Cholesky::new(na).unwrap();
            let r_mat = Matrix::from_fn(sigma_c_cov.rows(), sigma_c_cov.cols(), |a, b| {
                chol.l()[(a, b)]
            });
            let r_inv_t = Matrix::from_fn(r_mat.rows(), r_mat.cols(), |a, b| {
                let inv = chol.l().try_inverse().unwrap();
                inv[(b, a)]
            });
            let w = model.layer(i).dense_weight();
            let m_star = w.matmul(&sigma_cov.transpose()).matmul(&r_inv_t);
            let (a, b) = truncated_svd(&m_star, ranks[i]).unwrap();
            let r_inv = Matrix::from_fn(r_mat.rows(), r_mat.cols(), |x, y| {
                let inv = chol.l().try_inverse().unwrap();
                inv[(x, y)]
            });
            let right = b.matmul(&r_inv);
            let factored = FactoredLayer::new(
                a,
                right,
                model.layer(i).bias().to_vec(),
                model.layer(i).activation(),
            )
            .unwrap();
            current = replace_layer(&current, i, factored).unwrap();
        }
        for i in 0..model.num_layers() {
            let a = compressed.layer(i).dense_weight();
            let b = current.layer(i).dense_weight();
            assert!(
                a.max_abs_diff(&b) <= 1e-8 * a.max_abs().max(1.0),
                "layer {i} differs by {}",
                a.max_abs_diff(&b)
            );
        }
    }

    #[test]
    fn empirical_objective_zero_for_identical_models() {
        let model = toy_model(11, &[6, 6]);
        let ds = toy_dataset(400, 6, 6);
        let obj = empirical_objective(
            &model,
            &model,
            0,
            &Matrix::identity(6),
            0.7,
            &ds.samples,
        )
        .unwrap();
        assert_eq!(obj.intra, 0.0);
        assert_eq!(obj.propagated, 0.0);
        assert_eq!(obj.total, 0.0);
    }

    #[test]
    fn empirical_objective_matches_trace_identity() {
        // sample form and trace form agree once the same empirical
        // covariances enter both
        let model = toy_model(13, &[6, 6]);
        let ds = toy_dataset(500, 16, 6);
        let cfg = LossConfig::base_only(BaseKind::Mse);
        let stats = accumulate_clean_stats(&model, &ds, &cfg).unwrap();
        let pooled = stats.pooled().unwrap();
        let alpha = 0.7;

        // candidate compressed layer
        let w = model.layer(0).dense_weight();
        let (l, r) = truncated_svd(&w, 3).unwrap();
        let candidate = replace_layer(
            &model,
            0,
            FactoredLayer::new(l, r, model.layer(0).bias().to_vec(), model.layer(0).activation())
                .unwrap(),
        )
        .unwrap();

        let whitener = Matrix::identity(6);
        let emp = empirical_objective(&model, &candidate, 0, &whitener, alpha, &ds.samples).unwrap();

        let w_prime = candidate.layer(0).dense_weight();
        let pair = accumulate_pair_stats(&model, &candidate, &ds.samples, 0).unwrap();
        let sigma_cov = pooled[0]
            .sigma_xx
            .scale(1.0 - alpha)
            .add_scaled(&pair.sigma_xpx, alpha);
        let sigma_c_cov = pooled[0]
            .sigma_xx
            .scale(1.0 - alpha)
            .add_scaled(&pair.sigma_xpxp, alpha);
        let var = trace_objective(&whitener, &w, &w_prime, &sigma_cov, &sigma_c_cov);
        let konst = whitener
            .matmul(&w)
            .matmul(&pooled[0].sigma_xx)
            .matmul(&w.transpose())
            .matmul(&whitener.transpose())
            .trace();
        let total_from_trace = var + konst;
        assert!(
            (emp.total - total_from_trace).abs() <= 1e-8 * emp.total.abs().max(1e-12),
            "empirical {} vs trace {}",
            emp.total,
            total_from_trace
        );
    }

    #[test]
    fn first_layer_objective_equals_tail_sum() {
        // at the first layer the total equals the dropped score mass
        let model = toy_model(17, &[8, 6]);
        let ds = toy_dataset(600, 32, 8);
        let cfg = CompressionConfig::new(LossConfig::base_only(BaseKind::Mse));
        let stats = accumulate_clean_stats(&model, &ds, &cfg.loss_cfg).unwrap();
        let pooled = stats.pooled().unwrap();
        let k = 3;
        let (compressed, _) = compress_model(
            &model,
            &PipelineStats::Plain(pooled.clone()),
            &ds.samples,
            &plan_of(vec![k]),
            &cfg,
        )
        .unwrap();
        let fisher_factor = factor_spd(&pooled[0].fisher_z, &cfg.jitter_schedule).unwrap();
        let whitener = fisher_factor.whitener();
        let clean_factor = factor_spd(&pooled[0].sigma_xx, &cfg.jitter_schedule).unwrap();
        let obj =
            empirical_objective(&model, &compressed, 0, &whitener, 0.0, &ds.samples).unwrap();
        let product = whitener
            .matmul(&model.layer(0).dense_weight())
            .matmul(&clean_factor.factor);
        let dec = svd(&product).unwrap();
        let tail: f64 = dec.singular_values[k..].iter().map(|s| s * s).sum();
        assert!(
            (obj.total - tail).abs() <= 1e-6 * tail.max(1e-12),
            "objective {} vs tail {}",
            obj.total,
            tail
        );
    }

    #[test]
    fn rejects_plan_rank_above_min_dim() {
        let model = toy_model(19, &[4, 4]);
        let ds = toy_dataset(700, 8, 4);
        let cfg = CompressionConfig::new(LossConfig::base_only(BaseKind::Mse));
        let stats = accumulate_clean_stats(&model, &ds, &cfg.loss_cfg).unwrap();
        let err = compress_model(
            &model,
            &PipelineStats::Plain(stats.pooled().unwrap()),
            &ds.samples,
            &plan_of(vec![5]),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
