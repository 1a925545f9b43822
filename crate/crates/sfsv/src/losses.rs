//! Base losses, the derivative-matching Sobolev loss, the combined
//! calibration loss with analytic gradients, and the physics metrics for
//! 2-D velocity fields.

use crate::error::{Error, Result};
use crate::fields::{fd_derivative, fd_divergence, fd_vorticity, Axis, GridDims, GridField};

/// Division guard used wherever a sum of magnitudes appears in a denominator.
pub const DENOM_GUARD: f64 = 1e-15;

/// Task-level base loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    Mse,
    RelativeL1,
}

/// Norm applied pointwise to derivative mismatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobolevNorm {
    L1,
    L2,
}

/// PDE family; fixes the Sobolev derivative order used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdeFamily {
    IncompressibleNs,
    DiffusionReaction,
    CompressibleEuler,
    CompressibleNs,
    WaveEquation,
    ShallowWater,
}

impl PdeFamily {
    /// Highest derivative order matched for this family.
    pub fn sobolev_order(self) -> usize {
        match self {
            PdeFamily::IncompressibleNs | PdeFamily::DiffusionReaction => 2,
            PdeFamily::CompressibleEuler
            | PdeFamily::CompressibleNs
            | PdeFamily::WaveEquation
            | PdeFamily::ShallowWater => 1,
        }
    }
}

/// Configuration of the combined loss `base + sobolev_scale * sobolev`.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub base_kind: BaseKind,
    /// Highest matched derivative order, 0..=2.
    pub sobolev_order: usize,
    pub sobolev_norm: SobolevNorm,
    /// Per-order weights for derivative orders 0, 1, 2.
    pub derivative_weights: [f64; 3],
    /// Scale of the Sobolev term in the combined loss; 0 disables it.
    pub sobolev_scale: f64,
    /// Grid interpretation of flat vectors; required when `sobolev_scale > 0`.
    pub grid: Option<GridDims>,
}

impl LossConfig {
    /// Plain base loss, no Sobolev term.
    pub fn base_only(base_kind: BaseKind) -> Self {
        Self {
            base_kind,
            sobolev_order: 0,
            sobolev_norm: SobolevNorm::L2,
            derivative_weights: [1.0; 3],
            sobolev_scale: 0.0,
            grid: None,
        }
    }

    /// Loss for a PDE family with the order fixed by the family table.
    pub fn for_family(
        family: PdeFamily,
        base_kind: BaseKind,
        norm: SobolevNorm,
        scale: f64,
        grid: GridDims,
    ) -> Self {
        Self {
            base_kind,
            sobolev_order: family.sobolev_order(),
            sobolev_norm: norm,
            derivative_weights: [1.0; 3],
            sobolev_scale: scale,
            grid: Some(grid),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sobolev_order > 2 {
            return Err(Error::Config(format!(
                "sobolev order {} out of range 0..=2",
                self.sobolev_order
            )));
        }
        for w in self.derivative_weights {
            if !(w > 0.0) {
                return Err(Error::Config(format!("derivative weight {w} must be > 0")));
            }
        }
        if self.sobolev_scale < 0.0 {
            return Err(Error::Config(format!(
                "sobolev scale {} must be >= 0",
                self.sobolev_scale
            )));
        }
        if self.sobolev_scale > 0.0 && self.grid.is_none() {
            return Err(Error::Config(
                "sobolev term requires grid metadata".to_string(),
            ));
        }
        Ok(())
    }
}

/// Plain base loss. `mse = (1/d) sum (pred-target)^2`;
/// `relative_l1 = sum |pred-target| / max(sum |target|, 1e-15)`.
pub fn base_loss(pred: &[f64], target: &[f64], kind: BaseKind) -> f64 {
    assert_eq!(pred.len(), target.len(), "base_loss length mismatch");
    match kind {
        BaseKind::Mse => {
            let d = pred.len().max(1) as f64;
            pred.iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / d
        }
        BaseKind::RelativeL1 => {
            let num: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
            let den: f64 = target.iter().map(|t| t.abs()).sum();
            num / den.max(DENOM_GUARD)
        }
    }
}

/// Gradient of [`base_loss`] with respect to `pred`. The `l1` subgradient at
/// zero residual is 0.
pub fn base_loss_grad(pred: &[f64], target: &[f64], kind: BaseKind) -> Vec<f64> {
    assert_eq!(pred.len(), target.len(), "base_loss_grad length mismatch");
    match kind {
        BaseKind::Mse => {
            let scale = 2.0 / pred.len().max(1) as f64;
            pred.iter()
                .zip(target)
                .map(|(p, t)| scale * (p - t))
                .collect()
        }
        BaseKind::RelativeL1 => {
            let den: f64 = target.iter().map(|t| t.abs()).sum();
            let inv = 1.0 / den.max(DENOM_GUARD);
            pred.iter()
                .zip(target)
                .map(|(p, t)| inv * subgradient_sign(p - t))
                .collect()
        }
    }
}

#[inline]
fn subgradient_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Multi-indices of exactly order `o`, enumerated as
/// `{(), (x), (y), (xx), (xy), (yy)}`.
fn multi_indices(order: usize) -> &'static [&'static [Axis]] {
    match order {
        0 => &[&[]],
        1 => &[&[Axis::X], &[Axis::Y]],
        2 => &[
            &[Axis::X, Axis::X],
            &[Axis::X, Axis::Y],
            &[Axis::Y, Axis::Y],
        ],
        _ => unreachable!("orders above 2 are rejected by validate()"),
    }
}

fn apply_multi_index(field: &GridField, alpha: &[Axis]) -> GridField {
    let mut out = field.clone();
    for &axis in alpha {
        out = fd_derivative(&out, axis);
    }
    out
}

/// Derivative-matching loss
/// `sum_{|alpha| <= p} w_|alpha| * (1/(C*|grid|)) * sum |D^alpha(pred - target)|^q`.
pub fn sobolev_loss(pred: &GridField, target: &GridField, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if pred.dims() != target.dims() {
        return Err(Error::Contract("sobolev_loss grid mismatch".into()));
    }
    let diff = GridField::from_fn(pred.dims(), |c, i, j| {
        pred.get(c, i, j) - target.get(c, i, j)
    });
    let norm = 1.0 / pred.dims().len() as f64;
    let mut total = 0.0;
    for order in 0..=cfg.sobolev_order {
        let weight = cfg.derivative_weights[order];
        for alpha in multi_indices(order) {
            let d = apply_multi_index(&diff, alpha);
            let term: f64 = match cfg.sobolev_norm {
                SobolevNorm::L1 => d.as_flat().iter().map(|v| v.abs()).sum(),
                SobolevNorm::L2 => d.as_flat().iter().map(|v| v * v).sum(),
            };
            total += weight * norm * term;
        }
    }
    Ok(total)
}

/// Analytic gradient of [`sobolev_loss`] with respect to `pred`, flattened in
/// field layout. Uses the periodic adjoint `D^T = -D` per first derivative.
pub fn sobolev_loss_grad(pred: &GridField, target: &GridField, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pred.dims() != target.dims() {
        return Err(Error::Contract("sobolev_loss_grad grid mismatch".into()));
    }
    let diff = GridField::from_fn(pred.dims(), |c, i, j| {
        pred.get(c, i, j) - target.get(c, i, j)
    });
    let norm = 1.0 / pred.dims().len() as f64;
    let mut grad = vec![0.0; pred.dims().len()];
    for order in 0..=cfg.sobolev_order {
        let weight = cfg.derivative_weights[order];
        let sign = if order % 2 == 0 { 1.0 } else { -1.0 };
        for alpha in multi_indices(order) {
            let d = apply_multi_index(&diff, alpha);
            let pointwise = match cfg.sobolev_norm {
                SobolevNorm::L1 => GridField::from_fn(d.dims(), |c, i, j| {
                    subgradient_sign(d.get(c, i, j))
                }),
                SobolevNorm::L2 => {
                    GridField::from_fn(d.dims(), |c, i, j| 2.0 * d.get(c, i, j))
                }
            };
            let back = apply_multi_index(&pointwise, alpha);
            for (g, b) in grad.iter_mut().zip(back.as_flat()) {
                *g += weight * norm * sign * b;
            }
        }
    }
    Ok(grad)
}

fn grid_view(flat: &[f64], grid: GridDims, what: &str) -> Result<GridField> {
    if flat.len() != grid.len() {
        return Err(Error::Config(format!(
            "{what} length {} does not match grid {}x{}x{}",
            flat.len(),
            grid.channels,
            grid.height,
            grid.width
        )));
    }
    GridField::new(grid, flat.to_vec())
}

/// Combined calibration loss `base + sobolev_scale * sobolev`.
pub fn combined_loss(pred: &[f64], target: &[f64], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let base = base_loss(pred, target, cfg.base_kind);
    if cfg.sobolev_scale == 0.0 {
        return Ok(base);
    }
    let grid = cfg.grid.expect("validated");
    let p = grid_view(pred, grid, "prediction")?;
    let t = grid_view(target, grid, "target")?;
    Ok(base + cfg.sobolev_scale * sobolev_loss(&p, &t, cfg)?)
}

/// Analytic gradient of [`combined_loss`] with respect to `pred`.
pub fn combined_loss_grad(pred: &[f64], target: &[f64], cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut grad = base_loss_grad(pred, target, cfg.base_kind);
    if cfg.sobolev_scale == 0.0 {
        return Ok(grad);
    }
    let grid = cfg.grid.expect("validated");
    let p = grid_view(pred, grid, "prediction")?;
    let t = grid_view(target, grid, "target")?;
    let sg = sobolev_loss_grad(&p, &t, cfg)?;
    for (g, s) in grad.iter_mut().zip(sg) {
        *g += cfg.sobolev_scale * s;
    }
    Ok(grad)
}

/// Mean absolute discrete divergence of a 2-channel velocity field.
pub fn div_free_error(vel: &GridField) -> Result<f64> {
    let div = fd_divergence(vel)?;
    let cells = div.dims().cells() as f64;
    Ok(div.as_flat().iter().map(|v| v.abs()).sum::<f64>() / cells)
}

/// Mean absolute vorticity mismatch between two 2-channel velocity fields.
pub fn vorticity_error(pred_vel: &GridField, ref_vel: &GridField) -> Result<f64> {
    if pred_vel.dims() != ref_vel.dims() {
        return Err(Error::Contract("vorticity_error grid mismatch".into()));
    }
    let wp = fd_vorticity(pred_vel)?;
    let wr = fd_vorticity(ref_vel)?;
    let cells = wp.dims().cells() as f64;
    Ok(wp
        .as_flat()
        .iter()
        .zip(wr.as_flat())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / cells)
}

/// Relative change of one metric, or `Undefined` when the original is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelChange {
    Pct(f64),
    Undefined,
}

impl std::fmt::Display for RelChange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RelChange::Pct(v) => write!(f, "{v}"),
            RelChange::Undefined => write!(f, "undefined"),
        }
    }
}

/// Per-metric `100 * (compressed - original) / |original|`.
pub fn relative_change_report(
    orig_metrics: &[(String, f64)],
    compressed_metrics: &[(String, f64)],
) -> Result<Vec<(String, RelChange)>> {
    if orig_metrics.len() != compressed_metrics.len() {
        return Err(Error::Contract("metric key sets differ in length".into()));
    }
    let mut out = Vec::with_capacity(orig_metrics.len());
    for ((ko, vo), (kc, vc)) in orig_metrics.iter().zip(compressed_metrics) {
        if ko != kc {
            return Err(Error::Contract(format!(
                "metric keys do not match: '{ko}' vs '{kc}'"
            )));
        }
        let change = if *vo == 0.0 {
            RelChange::Undefined
        } else {
            RelChange::Pct(100.0 * (vc - vo) / vo.abs())
        };
        out.push((ko.clone(), change));
    }
    Ok(out)
}
