//! Calibration statistics: per-layer input covariances and Fisher matrices
//! on the original model, paired clean/perturbed covariances during
//! sequential compression, and trace-based energy balancing across dataset
//! groups.

use crate::error::{Error, Result};
use crate::fields::{DatasetFile, Sample};
use crate::linalg::Matrix;
use crate::losses::LossConfig;
use crate::netcore::{backward, forward, forward_input_to, Layer, SequentialModel};

/// Division guard for the balancing scales.
const TRACE_EPS: f64 = 1e-15;

/// Per-layer calibration statistics for one dataset group.
#[derive(Debug, Clone)]
pub struct LayerStats {
    /// `E[X X^T]` over the group, `d_in x d_in`.
    pub sigma_xx: Matrix,
    /// `E[g g^T]` with `g` the combined-loss gradient at the linear output,
    /// `d_out x d_out`.
    pub fisher_z: Matrix,
    pub n_samples: usize,
    pub dataset_tag: String,
}

/// All layers of one dataset group.
#[derive(Debug, Clone)]
pub struct TagGroup {
    pub tag: String,
    pub layers: Vec<LayerStats>,
}

/// Clean statistics grouped by dataset tag, in first-appearance order.
#[derive(Debug, Clone)]
pub struct CleanStats {
    pub groups: Vec<TagGroup>,
}

impl CleanStats {
    pub fn num_layers(&self) -> usize {
        self.groups.first().map_or(0, |g| g.layers.len())
    }

    /// Sample-weighted mean over all groups: the statistics that plain
    /// accumulation over the whole dataset would produce.
    pub fn pooled(&self) -> Result<Vec<LayerStats>> {
        let n_layers = self.num_layers();
        if n_layers == 0 {
            return Err(Error::Contract("no statistics to pool".into()));
        }
        let total: usize = self.groups.iter().map(|g| g.layers[0].n_samples).sum();
        let mut out = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let first = &self.groups[0].layers[l];
            let mut sigma = Matrix::zeros(first.sigma_xx.rows(), first.sigma_xx.cols());
            let mut fisher = Matrix::zeros(first.fisher_z.rows(), first.fisher_z.cols());
            for g in &self.groups {
                let s = &g.layers[l];
                let w = s.n_samples as f64 / total as f64;
                sigma = sigma.add_scaled(&s.sigma_xx, w);
                fisher = fisher.add_scaled(&s.fisher_z, w);
            }
            out.push(LayerStats {
                sigma_xx: sigma,
                fisher_z: fisher,
                n_samples: total,
                dataset_tag: "pooled".to_string(),
            });
        }
        Ok(out)
    }
}

/// Clean/perturbed cross-statistics entering one layer.
#[derive(Debug, Clone)]
pub struct PairStats {
    /// `E[X' X^T]`, generally asymmetric.
    pub sigma_xpx: Matrix,
    /// `E[X' X'^T]`, symmetric PSD.
    pub sigma_xpxp: Matrix,
    pub n_samples: usize,
}

/// One balancing scale application.
#[derive(Debug, Clone)]
pub struct ScaleEntry {
    pub layer: usize,
    pub tag: String,
    pub s_sigma: f64,
    pub s_fisher: f64,
}

/// Per-layer balanced statistics plus the applied scales.
#[derive(Debug, Clone)]
pub struct BalancedStats {
    pub tags: Vec<String>,
    pub layers: Vec<BalancedLayer>,
    pub scale_log: Vec<ScaleEntry>,
}

/// Balanced clean covariance and Fisher matrix of one layer.
#[derive(Debug, Clone)]
pub struct BalancedLayer {
    pub sigma_xx: Matrix,
    pub fisher_z: Matrix,
}

fn add_outer(acc: &mut Matrix, v: &[f64]) {
    let n = v.len();
    for i in 0..n {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        for j in 0..n {
            let cur = acc.get(i, j);
            acc.set(i, j, cur + vi * v[j]);
        }
    }
}

fn add_cross(acc: &mut Matrix, a: &[f64], b: &[f64]) {
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            let cur = acc.get(i, j);
            acc.set(i, j, cur + ai * bj);
        }
    }
}

/// Accumulate `sigma_xx` and `fisher_z` for every layer of a dense model,
/// one group per distinct dataset tag (first-appearance order).
pub fn accumulate_clean_stats(
    model: &SequentialModel,
    dataset: &DatasetFile,
    loss_cfg: &LossConfig,
) -> Result<CleanStats> {
    if dataset.samples.is_empty() {
        return Err(Error::Contract("empty calibration dataset".into()));
    }
    if model
        .layers()
        .iter()
        .any(|l| !matches!(l, Layer::Dense(_)))
    {
        return Err(Error::Contract(
            "clean statistics require an uncompressed dense model".into(),
        ));
    }
    let n_layers = model.num_layers();
    struct Acc {
        tag: String,
        sigma: Vec<Matrix>,
        fisher: Vec<Matrix>,
        n: usize,
    }
    let mut accs: Vec<Acc> = Vec::new();

    for (idx, sample) in dataset.samples.iter().enumerate() {
        let trace = forward(model, sample.input.as_flat())?;
        let grads = backward(model, &trace, sample.target.as_flat(), loss_cfg)?;
        for (li, g) in grads.z_grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient at sample {idx}, layer {li}"
                )));
            }
        }
        let acc = match accs.iter_mut().find(|a| a.tag == sample.tag) {
            Some(a) => a,
            None => {
                accs.push(Acc {
                    tag: sample.tag.clone(),
                    sigma: model
                        .layers()
                        .iter()
                        .map(|l| Matrix::zeros(l.d_in(), l.d_in()))
                        .collect(),
                    fisher: model
                        .layers()
                        .iter()
                        .map(|l| Matrix::zeros(l.d_out(), l.d_out()))
                        .collect(),
                    n: 0,
                });
                accs.last_mut().expect("just pushed")
            }
        };
        for li in 0..n_layers {
            add_outer(&mut acc.sigma[li], &trace.inputs_per_layer[li]);
            add_outer(&mut acc.fisher[li], &grads.z_grads[li]);
        }
        acc.n += 1;
    }

    let groups = accs
        .into_iter()
        .map(|acc| {
            let inv = 1.0 / acc.n as f64;
            let layers = acc
                .sigma
                .into_iter()
                .zip(acc.fisher)
                .map(|(s, f)| LayerStats {
                    sigma_xx: s.scale(inv),
                    fisher_z: f.scale(inv),
                    n_samples: acc.n,
                    dataset_tag: acc.tag.clone(),
                })
                .collect();
            TagGroup {
                tag: acc.tag,
                layers,
            }
        })
        .collect();
    Ok(CleanStats { groups })
}

fn check_same_architecture(a: &SequentialModel, b: &SequentialModel) -> Result<()> {
    if a.num_layers() != b.num_layers() {
        return Err(Error::Contract(format!(
            "architecture mismatch: {} vs {} layers",
            a.num_layers(),
            b.num_layers()
        )));
    }
    for i in 0..a.num_layers() {
        if a.layer(i).d_in() != b.layer(i).d_in() || a.layer(i).d_out() != b.layer(i).d_out() {
            return Err(Error::Contract(format!(
                "architecture mismatch at layer {i}"
            )));
        }
    }
    Ok(())
}

/// Run the original and partially compressed models in lockstep over the
/// samples; accumulate `E[X' X^T]` and `E[X' X'^T]` of the activations
/// entering `layer_index`.
pub fn accumulate_pair_stats(
    orig_model: &SequentialModel,
    partial_model: &SequentialModel,
    samples: &[Sample],
    layer_index: usize,
) -> Result<PairStats> {
    let groups = accumulate_pair_stats_grouped(orig_model, partial_model, samples, layer_index)?;
    let total: usize = groups.iter().map(|(_, p)| p.n_samples).sum();
    let d = orig_model.layer(layer_index).d_in();
    let mut xpx = Matrix::zeros(d, d);
    let mut xpxp = Matrix::zeros(d, d);
    for (_, p) in &groups {
        let w = p.n_samples as f64 / total as f64;
        xpx = xpx.add_scaled(&p.sigma_xpx, w);
        xpxp = xpxp.add_scaled(&p.sigma_xpxp, w);
    }
    Ok(PairStats {
        sigma_xpx: xpx,
        sigma_xpxp: xpxp,
        n_samples: total,
    })
}

/// Same as [`accumulate_pair_stats`] but grouped by dataset tag
/// (first-appearance order), as needed by balanced reconstruction.
pub fn accumulate_pair_stats_grouped(
    orig_model: &SequentialModel,
    partial_model: &SequentialModel,
    samples: &[Sample],
    layer_index: usize,
) -> Result<Vec<(String, PairStats)>> {
    check_same_architecture(orig_model, partial_model)?;
    if samples.is_empty() {
        return Err(Error::Contract("empty calibration dataset".into()));
    }
    if layer_index >= orig_model.num_layers() {
        return Err(Error::Contract(format!(
            "layer index {layer_index} out of range"
        )));
    }
    let d = orig_model.layer(layer_index).d_in();
    struct Acc {
        tag: String,
        xpx: Matrix,
        xpxp: Matrix,
        n: usize,
    }
    let mut accs: Vec<Acc> = Vec::new();
    for sample in samples {
        let x = forward_input_to(orig_model, sample.input.as_flat(), layer_index)?;
        let xp = forward_input_to(partial_model, sample.input.as_flat(), layer_index)?;
        let acc = match accs.iter_mut().find(|a| a.tag == sample.tag) {
            Some(a) => a,
            None => {
                accs.push(Acc {
                    tag: sample.tag.clone(),
                    xpx: Matrix::zeros(d, d),
                    xpxp: Matrix::zeros(d, d),
                    n: 0,
                });
                accs.last_mut().expect("just pushed")
            }
        };
        add_cross(&mut acc.xpx, &xp, &x);
        add_outer(&mut acc.xpxp, &xp);
        acc.n += 1;
    }
    Ok(accs
        .into_iter()
        .map(|acc| {
            let inv = 1.0 / acc.n as f64;
            (
                acc.tag,
                PairStats {
                    sigma_xpx: acc.xpx.scale(inv),
                    sigma_xpxp: acc.xpxp.scale(inv),
                    n_samples: acc.n,
                },
            )
        })
        .collect())
}

/// Trace-based energy balancing across dataset groups: each group's
/// statistics are rescaled to the maximum per-layer trace and averaged, so
/// no group dominates by raw numeric scale.
pub fn balance_stats(stats: &CleanStats) -> Result<BalancedStats> {
    if stats.groups.is_empty() {
        return Err(Error::Contract("no dataset groups to balance".into()));
    }
    let n_layers = stats.num_layers();
    for g in &stats.groups {
        if g.layers.len() != n_layers {
            return Err(Error::Contract(format!(
                "group '{}' covers {} layers, expected {n_layers}",
                g.tag,
                g.layers.len()
            )));
        }
    }
    let count = stats.groups.len() as f64;
    let mut layers = Vec::with_capacity(n_layers);
    let mut scale_log = Vec::new();
    for l in 0..n_layers {
        let sigma_traces: Vec<f64> = stats.groups.iter().map(|g| g.layers[l].sigma_xx.trace()).collect();
        let fisher_traces: Vec<f64> = stats.groups.iter().map(|g| g.layers[l].fisher_z.trace()).collect();
        let tau_sigma = sigma_traces.iter().cloned().fold(f64::MIN, f64::max);
        let tau_fisher = fisher_traces.iter().cloned().fold(f64::MIN, f64::max);
        let first = &stats.groups[0].layers[l];
        let mut sigma = Matrix::zeros(first.sigma_xx.rows(), first.sigma_xx.cols());
        let mut fisher = Matrix::zeros(first.fisher_z.rows(), first.fisher_z.cols());
        for (gi, g) in stats.groups.iter().enumerate() {
            let s_sigma = if sigma_traces[gi] > TRACE_EPS {
                tau_sigma / sigma_traces[gi]
            } else {
                1.0
            };
            let s_fisher = if fisher_traces[gi] > TRACE_EPS {
                tau_fisher / fisher_traces[gi]
            } else {
                1.0
            };
            sigma = sigma.add_scaled(&g.layers[l].sigma_xx, s_sigma / count);
            fisher = fisher.add_scaled(&g.layers[l].fisher_z, s_fisher / count);
            scale_log.push(ScaleEntry {
                layer: l,
                tag: g.tag.clone(),
                s_sigma,
                s_fisher,
            });
        }
        layers.push(BalancedLayer {
            sigma_xx: sigma,
            fisher_z: fisher,
        });
    }
    Ok(BalancedStats {
        tags: stats.groups.iter().map(|g| g.tag.clone()).collect(),
        layers,
        scale_log,
    })
}

impl BalancedStats {
    /// The recorded clean-covariance scale for `(layer, tag)`.
    pub fn sigma_scale(&self, layer: usize, tag: &str) -> Option<f64> {
        self.scale_log
            .iter()
            .find(|e| e.layer == layer && e.tag == tag)
            .map(|e| e.s_sigma)
    }
}
