//! Gradient-boosted regression trees with quantile (pinball) loss.
//!
//! One boosting series is trained per requested quantile: trees are grown
//! on the pinball subgradient with variance-reduction splits, and each
//! leaf value is then set to the requested quantile of the current
//! residuals in that leaf. Prediction intervals are re-centered on the
//! median and a Gaussian σ is fitted from the ±2σ quantile pair.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantiles matching a ±2σ Gaussian interval (95.45% coverage).
pub const LOWER_2SIGMA: f64 = 0.02275;
pub const UPPER_2SIGMA: f64 = 0.97725;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostConfig {
    pub n_stages: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Strictly increasing, each in (0,1); must contain the median.
    pub quantiles: Vec<f64>,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            n_stages: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 5,
            quantiles: vec![LOWER_2SIGMA, 0.5, UPPER_2SIGMA],
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::Configuration("n_stages must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Configuration(
                "learning_rate must be in (0, 1]".to_string(),
            ));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Configuration(
                "subsample must be in (0, 1]".to_string(),
            ));
        }
        if self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::Configuration(
                "max_depth and min_samples_leaf must be >= 1".to_string(),
            ));
        }
        if self.quantiles.is_empty()
            || self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0))
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Configuration(
                "quantiles must be strictly increasing within (0, 1)".to_string(),
            ));
        }
        if !self.quantiles.iter().any(|q| (*q - 0.5).abs() < 1e-12) {
            return Err(Error::Configuration(
                "quantiles must include the median 0.5".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TreeNode {
    feature: usize,
    threshold: f64,
    left: usize,
    right: usize,
    value: f64,
    leaf: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut node = 0;
        loop {
            let n = &self.nodes[node];
            if n.leaf {
                return n.value;
            }
            node = if row[n.feature] <= n.threshold {
                n.left
            } else {
                n.right
            };
        }
    }

}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantileSeries {
    quantile: f64,
    initial: f64,
    trees: Vec<Tree>,
    /// Mean training pinball loss after each stage (initial value first).
    stage_losses: Vec<f64>,
}

/// Boosted quantile regressors, one series per quantile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileEnsemble {
    pub config: BoostConfig,
    series: Vec<QuantileSeries>,
}

/// τ-quantile of a sorted slice with linear interpolation.
fn quantile_of_sorted(sorted: &[f64], tau: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * tau;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn quantile_of(values: &[f64], tau: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    quantile_of_sorted(&sorted, tau)
}

fn pinball_loss(y: &DVector<f64>, pred: &[f64], tau: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let d = y[i] - pred[i];
        acc += if d >= 0.0 { tau * d } else { (tau - 1.0) * d };
    }
    acc / y.len() as f64
}

struct SplitCandidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

fn best_split(
    x: &DMatrix<f64>,
    residual: &[f64],
    indices: &[usize],
    min_samples_leaf: usize,
) -> Option<SplitCandidate> {
    let n = indices.len();
    if n < 2 * min_samples_leaf {
        return None;
    }
    let total_sum: f64 = indices.iter().map(|&i| residual[i]).sum();
    let total_sq: f64 = indices.iter().map(|&i| residual[i] * residual[i]).sum();
    let parent_sse = total_sq - total_sum * total_sum / n as f64;

    let mut best: Option<SplitCandidate> = None;
    for feature in 0..x.ncols() {
        let mut order: Vec<usize> = indices.to_vec();
        order.sort_by(|&a, &b| {
            x[(a, feature)]
                .total_cmp(&x[(b, feature)])
                .then(a.cmp(&b))
        });
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for k in 0..n - 1 {
            let i = order[k];
            left_sum += residual[i];
            left_sq += residual[i] * residual[i];
            let n_left = k + 1;
            let n_right = n - n_left;
            if n_left < min_samples_leaf || n_right < min_samples_leaf {
                continue;
            }
            let v_here = x[(order[k], feature)];
            let v_next = x[(order[k + 1], feature)];
            if v_here == v_next {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let right_sq = total_sq - left_sq;
            let sse_left = left_sq - left_sum * left_sum / n_left as f64;
            let sse_right = right_sq - right_sum * right_sum / n_right as f64;
            let gain = parent_sse - sse_left - sse_right;
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(SplitCandidate {
                    feature,
                    threshold: 0.5 * (v_here + v_next),
                    gain,
                    left: order[..n_left].to_vec(),
                    right: order[n_left..].to_vec(),
                });
            }
        }
    }
    best.filter(|b| b.gain > 1e-12)
}

/// Grow one regression tree on `residual` over the rows in `indices`,
/// returning the tree and, per leaf node id, the training rows routed to
/// that leaf.
fn grow_tree(
    x: &DMatrix<f64>,
    residual: &[f64],
    indices: Vec<usize>,
    max_depth: usize,
    min_samples_leaf: usize,
) -> (Tree, Vec<(usize, Vec<usize>)>) {
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut leaves: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut stack: Vec<(usize, Vec<usize>, usize)> = Vec::new(); // (node id, rows, depth)

    nodes.push(TreeNode {
        feature: 0,
        threshold: 0.0,
        left: 0,
        right: 0,
        value: 0.0,
        leaf: true,
    });
    stack.push((0, indices, 0));

    while let Some((node_id, rows, depth)) = stack.pop() {
        let split = if depth < max_depth {
            best_split(x, residual, &rows, min_samples_leaf)
        } else {
            None
        };
        match split {
            Some(s) => {
                let left_id = nodes.len();
                let right_id = nodes.len() + 1;
                nodes.push(TreeNode {
                    feature: 0,
                    threshold: 0.0,
                    left: 0,
                    right: 0,
                    value: 0.0,
                    leaf: true,
                });
                nodes.push(TreeNode {
                    feature: 0,
                    threshold: 0.0,
                    left: 0,
                    right: 0,
                    value: 0.0,
                    leaf: true,
                });
                let node = &mut nodes[node_id];
                node.feature = s.feature;
                node.threshold = s.threshold;
                node.left = left_id;
                node.right = right_id;
                node.leaf = false;
                stack.push((right_id, s.right, depth + 1));
                stack.push((left_id, s.left, depth + 1));
            }
            None => {
                let mean =
                    rows.iter().map(|&i| residual[i]).sum::<f64>() / rows.len().max(1) as f64;
                nodes[node_id].value = mean;
                leaves.push((node_id, rows));
            }
        }
    }
    (Tree { nodes }, leaves)
}

fn boost_one_quantile(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    config: &BoostConfig,
) -> QuantileSeries {
    let n = x.nrows();
    let initial = quantile_of(y.as_slice(), tau);
    let mut f: Vec<f64> = vec![initial; n];
    let mut trees = Vec::with_capacity(config.n_stages);
    let mut stage_losses = vec![pinball_loss(y, &f, tau)];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ tau.to_bits());
    let n_sub = ((n as f64 * config.subsample).floor() as usize).max(1);

    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();

    for _ in 0..config.n_stages {
        let sample: Vec<usize> = if n_sub < n {
            let mut idx = rand::seq::index::sample(&mut rng, n, n_sub).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..n).collect()
        };

        // Pinball subgradient: τ - 1{y < F}.
        let residual: Vec<f64> = (0..n)
            .map(|i| if y[i] < f[i] { tau - 1.0 } else { tau })
            .collect();

        let (mut tree, leaves) = grow_tree(
            x,
            &residual,
            sample,
            config.max_depth,
            config.min_samples_leaf,
        );
        // Line-search step per leaf: the τ-quantile of the residuals
        // y - F routed to that leaf.
        for (node_id, leaf_rows) in &leaves {
            let deltas: Vec<f64> = leaf_rows.iter().map(|&i| y[i] - f[i]).collect();
            tree.nodes[*node_id].value = quantile_of(&deltas, tau);
        }
        for i in 0..n {
            f[i] += config.learning_rate * tree.predict_row(&rows[i]);
        }
        stage_losses.push(pinball_loss(y, &f, tau));
        trees.push(tree);
    }

    QuantileSeries {
        quantile: tau,
        initial,
        trees,
        stage_losses,
    }
}

/// Train one boosting series per configured quantile. Deterministic for a
/// given seed; quantile series are independent and trained in parallel.
pub fn fit_quantile(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &BoostConfig,
) -> Result<QuantileEnsemble> {
    config.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
            context: "boosting rows vs targets".to_string(),
        });
    }
    if x.nrows() < config.min_samples_leaf {
        return Err(Error::EmptyDataset(format!(
            "{} rows but min_samples_leaf = {}",
            x.nrows(),
            config.min_samples_leaf
        )));
    }
    let series: Vec<QuantileSeries> = config
        .quantiles
        .par_iter()
        .map(|&tau| boost_one_quantile(x, y, tau, config))
        .collect();
    Ok(QuantileEnsemble {
        config: config.clone(),
        series,
    })
}

impl QuantileEnsemble {
    pub fn quantiles(&self) -> Vec<f64> {
        self.series.iter().map(|s| s.quantile).collect()
    }

    /// Mean training pinball loss per stage for the series closest to
    /// `tau` (initial value first).
    pub fn training_loss(&self, tau: f64) -> Option<&[f64]> {
        self.series
            .iter()
            .find(|s| (s.quantile - tau).abs() < 1e-12)
            .map(|s| s.stage_losses.as_slice())
    }

    /// Predictions for every quantile series: rows × quantiles.
    pub fn predict_quantiles(&self, x_star: &DMatrix<f64>) -> DMatrix<f64> {
        let m = x_star.nrows();
        let mut out = DMatrix::zeros(m, self.series.len());
        for i in 0..m {
            let row: Vec<f64> = x_star.row(i).iter().copied().collect();
            for (j, series) in self.series.iter().enumerate() {
                let mut v = series.initial;
                for tree in &series.trees {
                    v += self.config.learning_rate * tree.predict_row(&row);
                }
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<QuantileEnsemble> {
        serde_json::from_str(text).map_err(|e| Error::ModelLoad(e.to_string()))
    }
}

/// One prediction interval, re-centered on the median with a Gaussian σ
/// fitted from the ±2σ quantile pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntervalPrediction {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct IntervalBatch {
    pub rows: Vec<IntervalPrediction>,
    /// Number of rows whose raw quantile predictions crossed and were
    /// repaired by sorting.
    pub crossings_repaired: usize,
}

/// Predict ±2σ intervals. Requires the configured quantiles to include
/// the median and the (0.02275, 0.97725) pair.
pub fn predict_interval(ensemble: &QuantileEnsemble, x_star: &DMatrix<f64>) -> Result<IntervalBatch> {
    let quantiles = ensemble.quantiles();
    let find = |target: f64| {
        quantiles
            .iter()
            .position(|q| (q - target).abs() < 1e-9)
            .ok_or_else(|| {
                Error::Configuration(format!(
                    "interval prediction requires quantile {target}, have {quantiles:?}"
                ))
            })
    };
    let idx_lo = find(LOWER_2SIGMA)?;
    let idx_med = find(0.5)?;
    let idx_hi = find(UPPER_2SIGMA)?;

    let raw = ensemble.predict_quantiles(x_star);
    let mut rows = Vec::with_capacity(raw.nrows());
    let mut crossings_repaired = 0;
    for i in 0..raw.nrows() {
        let mut values: Vec<f64> = raw.row(i).iter().copied().collect();
        let crossed = values.windows(2).any(|w| w[1] < w[0]);
        if crossed {
            values.sort_by(|a, b| a.total_cmp(b));
            crossings_repaired += 1;
        }
        let mean = values[idx_med];
        let sigma = (values[idx_hi] - values[idx_lo]) / 4.0;
        rows.push(IntervalPrediction {
            mean,
            lower: mean - 2.0 * sigma,
            upper: mean + 2.0 * sigma,
            sigma,
        });
    }
    Ok(IntervalBatch {
        rows,
        crossings_repaired,
    })
}
