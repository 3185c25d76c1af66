//! Training loss and the four benchmark metrics, with occlusion-aware masking.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};
use crate::tape::{Graph, VarId};

/// Robust loss configuration: `sum_i (||pred_i - gt_i||_1 + epsilon)^q` over
/// masked-in points, optionally averaged instead of summed.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub epsilon: f64,
    pub q: f64,
    pub mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.01,
            q: 0.4,
            mean: false,
        }
    }
}

/// Loss value plus how many points contributed; `points_used == 0` is the
/// empty-mask warning signal (value 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustLoss<S> {
    pub value: S,
    pub points_used: usize,
}

/// Tape version of the robust loss, for training graphs. Returns the scalar
/// node and the number of points that contributed.
pub fn robust_loss_var<S: Scalar>(
    g: &mut Graph<S>,
    pred: VarId,
    gt: VarId,
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<(VarId, usize)> {
    let n = g.value(pred).rows();
    if g.value(gt).shape() != g.value(pred).shape() {
        return Err(Error::invalid_argument(format!(
            "robust_loss shape mismatch: pred {:?}, gt {:?}",
            g.value(pred).shape(),
            g.value(gt).shape()
        )));
    }
    if mask.len() != n {
        return Err(Error::invalid_argument(format!(
            "robust_loss mask length {} != N {n}",
            mask.len()
        )));
    }
    if !g.value(pred).all_finite() || !g.value(gt).all_finite() {
        return Err(Error::invalid_input("NaN or infinity in robust_loss input"));
    }
    let selected: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let count = selected.len();
    if count == 0 {
        let zero = g.constant(Matrix::zeros(1, 1));
        return Ok((zero, 0));
    }
    let pred_sel = g.gather_rows(pred, selected.clone());
    let gt_sel = g.gather_rows(gt, selected);
    let diff = g.sub(pred_sel, gt_sel);
    let mag = g.abs(diff);
    let l1 = g.row_sum(mag);
    let shifted = g.add_scalar(l1, cfg.epsilon);
    let powed = g.powf(shifted, cfg.q);
    let total = g.sum_all(powed);
    let out = if cfg.mean {
        g.scale(total, 1.0 / count as f64)
    } else {
        total
    };
    Ok((out, count))
}

/// Plain-value robust loss over flow fields.
pub fn robust_loss<S: Scalar>(
    pred: &Matrix<S>,
    gt: &Matrix<S>,
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<RobustLoss<S>> {
    let mut g: Graph<S> = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let (var, points_used) = robust_loss_var(&mut g, p, t, mask, cfg)?;
    Ok(RobustLoss {
        value: g.scalar(var),
        points_used,
    })
}

/// The benchmark metrics over one evaluated point set. Accuracies and the
/// outlier rate are percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub epe3d: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub outliers: f64,
    pub count: usize,
}

impl Metrics {
    /// Stable machine-readable record: fields in the order
    /// `split epe3d acc_s acc_r outliers count`.
    pub fn to_record(&self, split: &str) -> String {
        format!(
            "split={} epe3d={:.6} acc_s={:.3} acc_r={:.3} outliers={:.3} count={}",
            split, self.epe3d, self.acc_s, self.acc_r, self.outliers, self.count
        )
    }
}

/// Streaming metrics accumulator so multi-scene evaluations average per
/// point, not per scene.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricsAccum {
    sum_epe: f64,
    n_acc_s: usize,
    n_acc_r: usize,
    n_outlier: usize,
    count: usize,
}

impl MetricsAccum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold in one point given its endpoint error and ground-truth norm.
    /// When the ground-truth flow is zero the relative conditions are treated
    /// as not satisfied and the absolute thresholds decide alone.
    pub fn add_point(&mut self, epe: f64, gt_norm: f64) {
        let rel = if gt_norm > 0.0 { Some(epe / gt_norm) } else { None };
        let rel_lt = |t: f64| rel.map(|r| r < t).unwrap_or(false);
        let rel_gt = |t: f64| rel.map(|r| r > t).unwrap_or(false);
        self.sum_epe += epe;
        if epe < 0.05 || rel_lt(0.05) {
            self.n_acc_s += 1;
        }
        if epe < 0.1 || rel_lt(0.1) {
            self.n_acc_r += 1;
        }
        if epe > 0.3 || rel_gt(0.1) {
            self.n_outlier += 1;
        }
        self.count += 1;
    }

    /// Fold in every masked-in point of a prediction/ground-truth pair.
    pub fn add_flow<S: Scalar>(
        &mut self,
        pred: &Matrix<S>,
        gt: &Matrix<S>,
        mask: &[bool],
    ) -> Result<()> {
        if pred.shape() != gt.shape() || pred.cols() != 3 {
            return Err(Error::invalid_argument(format!(
                "metrics shape mismatch: pred {:?}, gt {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        if mask.len() != pred.rows() {
            return Err(Error::invalid_argument(format!(
                "metrics mask length {} != N {}",
                mask.len(),
                pred.rows()
            )));
        }
        for i in 0..pred.rows() {
            if !mask[i] {
                continue;
            }
            let mut err2 = 0.0;
            let mut gt2 = 0.0;
            for c in 0..3 {
                let d = pred.get(i, c).as_f64() - gt.get(i, c).as_f64();
                err2 += d * d;
                let gv = gt.get(i, c).as_f64();
                gt2 += gv * gv;
            }
            self.add_point(err2.sqrt(), gt2.sqrt());
        }
        Ok(())
    }

    /// Finish the accumulation. Erroring on an empty selection keeps "no
    /// points evaluated" distinct from a perfect score.
    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::invalid_argument(
                "metrics over an empty point selection",
            ));
        }
        let n = self.count as f64;
        Ok(Metrics {
            epe3d: self.sum_epe / n,
            acc_s: 100.0 * self.n_acc_s as f64 / n,
            acc_r: 100.0 * self.n_acc_r as f64 / n,
            outliers: 100.0 * self.n_outlier as f64 / n,
            count: self.count,
        })
    }
}

/// EPE3D / ACC_S / ACC_R / Outliers over the masked-in points.
pub fn compute_metrics<S: Scalar>(
    pred: &Matrix<S>,
    gt: &Matrix<S>,
    mask: &[bool],
) -> Result<Metrics> {
    let mut acc = MetricsAccum::new();
    acc.add_flow(pred, gt, mask)?;
    acc.finish()
}
