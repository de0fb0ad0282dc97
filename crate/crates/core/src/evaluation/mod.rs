//! Pose metrics: PCK@α, MPJPE and Procrustes-aligned MPJPE, plus the
//! per-joint / per-action report and its exports.
//!
//! Metric inputs are `[N, J, C]` frames. Everything is computed in `f64`
//! whatever the storage scalar.

mod report;

pub use report::{build_report, collect_frames, ActionRow, Averages, EvalFrames, JointRow, MetricReport};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PCK thresholds reported everywhere, in percent of the normalization length.
pub const PCK_THRESHOLDS: [u32; 5] = [50, 40, 30, 20, 10];

/// Left shoulder and right hip in COCO-17 order.
pub const TORSO_JOINTS: (usize, usize) = (5, 12);

/// Reference length for PCK.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormLength {
    /// Per-frame distance between the left shoulder and the right hip of the
    /// ground truth. Needs the 17-joint COCO layout.
    TorsoDiagonal,
    /// The same length for every frame, in coordinate units.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub norm: NormLength,
    /// Frames whose mean ground-truth confidence is below this are skipped.
    pub min_confidence: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { norm: NormLength::TorsoDiagonal, min_confidence: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckResult {
    /// Percentage of frames where each joint is within the threshold.
    pub per_joint: Vec<f64>,
    pub average: f64,
}

fn frames_dims<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    if pred.rank() != 3 {
        return Err(Error::shape(format!("expected [N, J, C] frames, got {:?}", pred.shape())));
    }
    let s = pred.shape();
    if s[0] == 0 || s[1] == 0 {
        return Err(Error::Empty("metric input has no frames or joints".into()));
    }
    Ok((s[0], s[1], s[2]))
}

/// Euclidean error of every joint, `[N * J]` row-major.
fn joint_errors<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, c: usize) -> Vec<f64> {
    pred.data()
        .chunks_exact(c)
        .zip(gt.data().chunks_exact(c))
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Per-frame normalization lengths for `gt: [N, J, C]`.
pub fn norm_lengths<S: Scalar>(gt: &Tensor<S>, norm: NormLength) -> Result<Vec<f64>> {
    if gt.rank() != 3 {
        return Err(Error::shape(format!("expected [N, J, C] frames, got {:?}", gt.shape())));
    }
    let (n, j, c) = (gt.shape()[0], gt.shape()[1], gt.shape()[2]);
    match norm {
        NormLength::Fixed(len) => Ok(vec![len; n]),
        NormLength::TorsoDiagonal => {
            let (a, b) = TORSO_JOINTS;
            if j != 17 {
                return Err(Error::config(format!(
                    "torso-diagonal PCK needs the 17 COCO joints, got J = {j}; use a fixed length"
                )));
            }
            Ok((0..n)
                .map(|f| (0..c).map(|k| (gt.at(&[f, a, k]).as_f64() - gt.at(&[f, b, k]).as_f64()).powi(2)).sum::<f64>().sqrt())
                .collect())
        }
    }
}

/// A joint counts as correct when its error is at most
/// `alpha_pct / 100 * norm_lengths[frame]`.
pub fn pck<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>, alpha_pct: f64, norm_lengths: &[f64]) -> Result<PckResult> {
    let (n, j, c) = frames_dims(pred, gt)?;
    if norm_lengths.len() != n {
        return Err(Error::shape(format!("{} normalization lengths for {n} frames", norm_lengths.len())));
    }
    if let Some((f, len)) = norm_lengths.iter().enumerate().find(|(_, l)| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::Degenerate(format!("normalization length {len} at frame {f} must be positive")));
    }
    let errors = joint_errors(pred, gt, c);
    let mut hits = vec![0usize; j];
    for (f, len) in norm_lengths.iter().enumerate() {
        let thr = alpha_pct / 100.0 * len;
        for (jj, h) in hits.iter_mut().enumerate() {
            if errors[f * j + jj] <= thr {
                *h += 1;
            }
        }
    }
    let per_joint: Vec<f64> = hits.iter().map(|&h| 100.0 * h as f64 / n as f64).collect();
    let average = per_joint.iter().sum::<f64>() / j as f64;
    Ok(PckResult { per_joint, average })
}

/// Mean error of each joint over the frames.
pub fn per_joint_mpjpe<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<Vec<f64>> {
    let (n, j, c) = frames_dims(pred, gt)?;
    let errors = joint_errors(pred, gt, c);
    let mut sums = vec![0.0; j];
    for (i, e) in errors.iter().enumerate() {
        sums[i % j] += e;
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

/// Mean per-joint Euclidean distance.
pub fn mpjpe<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    let (_, _, c) = frames_dims(pred, gt)?;
    let errors = joint_errors(pred, gt, c);
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Similarity transform `s · P · R + t ≈ Q` (points are rows).
#[derive(Clone, Debug, PartialEq)]
pub struct Procrustes {
    /// `[C, C]`, proper (`det = +1`).
    pub rotation: DMatrix<f64>,
    pub scale: f64,
    /// `[C]`.
    pub translation: Vec<f64>,
    /// `[J, C]`.
    pub aligned: DMatrix<f64>,
}

fn to_matrix<S: Scalar>(t: &Tensor<S>) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_iterator(r, c, t.data().iter().map(|v| v.as_f64()))
}

fn centered(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mean: Vec<f64> = (0..m.ncols()).map(|k| m.column(k).mean()).collect();
    let mut c = m.clone();
    for (k, mu) in mean.iter().enumerate() {
        c.column_mut(k).add_scalar_mut(-mu);
    }
    (c, mean)
}

/// Least-squares similarity alignment of `p` onto `q`, both `[J, C]`.
pub fn procrustes_align<S: Scalar>(p: &Tensor<S>, q: &Tensor<S>) -> Result<Procrustes> {
    if p.rank() != 2 || p.shape() != q.shape() {
        return Err(Error::shape(format!("procrustes needs matching [J, C] inputs, got {:?} and {:?}", p.shape(), q.shape())));
    }
    let (j, c) = (p.shape()[0], p.shape()[1]);
    if j < c {
        return Err(Error::shape(format!("procrustes needs J >= C, got J = {j}, C = {c}")));
    }
    procrustes_matrix(&to_matrix(p), &to_matrix(q))
}

fn procrustes_matrix(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Procrustes> {
    let c = p.ncols();
    let (pc, mu_p) = centered(p);
    let (qc, mu_q) = centered(q);
    let var_q = qc.norm_squared();
    let var_p = pc.norm_squared();
    if var_q <= f64::EPSILON * (1.0 + mu_q.iter().map(|v| v * v).sum::<f64>()) {
        return Err(Error::Degenerate("target points have zero variance".into()));
    }
    if var_p == 0.0 {
        return Err(Error::Degenerate("source points have zero variance".into()));
    }
    let cross = pc.transpose() * &qc;
    let (u, sigma, v) = jacobi_svd(&cross);
    let mut d = DMatrix::<f64>::identity(c, c);
    if u.determinant() * v.determinant() < 0.0 {
        d[(c - 1, c - 1)] = -1.0;
    }
    let rotation = &u * &d * v.transpose();
    let trace: f64 = (0..c).map(|i| sigma[i] * d[(i, i)]).sum();
    let scale = trace / var_p;
    let mu_p_row = DMatrix::from_row_slice(1, c, &mu_p);
    let shift = &mu_p_row * &rotation * scale;
    let translation: Vec<f64> = (0..c).map(|k| mu_q[k] - shift[(0, k)]).collect();
    let mut aligned = p * &rotation * scale;
    for (k, t) in translation.iter().enumerate() {
        aligned.column_mut(k).add_scalar_mut(*t);
    }
    Ok(Procrustes { rotation, scale, translation, aligned })
}

/// One-sided Jacobi SVD of a small square matrix: `a = U diag(σ) Vᵀ` with
/// `σ` descending. nalgebra's bidiagonal SVD loses accuracy on the
/// rank-deficient cross-covariances that three-joint 3-D frames produce.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for m in [&mut w, &mut v] {
                    for k in 0..m.nrows() {
                        let (x, y) = (m[(k, p)], m[(k, q)]);
                        m[(k, p)] = cs * x - sn * y;
                        m[(k, q)] = sn * x + cs * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|i| w.column(i).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let tol = norms[order[0]] * 1e-12;
    let mut u = DMatrix::<f64>::zeros(n, n);
    let mut v_sorted = DMatrix::<f64>::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        v_sorted.set_column(dst, &v.column(src));
        sigma.push(norms[src]);
        if norms[src] > tol {
            u.set_column(dst, &(w.column(src) / norms[src]));
        }
    }
    // complete U for null directions with Gram-Schmidt on the standard basis
    let mut basis = 0;
    for dst in 0..n {
        if sigma[dst] > tol {
            continue;
        }
        while basis < n {
            let mut e = nalgebra::DVector::<f64>::zeros(n);
            e[basis] = 1.0;
            basis += 1;
            for k in 0..n {
                if k != dst && u.column(k).norm_squared() > 0.0 {
                    let proj = u.column(k).dot(&e);
                    e -= u.column(k) * proj;
                }
            }
            if e.norm() > 1e-6 {
                u.set_column(dst, &(e.normalize()));
                break;
            }
        }
    }
    (u, sigma, v_sorted)
}

/// MPJPE after aligning every predicted frame onto its ground truth.
pub fn pa_mpjpe<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    let (n, j, _) = frames_dims(pred, gt)?;
    let mut total = 0.0;
    for f in 0..n {
        let q = to_matrix(&gt.index_axis0(f));
        let al = procrustes_matrix(&to_matrix(&pred.index_axis0(f)), &q)
            .map_err(|e| Error::Degenerate(format!("frame {f}: {e}")))?;
        total += (0..j).map(|r| (al.aligned.row(r) - q.row(r)).norm()).sum::<f64>();
    }
    Ok(total / (n * j) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_svd_handles_rank_deficient_input() {
        // three centered 3-D points: rank-2 cross-covariance
        let p = DMatrix::from_row_slice(3, 3, &[1.0, -0.5, 0.2, -0.3, 1.1, -0.7, -0.7, -0.6, 0.5]);
        let q = DMatrix::from_row_slice(3, 3, &[0.4, 0.9, -1.0, 0.8, -1.2, 0.3, -1.2, 0.3, 0.7]);
        let a = p.transpose() * q;
        let (u, sigma, v) = jacobi_svd(&a);
        let recon = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sigma.clone())) * v.transpose();
        assert!((recon - &a).norm() < 1e-12);
        assert!((u.transpose() * &u - DMatrix::identity(3, 3)).norm() < 1e-12);
        assert!((v.transpose() * &v - DMatrix::identity(3, 3)).norm() < 1e-12);
        assert!(sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(sigma[2] < 1e-12);
    }

    #[test]
    fn pck_one_in_one_out() {
        let gt = Tensor::<f64>::zeros(&[1, 2, 2]);
        let pred = Tensor::from_vec(&[1, 2, 2], vec![10.0, 0.0, 0.0, 80.0]).unwrap();
        let r = pck(&pred, &gt, 50.0, &[100.0]).unwrap();
        assert_eq!(r.per_joint, vec![100.0, 0.0]);
        assert_eq!(r.average, 50.0);
    }

    #[test]
    fn pck_rejects_nonpositive_length() {
        let t = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert!(pck(&t, &t, 50.0, &[0.0]).is_err());
        assert!(pck(&t, &t, 50.0, &[-1.0]).is_err());
    }

    #[test]
    fn mpjpe_three_four_five() {
        let gt = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let pred = Tensor::from_fn(&[2, 3, 2], |i| i as f64 + if i % 2 == 0 { 3.0 } else { 4.0 });
        assert_eq!(mpjpe(&pred, &gt).unwrap(), 5.0);
        assert!(mpjpe(&pred, &Tensor::zeros(&[2, 3, 3])).is_err());
    }

    #[test]
    fn procrustes_identity() {
        let p = Tensor::<f64>::from_vec(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let r = procrustes_align(&p, &p).unwrap();
        assert!((r.scale - 1.0).abs() < 1e-12);
        assert!((r.rotation.clone() - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!(r.translation.iter().all(|t| t.abs() < 1e-12));
    }

    #[test]
    fn procrustes_rejects_collapsed_target() {
        let p = Tensor::<f64>::from_vec(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let q = Tensor::full(&[3, 2], 4.0);
        assert!(matches!(procrustes_align(&p, &q), Err(Error::Degenerate(_))));
    }

    #[test]
    fn torso_needs_coco_layout() {
        assert!(norm_lengths(&Tensor::<f64>::zeros(&[1, 4, 2]), NormLength::TorsoDiagonal).is_err());
        let mut gt = Tensor::<f64>::zeros(&[1, 17, 2]);
        gt.set(&[0, 5, 0], 3.0);
        gt.set(&[0, 12, 1], 4.0);
        assert_eq!(norm_lengths(&gt, NormLength::TorsoDiagonal).unwrap(), vec![5.0]);
    }
}
