//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};

/// Points as plain rows.
pub type Points = Vec<Vec<f64>>;

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `frames[n][j][c]`.
pub fn mpjpe_loop(pred: &[Points], gt: &[Points]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (pf, gf) in pred.iter().zip(gt) {
        for (p, g) in pf.iter().zip(gf) {
            total += dist(p, g);
            count += 1;
        }
    }
    total / count as f64
}

/// Per-joint PCK percentages and their mean.
pub fn pck_loop(pred: &[Points], gt: &[Points], alpha_pct: f64, lengths: &[f64]) -> (Vec<f64>, f64) {
    let joints = gt[0].len();
    let mut per_joint = vec![0.0; joints];
    for j in 0..joints {
        let mut hits = 0usize;
        for f in 0..gt.len() {
            if dist(&pred[f][j], &gt[f][j]) <= alpha_pct / 100.0 * lengths[f] {
                hits += 1;
            }
        }
        per_joint[j] = 100.0 * hits as f64 / gt.len() as f64;
    }
    let avg = per_joint.iter().sum::<f64>() / joints as f64;
    (per_joint, avg)
}

fn centroid(p: &Points) -> Vec<f64> {
    let c = p[0].len();
    (0..c).map(|k| p.iter().map(|r| r[k]).sum::<f64>() / p.len() as f64).collect()
}

fn center(p: &Points) -> (Points, Vec<f64>) {
    let mu = centroid(p);
    (p.iter().map(|r| r.iter().zip(&mu).map(|(a, m)| a - m).collect()).collect(), mu)
}

/// Residual `mean_j |s * R(p_j) + t - q_j|` for a rotation given as a
/// function on points, with the optimal scale and translation for it.
fn residual_for_rotation(p: &Points, q: &Points, rot: impl Fn(&[f64]) -> Vec<f64>) -> (f64, Points) {
    let (pc, mu_p) = center(p);
    let (qc, mu_q) = center(q);
    let rp: Points = pc.iter().map(|r| rot(r)).collect();
    let num: f64 = rp.iter().zip(&qc).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).sum();
    let den: f64 = pc.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum();
    let s = (num / den).max(0.0);
    let _ = mu_p;
    let aligned: Points = rp.iter().map(|r| r.iter().zip(&mu_q).map(|(x, m)| s * x + m).collect()).collect();
    let res = aligned.iter().zip(q).map(|(a, b)| dist(a, b)).sum::<f64>() / q.len() as f64;
    (res, aligned)
}

fn rot2(theta: f64) -> impl Fn(&[f64]) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    move |p: &[f64]| vec![c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Closed-form 2-D similarity alignment: the optimal angle is
/// `atan2(Σ p × q, Σ p · q)` on centered points.
pub fn procrustes_2d(p: &Points, q: &Points) -> (f64, Points) {
    let (pc, _) = center(p);
    let (qc, _) = center(q);
    let cross: f64 = pc.iter().zip(&qc).map(|(a, b)| a[0] * b[1] - a[1] * b[0]).sum();
    let dot: f64 = pc.iter().zip(&qc).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
    residual_for_rotation(p, q, rot2(cross.atan2(dot)))
}

/// Sum of squared distances between matched rows.
pub fn sum_sq(a: &Points, b: &Points) -> f64 {
    a.iter().zip(b).map(|(x, y)| dist(x, y).powi(2)).sum()
}

/// Brute force over a 1-degree grid of proper rotations: the smallest sum of
/// squared errors and the mean residual of that grid point.
pub fn grid_search_2d(p: &Points, q: &Points) -> (f64, f64) {
    (0..360)
        .map(|deg| {
            let (res, aligned) = residual_for_rotation(p, q, rot2((deg as f64).to_radians()));
            (sum_sq(&aligned, q), res)
        })
        .fold((f64::INFINITY, f64::INFINITY), |best, cur| if cur.0 < best.0 { cur } else { best })
}

/// Horn's closed-form quaternion solution for 3-D similarity alignment.
pub fn procrustes_3d_horn(p: &Points, q: &Points) -> (f64, Points) {
    let (pc, _) = center(p);
    let (qc, _) = center(q);
    let mut m = Matrix3::<f64>::zeros();
    for (a, b) in pc.iter().zip(&qc) {
        m += Vector3::new(a[0], a[1], a[2]) * Vector3::new(b[0], b[1], b[2]).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let (best, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let qv = eig.eigenvectors.column(best);
    let (w, x, y, z) = (qv[0], qv[1], qv[2], qv[3]);
    let r = Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    );
    residual_for_rotation(p, q, move |a: &[f64]| {
        let v = r * Vector3::new(a[0], a[1], a[2]);
        vec![v[0], v[1], v[2]]
    })
}

/// Reference Procrustes-aligned MPJPE for 2-D or 3-D frames.
pub fn pa_mpjpe_oracle(pred: &[Points], gt: &[Points]) -> f64 {
    let per_frame: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, q)| if q[0].len() == 2 { procrustes_2d(p, q).0 } else { procrustes_3d_horn(p, q).0 })
        .collect();
    per_frame.iter().sum::<f64>() / per_frame.len() as f64
}

/// Turns `[N, J, C]` row-major data into nested points.
pub fn to_frames(data: &[f64], n: usize, j: usize, c: usize) -> Vec<Points> {
    (0..n).map(|f| (0..j).map(|jj| data[(f * j + jj) * c..][..c].to_vec()).collect()).collect()
}
