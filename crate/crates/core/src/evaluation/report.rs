use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mpjpe, norm_lengths, pa_mpjpe, pck, per_joint_mpjpe, MetricOptions, PCK_THRESHOLDS};
use crate::dataset::{CsiWindow, COCO17_NAMES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flattened evaluation frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalFrames<S> {
    /// `[N, J, C]`.
    pub pred: Tensor<S>,
    /// `[N, J, C]`.
    pub gt: Tensor<S>,
    pub actions: Vec<Option<String>>,
}

/// Pairs per-window predictions `[T, J, C]` with their windows and keeps
/// every frame whose mean ground-truth confidence reaches `min_confidence`.
pub fn collect_frames<S: Scalar>(preds: &[Tensor<S>], windows: &[CsiWindow<S>], min_confidence: f64) -> Result<EvalFrames<S>> {
    if preds.len() != windows.len() {
        return Err(Error::shape(format!("{} predictions for {} windows", preds.len(), windows.len())));
    }
    let mut pred_frames = Vec::new();
    let mut gt_frames = Vec::new();
    let mut actions = Vec::new();
    for (p, w) in preds.iter().zip(windows) {
        let gt = &w.skeleton.coords;
        if p.shape() != gt.shape() {
            return Err(Error::shape(format!("prediction {:?} vs window skeleton {:?}", p.shape(), gt.shape())));
        }
        for t in 0..gt.shape()[0] {
            if let Some(conf) = &w.skeleton.confidence {
                let row = conf.index_axis0(t);
                if row.sum().as_f64() / (row.len().max(1) as f64) < min_confidence {
                    continue;
                }
            }
            pred_frames.push(p.index_axis0(t));
            gt_frames.push(gt.index_axis0(t));
            actions.push(w.action_label.clone());
        }
    }
    if pred_frames.is_empty() {
        return Err(Error::Empty("no evaluation frames".into()));
    }
    let pred = Tensor::stack(&pred_frames.iter().collect::<Vec<_>>())?;
    let gt = Tensor::stack(&gt_frames.iter().collect::<Vec<_>>())?;
    Ok(EvalFrames { pred, gt, actions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointRow {
    pub joint: String,
    /// One entry per [`PCK_THRESHOLDS`] value.
    pub pck: Vec<f64>,
    pub mpjpe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub action: String,
    pub frames: usize,
    pub pck20: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub pck: Vec<f64>,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub units: String,
    pub frames: usize,
    pub thresholds: Vec<u32>,
    pub per_joint: Vec<JointRow>,
    pub per_action: Vec<ActionRow>,
    pub averages: Averages,
}

fn joint_name(j: usize, joints: usize) -> String {
    if joints == COCO17_NAMES.len() {
        COCO17_NAMES[j].to_string()
    } else {
        format!("joint{j}")
    }
}

pub fn build_report<S: Scalar>(frames: &EvalFrames<S>, opts: &MetricOptions, units: &str) -> Result<MetricReport> {
    let (pred, gt) = (&frames.pred, &frames.gt);
    if pred.rank() != 3 || pred.shape()[0] == 0 {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    if frames.actions.len() != pred.shape()[0] {
        return Err(Error::shape(format!("{} action labels for {} frames", frames.actions.len(), pred.shape()[0])));
    }
    let joints = pred.shape()[1];
    let lengths = norm_lengths(gt, opts.norm)?;
    let pcks = PCK_THRESHOLDS
        .iter()
        .map(|&a| pck(pred, gt, a as f64, &lengths))
        .collect::<Result<Vec<_>>>()?;
    let joint_err = per_joint_mpjpe(pred, gt)?;
    let per_joint: Vec<JointRow> = (0..joints)
        .map(|j| JointRow { joint: joint_name(j, joints), pck: pcks.iter().map(|p| p.per_joint[j]).collect(), mpjpe: joint_err[j] })
        .collect();
    let averages = Averages {
        pck: pcks.iter().map(|p| p.average).collect(),
        mpjpe: mpjpe(pred, gt)?,
        pa_mpjpe: pa_mpjpe(pred, gt)?,
    };

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in frames.actions.iter().enumerate() {
        if let Some(a) = a {
            groups.entry(a.as_str()).or_default().push(i);
        }
    }
    let per_action = groups
        .into_iter()
        .map(|(action, idx)| {
            let pick = |t: &Tensor<S>| Tensor::stack(&idx.iter().map(|&i| t.index_axis0(i)).collect::<Vec<_>>().iter().collect::<Vec<_>>());
            let sub_len: Vec<f64> = idx.iter().map(|&i| lengths[i]).collect();
            let r = pck(&pick(pred)?, &pick(gt)?, 20.0, &sub_len)?;
            Ok(ActionRow { action: action.to_string(), frames: idx.len(), pck20: r.average })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricReport {
        units: units.to_string(),
        frames: pred.shape()[0],
        thresholds: PCK_THRESHOLDS.to_vec(),
        per_joint,
        per_action,
        averages,
    })
}

impl MetricReport {
    /// PCK at one of the standard thresholds.
    pub fn pck_at(&self, alpha: u32) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == alpha).map(|i| self.averages.pck[i])
    }

    /// Tab-separated per-joint table with an `Average` row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("joint");
        for t in &self.thresholds {
            let _ = write!(out, "\tPCK@{t}");
        }
        let _ = writeln!(out, "\tMPJPE ({})", self.units);
        for row in &self.per_joint {
            out.push_str(&row.joint);
            for v in &row.pck {
                let _ = write!(out, "\t{v:.2}");
            }
            let _ = writeln!(out, "\t{:.4}", row.mpjpe);
        }
        out.push_str("Average");
        for v in &self.averages.pck {
            let _ = write!(out, "\t{v:.2}");
        }
        let _ = writeln!(out, "\t{:.4}", self.averages.mpjpe);
        let _ = writeln!(out, "PA-MPJPE\t{:.4}", self.averages.pa_mpjpe);
        out
    }

    /// `action,frames,pck20` rows for plotting.
    pub fn per_action_csv(&self) -> String {
        let mut out = String::from("action,frames,pck20\n");
        for r in &self.per_action {
            let _ = writeln!(out, "{},{},{:.4}", r.action.replace(',', " "), r.frames, r.pck20);
        }
        out
    }

    /// Writes `report.tsv`, `report.json` and `per_action.csv` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        for (name, text) in [("report.tsv", self.to_table()), ("report.json", json), ("per_action.csv", self.per_action_csv())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::NormLength;

    fn opts() -> MetricOptions {
        MetricOptions { norm: NormLength::Fixed(1.0), min_confidence: 0.0 }
    }

    #[test]
    fn perfect_prediction() {
        let gt = Tensor::<f64>::from_fn(&[2, 4, 2], |i| (i as f64).sin() * 3.0);
        let frames = EvalFrames { pred: gt.clone(), gt, actions: vec![Some("a".into()); 2] };
        let r = build_report(&frames, &opts(), "px").unwrap();
        assert!(r.averages.pck.iter().all(|&p| p == 100.0));
        assert_eq!(r.averages.mpjpe, 0.0);
        assert!(r.averages.pa_mpjpe < 1e-9);
        assert_eq!(r.per_action.len(), 1);
    }

    #[test]
    fn averages_are_row_means_and_actions_split() {
        let gt = Tensor::<f64>::from_fn(&[4, 3, 2], |i| (i as f64 * 0.9).cos() * 2.0);
        let pred = gt.map(|v| v * 1.1 + 0.05);
        let actions = vec![Some("walk".into()), Some("sit".into()), Some("walk".into()), None];
        let r = build_report(&EvalFrames { pred, gt, actions }, &opts(), "px").unwrap();
        for (k, avg) in r.averages.pck.iter().enumerate() {
            let mean = r.per_joint.iter().map(|row| row.pck[k]).sum::<f64>() / 3.0;
            assert!((avg - mean).abs() < 1e-9);
        }
        let mean = r.per_joint.iter().map(|row| row.mpjpe).sum::<f64>() / 3.0;
        assert!((r.averages.mpjpe - mean).abs() < 1e-9);
        let names: Vec<_> = r.per_action.iter().map(|a| a.action.as_str()).collect();
        assert_eq!(names, ["sit", "walk"]);
        assert!(r.to_table().lines().any(|l| l.starts_with("Average\t")));
        assert_eq!(r.per_action_csv().lines().count(), 3);
    }
}
